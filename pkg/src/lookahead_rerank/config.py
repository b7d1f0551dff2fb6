"""Experiment configuration: a flat ``key = value`` text file with a typed schema.

Lines starting with ``#`` are comments. Every key must appear in the schema
below; an unknown key is an error so typos in sweep scripts fail loudly.
Tuple-valued keys take comma-separated values.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data.types import RerankConfig

ABLATIONS = ("full", "no_soft", "no_weight", "no_hard", "exposure_only")
SWEEP_AXES = ("", "beam_size", "alpha", "tau_w")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: str = "runs/default"
    # the three named seeds
    env_seed: int = 0
    data_seed: int = 1
    model_seed: int = 2
    # synthetic data
    n_items: int = 200
    n_users: int = 5000
    sessions_per_user: int = 11
    logging_policy: str = "mixed"
    epsilon: float = 0.2
    # list shape and models
    n_candidates: int = 12
    list_len: int = 6
    embed_dim: int = 16
    d_model: int = 32
    d_pos: int = 8
    n_heads: int = 2
    ff_dim: int = 64
    evaluator_layers: int = 6
    generator_layers: int = 4
    n_score_buckets: int = 16
    dtype: str = "float32"
    # optimisation
    learning_rate: float = 5e-4
    batch_size: int = 1024
    lr_schedule: str = "cosine"
    # the evaluator fits best with smaller, decayed steps and mild shrinkage
    evaluator_learning_rate: float = 1e-3
    evaluator_batch_size: int = 256
    evaluator_weight_decay: float = 0.1
    evaluator_epochs: int = 30
    generator_epochs: int = 40
    # mining and distillation
    beam_size: int = 4
    topk: int = 12
    tau_w: float = 0.5
    alpha: float = 0.01
    mine_requests: int = 5000          # 0 mines every training request
    ablation: str = "full"
    # evaluation
    eval_requests: int = 0             # 0 evaluates every held-out request
    hr_samples: int = 10_000
    metric_seed: int = 0
    # experiment runners
    n_seeds: int = 3
    ablation_beam_size: int = 2
    ablation_variants: tuple = ABLATIONS
    sweep_axis: str = ""
    sweep_values: tuple = ()
    # phase toggles
    run_gen_data: bool = True
    run_split: bool = True
    run_train_eval: bool = True
    run_mine: bool = True
    run_train_gen: bool = True
    run_evaluate: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.rerank()
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        bad = set(self.ablation_variants) - set(ABLATIONS)
        if bad:
            raise ConfigError(f"unknown ablation variants {sorted(bad)}")
        if self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep_axis must be one of {SWEEP_AXES[1:]} or empty")
        if self.sweep_axis and self.ablation != "full":
            raise ConfigError("a sweep and a non-full ablation cannot be combined in one run")
        if self.sweep_axis and not self.sweep_values:
            raise ConfigError("sweep_values must be non-empty when sweep_axis is set")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be constant or cosine")
        if self.evaluator_learning_rate <= 0 or self.evaluator_weight_decay < 0:
            raise ConfigError("evaluator_learning_rate must be > 0 and "
                              "evaluator_weight_decay >= 0")
        for name in ("n_users", "sessions_per_user", "hr_samples", "n_seeds", "batch_size",
                     "evaluator_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("mine_requests", "eval_requests", "evaluator_epochs", "generator_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def rerank(self) -> RerankConfig:
        try:
            return RerankConfig(
                n_candidates=self.n_candidates, list_len=self.list_len, embed_dim=self.embed_dim,
                d_model=self.d_model, d_pos=self.d_pos, n_heads=self.n_heads,
                ff_dim=self.ff_dim, evaluator_layers=self.evaluator_layers,
                generator_layers=self.generator_layers, beam_size=self.beam_size,
                alpha=self.alpha, tau_w=self.tau_w, learning_rate=self.learning_rate,
                batch_size=self.batch_size, topk=self.topk,
                n_score_buckets=self.n_score_buckets)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        """Stable digest of every setting except the output directory."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        return replace(self, **overrides)

    def diff(self, other: "ExperimentConfig") -> dict:
        a, b = self.to_dict(), other.to_dict()
        return {k: [a[k], b[k]] for k in a if a[k] != b[k]}


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def parse_value(key: str, text: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if key == "ablation_variants":
                return tuple(parts)
            return tuple(_number(p) for p in parts)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None


def parse_overrides(items) -> dict:
    """``["key=value", ...]`` into a typed dict."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        key = key.strip()
        out[key] = parse_value(key, text)
    return out


def loads(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, text_value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = parse_value(key, text_value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def load_config(path=None, overrides=None) -> ExperimentConfig:
    values = {}
    if path is not None:
        values.update(loads(Path(path).read_text(), str(path)))
    values.update(parse_overrides(overrides))
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(config.dumps())
