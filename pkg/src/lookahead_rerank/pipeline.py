"""Experiment orchestration: data, evaluator, mining, generator, evaluation.

Every phase persists its outputs under the run directory and the next phase
reads them back from disk, so a run can resume after any completed phase.
Metric reports contain no timings; wall-clock lives in the manifest only.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, save_config
from .data import (
    EnvSpec,
    RequestBatch,
    load_dataset,
    save_dataset,
    split_leave_one_out,
    synth_generate,
)
from .evaluator import LookaheadEvaluator
from .generator import OnlineGenerator
from .metrics import DEFAULT_KS, MetricReport, evaluate_lists, write_table
from .miner import build_supervision_dataset, load_supervision, reweight, save_supervision

logger = logging.getLogger(__name__)

PHASES = ("gen_data", "split", "train_eval", "mine", "train_gen", "evaluate")


class PipelineError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        self.phase = phase
        self.cause = cause
        super().__init__(f"phase {phase!r} failed: {type(cause).__name__}: {cause}")


@dataclass
class RunManifest:
    config_hash: str
    seeds: dict
    output_dir: str
    artifacts: dict = field(default_factory=dict)      # name -> path
    phase_seconds: dict = field(default_factory=dict)
    completed: list = field(default_factory=list)
    failed: dict = field(default_factory=dict)

    def add(self, name: str, path) -> Path:
        self.artifacts[name] = str(path)
        return Path(path)

    @property
    def reports(self) -> dict:
        return {k: v for k, v in self.artifacts.items() if k.endswith("report")}

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seeds": self.seeds,
                "output_dir": self.output_dir, "artifacts": self.artifacts,
                "reports": self.reports, "phase_seconds": self.phase_seconds,
                "completed": self.completed, "failed": self.failed}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def make_env(config: ExperimentConfig) -> EnvSpec:
    return EnvSpec(seed=config.env_seed, n_items=config.n_items)


def make_evaluator(config: ExperimentConfig) -> LookaheadEvaluator:
    return LookaheadEvaluator(
        n_items=config.n_items, max_len=config.list_len, embed_dim=config.embed_dim,
        d_model=config.d_model, d_pos=config.d_pos, n_layers=config.evaluator_layers,
        n_heads=config.n_heads, ff_dim=config.ff_dim, n_score_buckets=config.n_score_buckets,
        learning_rate=config.evaluator_learning_rate, lr_schedule=config.lr_schedule,
        weight_decay=config.evaluator_weight_decay, batch_size=config.evaluator_batch_size,
        n_epochs=config.evaluator_epochs, random_state=config.model_seed, dtype=config.dtype)


def make_generator(config: ExperimentConfig) -> OnlineGenerator:
    return OnlineGenerator(
        n_items=config.n_items, list_len=config.list_len, embed_dim=config.embed_dim,
        d_model=config.d_model, d_pos=config.d_pos, n_layers=config.generator_layers,
        n_heads=config.n_heads, ff_dim=config.ff_dim, n_score_buckets=config.n_score_buckets,
        alpha=config.alpha, ablation=config.ablation, learning_rate=config.learning_rate,
        lr_schedule=config.lr_schedule, batch_size=config.batch_size,
        n_epochs=config.generator_epochs,
        random_state=config.model_seed, dtype=config.dtype)


def select_mining_requests(train, limit: int):
    """Most recent training session of every user first, then the next most recent, ...

    ``limit`` = 0 keeps all of them. Returned in request-id order.
    """
    by_user = defaultdict(list)
    for rec in train:
        by_user[rec.request.user_id].append(rec)
    ranked = []
    for recs in by_user.values():
        recs.sort(key=lambda r: r.request.request_id, reverse=True)
        ranked.extend((age, r.request.request_id, r) for age, r in enumerate(recs))
    ranked.sort(key=lambda x: (x[0], x[1]))
    if limit:
        ranked = ranked[:limit]
    return sorted((r for _, _, r in ranked), key=lambda r: r.request.request_id)


def evaluation_requests(test, limit: int):
    test = sorted(test, key=lambda r: r.request.request_id)
    return test[:limit] if limit else test


class Run:
    """Paths and phase implementations for one run directory."""

    def __init__(self, config: ExperimentConfig, shared_dir=None):
        self.config = config
        self.dir = Path(config.output_dir)
        # data, evaluator and the mining cache may live in a shared base run
        self.base = Path(shared_dir) if shared_dir is not None else self.dir
        self.manifest = RunManifest(
            config.hash(), {"env": config.env_seed, "data": config.data_seed,
                            "model": config.model_seed}, str(self.dir))
        previous = self.dir / "manifest.json"
        if previous.exists():
            # phases run one command at a time accumulate into one manifest
            old = json.loads(previous.read_text())
            if old.get("config_hash") == self.manifest.config_hash:
                self.manifest.artifacts.update(old.get("artifacts", {}))
                self.manifest.phase_seconds.update(old.get("phase_seconds", {}))
                self.manifest.completed.extend(old.get("completed", []))

    # paths
    @property
    def env_path(self): return self.base / "env.json"
    @property
    def dataset_path(self): return self.base / "data" / "dataset.jsonl"
    @property
    def train_path(self): return self.base / "data" / "train.jsonl"
    @property
    def test_path(self): return self.base / "data" / "test.jsonl"
    @property
    def evaluator_path(self): return self.base / "evaluator" / "evaluator.ckpt"
    @property
    def base_stamp_path(self): return self.base / "base.json"
    @property
    def supervision_path(self): return self.dir / "mined" / "supervision.jsonl"
    @property
    def generator_path(self): return self.dir / "generator" / "generator.ckpt"
    @property
    def metrics_path(self): return self.dir / "reports" / "metrics.json"

    def _mkdir(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def env(self) -> EnvSpec:
        return EnvSpec.load(self.env_path)

    # phases

    def gen_data(self):
        c = self.config
        self.base_stamp_path.unlink(missing_ok=True)
        env = make_env(c)
        env.save(self._mkdir(self.manifest.add("env", self.env_path)))
        data = synth_generate(env, c.n_users, c.sessions_per_user, n_candidates=c.n_candidates,
                              list_len=c.list_len, policy=c.logging_policy, epsilon=c.epsilon,
                              seed=c.data_seed)
        save_dataset(data, self._mkdir(self.manifest.add("dataset", self.dataset_path)))

    def split(self):
        self.base_stamp_path.unlink(missing_ok=True)
        train, test, report = split_leave_one_out(load_dataset(self.dataset_path),
                                                  return_report=True)
        save_dataset(train, self._mkdir(self.manifest.add("train", self.train_path)))
        save_dataset(test, self.manifest.add("test", self.test_path))
        _dump(report, self.manifest.add("split_report", self.base / "data" / "split_report.json"))

    def train_eval(self):
        env = self.env()
        test = load_dataset(self.test_path)
        ev = make_evaluator(self.config).fit(load_dataset(self.train_path), validation=test,
                                             env=env)
        ev.save(self._mkdir(self.manifest.add("evaluator", self.evaluator_path)))
        report = {"history": ev.history_, "diverged": ev.diverged_,
                  "test": ev.score_records(test, env)}
        _dump(report, self.manifest.add("evaluator_report",
                                        self.base / "evaluator" / "train_report.json"))
        # lets ablation and sweep runs reuse this data split and evaluator
        _dump(_base_stamp(self.config), self.base_stamp_path)

    def mine(self):
        c = self.config
        train = load_dataset(self.train_path)
        chosen = select_mining_requests(train, c.mine_requests)
        ids = ",".join(str(r.request.request_id) for r in chosen)
        key = (f"{file_digest(self.evaluator_path)}-B{c.beam_size}-K{c.topk}-"
               f"R{hashlib.sha256(ids.encode()).hexdigest()[:12]}")
        cache = self.base / "cache" / "mined" / f"{key}.jsonl"
        cache_report = cache.with_suffix(".report.json")
        if cache.exists() and cache_report.exists():
            logger.info("mining cache hit %s", cache.name)
            records = load_supervision(cache)
            report = json.loads(cache_report.read_text())
        else:
            ev = LookaheadEvaluator.load(self.evaluator_path)
            records, report = build_supervision_dataset(
                ev, [r.request for r in chosen], beam_size=c.beam_size, topk=c.topk,
                tau_w=c.tau_w, env=self.env(), exposures=chosen)
            save_supervision(records, self._mkdir(cache))
            _dump(report, cache_report)
        self.manifest.add("mining_cache", cache)
        self.manifest.add("mining_cache_report", cache_report)
        records = reweight(records, c.tau_w, c.beam_size)
        report = {**report, "tau_w": c.tau_w, "cache_key": key}
        save_supervision(records, self._mkdir(self.manifest.add("supervision",
                                                                self.supervision_path)))
        _dump(report, self.manifest.add("mining_report", self.dir / "mined" / "report.json"))

    def train_gen(self):
        c = self.config
        train = load_dataset(self.train_path)
        gen = make_generator(c)
        if c.ablation == "exposure_only":
            # logged lists of the same requests the other variants learn from
            chosen = select_mining_requests(train, c.mine_requests)
            gen.fit(chosen)
        else:
            records = load_supervision(self.supervision_path)
            by_id = {r.request.request_id: r.request for r in train}
            needed = sorted({r.request_id for r in records})
            gen.fit(records, [by_id[i] for i in needed])
        gen.save(self._mkdir(self.manifest.add("generator", self.generator_path)))
        _dump({k: v for k, v in gen.report_.items()} | {"diverged": gen.diverged_},
              self.manifest.add("generator_report", self.dir / "generator" / "train_report.json"))

    def evaluate(self):
        c = self.config
        env = self.env()
        test = load_dataset(self.test_path)
        chosen = evaluation_requests(test, c.eval_requests)
        gen = OnlineGenerator.load(self.generator_path)
        batch = RequestBatch.from_requests(r.request for r in chosen)
        slots, _ = gen.decode(batch)
        report = evaluate_lists(env, batch, slots, n_samples=c.hr_samples, seed=c.metric_seed,
                                ks=DEFAULT_KS)
        if self.evaluator_path.exists():
            scores = LookaheadEvaluator.load(self.evaluator_path).score_records(test, env)
            report.r_auc, report.pcoc, report.rmse = scores["r_auc"], scores["pcoc"], scores["rmse"]
        self._mkdir(self.manifest.add("metrics_report", self.metrics_path)).write_text(
            report.dumps())
        return report


def _enabled(config: ExperimentConfig, phase: str) -> bool:
    return getattr(config, f"run_{phase}")


def run_phases(run: Run, phases) -> RunManifest:
    """Run the given phases in order, saving the manifest after each one."""
    manifest = run.manifest
    run.dir.mkdir(parents=True, exist_ok=True)
    if phases:
        config_path = run.dir / "config.txt"
        save_config(run.config, config_path)
        manifest.add("config", config_path)
    manifest_path = run.dir / "manifest.json"
    for phase in phases:
        started = time.perf_counter()
        logger.info("phase %s", phase)
        try:
            getattr(run, phase)()
        except Exception as exc:
            manifest.failed[phase] = f"{type(exc).__name__}: {exc}"
            manifest.save(manifest_path)
            raise PipelineError(phase, exc) from exc
        manifest.phase_seconds[phase] = round(time.perf_counter() - started, 3)
        manifest.failed.pop(phase, None)
        if phase not in manifest.completed:
            manifest.completed.append(phase)
        manifest.save(manifest_path)
    manifest.save(manifest_path)
    return manifest


def run_pipeline(config: ExperimentConfig) -> RunManifest:
    """generate data -> split -> train evaluator -> mine -> train generator -> evaluate.

    Disabled phases are skipped; enabled ones read their inputs from disk.
    """
    return run_phases(Run(config), [p for p in PHASES if _enabled(config, p)])


# settings that determine the data split and the evaluator
BASE_KEYS = ("env_seed", "data_seed", "model_seed", "n_items", "n_users", "sessions_per_user",
             "logging_policy", "epsilon", "n_candidates", "list_len", "embed_dim", "d_model",
             "d_pos", "n_heads", "ff_dim", "evaluator_layers", "n_score_buckets", "dtype",
             "lr_schedule", "evaluator_learning_rate", "evaluator_batch_size",
             "evaluator_weight_decay", "evaluator_epochs")


def _base_stamp(config: ExperimentConfig) -> dict:
    return {k: getattr(config, k) for k in BASE_KEYS}


def ensure_base(config: ExperimentConfig) -> Run:
    """Build (or reuse) the data split and evaluator shared by ablation and sweep runs."""
    run = Run(config)
    have = json.loads(run.base_stamp_path.read_text()) if run.base_stamp_path.exists() else None
    if have != _base_stamp(config) or not run.evaluator_path.exists():
        run_phases(run, ("gen_data", "split", "train_eval"))
    return run


def _variant_run(config: ExperimentConfig, base: Run, subdir: str) -> MetricReport:
    run = Run(config.with_overrides({"output_dir": str(base.dir / subdir)}), shared_dir=base.dir)
    phases = ["train_gen", "evaluate"] if config.ablation == "exposure_only" \
        else ["mine", "train_gen", "evaluate"]
    run_phases(run, phases)
    return MetricReport(**json.loads(run.metrics_path.read_text()))


def _seed_configs(config: ExperimentConfig):
    for s in range(config.n_seeds):
        yield s, config.with_overrides({"model_seed": config.model_seed + s})


def _summarise(reports: list[MetricReport]) -> dict:
    out = {}
    for key in reports[0].hr:
        vals = [r.hr[key] for r in reports]
        out[key] = float(np.mean(vals))
        out[f"{key} per seed"] = vals
    out["mean_value"] = float(np.mean([r.mean_value for r in reports]))
    return out


def run_ablations(config: ExperimentConfig) -> dict:
    """Each ablation variant at ``ablation_beam_size``, averaged over ``n_seeds`` generator seeds.

    The evaluator and the mined data are shared by every variant that uses them.
    """
    base = ensure_base(config)
    full = config.with_overrides({"ablation": "full", "beam_size": config.ablation_beam_size})
    rows = []
    for variant in config.ablation_variants:
        vcfg = full.with_overrides({"ablation": variant})
        row = {"variant": variant, "config_diff": full.diff(vcfg)}
        try:
            reports = [_variant_run(scfg, base, f"ablate/{variant}/seed{s}")
                       for s, scfg in _seed_configs(vcfg)]
            row.update(_summarise(reports))
        except Exception as exc:        # a failed variant is reported absent, the rest continue
            logger.error("ablation %s failed: %s", variant, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    report = {"beam_size": config.ablation_beam_size, "n_seeds": config.n_seeds, "rows": rows}
    out = base.dir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    _dump(report, out / "ablation.json")
    write_table(rows, out / "ablation.csv", [f"HR@{k}%" for k in DEFAULT_KS])
    return report


def run_sweep(config: ExperimentConfig, axis: str | None = None, values=None) -> dict:
    """One generator per value of ``axis`` (beam_size, alpha or tau_w), shared evaluator."""
    axis = axis or config.sweep_axis
    values = tuple(values if values is not None else config.sweep_values)
    if axis not in ("beam_size", "alpha", "tau_w"):
        raise ValueError(f"cannot sweep over {axis!r}")
    if not values:
        raise ValueError("sweep needs at least one value")
    base = ensure_base(config.with_overrides({"sweep_axis": "", "sweep_values": ()}))
    points = []
    for value in values:
        value = int(value) if axis == "beam_size" else float(value)
        vcfg = config.with_overrides({"sweep_axis": "", "sweep_values": (), axis: value})
        point = {"variant": f"{axis}={value}", axis: value}
        try:
            reports = [_variant_run(scfg, base, f"sweep/{axis}={value}/seed{s}")
                       for s, scfg in _seed_configs(vcfg)]
            point.update(_summarise(reports))
        except Exception as exc:
            logger.error("sweep point %s=%s failed: %s", axis, value, exc)
            point["error"] = f"{type(exc).__name__}: {exc}"
        points.append(point)
    report = {"axis": axis, "values": list(values), "n_seeds": config.n_seeds, "points": points}
    out = base.dir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    _dump(report, out / f"sweep_{axis}.json")
    write_table(points, out / f"sweep_{axis}.csv", [f"HR@{k}%" for k in DEFAULT_KS])
    return report
