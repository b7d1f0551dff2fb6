"""Command-line entry point: ``lookahead-rerank <subcommand> --config FILE --set key=value``.

Failures exit nonzero and print one JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import RequestBatch, load_requests
from .generator import OnlineGenerator
from .pipeline import PipelineError, Run, run_ablations, run_phases, run_pipeline, run_sweep

PHASE_COMMANDS = {
    "gen-data": "gen_data",
    "split": "split",
    "train-eval": "train_eval",
    "mine": "mine",
    "train-gen": "train_gen",
    "evaluate": "evaluate",
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lookahead-rerank")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in PHASE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} phase")
    sub.add_parser("run", parents=[common], help="run every enabled phase")
    infer = sub.add_parser("infer", parents=[common], help="rank requests with a trained generator")
    infer.add_argument("--requests", help="request or dataset file (default: held-out split)")
    infer.add_argument("--out", help="output JSONL (default: <output_dir>/predictions.jsonl)")
    sub.add_parser("ablate", parents=[common], help="compare ablation variants")
    sweep = sub.add_parser("sweep", parents=[common], help="sweep beam_size, alpha or tau_w")
    sweep.add_argument("--axis")
    sweep.add_argument("--values", help="comma-separated values")
    sub.add_parser("report", parents=[common], help="collect the run's reports")
    return parser


def infer(config, requests_path=None, out_path=None) -> Path:
    run = Run(config)
    gen = OnlineGenerator.load(run.generator_path)
    requests = load_requests(requests_path or run.test_path)
    batch = RequestBatch.from_requests(requests)
    slots, probs = gen.decode(batch)
    out = Path(out_path) if out_path else run.dir / "predictions.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for i, req in enumerate(requests):
            ids = batch.item_ids[i]
            steps = [{str(int(ids[j])): float(p[j]) for j in range(len(ids)) if p[j] > 0}
                     for p in probs[i]]
            fh.write(json.dumps({"request_id": req.request_id,
                                 "ranked_ids": [int(ids[s]) for s in slots[i]],
                                 "per_step_probs": steps}, separators=(",", ":")) + "\n")
    return out


def collect_report(config) -> dict:
    run = Run(config)
    found = {}
    for name, path in [("metrics", run.metrics_path),
                       ("evaluator", run.dir / "evaluator" / "train_report.json"),
                       ("mining", run.dir / "mined" / "report.json"),
                       ("ablation", run.dir / "reports" / "ablation.json")]:
        if path.exists():
            found[name] = json.loads(path.read_text())
    for path in sorted((run.dir / "reports").glob("sweep_*.json")):
        found[path.stem] = json.loads(path.read_text())
    if not found:
        raise FileNotFoundError(f"no reports under {run.dir}")
    if "evaluator" in found:
        found["evaluator"] = found["evaluator"].get("test")
    return found


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        cmd = args.command
        if cmd in PHASE_COMMANDS:
            result = run_phases(Run(config), [PHASE_COMMANDS[cmd]]).to_dict()
        elif cmd == "run":
            result = run_pipeline(config).to_dict()
        elif cmd == "infer":
            result = {"predictions": str(infer(config, args.requests, args.out))}
        elif cmd == "ablate":
            result = run_ablations(config)
        elif cmd == "sweep":
            values = None
            if args.values:
                values = [float(v) for v in args.values.split(",") if v.strip()]
            result = run_sweep(config, args.axis, values)
        else:
            result = collect_report(config)
    except ConfigError as exc:
        _error("config", exc)
        return 2
    except PipelineError as exc:
        _error(exc.phase, exc.cause)
        return 1
    except Exception as exc:
        _error(args.command, exc)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def _error(stage: str, exc: BaseException) -> None:
    record = {"ok": False, "stage": stage, "error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
