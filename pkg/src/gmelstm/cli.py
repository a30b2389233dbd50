"""Command-line entry point: ``gmelstm <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, apply_overrides, config_from_dict, load_config
from .data import SyntheticSpec, generate_synthetic, save_dataset
from .evaluation import evaluate, format_table, gate_summary, inspect_attention, render_attention
from .gme import GateController, export_traces, inference_gates
from .model import SequenceModelParams


def _override(text: str):
    key, sep, raw = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="RunConfig JSON file")
    p.add_argument("--set", dest="overrides", action="append", type=_override, default=[],
                   metavar="KEY=VALUE", help="override a config field, e.g. optimizer.lr=0.001")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--run-dir", type=Path, help="output directory (default: $GMELSTM_RUN_ROOT/<cmd>)")


def _load(args, name: str) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({"data": {
        "synthetic": {"task": "keyword"}}})
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.run_dir is not None:
        overrides["run_dir"] = str(args.run_dir)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if cfg.run_dir is None:
        cfg.run_dir = str(cfg.resolved_run_dir(name))
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmelstm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-structure dataset")
    p.add_argument("--task", default="keyword", choices=("keyword", "complement", "noise"))
    p.add_argument("--clips", type=int, default=200)
    p.add_argument("--length", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("train", help="train LSTM or LSTM(A) and evaluate on test")
    _add_config_args(p)
    p.add_argument("--no-attention", action="store_true", help="plain LSTM (last state)")

    p = sub.add_parser("train-gme", help="train gate controllers with REINFORCE")
    _add_config_args(p)

    p = sub.add_parser("eval", help="evaluate a saved model on the test split")
    _add_config_args(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--controllers", type=Path)

    p = sub.add_parser("ablate", help="method x modality-subset table")
    _add_config_args(p)

    p = sub.add_parser("gradcheck", help="reverse-mode vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("inspect", help="attention weights and gate decisions per clip")
    _add_config_args(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--controllers", type=Path)
    p.add_argument("--limit", type=int, default=20)
    return parser


def _load_controllers(path: Path | None) -> dict[str, GateController] | None:
    if path is None:
        return None
    return {c["modality"]: GateController.from_json(c) for c in json.loads(path.read_text())}


def _print_report(report) -> None:
    s = report.summary()
    print(f"test: Acc {100 * s['acc']:.1f}  F1 {100 * s['f1']:.1f}  MAE {s['mae']:.3f}  (n={s['n']})")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    from . import experiments as ex

    if args.command == "synth":
        spec = SyntheticSpec(task=args.task, n_clips=args.clips, length=args.length)
        clips = generate_synthetic(spec, args.seed)
        save_dataset(clips, args.output)
        print(f"wrote {len(clips)} clips to {args.output}")
        return 0

    if args.command == "gradcheck":
        res = ex.gradient_check(args.seed, args.configs)
        for row in res.per_config:
            print(f"config {row['config']:2d}: H={row['H']} T={row['T']} d_in={row['d_in']} "
                  f"max rel err {row['max_rel_error']:.2e} ({row['worst_tensor']})")
        print(f"max relative error: {res.max_rel_error:.3e}")
        return 0 if res.max_rel_error < args.tol else 1

    cfg = _load(args, args.command)
    run_dir = Path(cfg.run_dir)

    if args.command == "train":
        out = ex.run_supervised(cfg, attention=not args.no_attention, run_dir=run_dir)
        _print_report(out.report)
    elif args.command == "train-gme":
        out = ex.run_gme(cfg, run_dir=run_dir)
        _print_report(out.report)
    elif args.command == "ablate":
        cells = ex.run_ablation(cfg, run_dir=run_dir)
        print(format_table(cells))
    elif args.command in ("eval", "inspect"):
        data = ex.prepare_data(cfg)
        params = SequenceModelParams.load(args.model)
        ctrls = _load_controllers(args.controllers)
        if args.command == "eval":
            _print_report(evaluate(params, data.test, cfg.modalities, controllers=ctrls))
        else:
            test = data.test.take(range(min(args.limit, len(data.test))))
            if ctrls:
                traces = inference_gates(ctrls, test)
                run_dir.mkdir(parents=True, exist_ok=True)
                export_traces(traces, run_dir / "inspect_gates.jsonl")
                print(json.dumps(gate_summary(traces), indent=2))
            if params.shape.attention:
                print(render_attention(inspect_attention(params, test, cfg.modalities)))
    print(f"outputs in {run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
