"""``mixopt`` command line: gen, train-ref, dro, subset, report, run.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataset import SYNTHETIC_KINDS, generate_synthetic_suite, load_manifest, save_dataset
from .dro import DROConfig, run_dro, write_alpha_trace_csv
from .exceptions import DataValidationError, NumericalError
from .pipeline import PipelineConfig, check_hash, prepare_data, run_pipeline
from .policy import DEFAULT_LR, load_checkpoint
from .preprocess import DEFAULT_BINS, DEFAULT_CLIP, SCHEMES, save_norm_stats
from .reference import DEFAULT_DELTA, TrainConfig, select_checkpoint, train_reference, write_records_csv
from .report import load_weights_json, render_weight_table, write_weights_json
from .subset import compute_retention, materialize_subset

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _hidden(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_preprocess_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scheme", choices=SCHEMES, default="gaussian")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--clip", type=float, default=DEFAULT_CLIP)
    p.add_argument("--val-fraction", type=float, default=0.05)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixopt", description="Domain mixture optimization for imitation datasets.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic multi-domain dataset")
    p.add_argument("--kind", choices=SYNTHETIC_KINDS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", type=int, nargs="+", help="trajectories per domain (one value or one per domain)")
    p.add_argument("--horizon", type=int, default=50)

    p = sub.add_parser("train-ref", help="train the reference policy and log per-domain losses")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--eval-interval", type=int, default=None, help="default: steps / 10")
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--hidden", type=_hidden, default=(256, 256))
    _add_preprocess_args(p)

    p = sub.add_parser("dro", help="optimize mixture weights against a reference checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ref", required=True, help="checkpoint file, or a train-ref output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--smoothing", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=None, help="default: the reference checkpoint's step")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-per-domain", type=int, default=32)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--no-clip", action="store_true", help="do not clip excess losses at zero")
    _add_preprocess_args(p)

    p = sub.add_parser("subset", help="subsample a dataset according to mixture weights")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--fraction", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="render weight tables and tidy trace exports")
    p.add_argument("--weights", nargs="+", required=True)
    p.add_argument("--names", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", type=int, default=0, help="index of the row other rows are compared to")

    p = sub.add_parser("run", help="run the whole pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--dro-steps", type=int, default=None)
    return parser


# ------------------------------------------------------------------- commands


def cmd_gen(args) -> None:
    sizes = None if not args.sizes else (args.sizes[0] if len(args.sizes) == 1 else args.sizes)
    domains = generate_synthetic_suite(args.kind, args.seed, sizes, horizon=args.horizon)
    save_dataset(domains, args.out)
    print(f"wrote {len(domains)} domains to {args.out}")


def cmd_train_ref(args) -> None:
    prep = prepare_data(args.data, args.scheme, args.bins, args.clip, args.val_fraction, args.seed)
    interval = args.eval_interval or max(1, args.steps // 10)
    cfg = TrainConfig(
        total_steps=args.steps, eval_interval=interval, batch_size=args.batch_size,
        lr=args.lr, seed=args.seed, delta=args.delta, hidden=args.hidden,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_norm_stats(prep.stats, prep.names, out / "norm_stats.json")
    try:
        records = train_reference(
            prep.train, prep.val, cfg, args.bins, out / "checkpoints", meta={"config_hash": prep.config_hash}
        )
    except NumericalError as exc:
        write_records_csv(getattr(exc, "records", []), prep.names, out / "records.csv")
        raise
    write_records_csv(records, prep.names, out / "records.csv")
    selected = select_checkpoint(records, args.delta)
    info = {
        "config_hash": prep.config_hash,
        "selected_step": selected,
        "checkpoint": f"checkpoints/step_{selected:08d}.npz",
        "delta": args.delta,
    }
    (out / "reference.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    print(f"selected reference step {selected}")


def _resolve_ref(ref: str) -> Path:
    p = Path(ref)
    if p.is_dir():
        info_path = p / "reference.json"
        if not info_path.is_file():
            raise DataValidationError(f"{p} has no reference.json; pass a checkpoint file")
        return p / json.loads(info_path.read_text(encoding="utf-8"))["checkpoint"]
    return p


def cmd_dro(args) -> None:
    prep = prepare_data(args.data, args.scheme, args.bins, args.clip, args.val_fraction, args.seed)
    ref, _, step, meta = load_checkpoint(_resolve_ref(args.ref))
    check_hash(prep.config_hash, meta.get("config_hash"), "reference checkpoint")
    cfg = DROConfig(
        total_steps=args.steps or step, eta=args.eta, smoothing=args.smoothing,
        clip_excess_at_zero=not args.no_clip, per_domain_batch=args.batch_per_domain,
        lr=args.lr, hidden=ref.hidden, seed=args.seed,
    )
    trace, weights = run_dro(prep.train, ref, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_alpha_trace_csv(trace, prep.names, out / "alpha_trace.csv")
    write_weights_json(weights, prep.names, out / "weights.json")
    print(json.dumps(weights.as_dict(prep.names)))


def cmd_subset(args) -> None:
    _, domains = load_manifest(args.data)
    names, alpha = load_weights_json(args.weights)
    if names != [d.name for d in domains]:
        raise DataValidationError(f"weights name domains {names}, dataset has {[d.name for d in domains]}")
    plan = compute_retention(np.array([d.size for d in domains]), alpha, args.fraction)
    materialize_subset(domains, plan, args.seed, args.out)
    print(f"kept {int(plan.retained.sum())} of {int(plan.sizes.sum())} pairs")


def cmd_report(args) -> None:
    if len(args.weights) != len(args.names):
        raise DataValidationError("give one --names entry per --weights file")
    loaded = [load_weights_json(p) for p in args.weights]
    domains = loaded[0][0]
    for (names, _), path in zip(loaded, args.weights):
        if names != domains:
            raise DataValidationError(f"{path}: domain names differ from {args.weights[0]}")
    text, csv_text = render_weight_table([a for _, a in loaded], args.names, domains, args.baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "weights_table.txt").write_text(text, encoding="utf-8")
    (out / "weights_table.csv").write_text(csv_text, encoding="utf-8")
    print(text, end="")


def cmd_run(args) -> None:
    cfg = PipelineConfig.load(args.config)
    if args.dro_steps is not None:
        cfg = PipelineConfig.from_json({**cfg.to_json(), "dro_steps": args.dro_steps})
    res = run_pipeline(cfg)
    print(f"selected reference step {res.selected_step}; DRO steps {res.dro_steps}")
    print(json.dumps(res.weights.as_dict(res.names)))


COMMANDS = {
    "gen": cmd_gen,
    "train-ref": cmd_train_ref,
    "dro": cmd_dro,
    "subset": cmd_subset,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataValidationError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
