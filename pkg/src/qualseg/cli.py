"""Command-line entry point binding all pipeline stages.

Exit codes: 0 on success, 1 on validation/runtime failures (with a diagnostic
on stderr), 2 on usage errors. ``--config`` loads a key-value config file and
``--set section.key=value`` overrides individual entries; ``--seed`` fixes
all randomness. Environment: QUALSEG_OUTPUT_ROOT overrides the default output
root, QUALSEG_NUM_THREADS the intra-op thread count (default 1, which keeps
runs bit-reproducible).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import quality
from .checkpoint import load_checkpoint, save_checkpoint
from .config import OUTPUT_ROOT_ENV, THREADS_ENV, RunConfig, load_config
from .data import generate_synthetic_stack, normalize_dataset, write_manifest
from .errors import QualsegError, UsageError
from .evaluation import evaluate_records, predict_mask, random_baseline, render_overlay, write_baseline_csv, write_metrics_csv
from .model import build_model
from .pipeline import load_dataset, make_run_dir, run_pipeline
from .selection import SelectionReport, read_report, select_minimal, write_report
from .training import train, write_loss_csv
from .plots import loss_curves, quality_scatter

logger = logging.getLogger("qualseg")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qualseg",
        description="Minimal-training-set selection and segmentation on 3D image stacks",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, **kwargs) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, **kwargs)
        p.add_argument("--config", help="config file (key-value sections; see README)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config entry; repeatable")
        p.add_argument("--seed", type=int, help="global seed overriding the config")
        p.add_argument("--out", help="output directory (default: $QUALSEG_OUTPUT_ROOT or ./runs)")
        p.add_argument("--manifest", help="dataset manifest CSV to load")
        p.add_argument("--synthetic", action="store_true", help="use the synthetic dataset source")
        return p

    add("generate-synthetic", "write a synthetic dataset as a PNG+manifest layout")

    p = add("quality-scan", "score slice quality and emit quality.csv")
    p.add_argument("--plot", action="store_true", help="also write the scatter plot")

    add("select-initial", "pick the initial training subset from quality scores")

    p = add("train", "train a fresh (or warm-started) model on annotated slices")
    p.add_argument("--subset", help="JSON file with a selection report or initial selection to train on")

    p = add("select-minimal", "gate pool slices on head disagreement")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--initial", help="initial-selection JSON whose slices are excluded and echoed as s0")

    p = add("finetune", "continue training a checkpoint on the selected slices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True, help="selection_report.json naming s0 and s_m")

    p = add("evaluate", "compute segmentation metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["test", "pool", "all"], default="test")
    p.add_argument("--overlays", type=int, default=0, help="write error overlays for the first N slices")

    p = add("baseline-random", "train/evaluate on random fractions, repeatedly")
    p.add_argument("--fraction", type=float, default=0.25)
    p.add_argument("--runs", type=int, default=20)

    add("run-pipeline", "execute the full two-step pipeline into a run directory")

    p = add("report", "render plots (and overlays) from a completed run directory")
    p.add_argument("--run", required=True, help="run directory written by run-pipeline")
    p.add_argument("--overlays", type=int, default=0)

    return parser


def _load_run_config(args: argparse.Namespace, needs_source: bool = False) -> RunConfig:
    config = load_config(args.config, args.set)
    if getattr(args, "manifest", None):
        config.manifest = args.manifest
        config.use_synthetic = False
        config.source_set = True
    elif getattr(args, "synthetic", False):
        config.use_synthetic = True
        config.source_set = True
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.out_root = args.out
    elif os.environ.get(OUTPUT_ROOT_ENV):
        config.out_root = os.environ[OUTPUT_ROOT_ENV]
    if needs_source and not config.source_set:
        raise UsageError(
            "no dataset named: pass --manifest/--synthetic or a config with a [data]/[synthetic] section"
        )
    return config.resolve()


def _prepared_dataset(config: RunConfig, needs_split: bool = False):
    dataset = load_dataset(config)
    if needs_split:
        from .data import assign_test_split

        dataset = assign_test_split(dataset, config.test_fraction)
    return normalize_dataset(dataset, config.resolved_image_size())


def _keys_from_json(path: str) -> list[tuple[str, int]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        keys = [tuple(k) for k in data.get("s0", [])] + [tuple(k) for k in data.get("s_m", [])]
    else:
        keys = [tuple(k) for k in data]
    return [(str(s), int(i)) for s, i in keys]


def _cmd_generate_synthetic(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    out = make_run_dir(config.out_root, prefix="synthetic")
    dataset = generate_synthetic_stack(config.synthetic)
    manifest = write_manifest(dataset, out, spec=config.synthetic)
    print(f"wrote {len(dataset.records)} slices to {manifest}")
    return 0


def _cmd_quality_scan(args: argparse.Namespace) -> int:
    config = _load_run_config(args, needs_source=True)
    dataset = _prepared_dataset(config)
    scores = quality.score_records(dataset.pool(), config.quality.median_kernel)
    initial = quality.build_initial_selection(scores, config.quality.eps0, config.quality.cap)
    out = make_run_dir(config.out_root, prefix="quality")
    quality.write_quality_csv(out / "quality.csv", scores, initial.s0_indices)
    if args.plot:
        quality_scatter(out / "quality.csv", out / "quality_scatter.png")
    print(f"scored {len(scores)} slices; initial set {len(initial.s0_indices)}; wrote {out}")
    return 0


def _cmd_select_initial(args: argparse.Namespace) -> int:
    config = _load_run_config(args, needs_source=True)
    dataset = _prepared_dataset(config)
    scores = quality.score_records(dataset.pool(), config.quality.median_kernel)
    initial = quality.build_initial_selection(scores, config.quality.eps0, config.quality.cap)
    out = make_run_dir(config.out_root, prefix="initial")
    payload = {
        "s0": [[s, i] for s, i in initial.s0_indices],
        "thresholds": {k: list(v) for k, v in initial.thresholds_used.items()},
        "eliminated_by_dedup": [[s, i] for s, i in initial.eliminated_by_dedup],
    }
    (out / "initial_selection.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"initial set: {len(initial.s0_indices)} slices; wrote {out / 'initial_selection.json'}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = _load_run_config(args, needs_source=True)
    dataset = _prepared_dataset(config, needs_split=config.selection.mode == "oracle")
    records = [r for r in dataset.pool() if r.annotation is not None]
    if args.subset:
        wanted = set(_keys_from_json(args.subset))
        records = [r for r in records if r.key in wanted]
    if config.warm_start:
        model, _ = load_checkpoint(config.warm_start)
    else:
        model = build_model(config.model, seed=config.seed)
    _, history = train(model, records, config.train)
    out = make_run_dir(config.out_root, prefix="train")
    save_checkpoint(out / "checkpoint.qseg", model, seed=config.seed,
                    epoch=len(history.combined), loss_history=history.as_dict())
    write_loss_csv(out / "loss_history.csv", history)
    print(f"trained on {len(records)} slices for {config.train.epochs} epochs; wrote {out}")
    return 0


def _cmd_select_minimal(args: argparse.Namespace) -> int:
    config = _load_run_config(args, needs_source=True)
    model, _ = load_checkpoint(args.checkpoint)
    config.image_size = model.config.input_size
    dataset = _prepared_dataset(config, needs_split=config.selection.mode == "oracle")
    s0 = [tuple(k) for k in _keys_from_json(args.initial)] if args.initial else []
    pool = [r for r in dataset.pool() if r.key not in set(s0)]
    verdicts, s_m = select_minimal(model, pool, config.selection.q0)
    report = SelectionReport(
        q0=config.selection.q0, s0=list(s0), s_m=s_m, verdicts=verdicts,
        fraction_selected=(len(s0) + len(s_m)) / max(1, len(dataset.pool())),
    )
    out = make_run_dir(config.out_root, prefix="select")
    write_report(out / "selection_report.json", report)
    print(f"selected {len(s_m)} of {len(pool)} gated slices; wrote {out / 'selection_report.json'}")
    return 0


def _cmd_finetune(args: argparse.Namespace) -> int:
    config = _load_run_config(args, needs_source=True)
    model, _ = load_checkpoint(args.checkpoint)
    config.image_size = model.config.input_size
    dataset = _prepared_dataset(config, needs_split=config.selection.mode == "oracle")
    report = read_report(args.report)
    wanted = set(report.s0) | set(report.s_m)
    records = [r for r in dataset.records if r.key in wanted]
    missing = [r.key for r in records if r.annotation is None]
    if missing:
        raise QualsegError(f"selected slices lack annotations: {missing[:8]}")
    _, history = train(model, records, config.train)
    out = make_run_dir(config.out_root, prefix="finetune")
    save_checkpoint(out / "checkpoint.qseg", model, seed=config.seed,
                    epoch=len(history.combined), loss_history=history.as_dict())
    write_loss_csv(out / "loss_history.csv", history)
    print(f"fine-tuned on {len(records)} slices; wrote {out}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load_run_config(args, needs_source=True)
    model, _ = load_checkpoint(args.checkpoint)
    config.image_size = model.config.input_size
    dataset = _prepared_dataset(config, needs_split=args.split == "test")
    records = {"test": dataset.test, "pool": dataset.pool, "all": lambda: dataset.records}[args.split]()
    records = [r for r in records if r.annotation is not None]
    per_slice, mean = evaluate_records(model, records)
    out = make_run_dir(config.out_root, prefix="evaluate")
    write_metrics_csv(out / "metrics.csv", per_slice, mean)
    _write_overlays(model, records, out, args.overlays)
    print(f"evaluated {len(records)} slices: dice={mean.dice:.4f} jaccard={mean.jaccard:.4f}; wrote {out}")
    return 0


def _write_overlays(model, records, out: Path, count: int) -> None:
    from PIL import Image

    for r in records[:count]:
        overlay = render_overlay(predict_mask(model, r.image), r.annotation, r.image)
        Image.fromarray(overlay, mode="RGB").save(out / f"overlay_{r.stack_id}_{r.slice_index:04d}.png", format="PNG")


def _cmd_baseline_random(args: argparse.Namespace) -> int:
    config = _load_run_config(args, needs_source=True)
    dataset = _prepared_dataset(config)
    records = [r for r in dataset.pool() if r.annotation is not None]
    mean, rows = random_baseline(
        records, args.fraction, args.runs, config.model, config.train, seed=config.seed,
    )
    out = make_run_dir(config.out_root, prefix="baseline")
    write_baseline_csv(out / "baseline_runs.csv", rows)
    print(f"{args.runs} runs at fraction {args.fraction}: mean dice {mean.dice:.4f}; wrote {out}")
    return 0


def _cmd_run_pipeline(args: argparse.Namespace) -> int:
    config = _load_run_config(args, needs_source=True)
    run_dir = make_run_dir(config.out_root, prefix="run")
    result = run_pipeline(config, run_dir)
    msg = (
        f"initial {len(result.report.s0)}, gated {len(result.report.s_m)}, "
        f"fraction {result.report.fraction_selected:.3f}"
    )
    if result.metrics is not None:
        msg += f", test dice {result.metrics.dice:.4f}"
    print(f"{msg}; wrote {result.run_dir}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise QualsegError(f"not a run directory: {run_dir}")
    produced = []
    quality_csv = run_dir / "quality.csv"
    if not quality_csv.is_file():
        raise QualsegError(f"run directory lacks quality.csv: {run_dir}")
    produced.append(quality_scatter(quality_csv, run_dir / "quality_scatter.png"))
    loss_csv = run_dir / "loss_history_finetune.csv"
    if not loss_csv.is_file():
        loss_csv = run_dir / "loss_history.csv"
    if not loss_csv.is_file():
        raise QualsegError(f"run directory lacks a loss history: {run_dir}")
    produced.append(loss_curves(loss_csv, run_dir / "loss_curves.png"))
    if args.overlays:
        checkpoint = run_dir / "checkpoint_final.qseg"
        if not checkpoint.is_file():
            checkpoint = run_dir / "checkpoint_initial.qseg"
        model, _ = load_checkpoint(checkpoint)
        config = load_config(run_dir / "config.resolved")
        config.resolve()
        dataset = _prepared_dataset(config, needs_split=config.selection.mode == "oracle")
        records = [r for r in dataset.test() if r.annotation is not None]
        if not records:
            records = [r for r in dataset.pool() if r.annotation is not None]
        _write_overlays(model, records, run_dir, args.overlays)
        produced.extend(run_dir / f"overlay_{r.stack_id}_{r.slice_index:04d}.png" for r in records[:args.overlays])
    print(f"wrote {len(produced)} files to {run_dir}")
    return 0


_COMMANDS = {
    "generate-synthetic": _cmd_generate_synthetic,
    "quality-scan": _cmd_quality_scan,
    "select-initial": _cmd_select_initial,
    "train": _cmd_train,
    "select-minimal": _cmd_select_minimal,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "baseline-random": _cmd_baseline_random,
    "run-pipeline": _cmd_run_pipeline,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    threads = os.environ.get(THREADS_ENV)
    torch.set_num_threads(int(threads) if threads else 1)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except QualsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
