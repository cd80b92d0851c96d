"""End-to-end two-step pipeline and run-directory management.

Stages: fix the test split, score slice quality, pick the initial training
subset, train, gate the remaining pool on head disagreement, then (oracle
mode) fine-tune on everything selected and evaluate on the untouched test
split. Flag mode stops after the gate and just reports which slices need
annotation. Every stage persists its artifact into an append-only run
directory.
"""
from __future__ import annotations

import datetime as _dt
import logging
from dataclasses import dataclass
from pathlib import Path

from . import quality
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config
from .data import StackDataset, assign_test_split, generate_synthetic_stack, load_manifest, normalize_dataset
from .errors import ValidationError
from .evaluation import Metrics, evaluate_records, write_metrics_csv
from .model import SegModel, build_model
from .selection import SelectionReport, select_minimal, write_report
from .training import LossHistory, TrainConfig, train, write_loss_csv

logger = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    report: SelectionReport
    model: SegModel
    metrics: Metrics | None
    history_initial: LossHistory
    history_finetune: LossHistory | None
    run_dir: Path


def make_run_dir(root: str | Path, prefix: str = "run") -> Path:
    """Create a fresh timestamped directory under root; never reuses one."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    for suffix in range(1000):
        name = f"{prefix}-{stamp}" if suffix == 0 else f"{prefix}-{stamp}-{suffix}"
        candidate = root / name
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            continue
    raise ValidationError(f"could not allocate a run directory under {root}")


def load_dataset(config: RunConfig) -> StackDataset:
    if config.use_synthetic:
        return generate_synthetic_stack(config.synthetic)
    return load_manifest(config.manifest)


def run_pipeline(config: RunConfig, run_dir: str | Path, dataset: StackDataset | None = None) -> PipelineResult:
    """Execute the full two-step pipeline and persist all artifacts."""
    config.resolve()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(dump_config(config), encoding="utf-8")

    if dataset is None:
        dataset = load_dataset(config)
    size = config.resolved_image_size()
    oracle = config.selection.mode == "oracle"
    if oracle:
        dataset = assign_test_split(dataset, config.test_fraction)
    dataset = normalize_dataset(dataset, size)
    pool = dataset.pool()
    test = dataset.test()
    if not pool:
        raise ValidationError("the dataset has no pool slices")

    # Stage 1: unsupervised quality scan and initial subset.
    scores = quality.score_records(pool, config.quality.median_kernel)
    initial = quality.build_initial_selection(scores, eps0=config.quality.eps0, cap=config.quality.cap)
    s0 = initial.s0_indices
    quality.write_quality_csv(run_dir / "quality.csv", scores, s0)
    logger.info("initial selection: %d of %d pool slices", len(s0), len(pool))

    by_key = dataset.by_key()
    s0_records = [by_key[k] for k in s0]
    annotated_s0 = [r for r in s0_records if r.annotation is not None]
    if oracle and len(annotated_s0) < len(s0_records):
        missing = [r.key for r in s0_records if r.annotation is None]
        raise ValidationError(f"oracle mode needs annotations for the initial subset; missing {missing}")

    # Stage 2: train on the initial subset (warm-started if configured).
    if config.warm_start:
        model, _ = load_checkpoint(config.warm_start)
        if model.config.input_size != size:
            raise ValidationError(
                f"warm-start checkpoint expects size {model.config.input_size}, run uses {size}"
            )
    else:
        model = build_model(config.model, seed=config.seed)
    history_initial = LossHistory()
    if annotated_s0:
        _, history_initial = train(model, annotated_s0, config.train)
    else:
        logger.warning("no annotated initial slices; gating with the untrained/warm model")
    save_checkpoint(
        run_dir / "checkpoint_initial.qseg", model, seed=config.seed,
        epoch=len(history_initial.combined), loss_history=history_initial.as_dict(),
    )
    write_loss_csv(run_dir / "loss_history.csv", history_initial)

    # Stage 3: gate the remaining pool on head disagreement.
    selected_keys = set(s0)
    remainder = [r for r in pool if r.key not in selected_keys]
    verdicts, s_m = ([], [])
    if remainder:
        verdicts, s_m = select_minimal(model, remainder, config.selection.q0)

    report = SelectionReport(
        q0=config.selection.q0,
        s0=list(s0),
        s_m=list(s_m),
        verdicts=verdicts,
        fraction_selected=(len(s0) + len(s_m)) / len(pool),
    )

    history_finetune: LossHistory | None = None
    metrics: Metrics | None = None
    if oracle:
        train_keys = list(s0) + list(s_m)
        train_records = [by_key[k] for k in train_keys]
        missing = [r.key for r in train_records if r.annotation is None]
        if missing:
            raise ValidationError(f"oracle mode needs annotations for selected slices; missing {missing}")

        # Stage 4: fine-tune on everything selected; optionally iterate the
        # gate until it stops selecting.
        finetune_config = TrainConfig(**{**config.train.__dict__, "seed": config.train.seed + 1})
        _, history_finetune = train(model, train_records, finetune_config)
        rounds = 1
        while config.selection.iterate and s_m and rounds < config.selection.max_rounds:
            remaining = [r for r in pool if r.key not in set(train_keys)]
            if not remaining:
                break
            more_verdicts, extra = select_minimal(model, remaining, config.selection.q0)
            verdicts = [v for v in verdicts if v.key not in {m.key for m in more_verdicts}] + more_verdicts
            if not extra:
                break
            s_m = list(s_m) + list(extra)
            train_keys = list(s0) + list(s_m)
            train_records = [by_key[k] for k in train_keys]
            if any(r.annotation is None for r in train_records):
                raise ValidationError("iterated selection hit unannotated slices")
            rounds += 1
            finetune_config = TrainConfig(**{**finetune_config.__dict__, "seed": finetune_config.seed + 1})
            _, history_finetune = train(model, train_records, finetune_config)
        report = SelectionReport(
            q0=config.selection.q0,
            s0=list(s0),
            s_m=list(s_m),
            verdicts=verdicts,
            fraction_selected=(len(s0) + len(s_m)) / len(pool),
        )
        save_checkpoint(
            run_dir / "checkpoint_final.qseg", model, seed=config.seed,
            epoch=len(history_finetune.combined), loss_history=history_finetune.as_dict(),
        )
        write_loss_csv(run_dir / "loss_history_finetune.csv", history_finetune)

        if test:
            missing = [r.key for r in test if r.annotation is None]
            if missing:
                raise ValidationError(f"oracle mode needs annotated test slices; missing {missing}")
            per_slice, metrics = evaluate_records(model, test)
            write_metrics_csv(run_dir / "metrics.csv", per_slice, metrics)
        else:
            logger.warning("no test split; skipping final evaluation")

    write_report(run_dir / "selection_report.json", report)
    return PipelineResult(
        report=report,
        model=model,
        metrics=metrics,
        history_initial=history_initial,
        history_finetune=history_finetune,
        run_dir=run_dir,
    )
