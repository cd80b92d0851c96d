"""Acceptance suite: one test per documented criterion.

Each test prints a single `ACCEPTANCE <n>: PASS` line (run with `-s` to see
them live) and enforces its stated runtime bound. Criterion 6 trains real
models at desk scale and dominates the wall-clock.
"""
import time

import numpy as np
import torch

from qualseg.cli import main
from qualseg.config import QualityConfig, RunConfig, SelectionConfig
from qualseg.data import SyntheticSpec, assign_test_split, generate_synthetic_stack, normalize_dataset
from qualseg.evaluation import confusion, random_baseline, seg_metrics
from qualseg.model import HEAD_NODES, LevelOutputs, ModelConfig, SegModel, build_model, count_params, forward
from qualseg.pipeline import run_pipeline
from qualseg.quality import (
    BLURRINESS_MAX,
    QualityScores,
    blurriness,
    dedup_epsilon,
    psnr_inv,
    select_initial,
)
from qualseg.selection import quality_from_outputs, select_minimal, verdict_for
from qualseg.training import TrainConfig, dice_loss, gradient_check

torch.set_num_threads(1)

PUBLISHED_PARAM_COUNT = 9_045_540


def _announce(criterion: int, started: float, bound_s: float, detail: str = "") -> None:
    elapsed = time.time() - started
    print(f"\nACCEPTANCE {criterion}: PASS in {elapsed:.1f}s (bound {bound_s:.0f}s) {detail}")
    assert elapsed < bound_s, f"criterion {criterion} exceeded its runtime bound"


# ---------------------------------------------------------------------------
# 1. Metric oracle equivalence
# ---------------------------------------------------------------------------

def test_criterion_1_metric_oracle_equivalence():
    started = time.time()
    rng = np.random.default_rng(101)
    for _ in range(200):
        h = int(rng.integers(1, 33))
        w = int(rng.integers(1, 33))
        density_p, density_y = rng.uniform(0, 1, 2)
        p = (rng.uniform(size=(h, w)) < density_p).astype(np.uint8)
        y = (rng.uniform(size=(h, w)) < density_y).astype(np.uint8)

        tp = fp = fn = tn = 0
        for pi, yi in zip(p.ravel(), y.ravel()):
            if pi and yi:
                tp += 1
            elif pi:
                fp += 1
            elif yi:
                fn += 1
            else:
                tn += 1
        c = confusion(p, y)
        assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)

        m = seg_metrics(p, y)
        assert m.precision == ((1.0 if fn == 0 else 0.0) if tp + fp == 0 else tp / (tp + fp))
        assert m.recall == ((1.0 if fp == 0 else 0.0) if tp + fn == 0 else tp / (tp + fn))
        assert m.jaccard == (1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn))
        assert m.dice == (1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
        assert m.accuracy == (tp + tn) / (h * w)
        assert abs(m.dice - 2 * m.jaccard / (1 + m.jaccard)) < 1e-12
    _announce(1, started, 10, "200 mask pairs vs per-pixel loops, exact")


# ---------------------------------------------------------------------------
# 2. Dice loss correctness
# ---------------------------------------------------------------------------

def test_criterion_2_dice_loss_and_gradient():
    started = time.time()
    mask = np.zeros((4, 4))
    mask.flat[:8] = 1.0
    assert float(dice_loss(mask, mask)) == -16.0 / 17.0
    zeros = np.zeros((4, 4))
    assert float(dice_loss(zeros, zeros)) == 0.0
    a, b = np.zeros((4, 4)), np.zeros((4, 4))
    a[0, 0] = 1.0
    b[3, 3] = 1.0
    assert float(dice_loss(a, b)) == 0.0

    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(20):
        p = rng.uniform(0.05, 0.95, (3, 3))
        y = (rng.uniform(size=(3, 3)) < 0.5).astype(float)
        worst = max(worst, gradient_check(dice_loss, p, y))
    assert worst < 1e-4
    _announce(2, started, 10, f"hand examples exact; max gradient error {worst:.2e}")


# ---------------------------------------------------------------------------
# 3. Quality metric suite
# ---------------------------------------------------------------------------

def _textured_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    import scipy.ndimage as ndi

    smooth = ndi.gaussian_filter(rng.standard_normal((size, size)), sigma=4.0)
    smooth = (smooth - smooth.min()) / (smooth.max() - smooth.min() + 1e-12)
    return np.clip(0.2 + 0.6 * smooth + 0.1 * rng.standard_normal((size, size)), 0, 1)


def test_criterion_3_quality_metric_suite():
    import scipy.ndimage as ndi

    started = time.time()
    constant = np.full((16, 16), 0.37)
    assert blurriness(constant) is BLURRINESS_MAX
    assert psnr_inv(constant) == 0.0

    rng = np.random.default_rng(303)
    hits = 0
    for _ in range(100):
        image = _textured_image(rng)
        if blurriness(image) < blurriness(ndi.gaussian_filter(image, sigma=2.0)):
            hits += 1
    assert hits == 100

    # Laplacian hand oracle (exact: integer-valued arithmetic)
    spike = np.zeros((3, 3))
    spike[1, 1] = 1.0
    response = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
    assert blurriness(spike) == 1.0 / response.var()

    # median-filter hand oracle (exact: the filter removes the spike wholesale)
    median_case = np.zeros((5, 5))
    median_case[2, 2] = 1.0
    assert psnr_inv(median_case, median_kernel=3) == median_case.var() / 1.0
    _announce(3, started, 30, "sentinel, 100/100 monotonicity, hand oracles exact")


# ---------------------------------------------------------------------------
# 4. Selection algebra
# ---------------------------------------------------------------------------

def test_criterion_4_selection_algebra():
    started = time.time()
    rng = np.random.default_rng(404)
    for _ in range(50):
        n = int(rng.integers(2, 25))
        scores = {
            ("s", i): QualityScores(
                blurriness=float(rng.uniform(0.5, 4.0)),
                psnr_inv=float(rng.uniform(0.5, 4.0)),
                roi_cov=float(rng.uniform(0, 1)),
                roi_mean=float(rng.uniform(0, 1)),
            )
            for i in range(n)
        }
        keys = sorted(scores)
        mean_blur = np.mean([scores[k].blurriness for k in keys])
        mean_psnr = np.mean([scores[k].psnr_inv for k in keys])
        expect = [k for k in keys if scores[k].blurriness < mean_blur and scores[k].psnr_inv < mean_psnr]
        assert select_initial(scores) == expect

        eps0 = float(rng.uniform(0, 1.2))
        cap = int(rng.integers(1, 10))
        feats = np.array([[scores[k].roi_cov, scores[k].roi_mean] for k in keys])
        mu, sd = feats.mean(axis=0), feats.std(axis=0)
        sd[sd == 0] = 1.0
        norm = (feats - mu) / sd
        order = sorted(range(n), key=lambda i: (scores[keys[i]].blurriness, keys[i]))
        kept: list[int] = []
        for i in order:
            if all(float(np.linalg.norm(norm[i] - norm[j])) > eps0 for j in kept):
                kept.append(i)
        expect_kept = {keys[i] for i in kept[:cap]}
        assert set(dedup_epsilon(keys, scores, eps0=eps0, cap=cap)) == expect_kept

    spec = SyntheticSpec(n_stacks=1, slices_per_stack=8, image_size=32,
                         lesion_radius_range=(3, 6), seed=44)
    records = normalize_dataset(generate_synthetic_stack(spec), 32).records
    model = build_model(ModelConfig(input_size=32, base_channels=2), seed=4)
    _, none_selected = select_minimal(model, records, q0=0.0)
    assert none_selected == []
    _, all_selected = select_minimal(model, records, q0=1.001)
    assert len(all_selected) == len(records)
    forward_order, _ = select_minimal(model, records, q0=0.9)
    backward_order, _ = select_minimal(model, records[::-1], q0=0.9)
    assert {v.key: (v.q, v.selected) for v in forward_order} == \
           {v.key: (v.q, v.selected) for v in backward_order}
    _announce(4, started, 10, "50 brute-force tables, gate boundaries, permutation invariance")


# ---------------------------------------------------------------------------
# 5. Architecture checks
# ---------------------------------------------------------------------------

def _shape_table_count(base: int) -> int:
    ch = [base * f for f in (1, 2, 4, 8, 16)]
    total, in_ch = 0, 1
    for i in range(1, 6):
        c = ch[i - 1]
        total += 9 * in_ch * c + c + 2 * c + 9 * c * c + c + 2 * c
        in_ch = c
    for j in range(2, 6):
        for i in range(1, 7 - j):
            c, below = ch[i - 1], ch[i]
            total += 4 * below * c + c + 9 * (j * c) * c + c + 9 * c * c + c
    for i, _ in HEAD_NODES:
        total += ch[i - 1] + 1
    return total


def test_criterion_5_architecture_checks():
    started = time.time()
    for base in (2, 3, 4):
        model = build_model(ModelConfig(input_size=16, base_channels=base), seed=0)
        assert count_params(model) == _shape_table_count(base)

    for size, base in ((32, 2), (48, 3)):
        model = build_model(ModelConfig(input_size=size, base_channels=base), seed=1)
        out = forward(model, np.random.default_rng(0).uniform(0, 1, (2, size, size)))[0]
        assert out.l4.shape == (size, size)
        assert out.l3.shape == (size // 2, size // 2)
        assert out.l2.shape == (size // 4, size // 4)
        assert out.l1.shape == (size // 8, size // 8)
        for level in (out.l1, out.l2, out.l3, out.l4):
            assert np.all(level > 0.0) and np.all(level < 1.0)

    model = build_model(ModelConfig(input_size=32, base_channels=2), seed=5)
    image = np.random.default_rng(2).uniform(0, 1, (32, 32))
    before = forward(model, image[None])[0]
    with torch.no_grad():
        for j in (2, 3, 4):
            for p in model.node(1, j).parameters():
                p.zero_()
            for p in getattr(model, f"up_1_{j}").parameters():
                p.zero_()
    after = forward(model, image[None])[0]
    np.testing.assert_array_equal(before.l1, after.l1)
    np.testing.assert_array_equal(before.l2, after.l2)
    np.testing.assert_array_equal(before.l3, after.l3)

    full = SegModel(ModelConfig(input_size=256, base_channels=32))
    total = count_params(full)
    assert total == _shape_table_count(32)
    delta = total - PUBLISHED_PARAM_COUNT
    detail = (
        f"default config: {total:,} parameters vs published {PUBLISHED_PARAM_COUNT:,} "
        f"(delta {delta:+,}, informational; exact original hyperparameters unrecoverable)"
    )
    _announce(5, started, 60, detail)


# ---------------------------------------------------------------------------
# 6. End-to-end synthetic experiment
# ---------------------------------------------------------------------------

# Desk-scale calibration: the criterion pins the data scale (3 x 60 at
# 64x64), base_channels=8 and 20 epochs. The remaining knobs are desk-tuned:
# lr 1.5e-3 / batch 2 so 20 epochs actually converge on ~18 slices, dropout
# 0.2, initial set capped at 6 per stack. The agreement gate runs at
# q0=0.78 here: head disagreement lives on mask boundaries, whose share of
# the mask quadruples going from the published 256x256 to this 64x64 scale
# (a pool-saturated model's level-3/level-4 agreement plateaus near 0.93,
# against ~0.96+ at full scale), so the 0.9-style default would sit above
# what even a converged model can reach. The gate-boundary criterion below
# still runs at the 0.9 default.
ACCEPT6_SEEDS = (0, 1, 2, 3, 4)


def _experiment_config(seed: int) -> RunConfig:
    return RunConfig(
        synthetic=SyntheticSpec(n_stacks=3, slices_per_stack=60, image_size=64, seed=seed),
        use_synthetic=True,
        source_set=True,
        quality=QualityConfig(eps0=0.35, cap=6),
        model=ModelConfig(base_channels=8, dropout_rate=0.2),
        train=TrainConfig(learning_rate=1.5e-3, epochs=20, batch_size=2),
        selection=SelectionConfig(q0=0.78),
        seed=seed,
    )


def test_criterion_6_end_to_end_synthetic_experiment(tmp_path):
    started = time.time()
    fractions, pipeline_dice, random_dice, level_deltas = [], [], [], []
    for seed in ACCEPT6_SEEDS:
        config = _experiment_config(seed)
        result = run_pipeline(config, tmp_path / f"seed{seed}")
        report = result.report
        fractions.append(report.fraction_selected)
        pipeline_dice.append(result.metrics.dice)
        history = result.history_finetune
        level_deltas.append(abs(history.l3[-1] - history.l4[-1]))

        dataset = normalize_dataset(
            assign_test_split(generate_synthetic_stack(config.synthetic), config.test_fraction), 64
        )
        budget = len(report.s0) + len(report.s_m)
        mean_random, _ = random_baseline(
            dataset.pool(),
            fraction=budget / len(dataset.pool()),
            runs=1,
            model_config=config.model,
            train_config=config.train,
            seed=seed + 100,
            eval_records=dataset.test(),
        )
        random_dice.append(mean_random.dice)
        print(
            f"  seed {seed}: fraction {report.fraction_selected:.3f} "
            f"(s0 {len(report.s0)}, s_m {len(report.s_m)}), dice {result.metrics.dice:.3f} "
            f"vs random {mean_random.dice:.3f}, level3/4 loss delta {level_deltas[-1]:.4f}"
        )

    in_window = sum(0.05 <= f <= 0.30 for f in fractions)
    median_fraction = sorted(fractions)[len(fractions) // 2]
    assert in_window >= 4, f"(a) fractions {fractions}"
    assert 0.08 <= median_fraction <= 0.20, f"(a) median fraction {median_fraction} of {sorted(fractions)}"

    mean_pipeline = float(np.mean(pipeline_dice))
    mean_random_dice = float(np.mean(random_dice))
    assert mean_pipeline >= mean_random_dice - 0.05, f"(b) {mean_pipeline} vs {mean_random_dice}"

    close_levels = sum(d < 0.1 for d in level_deltas)
    assert close_levels >= 3, f"(c) level deltas {level_deltas}"

    detail = (
        f"fractions {[round(f, 3) for f in fractions]} (median {median_fraction:.3f}); "
        f"dice {mean_pipeline:.3f} vs random {mean_random_dice:.3f}; "
        f"level3/4 deltas < 0.1 in {close_levels}/5 seeds"
    )
    _announce(6, started, 30 * 60, detail)


# ---------------------------------------------------------------------------
# 7. Determinism end to end
# ---------------------------------------------------------------------------

DETERMINISM_CONFIG = """
[synthetic]
n_stacks = 1
slices_per_stack = 16
image_size = 32
lesion_radius_range = [3, 6]

[quality]
cap = 5

[model]
base_channels = 2

[train]
learning_rate = 1e-3
epochs = 3
batch_size = 4

[selection]
q0 = 0.85
"""


def test_criterion_7_pipeline_determinism(tmp_path):
    started = time.time()
    config_file = tmp_path / "determinism.toml"
    config_file.write_text(DETERMINISM_CONFIG)
    run_dirs = []
    for name in ("one", "two"):
        out = tmp_path / name
        assert main(["run-pipeline", "--config", str(config_file), "--seed", "7", "--out", str(out)]) == 0
        run_dirs.append(next(p for p in out.iterdir() if p.is_dir()))
    first, second = run_dirs
    for artifact in ("selection_report.json", "checkpoint_initial.qseg", "checkpoint_final.qseg"):
        assert (first / artifact).read_bytes() == (second / artifact).read_bytes(), artifact
    _announce(7, started, 10 * 60, "selection report and both checkpoints byte-identical")


# ---------------------------------------------------------------------------
# 8. Gate behavior at the published operating point
# ---------------------------------------------------------------------------

def test_criterion_8_gate_at_high_agreement():
    started = time.time()
    l4 = np.zeros((32, 32), dtype=np.float32)
    l4[:5, :5] = 1.0
    l3_resized = l4.copy()
    l3_resized[4, 4] = 0.0  # heads agree on 24 of 25 foreground pixels
    outputs = LevelOutputs(
        l1=np.zeros((4, 4), dtype=np.float32),
        l2=np.zeros((8, 8), dtype=np.float32),
        l3=np.zeros((16, 16), dtype=np.float32),
        l4=l4,
        l1r=np.zeros((32, 32), dtype=np.float32),
        l2r=np.zeros((32, 32), dtype=np.float32),
        l3r=l3_resized,
    )
    q = quality_from_outputs(outputs)
    assert q == 24 / 25
    assert verdict_for(("stack", 0), q, 0.9).selected is False
    assert verdict_for(("stack", 0), q, 0.97).selected is True
    _announce(8, started, 1, "q = 0.96 slice: excluded at q0=0.9, included at q0=0.97")
