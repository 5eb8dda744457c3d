"""Acceptance gate: ten numbered criteria, each printing one PASS/FAIL
line.  Tolerances and budgets are fixed; the slower criteria (5-7) run
scaled-down training experiments and dominate the suite's runtime."""
import functools
import sys
import time

import numpy as np
import pytest

from r2aunet.data import (GeometricParams, apply_geometric, make_split,
                          merge_masks, resize_mask, synth_blobs)
from r2aunet.losses import (LossConfig, bce, dice_coefficient, focal_tversky,
                            tversky_grad, tversky_index, wbce)
from r2aunet.metrics import (METRIC_CSV_COLUMNS, ConfusionCounts,
                             scalar_metrics)
from r2aunet.model import (ModelConfig, build, load_checkpoint,
                           save_checkpoint)
from r2aunet.tensor import Tensor
from r2aunet.training import (TABLE1_GRID, TrainConfig, ablation_grid,
                              evaluate_model, train)
from r2aunet.verification import run_gradcheck_suite


def criterion(num, desc):
    """Print one PASS/FAIL line per criterion on the real stdout (pytest
    captures sys.stdout, so passing criteria would otherwise be silent)."""
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kw):
            try:
                fn(*args, **kw)
            except BaseException:
                print(f"criterion {num:2d} FAIL  {desc}", file=sys.__stdout__,
                      flush=True)
                raise
            print(f"criterion {num:2d} PASS  {desc}", file=sys.__stdout__,
                  flush=True)
        return wrapper
    return deco


def _blob_splits(n, size, imbalance, seed, val_fraction=0.15):
    samples = synth_blobs(n, image_size=size, imbalance_target=imbalance,
                          seed=seed)
    split = make_split([s.id for s in samples], val_fraction, seed=seed)
    return {"train": [s for s in samples if split[s.id] == "train"],
            "val": [s for s in samples if split[s.id] == "val"]}


@criterion(1, "gradient suite: all blocks and losses, 10 seeds, < 2 min")
def test_criterion_1_gradient_suite():
    start = time.monotonic()
    for seed in range(10):
        for res in run_gradcheck_suite(seed=seed, depth=2, size=16):
            assert res.passed, \
                f"seed {seed} {res.name}: {res.max_rel_error:.3e} >= {res.tolerance}"
    assert time.monotonic() - start < 120.0


@criterion(2, "analytic Tversky gradient vs finite differences and autodiff")
def test_criterion_2_tversky_gradient_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(8, 65))
        p0 = rng.uniform(0.05, 0.95, n)
        g0 = (rng.uniform(size=n) > 0.5).astype(float)
        g0[rng.integers(n)] = 1.0  # at least one positive
        d_p0, d_p1 = tversky_grad(p0, g0, 0.3, 0.7)
        analytic = d_p0 - d_p1

        t = Tensor(p0.copy(), requires_grad=True)
        tversky_index(t, g0, 0.3, 0.7, eps=0.0).backward()
        assert np.abs(t.grad - analytic).max() < 1e-10

        step = 1e-6
        for i in rng.choice(n, size=4, replace=False):
            bump = np.zeros(n)
            bump[i] = step
            hi = tversky_index(Tensor(p0 + bump), g0, 0.3, 0.7, eps=0.0).data
            lo = tversky_index(Tensor(p0 - bump), g0, 0.3, 0.7, eps=0.0).data
            assert abs((hi - lo) / (2 * step) - analytic[i]) < 1e-6


@criterion(3, "loss identities exact to 1e-12 in 64-bit")
def test_criterion_3_loss_identities():
    rng = np.random.default_rng(1)
    for _ in range(20):
        g = (rng.uniform(size=32) > 0.6).astype(float)
        p = (rng.uniform(size=32) > 0.4).astype(float)
        p[0] = g[0] = 1.0  # guarantee one true positive
        # balanced Tversky index on binary inputs is the Dice coefficient
        ti = tversky_index(Tensor(p), g, 0.5, 0.5, eps=0.0).data.item()
        assert abs(ti - dice_coefficient(p, g)) < 1e-12
        # balanced focal Tversky at gamma = 1 is one minus that value
        ftl = focal_tversky(Tensor(p), g, 0.5, 0.5, 1.0, eps=0.0).data.item()
        assert abs(ftl - (1.0 - ti)) < 1e-12

        soft = rng.uniform(0.05, 0.95, 32)
        half = wbce(Tensor(soft), g, 0.5).data.item()
        full = bce(Tensor(soft), g).data.item()
        assert abs(half - 0.5 * full) < 1e-12


@criterion(4, "worked values: TI 0.7, FTL 0.3^0.75, dice 0.5 / kappa 0")
def test_criterion_4_worked_values():
    p = Tensor(np.array([0.7, 0.3]))
    g = np.array([1.0, 0.0])
    ti = tversky_index(p, g, 0.5, 0.5, eps=0.0).data.item()
    assert abs(ti - 0.7) < 1e-12
    ftl = focal_tversky(p, g, 0.5, 0.5, 0.75, eps=0.0).data.item()
    assert abs(ftl - 0.4053600464421103) < 1e-12
    m = scalar_metrics(ConfusionCounts(tp=1, fp=1, fn=1, tn=1))
    assert m["dice"] == pytest.approx(0.5, abs=1e-12)
    assert m["kappa"] == pytest.approx(0.0, abs=1e-12)


@criterion(5, "toy training reaches held-out dice >= 0.85, 3 seeds, <= 15 min")
def test_criterion_5_toy_training():
    start = time.monotonic()
    cfg = TrainConfig(
        epochs=20, batch_size=4,
        loss=LossConfig("focal_tversky", alpha=0.3, beta=0.7, gamma=0.75),
        lr=1e-4, decay=1e-5, early_stop_dice=0.85)
    for seed in range(3):
        splits = _blob_splits(200, 64, 0.08, seed)
        model = build(ModelConfig(depth=3, base_channels=8), seed=seed,
                      dtype=np.float32)
        model, _, _ = train(model, splits, cfg, seed=seed)
        val = evaluate_model(model, splits["val"], batch_size=4)
        assert val["dice"] >= 0.85, f"seed {seed}: dice {val['dice']:.4f}"
    assert time.monotonic() - start <= 900.0


@criterion(6, "higher Tversky beta does not hurt recall (5 seeds, -0.02 slack)")
def test_criterion_6_recall_vs_beta():
    def mean_recall(alpha, beta):
        recalls = []
        for seed in range(5):
            splits = _blob_splits(100, 32, 0.08, seed)
            cfg = TrainConfig(epochs=8, batch_size=4, lr=1e-3,
                              loss=LossConfig("tversky", alpha=alpha, beta=beta))
            model = build(ModelConfig(depth=2, base_channels=8), seed=seed,
                          dtype=np.float32)
            model, _, _ = train(model, splits, cfg, seed=seed)
            recalls.append(evaluate_model(model, splits["val"], 4)["recall"])
        return float(np.mean(recalls))

    recall_hi_beta = mean_recall(0.3, 0.7)
    recall_lo_beta = mean_recall(0.7, 0.3)
    assert recall_hi_beta >= recall_lo_beta - 0.02, \
        f"{recall_hi_beta:.4f} vs {recall_lo_beta:.4f}"


@criterion(7, "loss-grid runner: all 19 configurations finish with finite metrics")
def test_criterion_7_ablation_machinery():
    start = time.monotonic()
    splits = _blob_splits(40, 32, 0.10, seed=0)
    cfg = TrainConfig(epochs=2, batch_size=4, lr=1e-3)
    rows = ablation_grid(splits, ModelConfig(depth=2, base_channels=4),
                         TABLE1_GRID, cfg, seed=0)
    assert len(rows) == 19
    for row in rows:
        assert list(row)[:len(METRIC_CSV_COLUMNS)] == METRIC_CSV_COLUMNS
        assert "error" not in row, row
        for k in ("dice", "precision", "recall", "accuracy", "auc", "kappa"):
            assert np.isfinite(row[k]), (row["loss"], k, row[k])
    assert time.monotonic() - start <= 3 * 3600.0


@criterion(8, "architecture invariants over 5 random configurations")
def test_criterion_8_architecture_invariants():
    rng = np.random.default_rng(2)
    for _ in range(5):
        cfg = ModelConfig(
            depth=int(rng.integers(1, 4)),
            base_channels=int(rng.integers(2, 9)),
            timesteps=int(rng.integers(1, 4)),
            use_attention=bool(rng.integers(2)),
            use_residual=bool(rng.integers(2)))
        model = build(cfg, seed=int(rng.integers(100)))
        size = 8 * 2 ** cfg.depth
        x = Tensor(rng.normal(size=(1, 1, size, size)))
        out = model(x, mode="train")
        assert out.shape == x.shape
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)
        ladder = [s.unit.out_ch for s in model.encoders]
        assert ladder == [cfg.base_channels * 2 ** k for k in range(cfg.depth)]
        assert model.bottleneck.unit.out_ch == cfg.base_channels * 2 ** cfg.depth
        # decoder order is deepest-first: the last gate covers the
        # shallowest skip and must be absent
        assert model.gates[-1] is None
        if not cfg.use_attention:
            assert all(g is None for g in model.gates)


@criterion(9, "pipeline invariants: merge, binarity, splits, determinism")
def test_criterion_9_pipeline_invariants():
    rng = np.random.default_rng(3)
    m = (rng.uniform(size=(16, 16)) > 0.6).astype(float)
    np.testing.assert_array_equal(merge_masks([m]), m)
    np.testing.assert_array_equal(merge_masks([m, m]), m)
    np.testing.assert_array_equal(merge_masks([m, np.zeros_like(m)]), m)

    for p in (GeometricParams(flip_h=True, angle=90.0),
              GeometricParams(angle=23.0, zoom=1.07, shear=4.0),
              GeometricParams(shift_x=1.5, shift_y=-2.5)):
        out = apply_geometric(m, p, is_mask=True)
        assert set(np.unique(out)) <= {0.0, 1.0}
    assert set(np.unique(resize_mask(m, 9))) <= {0.0, 1.0}

    ids = [f"s{i}" for i in range(40)]
    split = make_split(ids, 0.2, seed=4)
    assert set(split) == set(ids)
    assert {"train", "val"} == set(split.values())

    a = synth_blobs(5, image_size=32, seed=5)
    b = synth_blobs(5, image_size=32, seed=5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.mask, y.mask)
        assert set(np.unique(x.mask)) <= {0.0, 1.0}


@criterion(10, "checkpoint round-trip: bit-identical forward pass")
def test_criterion_10_checkpoint_round_trip(tmp_path):
    model = build(ModelConfig(depth=2, base_channels=4), seed=6,
                  dtype=np.float32)
    rng = np.random.default_rng(7)
    # advance the BN running stats so the buffers are non-trivial
    model(Tensor(rng.normal(size=(2, 1, 16, 16)).astype(np.float32)), "train")
    path = tmp_path / "model.r2au"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    x = rng.normal(size=(1, 1, 16, 16)).astype(np.float32)
    a = model(Tensor(x.copy()), mode="eval").data
    b = loaded(Tensor(x.copy()), mode="eval").data
    np.testing.assert_array_equal(a, b)
