import math

import numpy as np
import pytest
import torch

from xaiens.data import Dataset, ImageSample, generate_synthetic_shapes
from xaiens.ensembler import EnsemblerConfig, build_ensembler
from xaiens.explainers import SIGNED, AttributionMap, ExplanationSet
from xaiens.reports import read_csv
from xaiens.training import (
    HISTORY_COLUMNS,
    TrainConfig,
    TrainingError,
    evaluate_split,
    soft_dice_loss,
    soft_dice_per_sample,
    train,
)

SIDE = 32


def mask_sets(dataset, noise=0.0, seed=0):
    """One signed map per image that is a (noisy) copy of its mask."""
    rng = np.random.default_rng(seed)
    sets = {}
    for s in dataset.samples:
        v = 2.0 * s.mask.astype(np.float32) - 1.0 + noise * rng.standard_normal(s.mask.shape).astype(np.float32)
        v = np.clip(v, -1, 1)
        amap = AttributionMap("Probe", np.ascontiguousarray(np.broadcast_to(v, (3, SIDE, SIDE))), SIGNED)
        sets[s.id] = ExplanationSet(s.id, (amap,), "probe")
    return sets


def small_dataset(n=6):
    ds, _ = generate_synthetic_shapes(n, SIDE, ("circle", "square"), seed=2)
    return ds


def small_model(seed=0):
    return build_ensembler(EnsemblerConfig(p=1, input_side=SIDE, width_scale=0.125, blocks=(1, 1, 1, 1)), seed)


# ---------------------------------------------------------------- soft dice


def test_dice_zero_on_perfect_binary_match():
    mask = torch.zeros(8, 8)
    mask[2:5, 1:7] = 1
    for s in (0.0, 1.0, 7.5):
        assert float(soft_dice_loss(mask, mask, s)) == 0.0


def test_dice_disjoint_closed_form():
    mask = torch.zeros(10, 10, dtype=torch.float64)
    mask[:3] = 1
    n = mask.numel()
    for s in (1.0, 0.5, 3.0):
        assert abs(float(soft_dice_loss(1 - mask, mask, s)) - (1 - s / (n + s))) < 1e-9


def test_dice_half_prediction_arithmetic():
    mask = torch.zeros(4, 4)
    mask[:2] = 1
    assert float(soft_dice_loss(torch.full((4, 4), 0.5), mask, 0.0)) == 0.5


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        soft_dice_loss(torch.zeros(3, 3), torch.zeros(3, 4))
    with pytest.raises(ValueError):
        soft_dice_per_sample(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4))


def test_dice_range_on_random_inputs():
    gen = torch.Generator().manual_seed(0)
    for _ in range(50):
        pred = torch.rand(6, 6, generator=gen)
        mask = (torch.rand(6, 6, generator=gen) > 0.5).float()
        loss = float(soft_dice_loss(pred, mask))
        assert 0.0 <= loss < 1.0


def test_dice_gradient_matches_central_differences():
    gen = torch.Generator().manual_seed(11)
    eps = 1e-6
    for _ in range(20):
        pred = (0.05 + 0.9 * torch.rand(8, 8, generator=gen, dtype=torch.float64)).requires_grad_(True)
        mask = (torch.rand(8, 8, generator=gen, dtype=torch.float64) > 0.5).double()
        (grad,) = torch.autograd.grad(soft_dice_loss(pred, mask), pred)
        fd = torch.zeros_like(pred)
        with torch.no_grad():
            for idx in np.ndindex(8, 8):
                up, down = pred.clone(), pred.clone()
                up[idx] += eps
                down[idx] -= eps
                fd[idx] = (soft_dice_loss(up, mask) - soft_dice_loss(down, mask)) / (2 * eps)
        rel = float((grad - fd).norm() / fd.norm())
        assert rel < 1e-4


def test_per_sample_matches_single():
    gen = torch.Generator().manual_seed(1)
    pred = torch.rand(3, 5, 5, generator=gen)
    mask = (torch.rand(3, 5, 5, generator=gen) > 0.5).float()
    per = soft_dice_per_sample(pred, mask)
    for k in range(3):
        assert torch.allclose(per[k], soft_dice_loss(pred[k], mask[k]))


# ------------------------------------------------------------------ config


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=1e-10)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=0)


# -------------------------------------------------------------------- loop


def test_overfit_smoke():
    ds = small_dataset(6)
    sets = mask_sets(ds, noise=0.3)
    model = small_model()
    before = evaluate_split(model, sets, ds, "train").loss
    cfg = TrainConfig(max_epochs=150, batch_size=2, augment=False, lr=1e-3)
    model, history = train(model, sets, ds, cfg)
    # 4 training images, 2 steps per epoch -> 300 optimisation steps
    assert len(ds.split("train")) == 4
    assert history.records[-1]["train_loss"] < before
    first = history.column("train_loss")[:25]
    assert first[-1] < first[0]


def test_training_is_deterministic():
    ds = small_dataset(6)
    sets = mask_sets(ds, noise=0.3)
    cfg = TrainConfig(max_epochs=3, batch_size=2)
    _, h1 = train(small_model(), sets, ds, cfg)
    _, h2 = train(small_model(), sets, ds, cfg)
    assert abs(h1.records[-1]["train_loss"] - h2.records[-1]["train_loss"]) < 1e-6
    assert h1.records == h2.records


def test_lr_floor_stops_training():
    ds = small_dataset(6)
    sets = mask_sets(ds)
    # a huge threshold makes every epoch after the first a non-improvement
    cfg = TrainConfig(lr=1e-8, lr_floor=5e-9, plateau_patience=1, plateau_threshold=1.0, max_epochs=50, augment=False)
    _, history = train(small_model(), sets, ds, cfg)
    assert history.stopped_by == "lr_floor"
    assert len(history) < 50


def test_halvings_are_spaced_by_patience():
    ds = small_dataset(6)
    sets = mask_sets(ds)
    cfg = TrainConfig(plateau_patience=2, plateau_threshold=1.0, max_epochs=9, augment=False)
    _, history = train(small_model(), sets, ds, cfg)
    lrs = history.column("lr")
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    changes = [i for i in range(1, len(lrs)) if lrs[i] != lrs[i - 1]]
    assert changes, "expected at least one halving"
    assert all(lrs[i] == lrs[i - 1] / 2 for i in changes)
    gaps = np.diff([0] + changes)
    assert all(g >= 2 for g in gaps)
    assert history.stopped_by == "max_epochs"


def test_missing_set_raises():
    ds = small_dataset(6)
    sets = mask_sets(ds)
    sets.pop(ds.split("train")[0].id)
    with pytest.raises(TrainingError, match="missing explanation set"):
        train(small_model(), sets, ds, TrainConfig(max_epochs=1))


class _Exploding(torch.nn.Module):
    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.cfg = inner.cfg

    def forward(self, x):
        return self.inner(x) * float("nan")


def test_non_finite_loss_aborts_with_diagnostics():
    ds = small_dataset(6)
    with pytest.raises(TrainingError, match="non-finite loss at epoch 0"):
        train(_Exploding(small_model()), mask_sets(ds), ds, TrainConfig(max_epochs=1))


class _Oracle(torch.nn.Module):
    """Returns its input's first channel mapped back to {0, 1}."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg

    def forward(self, x):
        return (x[:, :1] + 1) / 2


def test_evaluate_split_perfect_prediction():
    ds = small_dataset(6)
    rep = evaluate_split(_Oracle(small_model().cfg), mask_sets(ds), ds, "test")
    assert rep.ens_iou == rep.ens_f1 == rep.ens_acc == 1.0
    assert rep.loss == 0.0
    assert rep.n == len(ds.split("test"))


def test_evaluate_empty_split_raises():
    ds = small_dataset(6)
    only_train = Dataset(tuple(ImageSample(s.id, s.image, s.mask, s.label, "train") for s in ds.samples), "x", 0)
    with pytest.raises(TrainingError, match="empty"):
        evaluate_split(small_model(), mask_sets(ds), only_train, "test")


def test_history_csv_and_best_checkpoint(tmp_path):
    ds = small_dataset(6)
    cfg = TrainConfig(max_epochs=2)
    _, history = train(small_model(), mask_sets(ds), ds, cfg, checkpoint_dir=tmp_path, digest="abc")
    assert (tmp_path / "best.pt").exists()
    history.to_csv(tmp_path / "history.csv", "abc")
    digest, rows = read_csv(tmp_path / "history.csv", expect_digest="abc")
    assert digest == "abc"
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert [r["epoch"] for r in rows] == [0.0, 1.0]
    assert all(math.isfinite(r["valid_loss"]) for r in rows)
