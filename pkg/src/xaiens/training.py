"""Soft Dice loss, the plateau-halving schedule and the ensembler training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from .data import AugmentConfig, Dataset, augment_maps
from .ensembler import XAIEnsembler, binarize, check_set, predict_values, save_ensembler
from .explainers import ExplanationSet
from .metrics import Confusion, MetricReport, pixel_confusion, report_from_confusion
from .reports import write_csv

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "valid_loss", "ens_acc", "ens_f1", "ens_iou")


class TrainingError(RuntimeError):
    pass


def soft_dice_loss(pred, mask, smoothing: float = 1.0):
    """``1 - (2 sum(pred*mask) + s) / (sum(pred) + sum(mask) + s)`` over all elements."""
    pred = torch.as_tensor(pred)
    mask = torch.as_tensor(mask, dtype=pred.dtype)
    if pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs mask {tuple(mask.shape)}")
    inter = (pred * mask).sum()
    return 1.0 - (2.0 * inter + smoothing) / (pred.sum() + mask.sum() + smoothing)


def soft_dice_per_sample(pred: torch.Tensor, mask: torch.Tensor, smoothing: float = 1.0) -> torch.Tensor:
    """Per-sample soft Dice loss of ``N x H x W`` batches."""
    if pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs mask {tuple(mask.shape)}")
    dims = tuple(range(1, pred.ndim))
    inter = (pred * mask).sum(dims)
    return 1.0 - (2.0 * inter + smoothing) / (pred.sum(dims) + mask.sum(dims) + smoothing)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    plateau_patience: int = 20
    plateau_threshold: float = 1e-5
    lr_floor: float = 1e-9
    max_epochs: int = 200
    batch_size: int = 8
    smoothing: float = 1.0
    seed: int = 0
    augment: bool = True
    valid_split: str = "test"

    def __post_init__(self):
        if self.lr <= self.lr_floor:
            raise ValueError("lr must exceed lr_floor")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    stopped_by: str = ""

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.records]

    def to_csv(self, path, digest: str = ""):
        rows = [[r[c] for c in HISTORY_COLUMNS] for r in self.records]
        return write_csv(path, HISTORY_COLUMNS, rows, digest, notes=[f"stopped_by: {self.stopped_by}"])


def _stacks(sets: Mapping[str, ExplanationSet], samples, model: XAIEnsembler, transform=None):
    missing = [s.id for s in samples if s.id not in sets]
    if missing:
        raise TrainingError(f"missing explanation set for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    stacks = []
    for s in samples:
        exp_set = sets[s.id] if transform is None else transform(sets[s.id])
        check_set(model, exp_set)
        stacks.append(exp_set.stack())
    x = np.stack(stacks).astype(np.float32)
    y = np.stack([np.asarray(s.mask) for s in samples]).astype(np.float32)
    return x, y


def _score(values: np.ndarray, masks: np.ndarray, cutoff: float, smoothing: float, split: str) -> MetricReport:
    losses = soft_dice_per_sample(torch.from_numpy(values).double(), torch.from_numpy(masks).double(), smoothing)
    confusion = Confusion(0, 0, 0, 0)
    for v, m in zip(values, masks):
        confusion = confusion + pixel_confusion(binarize(v, cutoff), m)
    return report_from_confusion(split, confusion, float(losses.mean()), len(values))


def train(
    model: XAIEnsembler,
    sets: Mapping[str, ExplanationSet],
    dataset: Dataset,
    cfg: TrainConfig = TrainConfig(),
    aug: AugmentConfig = AugmentConfig(),
    checkpoint_dir: str | Path | None = None,
    digest: str = "",
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[XAIEnsembler, TrainHistory]:
    """Minimise the summed soft Dice loss of ``model`` over the train split.

    The learning rate halves after ``plateau_patience`` epochs without a
    validation improvement; training stops at ``max_epochs`` or once the
    rate falls below ``lr_floor``. The model is trained in place and
    returned with its final weights; with ``checkpoint_dir`` the
    best-validation weights are also written to ``best.pt``.
    """
    train_samples = dataset.split("train")
    if not train_samples:
        raise TrainingError("dataset has no training samples")
    valid_samples = dataset.split(cfg.valid_split)
    x_train, y_train = _stacks(sets, train_samples, model)
    x_valid, y_valid = _stacks(sets, valid_samples, model) if valid_samples else (None, None)

    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt,
        mode="min",
        factor=0.5,
        # torch halves once the bad-epoch count exceeds ``patience``
        patience=cfg.plateau_patience - 1,
        threshold=cfg.plateau_threshold,
        threshold_mode="abs",
        min_lr=0.0,
        eps=0.0,
    )
    history = TrainHistory()
    best = math.inf
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.max_epochs):
        lr = opt.param_groups[0]["lr"]
        model.train()
        order = rng.permutation(len(x_train))
        aug_seeds = rng.integers(0, 2**31 - 1, size=len(order))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2 and len(order) > 1:
                # a single-sample batch breaks batch-norm statistics
                continue
            xb, yb = x_train[idx], y_train[idx]
            if cfg.augment:
                pairs = [augment_maps(xb[k], yb[k], int(aug_seeds[start + k]), aug) for k in range(len(idx))]
                xb = np.stack([p[0] for p in pairs])
                yb = np.stack([p[1] for p in pairs]).astype(np.float32)
            opt.zero_grad()
            pred = model(torch.from_numpy(np.ascontiguousarray(xb)))[:, 0]
            losses = soft_dice_per_sample(pred, torch.from_numpy(np.ascontiguousarray(yb)), cfg.smoothing)
            loss = losses.mean()
            if not torch.isfinite(loss):
                bad = [train_samples[i].id for i, l in zip(idx, losses) if not torch.isfinite(l)]
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}, lr {lr:g}; samples {bad}"
                )
            loss.backward()
            opt.step()
            total += float(losses.detach().sum())
            seen += len(idx)
        train_loss = total / max(seen, 1)

        if x_valid is not None:
            report = _score(predict_values(model, x_valid), y_valid, model.cfg.cutoff, cfg.smoothing, cfg.valid_split)
            valid_loss = report.loss
        else:
            report = None
            valid_loss = train_loss
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": train_loss,
            "valid_loss": valid_loss,
            "ens_acc": report.ens_acc if report else math.nan,
            "ens_f1": report.ens_f1 if report else math.nan,
            "ens_iou": report.ens_iou if report else math.nan,
        }
        history.records.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.info(
            "epoch %d lr %.3g train %.4f valid %.4f iou %.3f", epoch, lr, train_loss, valid_loss, record["ens_iou"]
        )
        if ckpt_dir is not None and valid_loss < best:
            best = valid_loss
            save_ensembler(model, ckpt_dir / "best.pt", {"epoch": epoch, "valid_loss": valid_loss}, digest)

        sched.step(valid_loss)
        if opt.param_groups[0]["lr"] < cfg.lr_floor:
            history.stopped_by = "lr_floor"
            break
    else:
        history.stopped_by = "max_epochs"
    model.eval()
    return model, history


def predict_split(
    model: XAIEnsembler,
    sets: Mapping[str, ExplanationSet],
    samples,
    transform: Callable[[ExplanationSet], ExplanationSet] | None = None,
) -> np.ndarray:
    x, _ = _stacks(sets, samples, model, transform)
    return predict_values(model, x)


def evaluate_split(
    model: XAIEnsembler,
    sets: Mapping[str, ExplanationSet],
    dataset: Dataset,
    split: str,
    smoothing: float = 1.0,
    transform: Callable[[ExplanationSet], ExplanationSet] | None = None,
) -> MetricReport:
    """Micro-averaged ens(acc/f1/iou) and mean soft Dice loss on one split."""
    samples = dataset.split(split)
    if not samples:
        raise TrainingError(f"split {split!r} is empty")
    values = predict_split(model, sets, samples, transform)
    masks = np.stack([np.asarray(s.mask) for s in samples]).astype(np.float32)
    return _score(values, masks, model.cfg.cutoff, smoothing, split)


def cross_validate(
    build: Callable[[], XAIEnsembler],
    sets: Mapping[str, ExplanationSet],
    dataset: Dataset,
    k: int = 5,
    cfg: TrainConfig = TrainConfig(),
    aug: AugmentConfig = AugmentConfig(),
) -> list[tuple[MetricReport, MetricReport]]:
    """Train a fresh ensembler per fold; returns ``(train, test)`` reports per fold."""
    from .data import apply_fold, kfold_split

    folds = kfold_split(dataset, k, cfg.seed)
    results = []
    for fold in range(k):
        fold_ds = apply_fold(dataset, folds, fold)
        model, _ = train(build(), sets, fold_ds, cfg, aug)
        train_report = evaluate_split(model, sets, fold_ds, "train", cfg.smoothing)
        test_report = evaluate_split(model, sets, fold_ds, "test", cfg.smoothing)
        results.append((train_report, test_report))
    return results


def mean_report(reports: list[MetricReport], split: str) -> MetricReport:
    n = len(reports)
    return MetricReport(
        split=split,
        ens_acc=sum(r.ens_acc for r in reports) / n,
        ens_f1=sum(r.ens_f1 for r in reports) / n,
        ens_iou=sum(r.ens_iou for r in reports) / n,
        loss=sum(r.loss for r in reports) / n,
        n=sum(r.n for r in reports),
    )
