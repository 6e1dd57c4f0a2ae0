"""Desk-scale toy classifier standing in for the pretrained backbones.

Any ``torch.nn.Module`` mapping a ``B x 3 x H x W`` batch to class logits can
be explained; GradCAM additionally needs a convolution layer, found through a
``last_conv`` attribute or, failing that, the last ``nn.Conv2d`` registered.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import AugmentConfig, Dataset, augment, draw_dihedral_params, model_input

logger = logging.getLogger(__name__)


class ToyClassifier(nn.Module):
    """Four conv blocks and a linear head."""

    def __init__(self, n_classes: int = 2, width: int = 16):
        super().__init__()
        chans = [3, width, 2 * width, 4 * width, 4 * width]
        blocks = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            blocks += [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(), nn.MaxPool2d(2)]
        # the last pool is replaced by global averaging below
        self.features = nn.Sequential(*blocks[:-1])
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(chans[-1], n_classes)
        self.n_classes = n_classes
        self.width = width

    @property
    def last_conv(self) -> nn.Conv2d:
        return self.features[-3]

    def forward(self, x):
        return self.head(torch.flatten(self.pool(self.features(x)), 1))


def find_last_conv(model: nn.Module) -> nn.Module:
    layer = getattr(model, "last_conv", None)
    if isinstance(layer, nn.Module):
        return layer
    convs = [m for m in model.modules() if isinstance(m, nn.Conv2d)]
    if not convs:
        raise ValueError("model has no convolution layer for GradCAM")
    return convs[-1]


def model_digest(model: nn.Module) -> str:
    """Content hash of the model's parameters and buffers."""
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class ClassifierTrainConfig:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 16
    width: int = 16
    seed: int = 0
    accuracy_floor: float = 0.95


def _batches(images, labels, batch_size):
    for start in range(0, len(labels), batch_size):
        yield images[start : start + batch_size], labels[start : start + batch_size]


@torch.no_grad()
def predict(model: nn.Module, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model(torch.from_numpy(images[start : start + batch_size])).argmax(1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: nn.Module, dataset: Dataset, split: str, aug: AugmentConfig = AugmentConfig()) -> float:
    samples = dataset.split(split)
    if not samples:
        raise ValueError(f"empty split {split!r}")
    images = np.stack([model_input(s, aug) for s in samples])
    labels = np.array([s.label for s in samples])
    return float((predict(model, images) == labels).mean())


def train_classifier(
    dataset: Dataset,
    cfg: ClassifierTrainConfig = ClassifierTrainConfig(),
    aug: AugmentConfig = AugmentConfig(),
) -> tuple[ToyClassifier, dict]:
    """Train a ToyClassifier on the train split; returns it with accuracies."""
    train = dataset.split("train")
    if not train:
        raise ValueError("dataset has no training samples")
    n_classes = max(s.label for s in dataset.samples) + 1
    n_classes = max(n_classes, len(dataset.class_names), 2)
    torch.manual_seed(cfg.seed)
    model = ToyClassifier(n_classes, cfg.width)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    # annealing to zero keeps the final weights from jumping between minima
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    rng = np.random.default_rng(cfg.seed)
    loss_fn = nn.CrossEntropyLoss()
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train))
        images = np.stack(
            [augment(train[i], 0, aug, params=draw_dihedral_params(rng)).image for i in order]
        )
        images = np.ascontiguousarray(np.moveaxis(images, -1, 1))
        labels = np.array([train[i].label for i in order])
        total = 0.0
        for xb, yb in _batches(images, labels, cfg.batch_size):
            opt.zero_grad()
            loss = loss_fn(model(torch.from_numpy(xb)), torch.from_numpy(yb))
            loss.backward()
            opt.step()
            total += loss.item() * len(yb)
        sched.step()
        logger.debug("classifier epoch %d loss %.4f", epoch, total / len(train))
    model.eval()
    stats = {"train_accuracy": accuracy(model, dataset, "train", aug)}
    if dataset.split("test"):
        stats["test_accuracy"] = accuracy(model, dataset, "test", aug)
        if stats["test_accuracy"] < cfg.accuracy_floor:
            logger.warning(
                "classifier test accuracy %.3f below floor %.3f", stats["test_accuracy"], cfg.accuracy_floor
            )
    return model, stats


def save_classifier(model: ToyClassifier, path, stats: dict | None = None) -> None:
    torch.save(
        {
            "kind": "toy",
            "n_classes": model.n_classes,
            "width": model.width,
            "state": model.state_dict(),
            "stats": stats or {},
            "digest": model_digest(model),
        },
        path,
    )


def load_classifier(path) -> nn.Module:
    """Load a toy checkpoint, or an external pickled ``nn.Module``."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if isinstance(blob, nn.Module):
        return blob.eval()
    if isinstance(blob, dict) and blob.get("kind") == "toy":
        model = ToyClassifier(blob["n_classes"], blob["width"])
        model.load_state_dict(blob["state"])
        return model.eval()
    raise ValueError(f"unrecognised classifier checkpoint {path}")
