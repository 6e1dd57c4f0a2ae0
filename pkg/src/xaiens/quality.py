"""Explanation quality on five axes and the per-axis ranking across methods.

Axes: localisation (pointing game), faithfulness (pixel flipping),
robustness (local Lipschitz estimate), complexity (Gini sparseness) and
randomisation (model parameter randomisation).
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata, spearmanr
from torch import nn

from .explainers import AttributionMap

AXES = ("localisation", "faithfulness", "robustness", "complexity", "randomisation")
ORIENTATION = {
    "localisation": "higher",
    "faithfulness": "higher",
    "robustness": "lower",
    "complexity": "higher",
    "randomisation": "higher",
}
RADAR_COLUMNS = ("method", "axis", "raw_score", "orientation", "rank")


class QualityError(ValueError):
    pass


class DegenerateScoreError(QualityError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    flip_step: float = 0.01
    flip_baseline: float = 0.0
    lipschitz_radius: float = 0.1
    lipschitz_samples: int = 3
    valid_range: tuple[float, float] | None = (-1.0, 1.0)
    randomisation_mode: str = "cascading"
    randomisation_layers: int | None = None
    robustness_images: int = 4
    randomisation_images: int = 2
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.flip_step <= 1.0:
            raise QualityError(f"flip_step must lie in (0, 1], got {self.flip_step}")
        if self.lipschitz_samples < 1:
            raise QualityError("lipschitz_samples must be >= 1")
        if self.lipschitz_radius <= 0:
            raise QualityError("lipschitz_radius must be > 0")
        if self.randomisation_mode not in ("cascading", "independent"):
            raise QualityError(f"unknown randomisation mode {self.randomisation_mode!r}")


@dataclass(frozen=True)
class QualityScores:
    method: str
    localisation: float
    faithfulness: float
    robustness: float
    complexity: float
    randomisation: float

    def as_dict(self) -> dict:
        return asdict(self)


def _values(attr) -> np.ndarray:
    return attr.values if isinstance(attr, AttributionMap) else np.asarray(attr)


def reduce_channels(attr) -> np.ndarray:
    """H x W mean of absolute values over channels (2-D input passes through)."""
    a = _values(attr)
    return np.abs(a).mean(axis=0) if a.ndim == 3 else np.abs(a)


# --------------------------------------------------------------- localisation


def pointing_game(attr, mask) -> int | None:
    """1 if the first row-major maximum lies inside ``mask``; None for an empty mask."""
    red = reduce_channels(attr)
    mask = np.asarray(mask)
    if red.shape != mask.shape:
        raise QualityError(f"shape mismatch: attribution {red.shape} vs mask {mask.shape}")
    if not mask.any():
        return None
    return int(bool(mask.flat[int(np.argmax(red))]))


def pointing_game_score(attrs: Sequence, masks: Sequence) -> tuple[float, int]:
    """Mean hit rate and the number of samples excluded for empty masks."""
    hits = [pointing_game(a, m) for a, m in zip(attrs, masks)]
    valid = [h for h in hits if h is not None]
    score = float(np.mean(valid)) if valid else math.nan
    return score, len(hits) - len(valid)


# --------------------------------------------------------------- faithfulness


def flip_order(attr) -> np.ndarray:
    """Pixel indices by descending attribution; ties keep row-major order."""
    red = reduce_channels(attr).ravel()
    return np.argsort(-red, kind="stable")


def flip_bounds(n_pixels: int, flip_step: float) -> np.ndarray:
    n_steps = math.ceil(round(1.0 / flip_step, 9))
    return np.rint(np.linspace(0, n_pixels, n_steps + 1)).astype(int)


@torch.no_grad()
def class_probability(model: nn.Module, batch: np.ndarray, target: int, batch_size: int = 64) -> np.ndarray:
    model.eval()
    x = torch.as_tensor(batch)
    out = [torch.softmax(model(x[i : i + batch_size]), dim=1)[:, target] for i in range(0, len(x), batch_size)]
    return torch.cat(out).double().numpy()


def pixel_flipping(model: nn.Module, image, attr, target: int, cfg: EvalConfig = EvalConfig()):
    """Degradation curve of the target probability and its faithfulness score.

    The curve holds the probability before flipping and after each batch of
    ``flip_step * H * W`` pixels is set to ``flip_baseline``; faithfulness is
    ``1 - mean(curve) / curve[0]`` (higher is better).
    """
    image = np.asarray(image)
    red = reduce_channels(attr)
    if red.shape != image.shape[1:]:
        raise QualityError(f"attribution {red.shape} does not match image {image.shape}")
    order = flip_order(attr)
    bounds = flip_bounds(red.size, cfg.flip_step)
    h, w = red.shape
    batch = np.repeat(image[None], len(bounds), axis=0)
    flat = batch.reshape(len(bounds), image.shape[0], h * w)
    for k in range(1, len(bounds)):
        flat[k:, :, order[bounds[k - 1] : bounds[k]]] = cfg.flip_baseline
    curve = class_probability(model, batch, target, cfg.batch_size)
    if curve[0] == 0:
        raise DegenerateScoreError("target probability on the unperturbed image is 0")
    return curve, float(1.0 - curve.mean() / curve[0])


# ----------------------------------------------------------------- robustness


def local_lipschitz(explain_fn: Callable[[np.ndarray], np.ndarray], image, cfg: EvalConfig = EvalConfig()) -> float:
    """Largest ``|e(x) - e(x')| / |x - x'|`` over sampled neighbours ``x'``.

    Neighbours are drawn uniformly from the box of half-width
    ``lipschitz_radius`` around ``x`` and clipped to ``valid_range``.
    """
    image = np.asarray(image)
    x = image.astype(np.float64)
    rng = np.random.default_rng(cfg.seed)
    e0 = np.asarray(_values(explain_fn(image)), dtype=np.float64)
    best = 0.0
    for _ in range(cfg.lipschitz_samples):
        for _attempt in range(10):
            x_new = x + rng.uniform(-cfg.lipschitz_radius, cfg.lipschitz_radius, x.shape)
            if cfg.valid_range is not None:
                x_new = np.clip(x_new, *cfg.valid_range)
            if np.any(x_new != x):
                break
        else:
            raise QualityError("perturbation collapsed onto the input 10 times in a row")
        x_new = x_new.astype(image.dtype)
        e_new = np.asarray(_values(explain_fn(x_new)), dtype=np.float64)
        ratio = np.linalg.norm((e_new - e0).ravel()) / np.linalg.norm((x_new - image).astype(np.float64).ravel())
        best = max(best, float(ratio))
    return best


# ----------------------------------------------------------------- complexity


def sparseness_gini(attr) -> float:
    """Gini index of the absolute attribution values (0 for all-zero input)."""
    a = np.sort(np.abs(_values(attr)).ravel().astype(np.float64))
    n = a.size
    total = a.sum()
    if n == 0 or total == 0:
        return 0.0
    i = np.arange(1, n + 1)
    return float(np.sum((2 * i - n - 1) * a) / (n * total))


# -------------------------------------------------------------- randomisation


def parameterized_layers(model: nn.Module) -> list[str]:
    """Names of modules owning parameters directly, in registration order."""
    return [
        name
        for name, module in model.named_modules()
        if any(p.requires_grad for p in module.parameters(recurse=False))
    ]


def rank_distance(a, b) -> float:
    """``1 - Spearman(a, b)`` on channel-reduced, flattened attributions."""
    ra = reduce_channels(a).ravel()
    rb = reduce_channels(b).ravel()
    if np.array_equal(ra, rb):
        return 0.0
    if np.all(ra == ra[0]) or np.all(rb == rb[0]):
        # rank correlation is undefined for a constant map; count as unrelated
        return 1.0
    return float(1.0 - spearmanr(ra, rb)[0])


@torch.no_grad()
def _randomize(module: nn.Module, gen: torch.Generator) -> None:
    for param in module.parameters(recurse=False):
        std = float(param.std(unbiased=False)) if param.numel() > 1 else 0.0
        if std == 0.0:
            std = float(param.abs().mean())
        param.copy_(torch.randn(param.shape, generator=gen, dtype=param.dtype) * std)


def model_parameter_randomisation(
    model: nn.Module,
    explain_fn: Callable[[nn.Module, np.ndarray, int], np.ndarray],
    image,
    target: int,
    cfg: EvalConfig = EvalConfig(),
) -> tuple[list[float], float]:
    """Per-layer rank distances after re-drawing weights, top layer first.

    ``model`` is never modified; every randomisation happens on a copy.
    """
    layers = parameterized_layers(model)
    if not layers:
        raise QualityError("model has no parameterized layers")
    layers = layers[::-1]
    if cfg.randomisation_layers is not None:
        layers = layers[: cfg.randomisation_layers]
    original = explain_fn(model, image, target)
    gen = torch.Generator().manual_seed(cfg.seed)
    distances = []
    work = copy.deepcopy(model).eval()
    for name in layers:
        if cfg.randomisation_mode == "independent":
            work = copy.deepcopy(model).eval()
        _randomize(dict(work.named_modules())[name], gen)
        distances.append(rank_distance(original, explain_fn(work, image, target)))
    score = float(np.mean(distances)) if distances else 0.0
    return distances, score


# -------------------------------------------------------------------- ranking


def radar_ranking(scores: Sequence[QualityScores]) -> list[dict]:
    """Per-axis ranks (average rank on ties); the best method gets the highest rank."""
    if len(scores) < 2:
        raise QualityError("ranking needs at least two methods")
    rows = []
    for axis in AXES:
        raw = np.array([getattr(s, axis) for s in scores], dtype=np.float64)
        oriented = raw if ORIENTATION[axis] == "higher" else -raw
        oriented = np.where(np.isnan(oriented), -np.inf, oriented)
        ranks = rankdata(oriented, method="average")
        for s, value, rank in zip(scores, raw, ranks):
            rows.append(
                {
                    "method": s.method,
                    "axis": axis,
                    "raw_score": float(value),
                    "orientation": ORIENTATION[axis],
                    "rank": float(rank),
                }
            )
    return rows


def rank_of(rows: list[dict], method: str, axis: str) -> float:
    for row in rows:
        if row["method"] == method and row["axis"] == axis:
            return row["rank"]
    raise KeyError((method, axis))


def is_first(rows: list[dict], method: str, axis: str) -> bool:
    """True when ``method`` holds the best rank on ``axis`` (ties allowed)."""
    best = max(r["rank"] for r in rows if r["axis"] == axis)
    return rank_of(rows, method, axis) == best
