"""Attribution methods with a uniform, normalized output contract.

Every method takes a classifier (``nn.Module`` returning logits for a
``B x 3 x H x W`` batch), one preprocessed image ``3 x H x W`` and a target
class. ``attribute`` returns raw scores; ``explain`` wraps them in a
normalized :class:`AttributionMap`.
"""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .classifier import find_last_conv

SIGNED = "signed"
UNSIGNED = "unsigned"

IMAGE = "Image"  # pseudo-method: the normalized input itself

VALUE_RANGE = {
    IMAGE: SIGNED,
    "Saliency": UNSIGNED,
    "NoiseTunnel": UNSIGNED,
    "IntegratedGradients": SIGNED,
    "GradientShap": SIGNED,
    "GuidedBackprop": SIGNED,
    "GradCAM": UNSIGNED,
    "GuidedGradCAM": SIGNED,
    "Lime": SIGNED,
    "Occlusion": SIGNED,
    "ShapleyValueSampling": SIGNED,
}
METHODS = tuple(VALUE_RANGE)
SAMPLING_METHODS = ("NoiseTunnel", "GradientShap", "Lime", "ShapleyValueSampling")
REGION_METHODS = ("Occlusion", "Lime", "ShapleyValueSampling")

PRESETS = {
    "baseline0": (IMAGE,),
    "local3": ("ShapleyValueSampling", "NoiseTunnel", "GuidedBackprop"),
    "cited4": ("GradientShap", "Lime", "Occlusion", "GuidedGradCAM"),
    "diverse7": (
        "IntegratedGradients",
        "GradientShap",
        "GuidedBackprop",
        "GuidedGradCAM",
        "Lime",
        "Occlusion",
        "ShapleyValueSampling",
    ),
}


class ExplainerError(ValueError):
    pass


@dataclass(frozen=True)
class ExplainConfig:
    seed: int = 0
    batch_size: int = 64
    ig_steps: int = 32
    smoothgrad_samples: int = 20
    smoothgrad_noise: float = 0.1
    gradshap_samples: int = 20
    gradshap_blur_sigma: float = 3.0
    lime_samples: int = 200
    lime_kernel_width: float = 0.25
    lime_ridge_alpha: float = 1.0
    shapley_permutations: int = 25
    grid: int = 8
    occlusion_window: int = 8
    occlusion_stride: int | None = None
    occlusion_fill: float = 0.0

    def digest(self, method: str) -> str:
        payload = json.dumps({"method": method, **asdict(self)}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class AttributionMap:
    method: str
    values: np.ndarray  # 3 x H x W
    value_range: str

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or v.shape[0] != 3:
            raise ExplainerError(f"{self.method}: attribution must be 3xHxW, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ExplainerError(f"{self.method}: attribution contains NaN/Inf")
        lo = -1.0 if self.value_range == SIGNED else 0.0
        if self.value_range not in (SIGNED, UNSIGNED):
            raise ExplainerError(f"unknown value range {self.value_range!r}")
        if v.size and (v.min() < lo or v.max() > 1.0):
            raise ExplainerError(f"{self.method}: values leave the {self.value_range} range")

    @property
    def shape(self):
        return self.values.shape

    def reduced(self) -> np.ndarray:
        """H x W channel mean of absolute values."""
        return np.abs(self.values).mean(axis=0)


@dataclass(frozen=True)
class ExplanationSet:
    image_id: str
    maps: tuple[AttributionMap, ...]
    preset: str

    def __post_init__(self):
        if not self.maps:
            raise ExplainerError("an explanation set needs at least one map")
        shapes = {m.shape for m in self.maps}
        if len(shapes) != 1:
            raise ExplainerError(f"{self.image_id}: maps have different shapes {shapes}")

    @property
    def p(self) -> int:
        return len(self.maps)

    @property
    def methods(self) -> tuple[str, ...]:
        return tuple(m.method for m in self.maps)

    def stack(self) -> np.ndarray:
        """All maps concatenated along channels: 3p x H x W."""
        return np.concatenate([m.values for m in self.maps], axis=0)


def normalize_attribution(raw, range_kind: str, method: str = "raw") -> AttributionMap:
    """Scale ``raw`` into its declared range.

    Signed scores are divided by their largest magnitude; unsigned scores are
    min-max scaled. Constant input maps to zeros.
    """
    raw = np.asarray(raw)
    if not np.all(np.isfinite(raw)):
        raise ExplainerError(f"{method}: raw attribution contains NaN/Inf")
    if range_kind == SIGNED:
        peak = np.abs(raw).max() if raw.size else 0.0
        values = raw / peak if peak > 0 else np.zeros_like(raw)
    elif range_kind == UNSIGNED:
        lo, hi = (raw.min(), raw.max()) if raw.size else (0.0, 0.0)
        values = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
    else:
        raise ExplainerError(f"unknown value range {range_kind!r}")
    if values.ndim == 2:
        values = np.broadcast_to(values, (3,) + values.shape)
    return AttributionMap(method, np.ascontiguousarray(values), range_kind)


# ----------------------------------------------------------------- model utils


def _as_tensor(image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image))
    if x.ndim != 3:
        raise ExplainerError(f"expected a 3 x H x W image, got shape {tuple(x.shape)}")
    return x


def _check_target(model: nn.Module, x: torch.Tensor, target: int) -> None:
    with torch.no_grad():
        n_classes = model(x[None]).shape[1]
    if not 0 <= target < n_classes:
        raise ExplainerError(f"target {target} out of range for {n_classes} classes")


@torch.no_grad()
def _scores(model: nn.Module, batch: torch.Tensor, target: int, batch_size: int) -> torch.Tensor:
    out = [model(batch[i : i + batch_size])[:, target] for i in range(0, len(batch), batch_size)]
    return torch.cat(out)


def _gradients(model: nn.Module, batch: torch.Tensor, target: int, batch_size: int) -> torch.Tensor:
    grads = []
    for i in range(0, len(batch), batch_size):
        xb = batch[i : i + batch_size].detach().clone().requires_grad_(True)
        (g,) = torch.autograd.grad(model(xb)[:, target].sum(), xb)
        grads.append(g)
    return torch.cat(grads)


class _GuidedReLUFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.clamp(min=0)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        return grad_out.clamp(min=0) * (x > 0).to(grad_out.dtype)


class GuidedReLU(nn.Module):
    def forward(self, x):
        return _GuidedReLUFn.apply(x)


def guided_view(model: nn.Module) -> nn.Module:
    """A private copy of ``model`` with every ``nn.ReLU`` using the guided rule."""
    view = copy.deepcopy(model).eval()
    for parent in list(view.modules()):
        for name, child in parent.named_children():
            if isinstance(child, nn.ReLU):
                setattr(parent, name, GuidedReLU())
    return view


def grid_features(side_h: int, side_w: int, grid: int) -> np.ndarray:
    """H x W map of feature ids for a ``grid x grid`` partition into cells."""
    rows = np.minimum(np.arange(side_h) * grid // side_h, grid - 1)
    cols = np.minimum(np.arange(side_w) * grid // side_w, grid - 1)
    return rows[:, None] * grid + cols[None, :]


def derive_seed(seed: int, key: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(key.encode())) % (2**32)


# --------------------------------------------------------------------- methods


def _saliency(model, x, target, cfg):
    return _gradients(model, x[None], target, cfg.batch_size)[0].abs()


def _noise_tunnel(model, x, target, cfg):
    gen = torch.Generator().manual_seed(cfg.seed)
    sigma = cfg.smoothgrad_noise * float(x.max() - x.min())
    noise = torch.randn((cfg.smoothgrad_samples,) + tuple(x.shape), generator=gen, dtype=x.dtype) * sigma
    grads = _gradients(model, x[None] + noise, target, cfg.batch_size)
    return grads.abs().mean(0)


def _integrated_gradients(model, x, target, cfg, baseline=None):
    baseline = torch.zeros_like(x) if baseline is None else baseline
    alphas = (torch.arange(cfg.ig_steps, dtype=x.dtype) + 0.5) / cfg.ig_steps
    path = baseline[None] + alphas[:, None, None, None] * (x - baseline)[None]
    grads = _gradients(model, path, target, cfg.batch_size)
    return (x - baseline) * grads.mean(0)


def _gradient_shap(model, x, target, cfg):
    rng = np.random.default_rng(cfg.seed)
    blurred = torch.from_numpy(
        ndimage.gaussian_filter(x.numpy(), sigma=(0, cfg.gradshap_blur_sigma, cfg.gradshap_blur_sigma))
    ).to(x.dtype)
    candidates = torch.stack([torch.zeros_like(x), blurred])
    which = torch.from_numpy(rng.integers(0, 2, cfg.gradshap_samples))
    alphas = torch.from_numpy(rng.random(cfg.gradshap_samples)).to(x.dtype)
    baselines = candidates[which]
    points = baselines + alphas[:, None, None, None] * (x[None] - baselines)
    grads = _gradients(model, points, target, cfg.batch_size)
    return ((x[None] - baselines) * grads).mean(0)


def _guided_backprop(model, x, target, cfg):
    return _gradients(guided_view(model), x[None], target, cfg.batch_size)[0]


def _gradcam(model, x, target, cfg):
    view = copy.deepcopy(model).eval()
    layer = find_last_conv(view)
    captured = {}
    handle = layer.register_forward_hook(lambda mod, inp, out: captured.__setitem__("act", out))
    try:
        score = view(x[None])[0, target]
    finally:
        handle.remove()
    act = captured["act"]
    (grad,) = torch.autograd.grad(score, act)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(1, keepdim=True))
    cam = F.interpolate(cam, size=tuple(x.shape[1:]), mode="bilinear", align_corners=False)
    return cam[0, 0].detach()


def _guided_gradcam(model, x, target, cfg):
    return _guided_backprop(model, x, target, cfg) * _gradcam(model, x, target, cfg)[None]


def occlusion_windows(side_h: int, side_w: int, window: int, stride: int):
    tops = list(range(0, max(side_h - window, 0) + 1, stride))
    lefts = list(range(0, max(side_w - window, 0) + 1, stride))
    if tops[-1] + window < side_h:
        tops.append(side_h - window)
    if lefts[-1] + window < side_w:
        lefts.append(side_w - window)
    return [(t, l) for t in tops for l in lefts]


def _occlusion(model, x, target, cfg):
    _, h, w = x.shape
    win = min(cfg.occlusion_window, h, w)
    stride = cfg.occlusion_stride or win
    windows = occlusion_windows(h, w, win, stride)
    batch = x[None].repeat(len(windows), 1, 1, 1)
    for k, (t, l) in enumerate(windows):
        batch[k, :, t : t + win, l : l + win] = cfg.occlusion_fill
    full = _scores(model, x[None], target, cfg.batch_size)[0]
    drops = full - _scores(model, batch, target, cfg.batch_size)
    total = torch.zeros((h, w), dtype=x.dtype)
    count = torch.zeros((h, w), dtype=x.dtype)
    for k, (t, l) in enumerate(windows):
        total[t : t + win, l : l + win] += drops[k]
        count[t : t + win, l : l + win] += 1
    return torch.where(count > 0, total / count.clamp(min=1), torch.zeros_like(total))


def _masked_batch(x, features, on):
    """Images keeping the features flagged in ``on`` (N x F) and zeroing the rest."""
    keep = torch.from_numpy(on[:, features]).to(x.dtype)  # N x H x W
    return x[None] * keep[:, None]


def _lime(model, x, target, cfg):
    rng = np.random.default_rng(cfg.seed)
    features = grid_features(x.shape[1], x.shape[2], cfg.grid)
    n_feat = cfg.grid * cfg.grid
    z = (rng.random((cfg.lime_samples, n_feat)) < 0.5).astype(np.float64)
    z[0] = 1.0
    y = _scores(model, _masked_batch(x, features, z), target, cfg.batch_size).double().numpy()
    active = z.sum(1)
    cos_dist = 1.0 - np.sqrt(active / n_feat)
    weights = np.exp(-(cos_dist**2) / cfg.lime_kernel_width**2)
    design = np.hstack([z, np.ones((len(z), 1))])
    penalty = cfg.lime_ridge_alpha * np.eye(n_feat + 1)
    penalty[-1, -1] = 0.0  # intercept is not shrunk
    gram = design.T @ (design * weights[:, None]) + penalty
    coef = np.linalg.solve(gram, design.T @ (weights * y))[:n_feat]
    return torch.from_numpy(coef[features]).to(x.dtype)


def _shapley_sampling(model, x, target, cfg):
    rng = np.random.default_rng(cfg.seed)
    features = grid_features(x.shape[1], x.shape[2], cfg.grid)
    n_feat = cfg.grid * cfg.grid
    totals = np.zeros(n_feat)
    for _ in range(cfg.shapley_permutations):
        perm = rng.permutation(n_feat)
        on = np.zeros((n_feat + 1, n_feat))
        for k in range(n_feat):
            on[k + 1] = on[k]
            on[k + 1, perm[k]] = 1.0
        y = _scores(model, _masked_batch(x, features, on), target, cfg.batch_size).double().numpy()
        totals[perm] += np.diff(y)
    return torch.from_numpy((totals / cfg.shapley_permutations)[features]).to(x.dtype)


_IMPLEMENTATIONS = {
    "Saliency": _saliency,
    "NoiseTunnel": _noise_tunnel,
    "IntegratedGradients": _integrated_gradients,
    "GradientShap": _gradient_shap,
    "GuidedBackprop": _guided_backprop,
    "GradCAM": _gradcam,
    "GuidedGradCAM": _guided_gradcam,
    "Lime": _lime,
    "Occlusion": _occlusion,
    "ShapleyValueSampling": _shapley_sampling,
}


def attribute(model: nn.Module, image, target: int, method: str, cfg: ExplainConfig = ExplainConfig()) -> np.ndarray:
    """Raw (unnormalized) attribution, 3 x H x W."""
    x = _as_tensor(image)
    if method == IMAGE:
        return x.numpy().copy()
    if method not in _IMPLEMENTATIONS:
        raise ExplainerError(f"unknown method {method!r}")
    model.eval()
    _check_target(model, x, target)
    raw = _IMPLEMENTATIONS[method](model, x, target, cfg).detach()
    if raw.ndim == 2:
        raw = raw[None].expand(3, -1, -1)
    return raw.numpy().copy()


def explain(model: nn.Module, image, target: int, method: str, cfg: ExplainConfig = ExplainConfig()) -> AttributionMap:
    if method not in VALUE_RANGE:
        raise ExplainerError(f"unknown method {method!r}")
    return normalize_attribution(attribute(model, image, target, method, cfg), VALUE_RANGE[method], method)


def preset_methods(preset: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(preset, str):
        if preset in PRESETS:
            return PRESETS[preset]
        methods = tuple(m for m in preset.split("+") if m)
    else:
        methods = tuple(preset)
    if not methods:
        raise ExplainerError("empty method list")
    for m in methods:
        if m not in VALUE_RANGE:
            raise ExplainerError(f"unknown method {m!r} in preset {preset!r}")
    return methods


def preset_name(preset: str | Sequence[str]) -> str:
    if isinstance(preset, str) and preset in PRESETS:
        return preset
    return "+".join(preset_methods(preset))


def build_explanation_set(
    model: nn.Module,
    image_id: str,
    image,
    target: int,
    preset: str | Sequence[str],
    cfg: ExplainConfig = ExplainConfig(),
) -> ExplanationSet:
    """Explain one preprocessed image with every method of ``preset``.

    Sampling methods get a seed derived from ``cfg.seed`` and the image id,
    so each image draws its own noise yet stays reproducible.
    """
    methods = preset_methods(preset)
    local = replace(cfg, seed=derive_seed(cfg.seed, image_id))
    maps = tuple(explain(model, image, target, m, local) for m in methods)
    return ExplanationSet(image_id=image_id, maps=maps, preset=preset_name(preset))
