"""The XAI Ensembler: a CE-Net style encoder-decoder over explanation sets.

Three fusion modes decide how the ``p`` input explanations meet:

* ``concat``  one encoder per explanation; per-stage features are
  concatenated and projected back to the stage width with a 1x1 conv.
* ``sum``     one encoder per explanation; per-stage features are added.
* ``channel`` a single encoder whose first conv takes all ``3p`` channels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .explainers import UNSIGNED, AttributionMap, ExplanationSet

FUSIONS = ("concat", "sum", "channel")
BASE_WIDTHS = (64, 128, 256, 512)
# published full-scale figure, kept for comparison only
REFERENCE_PARAMETER_COUNT = 17_675_256


class EnsemblerError(ValueError):
    pass


@dataclass(frozen=True)
class EnsemblerConfig:
    fusion: str = "concat"
    p: int = 3
    width_scale: float = 0.25
    encoder_stages: int = 4
    cutoff: float = 0.5
    input_side: int = 64
    blocks: tuple[int, ...] = (3, 4, 6, 3)

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise EnsemblerError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.p < 1:
            raise EnsemblerError(f"p must be >= 1, got {self.p}")
        if not 0.0 < self.cutoff < 1.0:
            raise EnsemblerError(f"cutoff must lie in (0, 1), got {self.cutoff}")
        if self.encoder_stages != 4 or len(self.blocks) != 4:
            raise EnsemblerError("the encoder has exactly 4 residual stages")
        if self.input_side % 32:
            raise EnsemblerError(f"input_side must be a multiple of 32, got {self.input_side}")
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(max(2, int(round(w * self.width_scale))) for w in BASE_WIDTHS)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------- blocks


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Encoder(nn.Module):
    """Conv-BN-ReLU-MaxPool stem followed by four residual stages."""

    def __init__(self, in_channels: int, widths, blocks):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 7, 2, 3, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        stages = []
        cin = widths[0]
        for i, (w, n) in enumerate(zip(widths, blocks)):
            layers = [BasicBlock(cin, w, 1 if i == 0 else 2)]
            layers += [BasicBlock(w, w) for _ in range(n - 1)]
            stages.append(nn.Sequential(*layers))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class DACBlock(nn.Module):
    """Dense atrous convolution: cascaded dilated branches summed with the input."""

    def __init__(self, channels: int):
        super().__init__()
        self.dilate1 = nn.Conv2d(channels, channels, 3, dilation=1, padding=1)
        self.dilate3 = nn.Conv2d(channels, channels, 3, dilation=3, padding=3)
        self.dilate5 = nn.Conv2d(channels, channels, 3, dilation=5, padding=5)
        self.conv1x1 = nn.Conv2d(channels, channels, 1)
        for conv in (self.dilate1, self.dilate3, self.dilate5, self.conv1x1):
            nn.init.zeros_(conv.bias)

    def forward(self, x):
        b1 = F.relu(self.dilate1(x))
        b2 = F.relu(self.conv1x1(self.dilate3(x)))
        b3 = F.relu(self.conv1x1(self.dilate3(self.dilate1(x))))
        b4 = F.relu(self.conv1x1(self.dilate5(self.dilate3(self.dilate1(x)))))
        return x + b1 + b2 + b3 + b4


class RMPBlock(nn.Module):
    """Residual multi-kernel pooling; adds one channel per pooling kernel."""

    kernels = (2, 3, 5, 6)

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 1)

    def forward(self, x):
        h, w = x.shape[2:]
        layers = []
        for k in self.kernels:
            # kernels larger than the bottleneck collapse to a global pool
            k = min(k, h, w)
            pooled = F.max_pool2d(x, kernel_size=k, stride=k)
            layers.append(F.interpolate(self.conv(pooled), size=(h, w), mode="bilinear", align_corners=False))
        return torch.cat(layers + [x], 1)


class DecoderBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        mid = max(1, cin // 4)
        self.conv1 = nn.Conv2d(cin, mid, 1)
        self.norm1 = nn.BatchNorm2d(mid)
        self.deconv2 = nn.ConvTranspose2d(mid, mid, 3, stride=2, padding=1, output_padding=1)
        self.norm2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, cout, 1)
        self.norm3 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        x = self.relu(self.norm1(self.conv1(x)))
        x = self.relu(self.norm2(self.deconv2(x)))
        return self.relu(self.norm3(self.conv3(x)))


class XAIEnsembler(nn.Module):
    def __init__(self, cfg: EnsemblerConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        n_encoders = 1 if cfg.fusion == "channel" else cfg.p
        in_channels = 3 * cfg.p if cfg.fusion == "channel" else 3
        self.encoders = nn.ModuleList(Encoder(in_channels, w, cfg.blocks) for _ in range(n_encoders))
        self.fuse = None
        if cfg.fusion == "concat":
            self.fuse = nn.ModuleList(nn.Conv2d(cfg.p * c, c, 1) for c in w)
        self.dac = DACBlock(w[3])
        self.rmp = RMPBlock(w[3])
        self.decoders = nn.ModuleList(
            [
                DecoderBlock(w[3] + len(RMPBlock.kernels), w[2]),
                DecoderBlock(w[2], w[1]),
                DecoderBlock(w[1], w[0]),
                DecoderBlock(w[0], w[0]),
            ]
        )
        half = max(1, w[0] // 2)
        self.head = nn.Sequential(
            nn.ConvTranspose2d(w[0], half, 4, 2, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(half, 1, 3, padding=1),
        )

    def encode(self, x):
        if x.shape[1] != 3 * self.cfg.p:
            raise EnsemblerError(f"expected {3 * self.cfg.p} input channels, got {x.shape[1]}")
        if self.cfg.fusion == "channel":
            return self.encoders[0](x)
        per_input = [enc(chunk) for enc, chunk in zip(self.encoders, torch.split(x, 3, dim=1))]
        stages = list(zip(*per_input))
        if self.cfg.fusion == "sum":
            return [torch.stack(feats).sum(0) for feats in stages]
        return [proj(torch.cat(feats, 1)) for proj, feats in zip(self.fuse, stages)]

    def forward(self, x):
        e1, e2, e3, e4 = self.encode(x)
        center = self.rmp(self.dac(e4))
        d4 = self.decoders[0](center) + e3
        d3 = self.decoders[1](d4) + e2
        d2 = self.decoders[2](d3) + e1
        d1 = self.decoders[3](d2)
        return torch.sigmoid(self.head(d1))


# ------------------------------------------------------------------ operations


def build_ensembler(cfg: EnsemblerConfig, seed: int = 0) -> XAIEnsembler:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return XAIEnsembler(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameter_breakdown(model: XAIEnsembler) -> dict[str, int]:
    parts = {
        "encoders": model.encoders,
        "fusion": model.fuse,
        "bottleneck": nn.ModuleList([model.dac, model.rmp]),
        "decoder": nn.ModuleList([model.decoders, model.head]),
    }
    out = {name: (count_parameters(mod) if mod is not None else 0) for name, mod in parts.items()}
    out["first_layer"] = sum(p.numel() for p in model.encoders[0].stem[0].parameters())
    out["total"] = count_parameters(model)
    return out


@dataclass(frozen=True)
class EnsembledExplanation:
    values: np.ndarray  # H x W in [0, 1]
    binary: np.ndarray  # H x W in {0, 1}

    def as_attribution(self) -> AttributionMap:
        """The ensemble as a 3-channel map, scored like any other method."""
        vals = np.broadcast_to(self.values, (3,) + self.values.shape).astype(np.float32)
        return AttributionMap("Ensemble", np.ascontiguousarray(vals), UNSIGNED)


def binarize(values, cutoff: float = 0.5) -> np.ndarray:
    """1 where ``values > cutoff`` (strictly), else 0."""
    if not 0.0 < cutoff < 1.0:
        raise EnsemblerError(f"cutoff must lie in (0, 1), got {cutoff}")
    return (np.asarray(values) > cutoff).astype(np.uint8)


def check_set(model: XAIEnsembler, exp_set: ExplanationSet) -> None:
    cfg = model.cfg
    if exp_set.p != cfg.p:
        raise EnsemblerError(f"{exp_set.image_id}: model expects p={cfg.p}, set has p={exp_set.p}")
    side = exp_set.maps[0].shape[1:]
    if side != (cfg.input_side, cfg.input_side):
        raise EnsemblerError(f"{exp_set.image_id}: maps are {side}, model expects side {cfg.input_side}")


@torch.no_grad()
def predict_values(model: XAIEnsembler, stacks: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Evaluation-mode forward of ``N x 3p x H x W`` stacks -> ``N x H x W``."""
    model.eval()
    out = []
    for i in range(0, len(stacks), batch_size):
        xb = torch.from_numpy(np.ascontiguousarray(stacks[i : i + batch_size], dtype=np.float32))
        out.append(model(xb)[:, 0].numpy())
    return np.concatenate(out) if out else np.zeros((0,) + stacks.shape[2:], dtype=np.float32)


def forward(model: XAIEnsembler, exp_set: ExplanationSet) -> EnsembledExplanation:
    check_set(model, exp_set)
    values = predict_values(model, exp_set.stack()[None])[0]
    return EnsembledExplanation(values=values, binary=binarize(values, model.cfg.cutoff))


def disable_input(exp_set: ExplanationSet, j: int) -> ExplanationSet:
    """Copy of ``exp_set`` with map ``j`` zeroed; other maps are shared untouched."""
    if not 0 <= j < exp_set.p:
        raise EnsemblerError(f"method index {j} out of range for p={exp_set.p}")
    old = exp_set.maps[j]
    zero = AttributionMap(old.method, np.zeros_like(old.values), old.value_range)
    maps = exp_set.maps[:j] + (zero,) + exp_set.maps[j + 1 :]
    return replace(exp_set, maps=maps)


# ----------------------------------------------------------------- checkpoints


def save_ensembler(model: XAIEnsembler, path, train_state: dict | None = None, digest: str = "") -> None:
    state = model.state_dict()
    keys = list(state)
    torch.save(
        {
            "config": asdict(model.cfg),
            "keys": keys,
            "shapes": [tuple(state[k].shape) for k in keys],
            "blob": torch.cat([state[k].detach().reshape(-1).double() for k in keys]),
            "train_state": train_state or {},
            "config_digest": digest,
        },
        path,
    )


def load_ensembler(path) -> tuple[XAIEnsembler, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    cfg = EnsemblerConfig(**ckpt["config"])
    model = XAIEnsembler(cfg)
    reference = model.state_dict()
    state, offset = {}, 0
    for key, shape in zip(ckpt["keys"], ckpt["shapes"]):
        n = int(np.prod(shape)) if shape else 1
        state[key] = ckpt["blob"][offset : offset + n].reshape(shape).to(reference[key].dtype)
        offset += n
    model.load_state_dict(state)
    return model.eval(), ckpt
