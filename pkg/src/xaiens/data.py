"""Dataset ingestion, synthetic shapes, splitting and augmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy import ndimage

SHAPE_KINDS = ("circle", "square", "triangle")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ImageSample:
    id: str
    image: np.ndarray  # H x W x 3, float32
    mask: np.ndarray  # H x W, uint8 in {0, 1}
    label: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise DatasetError(
                f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ"
            )
        if self.split not in ("train", "test", "valid"):
            raise DatasetError(f"{self.id}: unknown split {self.split!r}")

    @property
    def side(self) -> int:
        return self.mask.shape[0]


@dataclass(frozen=True)
class Dataset:
    samples: tuple[ImageSample, ...]
    class_name: str = ""
    seed: int = 0
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetError("sample ids must be unique")
        for s in self.samples:
            s.image.flags.writeable = False
            s.mask.flags.writeable = False

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def split(self, name: str) -> list[ImageSample]:
        return [s for s in self.samples if s.split == name]

    def get(self, sample_id: str) -> ImageSample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: Mapping[str, int]

    def members(self, fold: int) -> list[str]:
        return [i for i, f in self.fold_of.items() if f == fold]


# --------------------------------------------------------------------------- io


def _read_image(path: Path, side: int | None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if side is not None and im.size != (side, side):
                im = im.resize((side, side), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def _read_mask(path: Path, side: int | None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if side is not None and im.size != (side, side):
                im = im.resize((side, side), Image.NEAREST)
            return (np.asarray(im) > 0).astype(np.uint8)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read mask {path}: {exc}") from exc


def _stems(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise DatasetError(f"missing directory {folder}")
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_EXTENSIONS}


def read_manifest(root: Path) -> dict[str, tuple[int, int]]:
    """Parse ``<root>/manifest`` into ``stem -> (label, seed)``."""
    path = Path(root) / "manifest"
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        stem, label, seed = line.split()
        out[stem] = (int(label), int(seed))
    return out


def _read_class_names(root: Path) -> tuple[str, ...]:
    for line in (Path(root) / "manifest").read_text().splitlines():
        if line.startswith("# classes:"):
            return tuple(line.split(":", 1)[1].split())
    return ()


def load_dataset(
    root_path: str | Path,
    split_ratio: float = 0.8,
    seed: int = 0,
    side: int | None = 224,
) -> Dataset:
    """Load ``images/`` and ``masks/`` pairs, resize and split them.

    Labels come from the optional ``manifest`` file (default 0). The split is
    stratified per label and deterministic in ``seed``.
    """
    root = Path(root_path)
    images = _stems(root / "images")
    masks = _stems(root / "masks")
    for stem in images:
        if stem not in masks:
            raise DatasetError(f"missing mask for image {stem!r}")
    for stem in masks:
        if stem not in images:
            raise DatasetError(f"missing image for mask {stem!r}")
    if not images:
        raise DatasetError(f"no images under {root}")

    manifest = read_manifest(root)
    class_names = _read_class_names(root) if manifest else ()
    samples = []
    for stem in sorted(images):
        label = manifest.get(stem, (0, 0))[0]
        samples.append(
            ImageSample(
                id=stem,
                image=_read_image(images[stem], side),
                mask=_read_mask(masks[stem], side),
                label=label,
            )
        )
    name = "+".join(class_names) if class_names else root.name
    dataset = Dataset(tuple(samples), class_name=name, seed=seed, class_names=class_names)
    return split_dataset(dataset, split_ratio, seed)


def split_dataset(dataset: Dataset, split_ratio: float, seed: int) -> Dataset:
    if not 0.0 < split_ratio < 1.0:
        raise DatasetError(f"split_ratio must lie in (0, 1), got {split_ratio}")
    rng = np.random.default_rng(seed)
    split_of = {}
    for label in sorted({s.label for s in dataset.samples}):
        ids = [s.id for s in dataset.samples if s.label == label]
        order = rng.permutation(len(ids))
        n_train = int(round(split_ratio * len(ids)))
        if len(ids) >= 2:
            n_train = min(max(n_train, 1), len(ids) - 1)
        for rank, idx in enumerate(order):
            split_of[ids[idx]] = "train" if rank < n_train else "test"
    if not {"train", "test"} <= set(split_of.values()):
        raise DatasetError("split leaves the train or test split empty")
    samples = tuple(replace(s, split=split_of[s.id]) for s in dataset.samples)
    return replace(dataset, samples=samples, seed=seed)


def write_dataset(dataset: Dataset, root: str | Path, seeds: Mapping[str, int] | None = None) -> Path:
    """Write the ``images/ masks/ manifest`` layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    seeds = seeds or {}
    lines = []
    if dataset.class_names:
        lines.append("# classes: " + " ".join(dataset.class_names))
    for s in dataset.samples:
        img = np.clip(np.rint(np.asarray(s.image) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img, "RGB").save(root / "images" / f"{s.id}.png")
        Image.fromarray((np.asarray(s.mask) * 255).astype(np.uint8), "L").save(
            root / "masks" / f"{s.id}.png"
        )
        lines.append(f"{s.id} {s.label} {seeds.get(s.id, dataset.seed)}")
    (root / "manifest").write_text("\n".join(lines) + "\n")
    return root


# -------------------------------------------------------------------- synthetic


def _background(rng: np.random.Generator, side: int) -> np.ndarray:
    coarse = rng.random((4, 4, 3))
    smooth = ndimage.zoom(coarse, (side / 4, side / 4, 1), order=1, mode="nearest")[:side, :side]
    noise = rng.normal(0.0, 0.03, (side, side, 3))
    return 0.15 + 0.7 * smooth + noise


def _shape_mask(kind: str, rng: np.random.Generator, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    lo, hi = max(4, side // 5), side // 2
    if kind == "square":
        w, h = rng.integers(lo, hi + 1, size=2)
        top = rng.integers(0, side - h + 1)
        left = rng.integers(0, side - w + 1)
        mask = np.zeros((side, side), dtype=np.uint8)
        mask[top : top + h, left : left + w] = 1
        return mask
    if kind == "circle":
        r = rng.uniform(lo / 2, hi / 2)
        cy, cx = rng.uniform(r, side - r, size=2)
        return (((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2) <= r * r).astype(np.uint8)
    if kind == "triangle":
        size = rng.uniform(lo, hi)
        cy, cx = rng.uniform(size / 2, side - size / 2, size=2)
        angle = rng.uniform(0, 2 * np.pi)
        pts = [
            (cy + size / 2 * np.sin(angle + k * 2 * np.pi / 3), cx + size / 2 * np.cos(angle + k * 2 * np.pi / 3))
            for k in range(3)
        ]
        py, px = yy + 0.5, xx + 0.5
        signs = []
        for (y0, x0), (y1, x1) in zip(pts, pts[1:] + pts[:1]):
            signs.append((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0))
        inside = np.all(np.stack(signs) >= 0, axis=0) | np.all(np.stack(signs) <= 0, axis=0)
        return inside.astype(np.uint8)
    raise DatasetError(f"unknown shape kind {kind!r}")


def render_shape_sample(kind: str, side: int, sample_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render one textured image with a single filled shape and its mask."""
    rng = np.random.default_rng(sample_seed)
    image = _background(rng, side)
    mask = _shape_mask(kind, rng, side)
    color = rng.random(3)
    # keep the object visibly distinct from the local background
    bg_mean = image[mask.astype(bool)].mean(axis=0)
    color = np.where(np.abs(color - bg_mean) < 0.3, 1.0 - bg_mean, color)
    fill = color + rng.normal(0.0, 0.05, (side, side, 3))
    image = np.where(mask[..., None].astype(bool), fill, image)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def generate_synthetic_shapes(
    n: int,
    side: int = 64,
    classes: Sequence[str] = ("circle", "square"),
    seed: int = 0,
    split_ratio: float = 0.8,
) -> tuple[Dataset, dict[str, int]]:
    """Generate ``n`` shape images balanced over ``classes``.

    Returns the split dataset and the per-sample seeds (one sample can be
    re-rendered from its kind and seed alone).
    """
    if n < 2:
        raise DatasetError(f"need at least 2 samples, got {n}")
    if side < 32:
        raise DatasetError(f"side must be >= 32, got {side}")
    classes = tuple(classes)
    if not classes:
        raise DatasetError("classes must not be empty")
    for kind in classes:
        if kind not in SHAPE_KINDS:
            raise DatasetError(f"unknown shape kind {kind!r}")
    children = np.random.SeedSequence(seed).spawn(n)
    samples, seeds = [], {}
    width = len(str(n - 1))
    for i, child in enumerate(children):
        label = i % len(classes)
        sample_seed = int(child.generate_state(1)[0])
        image, mask = render_shape_sample(classes[label], side, sample_seed)
        sid = f"{classes[label]}_{i:0{width}d}"
        samples.append(ImageSample(id=sid, image=image, mask=mask, label=label))
        seeds[sid] = sample_seed
    dataset = Dataset(tuple(samples), class_name="+".join(classes), seed=seed, class_names=classes)
    if len(dataset) >= 2 * len(classes):
        dataset = split_dataset(dataset, split_ratio, seed)
    return dataset, seeds


# ------------------------------------------------------------------------ folds


def kfold_split(dataset: Dataset, k: int, seed: int) -> FoldAssignment:
    if k < 2:
        raise DatasetError(f"k must be >= 2, got {k}")
    if k > len(dataset):
        raise DatasetError(f"k={k} exceeds dataset size {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    ids = dataset.ids
    return FoldAssignment(k=k, fold_of={ids[idx]: pos % k for pos, idx in enumerate(order)})


def apply_fold(dataset: Dataset, folds: FoldAssignment, fold: int) -> Dataset:
    """Mark ``fold`` as the test split and every other fold as train."""
    if not 0 <= fold < folds.k:
        raise DatasetError(f"fold {fold} out of range for k={folds.k}")
    samples = tuple(
        replace(s, split="test" if folds.fold_of[s.id] == fold else "train") for s in dataset.samples
    )
    return replace(dataset, samples=samples)


# ----------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    prob: float = 0.5
    crop_fraction: float = 0.875
    max_shift: float = 0.10
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_rotation: float = 15.0
    max_hue: float = 0.05
    saturation_range: tuple[float, float] = (0.8, 1.2)


IMAGENET_NORMALIZATION = dict(mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))


@dataclass(frozen=True)
class AugmentParams:
    """One concrete augmentation draw. The defaults are the identity."""

    crop: bool = False
    hue: float = 0.0
    saturation: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)  # pixels (dy, dx)
    scale: float = 1.0
    rotation: float = 0.0  # degrees
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0

    @property
    def has_affine(self) -> bool:
        return self.shift != (0.0, 0.0) or self.scale != 1.0 or self.rotation != 0.0


def draw_augment_params(rng: np.random.Generator, side: int, cfg: AugmentConfig = AugmentConfig()) -> AugmentParams:
    p = cfg.prob
    kw = {}
    kw["crop"] = bool(rng.random() < p)
    if rng.random() < p:
        kw["hue"] = float(rng.uniform(-cfg.max_hue, cfg.max_hue))
        kw["saturation"] = float(rng.uniform(*cfg.saturation_range))
    if rng.random() < p:
        kw["shift"] = tuple(float(v) for v in rng.uniform(-cfg.max_shift, cfg.max_shift, 2) * side)
        kw["scale"] = float(rng.uniform(*cfg.scale_range))
        kw["rotation"] = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    kw["hflip"] = bool(rng.random() < p)
    kw["vflip"] = bool(rng.random() < p)
    if rng.random() < p:
        kw["rot90"] = int(rng.integers(1, 4))
    return AugmentParams(**kw)


def draw_dihedral_params(rng: np.random.Generator) -> AugmentParams:
    """Flips and quarter turns only: label-preserving for every shape kind."""
    return AugmentParams(
        hflip=bool(rng.random() < 0.5), vflip=bool(rng.random() < 0.5), rot90=int(rng.integers(0, 4))
    )


def _center_crop(arr: np.ndarray, fraction: float, order: int) -> np.ndarray:
    side = arr.shape[0]
    c = int(round(side * fraction))
    off = (side - c) // 2
    cropped = arr[off : off + c, off : off + c]
    zoom = (side / c, side / c) + (1,) * (arr.ndim - 2)
    out = ndimage.zoom(cropped, zoom, order=order, mode="nearest", grid_mode=True)
    return out[:side, :side]


def _affine(arr: np.ndarray, params: AugmentParams, order: int) -> np.ndarray:
    side_y, side_x = arr.shape[:2]
    center = np.array([(side_y - 1) / 2.0, (side_x - 1) / 2.0])
    theta = np.deg2rad(params.rotation)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    # output -> input coordinate map
    inv = rot.T / params.scale
    offset = center - inv @ (center + np.asarray(params.shift))
    cval = 0.0
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, inv, offset=offset, order=order, mode="constant", cval=cval)
    return np.stack(
        [
            ndimage.affine_transform(arr[..., c], inv, offset=offset, order=order, mode="nearest")
            for c in range(arr.shape[-1])
        ],
        axis=-1,
    )


def apply_geometric(arr: np.ndarray, params: AugmentParams, cfg: AugmentConfig = AugmentConfig(), is_mask: bool = False) -> np.ndarray:
    """Apply the geometric part of ``params`` to an H x W (x C) array.

    Masks use nearest-neighbour interpolation and are re-binarized.
    """
    order = 0 if is_mask else 1
    out = np.asarray(arr, dtype=np.float32)
    if params.crop:
        out = _center_crop(out, cfg.crop_fraction, order)
    if params.has_affine:
        out = _affine(out, params, order)
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1]
    if params.rot90:
        out = np.rot90(out, params.rot90, axes=(0, 1))
    out = np.ascontiguousarray(out)
    if is_mask:
        return (out > 0.5).astype(np.uint8)
    return out


def jitter_color(image: np.ndarray, hue: float, saturation: float) -> np.ndarray:
    if hue == 0.0 and saturation == 1.0:
        return image
    hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * saturation, 0.0, 1.0)
    return hsv_to_rgb(hsv).astype(np.float32)


def normalize_image(image: np.ndarray, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    mean = np.asarray(cfg.mean, dtype=np.float32)
    std = np.asarray(cfg.std, dtype=np.float32)
    return ((np.asarray(image, dtype=np.float32) - mean) / std).astype(np.float32)


def augment(
    sample: ImageSample,
    seed: int,
    cfg: AugmentConfig = AugmentConfig(),
    params: AugmentParams | None = None,
) -> ImageSample:
    """Randomly augment ``sample``; the returned image is channel-normalized.

    Photometric jitter touches the image only; every geometric transform is
    applied identically to image and mask.
    """
    if params is None:
        params = draw_augment_params(np.random.default_rng(seed), sample.side, cfg)
    image = jitter_color(np.asarray(sample.image, dtype=np.float32), params.hue, params.saturation)
    image = apply_geometric(image, params, cfg)
    mask = apply_geometric(sample.mask, params, cfg, is_mask=True)
    return replace(sample, image=normalize_image(image, cfg), mask=mask)


def augment_maps(
    maps: np.ndarray, mask: np.ndarray, seed: int, cfg: AugmentConfig = AugmentConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Geometric augmentation of a C x H x W attribution stack and its mask."""
    params = draw_augment_params(np.random.default_rng(seed), mask.shape[0], cfg)
    params = replace(params, hue=0.0, saturation=1.0)
    stacked = apply_geometric(np.moveaxis(maps, 0, -1), params, cfg)
    return np.moveaxis(stacked, -1, 0), apply_geometric(mask, params, cfg, is_mask=True)


def to_chw(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(np.asarray(image, dtype=np.float32), -1, 0))


def model_input(sample: ImageSample, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """The 3 x H x W normalized tensor a classifier sees for ``sample``."""
    return to_chw(normalize_image(sample.image, cfg))


__all__ = [
    "AugmentConfig",
    "AugmentParams",
    "Dataset",
    "DatasetError",
    "FoldAssignment",
    "ImageSample",
    "apply_fold",
    "apply_geometric",
    "augment",
    "augment_maps",
    "draw_augment_params",
    "generate_synthetic_shapes",
    "kfold_split",
    "load_dataset",
    "model_input",
    "normalize_image",
    "split_dataset",
    "write_dataset",
]
