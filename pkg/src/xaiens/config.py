"""Run configuration: a TOML file of typed sections plus per-stage digests.

Every stage digest hashes its own section together with the digest of the
stage it consumes, so a change anywhere upstream invalidates everything
downstream and nothing else.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import tomli

from .classifier import ClassifierTrainConfig
from .data import AugmentConfig
from .ensembler import EnsemblerConfig
from .explainers import ExplainConfig, preset_methods, preset_name
from .quality import EvalConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSpec:
    source: str = "synthetic"  # "synthetic" or a dataset directory
    n: int = 200
    side: int = 64
    classes: tuple[str, ...] = ("circle", "square")
    split_ratio: float = 0.8


@dataclass(frozen=True)
class ClassifierSpec:
    source: str = "toy"  # "toy" or a checkpoint path
    train: ClassifierTrainConfig = ClassifierTrainConfig()


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "run"
    preset: str = "local3"
    baseline: bool = True  # also train the image-only ensembler that exh divides by
    ablate_split: str = "test"
    data: DataSpec = DataSpec()
    classifier: ClassifierSpec = ClassifierSpec()
    augment: AugmentConfig = AugmentConfig()
    explain: ExplainConfig = ExplainConfig()
    ensembler: EnsemblerConfig = field(default_factory=lambda: EnsemblerConfig(blocks=(1, 1, 1, 1)))
    train: TrainConfig = TrainConfig(max_epochs=60)
    eval: EvalConfig = EvalConfig()

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def p(self) -> int:
        return len(preset_methods(self.preset))

    # ---------------------------------------------------------------- digests

    def digest(self, stage: str) -> str:
        parts = {
            "data": lambda: {"seed": self.seed, "data": self.data},
            "classifier": lambda: {
                "up": self.digest("data"),
                "classifier": self.classifier,
                "mean": self.augment.mean,
                "std": self.augment.std,
            },
            "explain": lambda: {"up": self.digest("classifier"), "explain": self.explain, "preset": self.preset},
            "ensembler": lambda: {
                "up": self.digest("explain"),
                "ensembler": self.ensembler,
                "train": self.train,
                "augment": self.augment,
                "baseline": self.baseline,
            },
            "eval": lambda: {"up": self.digest("ensembler"), "eval": self.eval},
            "ablate": lambda: {"up": self.digest("ensembler"), "split": self.ablate_split},
            "report": lambda: {"eval": self.digest("eval"), "ablate": self.digest("ablate")},
        }
        if stage not in parts:
            raise ConfigError(f"unknown stage {stage!r}")
        return content_digest(parts[stage]())

    def to_dict(self) -> dict:
        return _plain(self)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def content_digest(obj) -> str:
    payload = json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _build(cls, values: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


_SECTIONS = {
    "data": DataSpec,
    "augment": AugmentConfig,
    "explain": ExplainConfig,
    "ensembler": EnsemblerConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    run = dict(raw.pop("run", {}))
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            base = _plain(getattr(RunConfig(), name))
            base.update(raw.pop(name))
            kwargs[name] = _build(cls, base, name)
    if "classifier" in raw:
        section = dict(raw.pop("classifier"))
        source = section.pop("source", "toy")
        kwargs["classifier"] = ClassifierSpec(source, _build(ClassifierTrainConfig, section, "classifier"))
    if raw:
        raise ConfigError(f"unknown sections: {', '.join(sorted(raw))}")
    cfg = _build(RunConfig, {**run, **kwargs}, "run")
    return resolve(cfg)


def load_config(path=None, **overrides) -> RunConfig:
    """Read ``path`` (defaults when None) and apply command-line overrides."""
    raw = {}
    if path is not None:
        try:
            raw = tomli.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    cfg = from_dict(raw)
    return apply_overrides(cfg, **overrides)


def apply_overrides(cfg: RunConfig, seed=None, out=None, preset=None, fusion=None, cutoff=None) -> RunConfig:
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    if out is not None:
        cfg = replace(cfg, out=str(out))
    if preset is not None:
        cfg = replace(cfg, preset=preset)
    ens = {}
    if fusion is not None:
        ens["fusion"] = fusion
    if cutoff is not None:
        ens["cutoff"] = float(cutoff)
    if ens:
        try:
            cfg = replace(cfg, ensembler=replace(cfg.ensembler, **ens))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return resolve(cfg)


def resolve(cfg: RunConfig) -> RunConfig:
    """Thread the run seed, preset width and image side into nested configs."""
    try:
        preset = preset_name(cfg.preset)
        p = len(preset_methods(cfg.preset))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        return replace(
            cfg,
            preset=preset,
            classifier=replace(cfg.classifier, train=replace(cfg.classifier.train, seed=cfg.seed)),
            explain=replace(cfg.explain, seed=cfg.seed),
            ensembler=replace(cfg.ensembler, p=p, input_side=cfg.data.side),
            train=replace(cfg.train, seed=cfg.seed),
            eval=replace(cfg.eval, seed=cfg.seed),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dump_toml(cfg: RunConfig) -> str:
    """Serialise ``cfg`` back to TOML (only the subset of types used here)."""

    def value(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(value(x) for x in v) + "]"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    plain = cfg.to_dict()
    lines = ["[run]"]
    for key in ("seed", "out", "preset", "baseline", "ablate_split"):
        lines.append(f"{key} = {value(plain[key])}")
    classifier = {"source": plain["classifier"]["source"], **plain["classifier"]["train"]}
    for name, section in [("data", plain["data"]), ("classifier", classifier)] + [
        (n, plain[n]) for n in ("augment", "explain", "ensembler", "train", "eval")
    ]:
        lines.append(f"\n[{name}]")
        for key, v in section.items():
            if v is not None:
                lines.append(f"{key} = {value(v)}")
    return "\n".join(lines) + "\n"
