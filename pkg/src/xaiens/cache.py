"""On-disk explanation cache.

Layout: ``<cache>/<model-digest>/<preset>/<image-id>.<method>.arr``. Each file
is one JSON header line followed by the ``np.save`` payload; the header is
what decides whether an entry is stale.
"""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .explainers import AttributionMap, ExplainConfig, ExplanationSet, preset_methods, preset_name

SUFFIX = ".arr"


class CacheError(RuntimeError):
    pass


class StaleCacheError(CacheError):
    pass


class CacheMissError(CacheError, FileNotFoundError):
    pass


def entry_path(store, model_digest: str, preset: str, image_id: str, method: str) -> Path:
    return Path(store) / model_digest / preset / f"{image_id}.{method}{SUFFIX}"


def write_map(path, amap: AttributionMap, config_digest: str, model_digest: str) -> Path:
    header = {
        "method": amap.method,
        "shape": list(amap.values.shape),
        "dtype": str(amap.values.dtype),
        "value_range": amap.value_range,
        "config_digest": config_digest,
        "model_digest": model_digest,
    }
    buf = io.BytesIO()
    buf.write((json.dumps(header, sort_keys=True) + "\n").encode())
    np.save(buf, amap.values, allow_pickle=False)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def read_map(path) -> tuple[dict, AttributionMap]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CacheError(f"{path}: missing header line")
    header = json.loads(raw[:newline])
    values = np.load(io.BytesIO(raw[newline + 1 :]), allow_pickle=False)
    if list(values.shape) != header["shape"]:
        raise CacheError(f"{path}: payload shape {values.shape} disagrees with header {header['shape']}")
    return header, AttributionMap(header["method"], values, header["value_range"])


def cache_explanations(
    exp_set: ExplanationSet, store, model_digest: str, cfg: ExplainConfig = ExplainConfig()
) -> list[Path]:
    return [
        write_map(
            entry_path(store, model_digest, exp_set.preset, exp_set.image_id, amap.method),
            amap,
            cfg.digest(amap.method),
            model_digest,
        )
        for amap in exp_set.maps
    ]


def load_explanations(
    store,
    image_id: str,
    preset: str | Sequence[str],
    model_digest: str,
    cfg: ExplainConfig = ExplainConfig(),
) -> ExplanationSet:
    """Load a cached set; raises StaleCacheError or CacheMissError."""
    name = preset_name(preset)
    maps = []
    for method in preset_methods(preset):
        path = entry_path(store, model_digest, name, image_id, method)
        if not path.exists():
            others = sorted(Path(store).glob(f"*/{name}/{image_id}.{method}{SUFFIX}"))
            if others:
                raise StaleCacheError(
                    f"{image_id}.{method} cached only for model digest {others[0].parent.parent.name}, "
                    f"not {model_digest}"
                )
            raise CacheMissError(f"no cache entry for {image_id}.{method} under {name}")
        header, amap = read_map(path)
        if header.get("model_digest") != model_digest:
            raise StaleCacheError(f"{path}: model digest {header.get('model_digest')} != {model_digest}")
        expected = cfg.digest(method)
        if header.get("config_digest") != expected:
            raise StaleCacheError(f"{path}: config digest {header.get('config_digest')} != {expected}")
        maps.append(amap)
    return ExplanationSet(image_id, tuple(maps), name)


def is_cached(store, image_id, preset, model_digest, cfg: ExplainConfig = ExplainConfig()) -> bool:
    try:
        load_explanations(store, image_id, preset, model_digest, cfg)
    except CacheError:
        return False
    return True
