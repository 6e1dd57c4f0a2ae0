import numpy as np
import pytest

from xaiens.cache import (
    CacheError,
    CacheMissError,
    StaleCacheError,
    cache_explanations,
    entry_path,
    is_cached,
    load_explanations,
    read_map,
    write_map,
)
from xaiens.explainers import SIGNED, UNSIGNED, AttributionMap, ExplainConfig, ExplanationSet

PRESET = ("Saliency", "GuidedBackprop")


def _set(image_id="a1"):
    rng = np.random.default_rng(0)
    maps = (
        AttributionMap("Saliency", rng.uniform(0, 1, (3, 8, 8)).astype(np.float32), UNSIGNED),
        AttributionMap("GuidedBackprop", rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32), SIGNED),
    )
    return ExplanationSet(image_id, maps, "Saliency+GuidedBackprop")


def test_layout_and_bit_exact_round_trip(tmp_path):
    s = _set()
    paths = cache_explanations(s, tmp_path, "m0")
    assert paths[0] == tmp_path / "m0" / "Saliency+GuidedBackprop" / "a1.Saliency.arr"
    back = load_explanations(tmp_path, "a1", PRESET, "m0")
    assert back.methods == s.methods and back.preset == s.preset
    for x, y in zip(back.maps, s.maps):
        assert np.array_equal(x.values, y.values) and x.values.dtype == y.values.dtype
        assert x.value_range == y.value_range


def test_header_records_provenance(tmp_path):
    amap = _set().maps[1]
    path = write_map(tmp_path / "x.arr", amap, "cfg1", "model1")
    header, back = read_map(path)
    assert header == {
        "method": "GuidedBackprop",
        "shape": [3, 8, 8],
        "dtype": "float32",
        "value_range": SIGNED,
        "config_digest": "cfg1",
        "model_digest": "model1",
    }
    assert np.array_equal(back.values, amap.values)


def test_miss_is_a_file_not_found(tmp_path):
    with pytest.raises(CacheMissError):
        load_explanations(tmp_path, "a1", PRESET, "m0")
    assert issubclass(CacheMissError, FileNotFoundError)
    assert not is_cached(tmp_path, "a1", PRESET, "m0")


def test_entry_for_another_model_is_stale(tmp_path):
    cache_explanations(_set(), tmp_path, "old")
    with pytest.raises(StaleCacheError, match="old"):
        load_explanations(tmp_path, "a1", PRESET, "new")


def test_changed_explainer_config_is_stale(tmp_path):
    cache_explanations(_set(), tmp_path, "m0", ExplainConfig())
    with pytest.raises(StaleCacheError, match="config digest"):
        load_explanations(tmp_path, "a1", PRESET, "m0", ExplainConfig(seed=99))
    assert is_cached(tmp_path, "a1", PRESET, "m0", ExplainConfig())


def test_tampered_header_model_digest_is_stale(tmp_path):
    cache_explanations(_set(), tmp_path, "m0")
    path = entry_path(tmp_path, "m0", "Saliency+GuidedBackprop", "a1", "Saliency")
    write_map(path, _set().maps[0], ExplainConfig().digest("Saliency"), "someone-else")
    with pytest.raises(StaleCacheError):
        load_explanations(tmp_path, "a1", PRESET, "m0")


def test_corrupt_entry_raises(tmp_path):
    path = tmp_path / "broken.arr"
    path.write_bytes(b"no header at all")
    with pytest.raises(CacheError):
        read_map(path)
