import pytest

from xaiens.config import ConfigError, RunConfig, dump_toml, from_dict, load_config


def test_defaults_resolve_preset_width_and_side():
    cfg = load_config()
    assert cfg.preset == "local3" and cfg.p == 3
    assert cfg.ensembler.p == 3 and cfg.ensembler.input_side == 64
    assert cfg.ensembler.fusion == "concat" and cfg.ensembler.cutoff == 0.5
    assert cfg.train.max_epochs <= 200


def test_seed_is_threaded_into_every_stage():
    cfg = load_config(seed=11)
    assert cfg.classifier.train.seed == cfg.explain.seed == cfg.train.seed == cfg.eval.seed == 11


def test_explicit_method_list_becomes_a_joined_preset():
    cfg = from_dict({"run": {"preset": "Saliency+Occlusion"}})
    assert cfg.preset == "Saliency+Occlusion" and cfg.ensembler.p == 2


def test_toml_round_trip(tmp_path, tiny_config):
    cfg = tiny_config(tmp_path / "run")
    path = tmp_path / "c.toml"
    path.write_text(dump_toml(cfg))
    assert load_config(path) == cfg


def test_overrides_win_over_file(tmp_path, tiny_config):
    path = tmp_path / "c.toml"
    path.write_text(dump_toml(tiny_config(tmp_path / "run")))
    cfg = load_config(path, seed=2, fusion="sum", cutoff=0.4, out=str(tmp_path / "x"))
    assert cfg.seed == 2 and cfg.ensembler.fusion == "sum" and cfg.ensembler.cutoff == 0.4
    assert cfg.out == str(tmp_path / "x")


@pytest.mark.parametrize(
    "raw",
    [
        {"data": {"sides": 3}},
        {"bogus": {}},
        {"run": {"preset": "NoSuchMethod"}},
        {"ensembler": {"fusion": "max"}},
        {"train": {"max_epochs": 0}},
    ],
)
def test_bad_configs_raise_config_error(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_bad_cutoff_override():
    with pytest.raises(ConfigError):
        load_config(cutoff=1.5)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[run\nseed = 1")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_digests_chain_downstream_only():
    base = RunConfig()
    changed = from_dict({"eval": {"flip_step": 0.05}})
    for stage in ("data", "classifier", "explain", "ensembler", "ablate"):
        assert base.digest(stage) == from_dict({}).digest(stage)
        assert changed.digest(stage) == from_dict({}).digest(stage)
    assert changed.digest("eval") != from_dict({}).digest("eval")
    assert changed.digest("report") != from_dict({}).digest("report")

    upstream = from_dict({"data": {"n": 100}})
    for stage in ("data", "classifier", "explain", "ensembler", "eval", "ablate", "report"):
        assert upstream.digest(stage) != from_dict({}).digest(stage)
    with pytest.raises(ConfigError):
        base.digest("nope")
