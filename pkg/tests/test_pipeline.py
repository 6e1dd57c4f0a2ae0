import re

import pytest
import tomli
from conftest import _tiny_run_config

from xaiens.cli import main
from xaiens.config import dump_toml, from_dict, load_config
from xaiens.pipeline import STAGES, Layout, PipelineError, read_stamp, run_all, run_stage
from xaiens.reports import read_csv

ERROR_LINE = re.compile(r"^error stage=\S+ type=\w+ msg=.+$")


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = _tiny_run_config(root / "run")
    path = root / "run.toml"
    path.write_text(dump_toml(cfg))
    assert main(["--config", str(path), "all"]) == 0
    return cfg, path


def _mtimes(folder):
    return {p: p.stat().st_mtime_ns for p in sorted(folder.rglob("*")) if p.is_file()}


def test_all_stages_leave_stamps_and_outputs(finished_run):
    cfg, _ = finished_run
    layout = Layout(cfg.out_dir)
    for stage, folder in zip(STAGES, ["data", "classifier", "explain", "ensembler", "eval", "ablate", "report"]):
        stamp = read_stamp(cfg.out_dir / folder)
        assert stamp["stage"] == stage and stamp["digest"] == cfg.digest(
            {"synth": "data", "train-classifier": "classifier", "train-ensembler": "ensembler"}.get(stage, stage)
        )
    for name in ("table1.csv", "derived.csv", "singles.csv", "quality.csv", "radar.csv", "per_class.csv", "table2.csv"):
        digest, rows = read_csv(layout.report / name, expect_digest=cfg.digest("report"))
        assert rows
    _, radar = read_csv(layout.report / "radar.csv")
    assert {r["method"] for r in radar} == {"Saliency", "GuidedBackprop", "Ensemble"}
    _, table1 = read_csv(layout.report / "table1.csv")
    assert [r["model"] for r in table1] == ["Saliency+GuidedBackprop", "baseline0"]


def test_warm_rerun_is_a_no_op(finished_run, capsys):
    cfg, path = finished_run
    before = _mtimes(cfg.out_dir)
    for stage in STAGES:
        assert main(["--config", str(path), stage]) == 0
    out = capsys.readouterr().out
    assert out.count("up to date") == len(STAGES)
    assert _mtimes(cfg.out_dir) == before


def test_changed_eval_section_reruns_only_downstream(finished_run, tmp_path):
    cfg, path = finished_run
    raw = dump_toml(cfg).replace("flip_step = 0.01", "flip_step = 0.02")
    assert raw != dump_toml(cfg)
    cfg2 = load_config(_write(tmp_path / "c2.toml", raw))
    ran = {stage: run_stage(cfg2, stage) for stage in STAGES}
    assert ran == {
        "synth": False,
        "train-classifier": False,
        "explain": False,
        "train-ensembler": False,
        "eval": True,
        "ablate": False,
        "report": True,
    }
    # restore the original eval outputs for the other tests
    run_all(cfg)


def _write(path, text):
    path.write_text(text)
    return path


def test_stale_upstream_is_refused(finished_run, tmp_path):
    cfg, _ = finished_run
    other = from_dict({**_raw(cfg), "train": {"max_epochs": 3, "batch_size": 4}})
    with pytest.raises(PipelineError, match="stale"):
        run_stage(other, "eval")


def _raw(cfg):
    return tomli.loads(dump_toml(cfg))


def test_missing_upstream_gives_one_error_line(tmp_path, capsys):
    code = main(["--out", str(tmp_path / "empty"), "eval"])
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 1
    assert ERROR_LINE.match(err[-1]) and "stage=eval" in err[-1] and "PipelineError" in err[-1]


def test_report_with_empty_eval_fails(tmp_path, capsys):
    (tmp_path / "r" / "eval").mkdir(parents=True)
    assert main(["--out", str(tmp_path / "r"), "report"]) == 1
    assert "empty" in capsys.readouterr().err


def test_missing_dataset_directory(tmp_path, capsys, tiny_config):
    raw = _raw(tiny_config(tmp_path / "run"))
    raw["data"]["source"] = str(tmp_path / "nowhere")
    path = _write(tmp_path / "c.toml", dump_toml(from_dict(raw)))
    assert main(["--config", str(path), "synth"]) == 1
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert ERROR_LINE.match(line) and "nowhere" in line


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "none.toml"), "synth"]) == 2
    assert main(["--cutoff", "2", "show-config"]) == 2
    assert main(["no-such-command"]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert ERROR_LINE.match(err[-1])


def test_show_config_round_trips(tmp_path, capsys):
    assert main(["show-config", "--seed", "4", "--preset", "cited4", "--fusion", "channel"]) == 0
    text = capsys.readouterr().out
    cfg = load_config(_write(tmp_path / "s.toml", text))
    assert cfg.seed == 4 and cfg.preset == "cited4" and cfg.ensembler.fusion == "channel" and cfg.p == 4
