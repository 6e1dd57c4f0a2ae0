"""The end-to-end stages behind the command line.

Every stage writes its outputs plus a ``stamp.json`` holding the stage
digest; a stage whose stamp matches the current config is skipped. Stages
read what upstream stages wrote to disk, never in-memory state, so any of
them can be re-run on its own.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import cache
from .ablation import ablate
from .classifier import load_classifier, model_digest, save_classifier, train_classifier
from .config import RunConfig
from .data import Dataset, generate_synthetic_shapes, load_dataset, model_input, write_dataset
from .ensembler import EnsembledExplanation, binarize, build_ensembler, load_ensembler, predict_values, save_ensembler
from .explainers import (
    IMAGE,
    AttributionMap,
    ExplanationSet,
    build_explanation_set,
    derive_seed,
    explain,
    preset_methods,
)
from .metrics import Confusion, derived_metrics, metric_from_confusion, pixel_confusion
from .quality import (
    RADAR_COLUMNS,
    DegenerateScoreError,
    QualityScores,
    local_lipschitz,
    model_parameter_randomisation,
    pixel_flipping,
    pointing_game_score,
    radar_ranking,
    sparseness_gini,
)
from .reports import restamp, write_csv, write_jsonl
from .training import evaluate_split, train

logger = logging.getLogger(__name__)

STAGES = ("synth", "train-classifier", "explain", "train-ensembler", "eval", "ablate", "report")
ENSEMBLE = "Ensemble"
BASELINE_PRESET = "baseline0"
TABLE1_COLUMNS = (
    "model",
    "train_ens_acc",
    "train_ens_f1",
    "train_ens_iou",
    "train_loss",
    "test_ens_acc",
    "test_ens_f1",
    "test_ens_iou",
    "test_loss",
)
DERIVED_COLUMNS = ("model", "div_acc", "div_f1", "div_iou", "exh_iou")
SINGLES_COLUMNS = ("method", "ens_acc", "ens_f1", "ens_iou")
QUALITY_COLUMNS = ("method", "localisation", "faithfulness", "robustness", "complexity", "randomisation")
PER_CLASS_COLUMNS = ("class", "method", "ens_iou", "n")


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def data(self):
        return self.root / "data"

    @property
    def classifier(self):
        return self.root / "classifier"

    @property
    def cache(self):
        return self.root / "cache"

    @property
    def explain(self):
        return self.root / "explain"

    @property
    def ensembler(self):
        return self.root / "ensembler"

    @property
    def eval(self):
        return self.root / "eval"

    @property
    def ablate(self):
        return self.root / "ablate"

    @property
    def report(self):
        return self.root / "report"


def _stage_dir(layout: Layout, stage: str) -> Path:
    return {
        "synth": layout.data,
        "train-classifier": layout.classifier,
        "explain": layout.explain,
        "train-ensembler": layout.ensembler,
        "eval": layout.eval,
        "ablate": layout.ablate,
        "report": layout.report,
    }[stage]


_DIGEST_KEY = {
    "synth": "data",
    "train-classifier": "classifier",
    "explain": "explain",
    "train-ensembler": "ensembler",
    "eval": "eval",
    "ablate": "ablate",
    "report": "report",
}


def stage_digest(cfg: RunConfig, stage: str) -> str:
    return cfg.digest(_DIGEST_KEY[stage])


def read_stamp(folder: Path) -> dict | None:
    path = folder / "stamp.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())


def write_stamp(folder: Path, stage: str, digest: str, **extra) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    record = {"stage": stage, "digest": digest, **extra}
    (folder / "stamp.json").write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")


def is_fresh(cfg: RunConfig, stage: str) -> bool:
    stamp = read_stamp(_stage_dir(Layout(cfg.out_dir), stage))
    return stamp is not None and stamp.get("digest") == stage_digest(cfg, stage)


def require(cfg: RunConfig, stage: str) -> dict:
    """Stamp of an upstream stage, which must match the current config."""
    folder = _stage_dir(Layout(cfg.out_dir), stage)
    stamp = read_stamp(folder)
    if stamp is None:
        raise PipelineError(f"stage {stage!r} has not been run (no stamp in {folder})")
    if stamp.get("digest") != stage_digest(cfg, stage):
        raise PipelineError(f"stage {stage!r} output in {folder} is stale for this config; re-run {stage}")
    return stamp


# ----------------------------------------------------------------- loaders


def dataset_of(cfg: RunConfig) -> Dataset:
    require(cfg, "synth")
    root = Layout(cfg.out_dir).data if cfg.data.source == "synthetic" else Path(cfg.data.source)
    return load_dataset(root, cfg.data.split_ratio, cfg.seed, cfg.data.side)


def classifier_of(cfg: RunConfig):
    require(cfg, "train-classifier")
    return load_classifier(Layout(cfg.out_dir).classifier / "classifier.pt")


def sets_of(cfg: RunConfig, dataset: Dataset, model_dig: str, preset: str) -> dict:
    store = Layout(cfg.out_dir).cache
    return {s.id: cache.load_explanations(store, s.id, preset, model_dig, cfg.explain) for s in dataset.samples}


def ensembler_path(cfg: RunConfig, preset: str) -> Path:
    return Layout(cfg.out_dir).ensembler / preset / "ensembler.pt"


# ------------------------------------------------------------------- stages


def run_synth(cfg: RunConfig) -> Path:
    layout = Layout(cfg.out_dir)
    digest = stage_digest(cfg, "synth")
    if cfg.data.source == "synthetic":
        ds, seeds = generate_synthetic_shapes(
            cfg.data.n, cfg.data.side, cfg.data.classes, cfg.seed, cfg.data.split_ratio
        )
        write_dataset(ds, layout.data, seeds)
        n = len(ds)
    else:
        # an external dataset is only validated; it stays where it is
        n = len(load_dataset(cfg.data.source, cfg.data.split_ratio, cfg.seed, cfg.data.side))
    write_stamp(layout.data, "synth", digest, n=n)
    return layout.data


def run_train_classifier(cfg: RunConfig) -> Path:
    layout = Layout(cfg.out_dir)
    dataset = dataset_of(cfg)
    path = layout.classifier / "classifier.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    if cfg.classifier.source == "toy":
        model, stats = train_classifier(dataset, cfg.classifier.train, cfg.augment)
        save_classifier(model, path, stats)
    else:
        src = Path(cfg.classifier.source)
        if not src.exists():
            raise PipelineError(f"classifier checkpoint not found: {src}")
        model = load_classifier(src)
        torch.save(model, path)
        stats = {}
    stats["model_digest"] = model_digest(model)
    (layout.classifier / "classifier.json").write_text(json.dumps(stats, sort_keys=True, indent=1) + "\n")
    write_stamp(layout.classifier, "train-classifier", stage_digest(cfg, "train-classifier"), **stats)
    logger.info("classifier %s", stats)
    return path


def _presets(cfg: RunConfig) -> list[str]:
    presets = [cfg.preset]
    if cfg.baseline and cfg.preset != BASELINE_PRESET:
        presets.append(BASELINE_PRESET)
    return presets


def run_explain(cfg: RunConfig) -> Path:
    layout = Layout(cfg.out_dir)
    dataset = dataset_of(cfg)
    model = classifier_of(cfg)
    dig = model_digest(model)
    written = 0
    for preset in _presets(cfg):
        for sample in dataset.samples:
            if cache.is_cached(layout.cache, sample.id, preset, dig, cfg.explain):
                continue
            exp_set = build_explanation_set(
                model, sample.id, model_input(sample, cfg.augment), sample.label, preset, cfg.explain
            )
            cache.cache_explanations(exp_set, layout.cache, dig, cfg.explain)
            written += 1
    logger.info("explained %d images", written)
    write_stamp(layout.explain, "explain", stage_digest(cfg, "explain"), model_digest=dig)
    return layout.cache


def run_train_ensembler(cfg: RunConfig) -> Path:
    layout = Layout(cfg.out_dir)
    dig = require(cfg, "explain")["model_digest"]
    dataset = dataset_of(cfg)
    stage = stage_digest(cfg, "train-ensembler")
    for preset in _presets(cfg):
        sets = sets_of(cfg, dataset, dig, preset)
        ens_cfg = replace(cfg.ensembler, p=len(preset_methods(preset)))
        model = build_ensembler(ens_cfg, cfg.seed)
        folder = layout.ensembler / preset
        model, history = train(model, sets, dataset, cfg.train, cfg.augment, folder, stage)
        history.to_csv(folder / "history.csv", stage)
        save_ensembler(model, folder / "ensembler.pt", {"epochs": len(history), "stopped_by": history.stopped_by}, stage)
    write_stamp(layout.ensembler, "train-ensembler", stage, model_digest=dig)
    return layout.ensembler


def _ensemble_map(ensembler, exp_set) -> AttributionMap:
    values = predict_values(ensembler, exp_set.stack()[None])[0]
    return EnsembledExplanation(values, binarize(values, ensembler.cfg.cutoff)).as_attribution()


def _split_confusion(pred_bins, masks) -> Confusion:
    total = Confusion(0, 0, 0, 0)
    for p, m in zip(pred_bins, masks):
        total = total + pixel_confusion(p, m)
    return total


def single_method_scores(sets: dict, samples, cutoff: float) -> dict[str, dict]:
    """Each input explanation binarized on its own and scored against the masks.

    A map is reduced to its channel-mean absolute value before thresholding.
    """
    methods = sets[samples[0].id].methods
    out = {}
    for j, method in enumerate(methods):
        bins = [binarize(sets[s.id].maps[j].reduced(), cutoff) for s in samples]
        conf = _split_confusion(bins, [s.mask for s in samples])
        out[method] = {k: metric_from_confusion(conf, k) for k in ("acc", "f1", "iou")}
    return out


def quality_scores(cfg: RunConfig, classifier, ensembler, sets: dict, samples) -> tuple[list[QualityScores], dict]:
    """Five quality axes for every input method and for the ensemble."""
    ecfg = cfg.eval
    methods = list(sets[samples[0].id].methods) + [ENSEMBLE]
    images = {s.id: model_input(s, cfg.augment) for s in samples}
    attrs = {}
    for s in samples:
        per = {m.method: m for m in sets[s.id].maps}
        per[ENSEMBLE] = _ensemble_map(ensembler, sets[s.id])
        attrs[s.id] = per

    # Lipschitz neighbours and randomised weights are drawn from the same seeds
    # for every method, so the ensemble can reuse the input methods' maps.
    memo = {}

    def explain_once(model, image, method, sample) -> AttributionMap:
        key = (model_digest(model), hashlib.sha1(np.ascontiguousarray(image).tobytes()).hexdigest(), method, sample.id)
        if key not in memo:
            local = replace(cfg.explain, seed=derive_seed(cfg.explain.seed, sample.id))
            memo[key] = explain(model, image, sample.label, method, local)
        return memo[key]

    def explain_fn(method, sample, model=None):
        model = classifier if model is None else model

        def fn(image):
            if method == ENSEMBLE:
                maps = tuple(explain_once(model, image, m, sample) for m in preset_methods(cfg.preset))
                return _ensemble_map(ensembler, ExplanationSet(sample.id, maps, cfg.preset)).values
            return explain_once(model, image, method, sample).values

        return fn

    scores, curves = [], {}
    for method in methods:
        maps = [attrs[s.id][method] for s in samples]
        loc, excluded = pointing_game_score(maps, [s.mask for s in samples])
        faith, method_curves = [], []
        for s, amap in zip(samples, maps):
            try:
                curve, f = pixel_flipping(classifier, images[s.id], amap, s.label, ecfg)
            except DegenerateScoreError:
                logger.warning("%s: degenerate pixel-flipping score on %s", method, s.id)
                continue
            faith.append(f)
            method_curves.append(curve)
        curves[method] = np.mean(method_curves, axis=0).tolist() if method_curves else []
        complexity = float(np.mean([sparseness_gini(a) for a in maps]))
        if method == IMAGE:
            # the raw image has no model to perturb; robustness and randomisation are left undefined
            robust = rand = math.nan
        else:
            robust = float(
                np.mean(
                    [local_lipschitz(explain_fn(method, s), images[s.id], ecfg) for s in samples[: ecfg.robustness_images]]
                )
            )
            rand_scores = []
            for s in samples[: ecfg.randomisation_images]:
                _, score = model_parameter_randomisation(
                    classifier,
                    lambda model, image, target, s=s: explain_fn(method, s, model)(image),
                    images[s.id],
                    s.label,
                    ecfg,
                )
                rand_scores.append(score)
            rand = float(np.mean(rand_scores))
        scores.append(
            QualityScores(
                method=method,
                localisation=loc,
                faithfulness=float(np.mean(faith)) if faith else math.nan,
                robustness=robust,
                complexity=complexity,
                randomisation=rand,
            )
        )
        logger.info("quality %s: %s (pointing game excluded %d)", method, scores[-1], excluded)
    return scores, curves


def per_class_scores(ensembler, sets: dict, dataset: Dataset, samples) -> list[list]:
    rows = []
    labels = sorted({s.label for s in samples})
    names = dataset.class_names
    for label in labels:
        group = [s for s in samples if s.label == label]
        name = names[label] if label < len(names) else str(label)
        masks = [s.mask for s in group]
        values = predict_values(ensembler, np.stack([sets[s.id].stack() for s in group]))
        conf = _split_confusion([binarize(v, ensembler.cfg.cutoff) for v in values], masks)
        rows.append([name, ENSEMBLE, metric_from_confusion(conf, "iou"), len(group)])
        for method, m in single_method_scores(sets, group, ensembler.cfg.cutoff).items():
            rows.append([name, method, m["iou"], len(group)])
    return rows


def run_eval(cfg: RunConfig) -> Path:
    layout = Layout(cfg.out_dir)
    require(cfg, "train-ensembler")
    dig = require(cfg, "explain")["model_digest"]
    dataset = dataset_of(cfg)
    classifier = classifier_of(cfg)
    digest = stage_digest(cfg, "eval")
    smoothing = cfg.train.smoothing

    reports = {}
    for preset in _presets(cfg):
        model, _ = load_ensembler(ensembler_path(cfg, preset))
        sets = sets_of(cfg, dataset, dig, preset)
        reports[preset] = {
            split: evaluate_split(model, sets, dataset, split, smoothing) for split in ("train", "test")
        }
    baseline_iou = reports[BASELINE_PRESET]["test"].ens_iou if BASELINE_PRESET in reports else None

    table, derived = [], []
    for preset, rep in reports.items():
        tr, te = rep["train"], rep["test"]
        table.append([preset, tr.ens_acc, tr.ens_f1, tr.ens_iou, tr.loss, te.ens_acc, te.ens_f1, te.ens_iou, te.loss])
        d = derived_metrics(tr, te, baseline_iou)
        derived.append([preset, d.div_acc, d.div_f1, d.div_iou, d.exh_iou])
    write_csv(layout.eval / "table1.csv", TABLE1_COLUMNS, table, digest)
    write_csv(layout.eval / "derived.csv", DERIVED_COLUMNS, derived, digest)

    ensembler, _ = load_ensembler(ensembler_path(cfg, cfg.preset))
    sets = sets_of(cfg, dataset, dig, cfg.preset)
    test = dataset.split("test")
    singles = single_method_scores(sets, test, ensembler.cfg.cutoff)
    write_csv(
        layout.eval / "singles.csv",
        SINGLES_COLUMNS,
        [[m, s["acc"], s["f1"], s["iou"]] for m, s in singles.items()],
        digest,
        notes=["split: test", "each map reduced to its channel-mean absolute value, then binarized"],
    )

    scores, curves = quality_scores(cfg, classifier, ensembler, sets, test)
    write_csv(
        layout.eval / "quality.csv",
        QUALITY_COLUMNS,
        [[s.method, s.localisation, s.faithfulness, s.robustness, s.complexity, s.randomisation] for s in scores],
        digest,
    )
    rows = radar_ranking(scores)
    write_csv(layout.eval / "radar.csv", RADAR_COLUMNS, [[r[c] for c in RADAR_COLUMNS] for r in rows], digest)
    write_jsonl(layout.eval / "flip_curves.jsonl", [{"method": m, "curve": c} for m, c in curves.items()], digest)
    write_csv(layout.eval / "per_class.csv", PER_CLASS_COLUMNS, per_class_scores(ensembler, sets, dataset, test), digest)
    write_stamp(layout.eval, "eval", digest)
    return layout.eval


def run_ablate(cfg: RunConfig) -> Path:
    layout = Layout(cfg.out_dir)
    require(cfg, "train-ensembler")
    dig = require(cfg, "explain")["model_digest"]
    dataset = dataset_of(cfg)
    model, _ = load_ensembler(ensembler_path(cfg, cfg.preset))
    sets = sets_of(cfg, dataset, dig, cfg.preset)
    digest = stage_digest(cfg, "ablate")
    report = ablate(model, sets, dataset, cfg.ablate_split, cfg.train.smoothing)
    report.to_csv(layout.ablate / "table2.csv", digest)
    write_stamp(layout.ablate, "ablate", digest)
    return layout.ablate


def run_report(cfg: RunConfig) -> Path:
    """Collect plot data from eval (and ablate, when present) into one bundle."""
    layout = Layout(cfg.out_dir)
    if not layout.eval.is_dir() or not any(layout.eval.iterdir()):
        raise PipelineError(f"eval directory {layout.eval} is empty; run eval first")
    require(cfg, "eval")
    eval_digest = stage_digest(cfg, "eval")
    digest = stage_digest(cfg, "report")
    out = layout.report

    for name in ("radar.csv", "table1.csv", "derived.csv", "singles.csv", "quality.csv", "per_class.csv", "flip_curves.jsonl"):
        restamp(layout.eval / name, out / name, eval_digest, digest)
    if read_stamp(layout.ablate) is not None:
        restamp(layout.ablate / "table2.csv", out / "table2.csv", stage_digest(cfg, "ablate"), digest)
    write_stamp(out, "report", digest)
    return out


RUNNERS = {
    "synth": run_synth,
    "train-classifier": run_train_classifier,
    "explain": run_explain,
    "train-ensembler": run_train_ensembler,
    "eval": run_eval,
    "ablate": run_ablate,
    "report": run_report,
}


def run_stage(cfg: RunConfig, stage: str, force: bool = False) -> bool:
    """Run ``stage`` unless its outputs are fresh; returns True when it ran."""
    if stage not in RUNNERS:
        raise PipelineError(f"unknown stage {stage!r}")
    if not force and is_fresh(cfg, stage):
        logger.info("%s: up to date", stage)
        return False
    torch.manual_seed(cfg.seed)
    RUNNERS[stage](cfg)
    return True


def run_all(cfg: RunConfig, force: bool = False) -> None:
    for stage in STAGES:
        run_stage(cfg, stage, force)
