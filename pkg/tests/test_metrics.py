import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xaiens.metrics import (
    Confusion,
    MetricReport,
    UndefinedBaselineError,
    derived_metrics,
    div_metric,
    ens_metric,
    exh_metric,
    metric_from_confusion,
    pixel_confusion,
)


def brute_force(pred, mask):
    """Pixel-by-pixel enumeration, deliberately naive."""
    tp = fp = fn = tn = 0
    for i, j in itertools.product(range(pred.shape[0]), range(pred.shape[1])):
        p, m = int(pred[i, j]), int(mask[i, j])
        tp += p and m
        fp += p and not m
        fn += m and not p
        tn += not p and not m
    n = pred.size
    iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
    return (tp, fp, fn, tn), {"iou": iou, "f1": f1, "acc": (tp + tn) / n}


binary_pair = st.integers(1, 12).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 1), min_size=n * n, max_size=n * n),
        st.lists(st.integers(0, 1), min_size=n * n, max_size=n * n),
        st.just(n),
    )
)


def _arrays(pair):
    a, b, n = pair
    return np.array(a, dtype=np.uint8).reshape(n, n), np.array(b, dtype=np.uint8).reshape(n, n)


def test_confusion_enumeration_example():
    pred = np.array([[1, 1], [0, 0]])
    mask = np.array([[1, 0], [0, 0]])
    assert tuple(pixel_confusion(pred, mask)) == (1, 1, 0, 2)
    assert ens_metric(pred, mask, "iou") == 0.5
    assert ens_metric(pred, mask, "f1") == 2 / 3
    assert ens_metric(pred, mask, "acc") == 0.75


def test_perfect_and_inverted_prediction():
    mask = np.zeros((5, 7), dtype=np.uint8)
    mask[1:3, 2:6] = 1
    c = pixel_confusion(mask, mask)
    assert tuple(c) == (8, 0, 0, 35 - 8)
    assert all(ens_metric(mask, mask, k) == 1.0 for k in ("iou", "f1", "acc"))
    inv = pixel_confusion(1 - mask, mask)
    assert inv.tp == 0 and inv.tn == 0


def test_empty_prediction_on_empty_mask_scores_one():
    z = np.zeros((4, 4))
    assert ens_metric(z, z, "iou") == 1.0
    assert ens_metric(z, z, "f1") == 1.0


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        pixel_confusion(np.zeros((2, 2)), np.zeros((2, 3)))


def test_unknown_kind_raises():
    with pytest.raises(ValueError):
        metric_from_confusion(Confusion(1, 0, 0, 0), "dice")


def test_matches_brute_force_on_random_masks(rng):
    for _ in range(200):
        pred = rng.integers(0, 2, (16, 16))
        mask = rng.integers(0, 2, (16, 16))
        counts, expected = brute_force(pred, mask)
        assert tuple(pixel_confusion(pred, mask)) == counts
        for kind, value in expected.items():
            assert ens_metric(pred, mask, kind) == value


def test_micro_average_sums_counts_before_dividing():
    a = Confusion(1, 1, 0, 2) + Confusion(3, 0, 1, 0)
    assert tuple(a) == (4, 1, 1, 2)
    assert metric_from_confusion(a, "iou") == 4 / 6


@given(binary_pair)
@settings(max_examples=100, deadline=None)
def test_iou_never_exceeds_f1(pair):
    pred, mask = _arrays(pair)
    c = pixel_confusion(pred, mask)
    iou, f1 = metric_from_confusion(c, "iou"), metric_from_confusion(c, "f1")
    assert iou <= f1
    # one confusion table: f1 = 2 iou / (1 + iou)
    assert math.isclose(f1, 2 * iou / (1 + iou), rel_tol=1e-12)


@given(binary_pair, st.randoms(use_true_random=False))
@settings(max_examples=60, deadline=None)
def test_invariant_under_joint_pixel_permutation(pair, rnd):
    pred, mask = _arrays(pair)
    perm = list(range(pred.size))
    rnd.shuffle(perm)
    pp = pred.ravel()[perm].reshape(pred.shape)
    mp = mask.ravel()[perm].reshape(mask.shape)
    for kind in ("iou", "f1", "acc"):
        assert ens_metric(pred, mask, kind) == ens_metric(pp, mp, kind)


def test_div_examples():
    assert div_metric(0.7, 0.7) == 1.0
    assert div_metric(1.0, 0.0) == 0.0
    # concatenation row of the reference architecture table: train 0.734, test 0.599
    assert abs(div_metric(0.734, 0.599) - 0.865) < 1e-12


@given(st.floats(0, 1), st.floats(0, 1))
def test_div_pair_sums_to_two(a, b):
    assert abs(div_metric(a, b) + div_metric(b, a) - 2.0) < 1e-12


def test_exh_examples():
    assert exh_metric(0.6, 0.6) == 1.0
    assert exh_metric(0.3, 0.6) == 0.5
    with pytest.raises(UndefinedBaselineError):
        exh_metric(0.3, 0.0)


def test_derived_metrics_from_reports():
    tr = MetricReport("train", 0.930, 0.828, 0.734, 0.314)
    te = MetricReport("test", 0.865, 0.723, 0.599, 0.405)
    d = derived_metrics(tr, te, baseline_iou=0.5)
    assert abs(d.div_iou - (1 - 0.734 + 0.599)) < 1e-12
    assert abs(d.div_acc - (1 - 0.930 + 0.865)) < 1e-12
    assert abs(d.exh_iou - 0.599 / 0.5) < 1e-12
    assert math.isnan(derived_metrics(tr, te).exh_iou)
