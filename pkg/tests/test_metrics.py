import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segpatch.core import IGNORE_INDEX
from segpatch.errors import EmptyDomain, EmptyScores, NoEvaluablePixels
from oracles import naive_effect, naive_metrics
from segpatch.metrics import (
    ConfusionMatrix,
    accumulate_confusion,
    adversarial_effect,
    mann_whitney_auc,
    mask_patch_white,
    miou_macc,
    per_class,
    roc_auc,
    segmentation_report,
    write_report,
    write_roc_csv,
)


def test_all_3class_2x2_pairs_match_enumeration():
    maps = list(itertools.product(range(3), repeat=4))
    masks = [(0, 0, 0, 0), (1, 0, 0, 0), (0, 1, 1, 0)]
    for pred in maps:
        p = np.array(pred).reshape(2, 2)
        for gt in maps:
            g = np.array(gt).reshape(2, 2)
            miou, macc = miou_macc(accumulate_confusion(p, g, num_classes=3))
            em, ea = naive_metrics(pred, gt)
            assert miou == em and macc == ea
        for gt in maps[::7]:
            for m in masks:
                eff = adversarial_effect(p, np.array(gt).reshape(2, 2), np.array(m, bool).reshape(2, 2))
                assert eff == naive_effect(pred, gt, m)


def test_confusion_examples():
    g = np.array([[0, 1], [2, 1]])
    cm = accumulate_confusion(g, g, num_classes=3)
    np.testing.assert_array_equal(cm.matrix, np.diag([1, 2, 1]))
    cm = accumulate_confusion(g, g, exclude=np.ones((2, 2), bool), num_classes=3)
    assert cm.total == 0 and cm.excluded == 4
    pred = np.array([[0, 1], [1, 1]])
    cm = accumulate_confusion(pred, g, num_classes=3)
    np.testing.assert_array_equal(cm.matrix, [[1, 0, 0], [0, 2, 0], [0, 1, 0]])


def test_ignored_labels_count_as_excluded():
    g = np.array([[0, IGNORE_INDEX]])
    cm = accumulate_confusion(np.array([[0, 1]]), g, num_classes=2)
    assert cm.total == 1 and cm.excluded == 1


def test_miou_examples():
    gt = np.array([0, 0, 1, 1])
    pred = np.array([0, 1, 1, 1])
    miou, macc = miou_macc(accumulate_confusion(pred, gt, num_classes=2))
    assert miou == pytest.approx(7 / 12) and macc == pytest.approx(3 / 4)
    assert miou_macc(accumulate_confusion(gt, gt, num_classes=2)) == (1.0, 1.0)
    # class 2 absent from both maps is ignored
    assert miou_macc(accumulate_confusion(gt, gt, num_classes=3)) == (1.0, 1.0)
    with pytest.raises(NoEvaluablePixels):
        miou_macc(ConfusionMatrix.zeros(2))


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, (3, 4), elements=st.integers(0, 3)), arrays(np.int64, (3, 4), elements=st.integers(0, 3)))
def test_per_class_iou_never_exceeds_accuracy(p, g):
    iou, acc = per_class(accumulate_confusion(p, g, num_classes=4))
    both = ~np.isnan(iou) & ~np.isnan(acc)
    assert np.all(iou[both] <= acc[both] + 1e-15)
    miou, macc = miou_macc(accumulate_confusion(p, g, num_classes=4))
    assert 0 <= miou <= 1 and 0 <= macc <= 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(arrays(np.int64, (2, 3), elements=st.integers(0, 2)),
                          arrays(np.int64, (2, 3), elements=st.integers(0, 2))), min_size=1, max_size=4))
def test_confusion_accumulation_is_additive(pairs):
    total = ConfusionMatrix.zeros(3)
    for p, g in pairs:
        total = total + accumulate_confusion(p, g, num_classes=3)
    stacked = accumulate_confusion(np.concatenate([p for p, _ in pairs]), np.concatenate([g for _, g in pairs]),
                                   num_classes=3)
    np.testing.assert_array_equal(total.matrix, stacked.matrix)


def test_adversarial_effect_examples():
    a = np.arange(8).reshape(2, 4) % 3
    none = np.zeros((2, 4), bool)
    assert adversarial_effect(a, a, none) == 0.0
    assert adversarial_effect(a, (a + 1) % 3, none) == 1.0
    b = a.copy()
    b[0, :2] = 9
    assert adversarial_effect(a, b, none) == 0.25
    with pytest.raises(EmptyDomain):
        adversarial_effect(a, a, np.ones((2, 4), bool))


def test_mask_patch_white(rng):
    img = rng.uniform(size=(3, 4, 3))
    np.testing.assert_array_equal(mask_patch_white(img, np.zeros((3, 4), bool)), img)
    assert np.all(mask_patch_white(img, np.ones((3, 4), bool)) == 1.0)
    m = np.zeros((3, 4), bool)
    m[1, 1:3] = True
    out = mask_patch_white(img, m)
    assert np.all(out[m] == 1.0)
    np.testing.assert_array_equal(out[~m], img[~m])


def test_auc_examples():
    assert roc_auc([0, 1], [2, 3]).auc == 1.0
    assert roc_auc([1, 2, 3], [3, 2, 1]).auc == 0.5
    assert roc_auc([1, 2], [2, 3]).auc == pytest.approx(0.875, abs=1e-15)
    with pytest.raises(EmptyScores):
        roc_auc([], [1.0])


def test_roc_curve_shape():
    curve = roc_auc([1, 2], [2, 3])
    assert curve.fpr[0] == 0 and curve.tpr[0] == 0 and curve.fpr[-1] == 1 and curve.tpr[-1] == 1
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=15), st.lists(st.integers(0, 6), min_size=1, max_size=15))
def test_trapezoid_auc_equals_mann_whitney(c, a):
    assert abs(roc_auc(c, a).auc - mann_whitney_auc(c, a)) < 1e-12


def test_reports_written(tmp_path):
    cm = accumulate_confusion(np.array([0, 1, 1]), np.array([0, 1, 0]), num_classes=2)
    rep = segmentation_report(cm, ["a", "b"], adversarial_effect=0.25)
    assert rep["mIoU"] == pytest.approx(miou_macc(cm)[0])
    write_report(tmp_path / "r", rep)
    assert (tmp_path / "r.json").exists() and (tmp_path / "r.csv").exists()
    write_roc_csv(tmp_path / "roc.csv", roc_auc([1, 2], [2, 3]))
    assert (tmp_path / "roc.csv").read_text().splitlines()[0] == "threshold,fpr,tpr"
