import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixseg import metrics, model
from mixseg.data import IGNORE, Sample
from mixseg.metrics import ConfusionMatrix, accumulate, miou


def loop_cm(pred, truth, C):
    cm = np.zeros((C, C), dtype=np.int64)
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        if t != IGNORE:
            cm[t, p] += 1
    return cm


def test_perfect_prediction_diagonal():
    t = np.random.default_rng(0).integers(0, 4, (5, 5))
    cm = accumulate(ConfusionMatrix(4), t, t)
    assert np.array_equal(cm.counts, np.diag(np.diag(cm.counts)))
    assert miou(cm)[1] == 1.0


def test_all_ignore_unchanged():
    cm = accumulate(ConfusionMatrix(3), np.zeros((4, 4), int), np.full((4, 4), IGNORE))
    assert cm.total() == 0
    with pytest.raises(ValueError, match="no evaluated pixels"):
        miou(cm)


def test_hand_example():
    cm = ConfusionMatrix(2, np.array([[2, 2], [0, 4]]))
    per, mean = miou(cm)
    assert per == [0.5, 4 / 6]
    assert mean == pytest.approx(7 / 12, rel=1e-15)


def test_one_class_predictions():
    C = 4
    truth = np.repeat(np.arange(C), 25)
    per, mean = miou(accumulate(ConfusionMatrix(C), np.zeros_like(truth), truth))
    assert per[0] == pytest.approx(1 / C)
    assert per[1:] == [0.0] * (C - 1)
    assert mean == pytest.approx(1 / C / C)


def test_absent_class_excluded():
    truth = np.array([0, 0, 1, 1])
    per, mean = miou(accumulate(ConfusionMatrix(3), truth, truth))
    assert np.isnan(per[2]) and mean == 1.0


def test_loop_oracle_with_ignore():
    rng = np.random.default_rng(1)
    for _ in range(20):
        C = int(rng.integers(2, 6))
        truth = rng.integers(0, C, (7, 9))
        truth[rng.random(truth.shape) < 0.1] = IGNORE
        pred = rng.integers(0, C, (7, 9))
        cm = accumulate(ConfusionMatrix(C), pred, truth)
        assert np.array_equal(cm.counts, loop_cm(pred, truth, C))
        assert cm.total() == int((truth != IGNORE).sum())


def test_errors():
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(3), np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(3), np.full((2, 2), 3), np.zeros((2, 2), int))


label_maps = arrays(np.int64, (6, 6), elements=st.integers(0, 3))


@settings(max_examples=80, deadline=None)
@given(label_maps, label_maps, st.permutations(range(4)))
def test_permutation_equivariance(pred, truth, perm):
    perm = np.array(perm)
    per, mean = miou(accumulate(ConfusionMatrix(4), pred, truth))
    per2, mean2 = miou(accumulate(ConfusionMatrix(4), perm[pred], perm[truth]))
    assert mean2 == pytest.approx(mean, abs=1e-12)
    for c in range(4):
        a, b = per[c], per2[perm[c]]
        assert (np.isnan(a) and np.isnan(b)) or a == pytest.approx(b, abs=1e-15)
    assert 0.0 <= mean <= 1.0


@settings(max_examples=50, deadline=None)
@given(label_maps, label_maps, label_maps, label_maps)
def test_accumulation_order_independent(p1, t1, p2, t2):
    a = accumulate(accumulate(ConfusionMatrix(4), p1, t1), p2, t2)
    b = accumulate(accumulate(ConfusionMatrix(4), p2, t2), p1, t1)
    c = accumulate(ConfusionMatrix(4), p1, t1) + accumulate(ConfusionMatrix(4), p2, t2)
    assert np.array_equal(a.counts, b.counts) and np.array_equal(a.counts, c.counts)


def test_evaluate_batches_agree():
    rng = np.random.default_rng(2)
    p = model.init(0, (4,))
    samples = [Sample(rng.random((3, 8, 8)).astype(np.float32), rng.integers(0, 5, (8, 8)).astype(np.uint8),
                      "target", k) for k in range(7)]
    per1, m1, cm1 = metrics.evaluate(p, samples, batch_size=3)
    per2, m2, cm2 = metrics.evaluate(p, samples, batch_size=25)
    assert np.array_equal(cm1.counts, cm2.counts) and m1 == m2
    assert cm1.total() == 7 * 64


def test_format_table():
    text = metrics.format_table([0.5, float("nan")], 0.5, ["a", "bb"])
    assert "50.00" in text and "n/a" in text and text.splitlines()[-1].startswith("mIoU")
