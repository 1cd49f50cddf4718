import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixseg import model, numerics
from mixseg.model import Params
from mixseg.numerics import Graph, Tensor
from mixseg.teacher import TeacherState, ema_update, pseudo_label, quality


def _single(values):
    return Params((), 2, 1, [("w", Tensor(np.asarray(values, dtype=np.float64)))])


def test_ema_paper_defaults():
    t = TeacherState(_single(np.zeros(3)), alpha=0.99)
    ema_update(t, _single(np.ones(3)))
    np.testing.assert_allclose(t.params.values()[0].data, 0.01, rtol=0, atol=1e-15)
    assert t.step == 1


def test_ema_alpha_zero_copies():
    t = TeacherState(_single([5.0, -2.0]), alpha=0.0)
    ema_update(t, _single([1.5, 2.5]))
    assert t.params.values()[0].data.tolist() == [1.5, 2.5]


def test_ema_closed_form():
    rng = np.random.default_rng(0)
    theta, phi0 = rng.standard_normal(20), rng.standard_normal(20)
    alpha, n = 0.99, 50
    t = TeacherState(_single(phi0.copy()), alpha)
    s = _single(theta)
    for _ in range(n):
        ema_update(t, s)
    closed = theta + alpha ** n * (phi0 - theta)
    assert np.abs(t.params.values()[0].data - closed).max() < 1e-10


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-3, 3)), arrays(np.float64, 6, elements=st.floats(-3, 3)),
       st.floats(0, 0.999))
def test_ema_convex_bounds(phi, theta, alpha):
    t = TeacherState(_single(phi.copy()), alpha)
    ema_update(t, _single(theta))
    lo, hi = min(phi.min(), theta.min()), max(phi.max(), theta.max())
    out = t.params.values()[0].data
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_ema_mismatch_errors():
    t = TeacherState(_single(np.zeros(3)))
    with pytest.raises(ValueError):
        ema_update(t, _single(np.zeros(4)))
    two = Params((), 2, 1, [("a", Tensor(np.zeros(3))), ("b", Tensor(np.zeros(3)))])
    with pytest.raises(ValueError):
        ema_update(t, two)


def test_from_student_copies_and_validates():
    s = model.init(0, (4,), dtype=np.float64)
    t = TeacherState.from_student(s)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(s.values(), t.params.values()))
    assert not any(v.requires_grad for v in t.params.values())
    s.values()[0].data += 1.0
    assert not np.array_equal(s.values()[0].data, t.params.values()[0].data)
    with pytest.raises(ValueError):
        TeacherState.from_student(s, alpha=1.0)
    with pytest.raises(ValueError):
        TeacherState.from_student(s, tau=1.0)


# -- quality ----------------------------------------------------------------

def test_quality_all_confident():
    probs = np.zeros((1, 2, 2, 2))
    probs[:, 0] = 0.999
    probs[:, 1] = 0.001
    assert quality(probs, 0.968)[0] == 1.0


def test_quality_three_of_four():
    maxp = np.array([0.99, 0.99, 0.99, 0.5]).reshape(1, 2, 2)
    probs = np.stack([maxp, 1 - maxp], axis=1)
    assert quality(probs, 0.968)[0] == 0.75


def test_quality_strict_threshold():
    probs = np.stack([np.full((1, 2, 2), 0.75), np.full((1, 2, 2), 0.25)], axis=1)
    assert quality(probs, 0.75)[0] == 0.0


def test_quality_loop_oracle():
    rng = np.random.default_rng(1)
    tau = 0.968
    for _ in range(20):
        logits = rng.standard_normal((1, 5, 16, 16)) * rng.uniform(1, 10)
        probs = numerics.softmax_channel(Tensor(logits)).data
        count = 0
        for i in range(16):
            for j in range(16):
                e = [math.exp(v) for v in logits[0, :, i, j]]
                count += max(e) / sum(e) > tau
        assert quality(probs, tau)[0] == count / 256


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-20, 20)), st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_quality_monotone_in_tau(logits, t1, t2):
    probs = numerics.softmax_channel(Tensor(logits)).data
    lo, hi = sorted((t1, t2))
    q_lo, q_hi = quality(probs, lo), quality(probs, hi)
    assert np.all((0 <= q_hi) & (q_hi <= q_lo) & (q_lo <= 1))


# -- pseudo_label -----------------------------------------------------------

def test_pseudo_label_no_graph_and_no_grad():
    student = model.init(0, (4,), dtype=np.float64)
    t = TeacherState.from_student(student)
    x = np.random.default_rng(2).random((2, 3, 8, 8))
    labels, q = pseudo_label(t, x)
    assert labels.shape == (2, 8, 8) and labels.dtype == np.uint8
    assert q.shape == (2,)
    probs = numerics.softmax_channel(model.forward(student, x)).data
    assert np.array_equal(labels, probs.argmax(axis=1))
    assert all(v.grad is None for v in t.params.values())

    # a downstream loss on the pseudo-labels sends nothing back to the teacher
    from mixseg.losses import ce_loss
    g = Graph()
    loss = ce_loss(model.forward(student, x, g), labels, 1.0, g)
    numerics.backward(loss, g)
    assert all(v.grad is None for v in t.params.values())
    assert all(v.grad is not None for v in student.values())


def test_pseudo_label_single_image():
    t = TeacherState.from_student(model.init(0, (4,), dtype=np.float64))
    labels, q = pseudo_label(t, np.zeros((3, 8, 8)))
    assert labels.shape == (1, 8, 8) and q.shape == (1,)
