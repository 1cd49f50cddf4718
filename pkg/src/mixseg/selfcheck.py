"""Release gate: gradient checks plus loop oracles for mixing, EMA, quality and mIoU.

Ops are looked up on their modules at call time, so a patched op is what gets
checked.
"""
from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import losses, metrics, mixing, model, numerics, teacher

GRAD_TOL = 1e-4
INSTANCES = 20


def _check_grad(build: Callable, shapes, rng, instances=INSTANCES) -> float:
    worst = 0.0
    for _ in range(instances):
        x = rng.standard_normal(shapes)
        worst = max(worst, numerics.grad_check(build, x))
    return worst


def check_grad_conv2d(rng):
    worst = 0.0
    for _ in range(INSTANCES):
        x0 = rng.standard_normal((1, 2, 5, 5))
        w0 = rng.standard_normal((3, 2, 3, 3))
        b0 = rng.standard_normal(3)
        up = rng.standard_normal((1, 3, 5, 5))

        def f_of(which):
            def f(t, g):
                args = {"x": numerics.Tensor(x0), "w": numerics.Tensor(w0), "b": numerics.Tensor(b0)}
                args[which] = t
                out = numerics.conv2d(args["x"], args["w"], args["b"], g)
                return numerics.total(numerics.mul(out, numerics.Tensor(up), g), g)
            return f

        for which, val in (("x", x0), ("w", w0), ("b", b0)):
            worst = max(worst, numerics.grad_check(f_of(which), val))
    return worst


def check_grad_relu(rng):
    worst = 0.0
    for _ in range(INSTANCES):
        x = rng.standard_normal((2, 3, 4, 4))
        x = np.where(np.abs(x) < 1e-3, 0.1, x)    # stay off the kink
        up = numerics.Tensor(rng.standard_normal(x.shape))
        worst = max(worst, numerics.grad_check(
            lambda t, g: numerics.total(numerics.mul(numerics.relu(t, g), up, g), g), x))
    return worst


def check_grad_softmax(rng):
    up = numerics.Tensor(rng.standard_normal((1, 4, 3, 3)))
    return _check_grad(
        lambda t, g: numerics.total(numerics.mul(numerics.softmax_channel(t, g), up, g), g),
        (1, 4, 3, 3), rng)


def check_grad_log_softmax(rng):
    up = numerics.Tensor(rng.standard_normal((1, 4, 3, 3)))
    return _check_grad(
        lambda t, g: numerics.total(numerics.mul(numerics.log_softmax_channel(t, g), up, g), g),
        (1, 4, 3, 3), rng)


def check_grad_ce(rng):
    labels = rng.integers(0, 4, (2, 3, 3)).astype(np.uint8)
    labels[0, 0, 0] = 255
    q = np.array([0.7, 0.3])
    return _check_grad(lambda t, g: losses.ce_loss(t, labels, q, g), (2, 4, 3, 3), rng)


def _relu_margin(params, images) -> float:
    """Smallest |pre-activation| over every ReLU input of the network."""
    margin = np.inf
    x = numerics.Tensor(images)
    for w, b, is_head in params.layers():
        x = numerics.conv2d(x, w, b)
        if not is_head:
            margin = min(margin, float(np.abs(x.data).min()))
            x = numerics.Tensor(np.maximum(x.data, 0))
    return margin


def check_grad_model(rng, instances: int = INSTANCES, eps: float = 1e-5):
    """Composed loss (all four streams, q-weighted mixed streams) w.r.t. every parameter tensor.

    Instances whose ReLU inputs come within 10*eps of zero are redrawn, so a
    finite-difference probe never straddles a kink.
    """
    worst = 0.0
    for k in range(instances):
        for _ in range(100):
            p = model.init(k, (3, 4), num_classes=5, dtype=np.float64)
            for _, t in p:
                t.data = t.data + 0.05 * rng.standard_normal(t.shape)
            imgs = [rng.random((2, 3, 8, 8)) for _ in range(4)]
            if min(_relu_margin(p, x) for x in imgs) > 10 * eps:
                break
        else:
            raise AssertionError("could not draw a kink-free instance")
        lbls = [rng.integers(0, 5, (2, 8, 8)).astype(np.uint8) for _ in range(4)]
        q = [np.array([1.0, 1.0]), np.array([1.0, 1.0]), np.array([0.8, 0.5]), np.array([0.6, 0.9])]
        names = p.names()
        idx = k % len(names)

        def f(t, g, idx=idx):
            params = p.copy(requires_grad=False)
            params.tensors[idx] = (names[idx], t)
            streams = {}
            for key, x, y, w in zip(losses.STREAMS, imgs, lbls, q):
                streams[key] = losses.ce_loss(model.forward(params, x, g), y, w, g)
            return losses.total_loss(streams, 1.0, 2.0, g)[0]

        worst = max(worst, numerics.grad_check(f, p.values()[idx].data, eps))
    return worst


def check_mixing(rng):
    for _ in range(200):
        H = W = 8
        d_img, r_img = rng.random((3, H, W)), rng.random((3, H, W))
        d_lbl, r_lbl = rng.integers(0, 5, (H, W)), rng.integers(0, 5, (H, W))
        mask = mixing.build_mask(d_lbl, mixing.select_classes(d_lbl, rng))
        out = mixing.mix(d_img, d_lbl, r_img, r_lbl, mask)
        for i in range(H):
            for j in range(W):
                m = mask[i, j]
                for c in range(3):
                    want = m * d_img[c, i, j] + (1 - m) * r_img[c, i, j]
                    if out.image[c, i, j] != want:
                        raise AssertionError(f"image mismatch at {(c, i, j)}")
                if out.label[i, j] != (d_lbl[i, j] if m else r_lbl[i, j]):
                    raise AssertionError(f"label mismatch at {(i, j)}")
    return 0.0


def check_ema(rng):
    alpha, n = 0.99, 50
    theta = rng.standard_normal(10)
    phi0 = rng.standard_normal(10)
    student = model.Params((), 2, 1, [("w", numerics.Tensor(theta))])
    ts = teacher.TeacherState(model.Params((), 2, 1, [("w", numerics.Tensor(phi0.copy()))]), alpha)
    for _ in range(n):
        teacher.ema_update(ts, student)
    err = float(np.abs(ts.params.values()[0].data - (theta + alpha ** n * (phi0 - theta))).max())
    if err >= 1e-10:
        raise AssertionError(f"EMA closed form off by {err}")
    return err


def check_quality(rng):
    tau = 0.968
    for _ in range(200):
        logits = rng.standard_normal((1, 5, 6, 6)) * rng.uniform(0.5, 8)
        probs = numerics.softmax_channel(numerics.Tensor(logits)).data
        count = 0
        for i in range(6):
            for j in range(6):
                e = [math.exp(v) for v in logits[0, :, i, j]]
                if max(e) / sum(e) > tau:
                    count += 1
        got = teacher.quality(probs, tau)[0]
        if got != count / 36:
            raise AssertionError(f"quality {got} != {count}/36")
    return 0.0


def check_miou(rng):
    for _ in range(50):
        C = 4
        truth = rng.integers(0, C, 200)
        pred = rng.integers(0, C, 200)
        cm = metrics.accumulate(metrics.ConfusionMatrix(C), pred, truth)
        ious = []
        for c in range(C):
            inter = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
            union = sum(1 for t, p in zip(truth, pred) if t == c or p == c)
            if union:
                ious.append(inter / union)
        _, mean = metrics.miou(cm)
        if abs(mean - sum(ious) / len(ious)) > 1e-12:
            raise AssertionError("mIoU mismatch")
    return 0.0


GRAD_CHECKS = {
    "grad_conv2d": check_grad_conv2d,
    "grad_relu": check_grad_relu,
    "grad_softmax": check_grad_softmax,
    "grad_log_softmax": check_grad_log_softmax,
    "grad_ce_loss": check_grad_ce,
    "grad_model": check_grad_model,
}
ORACLE_CHECKS = {
    "mixing_oracle": check_mixing,
    "ema_closed_form": check_ema,
    "quality_oracle": check_quality,
    "miou_oracle": check_miou,
}


def run_all(seed: int = 0, out=print) -> dict[str, bool]:
    results = {}
    for name, fn in {**GRAD_CHECKS, **ORACLE_CHECKS}.items():
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            val = fn(rng)
            ok = name not in GRAD_CHECKS or val < GRAD_TOL
            detail = f"max rel err {val:.2e}" if name in GRAD_CHECKS else "exact"
        except Exception as exc:  # a failing check must not stop the others
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results[name] = ok
        out(f"{'PASS' if ok else 'FAIL'}  {name:<18} {detail}  ({time.perf_counter() - t0:.1f}s)")
    return results
