"""Dense tensors with define-by-run reverse-mode autodiff.

Only the handful of ops a small fully-convolutional segmentation net needs are
provided. Every op takes an optional ``graph``; when it is ``None`` nothing is
recorded, which is how inference (the teacher, evaluation) stays gradient-free.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not fit the op's contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Graph:
    """Tape of recorded ops, in execution (hence topological) order."""

    records: list[Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
               backward: BackwardFn) -> Tensor:
        """Wrap ``out_data`` as a tensor and, if any input needs a gradient, tape it.

        ``backward`` maps the upstream gradient to one gradient per input
        (``None`` for inputs that do not require one).
        """
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=needs)
        if needs:
            self.records.append(Record(op, tuple(inputs), out, backward))
        return out

    def count(self, op: str | None = None) -> int:
        if op is None:
            return len(self.records)
        return sum(1 for r in self.records if r.op == op)


def _emit(graph: Graph | None, op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward: BackwardFn) -> Tensor:
    if graph is None:
        return Tensor(out_data)
    return graph.record(op, inputs, out_data, backward)


# --------------------------------------------------------------------------
# convolution

def _im2col(xp: np.ndarray, H: int, W: int) -> np.ndarray:
    """Padded [C,N,H+2,W+2] -> columns [C*9, N*H*W] for a 3x3 stride-1 kernel."""
    C, N = xp.shape[:2]
    cols = np.empty((C, 9, N, H, W), dtype=xp.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        cols[:, k] = xp[:, :, i:i + H, j:j + W]
    return cols.reshape(C * 9, N * H * W)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, graph: Graph | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (resolution preserving)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got {x.shape}")
    N, Cin, H, W = x.shape
    if weight.data.ndim != 4 or weight.shape[1:] != (Cin, 3, 3):
        raise ShapeError(f"conv2d weight {weight.shape} incompatible with input channels {Cin}")
    Cout = weight.shape[0]
    if bias.shape != (Cout,):
        raise ShapeError(f"conv2d bias {bias.shape} does not match {Cout} output channels")

    xp = np.zeros((Cin, N, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x.data.transpose(1, 0, 2, 3)
    cols = _im2col(xp, H, W)
    wmat = weight.data.reshape(Cout, Cin * 9)
    out = (wmat @ cols).reshape(Cout, N, H, W)
    out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g: np.ndarray):
        gm = g.transpose(1, 0, 2, 3).reshape(Cout, N * H * W)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(Cin, 9, N, H, W)
            gxp = np.zeros((Cin, N, H + 2, W + 2), dtype=g.dtype)
            for k in range(9):
                i, j = divmod(k, 3)
                gxp[:, :, i:i + H, j:j + W] += gcols[:, k]
            gx = np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))
        return gx, gw, gb

    return _emit(graph, "conv2d", (x, weight, bias), out, backward)


# --------------------------------------------------------------------------
# elementwise / channelwise

def relu(x: Tensor, graph: Graph | None = None) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, x.data.dtype.type(0))   # NaN propagates, so bad inputs still abort
    return _emit(graph, "relu", (x,), out, lambda g: (g * mask,))


def _softmax(z: np.ndarray, axis: int = 1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_channel(logits: Tensor, graph: Graph | None = None) -> Tensor:
    """Per-pixel softmax over axis 1 of an [N,C,H,W] tensor."""
    if logits.data.ndim != 4 or logits.shape[1] < 2:
        raise ShapeError(f"softmax_channel needs [N,C>=2,H,W], got {logits.shape}")
    p = _softmax(logits.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit(graph, "softmax", (logits,), p, backward)


def log_softmax_channel(logits: Tensor, graph: Graph | None = None) -> Tensor:
    if logits.data.ndim != 4 or logits.shape[1] < 2:
        raise ShapeError(f"log_softmax_channel needs [N,C>=2,H,W], got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _emit(graph, "log_softmax", (logits,), out, backward)


def mul(a: Tensor, b: Tensor, graph: Graph | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return _emit(graph, "mul", (a, b), a.data * b.data,
                 lambda g: (g * b.data if a.requires_grad else None,
                            g * a.data if b.requires_grad else None))


def total(x: Tensor, graph: Graph | None = None) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    shape = x.shape
    return _emit(graph, "sum", (x,), np.asarray(x.data.sum()),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def scale(x: Tensor, c: float, graph: Graph | None = None) -> Tensor:
    return _emit(graph, "scale", (x,), x.data * c, lambda g: (g * c,))


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float],
                 graph: Graph | None = None) -> Tensor:
    """sum_k weights[k] * terms[k] over scalar tensors."""
    if len(terms) != len(weights):
        raise ValueError("weighted_sum: terms and weights differ in length")
    if not terms:
        return Tensor(np.asarray(0.0))
    out = np.zeros((), dtype=terms[0].dtype)
    for t, w in zip(terms, weights):
        if t.data.size != 1:
            raise ShapeError(f"weighted_sum expects scalars, got {t.shape}")
        out = out + w * t.data.reshape(())
    ws = [float(w) for w in weights]
    return _emit(graph, "weighted_sum", tuple(terms), np.asarray(out),
                 lambda g: tuple((g * w).reshape(t.shape) for t, w in zip(terms, ws)))


# --------------------------------------------------------------------------
# reverse pass

def backward(loss: Tensor, graph: Graph) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every grad-requiring tensor on the tape.

    Grads accumulate (callers zero leaves between steps). Tensors the loss does
    not depend on are left untouched.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(graph.records):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        _accumulate(rec.output, g)
        grads = rec.backward(g)
        for t, gt in zip(rec.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in pending:
                pending[key] = pending[key] + gt
            else:
                pending[key] = gt
    # leaves: tensors that were never an op output on this tape
    by_id = {id(t): t for rec in graph.records for t in rec.inputs}
    by_id.setdefault(id(loss), loss)
    for key, g in pending.items():
        t = by_id.get(key)
        if t is not None and t.requires_grad:
            _accumulate(t, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def grad_check(f: Callable[[Tensor, Graph | None], Tensor], x: np.ndarray,
               eps: float = 1e-5) -> float:
    """Max relative gap between tape gradients and central differences.

    ``f(tensor, graph)`` must build a scalar from ``tensor``. The error per
    component is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    g = Graph()
    backward(f(xt, g), g)
    analytic = np.zeros_like(x) if xt.grad is None else xt.grad

    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi = f(Tensor(x.copy()), None).item()
        flat[k] = orig - eps
        lo = f(Tensor(x.copy()), None).item()
        flat[k] = orig
        nflat[k] = (hi - lo) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
