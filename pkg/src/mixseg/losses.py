"""Pixel cross-entropy streams and their weighted combination."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import IGNORE
from .numerics import Graph, Tensor, log_softmax_channel, weighted_sum

STREAMS = ("l_s", "l_t", "l_inter", "l_intra")


@dataclass
class LossBreakdown:
    l_s: float = 0.0
    l_t: float = 0.0
    l_inter: float = 0.0
    l_intra: float = 0.0
    total: float = 0.0
    lam: float = 1.0
    mu: float = 2.0

    def as_dict(self) -> dict:
        return asdict(self)


def ce_loss(logits: Tensor, labels, weight=1.0, graph: Graph | None = None) -> Tensor:
    """Weighted pixel cross-entropy, averaged over non-IGNORE pixels of the batch.

    ``weight`` is a scalar or one value per image (the pseudo-label quality of
    a mixed image). IGNORE pixels add neither loss nor gradient.
    """
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    N, C, H, W = logits.shape
    if labels.shape != (N, H, W):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != IGNORE
    if np.any(labels[valid] >= C):
        bad = int(labels[valid].max())
        raise ValueError(f"label {bad} out of range for {C} classes")
    per_image = np.ndim(weight) == 1
    w = np.asarray(weight, dtype=logits.dtype)
    if per_image and w.shape != (N,):
        raise ValueError(f"need {N} per-image weights, got {w.shape}")

    logp = log_softmax_channel(logits, graph)
    n_valid = int(valid.sum())
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp.data, safe[:, None], axis=1)[:, 0]
    nll = np.where(valid, -picked, 0)
    denom = max(n_valid, 1)
    if per_image:
        value = (w * nll.reshape(N, -1).sum(axis=1)).sum() / denom
    else:
        value = w * (nll.sum() / denom)

    def backward(g):
        coef = g / denom * (w[:, None, None] if per_image else w)
        grad = np.zeros_like(logp.data)
        np.put_along_axis(grad, safe[:, None], -(valid * coef)[:, None], axis=1)
        return (grad,)

    if graph is None:
        return Tensor(np.asarray(value, dtype=logits.dtype))
    return graph.record("nll", (logp,), np.asarray(value, dtype=logits.dtype), backward)


def total_loss(streams: dict[str, Tensor | None], lam: float = 1.0, mu: float = 2.0,
               graph: Graph | None = None) -> tuple[Tensor, LossBreakdown]:
    """l_s + l_t + lam * l_inter + mu * l_intra. Missing/None streams add nothing."""
    if lam < 0 or mu < 0:
        raise ValueError(f"loss weights must be non-negative (lambda={lam}, mu={mu})")
    unknown = set(streams) - set(STREAMS)
    if unknown:
        raise ValueError(f"unknown loss streams {sorted(unknown)}")
    coef = {"l_s": 1.0, "l_t": 1.0, "l_inter": lam, "l_intra": mu}
    terms, weights = [], []
    parts = {}
    for name in STREAMS:
        t = streams.get(name)
        if t is None:
            parts[name] = 0.0
            continue
        terms.append(t)
        weights.append(coef[name])
        parts[name] = t.item()
    out = weighted_sum(terms, weights, graph)
    return out, LossBreakdown(total=out.item(), lam=lam, mu=mu, **parts)
