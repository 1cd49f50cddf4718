"""Mean-teacher training with inter- and intra-domain ClassMix streams."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_io
from . import model
from .config import TrainConfig
from .data import CLASS_NAMES, DatasetSplit, load_dataset, resplit
from .losses import LossBreakdown, ce_loss, total_loss
from .metrics import evaluate
from .mixing import MixedBatch, Strategy, compose_strategy, dump_mixed
from .model import Params
from .numerics import Graph, backward
from .teacher import TeacherState, ema_update, pseudo_label

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "l_s", "l_t", "l_inter", "l_intra", "total", "q_mean", "lr", "eval_miou")


class TrainingAborted(RuntimeError):
    """Raised when a step produces a non-finite loss."""


# --------------------------------------------------------------------------
# optimiser

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "OptimizerState":
        return cls([np.zeros_like(t.data) for t in params.values()],
                   [np.zeros_like(t.data) for t in params.values()], 0)


def adamw_step(params: Params, opt: OptimizerState, lr, betas=(0.9, 0.999),
               weight_decay: float = 0.01, eps: float = 1e-8) -> None:
    """One AdamW update with bias correction and decoupled weight decay.

    ``lr`` is a float or one rate per parameter tensor. Tensors without a grad
    are treated as having zero gradient.
    """
    b1, b2 = betas
    opt.step += 1
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    rates = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
    for k, t in enumerate(params.values()):
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        opt.m[k] = b1 * opt.m[k] + (1.0 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1.0 - b2) * g * g
        m_hat = opt.m[k] / c1
        v_hat = opt.v[k] / c2
        t.data = t.data - rates[k] * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * t.data)


def warmup_lr(step: int, base_lr: float, warmup_iters: int) -> float:
    if warmup_iters <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_iters)


# --------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    sources: list
    labeled: list
    unlabeled: list


class BatchSampler:
    """Independent RNG streams per pool so switching a loss off leaves the others' draws unchanged."""

    def __init__(self, split: DatasetSplit, cfg: TrainConfig):
        self.split = split
        self.cfg = cfg
        ss = np.random.SeedSequence([cfg.seed, 1])
        self.rng_src, self.rng_lbl, self.rng_unl, self.rng_mix = (
            np.random.default_rng(s) for s in ss.spawn(4))
        self._cycle: list[int] = []
        self._lbl_weights = _presence_weights(split.labeled_target) if cfg.class_balanced else None
        self.two_xu = Strategy.parse(cfg.strategy) is Strategy.TWO_XU_TWO_STREAMS

    def _labeled_index(self) -> int:
        n = len(self.split.labeled_target)
        if self._lbl_weights is not None:
            return int(self.rng_lbl.choice(n, p=self._lbl_weights))
        if not self._cycle:
            self._cycle = self.rng_lbl.permutation(n).tolist()
        return self._cycle.pop()

    def sample(self) -> Batch:
        cfg, sp = self.cfg, self.split
        if cfg.use_ls and not sp.source:
            raise ValueError("source pool is empty but use_ls is on")
        if (cfg.use_lt or cfg.use_intra) and not sp.labeled_target:
            raise ValueError("labeled target pool is empty but use_lt/use_intra is on")
        if (cfg.use_inter or cfg.use_intra) and not sp.unlabeled_target:
            raise ValueError("unlabeled target pool is empty but a mixing loss is on")
        sources = [sp.source[i] for i in self.rng_src.integers(0, len(sp.source), cfg.n_src)] \
            if sp.source else []
        labeled = [sp.labeled_target[self._labeled_index()] for _ in range(cfg.n_lbl_tgt)] \
            if sp.labeled_target else []
        unlabeled = []
        nu = len(sp.unlabeled_target)
        if nu:
            if self.two_xu:
                # same n_unl_tgt images per step as the other strategies; group k
                # pairs image k (inter recipient) with the next one (intra recipient)
                m = max(cfg.n_unl_tgt, 2)
                pool = [sp.unlabeled_target[i] for i in self.rng_unl.choice(nu, size=m, replace=nu < m)]
                unlabeled = [[pool[k], pool[(k + 1) % m]] for k in range(cfg.n_unl_tgt)]
            else:
                unlabeled = [[sp.unlabeled_target[i]]
                             for i in self.rng_unl.integers(0, nu, cfg.n_unl_tgt)]
        return Batch(sources, labeled, unlabeled)


def _presence_weights(samples) -> np.ndarray | None:
    if not samples:
        return None
    C = len(CLASS_NAMES)
    present = np.array([np.bincount(s.label.ravel(), minlength=C)[:C] > 0 for s in samples])
    freq = present.sum(axis=0).clip(min=1)
    w = (present / freq).sum(axis=1)
    return w / w.sum()


def sample_batch(split: DatasetSplit, cfg: TrainConfig, sampler: BatchSampler | None = None) -> Batch:
    return (sampler or BatchSampler(split, cfg)).sample()


# --------------------------------------------------------------------------
# training state and step

@dataclass
class TrainState:
    cfg: TrainConfig
    split: DatasetSplit
    student: Params
    teacher: TeacherState
    opt: OptimizerState
    sampler: BatchSampler
    step: int = 0
    dtype: type = np.float32
    last_graph: Graph | None = None
    counters: dict = field(default_factory=lambda: {"teacher_images": 0, "student_forwards": 0})


def init_state(cfg: TrainConfig, split: DatasetSplit) -> TrainState:
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    student = model.init(cfg.seed, cfg.channels, len(CLASS_NAMES), dtype=dtype)
    teacher = TeacherState.from_student(student, cfg.alpha, cfg.tau)
    return TrainState(cfg, split, student, teacher, OptimizerState.zeros_like(student),
                      BatchSampler(split, cfg), dtype=dtype)


def _stack(images, dtype) -> np.ndarray:
    return np.stack(images).astype(dtype, copy=False)


def learning_rates(state: TrainState) -> list[float]:
    cfg = state.cfg
    head = warmup_lr(state.step, cfg.lr_head, cfg.warmup_iters)
    enc = warmup_lr(state.step, cfg.lr_encoder, cfg.warmup_iters)
    return [head if name.startswith("head.") else enc for name in state.student.names()]


def train_step(state: TrainState) -> tuple[LossBreakdown, dict]:
    """One optimisation step; returns the loss breakdown and step statistics."""
    cfg = state.cfg
    batch = state.sampler.sample()
    mixing_on = cfg.use_inter or cfg.use_intra

    # (1) teacher pseudo-labels on clean unlabeled images, one pass per distinct image
    pseudo: dict[int, tuple[np.ndarray, float]] = {}
    if mixing_on and batch.unlabeled:
        distinct = {}
        for group in batch.unlabeled:
            for s in group:
                distinct.setdefault(s.id, s)
        ids = list(distinct)
        labels, qs = pseudo_label(state.teacher, _stack([distinct[i].image for i in ids], state.dtype))
        state.counters["teacher_images"] += len(ids)
        pseudo = {i: (labels[k], float(qs[k])) for k, i in enumerate(ids)}

    # (2) mixed images; class selections are drawn even when mixing is off
    mixed: list[MixedBatch] = []
    n_groups = min(len(batch.sources), len(batch.labeled), len(batch.unlabeled))
    for k in range(n_groups):
        group = batch.unlabeled[k]
        if mixing_on:
            mixed += compose_strategy(cfg.strategy, batch.sources[k], batch.labeled[k], group,
                                      [pseudo[s.id] for s in group], state.sampler.rng_mix,
                                      cfg.use_inter, cfg.use_intra)
        else:
            # keep the mixing RNG in lock-step with mixing-enabled runs
            compose_strategy(cfg.strategy, batch.sources[k], batch.labeled[k], group,
                             [(None, 0.0)] * len(group), state.sampler.rng_mix, False, False)
    if cfg.debug_dump and cfg.out_dir:
        for j, mb in enumerate(mixed):
            dump_mixed(mb, Path(cfg.out_dir) / "mixed", f"{state.step:06d}_{j}")

    # (3)-(4) student forwards and Eq.-11 combination
    graph = Graph()
    streams = {}

    def stream(images, labels, weight=1.0):
        logits = model.forward(state.student, _stack(images, state.dtype), graph)
        state.counters["student_forwards"] += 1
        return ce_loss(logits, np.stack(labels), weight, graph)

    if cfg.use_ls:
        streams["l_s"] = stream([s.image for s in batch.sources], [s.label for s in batch.sources])
    if cfg.use_lt:
        streams["l_t"] = stream([s.image for s in batch.labeled], [s.label for s in batch.labeled])
    joint = [mb for mb in mixed if mb.stream == "joint"]
    if joint:
        # a single merged stream stands in for both mixing terms, weighted (lam + mu) / 2
        lj = stream([m.image for m in joint], [m.label for m in joint],
                    np.array([m.quality for m in joint]))
        streams["l_inter"] = _half(lj, graph)
        streams["l_intra"] = streams["l_inter"]
    for name, key in (("inter", "l_inter"), ("intra", "l_intra")):
        part = [mb for mb in mixed if mb.stream == name]
        if part:
            streams[key] = stream([m.image for m in part], [m.label for m in part],
                                  np.array([m.quality for m in part]))
    if not streams:
        raise ValueError("every loss switch is off; nothing to train")
    loss, breakdown = total_loss(streams, cfg.lam, cfg.mu, graph)
    if not np.isfinite(loss.data).all():
        raise TrainingAborted(_dump_batch(state, batch, mixed, breakdown))

    # (5)-(7) backward, AdamW, EMA
    state.student.zero_grad()
    backward(loss, graph)
    lrs = learning_rates(state)
    adamw_step(state.student, state.opt, lrs, cfg.betas, cfg.weight_decay, cfg.adam_eps)
    ema_update(state.teacher, state.student)
    state.step += 1
    state.last_graph = graph
    q = [v[1] for v in pseudo.values()]
    stats = {"q_mean": float(np.mean(q)) if q else None, "lr": lrs[0],
             "n_records": len(graph), "n_mixed": len(mixed)}
    return breakdown, stats


def _half(t, graph):
    from .numerics import scale
    return scale(t, 0.5, graph)


def _dump_batch(state: TrainState, batch: Batch, mixed, breakdown) -> str:
    msg = f"non-finite loss at step {state.step}: {breakdown}"
    if state.cfg.out_dir:
        path = Path(state.cfg.out_dir) / f"abort_step{state.step}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path,
                 sources=np.stack([s.image for s in batch.sources]),
                 labeled=np.stack([s.image for s in batch.labeled]),
                 mixed=np.stack([m.image for m in mixed]) if mixed else np.zeros(0))
        msg += f"; batch dumped to {path}"
    return msg


# --------------------------------------------------------------------------
# full run

@dataclass
class RunReport:
    final_miou: float
    per_class_iou: list[float]
    best_miou: float
    best_step: int
    evals: list[tuple[int, float]]
    losses: list[dict]
    metrics_csv: str
    checkpoints: dict[str, str] = field(default_factory=dict)
    seconds: float = 0.0
    config: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("metrics_csv")
        d.pop("losses")
        return json.dumps(d, indent=2, default=float)


def prepare_split(cfg: TrainConfig, split: DatasetSplit | None = None) -> DatasetSplit:
    if split is None:
        if not cfg.dataset:
            raise FileNotFoundError("no dataset given (set 'dataset' in the config)")
        if not Path(cfg.dataset).is_dir():
            raise FileNotFoundError(f"dataset directory not found: {cfg.dataset}")
        split = load_dataset(cfg.dataset)
    if cfg.n_labeled and cfg.n_labeled != len(split.labeled_target):
        seed = cfg.seed if cfg.split_seed < 0 else cfg.split_seed
        split = resplit(split, cfg.n_labeled, seed)
    return split


def run(cfg: TrainConfig, split: DatasetSplit | None = None, verbose: bool = False) -> RunReport:
    """Train for ``cfg.iters`` steps, evaluating the student every ``eval_every`` steps."""
    cfg.validate()
    t0 = time.perf_counter()
    split = prepare_split(cfg, split)
    state = init_state(cfg, split)
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        config_io.save(cfg, out / "config.resolved")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    evals: list[tuple[int, float]] = []
    losses: list[dict] = []
    best = (-1.0, -1)
    per_class: list[float] = []
    ckpts: dict[str, str] = {}

    def do_eval():
        nonlocal best, per_class
        per_class, m, _ = evaluate(state.student, split.eval_target)
        evals.append((state.step, m))
        if m > best[0]:
            best = (m, state.step)
            if out and cfg.save_checkpoints:
                model.save_checkpoint(state.student, out / "best.ckpt", role="student")
                ckpts["best"] = str(out / "best.ckpt")
        if verbose:
            print(f"step {state.step:5d}/{cfg.iters}  mIoU {100 * m:6.2f}", flush=True)
        return m

    m0 = do_eval()
    writer.writerow([0, "", "", "", "", "", "", "", repr(m0)])
    for _ in range(cfg.iters):
        bd, stats = train_step(state)
        losses.append(bd.as_dict())
        m = do_eval() if (state.step % cfg.eval_every == 0 or state.step == cfg.iters) else None
        writer.writerow([state.step, repr(bd.l_s), repr(bd.l_t), repr(bd.l_inter), repr(bd.l_intra),
                         repr(bd.total), "" if stats["q_mean"] is None else repr(stats["q_mean"]),
                         repr(stats["lr"]), "" if m is None else repr(m)])

    if out:
        (out / "metrics.csv").write_text(buf.getvalue())
        if cfg.save_checkpoints:
            model.save_checkpoint(state.student, out / "final.ckpt", role="student")
            model.save_checkpoint(state.teacher.params, out / "teacher.ckpt", role="teacher")
            ckpts["final"] = str(out / "final.ckpt")
            ckpts["teacher"] = str(out / "teacher.ckpt")
    report = RunReport(
        final_miou=evals[-1][1], per_class_iou=per_class, best_miou=best[0], best_step=best[1],
        evals=evals, losses=losses, metrics_csv=buf.getvalue(), checkpoints=ckpts,
        seconds=time.perf_counter() - t0, config=config_io.dumps(cfg))
    if out:
        (out / "report.json").write_text(report.to_json())
    return report
