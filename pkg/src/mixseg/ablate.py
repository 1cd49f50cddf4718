"""Ablation grids: loss switches, mixing strategies and loss weights.

Each cell is run over several seeds; cells are independent and may run in
parallel worker processes. Results can be memoised on disk, keyed by the
resolved config, the dataset manifest and a hash of this package's source.
"""
from __future__ import annotations

import hashlib
import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import config as config_io
from .config import TrainConfig
from .data import DatasetSplit

GRIDS: dict[str, list[tuple[str, dict]]] = {
    "losses": [
        ("Ls", dict(use_ls=True, use_lt=False, use_inter=False, use_intra=False)),
        ("Lt", dict(use_ls=False, use_lt=True, use_inter=False, use_intra=False)),
        ("Ls+Lt", dict(use_ls=True, use_lt=True, use_inter=False, use_intra=False)),
        ("Lt+Lintra", dict(use_ls=False, use_lt=True, use_inter=False, use_intra=True)),
        ("Ls+Lt+Linter", dict(use_ls=True, use_lt=True, use_inter=True, use_intra=False)),
        ("Ls+Lt+Lintra", dict(use_ls=True, use_lt=True, use_inter=False, use_intra=True)),
        ("Ls+Lt+Linter+Lintra", dict(use_ls=True, use_lt=True, use_inter=True, use_intra=True)),
    ],
    "strategies": [
        ("two_xu_two_streams", dict(strategy="two_xu_two_streams")),
        ("one_xu_one_stream", dict(strategy="one_xu_one_stream")),
        ("one_xu_two_streams", dict(strategy="one_xu_two_streams")),
    ],
    "weights": [
        ("lambda=0.1,mu=1", dict(lam=0.1, mu=1.0)),
        ("lambda=2,mu=1", dict(lam=2.0, mu=1.0)),
        ("lambda=1,mu=1", dict(lam=1.0, mu=1.0)),
        ("lambda=1,mu=2", dict(lam=1.0, mu=2.0)),
        ("lambda=1,mu=0.1", dict(lam=1.0, mu=0.1)),
    ],
}


@dataclass
class CellResult:
    grid: str
    cell: str
    seeds: list[int]
    mious: list[float]
    seconds: list[float] = field(default_factory=list)

    @property
    def median(self) -> float:
        return statistics.median(self.mious)


def max_jobs(requested: int | None = None) -> int:
    cap = os.environ.get("MIXSEG_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _cache_key(cfg: TrainConfig, split: DatasetSplit | None) -> str:
    h = hashlib.sha256()
    h.update(config_io.dumps(cfg.replace(out_dir="")).encode())
    if split is not None:
        h.update(json.dumps(split.manifest, sort_keys=True).encode())
    h.update(source_hash().encode())
    return h.hexdigest()[:24]


def run_one(cfg: TrainConfig, split: DatasetSplit | None = None, cache_dir=None) -> dict:
    """Train one config; returns a JSON-friendly summary (memoised if ``cache_dir``)."""
    from .trainer import run

    path = None
    if cache_dir:
        path = Path(cache_dir) / f"{_cache_key(cfg, split)}.json"
        if path.exists():
            return json.loads(path.read_text())
    r = run(cfg, split)
    out = {"final_miou": r.final_miou, "best_miou": r.best_miou, "per_class": r.per_class_iou,
           "evals": [list(e) for e in r.evals], "seconds": r.seconds, "metrics_csv": r.metrics_csv}
    if path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(out))
    return out


def _worker(args):
    cfg, split, cache_dir = args
    return run_one(cfg, split, cache_dir)


def run_cells(base: TrainConfig, cells: list[tuple[str, dict]], seeds: list[int],
              split: DatasetSplit | None = None, jobs: int | None = None, cache_dir=None,
              out_dir=None, grid: str = "custom") -> list[CellResult]:
    tasks, index = [], []
    for name, overrides in cells:
        for seed in seeds:
            cfg = base.replace(seed=seed, **overrides)
            if out_dir:
                cfg = cfg.replace(out_dir=str(Path(out_dir) / _slug(name) / f"seed{seed}"))
            cfg.validate()
            tasks.append((cfg, split, cache_dir))
            index.append((name, seed))
    n = min(max_jobs(jobs), len(tasks)) if tasks else 1
    if n == 1:
        results = [_worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n) as ex:
            results = list(ex.map(_worker, tasks))
    out = {name: CellResult(grid, name, [], []) for name, _ in cells}
    for (name, seed), res in zip(index, results):
        out[name].seeds.append(seed)
        out[name].mious.append(res["final_miou"])
        out[name].seconds.append(res["seconds"])
    return list(out.values())


def run_grid(grid: str, base: TrainConfig, seeds: list[int], **kw) -> list[CellResult]:
    if grid not in GRIDS:
        raise KeyError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
    return run_cells(base, GRIDS[grid], seeds, grid=grid, **kw)


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name)


def summary_csv(results: list[CellResult]) -> str:
    lines = ["grid,cell,median_miou,seeds,mious"]
    for r in results:
        lines.append(f"{r.grid},{r.cell},{r.median!r},{' '.join(map(str, r.seeds))},"
                     f"{' '.join(repr(m) for m in r.mious)}")
    return "\n".join(lines) + "\n"


def summary_markdown(results: list[CellResult]) -> str:
    lines = ["| cell | median mIoU | runs |", "|---|---:|---:|"]
    for r in results:
        lines.append(f"| {r.cell} | {100 * r.median:.2f} | {len(r.mious)} |")
    return "\n".join(lines) + "\n"
