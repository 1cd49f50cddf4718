"""Command line: gen-data, train, eval, ablate, panel, selfcheck.

Exit codes: 0 success, 1 user/config error, 2 runtime abort.
"""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import ablate, data, model
from . import config as config_io
from .config import ConfigError, TrainConfig
from .data import CLASS_NAMES, DatasetError
from .metrics import evaluate, format_table
from .model import CheckpointError

# class colours used by panels; IGNORE renders white
PALETTE = np.array([
    [0, 0, 0],        # background
    [230, 25, 75],    # circle
    [60, 180, 75],    # square
    [0, 130, 200],    # triangle
    [255, 225, 25],   # stripe-bar
], dtype=np.uint8)
GUTTER = 4


class UserError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    for f in fields(TrainConfig):
        key = config_io.KEY_FOR_FIELD.get(f.name, f.name)
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE",
                       help=f"override '{key}'")


def _resolve_config(args) -> TrainConfig:
    cfg = config_io.load(args.config) if args.config else TrainConfig()
    changes = {}
    for f in fields(TrainConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            changes[f.name] = config_io.parse_value(config_io.KEY_FOR_FIELD.get(f.name, f.name), raw)
    return cfg.replace(**changes).validate()


def colorize(label: np.ndarray) -> np.ndarray:
    rgb = np.full(label.shape + (3,), 255, dtype=np.uint8)
    ok = label < len(PALETTE)
    rgb[ok] = PALETTE[label[ok]]
    return rgb


def make_panel(image: np.ndarray, truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """image | truth | prediction, each followed by a white gutter."""
    H, W = truth.shape
    panel = np.full((H, 3 * (W + GUTTER), 3), 255, dtype=np.uint8)
    for k, tile in enumerate((data.to_rgb8(image), colorize(truth), colorize(pred))):
        x0 = k * (W + GUTTER)
        panel[:, x0:x0 + W] = tile
    return panel


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UserError(f"{out} exists and is not empty (use --force to overwrite)")
    if args.n_labeled >= args.n_target:
        raise UserError("--n-labeled must be smaller than --n-target")
    split = data.make_split(args.n_source, args.n_target, args.n_eval, args.n_labeled,
                            seed=args.seed, size=args.size)
    data.save_dataset(split, out, with_hidden_labels=args.with_hidden_labels)
    print(f"wrote {len(split.source)} source, {len(split.labeled_target)} labeled target, "
          f"{len(split.unlabeled_target)} unlabeled target, {len(split.eval_target)} eval to {out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import run

    cfg = _resolve_config(args)
    if not cfg.out_dir:
        cfg = cfg.replace(out_dir=str(Path("runs") / time.strftime("%Y%m%d-%H%M%S")))
    if not cfg.dataset or not Path(cfg.dataset).is_dir():
        raise UserError(f"dataset not found: {cfg.dataset or '(unset)'}")
    report = run(cfg, verbose=True)
    print(format_table(report.per_class_iou, report.final_miou, CLASS_NAMES))
    print(f"run directory: {cfg.out_dir}")
    return 0


def _load_ckpt_for(path, split) -> model.Params:
    params, _role = model.load_checkpoint(path)
    if params.num_classes != data.NUM_CLASSES:
        raise UserError(f"checkpoint has {params.num_classes} classes, dataset has {data.NUM_CLASSES}")
    if split.eval_target and params.in_channels != split.eval_target[0].image.shape[0]:
        raise UserError("checkpoint input channels do not match dataset images")
    return params


def cmd_eval(args) -> int:
    split = data.load_dataset(args.dataset)
    params = _load_ckpt_for(args.checkpoint, split)
    samples = getattr(split, args.subset)
    if not samples or samples[0].label is None:
        raise UserError(f"subset {args.subset} has no labels to evaluate against")
    per_class, mean, _ = evaluate(params, samples)
    print(format_table(per_class, mean, CLASS_NAMES))
    header = "checkpoint,subset," + ",".join(CLASS_NAMES) + ",miou"
    row = f"{args.checkpoint},{args.subset}," + ",".join(
        "" if np.isnan(v) else f"{v:.6f}" for v in per_class) + f",{mean:.6f}"
    print(header)
    print(row)
    if args.csv:
        p = Path(args.csv)
        new = not p.exists()
        with p.open("a") as fh:
            if new:
                fh.write(header + "\n")
            fh.write(row + "\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    if not cfg.dataset or not Path(cfg.dataset).is_dir():
        raise UserError(f"dataset not found: {cfg.dataset or '(unset)'}")
    if args.grid not in ablate.GRIDS:
        raise UserError(f"unknown grid {args.grid!r}; choose from {sorted(ablate.GRIDS)}")
    split = data.load_dataset(cfg.dataset)
    out = Path(args.out or f"ablate-{args.grid}")
    out.mkdir(parents=True, exist_ok=True)
    config_io.save(cfg, out / "config.resolved")
    seeds = [cfg.seed + k for k in range(args.seeds)]
    results = ablate.run_grid(args.grid, cfg, seeds, split=split, jobs=args.jobs,
                              out_dir=out / "runs")
    (out / "summary.csv").write_text(ablate.summary_csv(results))
    md = ablate.summary_markdown(results)
    (out / "summary.md").write_text(md)
    print(md)
    return 0


def cmd_panel(args) -> int:
    split = data.load_dataset(args.dataset)
    params = _load_ckpt_for(args.checkpoint, split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = split.eval_target[: args.limit] if args.limit else split.eval_target
    for s in samples:
        pred = model.predict(params, s.image[None].astype(np.float32))[0].astype(np.uint8)
        data.write_ppm(out / f"{s.id:04d}.ppm", make_panel(s.image, s.label, pred))
    legend = "\n".join(f"- {n}: RGB{tuple(int(v) for v in PALETTE[k])}" for k, n in enumerate(CLASS_NAMES))
    (out / "README.md").write_text(
        "# Prediction panels\n\nEach panel is image | ground truth | prediction, "
        f"each tile followed by a {GUTTER}px white gutter.\n\nClass colours:\n\n{legend}\n"
        "- ignore: RGB(255, 255, 255)\n")
    print(f"wrote {len(samples)} panels to {out}")
    return 0


def cmd_selfcheck(args) -> int:
    from . import selfcheck

    t0 = time.perf_counter()
    results = selfcheck.run_all(seed=args.seed)
    n_fail = sum(not ok for ok in results.values())
    print(f"{len(results) - n_fail}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return 0 if n_fail == 0 else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the ToyShift benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-source", type=int, default=500)
    g.add_argument("--n-target", type=int, default=500)
    g.add_argument("--n-eval", type=int, default=100)
    g.add_argument("--n-labeled", type=int, default=8)
    g.add_argument("--size", type=int, default=data.DEFAULT_SIZE)
    g.add_argument("--with-hidden-labels", action="store_true",
                   help="also write labels of unlabeled target images (enables re-splitting)")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--subset", default="eval_target",
                   choices=["eval_target", "labeled_target", "source"])
    e.add_argument("--csv", help="append the CSV row to this file")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--grid", required=True)
    a.add_argument("--seeds", type=int, default=1)
    a.add_argument("--jobs", type=int, default=None)
    a.add_argument("--out")
    _add_config_flags(a)
    a.set_defaults(func=cmd_ablate)

    pn = sub.add_parser("panel", help="write image | truth | prediction panels")
    pn.add_argument("--checkpoint", required=True)
    pn.add_argument("--dataset", required=True)
    pn.add_argument("--out", required=True)
    pn.add_argument("--limit", type=int, default=0)
    pn.set_defaults(func=cmd_panel)

    s = sub.add_parser("selfcheck", help="gradient checks and equation oracles")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    from .trainer import TrainingAborted

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UserError, ConfigError, DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
