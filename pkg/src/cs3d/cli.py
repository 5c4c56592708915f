"""Command line entry point: gen, pretrain-boxpc, train, eval, matrix."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline as P
from .config import MODES, load_config
from .experiments import run_experiment_matrix, write_report
from .metrics import write_metrics
from .synthdata import build_dataset, read_meta


def _bundle(args):
    return load_config(getattr(args, "config", None))


def _run_for_data(run, data_dir: Path, mode: str | None = None):
    meta = read_meta(data_dir / "train")
    kw = {"label_fraction": float(meta.get("label_fraction", 0.0))}
    if mode is not None:
        kw["mode"] = mode
    return replace(run, **kw)


def cmd_gen(args) -> int:
    bundle = _bundle(args)
    seed = args.seed if args.seed is not None else bundle.data.seed
    f = args.label_fraction if args.label_fraction is not None else bundle.data.label_fraction
    paths = build_dataset(bundle.data, args.out, seed=seed, label_fraction=f)
    for split, path in paths.items():
        n = sum(1 for _ in open(path / "samples.jsonl"))
        print(f"{split}: {n} samples -> {path}")
    return 0


def cmd_pretrain(args) -> int:
    bundle = _bundle(args)
    data = Path(args.data)
    run = _run_for_data(bundle.run, data)
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    train = P.load_train_split(data / "train", run)
    val = P.load_eval_split(data / "val") if (data / "val").exists() else None
    net, report = P.pretrain_boxpc(train, run, val)
    P.save_boxpc(args.out, net, run, report)
    print(f"boxpc: {report.n_train} boxes, final loss {report.history[-1]:.4f}, "
          f"held-out AUC {report.auc:.4f} on {report.n_val} boxes -> {args.out}")
    return 0


def cmd_train(args) -> int:
    bundle = _bundle(args)
    data = Path(args.data)
    run = _run_for_data(bundle.run, data, args.mode)
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    net = P.load_boxpc(args.boxpc) if args.boxpc else None
    if net is not None and not run.flags.uses_boxpc:
        logging.getLogger(__name__).warning("mode %s does not use BoxPC; ignoring --boxpc", run.mode)
        net = None
    train = P.load_train_split(data / "train", run)
    det, hist = P.train_detector(train, run, net)
    P.save_detector(args.out, det, run, hist)
    print(f"trained {run.mode}: {hist.n_strong_steps} strong / {hist.n_weak_steps} weak steps, "
          f"{hist.seconds:.1f}s -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    bundle = _bundle(args)
    data = Path(args.data)
    det, extra = P.load_detector(args.ckpt)
    run = _run_for_data(bundle.run, data, extra.get("mode", bundle.run.mode))
    run = replace(run, **{k: extra[k] for k in ("mask_threshold", "mask_min_points", "mask_count") if k in extra})
    net = P.load_boxpc(args.boxpc) if args.boxpc else None
    if run.flags.refine and net is None:
        raise ValueError(f"mode {run.mode} refines with BoxPC; pass --boxpc")
    val = P.load_eval_split(data / "val")
    result = P.evaluate(val, det, run, net if run.flags.refine else None)
    names = {c.class_id: c.name for c in val.classes}
    write_metrics(result, args.out, names)
    aps = ", ".join(f"{names[c]} {v:.4f}" for c, v in result.ap.items())
    print(f"mAP@{run.iou_threshold:g} {result.mean_ap:.4f} ({aps}) -> {args.out}")
    return 0


def cmd_matrix(args) -> int:
    bundle = _bundle(args)
    results = run_experiment_matrix(bundle, args.out)
    failed = [r for r in results if r.status != "ok"]
    print(f"{len(results)} cells, {len(failed)} failed -> {Path(args.out) / 'matrix.csv'}")
    print((Path(args.out) / "matrix.txt").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cs3d", description="Cross-category semi-supervised 3D box detection")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--label-fraction", type=float)
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("pretrain-boxpc", help="pretrain the box/point-cloud fit network")
    b.add_argument("--data", required=True)
    b.add_argument("--config")
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="train the detector")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=MODES, required=True)
    t.add_argument("--boxpc")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a detector checkpoint on the val split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--boxpc")
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("matrix", help="run the configured experiment grid")
    m.add_argument("--config", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_matrix)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
