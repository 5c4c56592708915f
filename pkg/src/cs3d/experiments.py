"""Experiment matrix: datasets, BoxPC checkpoints and detector runs with caching.

A cell is one (mode, seed, label fraction, relaxation scale, encoder,
objective) combination. Axes that a mode does not use are normalised to the
base config so equivalent cells run once. Datasets are shared per
(seed, label fraction) and BoxPC networks per (seed, label fraction,
encoder, objective).
"""
from __future__ import annotations

import csv
import itertools
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import MODES, ConfigBundle, RunConfig
from .metrics import write_pr_svg
from .synthdata import DataConfig, build_dataset

log = logging.getLogger(__name__)

OBJECTIVES = {"cls+reg": None, "cls": ("w_reg", 0.0), "reg": ("w_cls", 0.0)}
AXES = ("mode", "seed", "label_fraction", "reproj_scale", "encoder", "objective")


@dataclass(frozen=True)
class Cell:
    mode: str
    seed: int = 0
    label_fraction: float = 0.0
    reproj_scale: float = 1.5
    encoder: str = "combined"
    objective: str = "cls+reg"

    @property
    def name(self) -> str:
        return (f"{self.mode}_seed{self.seed}_f{self.label_fraction:g}_s{self.reproj_scale:g}"
                f"_{self.encoder}_{self.objective.replace('+', '')}")


@dataclass
class CellResult:
    cell: Cell
    status: str = "ok"
    error: str = ""
    mean_ap: float = float("nan")
    ap: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    curves: dict = field(default_factory=dict)


def normalise(cell: Cell, base: RunConfig) -> Cell:
    flags = RunConfig(mode=cell.mode, label_fraction=1.0 if cell.mode.startswith("fully") else 0.0).flags
    kw = {}
    if not flags.reproj:
        kw["reproj_scale"] = base.reproj_scale
    if not flags.uses_boxpc:
        kw["encoder"], kw["objective"] = base.encoder, "cls+reg"
    return replace(cell, **kw)


def expand_grid(matrix: dict[str, list[str]], base: RunConfig) -> list[Cell]:
    unknown = set(matrix) - set(AXES)
    if unknown:
        raise ValueError(f"unknown matrix axes: {', '.join(sorted(unknown))}")
    values = {
        "mode": matrix.get("mode", [base.mode]),
        "seed": [int(v) for v in matrix.get("seed", [base.seed])],
        "label_fraction": [float(v) for v in matrix.get("label_fraction", [base.label_fraction])],
        "reproj_scale": [float(v) for v in matrix.get("reproj_scale", [base.reproj_scale])],
        "encoder": matrix.get("encoder", [base.encoder]),
        "objective": matrix.get("objective", ["cls+reg"]),
    }
    for m in values["mode"]:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r} in matrix")
    for o in values["objective"]:
        if o not in OBJECTIVES:
            raise ValueError(f"unknown objective {o!r}; expected one of {', '.join(OBJECTIVES)}")
    cells, seen = [], set()
    for combo in itertools.product(*(values[a] for a in AXES)):
        cell = normalise(Cell(*combo), base)
        if cell.mode.startswith("fully") and cell.label_fraction != 1.0:
            continue  # fully-supervised runs exist only at f = 1
        if cell not in seen:
            seen.add(cell)
            cells.append(cell)
    return cells


class Runner:
    """Runs cells under ``root``, reusing datasets and BoxPC networks across cells."""

    def __init__(self, root, data: DataConfig, base: RunConfig):
        self.root = Path(root)
        self.data, self.base = data, base
        self._splits: dict = {}
        self._boxpc: dict = {}
        self.results: dict[Cell, CellResult] = {}
        self.pretrain_reports: dict = {}

    def run_config(self, cell: Cell) -> RunConfig:
        kw = dict(mode=cell.mode, seed=cell.seed, label_fraction=cell.label_fraction,
                  reproj_scale=cell.reproj_scale, encoder=cell.encoder)
        obj = OBJECTIVES[cell.objective]
        if obj is not None:
            kw[obj[0]] = obj[1]
        return replace(self.base, **kw)

    def dataset(self, seed: int, f: float) -> Path:
        path = self.root / "data" / f"seed{seed}_f{f:g}"
        if not (path / "val" / "samples.jsonl").exists():
            build_dataset(self.data, path, seed=seed, label_fraction=f)
        return path

    def splits(self, run: RunConfig):
        key = (run.seed, run.label_fraction, run.fully_supervised)
        if key not in self._splits:
            path = self.dataset(run.seed, run.label_fraction)
            self._splits[key] = (P.load_train_split(path / "train", run), P.load_eval_split(path / "val"))
        return self._splits[key]

    def boxpc(self, run: RunConfig):
        key = (run.seed, run.label_fraction, run.encoder, run.w_cls, run.w_reg, run.fully_supervised)
        if key not in self._boxpc:
            train, val = self.splits(run)
            net, report = P.pretrain_boxpc(train, run, val)
            self._boxpc[key] = net
            self.pretrain_reports[key] = report
            log.info("boxpc %s auc %.3f (%.0fs)", key, report.auc, report.seconds)
        return self._boxpc[key]

    def run(self, cell: Cell) -> CellResult:
        cell = normalise(cell, self.base)
        if cell in self.results:
            return self.results[cell]
        t0 = time.perf_counter()
        res = CellResult(cell)
        try:
            run = self.run_config(cell)
            train, val = self.splits(run)
            net = self.boxpc(run) if run.flags.uses_boxpc else None
            det, _ = P.train_detector(train, run, net)
            ap = P.evaluate(val, det, run, net if run.flags.refine else None)
            names = {c.class_id: c.name for c in val.classes}
            res.mean_ap = ap.mean_ap
            res.ap = {names[c]: v for c, v in ap.ap.items()}
            res.curves = {names[c]: v for c, v in ap.curves.items()}
        except Exception as e:  # recorded per cell; the matrix carries on
            res.status, res.error = "failed", f"{type(e).__name__}: {e}"
            log.error("cell %s failed\n%s", cell.name, traceback.format_exc())
        res.seconds = time.perf_counter() - t0
        self.results[cell] = res
        return res

    def mean_ap(self, cells: list[Cell]) -> float:
        return float(np.mean([self.run(c).mean_ap for c in cells]))

    def class_ap(self, cells: list[Cell], name: str) -> float:
        return float(np.mean([self.run(c).ap.get(name, float("nan")) for c in cells]))


def write_report(results: list[CellResult], out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = sorted({n for r in results for n in r.ap})
    header = list(AXES) + ["status", "mAP"] + [f"AP_{n}" for n in names] + ["seconds", "error"]
    rows = []
    for r in results:
        c = asdict(r.cell)
        rows.append([c[a] for a in AXES] + [r.status, _fmt(r.mean_ap)] + [_fmt(r.ap.get(n)) for n in names]
                    + [f"{r.seconds:.1f}", r.error])
    with open(out_dir / "matrix.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)] if rows else [len(h) for h in header]
    lines = ["  ".join(str(h).ljust(wd) for h, wd in zip(header, widths))]
    lines.append("  ".join("-" * wd for wd in widths))
    lines += ["  ".join(str(x).ljust(wd) for x, wd in zip(row, widths)) for row in rows]
    (out_dir / "matrix.txt").write_text("\n".join(line.rstrip() for line in lines) + "\n")
    svg_dir = out_dir / "pr"
    svg_dir.mkdir(exist_ok=True)
    for r in results:
        if r.curves:
            write_pr_svg(svg_dir / f"{r.cell.name}.svg", r.curves, title=r.cell.name)
    return {"csv": out_dir / "matrix.csv", "txt": out_dir / "matrix.txt", "svg": svg_dir}


def _fmt(v) -> str:
    return "" if v is None or v != v else f"{v:.4f}"


def run_experiment_matrix(bundle: ConfigBundle, out_dir) -> list[CellResult]:
    """Run every cell of the configured grid and write matrix.csv, matrix.txt and PR SVGs."""
    cells = expand_grid(bundle.matrix, bundle.run)
    runner = Runner(Path(out_dir) / "work", bundle.data, bundle.run)
    results = []
    for i, cell in enumerate(cells):
        log.info("cell %d/%d %s", i + 1, len(cells), cell.name)
        results.append(runner.run(cell))
    write_report(results, out_dir)
    return results


def benchmark_configs() -> tuple[DataConfig, RunConfig]:
    """Desk-scale setting used by the acceptance trends: 128-point frustums, narrow networks."""
    data = DataConfig(n_scenes=400, n_points=128)
    run = RunConfig(epochs=60, batch_size=32, mask_count=64, seg_local=(32, 64), seg_global=(64,),
                    seg_head=(32,), tnet_point=(32, 64), tnet_head=(32,), box_point=(32, 64),
                    box_head=(64,), boxpc_epochs=10)
    return data, run
