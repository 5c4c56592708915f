"""Average precision at a 3D IoU threshold, plus PR-curve writers."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box3D, iou3d

log = logging.getLogger(__name__)


@dataclass
class Detection:
    class_id: int
    box: Box3D
    score: float
    scene_id: int = -1

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass
class GroundTruth:
    class_id: int
    box: Box3D
    scene_id: int = -1


@dataclass
class APResult:
    ap: dict[int, float]
    curves: dict[int, tuple[np.ndarray, np.ndarray]]  # class -> (recall, precision)
    n_gt: dict[int, int] = field(default_factory=dict)
    n_det: dict[int, int] = field(default_factory=dict)

    @property
    def mean_ap(self) -> float:
        return float(np.mean(list(self.ap.values()))) if self.ap else float("nan")


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated AP: area under the monotone precision envelope."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def match_detections(dets: list[Detection], gts: list[GroundTruth], threshold: float) -> np.ndarray:
    """Greedy matching in descending score order; returns TP flags in that order.

    Each detection takes the still-unmatched ground truth (same scene) with
    the highest IoU, provided that IoU reaches ``threshold``.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    by_scene: dict[int, list[int]] = {}
    for j, g in enumerate(gts):
        by_scene.setdefault(g.scene_id, []).append(j)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        best, best_j = -1.0, -1
        for j in by_scene.get(dets[i].scene_id, []):
            if used[j]:
                continue
            v = iou3d(dets[i].box, gts[j].box)
            if v >= threshold and v > best:
                best, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
            tp[rank] = True
    return tp


def evaluate_ap(detections: list[Detection], ground_truths: list[GroundTruth], threshold: float = 0.25,
                classes=None) -> APResult:
    if classes is None:
        classes = sorted({g.class_id for g in ground_truths} | {d.class_id for d in detections})
    result = APResult({}, {})
    for c in classes:
        dets = [d for d in detections if d.class_id == c]
        gts = [g for g in ground_truths if g.class_id == c]
        result.n_gt[c], result.n_det[c] = len(gts), len(dets)
        if not gts:
            log.warning("class %s has no ground truth; AP undefined and excluded from mAP", c)
            continue
        tp = match_detections(dets, gts, threshold)
        ctp = np.cumsum(tp)
        cfp = np.cumsum(~tp)
        recall = ctp / len(gts)
        precision = ctp / np.maximum(ctp + cfp, 1)
        result.curves[c] = (recall, precision)
        result.ap[c] = average_precision(recall, precision) if len(dets) else 0.0
    return result


def write_metrics(result: APResult, out_dir, names: dict[int, str] | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = names or {}
    with open(out_dir / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class_id", "class", "n_gt", "n_det", "ap"])
        for c in sorted(result.n_gt):
            ap = result.ap.get(c)
            w.writerow([c, names.get(c, str(c)), result.n_gt[c], result.n_det[c],
                        "" if ap is None else f"{ap:.6f}"])
        w.writerow(["", "mAP", "", "", f"{result.mean_ap:.6f}"])
    for c, (rec, prec) in result.curves.items():
        label = names.get(c, str(c))
        with open(out_dir / f"pr_{label}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["recall", "precision"])
            for r, p in zip(rec, prec):
                w.writerow([f"{r:.6f}", f"{p:.6f}"])
        write_pr_svg(out_dir / f"pr_{label}.svg", {label: (rec, prec)}, title=f"PR {label}")
    return out_dir / "metrics.csv"


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"]


def write_pr_svg(path, curves: dict[str, tuple[np.ndarray, np.ndarray]], title: str = "") -> Path:
    """Minimal dependency-free SVG line plot of precision against recall."""
    size, pad = 320, 40
    span = size - 2 * pad

    def xy(r, p):
        return pad + r * span, size - pad - p * span

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#444"/>',
             f'<text x="{size / 2}" y="{pad / 2}" text-anchor="middle" font-size="12">{title}</text>',
             f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="11">recall</text>',
             f'<text x="12" y="{size / 2}" font-size="11" transform="rotate(-90 12 {size / 2})">precision</text>']
    for i, (label, (rec, prec)) in enumerate(curves.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join("%.2f,%.2f" % xy(r, p) for r, p in zip(np.r_[0.0, rec], np.r_[1.0, prec]))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{pad + 6}" y="{pad + 14 + 13 * i}" font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path
