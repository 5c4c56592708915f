"""Frustum detector: class-agnostic segmentation and anchor-based box estimation.

Box head layout (length 3 + 4*NS + 2*NH):

    [center delta (3) | size logits (NS) | size residuals (NS*3) |
     heading logits (NH) | heading residuals (NH)]

Size residuals are relative to the anchor (size = anchor * (1 + r)); heading
residuals are in units of half a bin width (heading = bin center + r*pi/NH).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import geometry
from .geometry import Box3D
from .nn import DTYPE, MLP, MLPSpec, bce, max_pool, smooth_l1_each

MIN_SIZE = 1e-3

SUN_BOX_WEIGHTS = {"c1_reg": 0.1, "c2_reg": 0.1, "r_cls": 0.1, "r_reg": 2.0,
                   "s_cls": 0.1, "s_reg": 2.0, "corner": 0.1}


@dataclass
class AnchorConfig:
    sizes: np.ndarray  # NS x 3 mean (h, w, l)
    n_heading: int = 12

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.float64).reshape(-1, 3)
        if len(self.sizes) < 1 or self.n_heading < 2:
            raise ValueError("need NS >= 1 and NH >= 2")
        if (self.sizes <= 0).any():
            raise ValueError("anchor sizes must be positive")

    @property
    def n_size(self) -> int:
        return len(self.sizes)

    @property
    def head_width(self) -> int:
        return 3 + 4 * self.n_size + 2 * self.n_heading

    @property
    def bin_width(self) -> float:
        return 2 * math.pi / self.n_heading

    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.n_heading) + 0.5) * self.bin_width - math.pi

    def to_json(self) -> dict:
        return {"sizes": self.sizes.tolist(), "n_heading": self.n_heading}

    @classmethod
    def from_json(cls, d) -> "AnchorConfig":
        return cls(np.asarray(d["sizes"]), d["n_heading"])


def encode_box(box: Box3D, anchors: AnchorConfig, size_index: int | None = None):
    """Inverse of decoding: (size index, size residual (3,), heading bin, heading residual)."""
    size = np.asarray(box.size)
    if size_index is None:
        size_index = int(np.argmin(np.abs(np.log(anchors.sizes / size)).sum(1)))
    size_res = size / anchors.sizes[size_index] - 1.0
    bw = anchors.bin_width
    hb = min(int((box.heading + math.pi) // bw), anchors.n_heading - 1)
    head_res = (box.heading - anchors.bin_centers()[hb]) / (0.5 * bw)
    return size_index, size_res, hb, head_res


@dataclass
class BoxOutput:
    centroid: torch.Tensor  # (B, 3) mask centroid (constant)
    tnet_center: torch.Tensor  # (B, 3) centroid + T-Net residual
    center: torch.Tensor  # (B, 3) tnet_center + head delta
    size_logits: torch.Tensor  # (B, NS)
    size_res: torch.Tensor  # (B, NS, 3)
    head_logits: torch.Tensor  # (B, NH)
    head_res: torch.Tensor  # (B, NH)
    raw: torch.Tensor  # (B, 3 + 4NS + 2NH)


def split_head(raw: torch.Tensor, centroid: torch.Tensor, tnet_center: torch.Tensor,
               anchors: AnchorConfig) -> BoxOutput:
    ns, nh = anchors.n_size, anchors.n_heading
    i = 3
    size_logits = raw[..., i:i + ns]; i += ns
    size_res = raw[..., i:i + 3 * ns].reshape(*raw.shape[:-1], ns, 3); i += 3 * ns
    head_logits = raw[..., i:i + nh]; i += nh
    head_res = raw[..., i:i + nh]
    return BoxOutput(centroid, tnet_center, tnet_center + raw[..., :3], size_logits, size_res,
                     head_logits, head_res, raw)


def decode_params(out: BoxOutput, anchors: AnchorConfig, size_index=None, head_index=None):
    """Differentiable decode to (B, 7) box parameters.

    Anchor selection uses argmax unless ground-truth indices are given (the
    soft training variant); residuals and center stay differentiable.
    Returns the parameters and the number of clamped sizes.
    """
    if size_index is None:
        size_index = out.size_logits.argmax(-1)
    if head_index is None:
        head_index = out.head_logits.argmax(-1)
    size_index = torch.as_tensor(size_index, dtype=torch.long)
    head_index = torch.as_tensor(head_index, dtype=torch.long)
    sizes = torch.as_tensor(anchors.sizes, dtype=out.raw.dtype)
    res = out.size_res.gather(-2, size_index[..., None, None].expand(*size_index.shape, 1, 3)).squeeze(-2)
    size = sizes[size_index] * (1.0 + res)
    n_clamped = int((size <= MIN_SIZE).sum())
    size = size.clamp(min=MIN_SIZE)
    centers = torch.as_tensor(anchors.bin_centers(), dtype=out.raw.dtype)
    hres = out.head_res.gather(-1, head_index[..., None]).squeeze(-1)
    heading = geometry.normalize_angle_t(centers[head_index] + hres * (math.pi / anchors.n_heading))
    return torch.cat([out.center, size, heading[..., None]], -1), n_clamped


def decode_box(head, anchors: AnchorConfig, center) -> Box3D:
    """Decode one flattened head; ``center`` is the accumulated centroid + T-Net center."""
    raw = torch.as_tensor(np.asarray(head, dtype=np.float64))[None]
    c = torch.as_tensor(np.asarray(center, dtype=np.float64))[None]
    params, _ = decode_params(split_head(raw, c, c, anchors), anchors)
    return Box3D.from_vector(params[0].detach().numpy())


def _corner_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    pc = geometry.corners_t(pred)
    flip = gt.clone()
    flip[..., 6] = flip[..., 6] + math.pi
    a = smooth_l1_each(geometry.corners_t(gt), pc).sum((-1, -2))
    b = smooth_l1_each(geometry.corners_t(flip), pc).sum((-1, -2))
    return torch.minimum(a, b)


def box_loss_terms(out: BoxOutput, gt: torch.Tensor, gt_size_index, anchors: AnchorConfig) -> dict:
    """Unweighted per-term strong losses, each averaged over the batch."""
    gt = torch.as_tensor(gt, dtype=out.raw.dtype)
    si = torch.as_tensor(gt_size_index, dtype=torch.long)
    sizes = torch.as_tensor(anchors.sizes, dtype=gt.dtype)
    gt_size_res = gt[..., 3:6] / sizes[si] - 1.0
    bw = anchors.bin_width
    hi = torch.clamp(torch.div(gt[..., 6] + math.pi, bw, rounding_mode="floor").long(), 0, anchors.n_heading - 1)
    centers = torch.as_tensor(anchors.bin_centers(), dtype=gt.dtype)
    gt_head_res = (gt[..., 6] - centers[hi]) / (0.5 * bw)

    pred_size_res = out.size_res.gather(-2, si[..., None, None].expand(*si.shape, 1, 3)).squeeze(-2)
    pred_head_res = out.head_res.gather(-1, hi[..., None]).squeeze(-1)
    pred, _ = decode_params(out, anchors, si, hi)
    return {
        "c1_reg": smooth_l1_each(gt[..., :3], out.tnet_center).sum(-1).mean(),
        "c2_reg": smooth_l1_each(gt[..., :3], out.center).sum(-1).mean(),
        "r_cls": -torch.log_softmax(out.head_logits, -1).gather(-1, hi[..., None]).mean(),
        "r_reg": smooth_l1_each(gt_head_res, pred_head_res).mean(),
        "s_cls": -torch.log_softmax(out.size_logits, -1).gather(-1, si[..., None]).mean(),
        "s_reg": smooth_l1_each(gt_size_res, pred_size_res).sum(-1).mean(),
        "corner": _corner_loss(pred, gt).mean(),
    }


def box_loss_strong(out: BoxOutput, gt, gt_size_index, anchors: AnchorConfig,
                    weights: dict | None = None) -> torch.Tensor:
    weights = SUN_BOX_WEIGHTS if weights is None else weights
    terms = box_loss_terms(out, gt, gt_size_index, anchors)
    return sum(weights[k] * v for k, v in terms.items())


def seg_loss(probs: torch.Tensor, mask) -> torch.Tensor:
    """Point-wise BCE averaged over points, summed over the samples of the batch."""
    mask = torch.as_tensor(mask, dtype=probs.dtype)
    if probs.dim() == 1:
        return bce(mask, probs)
    return sum(bce(mask[i], probs[i]) for i in range(probs.shape[0]))


def point_centroid(xyz: torch.Tensor) -> torch.Tensor:
    """Mean over the point axis, summed in sorted order so it is exactly permutation invariant."""
    return torch.sort(xyz, dim=-2).values.mean(-2)


def mask_and_center(points, probs, threshold: float = 0.5, min_points: int = 8, count: int = 256):
    """Select likely-foreground points, resample to ``count`` rows and center them.

    Works on (N, D) or (B, N, D). Selection carries no gradient. Resampling is
    deterministic: evenly spaced rows when enough points survive, cyclic
    repetition otherwise. The centroid is the mean xyz of the returned rows.
    """
    pts = torch.as_tensor(points, dtype=DTYPE)
    pr = torch.as_tensor(probs, dtype=DTYPE).detach()
    single = pts.dim() == 2
    if single:
        pts, pr = pts[None], pr[None]
    out = []
    for b in range(pts.shape[0]):
        keep = torch.nonzero(pr[b] >= threshold).squeeze(-1)
        if len(keep) < min_points:
            keep = torch.arange(pts.shape[1])
        n = len(keep)
        if n >= count:
            rows = keep[torch.from_numpy(np.linspace(0, n - 1, count).round().astype(np.int64))]
        else:
            rows = keep[torch.arange(count) % n]
        out.append(pts[b, rows].detach())
    sel = torch.stack(out)
    centroid = point_centroid(sel[..., :3])
    centered = sel.clone()
    centered[..., :3] = centered[..., :3] - centroid[..., None, :]
    if single:
        return centered[0], centroid[0]
    return centered, centroid


@dataclass(frozen=True)
class DetectorConfig:
    k: int = 0
    n_classes: int = 5
    seg_onehot: bool = False
    box_onehot: bool = True
    seg_local: tuple[int, ...] = (32, 64)
    seg_global: tuple[int, ...] = (128,)
    seg_head: tuple[int, ...] = (64,)
    tnet_point: tuple[int, ...] = (32, 64)
    tnet_head: tuple[int, ...] = (32,)
    box_point: tuple[int, ...] = (32, 64, 128)
    box_head: tuple[int, ...] = (64,)

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_json(cls, d) -> "DetectorConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class Detector(nn.Module):
    def __init__(self, config: DetectorConfig, anchors: AnchorConfig):
        super().__init__()
        self.config, self.anchors = config, anchors
        d = 3 + config.k
        oh_seg = config.n_classes if config.seg_onehot else 0
        oh_box = config.n_classes if config.box_onehot else 0
        self.seg_local = MLP(MLPSpec((d, *config.seg_local)))
        self.seg_global = MLP(MLPSpec((config.seg_local[-1], *config.seg_global)))
        self.seg_head = MLP(MLPSpec((config.seg_local[-1] + config.seg_global[-1] + oh_seg,
                                     *config.seg_head, 1), out_act="sigmoid"))
        self.tnet_point = MLP(MLPSpec((d, *config.tnet_point)))
        self.tnet_head = MLP(MLPSpec((config.tnet_point[-1] + oh_box, *config.tnet_head, 3), out_act="none"))
        self.box_point = MLP(MLPSpec((d, *config.box_point)))
        self.box_head = MLP(MLPSpec((config.box_point[-1] + oh_box, *config.box_head, anchors.head_width),
                                    out_act="none"))

    def seg_parameters(self):
        for m in (self.seg_local, self.seg_global, self.seg_head):
            yield from m.parameters()

    def box_parameters(self):
        for m in (self.tnet_point, self.tnet_head, self.box_point, self.box_head):
            yield from m.parameters()

    def _onehot(self, one_hot, enabled: bool, batch_shape):
        if not enabled:
            return None
        if one_hot is None:
            raise ValueError("this network expects a one-hot class vector")
        return torch.as_tensor(one_hot, dtype=DTYPE).expand(*batch_shape, self.config.n_classes)

    def seg_forward(self, x, one_hot=None) -> torch.Tensor:
        """Per-point foreground probability, (..., N)."""
        x = torch.as_tensor(x, dtype=DTYPE)
        local = self.seg_local(x)
        glob = max_pool(self.seg_global(local))
        oh = self._onehot(one_hot, self.config.seg_onehot, glob.shape[:-1])
        if oh is not None:
            glob = torch.cat([glob, oh], -1)
        feat = torch.cat([local, glob.unsqueeze(-2).expand(*local.shape[:-1], glob.shape[-1])], -1)
        return self.seg_head(feat).squeeze(-1)

    def box_forward(self, points, one_hot=None, centroid=None) -> BoxOutput:
        """T-Net then box net on masked points.

        If ``centroid`` is None the points are absolute and are centered here;
        otherwise they are already centered on ``centroid``.
        """
        pts = torch.as_tensor(points, dtype=DTYPE)
        if centroid is None:
            centroid = point_centroid(pts[..., :3]).detach()
            pts = pts.clone()
            pts[..., :3] = pts[..., :3] - centroid[..., None, :]
        centroid = torch.as_tensor(centroid, dtype=DTYPE)
        oh = self._onehot(one_hot, self.config.box_onehot, pts.shape[:-2])

        feat = max_pool(self.tnet_point(pts))
        if oh is not None:
            feat = torch.cat([feat, oh], -1)
        delta = self.tnet_head(feat)
        shifted = torch.cat([pts[..., :3] - delta[..., None, :], pts[..., 3:]], -1)
        feat = max_pool(self.box_point(shifted))
        if oh is not None:
            feat = torch.cat([feat, oh], -1)
        raw = self.box_head(feat)
        return split_head(raw, centroid, centroid + delta, self.anchors)

    def manifest(self) -> dict:
        return {"detector": self.config.to_json(), "anchors": self.anchors.to_json()}

    @classmethod
    def from_manifest(cls, d) -> "Detector":
        return cls(DetectorConfig.from_json(d["detector"]), AnchorConfig.from_json(d["anchors"]))
