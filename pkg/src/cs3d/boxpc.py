"""Box-to-point-cloud fit network.

Given a frustum point cloud and a candidate box the network predicts a fit
probability and a 7-vector correction. It is pretrained on labelled classes
with perturbed ground-truth boxes and then used frozen, both as a loss on
predicted boxes and as a refinement step.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import Box3D, iou3d, iou3d_batch, iou3d_upper_bound, normalize_angle, plane_features_t
from .nn import BCE_EPS, DTYPE, MLP, MLPSpec, bce, max_pool, smooth_l1_each

POS, NEG = "pos", "neg"


class UnsatisfiableBoundsError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbBounds:
    alpha_pos: float = 0.7
    beta_pos: float = 1.0
    alpha_neg: float = 0.01
    beta_neg: float = 0.25
    center_range: float = 0.8
    size_range: float = 0.2
    rot_range: tuple[float, float] = (0.0, math.pi)

    def __post_init__(self):
        for v in (self.alpha_pos, self.beta_pos, self.alpha_neg, self.beta_neg):
            if not 0.0 <= v <= 1.0:
                raise ValueError("IoU bounds must lie in [0, 1]")
        if self.alpha_pos > self.beta_pos or self.alpha_neg > self.beta_neg:
            raise ValueError("each IoU interval needs alpha <= beta")
        if not (self.beta_neg < self.alpha_pos or self.beta_pos < self.alpha_neg):
            raise ValueError("positive and negative IoU intervals must be disjoint")

    def interval(self, which: str) -> tuple[float, float]:
        if which == POS:
            return self.alpha_pos, self.beta_pos
        if which == NEG:
            return self.alpha_neg, self.beta_neg
        raise ValueError(f"unknown perturbation set {which!r}")


def perturb(box_params: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return np.asarray(box_params, dtype=np.float64) - delta


def sample_perturbation(box: Box3D, bounds: PerturbBounds, which: str, rng: np.random.Generator,
                        max_attempts: int = 10_000, chunk: int = 512) -> np.ndarray:
    """Rejection-sample one delta whose perturbed box has IoU with ``box`` in the set's interval.

    Candidates are drawn uniformly from the component ranges in chunks; a cheap
    IoU upper bound discards hopeless candidates before the exact test; every
    candidate counts as one attempt.
    """
    lo, hi = bounds.interval(which)
    b = box.to_vector()
    c, s = bounds.center_range, bounds.size_range
    r0, r1 = bounds.rot_range
    tried = 0
    while tried < max_attempts:
        n = min(chunk, max_attempts - tried)
        delta = np.concatenate([rng.uniform(-c, c, (n, 3)), rng.uniform(-s, s, (n, 3)),
                                rng.uniform(r0, r1, (n, 1))], 1)
        cand = b - delta
        ok = (cand[:, 3:6] > 0).all(1) & (iou3d_upper_bound(b[None], cand) >= lo)
        idx = np.nonzero(ok)[0]
        if len(idx):
            iou = iou3d_batch(b[None], cand[idx])
            hit = idx[(iou >= lo) & (iou <= hi)]
            for j in hit:
                # confirm with the exact clipping routine before accepting
                v = iou3d(box, Box3D.from_vector(cand[j]))
                if lo <= v <= hi:
                    return delta[j]
        tried += n
    raise UnsatisfiableBoundsError(
        f"no {which} perturbation in IoU [{lo}, {hi}] after {max_attempts} attempts for box {b.tolist()}")


def encode_boxpc(points, box_params) -> torch.Tensor:
    """(…, N, 3+k) points and (…, 7) boxes -> (…, N, 9+k) box-combined cloud.

    Columns: xyz relative to the box center, six signed face distances
    (top, bottom, +w, -w, +l, -l), then the extra channels unchanged.
    """
    pts = torch.as_tensor(points, dtype=DTYPE)
    params = torch.as_tensor(box_params, dtype=DTYPE)
    xyz = pts[..., :3]
    rel = xyz - params[..., None, :3]
    planes = plane_features_t(xyz, params)
    return torch.cat([rel, planes, pts[..., 3:]], -1)


@dataclass(frozen=True)
class BoxPCConfig:
    mode: str = "combined"  # combined | independent
    k: int = 0
    n_classes: int = 0  # one-hot width appended to pooled features; 0 disables
    point: tuple[int, ...] = (64, 128, 256)
    box: tuple[int, ...] = (64, 64)  # independent mode only
    head: tuple[int, ...] = (128, 64)

    def __post_init__(self):
        if self.mode not in ("combined", "independent"):
            raise ValueError(f"unknown BoxPC encoder mode {self.mode!r}")

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_json(cls, d) -> "BoxPCConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class BoxPCNet(nn.Module):
    def __init__(self, config: BoxPCConfig):
        super().__init__()
        self.config = config
        combined = config.mode == "combined"
        in_w = (9 if combined else 3) + config.k
        self.point = MLP(MLPSpec((in_w, *config.point)))
        feat_w = config.point[-1]
        if not combined:
            self.box = MLP(MLPSpec((7, *config.box)))
            feat_w += config.box[-1]
        feat_w += config.n_classes
        self.trunk = MLP(MLPSpec((feat_w, *config.head)))
        self.cls_head = MLP(MLPSpec((config.head[-1], 1), out_act="sigmoid"))
        self.reg_head = MLP(MLPSpec((config.head[-1], 7), out_act="none"))

    def forward(self, points, box_params, one_hot=None):
        pts = torch.as_tensor(points, dtype=DTYPE)
        params = torch.as_tensor(box_params, dtype=DTYPE)
        if self.config.mode == "combined":
            feat = max_pool(self.point(encode_boxpc(pts, params)))
        else:
            feat = torch.cat([max_pool(self.point(pts)), self.box(params)], -1)
        if self.config.n_classes:
            if one_hot is None:
                raise ValueError("this BoxPC network expects a one-hot class vector")
            feat = torch.cat([feat, torch.as_tensor(one_hot, dtype=DTYPE).expand(*feat.shape[:-1], -1)], -1)
        h = self.trunk(feat)
        return self.cls_head(h).squeeze(-1), self.reg_head(h)

    def manifest(self) -> dict:
        return {"boxpc": self.config.to_json()}


def boxpc_forward(points, box_params, net: BoxPCNet, one_hot=None):
    return net(points, box_params, one_hot)


def correction_target(delta) -> torch.Tensor:
    """The correction that undoes ``delta``, heading taken modulo a half turn.

    A box and its copy turned by pi have the same corners, so a heading offset
    is only defined up to pi; the target uses the representative in [-pi/2, pi/2).
    """
    target = torch.as_tensor(delta, dtype=DTYPE).clone()
    target[..., 6] = torch.remainder(target[..., 6] + 0.5 * math.pi, math.pi) - 0.5 * math.pi
    return target


def boxpc_pretrain_loss(points, box_star, delta, is_pos, net: BoxPCNet, w_cls: float = 1.0,
                        w_reg: float = 4.0, one_hot=None) -> torch.Tensor:
    """w_cls * BCE(fit label, p) + w_reg * smoothL1(correction target, predicted correction), batch mean."""
    box_star = torch.as_tensor(box_star, dtype=DTYPE)
    delta = torch.as_tensor(delta, dtype=DTYPE)
    p, corr = net(points, box_star - delta, one_hot)
    target = torch.as_tensor(is_pos, dtype=DTYPE).expand_as(p)
    loss = torch.zeros((), dtype=DTYPE)
    if w_cls:
        loss = loss + w_cls * bce(target, p)
    if w_reg:
        loss = loss + w_reg * smooth_l1_each(correction_target(delta), corr).sum(-1).mean()
    return loss


@contextmanager
def frozen(net: nn.Module):
    """Disable parameter gradients for the duration of the block."""
    flags = [p.requires_grad for p in net.parameters()]
    for p in net.parameters():
        p.requires_grad_(False)
    try:
        yield net
    finally:
        for p, f in zip(net.parameters(), flags):
            p.requires_grad_(f)


def fit_loss_weak(points, box0, net: BoxPCNet, one_hot=None) -> torch.Tensor:
    """Mean of -log p(X, B0); gradients reach B0 only."""
    with frozen(net):
        p, _ = net(points, box0, one_hot)
    return -torch.log(p.clamp(BCE_EPS, 1.0 - BCE_EPS)).mean()


def refine_params(points, box0, net: BoxPCNet, one_hot=None) -> np.ndarray:
    """Batched refinement B = B0 + correction, heading wrapped, sizes floored at 1e-3."""
    with torch.no_grad():
        _, corr = net(points, box0, one_hot)
        out = torch.as_tensor(box0, dtype=DTYPE) + corr
    out = out.numpy().copy()
    out[..., 3:6] = np.maximum(out[..., 3:6], 1e-3)
    out[..., 6] = normalize_angle(out[..., 6])
    return out


def refine_box(points, box0: Box3D, net: BoxPCNet, one_hot=None) -> Box3D:
    return Box3D.from_vector(refine_params(points, box0.to_vector(), net, one_hot))


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties share ranks)."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
