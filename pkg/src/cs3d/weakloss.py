"""Losses that supervise 3D boxes of weak classes from 2D labels and size priors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import Box2D, Camera, project_params_t
from .nn import DTYPE, smooth_l1_each


@dataclass(frozen=True)
class ReprojBounds:
    """Per-coordinate admissible band between a lower and an upper 2D box."""

    lower: np.ndarray  # (..., 4) [left, top, right, bottom]
    upper: np.ndarray

    @classmethod
    def from_scale(cls, box2d, scale: float = 1.5) -> "ReprojBounds":
        """Lower box = the label, upper box = the label scaled about its center."""
        if scale < 1.0:
            raise ValueError("relaxation scale must be >= 1")
        b = np.asarray(box2d.as_array() if isinstance(box2d, Box2D) else box2d, dtype=np.float64)
        cu, cv = 0.5 * (b[..., 0] + b[..., 2]), 0.5 * (b[..., 1] + b[..., 3])
        hw, hh = 0.5 * scale * (b[..., 2] - b[..., 0]), 0.5 * scale * (b[..., 3] - b[..., 1])
        upper = np.stack([cu - hw, cv - hh, cu + hw, cv + hh], -1)
        return cls(b, upper)

    @classmethod
    def from_offsets(cls, box2d, upper_offset, lower_offset) -> "ReprojBounds":
        """General form: upper = label + U, lower = label + L."""
        b = np.asarray(box2d.as_array() if isinstance(box2d, Box2D) else box2d, dtype=np.float64)
        return cls(lower=b + np.asarray(lower_offset), upper=b + np.asarray(upper_offset))

    def interval(self) -> tuple[np.ndarray, np.ndarray]:
        return np.minimum(self.lower, self.upper), np.maximum(self.lower, self.upper)


def relaxed_smooth_l1(pred: torch.Tensor, lo, hi) -> torch.Tensor:
    """Elementwise smooth-L1 against the violated bound, zero inside [lo, hi]."""
    lo = torch.as_tensor(lo, dtype=pred.dtype)
    hi = torch.as_tensor(hi, dtype=pred.dtype)
    above = smooth_l1_each(hi, pred)
    below = smooth_l1_each(lo, pred)
    zero = torch.zeros_like(pred)
    return torch.where(pred > hi, above, torch.where(pred < lo, below, zero))


def relaxed_reproj_loss(box_params, box2d, scale: float = 1.5, cam: Camera | None = None,
                        bounds: ReprojBounds | None = None) -> torch.Tensor:
    """Relaxed reprojection penalty of camera-frame boxes against 2D labels.

    ``box_params`` is (7,) or (B, 7); the per-sample sum over the four
    coordinates is averaged over the batch. Raw pixel units.
    """
    if cam is None:
        raise ValueError("a camera is required")
    params = torch.as_tensor(box_params, dtype=DTYPE)
    reproj = project_params_t(params, cam)
    if bounds is None:
        bounds = ReprojBounds.from_scale(box2d, scale)
    lo, hi = bounds.interval()
    per = relaxed_smooth_l1(reproj, lo, hi).sum(-1)
    return per.mean() if per.dim() else per


@dataclass
class PriorConfig:
    volumes: dict[int, float] = field(default_factory=dict)  # class id -> minimum volume (m^3)
    w_vol: float = 1.0
    w_svar: float = 0.1

    def __post_init__(self):
        if any(v < 0 for v in self.volumes.values()):
            raise ValueError("volume thresholds must be non-negative")


def volume_loss(sizes: torch.Tensor, class_ids, prior: PriorConfig) -> torch.Tensor:
    thresholds = torch.tensor([prior.volumes.get(int(c), 0.0) for c in np.asarray(class_ids).reshape(-1)],
                              dtype=sizes.dtype)
    vol = sizes[..., 0] * sizes[..., 1] * sizes[..., 2]
    return torch.clamp(thresholds - vol, min=0.0).sum()


def size_variance_loss(sizes: torch.Tensor, class_ids) -> torch.Tensor:
    """Smooth-L1 of each size to its class's (gradient-detached) minibatch mean, summed."""
    class_ids = np.asarray(class_ids).reshape(-1)
    total = torch.zeros((), dtype=sizes.dtype)
    for c in np.unique(class_ids):
        idx = torch.from_numpy(np.nonzero(class_ids == c)[0])
        if len(idx) < 2:
            continue
        group = sizes[idx]
        mean = group.mean(0).detach()
        total = total + smooth_l1_each(mean.expand_as(group), group).sum()
    return total


def box_prior_loss(sizes, class_ids, prior: PriorConfig) -> torch.Tensor:
    sizes = torch.as_tensor(sizes, dtype=DTYPE)
    return prior.w_vol * volume_loss(sizes, class_ids, prior) + prior.w_svar * size_variance_loss(sizes, class_ids)
