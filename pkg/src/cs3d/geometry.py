"""Oriented 3D box geometry in a camera-aligned frame.

Frame: x right, y down, z forward (right-handed, matches the pinhole image
convention with a top-left origin). The vertical axis is y and every heading
is a rotation about y.

Box parameters are packed as a 7-vector ``(x, y, z, h, w, l, heading)``.
In the box's own frame ``l`` spans local x, ``h`` spans local y and ``w``
spans local z; the box is placed with ``p = center + R_y(heading) @ q``.

Corner order (fixed): four top corners (local y = -h/2) then the four bottom
corners, each group ordered (+x,+z), (-x,+z), (-x,-z), (+x,-z) in the box
frame, which is counter-clockwise when looking down from above.

Face order for plane features (fixed): top, bottom, +w, -w, +l, -l. Each
feature is the signed perpendicular distance to that face, positive on the
interior side.

The differentiable primitives (``*_t`` functions) take torch tensors with
arbitrary leading batch dimensions. The public functions take and return
numpy arrays or the small dataclasses below.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


class GeometryError(ValueError):
    pass


class BehindCameraError(GeometryError):
    """Raised when a box corner is not strictly in front of the camera."""


def normalize_angle(angle):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=np.float64) + math.pi, 2 * math.pi) - math.pi
    wrapped = np.where(wrapped <= -math.pi, wrapped + 2 * math.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def normalize_angle_t(angle: torch.Tensor) -> torch.Tensor:
    wrapped = torch.remainder(angle + math.pi, 2 * math.pi) - math.pi
    return torch.where(wrapped <= -math.pi, wrapped + 2 * math.pi, wrapped)


def rotation_y(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # (h, w, l)
    heading: float = 0.0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise GeometryError("center and size must be 3-vectors")
        if not all(v > 0 for v in size):
            raise GeometryError(f"box sizes must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))

    def to_vector(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.heading], dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> "Box3D":
        v = np.asarray(v, dtype=np.float64).reshape(7)
        return cls(tuple(v[:3]), tuple(v[3:6]), float(v[6]))

    @property
    def volume(self) -> float:
        h, w, l = self.size
        return h * w * l

    def flipped(self) -> "Box3D":
        return Box3D(self.center, self.size, self.heading + math.pi)


@dataclass(frozen=True)
class Box2D:
    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self):
        for name in ("left", "top", "right", "bottom"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.left > self.right or self.top > self.bottom:
            raise GeometryError(f"degenerate 2D box {self.as_array()}")

    def as_array(self) -> np.ndarray:
        return np.array([self.left, self.top, self.right, self.bottom], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box2D":
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(*a)

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.left + self.right), 0.5 * (self.top + self.bottom)

    def clipped(self, width: float, height: float) -> "Box2D":
        a = self.as_array()
        a[[0, 2]] = np.clip(a[[0, 2]], 0.0, width)
        a[[1, 3]] = np.clip(a[[1, 3]], 0.0, height)
        return Box2D.from_array(a)

    def scaled(self, s: float) -> "Box2D":
        """Same center, ``s`` times the width and height."""
        cu, cv = self.center
        hw, hh = 0.5 * s * self.width, 0.5 * s * self.height
        return Box2D(cu - hw, cv - hh, cu + hw, cv + hh)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise GeometryError("principal point must lie inside the image")

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pinhole projection of M x 3 camera-frame points to M x 2 pixels."""
        points = np.asarray(points, dtype=np.float64)
        z = points[:, 2]
        return np.stack([self.fx * points[:, 0] / z + self.cx,
                         self.fy * points[:, 1] / z + self.cy], axis=1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


# -- differentiable primitives ---------------------------------------------

_CORNER_SIGNS = torch.tensor([
    [1, -1, 1], [-1, -1, 1], [-1, -1, -1], [1, -1, -1],
    [1, 1, 1], [-1, 1, 1], [-1, 1, -1], [1, 1, -1],
], dtype=torch.float64)


def _rot_y_t(theta: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(theta), torch.sin(theta)
    zero, one = torch.zeros_like(theta), torch.ones_like(theta)
    rows = [torch.stack([c, zero, s], -1),
            torch.stack([zero, one, zero], -1),
            torch.stack([-s, zero, c], -1)]
    return torch.stack(rows, -2)


def corners_t(params: torch.Tensor) -> torch.Tensor:
    """(..., 7) box parameters -> (..., 8, 3) corners."""
    center, h, w, l, theta = params[..., :3], params[..., 3], params[..., 4], params[..., 5], params[..., 6]
    half = 0.5 * torch.stack([l, h, w], -1)  # local (x, y, z) extents
    signs = _CORNER_SIGNS.to(params.dtype)
    local = signs * half.unsqueeze(-2)
    rot = _rot_y_t(theta)
    return center.unsqueeze(-2) + local @ rot.transpose(-1, -2)


def plane_features_t(points: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
    """Signed distances of (..., N, 3) points to the six faces of (..., 7) boxes."""
    rel = points - params[..., None, :3]
    rot = _rot_y_t(params[..., 6])
    local = rel @ rot  # R^T applied row-wise
    x, y, z = local[..., 0], local[..., 1], local[..., 2]
    h = params[..., 3, None]
    w = params[..., 4, None]
    l = params[..., 5, None]
    return torch.stack([
        0.5 * h + y,  # top   (local y = -h/2)
        0.5 * h - y,  # bottom
        0.5 * w - z,  # +w
        0.5 * w + z,  # -w
        0.5 * l - x,  # +l
        0.5 * l + x,  # -l
    ], -1)


def project_params_t(params: torch.Tensor, cam: Camera) -> torch.Tensor:
    """(..., 7) camera-frame boxes -> (..., 4) enclosing [left, top, right, bottom]."""
    corners = corners_t(params)
    z = corners[..., 2]
    if bool((z <= 0).any()):
        raise BehindCameraError("box corner behind the camera")
    u = cam.fx * corners[..., 0] / z + cam.cx
    v = cam.fy * corners[..., 1] / z + cam.cy
    return torch.stack([u.min(-1).values, v.min(-1).values,
                        u.max(-1).values, v.max(-1).values], -1)


def rotate_params_y_t(params: torch.Tensor, angle) -> torch.Tensor:
    """Express boxes in a frame rotated by ``R_y(angle)``: center -> R c, heading + angle."""
    angle = torch.as_tensor(angle, dtype=params.dtype)
    angle = angle.expand(params.shape[:-1])
    rot = _rot_y_t(angle)
    center = (rot @ params[..., :3].unsqueeze(-1)).squeeze(-1)
    return torch.cat([center, params[..., 3:6], (params[..., 6] + angle).unsqueeze(-1)], -1)


def rotate_points_y(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotate the xyz columns of an M x (3+k) array by ``R_y(angle)``."""
    out = np.array(points, dtype=np.float64, copy=True)
    out[:, :3] = out[:, :3] @ rotation_y(angle).T
    return out


def rotate_box_y(box: Box3D, angle: float) -> Box3D:
    center = rotation_y(angle) @ np.asarray(box.center)
    return Box3D(tuple(center), box.size, box.heading + angle)


# -- public numpy API -------------------------------------------------------

def _params(box: Box3D) -> torch.Tensor:
    return torch.from_numpy(box.to_vector())


def box_corners(box: Box3D) -> np.ndarray:
    return corners_t(_params(box)).numpy()


def point_plane_features(points, box: Box3D) -> np.ndarray:
    pts = torch.as_tensor(np.asarray(points, dtype=np.float64)[:, :3])
    return plane_features_t(pts, _params(box)).numpy()


def points_in_box(points, box: Box3D) -> np.ndarray:
    return point_plane_features(points, box).min(axis=1) >= 0.0


def project_box_to_image(box: Box3D, cam: Camera) -> Box2D:
    return Box2D.from_array(project_params_t(_params(box), cam).numpy())


def footprint(box: Box3D) -> np.ndarray:
    """Top-down (x, z) polygon of the box, counter-clockwise from above."""
    return box_corners(box)[:4, [0, 2]]


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon by a convex polygon (any orientation)."""
    orient = 1.0 if _signed_area(clip) >= 0 else -1.0
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return orient * (ex * (p[1] - a[1]) - ey * (p[0] - a[0]))

        inputs, output = output, []
        prev = inputs[-1]
        s_prev = side(prev)
        for cur in inputs:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    return abs(_signed_area(poly))


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU of two yaw-rotated boxes (exact)."""
    ha, hb = a.size[0], b.size[0]
    y_lo = max(a.center[1] - 0.5 * ha, b.center[1] - 0.5 * hb)
    y_hi = min(a.center[1] + 0.5 * ha, b.center[1] + 0.5 * hb)
    dy = y_hi - y_lo
    if dy <= 0:
        return 0.0
    area = polygon_area(clip_convex(footprint(a), footprint(b)))
    inter = area * dy
    union = a.volume + b.volume - inter
    if inter <= 0 or union <= 0:
        return 0.0
    return min(1.0, inter / union)


def iou3d_upper_bound(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cheap vectorized upper bound on iou3d for (..., 7) parameter arrays.

    Uses the overlap of the footprints' axis-aligned bounds; never below the
    exact IoU, so it is safe for rejecting candidates.
    """
    def aabb(p):
        c, s = np.abs(np.cos(p[..., 6])), np.abs(np.sin(p[..., 6]))
        ex = 0.5 * (p[..., 5] * c + p[..., 4] * s)
        ez = 0.5 * (p[..., 5] * s + p[..., 4] * c)
        return ex, ez

    ax, az = aabb(a)
    bx, bz = aabb(b)

    def overlap(ca, ea, cb, eb):
        return np.clip(np.minimum(ca + ea, cb + eb) - np.maximum(ca - ea, cb - eb), 0.0, None)

    ox = overlap(a[..., 0], ax, b[..., 0], bx)
    oz = overlap(a[..., 2], az, b[..., 2], bz)
    oy = overlap(a[..., 1], 0.5 * a[..., 3], b[..., 1], 0.5 * b[..., 3])
    va = a[..., 3] * a[..., 4] * a[..., 5]
    vb = b[..., 3] * b[..., 4] * b[..., 5]
    inter = np.minimum(ox * oz * oy, np.minimum(va, vb))
    return inter / (va + vb - inter)


def _footprints(params: np.ndarray) -> np.ndarray:
    """(..., 7) -> (..., 4, 2) counter-clockwise (x, z) footprint corners."""
    c, s = np.cos(params[..., 6]), np.sin(params[..., 6])
    hl, hw = 0.5 * params[..., 5], 0.5 * params[..., 4]
    qx = np.stack([hl, -hl, -hl, hl], -1)
    qz = np.stack([hw, hw, -hw, -hw], -1)
    x = params[..., 0, None] + c[..., None] * qx + s[..., None] * qz
    z = params[..., 2, None] - s[..., None] * qx + c[..., None] * qz
    return np.stack([x, z], -1)


def _inside_convex(points: np.ndarray, poly: np.ndarray, orient: np.ndarray) -> np.ndarray:
    """points (..., P, 2) against convex polygons (..., 4, 2); tolerant on edges."""
    a = poly[..., None, :, :]
    b = np.roll(poly, -1, axis=-2)[..., None, :, :]
    p = points[..., :, None, :]
    cross = (b[..., 0] - a[..., 0]) * (p[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (p[..., 0] - a[..., 0])
    return (orient[..., None, None] * cross >= -1e-12).all(-1)


def footprint_intersection_area(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Vectorized intersection area of yaw-rotated footprints of (..., 7) boxes.

    The intersection of two convex quads is the convex hull of the vertices of
    each inside the other plus all edge-edge crossings; the hull area is taken
    by angular sort around the centroid.
    """
    pa, pb = np.broadcast_arrays(np.asarray(pa, np.float64), np.asarray(pb, np.float64))
    fa, fb = _footprints(pa), _footprints(pb)

    def orient(f):
        x, y = f[..., 0], f[..., 1]
        return np.sign((x * np.roll(y, -1, -1) - np.roll(x, -1, -1) * y).sum(-1))

    in_a = _inside_convex(fa, fb, orient(fb))
    in_b = _inside_convex(fb, fa, orient(fa))

    a0, a1 = fa, np.roll(fa, -1, axis=-2)
    b0, b1 = fb, np.roll(fb, -1, axis=-2)
    r = (a1 - a0)[..., :, None, :]
    s = (b1 - b0)[..., None, :, :]
    qp = b0[..., None, :, :] - a0[..., :, None, :]
    denom = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    safe = np.where(np.abs(denom) < 1e-15, 1.0, denom)
    t = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / safe
    u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / safe
    hit = (np.abs(denom) >= 1e-15) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    cross_pts = a0[..., :, None, :] + t[..., None] * r
    batch = pa.shape[:-1]
    cross_pts = cross_pts.reshape(*batch, 16, 2)
    hit = hit.reshape(*batch, 16)

    pts = np.concatenate([fa, fb, cross_pts], axis=-2)
    valid = np.concatenate([in_a, in_b, hit], axis=-1)
    count = valid.sum(-1)
    w = valid[..., None].astype(np.float64)
    centroid = (pts * w).sum(-2) / np.maximum(count, 1)[..., None]
    d = pts - centroid[..., None, :]
    ang = np.where(valid, np.arctan2(d[..., 1], d[..., 0]), np.inf)
    order = np.argsort(ang, axis=-1, kind="stable")
    pts = np.take_along_axis(pts, order[..., None], axis=-2)
    valid = np.take_along_axis(valid, order, axis=-1)
    first = pts[..., :1, :]
    pts = np.where(valid[..., None], pts, first)
    x, y = pts[..., 0], pts[..., 1]
    area = 0.5 * np.abs((x * np.roll(y, -1, -1) - np.roll(x, -1, -1) * y).sum(-1))
    return np.where(count >= 3, area, 0.0)


def iou3d_batch(pa, pb) -> np.ndarray:
    """Vectorized iou3d over broadcastable (..., 7) parameter arrays."""
    pa, pb = np.broadcast_arrays(np.asarray(pa, np.float64), np.asarray(pb, np.float64))
    y_lo = np.maximum(pa[..., 1] - 0.5 * pa[..., 3], pb[..., 1] - 0.5 * pb[..., 3])
    y_hi = np.minimum(pa[..., 1] + 0.5 * pa[..., 3], pb[..., 1] + 0.5 * pb[..., 3])
    dy = np.clip(y_hi - y_lo, 0.0, None)
    inter = footprint_intersection_area(pa, pb) * dy
    va = pa[..., 3] * pa[..., 4] * pa[..., 5]
    vb = pb[..., 3] * pb[..., 4] * pb[..., 5]
    return np.clip(inter / (va + vb - inter), 0.0, 1.0)
