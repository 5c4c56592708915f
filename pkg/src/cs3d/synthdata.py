"""Synthetic RGB-D scenes, 2D labels and frustum extraction.

Objects are noisy box shells resting on a floor plane, seen by a pinhole
camera at the origin. Frustum samples are stored on disk as:

    <split>/meta.json       class specs, N, k, seed, label fraction, camera
    <split>/samples.jsonl   one JSON object per frustum
    <split>/points.f32      little-endian float32, N x (3+k) rows per sample

``points_offset`` in ``samples.jsonl`` is a byte offset into ``points.f32``.
``mask`` is a base64 bitset (``numpy.packbits`` order, big-endian bits) or
null when the sample carries no 3D label.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (Box2D, Box3D, Camera, GeometryError, iou3d_batch, point_plane_features,
                       points_in_box, project_box_to_image, rotate_box_y, rotate_points_y)

STRONG, WEAK = "strong", "weak"
_MASK64 = (1 << 64) - 1


class DataError(RuntimeError):
    pass


class SceneTooCrowdedError(DataError):
    pass


class EmptyFrustumError(DataError):
    pass


def splitmix64(x: int) -> int:
    """One splitmix64 step; used to derive independent per-scene seeds."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, index: int) -> int:
    return splitmix64((splitmix64(base) + index) & _MASK64)


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    mean_size: tuple[float, float, float]  # (h, w, l) meters
    supervision: str = STRONG
    jitter: float = 0.1
    density: float = 25.0  # surface points per square meter

    def __post_init__(self):
        if not all(v > 0 for v in self.mean_size):
            raise ValueError(f"class {self.name}: mean size must be positive")
        if not 0.0 <= self.jitter <= 0.5:
            raise ValueError(f"class {self.name}: jitter must lie in [0, 0.5]")
        if self.supervision not in (STRONG, WEAK):
            raise ValueError(f"class {self.name}: supervision must be strong or weak")


def default_classes() -> list[ClassSpec]:
    # Chunky sizes keep the high-IoU perturbation set reachable by rejection sampling.
    # The car is ~5x the volume of any strong class, so size knowledge does not transfer to it.
    return [
        ClassSpec(0, "cabinet", (1.1, 0.9, 1.2), STRONG),
        ClassSpec(1, "bed", (0.8, 1.5, 2.0), STRONG),
        ClassSpec(2, "wardrobe", (1.8, 0.8, 1.2), STRONG),
        ClassSpec(3, "sofa", (0.9, 1.0, 1.9), WEAK),
        ClassSpec(4, "car", (1.5, 1.8, 4.2), WEAK),
    ]


def default_camera() -> Camera:
    return Camera(fx=520.0, fy=520.0, cx=320.0, cy=240.0, width=640, height=480)


@dataclass
class DataConfig:
    classes: list[ClassSpec] = field(default_factory=default_classes)
    camera: Camera = field(default_factory=default_camera)
    n_scenes: int = 600
    train_fraction: float = 0.75
    objects_min: int = 1
    objects_max: int = 3
    depth_range: tuple[float, float] = (5.0, 12.0)
    bearing_limit: float = 0.38  # radians either side of the optical axis
    floor_y: float = 1.5
    noise_sigma: float = 0.01
    clutter_ratio: float = 0.5
    k: int = 0
    n_points: int = 512
    label_jitter_px: float = 2.0
    score_beta: tuple[float, float] = (4.0, 2.0)
    min_frustum_points: int = 16
    max_retries: int = 200
    max_overlap_iou: float = 0.05
    label_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if not self.classes:
            raise ValueError("at least one class must be configured")
        if ids != list(range(len(ids))):
            raise ValueError("class ids must be 0..C-1 in order")
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ValueError("invalid object count range")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ValueError("label fraction must lie in [0, 1]")

    @property
    def strong_ids(self) -> list[int]:
        return [c.class_id for c in self.classes if c.supervision == STRONG]

    @property
    def weak_ids(self) -> list[int]:
        return [c.class_id for c in self.classes if c.supervision == WEAK]

    @property
    def mask_margin(self) -> float:
        """Surface noise tolerance used when labelling foreground points."""
        return 3.0 * self.noise_sigma


@dataclass
class Scene:
    camera: Camera
    objects: list[tuple[int, Box3D]]
    points: np.ndarray  # M x (3+k)
    instance: np.ndarray  # M ints, -1 for clutter
    seed: int


@dataclass
class FrustumSample:
    points: np.ndarray  # N x (3+k), rotated frustum frame
    class_id: int
    score: float
    box2d: Box2D
    box3d: Box3D | None  # rotated frustum frame
    frustum_angle: float
    camera: Camera
    mask: np.ndarray | None  # N booleans
    scene_id: int = -1
    object_index: int = -1


def _sample_faces(box: Box3D, density: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    h, w, l = box.size
    # (local axis fixed, value, extents of the two free axes); local axes x<->l, y<->h, z<->w
    faces = [(1, -0.5 * h, l, w), (1, 0.5 * h, l, w),
             (2, 0.5 * w, l, h), (2, -0.5 * w, l, h),
             (0, 0.5 * l, h, w), (0, -0.5 * l, h, w)]
    chunks = []
    for axis, value, e1, e2 in faces:
        n = max(1, int(round(density * e1 * e2)))
        q = np.empty((n, 3))
        free = [a for a in range(3) if a != axis]
        half = {0: 0.5 * l, 1: 0.5 * h, 2: 0.5 * w}
        q[:, axis] = value
        for a in free:
            q[:, a] = rng.uniform(-half[a], half[a], n)
        chunks.append(q)
    local = np.concatenate(chunks)
    c, s = math.cos(box.heading), math.sin(box.heading)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    pts = local @ rot.T + np.asarray(box.center)
    return pts + rng.normal(0.0, sigma, pts.shape)


def generate_scene(config: DataConfig, seed: int) -> Scene:
    """Place non-overlapping objects on the floor and sample their surfaces plus clutter."""
    rng = np.random.default_rng(seed)
    cam = config.camera
    n_obj = int(rng.integers(config.objects_min, config.objects_max + 1))
    objects: list[tuple[int, Box3D]] = []
    retries = 0
    while len(objects) < n_obj:
        if retries >= config.max_retries:
            raise SceneTooCrowdedError(f"could not place {n_obj} objects (seed {seed})")
        retries += 1
        spec = config.classes[int(rng.integers(len(config.classes)))]
        size = np.asarray(spec.mean_size) * (1.0 + rng.uniform(-spec.jitter, spec.jitter, 3))
        depth = rng.uniform(*config.depth_range)
        bearing = rng.uniform(-config.bearing_limit, config.bearing_limit)
        center = (depth * math.tan(bearing), config.floor_y - 0.5 * size[0], depth)
        box = Box3D(center, tuple(size), rng.uniform(-math.pi, math.pi))
        try:
            b2 = project_box_to_image(box, cam)
        except GeometryError:
            continue
        cu, cv = b2.center
        if not (0 <= cu <= cam.width and 0 <= cv <= cam.height):
            continue
        if objects:
            others = np.stack([b.to_vector() for _, b in objects])
            if (iou3d_batch(others, box.to_vector()[None]) >= config.max_overlap_iou).any():
                continue
        objects.append((spec.class_id, box))

    pts, inst = [], []
    for idx, (cid, box) in enumerate(objects):
        p = _sample_faces(box, config.classes[cid].density, config.noise_sigma, rng)
        pts.append(p)
        inst.append(np.full(len(p), idx))
    n_obj_pts = sum(len(p) for p in pts)
    n_clutter = int(round(config.clutter_ratio * n_obj_pts))
    if n_clutter:
        n_floor = n_clutter // 2
        z_lo, z_hi = 0.5 * config.depth_range[0], config.depth_range[1] + 3.0
        half_x = z_hi * math.tan(config.bearing_limit) + 3.0
        floor = np.stack([rng.uniform(-half_x, half_x, n_floor),
                          config.floor_y + rng.normal(0.0, config.noise_sigma, n_floor),
                          rng.uniform(z_lo, z_hi, n_floor)], 1)
        n_air = n_clutter - n_floor
        air = np.stack([rng.uniform(-half_x, half_x, n_air),
                        rng.uniform(config.floor_y - 3.0, config.floor_y, n_air),
                        rng.uniform(z_lo, z_hi, n_air)], 1)
        pts += [floor, air]
        inst.append(np.full(n_clutter, -1))
    points = np.concatenate(pts)
    if config.k:
        points = np.concatenate([points, rng.uniform(0.0, 1.0, (len(points), config.k))], 1)
    return Scene(cam, objects, points, np.concatenate(inst), seed)


def sample_score(rng: np.random.Generator, beta: tuple[float, float] = (4.0, 2.0)) -> float:
    """Synthetic detector confidence: a Beta draw squeezed into [0.5, 1]."""
    return float(0.5 + 0.5 * rng.beta(*beta))


def label_box2d(scene: Scene, index: int, jitter_px: float = 0.0,
                rng: np.random.Generator | None = None) -> Box2D:
    cam = scene.camera
    clean = project_box_to_image(scene.objects[index][1], cam).clipped(cam.width, cam.height)
    if jitter_px <= 0:
        return clean
    if rng is None:
        raise ValueError("a generator is required for jittered labels")
    a = clean.as_array() + rng.uniform(-jitter_px, jitter_px, 4)
    a[[0, 2]] = np.clip(a[[0, 2]], 0.0, cam.width)
    a[[1, 3]] = np.clip(a[[1, 3]], 0.0, cam.height)
    a[2], a[3] = max(a[0], a[2]), max(a[1], a[3])
    return Box2D.from_array(a)


def frustum_angle(box2d: Box2D, cam: Camera) -> float:
    """Horizontal bearing of the ray through the 2D box center."""
    u, _ = box2d.center
    return math.atan2((u - cam.cx) / cam.fx, 1.0)


def extract_frustum(scene: Scene, box2d: Box2D, class_id: int, n_points: int, seed: int,
                    box3d: Box3D | None = None, score: float = 1.0,
                    mask_margin: float = 0.0) -> FrustumSample:
    """Select points projecting into ``box2d``, rotate the frustum to face +z, resample to N."""
    if box2d.area <= 0:
        raise EmptyFrustumError("2D box has no area")
    cam = scene.camera
    xyz = scene.points[:, :3]
    front = xyz[:, 2] > 1e-6
    uv = np.full((len(xyz), 2), -1.0)
    uv[front] = cam.project(xyz[front])
    inside = (front & (uv[:, 0] >= box2d.left) & (uv[:, 0] <= box2d.right)
              & (uv[:, 1] >= box2d.top) & (uv[:, 1] <= box2d.bottom))
    idx = np.nonzero(inside)[0]
    if len(idx) == 0:
        raise EmptyFrustumError("no points inside the frustum")
    angle = frustum_angle(box2d, cam)
    pts = rotate_points_y(scene.points[idx], -angle)

    rng = np.random.default_rng(seed)
    if len(idx) >= n_points:
        choice = rng.choice(len(idx), n_points, replace=False)
    else:
        extra = rng.choice(len(idx), n_points - len(idx), replace=True)
        choice = np.concatenate([rng.permutation(len(idx)), extra])
    # stored as float32 on disk; labels are computed on the stored values
    pts = pts[choice].astype(np.float32).astype(np.float64)

    label = rotate_box_y(box3d, -angle) if box3d is not None else None
    mask = None
    if label is not None:
        mask = points_in_box(pts, grow_box(label, mask_margin))
    return FrustumSample(pts, class_id, score, box2d, label, angle, cam, mask)


def grow_box(box: Box3D, margin: float) -> Box3D:
    if margin == 0:
        return box
    return Box3D(box.center, tuple(s + 2 * margin for s in box.size), box.heading)


def hull_distance(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Unsigned distance-like measure to the box hull: |min signed plane feature|."""
    return np.abs(point_plane_features(points, box).min(axis=1))


# -- dataset files ------------------------------------------------------------

def _encode_mask(mask: np.ndarray | None):
    if mask is None:
        return None
    return base64.b64encode(np.packbits(mask.astype(np.uint8)).tobytes()).decode("ascii")


def _decode_mask(text, n: int):
    if text is None:
        return None
    bits = np.unpackbits(np.frombuffer(base64.b64decode(text), dtype=np.uint8))
    return bits[:n].astype(bool)


def _box_to_json(box: Box3D | None):
    if box is None:
        return None
    return {"center": list(box.center), "size": list(box.size), "heading": box.heading}


def _box_from_json(d) -> Box3D | None:
    if d is None:
        return None
    return Box3D(tuple(d["center"]), tuple(d["size"]), d["heading"])


def class_spec_to_json(c: ClassSpec) -> dict:
    d = asdict(c)
    d["mean_size"] = list(c.mean_size)
    return d


def scene_samples(config: DataConfig, scene: Scene, scene_id: int, seed: int) -> list[FrustumSample]:
    rng = np.random.default_rng(seed)
    out = []
    for i, (cid, box) in enumerate(scene.objects):
        b2 = label_box2d(scene, i, config.label_jitter_px, rng)
        score = sample_score(rng, config.score_beta)
        sample_seed = int(rng.integers(1 << 62))
        if b2.area <= 0:
            continue
        try:
            s = extract_frustum(scene, b2, cid, config.n_points, sample_seed, box3d=box,
                                score=score, mask_margin=config.mask_margin)
        except EmptyFrustumError:
            continue
        if s.mask.sum() < config.min_frustum_points:
            continue
        s.scene_id, s.object_index = scene_id, i
        out.append(s)
    return out


def build_dataset(config: DataConfig, out_dir, seed: int | None = None,
                  label_fraction: float | None = None) -> dict[str, Path]:
    """Generate scenes, split them, and write train/ and val/ sample files.

    Weak-class train samples keep their 3D label only for a deterministic
    ``label_fraction`` subset; val samples always keep labels (evaluation only).
    """
    if seed is not None:
        config = replace(config, seed=seed)
    if label_fraction is not None:
        config = replace(config, label_fraction=label_fraction)
    if not 0.0 < config.train_fraction < 1.0:
        raise ValueError("train fraction must lie strictly between 0 and 1")
    n_train = int(round(config.train_fraction * config.n_scenes))
    splits: dict[str, list[FrustumSample]] = {"train": [], "val": []}
    for i in range(config.n_scenes):
        scene_seed = derive_seed(config.seed, i)
        scene = generate_scene(config, scene_seed)
        split = "train" if i < n_train else "val"
        splits[split].extend(scene_samples(config, scene, i, derive_seed(scene_seed, 1)))

    weak = set(config.weak_ids)
    weak_train = [j for j, s in enumerate(splits["train"]) if s.class_id in weak]
    keep = set()
    if weak_train:
        order = np.random.default_rng(derive_seed(config.seed, 0xFFFFFFFF)).permutation(len(weak_train))
        n_keep = int(round(config.label_fraction * len(weak_train)))
        keep = {weak_train[j] for j in order[:n_keep]}
    for j in weak_train:
        if j not in keep:
            s = splits["train"][j]
            s.box3d, s.mask = None, None

    out_dir = Path(out_dir)
    paths = {}
    for split, samples in splits.items():
        paths[split] = write_split(out_dir / split, config, samples)
    return paths


def meta_dict(config: DataConfig) -> dict:
    return {
        "classes": [class_spec_to_json(c) for c in config.classes],
        "camera": config.camera.to_dict(),
        "n_points": config.n_points,
        "k": config.k,
        "seed": config.seed,
        "label_fraction": config.label_fraction,
        "mask_margin": config.mask_margin,
        "noise_sigma": config.noise_sigma,
    }


def write_split(path: Path, config: DataConfig, samples: list[FrustumSample]) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "meta.json", "w") as f:
            json.dump(meta_dict(config), f, indent=1, sort_keys=True)
        offset = 0
        with open(path / "points.f32", "wb") as fp, open(path / "samples.jsonl", "w") as fs:
            for s in samples:
                blob = np.ascontiguousarray(s.points, dtype="<f4").tobytes()
                fp.write(blob)
                rec = {
                    "class_id": s.class_id,
                    "score": s.score,
                    "box2d": s.box2d.as_array().tolist(),
                    "box3d": _box_to_json(s.box3d),
                    "frustum_angle": s.frustum_angle,
                    "mask": _encode_mask(s.mask),
                    "points_file": "points.f32",
                    "points_offset": offset,
                    "scene_id": s.scene_id,
                    "object_index": s.object_index,
                }
                fs.write(json.dumps(rec, sort_keys=True) + "\n")
                offset += len(blob)
    except OSError as e:
        raise DataError(f"failed writing dataset split {path}: {e}") from e
    return path


def read_meta(path) -> dict:
    path = Path(path)
    try:
        with open(path / "meta.json") as f:
            return json.load(f)
    except OSError as e:
        raise DataError(f"cannot read {path / 'meta.json'}: {e}") from e


def classes_from_meta(meta: dict) -> list[ClassSpec]:
    return [ClassSpec(c["class_id"], c["name"], tuple(c["mean_size"]), c["supervision"],
                      c["jitter"], c["density"]) for c in meta["classes"]]


def read_split(path, redact_classes=(), check_masks: bool = True) -> tuple[dict, list[FrustumSample]]:
    """Load a split; 3D labels (and masks) of ``redact_classes`` are dropped on read."""
    path = Path(path)
    meta = read_meta(path)
    classes = classes_from_meta(meta)
    strong = {c.class_id for c in classes if c.supervision == STRONG}
    weak = {c.class_id for c in classes if c.supervision == WEAK}
    if strong & weak or (strong | weak) != set(range(len(classes))):
        raise DataError(f"{path}: strong/weak class sets must partition the classes")
    cam = Camera(**meta["camera"])
    n, width = meta["n_points"], 3 + meta["k"]
    redact = set(redact_classes)
    samples = []
    try:
        raw = np.fromfile(path / "points.f32", dtype="<f4")
        with open(path / "samples.jsonl") as f:
            lines = f.readlines()
    except OSError as e:
        raise DataError(f"cannot read samples under {path}: {e}") from e
    for line in lines:
        rec = json.loads(line)
        start = rec["points_offset"] // 4
        pts = raw[start:start + n * width].reshape(n, width).astype(np.float64)
        box = _box_from_json(rec["box3d"])
        mask = _decode_mask(rec["mask"], n)
        if rec["class_id"] in redact:
            box, mask = None, None
        if check_masks and box is not None and mask is not None:
            expect = points_in_box(pts, grow_box(box, meta["mask_margin"]))
            if not np.array_equal(expect, mask):
                raise DataError(f"{path}: stored mask disagrees with its 3D label")
        samples.append(FrustumSample(pts, rec["class_id"], rec["score"], Box2D.from_array(rec["box2d"]),
                                     box, rec["frustum_angle"], cam, mask,
                                     rec.get("scene_id", -1), rec.get("object_index", -1)))
    return meta, samples
