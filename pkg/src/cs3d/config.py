"""Run configuration and the flat ``key = value`` config file format.

One file configures data generation, training and the experiment matrix.
Blank lines and ``#`` comments are ignored. Recognised keys:

Data (see ``DataConfig``): ``n_scenes``, ``train_fraction``, ``objects_min``,
``objects_max``, ``depth_range``, ``bearing_limit``, ``floor_y``,
``noise_sigma``, ``clutter_ratio``, ``k``, ``n_points``, ``label_jitter_px``,
``score_beta``, ``min_frustum_points``, ``max_retries``, ``max_overlap_iou``,
``seed``, ``label_fraction``; camera as ``camera = fx fy cx cy width height``;
classes as ``class.<name> = h w l strong|weak [jitter [density]]`` in id order.

Run (see ``RunConfig``): every field name below, e.g. ``mode``, ``epochs``,
``w_fit``, ``reproj_scale``, ``alpha_pos``; per-class volume thresholds as
``volume.<name> = V``. Matrix axes as ``matrix.<axis> = a, b, c``.
Tuples are written space- or comma-separated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .boxpc import PerturbBounds
from .geometry import Camera
from .synthdata import ClassSpec, DataConfig

MODES = ("baseline", "baseline-no-onehot", "r", "boxpc", "boxpc-r", "boxpc-r-p",
         "fully-supervised", "fully-supervised-refine")


@dataclass(frozen=True)
class ModeFlags:
    seg_onehot: bool
    box_onehot: bool
    fit: bool = False
    reproj: bool = False
    prior: bool = False
    refine: bool = False

    @property
    def uses_boxpc(self) -> bool:
        return self.fit or self.refine

    @property
    def weak_batches(self) -> bool:
        return self.fit or self.reproj or self.prior


MODE_FLAGS = {
    "baseline": ModeFlags(True, True),
    "baseline-no-onehot": ModeFlags(False, False),
    "r": ModeFlags(False, True, reproj=True),
    "boxpc": ModeFlags(False, True, fit=True, refine=True),
    "boxpc-r": ModeFlags(False, True, fit=True, reproj=True, refine=True),
    "boxpc-r-p": ModeFlags(False, True, fit=True, reproj=True, prior=True, refine=True),
    "fully-supervised": ModeFlags(True, True),
    "fully-supervised-refine": ModeFlags(True, True, refine=True),
}


class ConfigFileError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "boxpc-r-p"
    seed: int = 0
    label_fraction: float = 0.0
    # detector optimisation
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    n_heading: int = 12
    mask_threshold: float = 0.5
    mask_min_points: int = 8
    mask_count: int = 256
    # strong box loss weights
    w_c1_reg: float = 0.1
    w_c2_reg: float = 0.1
    w_r_cls: float = 0.1
    w_r_reg: float = 2.0
    w_s_cls: float = 0.1
    w_s_reg: float = 2.0
    w_corner: float = 0.1
    # weak loss weights
    w_fit: float = 0.05
    w_reproj: float = 0.0005
    w_vol: float = 1.0
    w_svar: float = 0.1
    reproj_scale: float = 1.5
    volumes: dict = field(default_factory=lambda: {"car": 10.0})  # class name -> V
    # BoxPC pretraining
    encoder: str = "combined"
    w_cls: float = 1.0
    w_reg: float = 4.0
    alpha_pos: float = 0.7
    beta_pos: float = 1.0
    alpha_neg: float = 0.01
    beta_neg: float = 0.25
    center_range: float = 0.8
    size_range: float = 0.2
    rot_min: float = 0.0
    rot_max: float = math.pi
    perturb_max_attempts: int = 100_000
    boxpc_epochs: int = 12
    boxpc_batch: int = 32
    boxpc_lr: float = 1e-3
    # inference
    score_with_fit: bool = False
    iou_threshold: float = 0.25
    # network widths
    seg_local: tuple = (32, 64)
    seg_global: tuple = (128,)
    seg_head: tuple = (64,)
    tnet_point: tuple = (32, 64)
    tnet_head: tuple = (32,)
    box_point: tuple = (32, 64, 128)
    box_head: tuple = (64,)
    boxpc_point: tuple = (64, 128, 256)
    boxpc_box: tuple = (64, 64)
    boxpc_head: tuple = (128, 64)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigFileError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.mode.startswith("fully-supervised") and self.label_fraction != 1.0:
            raise ConfigFileError("fully-supervised modes require label_fraction = 1")
        if self.encoder not in ("combined", "independent"):
            raise ConfigFileError(f"unknown encoder {self.encoder!r}")
        if self.reproj_scale < 1.0:
            raise ConfigFileError("reproj_scale must be >= 1")
        self.bounds()

    @property
    def flags(self) -> ModeFlags:
        return MODE_FLAGS[self.mode]

    @property
    def fully_supervised(self) -> bool:
        return self.mode.startswith("fully-supervised")

    def bounds(self) -> PerturbBounds:
        return PerturbBounds(self.alpha_pos, self.beta_pos, self.alpha_neg, self.beta_neg,
                             self.center_range, self.size_range, (self.rot_min, self.rot_max))

    def box_weights(self) -> dict:
        return {"c1_reg": self.w_c1_reg, "c2_reg": self.w_c2_reg, "r_cls": self.w_r_cls,
                "r_reg": self.w_r_reg, "s_cls": self.w_s_cls, "s_reg": self.w_s_reg,
                "corner": self.w_corner}

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _parse_tuple(text: str, cast=float) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(cast(p) for p in parts)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(default, text: str, name: str):
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            cast = int if default and isinstance(default[0], int) else float
            return _parse_tuple(text, cast)
        return text.strip()
    except ValueError as e:
        raise ConfigFileError(f"bad value for {name}: {text!r} ({e})") from None


def read_pairs(path) -> list[tuple[str, str]]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ConfigFileError(f"cannot read config {path}: {e}") from None
    pairs = []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{path}:{n}: expected key = value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


@dataclass
class ConfigBundle:
    data: DataConfig
    run: RunConfig
    matrix: dict[str, list[str]]


def parse_config(pairs: list[tuple[str, str]], base_run: RunConfig | None = None,
                 base_data: DataConfig | None = None) -> ConfigBundle:
    data_defaults = base_data or DataConfig()
    run_defaults = base_run or RunConfig()
    data_kw, run_kw, matrix = {}, {}, {}
    classes: list[ClassSpec] = []
    volumes = None
    data_names = {f.name for f in fields(DataConfig)} - {"classes", "camera"}
    run_names = {f.name for f in fields(RunConfig)} - {"volumes"}
    for key, value in pairs:
        if key.startswith("class."):
            parts = value.split()
            if len(parts) < 4:
                raise ConfigFileError(f"{key}: expected 'h w l strong|weak [jitter [density]]'")
            try:
                extra = {}
                if len(parts) > 4:
                    extra["jitter"] = float(parts[4])
                if len(parts) > 5:
                    extra["density"] = float(parts[5])
                classes.append(ClassSpec(len(classes), key[6:], tuple(float(p) for p in parts[:3]),
                                         parts[3], **extra))
            except ValueError as e:
                raise ConfigFileError(f"{key}: {e}") from None
        elif key.startswith("volume."):
            volumes = {} if volumes is None else volumes
            volumes[key[7:]] = _coerce(0.0, value, key)
        elif key.startswith("matrix."):
            matrix[key[7:]] = [v.strip() for v in value.split(",") if v.strip()]
        elif key == "camera":
            vals = _parse_tuple(value)
            if len(vals) != 6:
                raise ConfigFileError("camera expects 'fx fy cx cy width height'")
            data_kw["camera"] = Camera(vals[0], vals[1], vals[2], vals[3], int(vals[4]), int(vals[5]))
        elif key in data_names or key in run_names:
            if key in data_names:
                data_kw[key] = _coerce(getattr(data_defaults, key), value, key)
            if key in run_names:
                run_kw[key] = _coerce(getattr(run_defaults, key), value, key)
        else:
            raise ConfigFileError(f"unknown config key {key!r}")
    if classes:
        data_kw["classes"] = classes
    if volumes is not None:
        run_kw["volumes"] = volumes
    try:
        data = replace(data_defaults, **data_kw)
        run = replace(run_defaults, **run_kw)
    except (TypeError, ValueError) as e:
        raise ConfigFileError(str(e)) from None
    return ConfigBundle(data, run, matrix)


def load_config(path=None, **run_overrides) -> ConfigBundle:
    bundle = parse_config(read_pairs(path)) if path else ConfigBundle(DataConfig(), RunConfig(), {})
    if run_overrides:
        try:
            bundle.run = replace(bundle.run, **run_overrides)
        except (TypeError, ValueError) as e:
            raise ConfigFileError(str(e)) from None
    return bundle


def dump_config(bundle: ConfigBundle) -> str:
    """Render a bundle back to the key = value format."""
    lines = []
    d = bundle.data
    cam = d.camera
    lines.append(f"camera = {cam.fx} {cam.fy} {cam.cx} {cam.cy} {cam.width} {cam.height}")
    for c in d.classes:
        lines.append(f"class.{c.name} = {c.mean_size[0]} {c.mean_size[1]} {c.mean_size[2]} "
                     f"{c.supervision} {c.jitter} {c.density}")
    for f in fields(DataConfig):
        if f.name in ("classes", "camera"):
            continue
        lines.append(f"{f.name} = {_render(getattr(d, f.name))}")
    for f in fields(RunConfig):
        if f.name == "volumes":
            for name, v in bundle.run.volumes.items():
                lines.append(f"volume.{name} = {v}")
            continue
        if f.name in ("seed", "label_fraction"):
            continue  # written once with the data keys
        lines.append(f"{f.name} = {_render(getattr(bundle.run, f.name))}")
    for axis, values in bundle.matrix.items():
        lines.append(f"matrix.{axis} = {', '.join(values)}")
    return "\n".join(lines) + "\n"


def _render(v) -> str:
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    return str(v)
