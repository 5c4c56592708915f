"""Training and inference orchestration.

BoxPC pretraining on labelled boxes, alternating strong/weak detector
training, the frustum inference chain and AP evaluation on a split.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import boxpc as bpc
from .config import RunConfig
from .detector import (AnchorConfig, Detector, DetectorConfig, box_loss_strong, decode_params,
                       mask_and_center, seg_loss)
from .geometry import Box3D, Camera, corners_t, rotate_box_y, rotate_params_y_t
from .metrics import APResult, Detection, GroundTruth, evaluate_ap
from .nn import DTYPE, Adam, ConfigError, parameter_digest, read_checkpoint, save_checkpoint
from .synthdata import STRONG, ClassSpec, DataError, FrustumSample, classes_from_meta, read_meta, read_split
from .weakloss import PriorConfig, box_prior_loss, relaxed_reproj_loss

log = logging.getLogger(__name__)


# -- data ------------------------------------------------------------------------

@dataclass
class Split:
    meta: dict
    samples: list[FrustumSample]
    classes: list[ClassSpec]

    @property
    def strong_ids(self) -> list[int]:
        return [c.class_id for c in self.classes if c.supervision == STRONG]

    @property
    def weak_ids(self) -> list[int]:
        return [c.class_id for c in self.classes if c.supervision != STRONG]

    @property
    def label_fraction(self) -> float:
        return float(self.meta.get("label_fraction", 0.0))

    @property
    def k(self) -> int:
        return int(self.meta.get("k", 0))


def load_train_split(path, run: RunConfig) -> Split:
    """Training split with weak-class 3D labels redacted when the run must not see them.

    Semi-supervised runs on a dataset built with label fraction 0 drop every
    weak-class label on read; with f > 0 the dataset itself only stores the
    kept subset.
    """
    meta = read_meta(path)
    classes = classes_from_meta(meta)
    weak = [c.class_id for c in classes if c.supervision != STRONG]
    f = float(meta.get("label_fraction", 0.0))
    if run.fully_supervised and f != 1.0:
        raise ConfigError(f"mode {run.mode} needs a dataset built with label fraction 1 (got {f})")
    redact = weak if (not run.fully_supervised and f == 0.0) else ()
    meta, samples = read_split(path, redact_classes=redact)
    return Split(meta, samples, classes)


def load_eval_split(path) -> Split:
    meta, samples = read_split(path)
    return Split(meta, samples, classes_from_meta(meta))


@dataclass
class Stacked:
    points: torch.Tensor  # (S, N, D)
    class_ids: np.ndarray
    one_hot: torch.Tensor  # (S, C)
    angles: np.ndarray
    box2d: np.ndarray  # (S, 4)
    scores: np.ndarray
    camera: Camera
    boxes: np.ndarray | None = None  # (S, 7) frustum frame
    masks: torch.Tensor | None = None


def stack_samples(samples: list[FrustumSample], n_classes: int, labelled: bool = False) -> Stacked:
    ids = np.array([s.class_id for s in samples], dtype=np.int64)
    st = Stacked(
        points=torch.from_numpy(np.stack([s.points for s in samples])).to(DTYPE),
        class_ids=ids,
        one_hot=torch.nn.functional.one_hot(torch.from_numpy(ids), n_classes).to(DTYPE),
        angles=np.array([s.frustum_angle for s in samples]),
        box2d=np.stack([s.box2d.as_array() for s in samples]),
        scores=np.array([s.score for s in samples]),
        camera=samples[0].camera,
    )
    if labelled:
        st.boxes = np.stack([s.box3d.to_vector() for s in samples])
        st.masks = torch.from_numpy(np.stack([s.mask for s in samples])).to(DTYPE)
    return st


def _take(st: Stacked, idx) -> Stacked:
    idx = np.asarray(idx)
    t = torch.from_numpy(idx)
    return Stacked(st.points[t], st.class_ids[idx], st.one_hot[t], st.angles[idx], st.box2d[idx],
                   st.scores[idx], st.camera, None if st.boxes is None else st.boxes[idx],
                   None if st.masks is None else st.masks[t])


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


# -- BoxPC pretraining -------------------------------------------------------------

@dataclass
class PretrainReport:
    history: list[float]
    auc: float
    n_train: int
    n_val: int
    seconds: float


def boxpc_config(run: RunConfig, k: int, n_classes: int) -> bpc.BoxPCConfig:
    return bpc.BoxPCConfig(mode=run.encoder, k=k, n_classes=n_classes if run.fully_supervised else 0,
                           point=run.boxpc_point, box=run.boxpc_box, head=run.boxpc_head)


def draw_deltas(boxes: np.ndarray, bounds: bpc.PerturbBounds, which: str, rng: np.random.Generator,
                max_attempts: int) -> np.ndarray:
    return np.stack([bpc.sample_perturbation(Box3D.from_vector(b), bounds, which, rng, max_attempts)
                     for b in boxes])


def pretrain_boxpc(train: Split, run: RunConfig, val: Split | None = None) -> tuple[bpc.BoxPCNet, PretrainReport]:
    """Fit the BoxPC network on labelled train boxes with balanced P+/P- minibatches.

    Each epoch draws one positive and one negative perturbation per labelled
    sample, so every minibatch holds equally many of each. The held-out AUC
    uses one P+ and one P- box per labelled val sample.
    """
    t0 = time.perf_counter()
    labelled = [s for s in train.samples if s.box3d is not None]
    if not any(s.class_id in train.strong_ids for s in labelled):
        raise DataError("BoxPC pretraining needs strong-class samples with 3D labels")
    n_classes = len(train.classes)
    torch.manual_seed(run.seed)
    net = bpc.BoxPCNet(boxpc_config(run, train.k, n_classes))
    opt = Adam(net.parameters(), lr=run.boxpc_lr)
    bounds = run.bounds()
    st = stack_samples(labelled, n_classes, labelled=True)
    rng = np.random.default_rng([run.seed, 0xB0C])
    use_oh = net.config.n_classes > 0
    half = max(1, run.boxpc_batch // 2)
    history = []
    for epoch in range(run.boxpc_epochs):
        pos = draw_deltas(st.boxes, bounds, bpc.POS, rng, run.perturb_max_attempts)
        neg = draw_deltas(st.boxes, bounds, bpc.NEG, rng, run.perturb_max_attempts)
        total, count = 0.0, 0
        for idx in _batches(len(labelled), half, rng):
            t = torch.from_numpy(idx)
            pts = torch.cat([st.points[t], st.points[t]])
            star = np.concatenate([st.boxes[idx], st.boxes[idx]])
            delta = np.concatenate([pos[idx], neg[idx]])
            label = np.concatenate([np.ones(len(idx)), np.zeros(len(idx))])
            oh = torch.cat([st.one_hot[t], st.one_hot[t]]) if use_oh else None
            opt.zero_grad()
            loss = bpc.boxpc_pretrain_loss(pts, star, delta, label, net, run.w_cls, run.w_reg, oh)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
        log.info("boxpc epoch %d loss %.4f", epoch, history[-1])
    auc = float("nan")
    n_val = 0
    if val is not None:
        auc, n_val = boxpc_auc(net, val, run)
    return net, PretrainReport(history, auc, len(labelled), n_val, time.perf_counter() - t0)


def boxpc_auc(net: bpc.BoxPCNet, split: Split, run: RunConfig, seed: int = 1) -> tuple[float, int]:
    labelled = [s for s in split.samples if s.box3d is not None and s.class_id in split.strong_ids]
    if not labelled:
        raise DataError("no labelled strong-class samples for the AUC report")
    st = stack_samples(labelled, len(split.classes), labelled=True)
    rng = np.random.default_rng([run.seed, seed, 0xA0C])
    bounds = run.bounds()
    pos = draw_deltas(st.boxes, bounds, bpc.POS, rng, run.perturb_max_attempts)
    neg = draw_deltas(st.boxes, bounds, bpc.NEG, rng, run.perturb_max_attempts)
    oh = st.one_hot if net.config.n_classes else None
    with torch.no_grad():
        p_pos, _ = net(st.points, st.boxes - pos, oh)
        p_neg, _ = net(st.points, st.boxes - neg, oh)
    scores = np.concatenate([p_pos.numpy(), p_neg.numpy()])
    labels = np.concatenate([np.ones(len(labelled), bool), np.zeros(len(labelled), bool)])
    return bpc.roc_auc(scores, labels), len(labelled)


def save_boxpc(path, net: bpc.BoxPCNet, run: RunConfig, report: PretrainReport | None = None) -> Path:
    b = run.bounds()
    extra = {"bounds": {"alpha_pos": b.alpha_pos, "beta_pos": b.beta_pos, "alpha_neg": b.alpha_neg,
                        "beta_neg": b.beta_neg, "center_range": b.center_range,
                        "size_range": b.size_range, "rot_range": list(b.rot_range)},
             "encoder": net.config.mode, "w_cls": run.w_cls, "w_reg": run.w_reg}
    if report is not None:
        extra["history"] = report.history
        extra["auc"] = None if math.isnan(report.auc) else report.auc
    return save_checkpoint(path, net, net.manifest(), extra)


def load_boxpc(path) -> bpc.BoxPCNet:
    manifest, tensors = read_checkpoint(path)
    if "boxpc" not in manifest["config"]:
        raise ConfigError(f"{path} is not a BoxPC checkpoint")
    net = bpc.BoxPCNet(bpc.BoxPCConfig.from_json(manifest["config"]["boxpc"]))
    net.load_state_dict(tensors)
    return net


# -- detector training -----------------------------------------------------------------

def make_anchors(samples: list[FrustumSample], n_heading: int) -> tuple[AnchorConfig, dict[int, int]]:
    """One size anchor per class with 3D train labels: the mean labelled size."""
    by_class: dict[int, list] = {}
    for s in samples:
        if s.box3d is not None:
            by_class.setdefault(s.class_id, []).append(s.box3d.size)
    if not by_class:
        raise DataError("no 3D labels to build size anchors from")
    ids = sorted(by_class)
    sizes = np.array([np.mean(by_class[c], axis=0) for c in ids])
    return AnchorConfig(sizes, n_heading), {c: i for i, c in enumerate(ids)}


def detector_config(run: RunConfig, k: int, n_classes: int) -> DetectorConfig:
    flags = run.flags
    return DetectorConfig(k=k, n_classes=n_classes, seg_onehot=flags.seg_onehot, box_onehot=flags.box_onehot,
                          seg_local=run.seg_local, seg_global=run.seg_global, seg_head=run.seg_head,
                          tnet_point=run.tnet_point, tnet_head=run.tnet_head,
                          box_point=run.box_point, box_head=run.box_head)


@dataclass
class TrainHistory:
    strong: list[float] = field(default_factory=list)
    weak: list[float] = field(default_factory=list)
    weak_terms: list[dict] = field(default_factory=list)
    n_strong_steps: int = 0
    n_weak_steps: int = 0
    n_behind_camera: int = 0
    seconds: float = 0.0


def _cam_frame(params: torch.Tensor, angles: np.ndarray) -> torch.Tensor:
    return rotate_params_y_t(params, torch.as_tensor(angles, dtype=params.dtype))


def train_detector(train: Split, run: RunConfig, boxpc: bpc.BoxPCNet | None = None) -> tuple[Detector, TrainHistory]:
    """Alternate strong and weak minibatches (1:1), BoxPC frozen throughout.

    Strong batches optimise segmentation plus the anchor box loss on labelled
    samples. Weak batches (unlabelled samples, modes with weak terms only)
    run segmentation without gradient and update the box networks with the
    mode's weak terms.
    """
    t0 = time.perf_counter()
    flags = run.flags
    if flags.uses_boxpc:
        if boxpc is None:
            raise ConfigError(f"mode {run.mode} needs a pretrained BoxPC checkpoint")
        if boxpc.config.mode != run.encoder:
            raise ConfigError(f"BoxPC encoder {boxpc.config.mode!r} does not match run encoder {run.encoder!r}")
    n_classes = len(train.classes)
    strong = [s for s in train.samples if s.box3d is not None]
    weak = [s for s in train.samples if s.box3d is None]
    for s in strong:
        if s.mask is None:
            raise DataError(f"labelled sample (scene {s.scene_id}) has no segmentation mask")
    if any(s.class_id in train.strong_ids for s in weak):
        raise DataError("strong-class sample without a 3D label")
    anchors, anchor_of = make_anchors(strong, run.n_heading)
    torch.manual_seed(run.seed)
    det = Detector(detector_config(run, train.k, n_classes), anchors)
    seg_opt = Adam(det.seg_parameters(), lr=run.lr)
    box_opt = Adam(det.box_parameters(), lr=run.lr)
    S = stack_samples(strong, n_classes, labelled=True)
    size_index = np.array([anchor_of[c] for c in S.class_ids])
    W = stack_samples(weak, n_classes) if weak and flags.weak_batches else None
    name_to_id = {c.name: c.class_id for c in train.classes}
    prior = PriorConfig({name_to_id[n]: v for n, v in run.volumes.items() if n in name_to_id},
                        run.w_vol, run.w_svar)
    boxpc_oh = boxpc is not None and boxpc.config.n_classes > 0
    weights = run.box_weights()
    rng = np.random.default_rng([run.seed, 0xDE7])
    hist = TrainHistory()
    digest = parameter_digest(boxpc) if boxpc is not None else None
    weak_queue: list[np.ndarray] = []

    def next_weak():
        if not weak_queue:
            weak_queue.extend(_batches(len(weak), run.batch_size, rng))
        return weak_queue.pop(0)

    for epoch in range(run.epochs):
        s_tot, w_tot, s_n, w_n = 0.0, 0.0, 0, 0
        for idx in _batches(len(strong), run.batch_size, rng):
            b = _take(S, idx)
            seg_opt.zero_grad()
            box_opt.zero_grad()
            probs = det.seg_forward(b.points, b.one_hot)
            loss_seg = seg_loss(probs, b.masks)
            centered, centroid = mask_and_center(b.points, probs, run.mask_threshold,
                                                 run.mask_min_points, run.mask_count)
            out = det.box_forward(centered, b.one_hot, centroid)
            loss = loss_seg + box_loss_strong(out, b.boxes, size_index[idx], anchors, weights)
            loss.backward()
            seg_opt.step()
            box_opt.step()
            s_tot += loss.item()
            s_n += 1
            hist.n_strong_steps += 1
            if W is None:
                continue
            wl, terms = _weak_step(det, _take(W, next_weak()), run, anchors, boxpc, boxpc_oh, prior, box_opt, hist)
            w_tot += wl
            w_n += 1
            hist.n_weak_steps += 1
            hist.weak_terms.append(terms)
        hist.strong.append(s_tot / max(s_n, 1))
        if w_n:
            hist.weak.append(w_tot / w_n)
        log.info("epoch %d strong %.4f weak %s", epoch, hist.strong[-1], hist.weak[-1] if w_n else "-")
    if digest is not None and parameter_digest(boxpc) != digest:
        raise RuntimeError("BoxPC parameters changed during detector training")
    hist.seconds = time.perf_counter() - t0
    return det, hist


def _weak_step(det: Detector, b: Stacked, run: RunConfig, anchors: AnchorConfig, boxpc, boxpc_oh: bool,
               prior: PriorConfig, box_opt: Adam, hist: TrainHistory) -> tuple[float, dict]:
    flags = run.flags
    box_opt.zero_grad()
    with torch.no_grad():
        probs = det.seg_forward(b.points, b.one_hot)
    centered, centroid = mask_and_center(b.points, probs, run.mask_threshold, run.mask_min_points, run.mask_count)
    out = det.box_forward(centered, b.one_hot, centroid)
    params, _ = decode_params(out, anchors)
    terms = {}
    loss = torch.zeros((), dtype=DTYPE)
    if flags.fit:
        fit = bpc.fit_loss_weak(b.points, params, boxpc, b.one_hot if boxpc_oh else None)
        terms["fit"] = fit.item()
        loss = loss + run.w_fit * fit
    if flags.reproj:
        cam_params = _cam_frame(params, b.angles)
        with torch.no_grad():
            ok = (corners_t(cam_params)[..., 2] > 0).all(-1).numpy()
        hist.n_behind_camera += int((~ok).sum())
        if ok.any():
            rep = relaxed_reproj_loss(cam_params[torch.from_numpy(ok)], b.box2d[ok], run.reproj_scale, b.camera)
            terms["reproj"] = rep.item()
            loss = loss + run.w_reproj * rep
    if flags.prior:
        # averaged per sample like the fit and reprojection terms, so the weights compare
        pr = box_prior_loss(params[:, 3:6], b.class_ids, prior) / len(b.class_ids)
        terms["prior"] = pr.item()
        loss = loss + pr
    if loss.requires_grad:
        loss.backward()
        box_opt.step()
    return loss.item(), terms


# -- inference -----------------------------------------------------------------------

@dataclass
class Inference:
    detections: list[Detection]
    frustum_boxes: np.ndarray  # (S, 7) final boxes in the frustum frame
    initial_boxes: np.ndarray  # (S, 7) decoded boxes before refinement
    fit: np.ndarray | None = None


def infer_batch(samples: list[FrustumSample], det: Detector, run: RunConfig,
                boxpc: bpc.BoxPCNet | None = None, n_classes: int | None = None,
                chunk: int = 256) -> Inference:
    """seg -> mask/center -> box net -> decode -> optional refine -> camera frame."""
    if not samples:
        return Inference([], np.zeros((0, 7)), np.zeros((0, 7)))
    n_classes = n_classes or det.config.n_classes
    refine = run.flags.refine and boxpc is not None
    if run.flags.refine and boxpc is None:
        raise ConfigError(f"mode {run.mode} refines with BoxPC but no checkpoint was given")
    init, final, fits = [], [], []
    with torch.no_grad():
        for i in range(0, len(samples), chunk):
            st = stack_samples(samples[i:i + chunk], n_classes)
            probs = det.seg_forward(st.points, st.one_hot)
            centered, centroid = mask_and_center(st.points, probs, run.mask_threshold,
                                                 run.mask_min_points, run.mask_count)
            out = det.box_forward(centered, st.one_hot, centroid)
            params, _ = decode_params(out, det.anchors)
            b0 = params.numpy()
            init.append(b0)
            oh = st.one_hot if boxpc is not None and boxpc.config.n_classes else None
            b = bpc.refine_params(st.points, b0, boxpc, oh) if refine else b0
            final.append(b)
            if boxpc is not None and run.score_with_fit:
                p, _ = boxpc(st.points, b, oh)
                fits.append(p.numpy())
    init, final = np.concatenate(init), np.concatenate(final)
    fit = np.concatenate(fits) if fits else None
    dets = []
    for j, s in enumerate(samples):
        box = rotate_box_y(Box3D.from_vector(final[j]), s.frustum_angle)
        score = s.score * float(fit[j]) if fit is not None else s.score
        dets.append(Detection(s.class_id, box, float(np.clip(score, 0.0, 1.0)), s.scene_id))
    return Inference(dets, final, init, fit)


def infer(sample: FrustumSample, det: Detector, run: RunConfig, boxpc: bpc.BoxPCNet | None = None) -> Detection:
    return infer_batch([sample], det, run, boxpc).detections[0]


def ground_truths(samples: list[FrustumSample]) -> list[GroundTruth]:
    """Camera-frame GT boxes from labelled samples."""
    return [GroundTruth(s.class_id, rotate_box_y(s.box3d, s.frustum_angle), s.scene_id)
            for s in samples if s.box3d is not None]


def eval_classes(run: RunConfig, split: Split) -> list[int]:
    """Weak classes for semi-supervised runs, every class for fully-supervised ones."""
    return [c.class_id for c in split.classes] if run.fully_supervised else split.weak_ids


def evaluate(split: Split, det: Detector, run: RunConfig, boxpc: bpc.BoxPCNet | None = None,
             classes=None) -> APResult:
    classes = eval_classes(run, split) if classes is None else classes
    samples = [s for s in split.samples if s.class_id in classes]
    res = infer_batch(samples, det, run, boxpc, n_classes=len(split.classes))
    return evaluate_ap(res.detections, ground_truths(samples), run.iou_threshold, classes)


# -- detector checkpoints -------------------------------------------------------------

def save_detector(path, det: Detector, run: RunConfig, history: TrainHistory | None = None) -> Path:
    extra = {"mode": run.mode, "encoder": run.encoder, "seed": run.seed,
             "mask_threshold": run.mask_threshold, "mask_min_points": run.mask_min_points,
             "mask_count": run.mask_count}
    if history is not None:
        extra["strong_loss"] = history.strong
        extra["weak_loss"] = history.weak
    return save_checkpoint(path, det, det.manifest(), extra)


def load_detector(path) -> tuple[Detector, dict]:
    manifest, tensors = read_checkpoint(path)
    if "detector" not in manifest["config"]:
        raise ConfigError(f"{path} is not a detector checkpoint")
    det = Detector.from_manifest(manifest["config"])
    det.load_state_dict(tensors)
    return det, manifest["extra"]
