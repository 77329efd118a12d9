"""Stage-I mean-teacher self-training with feature injection and regularization."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import detection as D
from . import model as M
from . import tensor as T
from .daaw import WeightSchedule, warmup_weight
from .detection import Box, Detection
from .tensor import OptimizerState, ParamStore, Tape, Tensor

logger = logging.getLogger(__name__)

PseudoLabelSet = list[list[Detection]]


@dataclass
class AdaptConfig:
    delta: float = 0.3
    ema_alpha: float = 0.999
    lambda1: float = 0.1
    mask_ratio: float = 0.5
    mask_patch: int = 8
    warmup_iters: int | None = None  # None -> one epoch
    w_star: tuple[float, float, float] = (0.1, 0.1, 0.1)  # used only when the sweep is off
    use_ufi: bool = True
    use_safr: bool = True
    use_mask: bool = True
    flip_prob: float = 0.5
    noise_std: float = 0.03
    gain_range: float = 0.15
    erase_count: int = 1
    erase_size: int = 12
    epochs: int = 4
    batch_size: int = 8
    lr: float = 3e-3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError(f"ema_alpha must lie in [0, 1], got {self.ema_alpha}")
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be non-negative")
        self.w_star = tuple(float(w) for w in self.w_star)

    def fusion_active(self) -> bool:
        return self.use_ufi and any(w > 0 for w in self.w_star)


# ----------------------------------------------------------------- teacher


def ema_update(teacher: ParamStore, student: ParamStore, alpha: float) -> ParamStore:
    """``teacher <- alpha * teacher + (1 - alpha) * student``; frozen entries copied verbatim."""
    if set(teacher.keys()) != set(student.keys()):
        missing = sorted(set(teacher.keys()) ^ set(student.keys()))
        raise KeyError(f"teacher/student parameter names differ: {missing}")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise T.ShapeError(f"{name}: teacher {t.shape} vs student {s.shape}")
        if name in student.frozen:
            t.data = s.data.copy()
        elif alpha == 1.0:
            continue
        elif alpha == 0.0:
            t.data = s.data.copy()
        else:
            mixed = alpha * t.data + (1.0 - alpha) * s.data
            # rounding can overshoot the segment by an ulp; clip keeps the hull bound exact
            t.data = np.clip(mixed, np.minimum(t.data, s.data), np.maximum(t.data, s.data))
    return teacher


def generate_pseudo_labels(
    config: M.DetectorConfig,
    teacher: ParamStore,
    images,
    delta: float,
    weights: Sequence[float] | None = None,
    use_foundation: bool = True,
) -> PseudoLabelSet:
    """Teacher top-N predictions with score >= delta, deduplicated by NMS(0.5)."""
    out = M.forward(config, teacher, images, weights, use_foundation)
    labels = []
    for b in range(out.logits.shape[0]):
        kept = [d for d in out.detections(b) if d.score >= delta]
        labels.append(D.nms(kept, D.NMS_IOU))
    return labels


def as_targets(labels: Sequence[Detection]) -> tuple[np.ndarray, np.ndarray]:
    if not labels:
        return np.zeros(0, dtype=int), np.zeros((0, 4))
    return np.array([d.class_id for d in labels]), np.array([d.box.as_array() for d in labels])


# ----------------------------------------------------------------- regularization


def heatmap_from_boxes(boxes: Sequence, H_f: int, W_f: int) -> np.ndarray:
    """Class-agnostic Gaussian heatmap ``[H_f, W_f]`` (row = y, column = x).

    Box centres and sizes are converted to grid units and each Gaussian is
    evaluated at cell centres; overlapping boxes combine by pointwise max.
    ``boxes`` holds :class:`Box`, :class:`Detection` or ``(class, Box)`` items.
    """
    hm = np.zeros((H_f, W_f))
    xs = np.arange(W_f) + 0.5
    ys = np.arange(H_f) + 0.5
    for item in boxes:
        box = item.box if isinstance(item, Detection) else item[1] if isinstance(item, tuple) else item
        bx, by = box.cx * W_f, box.cy * H_f
        bw, bh = box.w * W_f, box.h * H_f
        gx = (xs - bx) ** 2 / bw**2
        gy = (ys - by) ** 2 / bh**2
        hm = np.maximum(hm, np.exp(-0.5 * (gy[:, None] + gx[None, :])))
    return hm


def safr_loss(inv: Sequence, foundation, heatmap: np.ndarray) -> Tensor:
    """Heatmap-weighted squared distance between inverse-projected levels and foundation features.

    ``inv[l]`` and ``foundation`` are ``[B, H, W, D]`` (or ``[H, W, D]``);
    ``heatmap`` is ``[B, H, W]`` (or ``[H, W]``).  Normalized by ``H * W * L``
    and averaged over the batch.  The foundation side never gets a gradient.
    """
    target = foundation.data if isinstance(foundation, Tensor) else np.asarray(foundation, dtype=np.float64)
    hm = np.asarray(heatmap, dtype=np.float64)
    if target.ndim == 3:
        target, hm = target[None], hm[None]
        inv = [T.reshape(f, (1,) + f.shape) for f in inv]
    B, H, W, _ = target.shape
    terms = []
    for f in inv:
        if f.shape != target.shape:
            raise T.ShapeError(f"inverse feature {f.shape} vs foundation {target.shape}")
        sq = T.sum_axis(T.square(f - target), -1)
        terms.append(T.total(sq * hm))
    return T.total(T.concat([T.reshape(t, (1,)) for t in terms])) * (1.0 / (H * W * len(inv) * B))


# ----------------------------------------------------------------- augmentation


def flip_labels(labels: Sequence) -> list:
    out = []
    for item in labels:
        if isinstance(item, Detection):
            b = item.box
            out.append(Detection(Box(1.0 - b.cx, b.cy, b.w, b.h), item.class_id, item.score, item.probs))
        else:
            c, b = item
            out.append((c, Box(1.0 - b.cx, b.cy, b.w, b.h)))
    return out


def augment(
    image: np.ndarray,
    labels: Sequence,
    mode: str,
    rng: np.random.Generator,
    config: AdaptConfig | None = None,
    flip: bool | None = None,
) -> tuple[np.ndarray, list]:
    """Weak (flip) or strong (flip + noise + channel gain + erasing) augmentation.

    ``flip`` forces the flip decision; otherwise it is drawn with the
    configured probability.  Only the flip changes geometry.
    """
    cfg = config or AdaptConfig()
    if mode not in ("weak", "strong"):
        raise ValueError(f"unknown augmentation mode {mode!r}")
    do_flip = bool(rng.random() < cfg.flip_prob) if flip is None else flip
    img = np.asarray(image, dtype=np.float64)
    labels = list(labels)
    if do_flip:
        img = img[..., ::-1].copy()
        labels = flip_labels(labels)
    if mode == "strong":
        img = photometric(img, rng, cfg)
    return img, labels


def photometric(img: np.ndarray, rng: np.random.Generator, cfg: AdaptConfig) -> np.ndarray:
    """Appearance-only strong augmentation; all strengths zero returns ``img`` unchanged."""
    out = img
    if cfg.gain_range > 0:
        gain = 1.0 + rng.uniform(-cfg.gain_range, cfg.gain_range, size=(img.shape[0], 1, 1))
        out = out * gain
    if cfg.noise_std > 0:
        out = out + rng.normal(0.0, cfg.noise_std, size=img.shape)
    if cfg.erase_count > 0 and cfg.erase_size > 0:
        out = out.copy()
        H, W = img.shape[1:]
        for _ in range(cfg.erase_count):
            y = int(rng.integers(0, H - cfg.erase_size + 1))
            x = int(rng.integers(0, W - cfg.erase_size + 1))
            out[:, y : y + cfg.erase_size, x : x + cfg.erase_size] = rng.uniform(0.0, 1.0)
    if out is img:
        return img
    return np.clip(out, 0.0, 1.0)


# ----------------------------------------------------------------- objective


def adapt_loss(det, det_masked, reg, lambda1: float):
    """``det + det_masked + lambda1 * reg`` for Tensors or plain floats."""
    return det + det_masked + reg * lambda1


def detection_loss(config: M.DetectorConfig, out: M.ModelOutput, labels: PseudoLabelSet) -> Tensor:
    """Batch-averaged set loss of ``out`` against per-image pseudo-labels."""
    B = out.logits.shape[0]
    targets = [as_targets(lab) for lab in labels]
    return D.batch_detection_loss(out.logits, out.boxes, targets, cells=M.cell_bounds(config)) * (1.0 / B)


@dataclass
class StepResult:
    det: float
    det_masked: float
    reg: float
    total: float
    weights: tuple[float, float, float]
    n_pseudo: int


def hard_objective(
    config: M.DetectorConfig,
    student: ParamStore,
    strong: np.ndarray,
    labels: PseudoLabelSet,
    cfg: AdaptConfig,
    weights: Sequence[float],
    rng: np.random.Generator,
    use_foundation: bool,
) -> tuple[Tensor, dict]:
    """Adaptation loss of the student on one strongly augmented batch (call inside a tape)."""
    out = M.forward(config, student, strong, weights, use_foundation)
    det = detection_loss(config, out, labels)
    if cfg.use_mask and cfg.mask_ratio > 0:
        out_m = M.forward(config, student, strong, weights, use_foundation, mask=(cfg.mask_ratio, cfg.mask_patch, rng))
        det_m = detection_loss(config, out_m, labels)
    else:
        det_m = Tensor(0.0)
    reg = Tensor(0.0)
    if cfg.use_safr and use_foundation and M.has_foundation(student) and any(labels):
        found = out.foundation if out.foundation is not None else M.encode_foundation(config, student, strong)
        fh, fw = config.foundation_shape
        hm = np.stack([heatmap_from_boxes(lab, fh, fw) for lab in labels])
        reg = safr_loss(M.inverse_project(config, student, out.cnn), found, hm)
    total = adapt_loss(det, det_m, reg, cfg.lambda1)
    return total, {"det": det.item(), "det_masked": det_m.item(), "reg": reg.item()}


class MeanTeacher:
    """Student/teacher pair with its optimizer; one writer per instance."""

    def __init__(self, config: M.DetectorConfig, student: ParamStore, cfg: AdaptConfig, iters_per_epoch: int):
        self.config = config
        self.cfg = cfg
        self.student = student
        self.teacher = student.copy(requires_grad=False)
        self.opt = OptimizerState(lr=cfg.lr)
        self.rng = np.random.default_rng([cfg.seed, 11])
        warm = cfg.warmup_iters if cfg.warmup_iters is not None else max(iters_per_epoch, 1)
        self.schedule = WeightSchedule(cfg.w_star, warm)
        self.iteration = 0

    @property
    def use_foundation(self) -> bool:
        return self.cfg.use_ufi or self.cfg.use_safr

    def current_weights(self) -> tuple[float, float, float]:
        if not self.cfg.use_ufi:
            return (0.0, 0.0, 0.0)
        return warmup_weight(self.iteration, self.schedule)

    def views(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Weak and strong views sharing one flip decision per image."""
        weak, strong = [], []
        for img in images:
            w, _ = augment(img, [], "weak", self.rng, self.cfg)
            weak.append(w)
            strong.append(photometric(w, self.rng, self.cfg))
        return np.stack(weak), np.stack(strong)

    def step(self, images: np.ndarray) -> dict:
        weights = self.current_weights()
        weak, strong = self.views(images)
        labels = generate_pseudo_labels(self.config, self.teacher, weak, self.cfg.delta, weights, self.use_foundation)
        self.student.zero_grad()
        with Tape() as tape:
            total, parts = hard_objective(self.config, self.student, strong, labels, self.cfg, weights, self.rng, self.use_foundation)
            tape.backward(total)
        T.optimizer_step(self.student, self.opt)
        ema_update(self.teacher, self.student, self.cfg.ema_alpha)
        self.iteration += 1
        return {
            "iteration": self.iteration,
            **parts,
            "total": total.item(),
            "weights": weights,
            "n_pseudo": sum(len(x) for x in labels),
        }


def adapt_step(runner: MeanTeacher, images: np.ndarray) -> dict:
    """One Stage-I iteration: pseudo-label, student update, EMA update."""
    return runner.step(images)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]
