"""Stage-II distillation into a foundation-free student with two teachers."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import detection as D
from . import model as M
from . import tensor as T
from .adapt import AdaptConfig, as_targets, detection_loss, ema_update, generate_pseudo_labels, photometric, augment
from .detection import Detection
from .tensor import OptimizerState, ParamStore, Tape, Tensor

logger = logging.getLogger(__name__)

SOFT_FLOOR = 0.1


@dataclass
class DistillConfig:
    lambda2: float = 0.5
    lambda3: float = 0.5
    alpha: float = 5.0
    beta: float = 2.0
    delta_ema: float = 0.3
    delta_static: float = 0.3
    soft_floor: float = SOFT_FLOOR
    init: str = "dsod"
    box_fusion: bool = False
    ema_alpha: float = 0.999
    use_mask: bool = True
    mask_ratio: float = 0.5
    mask_patch: int = 8
    epochs: int = 2
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.lambda2 < 0 or self.lambda3 < 0:
            raise ValueError("lambda2 and lambda3 must be non-negative")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.init not in ("dsod", "source"):
            raise ValueError(f"init must be 'dsod' or 'source', got {self.init!r}")

    def augmentation(self) -> AdaptConfig:
        return AdaptConfig(mask_ratio=self.mask_ratio, mask_patch=self.mask_patch, use_mask=self.use_mask, seed=self.seed)


@dataclass(frozen=True)
class StaticTeacher:
    """Frozen Stage-I model evaluated at its converged fusion weights."""

    config: M.DetectorConfig
    params: ParamStore
    weights: tuple[float, float, float]

    def outputs(self, images) -> M.ModelOutput:
        return M.forward(self.config, self.params, images, self.weights, use_foundation=True)


def freeze_all(params: ParamStore) -> ParamStore:
    for name in params.keys():
        if name not in params.frozen:
            params.freeze(name)
    return params


# ----------------------------------------------------------------- losses


def soft_static_loss(
    logits: Tensor,
    boxes: Tensor,
    teacher_probs: np.ndarray,
    teacher_boxes: np.ndarray,
    alpha: float = 5.0,
    beta: float = 2.0,
    cells: np.ndarray | None = None,
) -> Tensor:
    """Soft distillation against one image's teacher predictions.

    ``logits``/``boxes`` are the student's candidates ``[N, C]``/``[N, 4]``;
    teacher predictions are matched to them with the set-loss cost (label =
    teacher argmax), then each pair adds ``alpha * sum_c BCE(c_T, c_S) +
    beta * L_bbox``.
    """
    tp = np.asarray(teacher_probs, dtype=np.float64).reshape(-1, logits.shape[-1])
    tb = np.asarray(teacher_boxes, dtype=np.float64).reshape(-1, 4)
    if len(tp) == 0:
        return Tensor(0.0)
    probs = 1.0 / (1.0 + np.exp(-logits.data))
    cost = D.match_cost(probs, boxes.data, tp.argmax(axis=1), tb, cells)
    match = D.hungarian_match(cost)
    s_idx = np.array([i for i, _ in match.pairs])
    t_idx = np.array([j for _, j in match.pairs])
    cls = T.total(D.bce_terms(T.sigmoid(T.take(logits, s_idx)), tp[t_idx]))
    box = D.bbox_terms(T.take(boxes, s_idx), tb[t_idx])
    return cls * alpha + box * beta


def distill_loss(hard_ema, hard_static, soft_static, cfg: DistillConfig):
    """``L_hard^EMA + lambda2 * L_hard^Static + lambda3 * L_soft^Static``."""
    return hard_ema + hard_static * cfg.lambda2 + soft_static * cfg.lambda3


def box_fusion_baseline(ema: Sequence[Detection], static: Sequence[Detection], delta: float = 0.3) -> list[Detection]:
    """Union of both label sets, class-wise NMS, then the confidence threshold."""
    merged = sorted(list(ema) + list(static), key=_canonical)
    return [d for d in D.nms(merged, D.NMS_IOU) if d.score >= delta]


def _canonical(d: Detection) -> tuple:
    return (-d.score, d.class_id, *d.box.as_array())


# ----------------------------------------------------------------- initialization


def init_student_from_dsod(params: ParamStore, config: M.DetectorConfig) -> tuple[ParamStore, ParamStore]:
    """Copy the foundation-independent weights into a student and its EMA teacher."""
    required = list(M.init_detector(config, np.random.default_rng(0)).keys())
    missing = [k for k in required if k not in params]
    if missing:
        raise KeyError(f"checkpoint lacks detector parameters: {missing}")
    student = ParamStore()
    for k in required:
        student.add(k, params[k].data.copy())
    return student, student.copy(requires_grad=False)


# ----------------------------------------------------------------- training


def hard_loss(config: M.DetectorConfig, out: M.ModelOutput, out_masked: M.ModelOutput | None, labels) -> Tensor:
    """Adaptation-style hard loss (normal plus masked branch) of a foundation-free student."""
    loss = detection_loss(config, out, labels)
    if out_masked is not None:
        loss = loss + detection_loss(config, out_masked, labels)
    return loss


def soft_targets(out: M.ModelOutput, b: int, floor: float) -> tuple[np.ndarray, np.ndarray]:
    """Teacher top-N predictions of image ``b`` above ``floor``, deduplicated by NMS."""
    probs, boxes = out.top_arrays(b)
    dets = D.detections_from_arrays(probs, boxes)
    keep_ids = {id(d) for d in D.nms(dets, D.NMS_IOU) if d.score >= floor}
    rows = [i for i, d in enumerate(dets) if id(d) in keep_ids]
    return probs[rows], boxes[rows]


class Distiller:
    """Student, EMA teacher and frozen static teacher; one writer per instance."""

    def __init__(self, config: M.DetectorConfig, student: ParamStore, static: StaticTeacher, cfg: DistillConfig):
        if M.has_foundation(student) or any(M.is_foundation_branch_key(k) for k in student.keys()):
            raise ValueError("student must not carry foundation-branch parameters")
        self.config = config
        self.cfg = cfg
        self.student = student
        self.teacher = student.copy(requires_grad=False)
        self.static = static
        self.opt = OptimizerState(lr=cfg.lr)
        self.aug = cfg.augmentation()
        self.rng = np.random.default_rng([cfg.seed, 23])
        self.iteration = 0

    def views(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        weak, strong = [], []
        for img in images:
            w, _ = augment(img, [], "weak", self.rng, self.aug)
            weak.append(w)
            strong.append(photometric(w, self.rng, self.aug))
        return np.stack(weak), np.stack(strong)

    def step(self, images: np.ndarray) -> dict:
        cfg = self.cfg
        weak, strong = self.views(images)
        ema_pl = generate_pseudo_labels(self.config, self.teacher, weak, cfg.delta_ema, use_foundation=False)
        s_out = self.static.outputs(weak)
        static_pl = [[d for d in D.nms(s_out.detections(b), D.NMS_IOU) if d.score >= cfg.delta_static] for b in range(len(weak))]
        cells = M.cell_bounds(self.config)
        self.student.zero_grad()
        with Tape() as tape:
            out = M.forward(self.config, self.student, strong, use_foundation=False)
            out_m = None
            if cfg.use_mask and cfg.mask_ratio > 0:
                out_m = M.forward(self.config, self.student, strong, use_foundation=False, mask=(cfg.mask_ratio, cfg.mask_patch, self.rng))
            if cfg.box_fusion:
                fused = [box_fusion_baseline(e, s, cfg.delta_ema) for e, s in zip(ema_pl, static_pl)]
                h_ema = hard_loss(self.config, out, out_m, fused)
                h_static = soft = Tensor(0.0)
                total = h_ema
            else:
                h_ema = hard_loss(self.config, out, out_m, ema_pl)
                h_static = hard_loss(self.config, out, out_m, static_pl) if cfg.lambda2 > 0 else Tensor(0.0)
                soft = Tensor(0.0)
                if cfg.lambda3 > 0:
                    terms = []
                    for b in range(len(weak)):
                        tp, tb = soft_targets(s_out, b, cfg.soft_floor)
                        if len(tp):
                            terms.append(T.reshape(soft_static_loss(out.logits[b], out.boxes[b], tp, tb, cfg.alpha, cfg.beta, cells), (1,)))
                    if terms:
                        soft = T.total(T.concat(terms)) * (1.0 / len(weak))
                total = distill_loss(h_ema, h_static, soft, cfg)
            tape.backward(total)
        T.optimizer_step(self.student, self.opt)
        ema_update(self.teacher, self.student, cfg.ema_alpha)
        self.iteration += 1
        return {
            "iteration": self.iteration,
            "hard_ema": h_ema.item(),
            "hard_static": h_static.item(),
            "soft_static": soft.item(),
            "total": total.item(),
        }


def distill_step(runner: Distiller, images: np.ndarray) -> dict:
    return runner.step(images)


# ----------------------------------------------------------------- false-positive scenario


def false_positive_gradients(lambda2: float = 0.5, lambda3: float = 0.5, num_cells: int = 6) -> dict:
    """Gradient pulling a student candidate toward a label only the EMA teacher emits.

    The EMA teacher emits one true and one confident false box; the static
    teacher emits only the true one.  The student mirrors the EMA teacher,
    so its false-positive cell is already confident.

    The pull toward the false label is the descent-direction component on
    that cell's false-class logit, ``max(0, -dL/dz)``; box regression toward
    the false box is identical in both regimes since the static teacher
    supervises no box there.  Returns the pull and the signed logit gradient
    under box-level and loss-level fusion.
    """
    rng = np.random.default_rng(0)
    logits0 = rng.normal(-3.0, 0.5, size=(num_cells, 3))
    boxes0 = np.tile([0.5, 0.5, 0.1, 0.1], (num_cells, 1))
    true_box = D.Box(0.25, 0.25, 0.2, 0.2)
    fp_box = D.Box(0.75, 0.75, 0.2, 0.2)
    fp_cell, fp_class = 1, 1
    boxes0[0] = [0.26, 0.24, 0.18, 0.2]
    boxes0[fp_cell] = [0.73, 0.76, 0.2, 0.22]
    logits0[0, 0] = 2.0
    logits0[fp_cell, fp_class] = 0.5
    ema = [Detection(true_box, 0, 0.9), Detection(fp_box, fp_class, 0.85)]
    static = [Detection(true_box, 0, 0.9)]
    static_probs = np.array([[0.9, 0.05, 0.05]])

    def fp_grad(loss_fn) -> float:
        logits = Tensor(logits0.copy(), requires_grad=True)
        boxes = Tensor(boxes0.copy(), requires_grad=True)
        with Tape() as tape:
            tape.backward(loss_fn(logits, boxes))
        return float(logits.grad[fp_cell, fp_class])

    def hard(logits, boxes, labels):
        return D.set_detection_loss(logits, boxes, as_targets(labels))

    cfg = DistillConfig(lambda2=lambda2, lambda3=lambda3)
    box_level = fp_grad(lambda lg, bx: hard(lg, bx, box_fusion_baseline(ema, static, 0.3)))
    loss_level = fp_grad(
        lambda lg, bx: distill_loss(
            hard(lg, bx, ema),
            hard(lg, bx, static),
            soft_static_loss(lg, bx, static_probs, np.array([true_box.as_array()]), cfg.alpha, cfg.beta),
            cfg,
        )
    )
    return {
        "box_fusion": max(0.0, -box_level),
        "loss_level": max(0.0, -loss_level),
        "grad_box_fusion": box_level,
        "grad_loss_level": loss_level,
    }
