"""Box geometry, Hungarian set matching, detection losses, NMS and AP50.

Boxes are normalized ``(cx, cy, w, h)``.  Scalar helpers (``iou``, ``giou``,
``focal_loss`` ...) work on plain floats; the ``*_terms``/``*_loss`` helpers
taking :class:`~dsod.tensor.Tensor` arguments are differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
W_CLS = 2.0
W_L1 = 5.0
W_GIOU = 2.0
PROB_CLAMP = 1e-7
NMS_IOU = 0.5
CENTER_PENALTY = 100.0


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got w={self.w}, h={self.h}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")

    def __iter__(self):
        return iter((self.cx, self.cy, self.w, self.h))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    def xyxy(self) -> tuple[float, float, float, float]:
        return cxcywh_to_xyxy(self.as_array()).tolist()

    @classmethod
    def from_array(cls, arr) -> "Box":
        cx, cy, w, h = (float(v) for v in arr)
        return cls(cx, cy, w, h)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    probs: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def prob(self, class_id: int) -> float:
        """Probability assigned to ``class_id`` (the score if only the top class is known)."""
        if self.probs is not None:
            return self.probs[class_id]
        return self.score if class_id == self.class_id else 0.0


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched: list[int] = field(default_factory=list)

    def total(self, cost: np.ndarray) -> float:
        return float(sum(cost[i, j] for i, j in self.pairs))


# ----------------------------------------------------------------- geometry


def cxcywh_to_xyxy(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def _as_box_array(b) -> np.ndarray:
    return b.as_array() if isinstance(b, Box) else np.asarray(tuple(b), dtype=np.float64)


def pairwise_iou_giou(a, b) -> tuple[np.ndarray, np.ndarray]:
    """IoU and GIoU matrices between ``a[N, 4]`` and ``b[M, 4]`` (cxcywh)."""
    ax = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))[:, None, :]
    bx = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))[None, :, :]
    area_a = (ax[..., 2] - ax[..., 0]) * (ax[..., 3] - ax[..., 1])
    area_b = (bx[..., 2] - bx[..., 0]) * (bx[..., 3] - bx[..., 1])
    iw = np.clip(np.minimum(ax[..., 2], bx[..., 2]) - np.maximum(ax[..., 0], bx[..., 0]), 0, None)
    ih = np.clip(np.minimum(ax[..., 3], bx[..., 3]) - np.maximum(ax[..., 1], bx[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    iou_m = inter / union
    ew = np.maximum(ax[..., 2], bx[..., 2]) - np.minimum(ax[..., 0], bx[..., 0])
    eh = np.maximum(ax[..., 3], bx[..., 3]) - np.minimum(ax[..., 1], bx[..., 1])
    enclose = ew * eh
    return iou_m, iou_m - (enclose - union) / enclose


def iou(a, b) -> float:
    return float(pairwise_iou_giou(_as_box_array(a), _as_box_array(b))[0][0, 0])


def giou(a, b) -> float:
    return float(pairwise_iou_giou(_as_box_array(a), _as_box_array(b))[1][0, 0])


# ----------------------------------------------------------------- scalar losses


def focal_loss(pred_prob: float, target: int, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> float:
    p = min(max(pred_prob, PROB_CLAMP), 1.0 - PROB_CLAMP)
    if target == 1:
        return -alpha * (1.0 - p) ** gamma * math.log(p)
    return -(1.0 - alpha) * p**gamma * math.log(1.0 - p)


def bce_soft(student_prob: float, teacher_prob: float) -> float:
    s = min(max(student_prob, PROB_CLAMP), 1.0 - PROB_CLAMP)
    t = teacher_prob
    return -(t * math.log(s) + (1.0 - t) * math.log(1.0 - s))


def bbox_loss(pred, target, w_l1: float = W_L1, w_giou: float = W_GIOU) -> float:
    p, t = _as_box_array(pred), _as_box_array(target)
    return w_l1 * float(np.abs(p - t).sum()) + w_giou * (1.0 - giou(p, t))


# ----------------------------------------------------------------- differentiable terms


def focal_terms(logits, targets: np.ndarray, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Elementwise sigmoid focal loss of ``logits`` against 0/1 ``targets``."""
    y = np.asarray(targets, dtype=np.float64)
    p = T.clip(T.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    ce = -(T.log(p) * y + T.log(1.0 - p) * (1.0 - y))
    miss = p * (1.0 - 2.0 * y) + y  # 1 - p_t
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    return T.power(miss, gamma) * ce * alpha_t


def bce_terms(student_probs, teacher_probs: np.ndarray) -> Tensor:
    t = np.asarray(teacher_probs, dtype=np.float64)
    s = T.clip(student_probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(T.log(s) * t + T.log(1.0 - s) * (1.0 - t))


def giou_terms(pred, target: np.ndarray) -> Tensor:
    """GIoU between each row of ``pred[M, 4]`` (Tensor) and ``target[M, 4]``."""
    t = cxcywh_to_xyxy(np.asarray(target, dtype=np.float64).reshape(-1, 4))
    t1, t2 = t[:, :2], t[:, 2:]
    size = pred[:, 2:]
    half = size * 0.5
    p1, p2 = pred[:, :2] - half, pred[:, :2] + half
    overlap = T.relu(T.minimum(p2, t2) - T.maximum(p1, t1))
    inter = overlap[:, 0] * overlap[:, 1]
    union = size[:, 0] * size[:, 1] + (t2 - t1).prod(axis=1) - inter
    span = T.maximum(p2, t2) - T.minimum(p1, t1)
    enclose = span[:, 0] * span[:, 1]
    return inter / union - (enclose - union) / enclose


def bbox_terms(pred, target: np.ndarray, w_l1: float = W_L1, w_giou: float = W_GIOU) -> Tensor:
    """Summed ``w_l1 * L1 + w_giou * (1 - GIoU)`` over matched rows."""
    target = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    l1 = T.total(T.absolute(pred - target))
    g = T.total(1.0 - giou_terms(pred, target))
    return l1 * w_l1 + g * w_giou


# ----------------------------------------------------------------- matching


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost one-to-one assignment of ``min(n_pred, n_tgt)`` pairs.

    Shortest-augmenting-path solver with dual potentials over the smaller
    side.  Among equal-cost candidates the lowest column index is taken at
    every relaxation, which keeps results reproducible.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        n_pred = cost.shape[0] if cost.ndim == 2 else 0
        return MatchResult([], list(range(n_pred)))
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    n_pred, n_tgt = cost.shape
    transposed = n_tgt < n_pred
    a = cost.T if transposed else cost
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # row assigned to column j (1-based), 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = []
    for j in range(1, m + 1):
        if owner[j]:
            r, c = owner[j] - 1, j - 1
            pairs.append((c, r) if transposed else (r, c))
    pairs.sort()
    matched = {p for p, _ in pairs}
    return MatchResult(pairs, [i for i in range(n_pred) if i not in matched])


def match_cost(
    probs: np.ndarray, boxes: np.ndarray, labels: np.ndarray, tboxes: np.ndarray, cells: np.ndarray | None = None
) -> np.ndarray:
    """Matching cost ``[n_pred, n_tgt]``: focal class cost + L1 + (1 - GIoU).

    With ``cells`` (per-candidate ``x0, y0, x1, y1`` grid cells) a candidate
    whose cell does not contain the target centre pays :data:`CENTER_PENALTY`.
    """
    p = np.clip(probs[:, labels], PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = FOCAL_ALPHA * (1.0 - p) ** FOCAL_GAMMA * -np.log(p)
    neg = (1.0 - FOCAL_ALPHA) * p**FOCAL_GAMMA * -np.log(1.0 - p)
    l1 = np.abs(boxes[:, None, :] - tboxes[None, :, :]).sum(-1)
    _, g = pairwise_iou_giou(boxes, tboxes)
    cost = W_CLS * (pos - neg) + W_L1 * l1 + W_GIOU * (1.0 - g)
    if cells is not None:
        cx, cy = tboxes[None, :, 0], tboxes[None, :, 1]
        inside = (cells[:, None, 0] <= cx) & (cx < cells[:, None, 2]) & (cells[:, None, 1] <= cy) & (cy < cells[:, None, 3])
        cost = cost + CENTER_PENALTY * ~inside
    return cost


def _split_targets(targets) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(targets, tuple) and len(targets) == 2 and isinstance(targets[0], np.ndarray):
        return targets[0].astype(int), np.asarray(targets[1], dtype=np.float64).reshape(-1, 4)
    labels = np.array([int(c) for c, _ in targets], dtype=int)
    boxes = np.array([_as_box_array(b) for _, b in targets], dtype=np.float64).reshape(-1, 4)
    return labels, boxes


def set_detection_loss(logits, boxes, targets, cells: np.ndarray | None = None) -> Tensor:
    """Hungarian-matched detection loss for one image.

    ``logits[N, C]`` and ``boxes[N, 4]`` are the per-candidate predictions;
    ``targets`` is a list of ``(class_id, box)`` or a ``(labels, boxes)``
    array pair.  Unmatched candidates contribute focal background loss.
    """
    labels, tboxes = _split_targets(targets)
    return batch_detection_loss(
        T.reshape(logits, (1,) + logits.shape), T.reshape(boxes, (1,) + boxes.shape), [(labels, tboxes)], cells=cells
    )


def batch_detection_loss(
    logits, boxes, targets: Sequence, weights: Sequence[float] | None = None, cells: np.ndarray | None = None
) -> Tensor:
    """Sum over images of :func:`set_detection_loss`, optionally weighted per image.

    ``logits[B, N, C]``/``boxes[B, N, 4]``; ``targets[b]`` as in
    :func:`set_detection_loss`.
    """
    B, N, C = logits.shape
    probs = 1.0 / (1.0 + np.exp(-logits.data))
    onehot = np.zeros((B, N, C))
    bi, pi, tb = [], [], []
    for b in range(B):
        labels, tboxes = _split_targets(targets[b])
        if labels.size == 0:
            continue
        cost = match_cost(probs[b], boxes.data[b], labels, tboxes, cells)
        for p, t in hungarian_match(cost).pairs:
            onehot[b, p, labels[t]] = 1.0
            bi.append(b)
            pi.append(p)
            tb.append(tboxes[t])
    per_elem = focal_terms(logits, onehot)
    if weights is not None:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64)[:, None, None], (B, N, C))
        per_elem = per_elem * np.ascontiguousarray(w)
    loss = T.total(per_elem) * W_CLS
    if bi:
        matched = boxes[(np.array(bi), np.array(pi))]
        tb_arr = np.array(tb)
        if weights is not None:
            wv = np.asarray(weights, dtype=np.float64)[np.array(bi)]
            l1 = T.total(T.absolute(matched - tb_arr) * np.repeat(wv[:, None], 4, axis=1))
            g = T.total((1.0 - giou_terms(matched, tb_arr)) * wv)
            loss = loss + l1 * W_L1 + g * W_GIOU
        else:
            loss = loss + bbox_terms(matched, tb_arr)
    return loss


# ----------------------------------------------------------------- post-processing


def nms(dets: Sequence[Detection], iou_thresh: float = NMS_IOU) -> list[Detection]:
    """Greedy class-wise NMS; output sorted by descending score (stable)."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list[int] = []
    for i in order:
        d = dets[i]
        if all(dets[k].class_id != d.class_id or iou(dets[k].box, d.box) <= iou_thresh for k in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """VOC all-point interpolated area under the PR curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap50(preds: Sequence[Sequence[Detection]], gts: Sequence[Sequence], num_classes: int | None = None) -> dict:
    """Per-class AP at IoU 0.5 and their mean over classes that have GTs.

    ``gts[i]`` is a list of ``(class_id, Box)``.  Predictions are matched
    greedily in descending score order to the best unmatched GT.
    """
    if len(preds) != len(gts):
        raise ValueError("preds and gts must cover the same images")
    classes = set()
    for g in gts:
        classes.update(int(c) for c, _ in g)
    if num_classes is not None:
        classes = {c for c in classes if c < num_classes}
    per_class: dict[int, float] = {}
    image_keys = [_image_key(p, g) for p, g in zip(preds, gts)]
    for c in sorted(classes):
        records = []  # (score, image index, detection index)
        gt_boxes = {}
        n_gt = 0
        for i, (p, g) in enumerate(zip(preds, gts)):
            boxes = [_as_box_array(b) for cls, b in g if int(cls) == c]
            gt_boxes[i] = np.array(boxes).reshape(-1, 4)
            n_gt += len(boxes)
            for j, d in enumerate(p):
                if d.class_id == c:
                    records.append((d.score, i, j))
        # canonical order: score desc, then image/detection index, so image order never matters
        keyed = sorted(records, key=lambda r: (-r[0], image_keys[r[1]], r[2]))
        taken = {i: np.zeros(len(gt_boxes[i]), dtype=bool) for i in gt_boxes}
        tp = np.zeros(len(keyed))
        for k, (_, i, j) in enumerate(keyed):
            gb = gt_boxes[i]
            if gb.size == 0:
                continue
            ious = pairwise_iou_giou(preds[i][j].box.as_array(), gb)[0][0]
            ious = np.where(taken[i], -1.0, ious)
            best = int(np.argmax(ious))
            if ious[best] >= 0.5:
                tp[k] = 1.0
                taken[i][best] = True
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(keyed) + 1) if len(keyed) else np.zeros(0)
        per_class[c] = average_precision(recall, precision)
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return {"per_class": per_class, "mAP": m}


def _image_key(preds, gts) -> tuple:
    # content-based key keeps tie order independent of image presentation order
    return tuple(float(v) for d in preds for v in (d.score, *d.box.as_array())) + tuple(
        float(v) for _, b in gts for v in _as_box_array(b)
    )


def detections_from_arrays(probs: np.ndarray, boxes: np.ndarray) -> list[Detection]:
    out = []
    for p, b in zip(probs, boxes):
        c = int(np.argmax(p))
        out.append(Detection(Box.from_array(np.clip(b, [0, 0, 1e-6, 1e-6], [1, 1, 1, 1])), c, float(p[c]), tuple(float(x) for x in p)))
    return out


def labels_to_arrays(labels: Iterable) -> tuple[np.ndarray, np.ndarray]:
    return _split_targets(list(labels))
