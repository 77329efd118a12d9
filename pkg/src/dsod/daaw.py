"""Stability-driven selection of the fusion weight and its warmup schedule."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .detection import Detection, pairwise_iou_giou

DEFAULT_CANDIDATES = tuple(round(0.05 * i, 2) for i in range(11))
DEFAULT_SAMPLES = 50
DEFAULT_K = 10


@dataclass(frozen=True)
class InstancePair:
    init: Detection
    fused: Detection | None
    iou: float = 0.0

    @property
    def c_init(self) -> float:
        return self.init.score

    @property
    def c_fuse(self) -> float:
        # score of the fused detection at the init detection's class
        return 0.0 if self.fused is None else self.fused.prob(self.init.class_id)


@dataclass(frozen=True)
class WeightSchedule:
    w_star: tuple[float, ...]
    n_warm: int

    def __post_init__(self):
        if any(w < 0 for w in self.w_star):
            raise ValueError("target fusion weights must be non-negative")
        if self.n_warm < 1:
            raise ValueError("warmup length must be at least one iteration")


def warmup_weight(i: int, schedule: WeightSchedule) -> tuple[float, ...]:
    """Square-root ramp ``min(sqrt(i / N_warm), 1) * w*`` per level."""
    if i < 0:
        raise ValueError("iteration must be non-negative")
    ramp = min(math.sqrt(i / schedule.n_warm), 1.0)
    return tuple(ramp * w for w in schedule.w_star)


# ----------------------------------------------------------------- stability


def pair_instances(init: Sequence[Detection], fused: Sequence[Detection], K: int) -> list[InstancePair]:
    """Pair the K most confident init detections with their max-IoU fused detection."""
    if not init:
        return []
    top = sorted(init, key=lambda d: -d.score)[:K]
    if not fused:
        return [InstancePair(d, None) for d in top]
    a = np.array([d.box.as_array() for d in top])
    b = np.array([d.box.as_array() for d in fused])
    ious, _ = pairwise_iou_giou(a, b)
    pairs = []
    for k, d in enumerate(top):
        j = int(np.argmax(ious[k]))  # first index on ties
        best = float(ious[k, j])
        pairs.append(InstancePair(d, fused[j], best) if best > 0 else InstancePair(d, None))
    return pairs


def stability_cls(pairs: Sequence[InstancePair]) -> float:
    """One minus the mean clamped relative score change."""
    if not pairs:
        raise ValueError("stability needs at least one instance pair")
    terms = [1.0 if p.fused is None else min(abs(p.c_init - p.c_fuse) / p.c_init, 1.0) for p in pairs]
    return 1.0 - math.fsum(terms) / len(terms)


def stability_loc(pairs: Sequence[InstancePair]) -> float:
    if not pairs:
        raise ValueError("stability needs at least one instance pair")
    return math.fsum(p.iou if p.fused is not None else 0.0 for p in pairs) / len(pairs)


def stability_joint(s_cls: float, s_loc: float) -> float:
    """Geometric mean; drops in either factor are penalized harder than by the average."""
    for v in (s_cls, s_loc):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"stability scores must lie in [0, 1], got {v}")
    return math.sqrt(s_cls * s_loc)


# ----------------------------------------------------------------- selection


@dataclass
class StabilityReport:
    weights: list[float]
    s_cls: list[float]
    s_loc: list[float]
    s_joint: list[float]
    selected: int

    def __post_init__(self):
        n = len(self.weights)
        if n < 3 or not (len(self.s_cls) == len(self.s_loc) == len(self.s_joint) == n):
            raise ValueError("report needs at least three aligned candidates")
        if any(b <= a for a, b in zip(self.weights, self.weights[1:])):
            raise ValueError("candidate weights must be strictly ascending")
        if not 0 < self.selected < n - 1:
            raise ValueError("selected candidate must be interior")

    @property
    def w_star(self) -> float:
        return self.weights[self.selected]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["w", "s_cls", "s_loc", "s_joint", "selected"])
        for i, w in enumerate(self.weights):
            writer.writerow([repr(float(w)), repr(self.s_cls[i]), repr(self.s_loc[i]), repr(self.s_joint[i]), int(i == self.selected)])
        return buf.getvalue()


def elbow_index(curve: Sequence[float]) -> int:
    """Interior index of the largest absolute second difference (lowest index on ties)."""
    s = np.asarray(curve, dtype=np.float64)
    if s.size < 3:
        raise ValueError("elbow detection needs at least three points")
    d2 = s[2:] - 2.0 * s[1:-1] + s[:-2]
    return int(np.argmax(np.abs(d2))) + 1


def check_candidates(candidates: Sequence[float]) -> list[float]:
    w = [float(x) for x in candidates]
    if len(w) < 3:
        raise ValueError("need at least three candidate weights")
    if w[0] != 0.0:
        raise ValueError("first candidate weight must be 0")
    if any(b <= a for a, b in zip(w, w[1:])):
        raise ValueError("candidate weights must be strictly ascending")
    return w


def select_weight(
    init_model: Callable[[np.ndarray], list[list[Detection]]],
    fused_factory: Callable[[float], Callable[[np.ndarray], list[list[Detection]]]],
    images: np.ndarray,
    candidates: Sequence[float] = DEFAULT_CANDIDATES,
    K: int = DEFAULT_K,
) -> StabilityReport:
    """Sweep candidate weights and pick the elbow of the joint-stability curve.

    ``init_model(images)`` and ``fused_factory(w)(images)`` return per-image
    detections.  Per-image stabilities are reduced with ``fsum`` so the
    report does not depend on image order.
    """
    w = check_candidates(candidates)
    if len(images) == 0:
        raise ValueError("weight selection needs at least one image")
    base = init_model(images)
    cls_curve, loc_curve, joint_curve = [], [], []
    for weight in w:
        preds = fused_factory(weight)(images)
        c_terms, l_terms, j_terms = [], [], []
        for p_init, p_fused in zip(base, preds):
            pairs = pair_instances(p_init, p_fused, K)
            if not pairs:
                continue
            c, l = stability_cls(pairs), stability_loc(pairs)
            c_terms.append(c)
            l_terms.append(l)
            j_terms.append(stability_joint(c, l))
        n = max(len(j_terms), 1)
        cls_curve.append(math.fsum(c_terms) / n if c_terms else 1.0)
        loc_curve.append(math.fsum(l_terms) / n if l_terms else 1.0)
        joint_curve.append(math.fsum(j_terms) / n if j_terms else 1.0)
    return StabilityReport(w, cls_curve, loc_curve, joint_curve, elbow_index(joint_curve))
