"""Desk-scale dual-tower detector.

Student side: a patch-MLP pyramid encoder (C3/C4/C5 analogs) and a dense
per-cell head.  Foundation side: a frozen patch-MLP encoder on a
half-resolution copy of the image, aligned to each pyramid level by a 1x1
projection plus bilinear resize and fused additively.  An inverse projector
maps pyramid features back to the foundation grid for feature regularization.

Feature maps are stored channels-last, ``[B, h, w, C]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .detection import NMS_IOU, Detection, detections_from_arrays, nms
from .tensor import ParamStore, Tensor

logger = logging.getLogger(__name__)

LEVELS = ("c3", "c4", "c5")
FOUNDATION_PREFIX = "found."
PROJECTOR_PREFIXES = ("sse.", "inv.")
PRIOR_PROB = 0.01
BASE_STRIDE = 4
STD_EPS = 1e-3


@dataclass(frozen=True)
class DetectorConfig:
    image_size: tuple[int, int] = (64, 64)
    channels: int = 3
    strides: tuple[int, int, int] = (4, 8, 16)
    dims: tuple[int, int, int] = (32, 64, 128)
    hidden: tuple[int, int, int] = (64, 96, 128)
    foundation_dim: int = 96
    foundation_hidden: int = 128
    foundation_stride: int = 8
    inv_hidden: int = 64
    num_classes: int = 3
    top_n: int = 20
    window_cells: int = 3

    def __post_init__(self):
        H, W = self.image_size
        for s in (*self.strides, self.foundation_stride):
            if H % s or W % s:
                raise ValueError(f"stride {s} does not divide image size {self.image_size}")
        if len(self.strides) != 3 or len(self.dims) != 3:
            raise ValueError("exactly three pyramid levels are required")
        if self.foundation_stride % 2:
            raise ValueError("foundation stride must be even (half-resolution input)")

    def level_shape(self, level: int) -> tuple[int, int]:
        s = self.strides[level]
        return self.image_size[0] // s, self.image_size[1] // s

    @property
    def foundation_shape(self) -> tuple[int, int]:
        s = self.foundation_stride
        return self.image_size[0] // s, self.image_size[1] // s

    @property
    def num_cells(self) -> int:
        return sum(h * w for h, w in (self.level_shape(i) for i in range(3)))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ModelOutput:
    """All candidate predictions plus the intermediate feature maps.

    ``logits``/``boxes`` cover every cell of every level (``[B, N, C]`` and
    ``[B, N, 4]``); ``order`` holds the top-N candidate indices per image by
    max class probability.
    """

    cnn: list[Tensor]
    foundation: Tensor | None
    projected: list[Tensor] | None
    fused: list[Tensor]
    logits: Tensor
    boxes: Tensor
    order: np.ndarray = field(repr=False)

    def probs(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data))

    def top_arrays(self, b: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.order[b]
        return self.probs()[b, idx], self.boxes.data[b, idx]

    def detections(self, b: int) -> list[Detection]:
        """Top-N predictions of image ``b`` as :class:`Detection` objects."""
        p, bx = self.top_arrays(b)
        return detections_from_arrays(p, bx)


# ----------------------------------------------------------------- parameters


def _mlp(params: ParamStore, prefix: str, d_in: int, d_hid: int, d_out: int, rng, locked=False) -> None:
    params.add(prefix + "w1", T.glorot(rng, d_in, d_hid), locked=locked)
    params.add(prefix + "b1", np.zeros(d_hid), locked=locked)
    params.add(prefix + "w2", T.glorot(rng, d_hid, d_out), locked=locked)
    params.add(prefix + "b2", np.zeros(d_out), locked=locked)


def patch_dim(config: DetectorConfig, channels: int | None = None) -> int:
    return (channels or config.channels) * (config.window_cells * BASE_STRIDE) ** 2


def init_detector(config: DetectorConfig, rng: np.random.Generator) -> ParamStore:
    """CNN encoder + head parameters (the foundation-free detector)."""
    params = ParamStore()
    for i, name in enumerate(LEVELS):
        _mlp(params, f"cnn.{name}.", patch_dim(config), config.hidden[i], config.dims[i], rng)
    bias = np.zeros(config.num_classes + 4)
    bias[: config.num_classes] = -np.log((1 - PRIOR_PROB) / PRIOR_PROB)
    for i, name in enumerate(LEVELS):
        params.add(f"head.{name}.w", T.glorot(rng, config.dims[i], config.num_classes + 4))
        params.add(f"head.{name}.b", bias.copy())
    return params


def init_foundation(
    config: DetectorConfig, rng: np.random.Generator, params: ParamStore | None = None, locked: bool = True
) -> ParamStore:
    """Foundation-surrogate encoder parameters, permanently frozen unless ``locked=False``."""
    params = params if params is not None else ParamStore()
    _mlp(params, FOUNDATION_PREFIX, patch_dim(config), config.foundation_hidden, config.foundation_dim, rng, locked=locked)
    return params


def init_projectors(config: DetectorConfig, rng: np.random.Generator, params: ParamStore) -> ParamStore:
    """SSE projections (foundation -> level) and inverse projectors (level -> foundation)."""
    for i, name in enumerate(LEVELS):
        params.add(f"sse.{name}.w", T.glorot(rng, config.foundation_dim, config.dims[i]))
        params.add(f"sse.{name}.b", np.zeros(config.dims[i]))
    for i, name in enumerate(LEVELS):
        _mlp(params, f"inv.{name}.", config.dims[i], config.inv_hidden, config.foundation_dim, rng)
    return params


def has_foundation(params: ParamStore) -> bool:
    return FOUNDATION_PREFIX + "w1" in params


def is_foundation_branch_key(name: str) -> bool:
    return name.startswith(FOUNDATION_PREFIX) or name.startswith(PROJECTOR_PREFIXES)


# ----------------------------------------------------------------- encoders


def _batch(images) -> np.ndarray:
    arr = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    return arr[None] if arr.ndim == 3 else arr


def avg_pool(images: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return images
    B, C, H, W = images.shape
    return images.reshape(B, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))


def patchify(images: np.ndarray, stride: int, window_cells: int = 3) -> np.ndarray:
    """Overlapping windows of ``window_cells`` cells centred on each ``stride`` cell.

    Strides above :data:`BASE_STRIDE` first average-pool the image so every
    window holds ``(window_cells * BASE_STRIDE)**2`` pixels per channel:
    ``[B, C, H, W] -> [B, H/stride, W/stride, C * (window_cells * 4)**2]``.
    """
    images = avg_pool(images, max(stride // BASE_STRIDE, 1))
    s = min(stride, BASE_STRIDE)
    k = window_cells * s
    if k == s:
        B, C, H, W = images.shape
        cells = images.reshape(B, C, H // s, s, W // s, s).transpose(0, 2, 4, 1, 3, 5)
        return np.ascontiguousarray(cells).reshape(B, H // s, W // s, -1)
    lo = (k - s) // 2
    padded = np.pad(images, ((0, 0), (0, 0), (lo, k - s - lo), (lo, k - s - lo)))
    win = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    B, C, h, w = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5).reshape(B, h, w, -1))


def _apply_mlp(x, params: ParamStore, prefix: str) -> Tensor:
    hid = T.relu(T.linear(x, params[prefix + "w1"], params[prefix + "b1"]))
    return T.linear(hid, params[prefix + "w2"], params[prefix + "b2"])


def _check_image(config: DetectorConfig, images: np.ndarray) -> None:
    if images.ndim != 4 or images.shape[1:] != (config.channels, *config.image_size):
        raise ValueError(f"expected images [B, {config.channels}, {config.image_size[0]}, {config.image_size[1]}], got {images.shape}")


def encode_cnn(config: DetectorConfig, params: ParamStore, images) -> list[Tensor]:
    """Pyramid features ``[B, H/s, W/s, C_l]`` for the three levels."""
    images = _batch(images)
    _check_image(config, images)
    x = standardize(images, axes=(1, 2, 3))
    return [_apply_mlp(patchify(x, s, config.window_cells), params, f"cnn.{name}.") for name, s in zip(LEVELS, config.strides)]


def standardize(images: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Zero mean, unit spread over ``axes`` per image; a constant image maps to zeros."""
    n = math.prod(images.shape[a] for a in axes)
    mu = np.add.reduce(images, axis=axes, keepdims=True) / n
    dev = images - mu
    sd = np.sqrt(np.add.reduce(dev * dev, axis=axes, keepdims=True) / n)
    return dev / (sd + STD_EPS)


def half_resolution(images: np.ndarray) -> np.ndarray:
    return avg_pool(images, 2)


def encode_foundation(config: DetectorConfig, params: ParamStore, images, require_locked: bool = True) -> Tensor:
    """Frozen foundation feature ``[B, H/s_f, W/s_f, D_f]`` from a half-resolution copy.

    Each image is standardized per channel first, so global brightness and
    contrast changes do not reach the encoder; every output location is
    layer-normalized.  ``require_locked=False`` is
    only for pretraining the surrogate itself.
    """
    images = _batch(images)
    _check_image(config, images)
    for name in (FOUNDATION_PREFIX + k for k in ("w1", "b1", "w2", "b2")):
        if require_locked and name not in params.locked:
            raise PermissionError(f"foundation parameter {name!r} must stay frozen")
    x = standardize(half_resolution(images), axes=(2, 3))
    return T.layer_norm(_apply_mlp(patchify(x, config.foundation_stride // 2, config.window_cells), params, FOUNDATION_PREFIX))


def sse_project(config: DetectorConfig, params: ParamStore, foundation, level: int) -> Tensor:
    """1x1 projection to level ``level``'s width, then bilinear resize to its grid."""
    name = LEVELS[level]
    proj = T.linear(foundation, params[f"sse.{name}.w"], params[f"sse.{name}.b"])
    h, w = config.level_shape(level)
    return T.bilinear_resize(proj, h, w, axes=(1, 2))


def ufi_fuse(cnn: Sequence, projected: Sequence, weights: Sequence[float]) -> list[Tensor]:
    """Additive fusion ``cnn_l + w_l * proj_l``; a zero weight returns ``cnn_l`` itself."""
    if not (len(cnn) == len(projected) == len(weights)):
        raise ValueError("levels, projections and weights must align")
    out = []
    for c, p, w in zip(cnn, projected, weights):
        if c.shape != p.shape:
            raise T.ShapeError(f"fusion shape mismatch {c.shape} vs {p.shape}")
        out.append(c if w == 0 else c + p * float(w))
    return out


def inverse_project(config: DetectorConfig, params: ParamStore, cnn: Sequence) -> list[Tensor]:
    """Per level: MLP to the foundation width, then resize to the foundation grid."""
    fh, fw = config.foundation_shape
    return [
        T.bilinear_resize(_apply_mlp(f, params, f"inv.{name}."), fh, fw, axes=(1, 2))
        for name, f in zip(LEVELS, cnn)
    ]


# ----------------------------------------------------------------- head


@lru_cache(maxsize=64)
def _decode_constants(batch: int, shapes: tuple[tuple[int, int], ...]) -> tuple[np.ndarray, np.ndarray]:
    """Per-candidate box scale and cell offset ``[B, N, 4]`` for levels of the given grid shapes."""
    scales, offsets = [], []
    for h, w in shapes:
        scale = np.broadcast_to(np.array([1.0 / w, 1.0 / h, 0.5, 0.5]), (batch, h, w, 4))
        offset = np.zeros((batch, h, w, 4))
        offset[..., 0] = np.arange(w)[None, None, :] / w
        offset[..., 1] = np.arange(h)[None, :, None] / h
        scales.append(scale.reshape(batch, h * w, 4))
        offsets.append(offset.reshape(batch, h * w, 4))
    scale, offset = np.concatenate(scales, axis=1), np.concatenate(offsets, axis=1)
    scale.flags.writeable = offset.flags.writeable = False
    return scale, offset


def head(config: DetectorConfig, params: ParamStore, features: Sequence) -> tuple[Tensor, Tensor]:
    """Dense per-cell class logits ``[B, N, C]`` and decoded boxes ``[B, N, 4]``."""
    C = config.num_classes
    outs, shapes = [], []
    for name, f in zip(LEVELS, features):
        B, h, w, _ = f.shape
        outs.append(T.reshape(T.linear(f, params[f"head.{name}.w"], params[f"head.{name}.b"]), (B, h * w, C + 4)))
        shapes.append((h, w))
    out = T.concat(outs, axis=1)
    scale, offset = _decode_constants(out.shape[0], tuple(shapes))
    return out[:, :, :C], T.sigmoid(out[:, :, C:]) * scale + offset


@lru_cache(maxsize=8)
def cell_bounds(config: DetectorConfig) -> np.ndarray:
    """Normalized ``x0, y0, x1, y1`` of every candidate cell, in head order."""
    rows = []
    for i in range(3):
        h, w = config.level_shape(i)
        ys, xs = np.mgrid[0:h, 0:w]
        rows.append(np.stack([xs / w, ys / h, (xs + 1) / w, (ys + 1) / h], axis=-1).reshape(-1, 4))
    return np.concatenate(rows)


def top_order(logits: np.ndarray, top_n: int) -> np.ndarray:
    """Per-image candidate indices sorted by max class probability (stable)."""
    score = logits.max(axis=-1)
    return np.argsort(-score, axis=-1, kind="stable")[:, :top_n]


# ----------------------------------------------------------------- masking


def apply_mask(images, ratio: float, patch: int, rng: np.random.Generator) -> np.ndarray:
    """Zero each ``patch x patch`` block independently with probability ``ratio``."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 3
    x = arr[None] if single else arr
    B, C, H, W = x.shape
    if H % patch or W % patch:
        raise ValueError(f"patch {patch} does not divide image size {(H, W)}")
    keep = rng.random((B, H // patch, W // patch)) >= ratio
    full = np.repeat(np.repeat(keep, patch, axis=1), patch, axis=2)[:, None]
    out = x * full
    return out[0] if single else out


# ----------------------------------------------------------------- forward


def forward(
    config: DetectorConfig,
    params: ParamStore,
    images,
    weights: Sequence[float] | None = None,
    use_foundation: bool = True,
    mask: tuple[float, int, np.random.Generator] | None = None,
) -> ModelOutput:
    """Full detector pass.

    ``weights`` are the per-level fusion weights; the foundation branch runs
    only when ``use_foundation`` is set and the foundation parameters exist.
    ``mask`` is ``(ratio, patch, rng)`` for the masked-consistency branch.
    """
    images = _batch(images)
    if mask is not None:
        ratio, patch, rng = mask
        if ratio > 0:
            images = apply_mask(images, ratio, patch, rng)
    cnn = encode_cnn(config, params, images)
    foundation = projected = None
    fused = cnn
    if use_foundation and has_foundation(params):
        w = tuple(weights) if weights is not None else (0.0, 0.0, 0.0)
        if len(w) == 1:
            w = w * 3
        foundation = encode_foundation(config, params, images)
        if any(x != 0 for x in w):
            projected = [sse_project(config, params, foundation, i) for i in range(3)]
            fused = ufi_fuse(cnn, projected, w)
    logits, boxes = head(config, params, fused)
    return ModelOutput(cnn, foundation, projected, fused, logits, boxes, top_order(logits.data, config.top_n))


def predict(
    config: DetectorConfig,
    params: ParamStore,
    images,
    weights=None,
    use_foundation=True,
    batch_size: int = 50,
    nms_iou: float | None = NMS_IOU,
) -> list[list[Detection]]:
    """Inference (no tape): top-N detections per image, class-wise NMS unless ``nms_iou`` is None."""
    images = _batch(images)
    out: list[list[Detection]] = []
    for start in range(0, len(images), batch_size):
        res = forward(config, params, images[start : start + batch_size], weights, use_foundation)
        for b in range(res.logits.shape[0]):
            dets = res.detections(b)
            out.append(nms(dets, nms_iou) if nms_iou is not None else dets)
    return out
