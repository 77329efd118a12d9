"""Synthetic paired detection domains.

Scenes are rendered as a pure function of ``(SceneSpec, seed, image index)``;
a :class:`DomainSpec` then alters appearance only, so a source and a target
image built from the same scene seed carry identical labels.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detection import Box, pairwise_iou_giou, xyxy_to_cxcywh

logger = logging.getLogger(__name__)

SHIFT_KINDS = ("none", "fog", "scene", "sim2real")
CLASS_NAMES = ("rectangle", "disc", "triangle")
# base RGB tint per class; per-object jitter is added on top
CLASS_TINTS = np.array([[0.85, 0.25, 0.2], [0.2, 0.75, 0.3], [0.25, 0.35, 0.9]])
FOG_GRAY = 0.65
# channel mixing used by the palette shift (roughly a hue rotation plus warm cast)
PALETTE_MIX = np.array([[0.2, 0.7, 0.1], [0.1, 0.3, 0.6], [0.7, 0.1, 0.2]])
PALETTE_OFFSET = np.array([0.12, 0.05, -0.05])


@dataclass(frozen=True)
class SceneSpec:
    count_range: tuple[int, int] = (1, 6)
    size_range: tuple[float, float] = (0.16, 0.38)
    num_classes: int = 3
    image_size: tuple[int, int] = (64, 64)
    background_range: tuple[float, float] = (0.25, 0.55)
    texture_amplitude: float = 0.04
    color_jitter: float = 0.08
    max_overlap_iou: float = 0.7
    max_retries: int = 30


@dataclass(frozen=True)
class DomainSpec:
    name: str = "source"
    shift: str = "none"
    strength: float = 0.0

    def __post_init__(self):
        if self.shift not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.shift!r}")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"shift strength must lie in [0, 1], got {self.strength}")


@dataclass
class Dataset:
    images: np.ndarray  # [n, 3, H, W]
    labels: list[list[tuple[int, Box]]]
    seed: int
    domain: DomainSpec
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = list(idx)
        return Dataset(self.images[idx], [self.labels[i] for i in idx], self.seed, self.domain, self.scene)


# ----------------------------------------------------------------- rendering


def _shape_mask(kind: int, x0: float, y0: float, w: float, h: float, H: int, W: int) -> np.ndarray:
    ys, xs = np.mgrid[0:H, 0:W] + 0.5
    u = (xs - x0) / w
    v = (ys - y0) / h
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if kind == 0:
        return inside
    if kind == 1:
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    # isosceles triangle, apex at top centre
    return inside & (np.abs(u - 0.5) <= 0.5 * v)


def _background(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    H, W = spec.image_size
    lo, hi = spec.background_range
    base = rng.uniform(lo, hi, size=3)
    grad = rng.uniform(-0.08, 0.08, size=(3, 2))
    ys, xs = np.mgrid[0:H, 0:W] / np.array([H, W])[:, None, None]
    img = base[:, None, None] + grad[:, 0, None, None] * (xs - 0.5) + grad[:, 1, None, None] * (ys - 0.5)
    coarse = rng.normal(0.0, 1.0, size=(3, H // 8, W // 8))
    img += spec.texture_amplitude * np.kron(coarse, np.ones((8, 8)))
    return img


def render_scene(spec: SceneSpec, seed: int, index: int) -> tuple[np.ndarray, list[tuple[int, Box]]]:
    """Render one clean scene; boxes are tight bounds of the drawn masks."""
    rng = np.random.default_rng([seed, index])
    H, W = spec.image_size
    img = _background(rng, spec)
    n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    labels: list[tuple[int, Box]] = []
    placed: list[np.ndarray] = []
    visible: list[np.ndarray] = []
    for _ in range(n):
        cls = int(rng.integers(spec.num_classes))
        color = np.clip(CLASS_TINTS[cls % len(CLASS_TINTS)] + rng.normal(0, spec.color_jitter, 3), 0.0, 1.0)
        for _attempt in range(spec.max_retries):
            size = rng.uniform(*spec.size_range)
            aspect = rng.uniform(0.75, 1.33) if cls == 0 else 1.0
            w_px, h_px = size * W * aspect, size * H / aspect
            x0 = rng.uniform(0, W - w_px)
            y0 = rng.uniform(0, H - h_px)
            mask = _shape_mask(cls, x0, y0, w_px, h_px, H, W)
            if mask.sum() < 4:
                continue
            rows, cols = np.nonzero(mask)
            xyxy = np.array([cols.min() / W, rows.min() / H, (cols.max() + 1) / W, (rows.max() + 1) / H])
            if placed and pairwise_iou_giou(xyxy_to_cxcywh(xyxy), xyxy_to_cxcywh(np.array(placed)))[0].max() > spec.max_overlap_iou:
                continue
            # keep at least half of every earlier object visible
            if any((v & ~mask).sum() < 0.5 * v.sum() for v in visible):
                continue
            img[:, mask] = color[:, None]
            visible = [v & ~mask for v in visible] + [mask]
            placed.append(xyxy)
            labels.append((cls, Box.from_array(xyxy_to_cxcywh(xyxy))))
            break
        else:
            logger.debug("skipped object after %d placement retries", spec.max_retries)
    return np.clip(img, 0.0, 1.0), labels


# ----------------------------------------------------------------- domain shift


def _box_blur(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    H, W = img.shape[1:]
    return sum(p[:, dy : dy + H, dx : dx + W] for dy in range(3) for dx in range(3)) / 9.0


def apply_domain(img: np.ndarray, domain: DomainSpec, seed: int, index: int) -> np.ndarray:
    """Appearance-only shift of a rendered image; strength 0 returns it unchanged."""
    s = domain.strength
    if domain.shift == "none" or s == 0.0:
        return img
    if domain.shift == "fog":
        # haze model I = J t + A (1 - t) with transmission falling toward the top row
        rng = np.random.default_rng([seed, index, 5])
        H, W = img.shape[1:]
        depth = 0.3 + 1.2 * (1.0 - (np.arange(H) + 0.5) / H)
        t = np.exp(-s * rng.uniform(1.5, 2.5) * depth)[:, None]
        airlight = FOG_GRAY + rng.uniform(-0.05, 0.05)
        return np.clip(img * t + airlight * (1.0 - t), 0.0, 1.0)
    if domain.shift == "scene":
        mixed = np.tensordot(PALETTE_MIX, img, axes=([1], [0])) + PALETTE_OFFSET[:, None, None]
        return np.clip((1.0 - s) * img + s * mixed, 0.0, 1.0)
    rng = np.random.default_rng([seed, index, 7])
    soft = _box_blur(img)
    noisy = soft + 0.12 * rng.normal(0.0, 1.0, img.shape)
    return np.clip((1.0 - s) * img + s * noisy, 0.0, 1.0)


def generate_dataset(scene: SceneSpec, domain: DomainSpec, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError("dataset needs at least one image")
    images = np.empty((n, 3, *scene.image_size))
    labels = []
    for i in range(n):
        img, lab = render_scene(scene, seed, i)
        images[i] = apply_domain(img, domain, seed, i)
        labels.append(lab)
    return Dataset(images, labels, seed, domain, scene)


@dataclass
class BenchmarkPair:
    name: str
    source_train: Dataset
    source_eval: Dataset
    target_train: Dataset
    target_eval: Dataset


BENCHMARK_DOMAINS = {
    "fog": (DomainSpec("clean", "none", 0.0), DomainSpec("foggy", "fog", 0.7)),
    "scene": (DomainSpec("paletteA", "none", 0.0), DomainSpec("paletteB", "scene", 0.7)),
    "sim2real": (DomainSpec("noisyTexture", "sim2real", 0.8), DomainSpec("cleanTexture", "none", 0.0)),
}


def make_pair(name: str, seed: int, n_train: int = 800, n_eval: int = 200, scene: SceneSpec | None = None) -> BenchmarkPair:
    scene = scene or SceneSpec()
    src, tgt = BENCHMARK_DOMAINS[name]
    base = seed * 1000
    return BenchmarkPair(
        name,
        generate_dataset(scene, src, n_train, base + 1),
        generate_dataset(scene, src, n_eval, base + 2),
        generate_dataset(scene, tgt, n_train, base + 3),
        generate_dataset(scene, tgt, n_eval, base + 4),
    )


def benchmark_suite(seed: int, n_train: int = 800, n_eval: int = 200) -> list[BenchmarkPair]:
    """The three source/target pairs: clean->fog, palette A->B, noisy->clean texture."""
    return [make_pair(name, seed, n_train, n_eval) for name in BENCHMARK_DOMAINS]


# ----------------------------------------------------------------- serialization


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(ds.images):
        np.save(d / f"{i:05d}.npy", img)
    labels = [[{"class": c, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h} for c, b in lab] for lab in ds.labels]
    (d / "labels.json").write_text(json.dumps(labels))
    meta = {"seed": ds.seed, "domain": asdict(ds.domain), "scene": asdict(ds.scene), "count": len(ds)}
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True))
    return d


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    if not (d / "labels.json").exists():
        raise FileNotFoundError(f"no dataset at {d}")
    meta = json.loads((d / "meta.json").read_text())
    raw = json.loads((d / "labels.json").read_text())
    images = np.stack([np.load(d / f"{i:05d}.npy") for i in range(meta["count"])])
    labels = [[(int(o["class"]), Box(o["cx"], o["cy"], o["w"], o["h"])) for o in lab] for lab in raw]
    scene = SceneSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["scene"].items()})
    return Dataset(images, labels, meta["seed"], DomainSpec(**meta["domain"]), scene)
