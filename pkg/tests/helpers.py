"""Shared builders for gradient checks through the toy model."""

import numpy as np

from dsod import detection as D
from dsod import model as M
from dsod import tensor as T
from dsod.adapt import AdaptConfig, hard_objective, heatmap_from_boxes, safr_loss
from dsod.detection import Box, Detection
from dsod.distill import DistillConfig, distill_loss, soft_static_loss

# one input channel and two features per level keep a full
# central-difference sweep over every trainable entry near one second
GRAD_CONFIG = M.DetectorConfig(
    image_size=(16, 16),
    channels=1,
    dims=(2, 2, 2),
    hidden=(2, 2, 2),
    foundation_dim=2,
    foundation_hidden=2,
    inv_hidden=2,
    top_n=5,
    window_cells=1,
)


def random_state(config: M.DetectorConfig, seed: int):
    """Hybrid model with non-trivial biases plus one input image.

    Zero biases and the low prior on the head leave many gradients near
    1e-9, where central differences are dominated by rounding; random
    biases keep every active path well conditioned.
    """
    rng = np.random.default_rng(seed)
    params = M.init_detector(config, rng)
    M.init_foundation(config, rng, params)
    M.init_projectors(config, rng, params)
    for name, t in params.items():
        if name.rsplit(".", 1)[-1].startswith("b") and name not in params.locked:
            t.data = rng.normal(0.0, 0.5, t.shape)
    image = rng.uniform(0.0, 1.0, size=(1, config.channels, *config.image_size))
    return params, image


LABELS = [[Detection(Box(0.3, 0.3, 0.25, 0.2), 0, 0.8), Detection(Box(0.7, 0.65, 0.3, 0.25), 2, 0.6)]]
WEIGHTS = (0.3, 0.3, 0.3)


def det_loss(config, params, image):
    """Set-matching detection loss of the fused model."""
    out = M.forward(config, params, image, WEIGHTS)
    targets = [(np.array([d.class_id for d in lab]), np.array([d.box.as_array() for d in lab])) for lab in LABELS]
    return D.batch_detection_loss(out.logits, out.boxes, targets, cells=M.cell_bounds(config))


def reg_loss(config, params, image):
    """Heatmap-weighted feature regularizer through the CNN encoder and inverse projectors."""
    fh, fw = config.foundation_shape
    hm = np.stack([heatmap_from_boxes(lab, fh, fw) for lab in LABELS])
    cnn = M.encode_cnn(config, params, image)
    return safr_loss(M.inverse_project(config, params, cnn), M.encode_foundation(config, params, image), hm)


def adapt_total(config, params, image):
    """Normal + masked detection loss + weighted regularizer."""
    cfg = AdaptConfig(mask_patch=4)
    total, _ = hard_objective(config, params, image, LABELS, cfg, WEIGHTS, np.random.default_rng(5), True)
    return total


def _soft_targets(config, seed):
    rng = np.random.default_rng([seed, 1])
    probs = rng.uniform(0.05, 0.95, size=(3, config.num_classes))
    boxes = np.column_stack([rng.uniform(0.2, 0.8, (3, 2)), rng.uniform(0.1, 0.3, (3, 2))])
    return probs, boxes


def soft_loss(config, params, image, seed=0, out=None):
    """Soft static-teacher loss on the foundation-free student."""
    if out is None:
        out = M.forward(config, params, image, use_foundation=False)
    probs, boxes = _soft_targets(config, seed)
    return soft_static_loss(out.logits[0], out.boxes[0], probs, boxes, cells=M.cell_bounds(config))


def distill_total(config, params, image, seed=0):
    """EMA hard + static hard + soft terms with the default weights."""
    cfg = DistillConfig(mask_patch=4)
    out = M.forward(config, params, image, use_foundation=False)
    targets = [(np.array([d.class_id for d in lab]), np.array([d.box.as_array() for d in lab])) for lab in LABELS]
    static_targets = [(targets[0][0][:1], targets[0][1][:1])]
    cells = M.cell_bounds(config)
    hard_ema = D.batch_detection_loss(out.logits, out.boxes, targets, cells=cells)
    hard_static = D.batch_detection_loss(out.logits, out.boxes, static_targets, cells=cells)
    return distill_loss(hard_ema, hard_static, soft_loss(config, params, image, seed, out), cfg)


def detector_only(params):
    """Freeze the foundation-branch projectors: the distillation student has none."""
    for name in params.keys():
        if M.is_foundation_branch_key(name) and name not in params.frozen:
            params.freeze(name)
    return params


def check(loss_builder, seed, student=False):
    params, image = random_state(GRAD_CONFIG, seed)
    if student:
        detector_only(params)
    if loss_builder in (soft_loss, distill_total):
        return T.grad_check(lambda: loss_builder(GRAD_CONFIG, params, image, seed), params)
    return T.grad_check(lambda: loss_builder(GRAD_CONFIG, params, image), params)


LOSSES = {
    "detection": (det_loss, False),
    "regularizer": (reg_loss, False),
    "soft_static": (soft_loss, True),
    "adaptation": (adapt_total, False),
    "distillation": (distill_total, True),
}
