import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsod import model as M
from dsod.daaw import (
    DEFAULT_CANDIDATES,
    InstancePair,
    StabilityReport,
    WeightSchedule,
    elbow_index,
    pair_instances,
    select_weight,
    stability_cls,
    stability_joint,
    stability_loc,
    warmup_weight,
)
from dsod.detection import Box, Detection

unit = st.floats(0.0, 1.0)


def det(cx, score, cls=0, w=0.2):
    return Detection(Box(cx, 0.5, w, w), cls, score)


def curve_model(curve, weights):
    """One perfectly localized instance whose fused score is S(w)**2, so S_joint(w) = S(w)."""
    lookup = dict(zip(weights, curve))

    def init_model(images):
        return [[det(0.5, 1.0)] for _ in images]

    def factory(w):
        return lambda images: [[det(0.5, lookup[w] ** 2)] for _ in images]

    return init_model, factory


class TestPairing:
    def test_identical(self):
        preds = [det(0.2, 0.9), det(0.6, 0.7)]
        pairs = pair_instances(preds, preds, K=10)
        assert len(pairs) == 2 and all(p.iou == 1.0 and p.fused == p.init for p in pairs)

    def test_no_overlap_unmatched(self):
        pairs = pair_instances([det(0.2, 0.9, w=0.1)], [det(0.8, 0.9, w=0.1)], K=10)
        assert pairs[0].fused is None

    def test_top_k_truncation(self):
        init = [det(0.1 * i, 0.1 * i) for i in range(1, 8)]
        pairs = pair_instances(init, init, K=3)
        assert [p.init.score for p in pairs] == pytest.approx([0.7, 0.6, 0.5])

    def test_empty(self):
        assert pair_instances([], [det(0.5, 0.5)], K=3) == []

    def test_class_score_read_at_init_class(self):
        fused = Detection(Box(0.5, 0.5, 0.2, 0.2), 1, 0.7, probs=(0.2, 0.7))
        (pair,) = pair_instances([det(0.5, 0.4, cls=0)], [fused], K=1)
        assert pair.c_fuse == 0.2


class TestStability:
    def test_cls_examples(self):
        a, b = det(0.2, 0.8), det(0.6, 0.5)
        pairs = [InstancePair(a, det(0.2, 0.4), 1.0), InstancePair(b, b, 1.0)]
        assert stability_cls(pairs) == 0.75
        assert stability_cls([InstancePair(a, a, 1.0)]) == 1.0
        assert stability_cls([InstancePair(a, None), InstancePair(b, None)]) == 0.0

    def test_cls_clamped(self):
        a = det(0.2, 0.2)
        assert stability_cls([InstancePair(a, det(0.2, 0.9), 1.0)]) == 0.0

    def test_loc_examples(self):
        a = det(0.5, 0.5)
        assert stability_loc([InstancePair(a, a, 1.0)]) == 1.0
        assert stability_loc([InstancePair(a, a, 1 / 7), InstancePair(a, a, 1.0)]) == pytest.approx(0.5714, abs=1e-4)
        assert stability_loc([InstancePair(a, None)]) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            stability_cls([])
        with pytest.raises(ValueError):
            stability_loc([])

    def test_joint_examples(self):
        assert stability_joint(1.0, 1.0) == 1.0
        assert stability_joint(0.64, 0.25) == pytest.approx(0.4, abs=1e-12)
        assert stability_joint(0.0, 0.9) == 0.0

    def test_joint_range(self):
        with pytest.raises(ValueError):
            stability_joint(1.2, 0.5)

    @given(unit, unit)
    def test_am_gm(self, a, b):
        g = stability_joint(a, b)
        assert g <= (a + b) / 2 + 1e-15
        if abs(a - b) > 1e-6:
            assert g < (a + b) / 2


class TestElbow:
    W5 = [0.0, 0.1, 0.2, 0.3, 0.4]
    S5 = [1.00, 0.99, 0.97, 0.80, 0.50]

    def test_digitized_curve(self):
        assert elbow_index(self.S5) == 2

    def test_digitized_curve_through_sweep(self):
        init, factory = curve_model(self.S5, self.W5)
        report = select_weight(init, factory, np.zeros((4, 1)), self.W5)
        assert report.s_joint == pytest.approx(self.S5, abs=1e-12)
        assert report.w_star == 0.2

    def test_flat_ties_to_first_interior(self):
        assert elbow_index([0.7] * 6) == 1

    def test_too_short(self):
        with pytest.raises(ValueError):
            elbow_index([1.0, 0.5])

    @settings(max_examples=200)
    @given(st.lists(unit, min_size=3, max_size=15))
    def test_always_interior(self, curve):
        assert 0 < elbow_index(curve) < len(curve) - 1

    @pytest.mark.parametrize("cands", [[0.0, 0.1], [0.1, 0.2, 0.3], [0.0, 0.2, 0.1]])
    def test_bad_candidates(self, cands):
        init, factory = curve_model([1.0] * len(cands), cands)
        with pytest.raises(ValueError):
            select_weight(init, factory, np.zeros((1, 1)), cands)

    def test_no_images(self):
        init, factory = curve_model(self.S5, self.W5)
        with pytest.raises(ValueError):
            select_weight(init, factory, np.zeros((0, 1)), self.W5)


class TestWarmup:
    S = WeightSchedule((0.2, 0.4, 0.1), n_warm=100)

    def test_examples(self):
        assert warmup_weight(0, self.S) == (0.0, 0.0, 0.0)
        assert warmup_weight(25, self.S) == pytest.approx((0.1, 0.2, 0.05), abs=1e-15)
        assert warmup_weight(100, self.S) == self.S.w_star
        assert warmup_weight(10_000, self.S) == self.S.w_star

    def test_invalid(self):
        with pytest.raises(ValueError):
            warmup_weight(-1, self.S)
        with pytest.raises(ValueError):
            WeightSchedule((0.1, -0.1, 0.1), 10)
        with pytest.raises(ValueError):
            WeightSchedule((0.1,) * 3, 0)

    @given(st.integers(1, 500), st.integers(0, 1000))
    def test_monotone(self, n, i):
        s = WeightSchedule((0.3,) * 3, n)
        assert warmup_weight(i, s)[0] <= warmup_weight(i + 1, s)[0]

    def test_continuous_at_end(self):
        s = WeightSchedule((0.3,) * 3, 400)
        assert warmup_weight(399, s)[0] == pytest.approx(0.3, abs=1e-3)


class TestSweepOnModel:
    @pytest.fixture
    def sweep(self, tiny_config, tiny_params, tiny_images):
        def init_model(imgs):
            return M.predict(tiny_config, tiny_params, imgs, use_foundation=False)

        def factory(w):
            return lambda imgs: M.predict(tiny_config, tiny_params, imgs, (w,) * 3, use_foundation=True)

        return lambda imgs: select_weight(init_model, factory, imgs, DEFAULT_CANDIDATES, K=5)

    def test_zero_weight_is_exactly_stable(self, sweep, tiny_images):
        report = sweep(tiny_images)
        assert report.s_cls[0] == report.s_loc[0] == report.s_joint[0] == 1.0
        assert 0 < report.selected < len(report.weights) - 1

    def test_image_order_invariant(self, sweep, tiny_images):
        a = sweep(tiny_images)
        b = sweep(tiny_images[::-1].copy())
        assert a.to_csv() == b.to_csv()


class TestReport:
    def test_csv(self):
        r = StabilityReport([0.0, 0.1, 0.2], [1.0, 0.9, 0.5], [1.0, 0.8, 0.6], [1.0, 0.85, 0.55], 1)
        rows = list(csv.DictReader(io.StringIO(r.to_csv())))
        assert list(rows[0]) == ["w", "s_cls", "s_loc", "s_joint", "selected"]
        assert [int(x["selected"]) for x in rows] == [0, 1, 0]
        assert float(rows[2]["s_joint"]) == 0.55

    def test_rejects_boundary_selection(self):
        with pytest.raises(ValueError):
            StabilityReport([0.0, 0.1, 0.2], [1.0] * 3, [1.0] * 3, [1.0] * 3, 0)
