import math

import numpy as np
import pytest

from adasemicd.uncertainty import (
    MAX_PLOGP,
    U_LOWER_BOUND,
    ClassWeights,
    batch_class_weights,
    margin_map,
    per_class_entropy,
    rebalanced_entropy,
    sample_uncertainty,
    score_map,
    uncertainty_map,
)


def probmap(p0, p1, h=1, w=1):
    out = np.empty((2, h, w), dtype=np.float64)
    out[0] = p0
    out[1] = p1
    return out


def scalar_u(p0, p1, w0, w1):
    """Independent scalar oracle for the full per-pixel score."""
    e0 = 0.0 if p0 == 0 else -p0 * math.log2(p0)
    e1 = 0.0 if p1 == 0 else -p1 * math.log2(p1)
    return 1.0 - abs(p1 - p0) * (w1 * e0 + w0 * e1)


class TestPerClassEntropy:
    def test_half_half(self):
        e = per_class_entropy(probmap(0.5, 0.5))
        np.testing.assert_allclose(e, 0.5, atol=1e-15)

    def test_one_hot_convention(self):
        e = per_class_entropy(probmap(1.0, 0.0))
        np.testing.assert_array_equal(e, 0.0)

    def test_quarter_oracle(self):
        e = per_class_entropy(probmap(0.25, 0.75))
        assert e[0, 0, 0] == pytest.approx(0.5, abs=1e-12)
        assert e[1, 0, 0] == pytest.approx(-0.75 * math.log2(0.75), abs=1e-12)
        assert e[1, 0, 0] == pytest.approx(0.3113, abs=5e-5)

    def test_channel_bound(self):
        rng = np.random.default_rng(0)
        p1 = rng.random((64, 64))
        e = per_class_entropy(np.stack([1.0 - p1, p1]))
        assert e.max() <= MAX_PLOGP


class TestBatchClassWeights:
    def test_all_zeros(self):
        w = batch_class_weights([np.zeros((4, 4), dtype=np.int8)])
        assert (w.w0, w.w1) == (1.0, 0.0)

    def test_half_changed(self):
        m = np.zeros((2, 2), dtype=np.int8)
        m[0] = 1
        w = batch_class_weights([m])
        assert (w.w0, w.w1) == (0.5, 0.5)

    def test_one_in_four(self):
        m = np.zeros((2, 2), dtype=np.int8)
        m[0, 0] = 1
        w = batch_class_weights([m])
        assert (w.w0, w.w1) == (0.75, 0.25)

    def test_sums_to_one_property(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            masks = [
                rng.integers(0, 2, size=(5, 7)).astype(np.int8) for _ in range(4)
            ]
            w = batch_class_weights(masks)
            assert w.w0 + w.w1 == pytest.approx(1.0, abs=1e-6)

    def test_empty_batch_errors(self):
        with pytest.raises(ValueError):
            batch_class_weights([])

    def test_rejects_ignore(self):
        with pytest.raises(ValueError):
            batch_class_weights([np.full((2, 2), -1, dtype=np.int8)])


class TestRebalancedEntropy:
    def test_symmetric_entropy_is_weight_free(self):
        e = per_class_entropy(probmap(0.5, 0.5))
        for w0 in (0.0, 0.3, 1.0):
            out = rebalanced_entropy(e, ClassWeights(w0, 1.0 - w0))
            np.testing.assert_allclose(out, 0.5, atol=1e-15)

    def test_degenerate_weights_select_channel(self):
        e = np.stack([np.full((1, 1), 0.11), np.full((1, 1), 0.37)])
        out = rebalanced_entropy(e, ClassWeights(w0=1.0, w1=0.0))
        assert out[0, 0] == pytest.approx(0.37)

    def test_scalar_oracle(self):
        e = np.stack([np.full((1, 1), 0.0143), np.full((1, 1), 0.0664)])
        out = rebalanced_entropy(e, ClassWeights(w0=0.95, w1=0.05))
        assert out[0, 0] == pytest.approx(0.05 * 0.0143 + 0.95 * 0.0664, abs=1e-12)
        assert out[0, 0] == pytest.approx(0.06380, abs=1e-5)

    def test_linear_in_weights(self):
        rng = np.random.default_rng(2)
        p1 = rng.random((6, 6))
        e = per_class_entropy(np.stack([1.0 - p1, p1]))
        wa, wb = ClassWeights(0.9, 0.1), ClassWeights(0.2, 0.8)
        for alpha in (0.0, 0.25, 0.7, 1.0):
            mix = ClassWeights(
                alpha * wa.w0 + (1 - alpha) * wb.w0, alpha * wa.w1 + (1 - alpha) * wb.w1
            )
            lhs = rebalanced_entropy(e, mix)
            rhs = alpha * rebalanced_entropy(e, wa) + (1 - alpha) * rebalanced_entropy(e, wb)
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestMarginMap:
    @pytest.mark.parametrize(
        "p0,p1,want", [(0.5, 0.5, 0.0), (1.0, 0.0, 1.0), (0.8, 0.2, 0.6)]
    )
    def test_values(self, p0, p1, want):
        assert margin_map(probmap(p0, p1))[0, 0] == pytest.approx(want)


class TestUncertaintyMap:
    def test_uniform_prediction_gives_one(self):
        u = uncertainty_map(probmap(0.5, 0.5, 3, 3), ClassWeights(0.5, 0.5))
        np.testing.assert_allclose(u, 1.0, atol=1e-15)

    def test_one_hot_gives_one(self):
        u = uncertainty_map(probmap(1.0, 0.0), ClassWeights(0.9, 0.1))
        np.testing.assert_allclose(u, 1.0)

    def test_scalar_composition_oracle(self):
        u = uncertainty_map(probmap(0.99, 0.01), ClassWeights(0.95, 0.05))
        want = scalar_u(0.99, 0.01, 0.95, 0.05)
        assert u[0, 0] == pytest.approx(want, abs=1e-12)
        assert u[0, 0] == pytest.approx(0.9375, abs=1e-4)

    def test_equals_explicit_composition(self):
        rng = np.random.default_rng(3)
        p1 = rng.random((16, 16))
        p = np.stack([1.0 - p1, p1])
        w = ClassWeights(0.8, 0.2)
        expected = 1.0 - margin_map(p) * rebalanced_entropy(per_class_entropy(p), w)
        np.testing.assert_allclose(uncertainty_map(p, w), expected, atol=1e-6)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(4)
        p1 = rng.random((8, 8))
        p = np.stack([1.0 - p1, p1])
        swapped = p[::-1].copy()
        w = ClassWeights(0.7, 0.3)
        w_swapped = ClassWeights(0.3, 0.7)
        np.testing.assert_allclose(
            uncertainty_map(p, w), uncertainty_map(swapped, w_swapped), atol=1e-12
        )

    def test_bounds_property(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            p1 = rng.random((32, 32))
            p = np.stack([1.0 - p1, p1])
            w1 = rng.random()
            u = uncertainty_map(p, ClassWeights(1.0 - w1, w1))
            assert u.min() >= U_LOWER_BOUND - 1e-12
            assert u.max() <= 1.0 + 1e-12

    def test_relaxed_bound_grid_scan(self):
        # dense scan over p in [0, 1], step 1e-4: max -p*log2(p) and the
        # resulting worst-case D*E' stay below the relaxed constants
        p = np.arange(0.0, 1.0 + 1e-9, 1e-4)
        plogp = np.zeros_like(p)
        nz = p > 0
        plogp[nz] = -p[nz] * np.log2(p[nz])
        assert plogp.max() <= MAX_PLOGP
        # worst case over weights puts all weight on the larger channel entropy
        e0 = plogp
        e1 = np.zeros_like(p)
        nz1 = (1.0 - p) > 0
        e1[nz1] = -(1.0 - p[nz1]) * np.log2(1.0 - p[nz1])
        d = np.abs(1.0 - 2.0 * p)
        worst = d * np.maximum(e0, e1)
        assert worst.max() <= MAX_PLOGP
        assert (1.0 - worst).min() >= U_LOWER_BOUND


class TestSampleUncertainty:
    def test_constant_maps(self):
        assert sample_uncertainty(np.ones((4, 4))) == 1.0
        assert sample_uncertainty(np.full((4, 4), 0.8)) == pytest.approx(0.8)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(6)
        u = rng.random((9, 11))
        total = 0.0
        for y in range(9):
            for x in range(11):
                total += u[y, x]
        assert sample_uncertainty(u) == pytest.approx(total / (9 * 11), abs=1e-12)


class TestScoreMapModes:
    def setup_method(self):
        rng = np.random.default_rng(7)
        p1 = rng.random((5, 5))
        self.p = np.stack([1.0 - p1, p1])
        self.w = ClassWeights(0.9, 0.1)
        self.e = per_class_entropy(self.p)

    def test_entropy_mode(self):
        np.testing.assert_allclose(
            score_map(self.p, self.w, "entropy"), self.e[0] + self.e[1]
        )

    def test_rebalance_mode(self):
        np.testing.assert_allclose(
            score_map(self.p, self.w, "rebalance"), rebalanced_entropy(self.e, self.w)
        )

    def test_confusion_mode(self):
        want = margin_map(self.p) * (0.5 * self.e[0] + 0.5 * self.e[1])
        np.testing.assert_allclose(score_map(self.p, self.w, "confusion"), want)

    def test_uncertainty_mode(self):
        np.testing.assert_allclose(
            score_map(self.p, self.w, "uncertainty"), uncertainty_map(self.p, self.w)
        )

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            score_map(self.p, self.w, "bogus")
