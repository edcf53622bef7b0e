"""Sparsity-metric tests: worked values against an extended-precision oracle,
bound/invariance properties, aggregation, and the conv cross-check."""

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from naslab.errors import ConfigurationError, DataError
from naslab.metrics import (LayerNasSnapshot, ReceptiveFieldGrid, layer_nas,
                            nas_of_vector, patch_gather_conv2d,
                            receptive_field_vectors, scatter_field_vectors,
                            sparsity_values)
from naslab.nn import Conv2D

# frozen from the 60-digit mpmath evaluation below
WORKED_SPARSITY = 0.1226173246983383594538541


def mp_sparsity(values):
    """Extended-precision oracle for the sparsity of one activation vector."""
    with mp.workdps(60):
        vals = [mp.mpf(v) for v in values]
        exps = [mp.e**v for v in vals]
        total = sum(exps)
        p = [e / total for e in exps]
        entropy = -sum(pi * mp.log(pi) for pi in p if pi > 0)
        return float(1 - (mp.e**entropy) / len(vals))


class TestReceptiveFieldVectors:
    def test_dense_input_single_vector(self, rng):
        pre = rng.standard_normal((3, 5))
        vectors, grid = receptive_field_vectors(pre)
        assert grid == ReceptiveFieldGrid(1, 1, 5)
        assert grid.count == 1
        np.testing.assert_array_equal(vectors[:, 0, :], pre)

    def test_linear_index_layout(self, rng):
        pre = rng.standard_normal((2, 3, 4, 4))
        vectors, grid = receptive_field_vectors(pre)
        # k = m * N + n: position (2, 3) with N=4 lands at k=11
        assert grid.linear_index(2, 3) == 11
        np.testing.assert_array_equal(vectors[:, 11, :], pre[:, :, 2, 3])
        for m in range(4):
            for n in range(4):
                np.testing.assert_array_equal(
                    vectors[:, grid.linear_index(m, n), :], pre[:, :, m, n])

    def test_scatter_round_trip(self, rng):
        pre = rng.standard_normal((2, 6, 3, 5))
        vectors, grid = receptive_field_vectors(pre)
        np.testing.assert_array_equal(scatter_field_vectors(vectors, grid), pre)

    def test_single_channel_rejected(self):
        with pytest.raises(ConfigurationError, match="D >= 2"):
            receptive_field_vectors(np.zeros((1, 1, 2, 2)))


class TestNasOfVector:
    def test_uniform_vector_fully_dense(self):
        value = nas_of_vector(np.zeros(4))
        np.testing.assert_allclose(value.probabilities, 0.25)
        np.testing.assert_allclose(value.entropy, np.log(4.0), rtol=1e-12)
        np.testing.assert_allclose(value.perplexity, 4.0, rtol=1e-12)
        np.testing.assert_allclose(value.score, 1.0, rtol=1e-12)
        assert abs(value.sparsity) < 1e-12

    def test_worked_value_against_oracle(self):
        value = nas_of_vector(np.array([np.log(3.0), 0.0]))
        np.testing.assert_allclose(value.probabilities, [0.75, 0.25], rtol=1e-12)
        assert abs(value.sparsity - WORKED_SPARSITY) < 1e-9
        assert abs(value.sparsity - mp_sparsity([np.log(3.0), 0.0])) < 1e-9

    def test_saturated_vector_reaches_max(self):
        value = nas_of_vector(np.array([50.0, 0.0, 0.0, 0.0]))
        assert abs(value.sparsity - 0.75) < 1e-9

    def test_huge_values_stay_stable(self):
        value = nas_of_vector(np.array([1e6, 0.0, -1e6]))
        assert np.isfinite(value.sparsity)
        assert abs(value.sparsity - (1.0 - 1.0 / 3.0)) < 1e-9

    def test_non_finite_rejected(self):
        with pytest.raises(DataError, match="conv9"):
            nas_of_vector(np.array([1.0, np.nan]), context="conv9")

    def test_short_vector_rejected(self):
        with pytest.raises(ConfigurationError):
            nas_of_vector(np.array([1.0]))

    def test_matches_oracle_on_random_vectors(self, rng):
        for d in (2, 3, 8):
            for scale in (0.1, 1.0, 30.0):
                a = rng.standard_normal(d) * scale
                value = nas_of_vector(a)
                assert abs(value.sparsity - mp_sparsity(a)) < 1e-9


class TestBoundsAndInvariances:
    def test_bounds_fuzz_all_widths(self, rng):
        for d in (2, 4, 16, 64, 512):
            scale = np.exp(rng.uniform(-3, 3, size=(2000, 1)))
            vectors = rng.standard_normal((2000, d)) * scale
            s = sparsity_values(vectors)
            assert s.min() >= -1e-9
            assert s.max() <= 1.0 - 1.0 / d + 1e-9

    @given(arrays(np.float64, st.integers(2, 16),
                  elements=st.floats(-1e4, 1e4)),
           st.floats(-1e3, 1e3))
    @settings(max_examples=200, deadline=None)
    def test_shift_invariance(self, a, c):
        s0 = nas_of_vector(a).sparsity
        s1 = nas_of_vector(a + c).sparsity
        assert abs(s0 - s1) < 1e-9

    @given(arrays(np.float64, st.integers(2, 16),
                  elements=st.floats(-50, 50)),
           st.randoms(use_true_random=False))
    @settings(max_examples=200, deadline=None)
    def test_permutation_invariance(self, a, pyrandom):
        order = list(range(len(a)))
        pyrandom.shuffle(order)
        s0 = nas_of_vector(a).sparsity
        s1 = nas_of_vector(a[order]).sparsity
        assert abs(s0 - s1) < 1e-9

    @given(arrays(np.float64, st.integers(2, 64),
                  elements=st.floats(-1e6, 1e6)))
    @settings(max_examples=300, deadline=None)
    def test_bounds_property(self, a):
        d = len(a)
        s = nas_of_vector(a).sparsity
        assert -1e-9 <= s <= 1.0 - 1.0 / d + 1e-9

    def test_monotone_saturation(self):
        # one spiking channel: sparsity grows with the spike and tops out
        d = 8
        ts = np.linspace(0.0, 60.0, 200)
        s = np.array([nas_of_vector(np.r_[t, np.zeros(d - 1)]).sparsity for t in ts])
        assert np.all(np.diff(s) >= -1e-12)
        assert abs(s[-1] - (1.0 - 1.0 / d)) < 1e-9
        assert abs(s[0]) < 1e-12

    def test_scaling_changes_sparsity(self):
        # softmax is not scale invariant; guard against accidental
        # normalisation sneaking in
        a = np.array([1.0, 0.0])
        s1 = nas_of_vector(a).sparsity
        s2 = nas_of_vector(2.0 * a).sparsity
        assert abs(s1 - s2) > 1e-6


class TestLayerNas:
    def test_constant_tensor_all_zero(self):
        snap = layer_nas(np.full((3, 4, 2, 2), 1.7), layer="conv1")
        assert snap.minimum == snap.median == snap.maximum == 0.0
        np.testing.assert_array_equal(snap.grid, 0.0)
        assert snap.channels == 4

    def test_single_sample_single_position(self, rng):
        pre = rng.standard_normal((1, 6, 1, 1))
        snap = layer_nas(pre)
        expected = nas_of_vector(pre[0, :, 0, 0]).sparsity
        for got in (snap.minimum, snap.median, snap.maximum, snap.grid[0, 0]):
            np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_median_matches_bruteforce(self, rng):
        # oracle: per-vector values collected independently, sort-based median
        pre = rng.standard_normal((4, 5, 3, 3)) * 2.0
        snap = layer_nas(pre, heatmap_sample=2)
        pooled = sorted(
            nas_of_vector(pre[b, :, m, n]).sparsity
            for b in range(4) for m in range(3) for n in range(3))
        mid = len(pooled) // 2
        want = (pooled[mid - 1] + pooled[mid]) / 2 if len(pooled) % 2 == 0 \
            else pooled[mid]
        np.testing.assert_allclose(snap.median, want, rtol=1e-12)
        np.testing.assert_allclose(snap.minimum, pooled[0], rtol=1e-12)
        np.testing.assert_allclose(snap.maximum, pooled[-1], rtol=1e-12)
        np.testing.assert_allclose(
            snap.grid[1, 2], nas_of_vector(pre[2, :, 1, 2]).sparsity, rtol=1e-12)

    def test_dense_snapshot_single_cell(self, rng):
        snap = layer_nas(rng.standard_normal((5, 7)), layer="fc1")
        assert snap.grid.shape == (1, 1)

    def test_vectorized_matches_per_vector(self, rng):
        vectors = rng.standard_normal((40, 9)) * 5.0
        fast = sparsity_values(vectors)
        slow = np.array([nas_of_vector(v).sparsity for v in vectors])
        np.testing.assert_allclose(fast, slow, atol=1e-12)

    def test_non_finite_identified(self):
        pre = np.zeros((1, 3, 2, 2))
        pre[0, 1, 1, 0] = np.inf
        with pytest.raises(DataError, match="conv2"):
            layer_nas(pre, layer="conv2")

    def test_bad_heatmap_sample(self, rng):
        with pytest.raises(ConfigurationError):
            layer_nas(rng.standard_normal((2, 3, 2, 2)), heatmap_sample=5)


class TestPatchOracle:
    def test_identity_kernel_case(self, rng):
        layer = Conv2D(1, 2, 1, bias=False, rng=rng, dtype=np.float64)
        layer.weights[:] = 1.0
        x = np.full((1, 1, 1, 1), 3.25)
        np.testing.assert_array_equal(patch_gather_conv2d(x, layer),
                                      layer.forward(x))

    def test_zero_input(self, rng):
        layer = Conv2D(2, 3, 3, padding=1, rng=rng, dtype=np.float64)
        layer.bias[:] = 0.0
        np.testing.assert_array_equal(
            patch_gather_conv2d(np.zeros((1, 2, 4, 4)), layer), 0.0)

    def test_cross_check_randomized(self, rng):
        for _ in range(25):
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(2, 6))
            kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            layer = Conv2D(cin, cout, (kh, kw),
                           stride=(int(rng.integers(1, 3)), int(rng.integers(1, 3))),
                           padding=(int(rng.integers(0, 3)), int(rng.integers(0, 3))),
                           rng=rng, dtype=np.float64)
            x = rng.standard_normal(
                (int(rng.integers(1, 4)), cin,
                 int(rng.integers(kh, kh + 6)), int(rng.integers(kw, kw + 6))))
            diff = np.abs(layer.forward(x) - patch_gather_conv2d(x, layer)).max()
            assert diff <= 1e-6
