import timeit

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from criss_cross import cca3d_forward
from nonlocal_ref import (
    NonLocalWeights,
    criss_cross_mask,
    full_mask,
    masked_dense_cca_oracle,
    nonlocal_attention,
    nonlocal_forward,
    resolve_mask,
    self_mask,
)
from rcca import RccaConfig, make_weights, rcca_forward
from tensor_core import FeatureMap4D, Matrix, ShapeError, max_abs_diff


class TestMaskedDenseOracle:
    def test_full_mask_single_position(self, random_map, random_weights):
        x = random_map((4, 1, 1, 1))
        w = random_weights(4, 2)
        assert max_abs_diff(masked_dense_cca_oracle(x, w, full_mask(x.grid)), cca3d_forward(x, w)[0]) <= 1e-14

    def test_self_mask_is_value_projection(self, random_map, random_weights):
        x = random_map((3, 2, 2, 3))
        w = random_weights(3, 1)
        out = masked_dense_cca_oracle(x, w, self_mask(x.grid))
        assert_allclose(out.flat(), w.wv.data @ x.flat(), atol=1e-14)

    def test_predicate_mask_matches_array(self, random_map, random_weights):
        x = random_map((3, 2, 3, 3))
        w = random_weights(3, 2)
        predicate = lambda u, v: sum(a == b for a, b in zip(u, v)) >= 2
        assert_array_equal(resolve_mask(predicate, x.grid), criss_cross_mask(x.grid))
        assert max_abs_diff(masked_dense_cca_oracle(x, w, predicate),
                            masked_dense_cca_oracle(x, w, criss_cross_mask(x.grid))) == 0.0

    def test_criss_cross_mask_row_counts(self):
        mask = criss_cross_mask((3, 4, 5))
        assert (mask.sum(axis=1) == 10).all()
        assert (mask == mask.T).all()

    @pytest.mark.parametrize('trial', range(10))
    def test_equals_cca3d_forward(self, trial):
        rng = np.random.default_rng(trial)
        c, t, h, w = (int(rng.integers(1, 9)), int(rng.integers(1, 4)),
                      int(rng.integers(1, 7)), int(rng.integers(1, 7)))
        x = FeatureMap4D.random((c, t, h, w), rng, precision=64)
        weights = make_weights(RccaConfig(channel_fraction='1/2'), c, rng)
        out, _ = cca3d_forward(x, weights)
        assert max_abs_diff(out, masked_dense_cca_oracle(x, weights, criss_cross_mask(x.grid))) <= 1e-10

    def test_mask_validation(self, random_map, random_weights):
        x = random_map((2, 2, 2, 2))
        w = random_weights(2, 1)
        with pytest.raises(ShapeError):
            masked_dense_cca_oracle(x, w, np.ones((3, 3), dtype=bool))
        with pytest.raises(ValueError):
            masked_dense_cca_oracle(x, w, np.zeros((8, 8), dtype=bool))


def loop_nonlocal(x, w):
    """Literal per-position reference."""
    n = int(np.prod(x.grid))
    flat = x.flat()
    theta, phi, g = (m.data @ flat for m in (w.w_theta, w.w_phi, w.w_g))
    y = np.zeros((w.bottleneck, n))
    for u in range(n):
        scores = np.array([theta[:, u] @ phi[:, v] for v in range(n)])
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        for v in range(n):
            y[:, u] += weights[v] * g[:, v]
    return (w.w_z.data @ y + flat).reshape(x.dims)


class TestNonLocal:
    def test_zero_output_projection_is_identity(self, rng, random_map):
        x = random_map((4, 2, 3, 3))
        w = NonLocalWeights.random(4, rng)
        zero_z = NonLocalWeights(w.w_theta, w.w_phi, w.w_g, Matrix(np.zeros((4, 2))))
        assert_array_equal(nonlocal_forward(x, zero_z).data, x.data)

    def test_single_position(self, rng, random_map):
        x = random_map((4, 1, 1, 1))
        w = NonLocalWeights.random(4, rng)
        expected = w.w_z.data @ (w.w_g.data @ x.flat()) + x.flat()
        assert_allclose(nonlocal_forward(x, w).flat(), expected, atol=1e-14)

    def test_matches_loop_reference(self, rng, random_map):
        x = random_map((4, 2, 2, 2))
        w = NonLocalWeights.random(4, rng)
        assert_allclose(nonlocal_forward(x, w).data, loop_nonlocal(x, w), atol=1e-10)

    def test_position_permutation_equivariance(self, rng, random_map):
        x = random_map((4, 2, 3, 3))
        w = NonLocalWeights.random(4, rng)
        perm = rng.permutation(18)
        permuted = FeatureMap4D(x.flat()[:, perm].reshape(x.dims))
        out = nonlocal_forward(x, w).flat()
        out_perm = nonlocal_forward(permuted, w).flat()
        inverse = np.argsort(perm)
        assert_allclose(out_perm[:, inverse], out, atol=1e-6)

    def test_attention_rows_are_distributions(self, rng, random_map):
        x = random_map((4, 2, 3, 3), scale=10.0)
        probs = nonlocal_attention(x, NonLocalWeights.random(4, rng))
        assert probs.shape == (18, 18)
        assert (probs >= 0).all()
        assert_allclose(probs.sum(axis=1), np.ones(18), atol=1e-12)

    def test_bottleneck_is_half(self, rng):
        w = NonLocalWeights.random(7, rng)
        assert w.bottleneck == 3 and w.w_z.shape == (7, 3)
        with pytest.raises(ValueError):
            NonLocalWeights.random(1, rng)
        with pytest.raises(ShapeError):
            NonLocalWeights(w.w_theta, w.w_phi, w.w_g, Matrix(np.zeros((7, 2))))

    def test_channel_mismatch(self, rng, random_map):
        with pytest.raises(ShapeError):
            nonlocal_forward(random_map((6, 1, 2, 2)), NonLocalWeights.random(4, rng))


@pytest.mark.slow
def test_rcca_faster_than_nonlocal(rng):
    x = FeatureMap4D.random((64, 8, 28, 28), rng, precision=32)
    cfg = RccaConfig('a', 3)
    weights = make_weights(cfg, 64, rng, precision=32)
    nl_weights = NonLocalWeights.random(64, rng, precision=32)

    def median_time(fn, repeats=3):
        fn()
        samples = []
        for _ in range(repeats):
            start = timeit.default_timer()
            fn()
            samples.append(timeit.default_timer() - start)
        return float(np.median(samples))

    rcca_time = median_time(lambda: rcca_forward(x, cfg, weights))
    nl_time = median_time(lambda: nonlocal_forward(x, nl_weights))
    assert nl_time / rcca_time > 1.0
