from fractions import Fraction

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from criss_cross import CcaWeights, cca3d_forward
from nonlocal_ref import masked_dense_rcca_oracle
from rcca import (
    CcaWeightsC,
    RccaConfig,
    influence_mask,
    influence_set,
    make_weights,
    rcca_forward,
    reduced_cca_forward,
)
from tensor_core import FeatureMap4D, ShapeError, axpy, channel_project, max_abs_diff

VARIANTS = ['a', 'b', 'c', 'd']


def positions(dims):
    return [tuple(int(c) for c in p) for p in np.ndindex(*dims)]


class TestRccaConfig:
    def test_defaults(self):
        cfg = RccaConfig()
        assert (cfg.variant, cfg.recurrence, cfg.channel_fraction) == ('a', 3, Fraction(1, 4))

    def test_inner_channels(self):
        assert RccaConfig().inner_channels(512) == 128
        assert RccaConfig().inner_channels(3) == 1
        assert RccaConfig(channel_fraction='0.5').inner_channels(7) == 3

    @pytest.mark.parametrize('kwargs', [{'recurrence': 0}, {'variant': 'e'}, {'channel_fraction': '3/2'}])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            RccaConfig(**kwargs)


class TestRccaForward:
    @pytest.mark.parametrize('variant', VARIANTS)
    @pytest.mark.parametrize('recurrence', [1, 2, 3])
    def test_gamma_zero_is_identity(self, rng, random_map, variant, recurrence):
        x = random_map((4, 2, 3, 3))
        cfg = RccaConfig(variant, recurrence, Fraction(1, 2))
        y, _ = rcca_forward(x, cfg, make_weights(cfg, 4, rng, gamma=0.0))
        assert_array_equal(y.data, x.data)

    def test_single_recurrence_a_equals_b(self, rng, random_map):
        x = random_map((4, 2, 3, 3))
        weights = make_weights(RccaConfig('a', 1), 4, rng)
        ya, _ = rcca_forward(x, RccaConfig('a', 1), weights)
        yb, _ = rcca_forward(x, RccaConfig('b', 1), weights)
        assert_array_equal(ya.data, yb.data)

    def test_variant_a_step_by_step(self, rng, random_map):
        x = random_map((6, 2, 3, 3))
        cfg = RccaConfig('a', 3, Fraction(1, 2))
        weights = make_weights(cfg, 6, rng)
        y, _ = rcca_forward(x, cfg, weights)
        expected = x
        for _ in range(3):
            expected = axpy(weights.gamma, cca3d_forward(expected, weights)[0], x)
        assert max_abs_diff(y, expected) == 0.0

    def test_variant_b_and_d_step_by_step(self, rng, random_map):
        x = random_map((4, 2, 2, 3))
        weights = make_weights(RccaConfig('b'), 4, rng, gamma=0.8)
        f = lambda m: cca3d_forward(m, weights)[0]

        y_b, _ = rcca_forward(x, RccaConfig('b', 3), weights)
        expected_b = x
        for _ in range(3):
            expected_b = axpy(0.8, f(expected_b), expected_b)
        assert max_abs_diff(y_b, expected_b) == 0.0

        y_d, _ = rcca_forward(x, RccaConfig('d', 3), weights)
        inner = FeatureMap4D(0.8 * f(FeatureMap4D(0.8 * f(x).data)).data)
        assert max_abs_diff(y_d, axpy(0.8, f(inner), x)) <= 1e-14

    def test_variant_c_uses_reduced_values(self, rng, random_map):
        x = random_map((4, 2, 3, 3))
        cfg = RccaConfig('c', 1, Fraction(1, 2))
        weights = make_weights(cfg, 4, rng)
        assert isinstance(weights, CcaWeightsC)
        assert weights.wv_reduced.shape == (2, 4) and weights.wr.shape == (4, 2)
        h, cache = reduced_cca_forward(x, weights)
        assert cache.hidden.channels == 2
        assert max_abs_diff(h, channel_project(cache.hidden, weights.wr)) == 0.0
        y, _ = rcca_forward(x, cfg, weights)
        assert max_abs_diff(y, axpy(weights.gamma, h, x)) == 0.0

    @pytest.mark.parametrize('variant', VARIANTS)
    def test_matches_dense_oracle(self, rng, random_map, variant):
        x = random_map((6, 2, 3, 3))
        cfg = RccaConfig(variant, 3, Fraction(1, 2))
        weights = make_weights(cfg, 6, rng)
        y, _ = rcca_forward(x, cfg, weights)
        assert max_abs_diff(y, masked_dense_rcca_oracle(x, cfg, weights)) <= 1e-10

    @pytest.mark.parametrize('variant', VARIANTS)
    def test_zero_input_gives_zero_output(self, rng, variant):
        cfg = RccaConfig(variant, 3)
        x = FeatureMap4D.zeros((4, 2, 2, 2), precision=64)
        y, _ = rcca_forward(x, cfg, make_weights(cfg, 4, rng))
        assert not y.data.any()

    def test_weights_shared_across_steps(self, rng, random_map):
        cfg = RccaConfig('a', 3)
        weights = make_weights(cfg, 4, rng)
        _, cache = rcca_forward(random_map((4, 2, 2, 2)), cfg, weights)
        assert len(cache.steps) == 3
        assert all(step.weights is weights for step in cache.steps)

    def test_untied_gammas(self, rng, random_map):
        x = random_map((4, 2, 2, 2))
        cfg = RccaConfig('a', 3, untied_gamma=True)
        weights = make_weights(cfg, 4, rng).with_step_gammas([0.0, 0.0, 0.0])
        y, _ = rcca_forward(x, cfg, weights)
        assert_array_equal(y.data, x.data)
        with pytest.raises(ValueError):
            rcca_forward(x, cfg, weights.with_step_gammas([1.0]))

    def test_weight_kind_must_match_variant(self, rng, random_map):
        x = random_map((4, 2, 2, 2))
        with pytest.raises(ValueError):
            rcca_forward(x, RccaConfig('c'), CcaWeights.random(4, 1, rng))
        with pytest.raises(ValueError):
            rcca_forward(x, RccaConfig('a'), CcaWeightsC.random(4, 1, rng))


class TestInfluenceSet:
    def test_single_step_is_star(self):
        dims, v = (4, 5, 6), (1, 2, 3)
        expected = {u for u in positions(dims) if sum(a == b for a, b in zip(u, v)) >= 2}
        assert influence_set(RccaConfig('a', 1), dims, v) == expected
        assert len(expected) == 4 + 5 + 6 - 2

    def test_two_steps_share_a_coordinate(self):
        dims, v = (4, 5, 6), (3, 0, 5)
        expected = {u for u in positions(dims) if any(a == b for a, b in zip(u, v))}
        assert influence_set(RccaConfig('b', 2), dims, v) == expected

    def test_three_steps_cover_grid(self):
        dims = (4, 5, 6)
        for variant in VARIANTS:
            assert influence_set(RccaConfig(variant, 3), dims, (2, 2, 2)) == set(positions(dims))

    @pytest.mark.slow
    def test_three_steps_exhaustive(self):
        for offsets in np.ndindex(4, 4, 4):
            dims = tuple(d + 2 for d in offsets)
            for v in np.ndindex(*dims):
                assert influence_mask(3, dims, v).all()

    def test_out_of_range_source(self):
        with pytest.raises(ShapeError):
            influence_set(RccaConfig(), (2, 2, 2), (0, 2, 0))

    @pytest.mark.parametrize('variant', VARIANTS)
    @pytest.mark.parametrize('recurrence', [1, 2])
    def test_matches_perturbation(self, rng, random_map, variant, recurrence):
        x = random_map((4, 3, 4, 4))
        cfg = RccaConfig(variant, recurrence, Fraction(1, 2))
        weights = make_weights(cfg, 4, rng)
        v = (2, 1, 3)
        bumped = x.data.copy()
        bumped[(slice(None),) + v] += 1e-3
        change = np.abs(rcca_forward(FeatureMap4D(bumped), cfg, weights)[0].data
                        - rcca_forward(x, cfg, weights)[0].data).max(axis=0)
        mask = influence_mask(recurrence, x.grid, v)
        assert not change[~mask].any()
        assert np.mean(change[mask] > 1e-12) >= 0.99
