"""Dense attention references: masked all-pairs CCA oracle and the non-local block."""

import logging
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from criss_cross import Grid, Position, path_table
from rcca import AnyWeights, RccaConfig, check_weights, gamma_at
from tensor_core import FeatureMap4D, Matrix, ShapeError, axpy, channel_project

logger = logging.getLogger(__name__)

# Stand-in for -inf before the softmax; exp underflows to exactly 0 after max-subtraction.
MASKED_SCORE = -1e30

PairPredicate = Callable[[Position, Position], bool]
Mask = Union[np.ndarray, PairPredicate]


def _positions(grid: Grid):
    return [tuple(int(c) for c in p) for p in np.ndindex(*grid)]


def criss_cross_mask(grid: Grid) -> np.ndarray:
    """(N, N) boolean matrix, True where v lies on the criss-cross path of u."""
    grid = tuple(grid)
    n = int(np.prod(grid))
    mask = np.zeros((n, n), dtype=bool)
    table = path_table(grid)
    mask[np.arange(n)[:, None], table] = True
    return mask


def full_mask(grid: Grid) -> np.ndarray:
    n = int(np.prod(grid))
    return np.ones((n, n), dtype=bool)


def self_mask(grid: Grid) -> np.ndarray:
    return np.eye(int(np.prod(grid)), dtype=bool)


def resolve_mask(mask: Mask, grid: Grid) -> np.ndarray:
    """Turn a pair predicate into an (N, N) matrix; arrays are checked and passed through."""
    n = int(np.prod(grid))
    if callable(mask):
        positions = _positions(grid)
        mask = np.array([[bool(mask(u, v)) for v in positions] for u in positions], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise ShapeError(f"Mask of shape {mask.shape} does not fit grid {tuple(grid)} (N={n})")
    if not mask.any(axis=1).all():
        raise ValueError('Every position must attend to at least one position')
    return mask


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def masked_dense_cca_oracle(x: FeatureMap4D, weights: AnyWeights, mask: Mask) -> FeatureMap4D:
    """All-pairs scores Q_u . K_v, masked pairs sent to -inf, softmax, then aggregate V.

    Structure c weights restore the reduced values with Wr after aggregation.
    """
    if weights.channels != x.channels:
        raise ShapeError(f"Weights for C={weights.channels} cannot be applied to feature map {x.dims}")
    allowed = resolve_mask(mask, x.grid)
    value, *restore = weights.value_matrices()
    q = channel_project(x, weights.wq).flat()
    k = channel_project(x, weights.wk).flat()
    v = channel_project(x, value).flat()
    scores = np.where(allowed, q.T @ k, MASKED_SCORE)
    probs = _softmax_rows(scores)
    out = v @ probs.T
    for matrix in restore:
        out = matrix.data.astype(out.dtype, copy=False) @ out
    return FeatureMap4D(out.reshape((out.shape[0],) + x.grid))


def masked_dense_rcca_oracle(x: FeatureMap4D, cfg: RccaConfig, weights: AnyWeights) -> FeatureMap4D:
    """RCCA-3D recomposed from the dense criss-cross oracle, same residual rules."""
    check_weights(cfg, weights, x.channels)
    mask = criss_cross_mask(x.grid)
    y = x
    for step in range(cfg.recurrence):
        h = masked_dense_cca_oracle(y, weights, mask)
        gamma = gamma_at(cfg, weights, step)
        if cfg.variant == 'b':
            y = axpy(gamma, h, y)
        elif cfg.variant == 'd' and step < cfg.recurrence - 1:
            y = axpy(gamma, h, FeatureMap4D.zeros(x.dims, x.precision))
        else:
            y = axpy(gamma, h, x)
    return y


@dataclass(frozen=True)
class NonLocalWeights:
    """Embedded dot-product non-local block: theta, phi, g (C/2 x C) and z (C x C/2)."""
    w_theta: Matrix
    w_phi: Matrix
    w_g: Matrix
    w_z: Matrix

    def __post_init__(self):
        bottleneck, channels = self.w_theta.shape
        if self.w_phi.shape != (bottleneck, channels) or self.w_g.shape != (bottleneck, channels):
            raise ShapeError(
                f"theta {self.w_theta.shape}, phi {self.w_phi.shape} and g {self.w_g.shape} must match"
            )
        if self.w_z.shape != (channels, bottleneck):
            raise ShapeError(f"z {self.w_z.shape} must be {(channels, bottleneck)}")
        if bottleneck != channels // 2:
            raise ShapeError(f"Bottleneck {bottleneck} must be floor(C/2) = {channels // 2}")

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, precision: int = 64) -> 'NonLocalWeights':
        if channels < 2:
            raise ValueError(f"Non-local block needs C >= 2, got {channels}")
        bottleneck = channels // 2
        bound = 1.0 / np.sqrt(channels)
        return cls(
            w_theta=Matrix.uniform(bottleneck, channels, bound, rng, precision),
            w_phi=Matrix.uniform(bottleneck, channels, bound, rng, precision),
            w_g=Matrix.uniform(bottleneck, channels, bound, rng, precision),
            w_z=Matrix.uniform(channels, bottleneck, bound, rng, precision),
        )

    @property
    def channels(self) -> int:
        return self.w_theta.cols

    @property
    def bottleneck(self) -> int:
        return self.w_theta.rows


def nonlocal_attention(x: FeatureMap4D, weights: NonLocalWeights) -> np.ndarray:
    """(N, N) row-stochastic matrix softmax_v(theta_u . phi_v)."""
    theta = channel_project(x, weights.w_theta).flat()
    phi = channel_project(x, weights.w_phi).flat()
    return _softmax_rows(theta.T @ phi)


def nonlocal_forward(x: FeatureMap4D, weights: NonLocalWeights) -> FeatureMap4D:
    """Z = Wz y + X with y_u = sum_v softmax_v(theta_u . phi_v) g_v."""
    if weights.channels != x.channels:
        raise ShapeError(f"Weights for C={weights.channels} cannot be applied to feature map {x.dims}")
    y = channel_project(x, weights.w_g).flat() @ nonlocal_attention(x, weights).T
    z = weights.w_z.data.astype(x.dtype, copy=False) @ y
    return FeatureMap4D(z.reshape(x.dims) + x.data)
