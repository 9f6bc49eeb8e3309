"""Recurrent criss-cross attention (RCCA-3D) under structures a, b, c and d."""

import logging
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import FrozenSet, Optional, Tuple, Union

import numpy as np

from config import VARIANTS, parse_fraction
from criss_cross import (
    CcaCache,
    CcaWeights,
    Grid,
    Position,
    attend,
    cca3d_forward,
    check_gammas,
    check_position,
)
from tensor_core import FeatureMap4D, Matrix, ShapeError, axpy, channel_project

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RccaConfig:
    """Structure variant, recurrence count R and channel fraction C_d."""
    variant: str = 'a'
    recurrence: int = 3
    channel_fraction: Fraction = Fraction(1, 4)
    untied_gamma: bool = False

    def __post_init__(self):
        variant = str(self.variant).lower()
        if variant not in VARIANTS:
            raise ValueError(f"Unknown variant '{self.variant}', expected one of {VARIANTS}")
        object.__setattr__(self, 'variant', variant)
        if self.recurrence < 1:
            raise ValueError(f"Recurrence must be >= 1, got {self.recurrence}")
        object.__setattr__(self, 'channel_fraction', parse_fraction(self.channel_fraction))

    def inner_channels(self, channels: int) -> int:
        """C' = floor(C * C_d), at least 1."""
        return max(1, math.floor(channels * self.channel_fraction))


@dataclass(frozen=True)
class CcaWeightsC:
    """Structure c weights: V reduced to C' channels and restored by Wr (C x C')."""
    wq: Matrix
    wk: Matrix
    wv_reduced: Matrix
    wr: Matrix
    gamma: float = 1.0
    step_gammas: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.wq.shape != self.wk.shape or self.wv_reduced.shape != self.wq.shape:
            raise ShapeError(
                f"Wq {self.wq.shape}, Wk {self.wk.shape} and Wv {self.wv_reduced.shape} must match"
            )
        if self.wr.shape != (self.wq.cols, self.wq.rows):
            raise ShapeError(f"Wr {self.wr.shape} must be {(self.wq.cols, self.wq.rows)}")
        check_gammas(self.gamma, self.step_gammas)

    @classmethod
    def random(cls, channels: int, inner: int, rng: np.random.Generator,
               precision: int = 64, gamma: float = 1.0) -> 'CcaWeightsC':
        bound = 1.0 / np.sqrt(channels)
        return cls(
            wq=Matrix.uniform(inner, channels, bound, rng, precision),
            wk=Matrix.uniform(inner, channels, bound, rng, precision),
            wv_reduced=Matrix.uniform(inner, channels, bound, rng, precision),
            wr=Matrix.uniform(channels, inner, bound, rng, precision),
            gamma=gamma,
        )

    @property
    def channels(self) -> int:
        return self.wq.cols

    @property
    def inner(self) -> int:
        return self.wq.rows

    def value_matrices(self) -> Tuple[Matrix, ...]:
        return (self.wv_reduced, self.wr)

    def with_gamma(self, gamma: float) -> 'CcaWeightsC':
        return replace(self, gamma=float(gamma))

    def with_step_gammas(self, gammas) -> 'CcaWeightsC':
        return replace(self, step_gammas=tuple(float(g) for g in gammas))


AnyWeights = Union[CcaWeights, CcaWeightsC]


def make_weights(cfg: RccaConfig, channels: int, rng: np.random.Generator,
                 precision: int = 64, gamma: float = 1.0) -> AnyWeights:
    """Random weights shaped for ``cfg`` (gamma initialised to 1)."""
    inner = cfg.inner_channels(channels)
    factory = CcaWeightsC if cfg.variant == 'c' else CcaWeights
    weights = factory.random(channels, inner, rng, precision=precision, gamma=gamma)
    if cfg.untied_gamma:
        weights = weights.with_step_gammas([gamma] * cfg.recurrence)
    return weights


def reduced_cca_forward(x: FeatureMap4D, weights: CcaWeightsC) -> Tuple[FeatureMap4D, CcaCache]:
    """Structure c module: Wr @ aggregate(A, Wv_reduced X)."""
    if weights.channels != x.channels:
        raise ShapeError(f"Weights for C={weights.channels} cannot be applied to feature map {x.dims}")
    q, k, v, attention, hidden = attend(x, weights.wq, weights.wk, weights.wv_reduced)
    output = channel_project(hidden, weights.wr)
    cache = CcaCache(x=x, q=q, k=k, v=v, attention=attention, hidden=hidden,
                     output=output, weights=weights)
    return output, cache


def module_forward(x: FeatureMap4D, weights: AnyWeights) -> Tuple[FeatureMap4D, CcaCache]:
    """F(x) for either weight layout."""
    if isinstance(weights, CcaWeightsC):
        return reduced_cca_forward(x, weights)
    return cca3d_forward(x, weights)


def gamma_at(cfg: RccaConfig, weights: AnyWeights, step: int) -> float:
    if cfg.untied_gamma:
        return weights.step_gammas[step]
    return weights.gamma


def check_weights(cfg: RccaConfig, weights: AnyWeights, channels: int) -> None:
    expects_reduced = cfg.variant == 'c'
    if expects_reduced != isinstance(weights, CcaWeightsC):
        kind = 'CcaWeightsC' if expects_reduced else 'CcaWeights'
        raise ValueError(f"Variant '{cfg.variant}' needs {kind}, got {type(weights).__name__}")
    if weights.channels != channels:
        raise ShapeError(f"Weights for C={weights.channels} do not fit C={channels}")
    if cfg.untied_gamma and len(weights.step_gammas or ()) != cfg.recurrence:
        raise ValueError(f"Untied gamma needs {cfg.recurrence} step gammas, got {weights.step_gammas}")


@dataclass(frozen=True)
class RccaCache:
    """Per-application caches of one RCCA-3D forward pass."""
    config: RccaConfig
    weights: AnyWeights
    x: FeatureMap4D
    steps: Tuple[CcaCache, ...]


def _scaled(gamma: float, h: FeatureMap4D) -> FeatureMap4D:
    return FeatureMap4D(h.data.dtype.type(gamma) * h.data)


def rcca_forward(x: FeatureMap4D, cfg: RccaConfig,
                 weights: AnyWeights) -> Tuple[FeatureMap4D, RccaCache]:
    """Apply the shared CCA-3D module R times with the residuals of ``cfg.variant``.

    a, c: Y <- gamma F(Y) + X
    b:    Y <- gamma F(Y) + Y
    d:    Y <- gamma F(Y), with X added after the last application only
    """
    check_weights(cfg, weights, x.channels)
    y = x
    steps = []
    for step in range(cfg.recurrence):
        h, cache = module_forward(y, weights)
        steps.append(cache)
        gamma = gamma_at(cfg, weights, step)
        last = step == cfg.recurrence - 1
        if cfg.variant in ('a', 'c'):
            y = axpy(gamma, h, x)
        elif cfg.variant == 'b':
            y = axpy(gamma, h, y)
        elif last:
            y = axpy(gamma, h, x)
        else:
            y = _scaled(gamma, h)
    logger.debug(f"RCCA-3D variant {cfg.variant}, R={cfg.recurrence} on {x.dims}")
    return y, RccaCache(config=cfg, weights=weights, x=x, steps=tuple(steps))


# Reachability

def criss_cross_closure(reach: np.ndarray) -> np.ndarray:
    """One criss-cross step: u joins if any position on its three lines is reached."""
    return (reach
            | reach.any(axis=0, keepdims=True)
            | reach.any(axis=1, keepdims=True)
            | reach.any(axis=2, keepdims=True))


def influence_mask(recurrence: int, dims: Grid, v: Position) -> np.ndarray:
    """Boolean (T, H, W) grid of outputs that can depend on the input at ``v``."""
    if recurrence < 1:
        raise ValueError(f"Recurrence must be >= 1, got {recurrence}")
    dims = tuple(dims)
    check_position(v, dims)
    reach = np.zeros(dims, dtype=bool)
    reach[tuple(v)] = True
    for _ in range(recurrence):
        reach = criss_cross_closure(reach)
    return reach


def influence_set(cfg: RccaConfig, dims: Grid, v: Position) -> FrozenSet[Position]:
    """Positions whose RCCA-3D output can depend on the input at ``v``.

    Every structure routes information through R criss-cross steps and each
    path contains its anchor, so the set depends on R only.
    """
    mask = influence_mask(cfg.recurrence, dims, v)
    return frozenset(tuple(int(c) for c in p) for p in np.argwhere(mask))
