"""3D criss-cross attention (CCA-3D): paths, affinity, softmax, aggregation."""

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np

from tensor_core import (
    FeatureMap4D,
    Matrix,
    NonFiniteError,
    ShapeError,
    channel_project,
)

logger = logging.getLogger(__name__)

Position = Tuple[int, int, int]
Grid = Tuple[int, int, int]

# Array axes of the (C|L, T, H, W) layout, in path order.
TEMPORAL, VERTICAL, HORIZONTAL = 1, 2, 3
_AXES = (TEMPORAL, VERTICAL, HORIZONTAL)


def path_length(grid: Grid) -> int:
    t, h, w = grid
    return t + h + w - 2


def check_position(u: Position, grid: Grid) -> None:
    if len(u) != 3 or any(not 0 <= c < n for c, n in zip(u, grid)):
        raise ShapeError(f"Position {tuple(u)} is outside grid {tuple(grid)}")


@dataclass(frozen=True)
class CrissCrossPath:
    """Ordered criss-cross neighbourhood of an anchor position."""
    anchor: Position
    entries: Tuple[Position, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def path_indices(u: Position, dims: Grid) -> CrissCrossPath:
    """Temporal line (anchor included), then vertical and horizontal lines without it."""
    check_position(u, dims)
    t, h, w = u
    big_t, big_h, big_w = dims
    entries = [(tp, h, w) for tp in range(big_t)]
    entries += [(t, hp, w) for hp in range(big_h) if hp != h]
    entries += [(t, h, wp) for wp in range(big_w) if wp != w]
    return CrissCrossPath(anchor=(t, h, w), entries=tuple(entries))


@lru_cache(maxsize=32)
def path_table(dims: Grid) -> np.ndarray:
    """Flat position index of every path entry, shape (T*H*W, L), row-major anchors."""
    big_t, big_h, big_w = dims
    t, h, w = (a.reshape(-1, 1) for a in np.indices(dims))
    temporal = np.arange(big_t)[None, :] * big_h * big_w + h * big_w + w
    k = np.arange(big_h - 1)[None, :]
    vertical = t * big_h * big_w + (k + (k >= h)) * big_w + w
    k = np.arange(big_w - 1)[None, :]
    horizontal = (t * big_h + h) * big_w + (k + (k >= w))
    table = np.concatenate([temporal, vertical, horizontal], axis=1)
    table.flags.writeable = False
    return table


@dataclass(frozen=True)
class AttentionMap:
    """(L, T, H, W) scores or weights; fiber [:, u] follows path_indices(u)."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ShapeError(f"AttentionMap needs 4 dims, got shape {data.shape}")
        if data.shape[0] != path_length(data.shape[1:]):
            raise ShapeError(
                f"AttentionMap of shape {data.shape} needs {path_length(data.shape[1:])} path entries"
            )
        if not np.isfinite(data).all():
            raise NonFiniteError('AttentionMap contains non-finite values')
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, 'data', data)

    @property
    def grid(self) -> Grid:
        return self.data.shape[1:]

    @property
    def length(self) -> int:
        return self.data.shape[0]

    def segments(self) -> List[np.ndarray]:
        """Temporal (T), vertical (H-1) and horizontal (W-1) slices."""
        big_t, big_h, _ = self.grid
        return np.split(self.data, [big_t, big_t + big_h - 1], axis=0)


@dataclass(frozen=True)
class CcaWeights:
    """Learnable state of one CCA-3D module: Wq, Wk (C'xC), Wv (CxC) and gamma."""
    wq: Matrix
    wk: Matrix
    wv: Matrix
    gamma: float = 1.0
    step_gammas: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.wq.shape != self.wk.shape:
            raise ShapeError(f"Wq {self.wq.shape} and Wk {self.wk.shape} must match")
        if self.wv.rows != self.wv.cols or self.wv.cols != self.wq.cols:
            raise ShapeError(f"Wv {self.wv.shape} must be square over C={self.wq.cols}")
        check_gammas(self.gamma, self.step_gammas)

    @classmethod
    def random(cls, channels: int, inner: int, rng: np.random.Generator,
               precision: int = 64, gamma: float = 1.0) -> 'CcaWeights':
        """Entries uniform in [-1/sqrt(C), 1/sqrt(C)]."""
        bound = 1.0 / np.sqrt(channels)
        return cls(
            wq=Matrix.uniform(inner, channels, bound, rng, precision),
            wk=Matrix.uniform(inner, channels, bound, rng, precision),
            wv=Matrix.uniform(channels, channels, bound, rng, precision),
            gamma=gamma,
        )

    @property
    def channels(self) -> int:
        return self.wq.cols

    @property
    def inner(self) -> int:
        return self.wq.rows

    def value_matrices(self) -> Tuple[Matrix, ...]:
        return (self.wv,)

    def with_gamma(self, gamma: float) -> 'CcaWeights':
        return replace(self, gamma=float(gamma))

    def with_step_gammas(self, gammas) -> 'CcaWeights':
        return replace(self, step_gammas=tuple(float(g) for g in gammas))


def check_gammas(gamma: float, step_gammas: Optional[Tuple[float, ...]]) -> None:
    values = [gamma] + list(step_gammas or ())
    if not np.isfinite(values).all():
        raise NonFiniteError(f"gamma values must be finite, got {values}")


@dataclass(frozen=True)
class CcaCache:
    """Intermediates of one CCA-3D application, enough for the backward pass."""
    x: FeatureMap4D
    q: FeatureMap4D
    k: FeatureMap4D
    v: FeatureMap4D
    attention: AttentionMap
    hidden: FeatureMap4D
    output: FeatureMap4D
    weights: object = field(repr=False)


# Line layout: move channel and one grid axis to the end -> (o1, o2, C, n).

def _lines(x: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(x, (0, axis), (-2, -1))


def _unlines(y: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(y, (-2, -1), (0, axis))


def _pairs_to_segment(pairs: np.ndarray, axis: int) -> np.ndarray:
    """(o1, o2, anchor, entry) -> (entry, T, H, W)."""
    return np.moveaxis(pairs, (-1, -2), (0, axis))


def _segment_to_pairs(segment: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(segment, (0, axis), (-1, -2))


def _drop_diagonal(pairs: np.ndarray) -> np.ndarray:
    n = pairs.shape[-1]
    keep = ~np.eye(n, dtype=bool)
    return pairs[..., keep].reshape(pairs.shape[:-1] + (n - 1,))


def _fill_diagonal(compact: np.ndarray) -> np.ndarray:
    n = compact.shape[-2]
    full = np.zeros(compact.shape[:-1] + (n,), dtype=compact.dtype)
    full[..., ~np.eye(n, dtype=bool)] = compact.reshape(compact.shape[:-2] + (n * (n - 1),))
    return full


def _full_pairs(attention: AttentionMap) -> List[Tuple[int, np.ndarray]]:
    """Per-axis (o1, o2, n, n) weights, zero on the dropped self-entries."""
    out = []
    for axis, segment in zip(_AXES, attention.segments()):
        pairs = _segment_to_pairs(segment, axis)
        if axis != TEMPORAL:
            pairs = _fill_diagonal(pairs)
        out.append((axis, pairs))
    return out


def _check_grid(attention: AttentionMap, x: FeatureMap4D) -> None:
    if tuple(attention.grid) != tuple(x.grid):
        raise ShapeError(
            f"Attention map of shape {attention.data.shape} does not fit feature map {x.dims}"
        )


def affinity(q: FeatureMap4D, k: FeatureMap4D) -> AttentionMap:
    """D[i, u] = <Q[:, u], K[:, path(u)[i]]>."""
    if q.dims != k.dims:
        raise ShapeError(f"Shape mismatch: Q {q.dims} vs K {k.dims}")
    segments = []
    for axis in _AXES:
        pairs = np.matmul(np.swapaxes(_lines(q.data, axis), -1, -2), _lines(k.data, axis))
        if axis != TEMPORAL:
            pairs = _drop_diagonal(pairs)
        segments.append(_pairs_to_segment(pairs, axis))
    return AttentionMap(np.concatenate(segments, axis=0))


def softmax_over_path(scores: AttentionMap) -> AttentionMap:
    """Softmax over each fiber, with max-subtraction."""
    d = scores.data
    e = np.exp(d - d.max(axis=0, keepdims=True))
    return AttentionMap(e / e.sum(axis=0, keepdims=True))


def aggregate(attention: AttentionMap, v: FeatureMap4D) -> FeatureMap4D:
    """H[:, u] = sum_i A[i, u] * V[:, path(u)[i]]."""
    _check_grid(attention, v)
    dtype = np.result_type(attention.data, v.data)
    out = np.zeros(v.dims, dtype=dtype)
    for axis, pairs in _full_pairs(attention):
        lines = np.matmul(_lines(v.data, axis), np.swapaxes(pairs, -1, -2))
        out += _unlines(lines, axis)
    return FeatureMap4D(out)


def scatter(attention: AttentionMap, g: FeatureMap4D) -> FeatureMap4D:
    """Adjoint of aggregate in V: out[:, v] = sum over (u, i) with path(u)[i] = v of A[i, u] * G[:, u]."""
    _check_grid(attention, g)
    dtype = np.result_type(attention.data, g.data)
    out = np.zeros(g.dims, dtype=dtype)
    for axis, pairs in _full_pairs(attention):
        out += _unlines(np.matmul(_lines(g.data, axis), pairs), axis)
    return FeatureMap4D(out)


def attend(x: FeatureMap4D, wq: Matrix, wk: Matrix, wv: Matrix) -> Tuple[FeatureMap4D, ...]:
    """Project, score, normalise and aggregate; returns (q, k, v, attention, hidden)."""
    q = channel_project(x, wq)
    k = channel_project(x, wk)
    v = channel_project(x, wv)
    attention = softmax_over_path(affinity(q, k))
    hidden = aggregate(attention, v)
    logger.debug(f"CCA-3D on {x.dims}: C'={wq.rows}, L={attention.length}")
    return q, k, v, attention, hidden


def cca3d_forward(x: FeatureMap4D, weights: CcaWeights) -> Tuple[FeatureMap4D, CcaCache]:
    """H = aggregate(softmax(affinity(Wq X, Wk X)), Wv X) and its cache."""
    if weights.wq.cols != x.channels:
        raise ShapeError(
            f"Weights for C={weights.wq.cols} cannot be applied to feature map {x.dims}"
        )
    q, k, v, attention, hidden = attend(x, weights.wq, weights.wk, weights.wv)
    cache = CcaCache(x=x, q=q, k=k, v=v, attention=attention, hidden=hidden,
                     output=hidden, weights=weights)
    return hidden, cache
