"""Analytic gradients of CCA-3D / RCCA-3D and the finite-difference oracle."""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from criss_cross import AttentionMap, CcaCache, affinity, aggregate, scatter
from rcca import AnyWeights, CcaWeightsC, RccaCache, RccaConfig, gamma_at, rcca_forward
from tensor_core import FeatureMap4D, Matrix, ShapeError

logger = logging.getLogger(__name__)

# Gradient-check denominators never drop below this.
REL_FLOOR = 1e-8


@dataclass(frozen=True)
class CcaGradients:
    """Gradients mirroring the forward weights; ``dwv`` is Wv_reduced for structure c."""
    dx: FeatureMap4D
    dwq: Matrix
    dwk: Matrix
    dwv: Matrix
    dwr: Optional[Matrix] = None
    dgamma: float = 0.0
    dstep_gammas: Optional[Tuple[float, ...]] = None

    def as_dict(self) -> Dict[str, np.ndarray]:
        out = {'x': self.dx.data, 'wq': self.dwq.data, 'wk': self.dwk.data, 'wv': self.dwv.data,
               'gamma': np.asarray(self.dgamma)}
        if self.dwr is not None:
            out['wr'] = self.dwr.data
        if self.dstep_gammas is not None:
            out['step_gammas'] = np.asarray(self.dstep_gammas)
        return out


def _module_backward(cache: CcaCache, g_out: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Reverse pass of one module application; returns (dX, weight gradients)."""
    weights = cache.weights
    x_flat = cache.x.flat()
    channels = cache.x.channels
    grads = {}

    if isinstance(weights, CcaWeightsC):
        g_flat = g_out.reshape(channels, -1)
        grads['wr'] = g_flat @ cache.hidden.flat().T
        g_hidden = (weights.wr.data.T @ g_flat).reshape(cache.hidden.dims)
        wv = weights.wv_reduced
    else:
        g_hidden = g_out
        wv = weights.wv
    g_hidden = FeatureMap4D(g_hidden)

    # Aggregation: H = sum_i A[i] V[path_i]
    d_attention = affinity(g_hidden, cache.v).data
    dv = scatter(cache.attention, g_hidden)

    # Softmax along each fiber
    a = cache.attention.data
    d_scores = AttentionMap(a * (d_attention - (a * d_attention).sum(axis=0, keepdims=True)))

    # Affinity: D[i, u] = <Q_u, K_path_i(u)>
    dq = aggregate(d_scores, cache.k)
    dk = scatter(d_scores, cache.q)

    grads['wq'] = dq.flat() @ x_flat.T
    grads['wk'] = dk.flat() @ x_flat.T
    grads['wv'] = dv.flat() @ x_flat.T
    dx = (weights.wq.data.T @ dq.flat()
          + weights.wk.data.T @ dk.flat()
          + wv.data.T @ dv.flat())
    return dx.reshape(cache.x.dims), grads


def _wrap(dx: np.ndarray, grads: Dict[str, np.ndarray], dgamma: float = 0.0,
          dstep_gammas: Optional[Tuple[float, ...]] = None) -> CcaGradients:
    return CcaGradients(
        dx=FeatureMap4D(dx),
        dwq=Matrix(grads['wq']),
        dwk=Matrix(grads['wk']),
        dwv=Matrix(grads['wv']),
        dwr=Matrix(grads['wr']) if 'wr' in grads else None,
        dgamma=float(dgamma),
        dstep_gammas=dstep_gammas,
    )


def cca3d_backward(cache: CcaCache, g_h: FeatureMap4D) -> CcaGradients:
    """Gradients of one CCA-3D application; gamma enters at the combine step, so dgamma = 0."""
    if g_h.dims != cache.output.dims:
        raise ShapeError(f"Gradient {g_h.dims} does not match module output {cache.output.dims}")
    dx, grads = _module_backward(cache, g_h.data)
    return _wrap(dx, grads)


def _backprop(cfg: RccaConfig, cache: RccaCache,
              g_y: FeatureMap4D) -> Tuple[np.ndarray, List[Dict[str, np.ndarray]], List[float]]:
    """Walk the recurrence backwards; per-application weight grads and gamma terms."""
    if cfg != cache.config:
        raise ValueError(f"Config {cfg} does not match the cached forward config {cache.config}")
    if g_y.dims != cache.x.dims:
        raise ShapeError(f"Gradient {g_y.dims} does not match output {cache.x.dims}")

    last = cfg.recurrence - 1
    g = g_y.data
    dx = np.zeros_like(g)
    step_grads: List[Dict[str, np.ndarray]] = [{}] * cfg.recurrence
    step_gammas = [0.0] * cfg.recurrence
    for step in range(last, -1, -1):
        step_cache = cache.steps[step]
        gamma = gamma_at(cfg, cache.weights, step)
        step_gammas[step] = float(np.sum(g * step_cache.output.data))
        d_input, step_grads[step] = _module_backward(step_cache, gamma * g)

        if cfg.variant in ('a', 'c') or (cfg.variant == 'd' and step == last):
            dx = dx + g
        g_prev = d_input + g if cfg.variant == 'b' else d_input
        if step == 0:
            dx = dx + g_prev
        g = g_prev
    return dx, step_grads, step_gammas


def rcca_backward(cfg: RccaConfig, cache: RccaCache, g_y: FeatureMap4D) -> CcaGradients:
    """Gradients of RCCA-3D; shared weights collect the sum over all R applications."""
    dx, step_grads, step_gammas = _backprop(cfg, cache, g_y)
    total = {name: sum(grads[name] for grads in step_grads) for name in step_grads[0]}
    return _wrap(dx, total, dgamma=sum(step_gammas), dstep_gammas=tuple(step_gammas))


def rcca_backward_untied(cfg: RccaConfig, cache: RccaCache,
                         g_y: FeatureMap4D) -> Tuple[FeatureMap4D, List[CcaGradients]]:
    """dX plus the weight gradients of each application taken separately."""
    dx, step_grads, step_gammas = _backprop(cfg, cache, g_y)
    zero_x = np.zeros_like(dx)
    per_step = [_wrap(zero_x, grads, dgamma=g) for grads, g in zip(step_grads, step_gammas)]
    return FeatureMap4D(dx), per_step


# Finite differences

def finite_diff_grad(loss: Callable[[np.ndarray], np.ndarray], point: np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    """Central differences (f(p + eps) - f(p - eps)) / 2 eps, one entry at a time.

    ``loss`` may return an array of loss terms; the difference is taken term by
    term before summing.
    """
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    for idx in np.ndindex(point.shape):
        original = point[idx]
        point[idx] = original + eps
        plus = np.asarray(loss(point.copy()), dtype=np.float64)
        point[idx] = original - eps
        minus = np.asarray(loss(point.copy()), dtype=np.float64)
        point[idx] = original
        grad[idx] = np.sum(plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest per-entry |a - b| / max(|a|, |b|, 1e-8)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"Shape mismatch: {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float((np.abs(analytic - numeric) / scale).max())


def parameter_names(cfg: RccaConfig) -> Tuple[str, ...]:
    names = ['x', 'wq', 'wk', 'wv']
    if cfg.variant == 'c':
        names.append('wr')
    names.append('step_gammas' if cfg.untied_gamma else 'gamma')
    return tuple(names)


def get_parameter(x: FeatureMap4D, weights: AnyWeights, name: str) -> np.ndarray:
    if name == 'x':
        return x.data
    if name == 'gamma':
        return np.asarray(weights.gamma, dtype=np.float64)
    if name == 'step_gammas':
        return np.asarray(weights.step_gammas, dtype=np.float64)
    if name == 'wv' and isinstance(weights, CcaWeightsC):
        return weights.wv_reduced.data
    return getattr(weights, name).data


def set_parameter(x: FeatureMap4D, weights: AnyWeights, name: str,
                  value: np.ndarray) -> Tuple[FeatureMap4D, AnyWeights]:
    """Copy of (x, weights) with one parameter replaced."""
    if name == 'x':
        return FeatureMap4D(value), weights
    if name == 'gamma':
        return x, weights.with_gamma(float(value))
    if name == 'step_gammas':
        return x, weights.with_step_gammas(value)
    if name == 'wv' and isinstance(weights, CcaWeightsC):
        name = 'wv_reduced'
    return x, replace(weights, **{name: Matrix(value)})


def numerical_gradients(cfg: RccaConfig, x: FeatureMap4D, weights: AnyWeights,
                        g_y: FeatureMap4D, eps: float = 1e-5) -> Dict[str, np.ndarray]:
    """Finite-difference gradient of <g_y, rcca_forward(x)> for every parameter."""
    out = {}
    for name in parameter_names(cfg):
        def loss(value, name=name):
            px, pw = set_parameter(x, weights, name, value)
            y, _ = rcca_forward(px, cfg, pw)
            return g_y.data * y.data
        out[name] = finite_diff_grad(loss, get_parameter(x, weights, name), eps)
    return out


def gradient_check(cfg: RccaConfig, x: FeatureMap4D, weights: AnyWeights,
                   g_y: Optional[FeatureMap4D] = None, eps: float = 1e-5) -> Dict[str, float]:
    """Relative error between analytic and central-difference gradients, per parameter.

    The default loss is the sum of all outputs (g_y = ones).
    """
    if g_y is None:
        g_y = FeatureMap4D(np.ones(x.dims, dtype=np.float64))
    _, cache = rcca_forward(x, cfg, weights)
    analytic = rcca_backward(cfg, cache, g_y).as_dict()
    numeric = numerical_gradients(cfg, x, weights, g_y, eps)
    errors = {name: relative_error(analytic[name], numeric[name]) for name in numeric}
    logger.debug(f"Gradient check variant {cfg.variant}, R={cfg.recurrence}: {errors}")
    return errors
