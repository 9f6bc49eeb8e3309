"""Handlers that read and write files: run and influence."""

import logging
import sys
from pathlib import Path
from typing import List, Optional, TextIO, Tuple

import numpy as np

from config import settings
from criss_cross import Position, check_position
from nonlocal_ref import masked_dense_rcca_oracle
from rcca import AnyWeights, CcaWeightsC, RccaConfig, make_weights, rcca_forward
from tensor_core import FeatureMap4D, load_tensor, max_abs_diff, save_tensor
from utils import RunManifest, load_weights, parse_ints, to_gray_levels, write_graymap

logger = logging.getLogger(__name__)

DEFAULT_INFLUENCE_DIMS = (4, 3, 8, 8)
ORACLE_TOLERANCE = 1e-5


def _weights_for(cfg: RccaConfig, weights_path: Optional[Path], channels: int, precision: int,
                 rng: np.random.Generator) -> AnyWeights:
    """Weights from ``--weights`` when given, seeded random weights otherwise."""
    if weights_path is None:
        return make_weights(cfg, channels, rng, precision=precision)
    weights = load_weights(weights_path)
    if isinstance(weights, CcaWeightsC) != (cfg.variant == 'c'):
        raise ValueError(f"Weights in {weights_path} do not fit variant '{cfg.variant}'")
    if cfg.untied_gamma:
        gammas = weights.step_gammas or (weights.gamma,) * cfg.recurrence
        if len(gammas) < cfg.recurrence:
            raise ValueError(f"{weights_path} holds {len(gammas)} step gammas, "
                             f"R={cfg.recurrence} needs {cfg.recurrence}")
        # The first R gammas of a longer schedule drive an R-step run.
        weights = weights.with_step_gammas(gammas[:cfg.recurrence])
    return weights


def cmd_run(manifest: RunManifest, out: Optional[TextIO] = None) -> int:
    """Apply RCCA-3D to a CCT1 tensor and write the CCT1 result."""
    out = out or sys.stdout
    if manifest.input_path is None or manifest.output_path is None:
        raise ValueError('run needs --input and --output')
    x = load_tensor(manifest.input_path)
    weights = _weights_for(manifest.config, manifest.weights_path, x.channels, x.precision,
                           manifest.rng())
    logger.info(f"Running RCCA-3D variant {manifest.config.variant}, R={manifest.config.recurrence} "
                f"on {x.dims} from {manifest.input_path}")

    y, _ = rcca_forward(x, manifest.config, weights)
    save_tensor(manifest.output_path, y)
    out.write(f"wrote {y.dims} ({y.precision}-bit) to {manifest.output_path}\n")

    if manifest.options.get('check'):
        reference = masked_dense_rcca_oracle(x.astype(64), manifest.config, weights)
        diff = max_abs_diff(y, reference)
        out.write(f"max abs diff vs dense oracle: {diff:.3e}\n")
        if diff > ORACLE_TOLERANCE:
            logger.warning(f"Output deviates from the dense oracle by {diff:.3e}")
            return 1
    return 0


def influence_magnitude(x: FeatureMap4D, cfg: RccaConfig, weights: AnyWeights, v: Position,
                        eps: Optional[float] = None) -> np.ndarray:
    """(T, H, W) Frobenius norm of dY_u / dX_v by central differences over every channel at v."""
    eps = eps or settings.fd_epsilon
    x = x.astype(64)
    check_position(v, x.grid)
    jacobian_sq = np.zeros(x.grid)
    for channel in range(x.channels):
        index = (channel,) + tuple(v)
        plus, minus = x.data.copy(), x.data.copy()
        plus[index] += eps
        minus[index] -= eps
        y_plus, _ = rcca_forward(FeatureMap4D(plus), cfg, weights)
        y_minus, _ = rcca_forward(FeatureMap4D(minus), cfg, weights)
        column = (y_plus.data - y_minus.data) / (2 * eps)
        jacobian_sq += (column ** 2).sum(axis=0)
    return np.sqrt(jacobian_sq)


def _source(manifest: RunManifest, grid: Tuple[int, int, int]) -> Position:
    text = manifest.options.get('source')
    v = parse_ints(text, 3, 'source position') if text else tuple(n // 2 for n in grid)
    check_position(v, grid)
    return v


def cmd_influence(manifest: RunManifest, out: Optional[TextIO] = None) -> int:
    """One P5 graymap per (R, frame) of the influence of input position v."""
    out = out or sys.stdout
    if manifest.input_path is not None:
        x = load_tensor(manifest.input_path)
    else:
        x = FeatureMap4D.random(manifest.dims or DEFAULT_INFLUENCE_DIMS, manifest.rng(), precision=64)
    v = _source(manifest, x.grid)
    recurrences = manifest.options.get('rs') or [1, 2, 3]
    out_dir = Path(manifest.options.get('output_dir') or 'influence')
    out_dir.mkdir(parents=True, exist_ok=True)

    written: List[Path] = []
    for recurrence in recurrences:
        cfg = RccaConfig(manifest.config.variant, recurrence, manifest.config.channel_fraction,
                         manifest.config.untied_gamma)
        weights = _weights_for(cfg, manifest.weights_path, x.channels, 64, manifest.rng(1))
        magnitude = influence_magnitude(x, cfg, weights, v)
        for frame in range(x.grid[0]):
            path = out_dir / f"influence_R{recurrence}_t{frame}.pgm"
            write_graymap(path, to_gray_levels(magnitude[frame]))
            written.append(path)
        reached = int(np.count_nonzero(magnitude))
        out.write(f"R={recurrence}: {reached}/{magnitude.size} positions influenced by {v}\n")
        logger.info(f"Influence maps for R={recurrence} written to {out_dir}")
    out.write(f"wrote {len(written)} graymaps to {out_dir}\n")
    return 0
