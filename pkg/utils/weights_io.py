"""Weights file: one text manifest line followed by CCT1 blocks."""

import logging
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from criss_cross import CcaWeights
from rcca import AnyWeights, CcaWeightsC
from tensor_core import (
    FeatureMap4D,
    TensorFormatError,
    matrix_to_tensor,
    read_tensor,
    tensor_to_matrix,
    write_tensor,
)

logger = logging.getLogger(__name__)

HEADER_TAG = 'CCA3D-WEIGHTS'
MAX_HEADER = 4096

PathLike = Union[str, Path]


def _names(weights: AnyWeights) -> List[str]:
    names = ['wq', 'wk', 'wv']
    if isinstance(weights, CcaWeightsC):
        names.append('wr')
    names.append('gamma')
    if weights.step_gammas is not None:
        names.append('step_gammas')
    return names


def _scalars(values, dtype) -> FeatureMap4D:
    values = np.asarray(values, dtype=dtype).reshape(-1, 1, 1, 1)
    return FeatureMap4D(values)


def save_weights(path: PathLike, weights: AnyWeights) -> None:
    """Wq, Wk, Wv, [Wr], gamma, [step gammas]; matrices as (rows, cols, 1, 1), scalars as (n, 1, 1, 1)."""
    names = _names(weights)
    variant_kind = 'reduced' if isinstance(weights, CcaWeightsC) else 'full'
    dtype = weights.wq.data.dtype
    blocks = {
        'wq': matrix_to_tensor(weights.wq),
        'wk': matrix_to_tensor(weights.wk),
        'wv': matrix_to_tensor(weights.value_matrices()[0]),
        'gamma': _scalars([weights.gamma], dtype),
    }
    if isinstance(weights, CcaWeightsC):
        blocks['wr'] = matrix_to_tensor(weights.wr)
    if weights.step_gammas is not None:
        blocks['step_gammas'] = _scalars(weights.step_gammas, dtype)

    with open(path, 'wb') as f:
        f.write(f"{HEADER_TAG} values={variant_kind} names={','.join(names)}\n".encode('ascii'))
        for name in names:
            write_tensor(f, blocks[name])
    logger.info(f"Wrote {variant_kind} weights ({', '.join(names)}) to {path}")


def _parse_header(line: bytes) -> Tuple[str, List[str]]:
    try:
        fields = line.decode('ascii').split()
    except UnicodeDecodeError:
        raise TensorFormatError('Weights header is not ASCII text')
    if not fields or fields[0] != HEADER_TAG:
        raise TensorFormatError(f"Missing {HEADER_TAG} header line")
    pairs: Dict[str, str] = dict(f.split('=', 1) for f in fields[1:] if '=' in f)
    kind = pairs.get('values')
    names = pairs.get('names', '').split(',')
    if kind not in ('full', 'reduced'):
        raise TensorFormatError(f"Unknown value layout '{kind}' in weights header")
    expected = ['wq', 'wk', 'wv'] + (['wr'] if kind == 'reduced' else []) + ['gamma']
    if names[:len(expected)] != expected or names[len(expected):] not in ([], ['step_gammas']):
        raise TensorFormatError(f"Unexpected weight names {names} for {kind} values")
    return kind, names


def load_weights(path: PathLike) -> AnyWeights:
    """Read weights written by ``save_weights``."""
    with open(path, 'rb') as f:
        line = f.readline(MAX_HEADER)
        if not line.endswith(b'\n'):
            raise TensorFormatError(f"Weights header in {path} is missing or too long")
        kind, names = _parse_header(line.rstrip(b'\n'))
        blocks = {name: read_tensor(f) for name in names}
        if f.read(1):
            raise TensorFormatError(f"Trailing bytes after weights in {path}")

    matrices = {n: tensor_to_matrix(blocks[n]) for n in names if n not in ('gamma', 'step_gammas')}
    if blocks['gamma'].dims != (1, 1, 1, 1):
        raise TensorFormatError(f"gamma block has dims {blocks['gamma'].dims}, expected (1, 1, 1, 1)")
    gamma = float(blocks['gamma'].data.reshape(-1)[0])
    step_gammas = None
    if 'step_gammas' in blocks:
        step_gammas = tuple(float(g) for g in blocks['step_gammas'].data.reshape(-1))

    if kind == 'reduced':
        weights = CcaWeightsC(matrices['wq'], matrices['wk'], matrices['wv'], matrices['wr'],
                              gamma, step_gammas)
    else:
        weights = CcaWeights(matrices['wq'], matrices['wk'], matrices['wv'], gamma, step_gammas)
    logger.info(f"Read {kind} weights for C={weights.channels}, C'={weights.inner} from {path}")
    return weights
