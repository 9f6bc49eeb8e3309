"""8-bit binary portable graymaps (P5)."""

import logging
from pathlib import Path
from typing import Union

import numpy as np

logger = logging.getLogger(__name__)

MAXVAL = 255


def to_gray_levels(magnitude: np.ndarray) -> np.ndarray:
    """Scale to 0..255 by the map's maximum; any nonzero magnitude stays >= 1."""
    magnitude = np.abs(np.asarray(magnitude, dtype=np.float64))
    peak = magnitude.max() if magnitude.size else 0.0
    if peak == 0:
        return np.zeros(magnitude.shape, dtype=np.uint8)
    levels = np.rint(MAXVAL * magnitude / peak)
    levels = np.where(magnitude > 0, np.maximum(levels, 1), 0)
    return levels.astype(np.uint8)


def write_graymap(path: Union[str, Path], image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"Graymap needs a 2D uint8 image, got {image.dtype} {image.shape}")
    height, width = image.shape
    with open(path, 'wb') as f:
        f.write(f"P5\n{width} {height}\n{MAXVAL}\n".encode('ascii'))
        f.write(np.ascontiguousarray(image).tobytes())
    logger.debug(f"Wrote {width}x{height} graymap to {path}")
