"""Shared fixtures: seeded generators, random feature maps and weights."""

import numpy as np
import pytest

from criss_cross import CcaWeights
from tensor_core import FeatureMap4D


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_map(rng):
    def make(dims, precision=64, scale=1.0):
        return FeatureMap4D.random(dims, rng, precision=precision, scale=scale)
    return make


@pytest.fixture
def random_weights(rng):
    def make(channels, inner, gamma=1.0, precision=64):
        return CcaWeights.random(channels, inner, rng, precision=precision, gamma=gamma)
    return make


@pytest.fixture
def read_pgm():
    """Parse an 8-bit P5 graymap into a (height, width) uint8 array."""
    def read(path):
        magic, size, maxval, pixels = path.read_bytes().split(b'\n', 3)
        width, height = (int(v) for v in size.split())
        assert magic == b'P5' and int(maxval) == 255 and len(pixels) == width * height
        return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
    return read
