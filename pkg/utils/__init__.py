"""Utilities package."""

from .graymap import to_gray_levels, write_graymap
from .run_manifest import RunManifest, make_rng, parse_dims, parse_ints
from .weights_io import load_weights, save_weights

__all__ = ['RunManifest', 'make_rng', 'parse_dims', 'parse_ints', 'save_weights', 'load_weights',
           'write_graymap', 'to_gray_levels']
