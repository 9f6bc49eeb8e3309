"""Resolved parameters of one CLI invocation."""

import argparse
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from config import Settings
from rcca import RccaConfig
from tensor_core import resolve_dtype

logger = logging.getLogger(__name__)

Dims4 = Tuple[int, int, int, int]

# Attributes of the parsed namespace that map onto manifest fields.
_CORE_ARGS = {'command', 'variant', 'r', 'cd', 'untied_gamma', 'dims', 'precision', 'seed',
              'threads', 'input', 'output', 'weights'}


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for ``seed``; extra integers select an independent stream."""
    return np.random.default_rng([int(seed), *(int(s) for s in stream)])


def parse_ints(text: str, count: int, what: str) -> Tuple[int, ...]:
    """Parse 'a,b,c' (commas or 'x') into ``count`` integers."""
    parts = [p for p in str(text).replace('x', ',').split(',') if p.strip()]
    try:
        values = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"Invalid {what} '{text}': expected {count} integers")
    if len(values) != count:
        raise ValueError(f"Invalid {what} '{text}': expected {count} integers, got {len(values)}")
    return values


def parse_dims(text: str) -> Dims4:
    dims = parse_ints(text, 4, 'dims')
    if min(dims) < 1:
        raise ValueError(f"All dims must be >= 1, got {dims}")
    return dims


@dataclass
class RunManifest:
    """Subcommand, module configuration and file locations for one run."""
    subcommand: str
    config: RccaConfig
    dims: Optional[Dims4] = None
    precision: int = 32
    seed: int = 0
    threads: int = 1
    input_path: Optional[Path] = None
    output_path: Optional[Path] = None
    weights_path: Optional[Path] = None
    options: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        resolve_dtype(self.precision)
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")

    def rng(self, *stream: int) -> np.random.Generator:
        return make_rng(self.seed, *stream)

    @classmethod
    def from_args(cls, args: argparse.Namespace, settings: Settings) -> 'RunManifest':
        """Flags take precedence; anything left unset falls back to ``settings``."""
        def pick(name, default):
            value = getattr(args, name, None)
            return default if value is None else value

        config = RccaConfig(
            variant=pick('variant', settings.variant),
            recurrence=pick('r', settings.recurrence),
            channel_fraction=pick('cd', settings.channel_fraction),
            untied_gamma=bool(pick('untied_gamma', False)),
        )
        dims = getattr(args, 'dims', None)
        path = lambda name: Path(getattr(args, name)) if getattr(args, name, None) else None
        options = {k: v for k, v in vars(args).items() if k not in _CORE_ARGS}

        manifest = cls(
            subcommand=args.command,
            config=config,
            dims=parse_dims(dims) if isinstance(dims, str) else dims,
            precision=pick('precision', settings.precision),
            seed=pick('seed', settings.seed),
            threads=pick('threads', settings.threads),
            input_path=path('input'),
            output_path=path('output'),
            weights_path=path('weights'),
            options=options,
        )
        logger.debug(f"Run manifest: {manifest}")
        return manifest
