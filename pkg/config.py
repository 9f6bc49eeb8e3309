"""Configuration management for the criss-cross attention toolkit."""

import logging
from fractions import Fraction

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

VARIANTS = ('a', 'b', 'c', 'd')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


class Settings(BaseSettings):
    """Application settings with validation."""

    model_config = SettingsConfigDict(
        env_prefix='CCA3D_',
        env_file='.env',
        env_file_encoding='utf-8',
        extra='ignore',
    )

    # Module structure
    variant: str = Field('a', description='RCCA-3D structure: a, b, c or d')
    recurrence: int = Field(3, description='Number of shared CCA-3D applications (R)')
    channel_fraction: str = Field('1/4', description='C_d, written as a fraction')

    # Numerics
    precision: int = Field(32, description='Scalar width in bits for forward/bench runs')
    seed: int = Field(0)
    threads: int = Field(1)

    # Verification
    fd_epsilon: float = Field(1e-5)
    grad_rtol: float = Field(1e-6)
    oracle_trials: int = Field(50)

    # Benchmark
    bench_repeats: int = Field(5)

    # Logging
    log_level: str = Field('INFO')

    @field_validator('variant')
    @classmethod
    def _check_variant(cls, value: str) -> str:
        value = value.lower()
        if value not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got '{value}'")
        return value

    @field_validator('recurrence', 'threads', 'bench_repeats', 'oracle_trials')
    @classmethod
    def _check_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"must be >= 1, got {value}")
        return value

    @field_validator('precision')
    @classmethod
    def _check_precision(cls, value: int) -> int:
        if value not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {value}")
        return value

    @field_validator('channel_fraction')
    @classmethod
    def _check_fraction(cls, value: str) -> str:
        parse_fraction(value)
        return value

    @field_validator('log_level')
    @classmethod
    def _check_log_level(cls, value: str) -> str:
        value = value.upper()
        if value not in LOG_LEVELS:
            raise ValueError(f"log_level must be one of {LOG_LEVELS}")
        return value


def parse_fraction(text: str) -> Fraction:
    """Parse a channel fraction such as '1/4' or '0.25' into (0, 1]."""
    try:
        fraction = Fraction(str(text).strip())
    except (ValueError, ZeroDivisionError) as e:
        raise ValueError(f"Invalid channel fraction '{text}': {e}") from e
    if not 0 < fraction <= 1:
        raise ValueError(f"Channel fraction must lie in (0, 1], got {fraction}")
    return fraction


# Create global settings instance
settings = Settings()

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
