"""Run-wide configuration with the shipped experiment defaults."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .errors import ConfigurationError

_MODULE = "config"

THREADS_ENV = "VFM4SDG_THREADS"

DEFAULT_LAMBDA = 1.0
DEFAULT_LEVELS = (0, 1, 2, 3, 4)
DEFAULT_BETA = 1.0
DEFAULT_HEADS = 8
DEFAULT_SCORE_THRESHOLD = 0.5
DEFAULT_IOU_THRESHOLD = 0.5


def threads_from_env() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigurationError(_MODULE, f"{THREADS_ENV}={raw!r} is not an integer") from exc
    if value < 1:
        raise ConfigurationError(_MODULE, f"{THREADS_ENV} must be >= 1, got {value}")
    return value


@dataclass
class RunConfig:
    lambda_: float = DEFAULT_LAMBDA
    levels: tuple = DEFAULT_LEVELS
    beta: float = DEFAULT_BETA
    heads: int = DEFAULT_HEADS
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    seed: int = 0
    threads: int = field(default_factory=threads_from_env)

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ConfigurationError(_MODULE, f"lambda must be >= 0, got {self.lambda_}")
        if not self.levels:
            raise ConfigurationError(_MODULE, "levels must be non-empty")
        if self.beta <= 0:
            raise ConfigurationError(_MODULE, f"beta must be > 0, got {self.beta}")
        if self.heads < 1:
            raise ConfigurationError(_MODULE, f"heads must be >= 1, got {self.heads}")
        for name in ("score_threshold", "iou_threshold"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigurationError(_MODULE, f"{name} must lie in (0, 1], got {value}")
        if self.seed < 0:
            raise ConfigurationError(_MODULE, f"seed must be >= 0, got {self.seed}")
        self.levels = tuple(int(l) for l in self.levels)
