"""Trust-region bookkeeping: side lengths, expansion/shrinkage and restarts."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


def default_failure_tolerance(dim: int, batch: int) -> int:
    return int(math.ceil(max(4.0 / batch, dim / batch)))


@dataclass(frozen=True)
class TrustRegionConfig:
    length_init: float = 0.8
    length_min: float = 0.5**7
    length_max: float = 1.6
    success_tolerance: int = 3
    failure_tolerance: int = 3

    def __post_init__(self):
        if not (0.0 < self.length_min <= self.length_init <= self.length_max):
            raise ValueError("need 0 < length_min <= length_init <= length_max")
        if self.success_tolerance < 1 or self.failure_tolerance < 1:
            raise ValueError("tolerances must be >= 1")

    @classmethod
    def for_problem(cls, dim: int, batch: int, **kw) -> "TrustRegionConfig":
        kw.setdefault("failure_tolerance", default_failure_tolerance(dim, batch))
        return cls(**kw)


@dataclass(frozen=True)
class TrustRegionState:
    config: TrustRegionConfig
    length: float
    success_count: int = 0
    failure_count: int = 0
    center_index: int = -1
    restart_count: int = 0
    restart_pending: bool = False

    @classmethod
    def initial(cls, config: TrustRegionConfig, center_index: int = -1) -> "TrustRegionState":
        return cls(config=config, length=config.length_init, center_index=center_index)


def tr_sides(state: TrustRegionState, lengthscales) -> np.ndarray:
    """Unclipped side lengths ``l_i L / (prod l_j)^(1/D)``."""
    ls = np.asarray(lengthscales, dtype=float)
    if np.any(ls <= 0):
        raise ValueError("lengthscales must be positive")
    return state.length * ls / np.exp(np.mean(np.log(ls)))


def tr_bounds(state: TrustRegionState, center, lengthscales):
    """Box with sides :func:`tr_sides` around ``center``, clipped to the unit cube."""
    center = np.asarray(center, dtype=float)
    half = 0.5 * tr_sides(state, lengthscales)
    lower = np.clip(center - half, 0.0, 1.0)
    upper = np.clip(center + half, 0.0, 1.0)
    return lower, upper


def tr_update(state: TrustRegionState, improved: bool, center_index: int | None = None) -> TrustRegionState:
    """Advance the counters after one batch; restart once ``L < L_min``."""
    cfg = state.config
    if improved:
        succ, fail = state.success_count + 1, 0
    else:
        succ, fail = 0, state.failure_count + 1
    length = state.length
    if succ == cfg.success_tolerance:
        length = min(2.0 * length, cfg.length_max)
        succ = 0
    elif fail == cfg.failure_tolerance:
        length = length / 2.0
        fail = 0
    new = replace(
        state,
        length=length,
        success_count=succ,
        failure_count=fail,
        center_index=state.center_index if center_index is None else int(center_index),
        restart_pending=False,
    )
    if length < cfg.length_min:
        new = replace(
            new,
            length=cfg.length_init,
            success_count=0,
            failure_count=0,
            restart_count=state.restart_count + 1,
            restart_pending=True,
        )
    return new


__all__ = [
    "TrustRegionConfig",
    "TrustRegionState",
    "default_failure_tolerance",
    "tr_bounds",
    "tr_sides",
    "tr_update",
]
