"""Noise schedules and deterministic DDIM steps.

All step functions work on numpy arrays and torch tensors alike; the schedule
coefficients are plain python floats at the call site.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

# Reference betas for a 1000-step schedule; rescaled by 1000 / T.
REFERENCE_STEPS = 1000
REFERENCE_BETA_START = 1e-4
REFERENCE_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients ``alpha_bar[0..T]`` with ``alpha_bar[0] == 1``."""

    total_steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64).copy()
        if ab.shape != (self.total_steps + 1,):
            raise DomainError(f"alpha_bar must have {self.total_steps + 1} entries, got {ab.shape}")
        if ab[0] != 1.0:
            raise DomainError("alpha_bar[0] must be exactly 1")
        if np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) > 0):
            raise DomainError("alpha_bar must lie in (0, 1] and be non-increasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.total_steps

    def __getitem__(self, t: int) -> float:
        return float(self.alpha_bar[t])


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear-beta schedule: ``alpha_bar[t] = prod_{i<=t} (1 - beta_i)``."""
    if int(T) != T or T < 1:
        raise DomainError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DomainError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(int(T), alpha_bar)


def default_schedule(T: int = 50) -> NoiseSchedule:
    """The 1e-4..0.02 linear schedule, rescaled so that ``T`` steps cover the same noise range.

    For ``T = 50`` this gives betas from 0.002 to 0.4.
    """
    scale = REFERENCE_STEPS / T
    beta_end = min(REFERENCE_BETA_END * scale, 0.999)
    beta_start = min(REFERENCE_BETA_START * scale, beta_end)
    return make_schedule(T, beta_start, beta_end)


def _check_t(t: int, schedule: NoiseSchedule, lowest: int = 1) -> None:
    if not (lowest <= t <= schedule.T):
        raise DomainError(f"timestep {t} outside [{lowest}, {schedule.T}]")


def _check_shapes(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise DomainError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(z0, t: int, eps, schedule: NoiseSchedule):
    """Forward-noise ``z0`` to timestep ``t`` with the given noise draw."""
    _check_t(t, schedule)
    _check_shapes(z0, eps, "q_sample")
    ab = schedule[t]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def ddim_denoise_step(z_t, eps_pred, t: int, schedule: NoiseSchedule):
    """One deterministic (eta = 0) DDIM step from ``t`` to ``t - 1``."""
    _check_t(t, schedule)
    _check_shapes(z_t, eps_pred, "ddim_denoise_step")
    ab_t, ab_prev = schedule[t], schedule[t - 1]
    z0_pred = (z_t - math.sqrt(1.0 - ab_t) * eps_pred) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * z0_pred + math.sqrt(1.0 - ab_prev) * eps_pred


def ddim_invert_step(z_prev, eps_pred, t: int, schedule: NoiseSchedule):
    """Inverse of :func:`ddim_denoise_step`: map a ``t - 1`` latent to timestep ``t``."""
    _check_t(t, schedule)
    _check_shapes(z_prev, eps_pred, "ddim_invert_step")
    ab_t, ab_prev = schedule[t], schedule[t - 1]
    z0_pred = (z_prev - math.sqrt(1.0 - ab_prev) * eps_pred) / math.sqrt(ab_prev)
    return math.sqrt(ab_t) * z0_pred + math.sqrt(1.0 - ab_t) * eps_pred


def cfg_combine(eps_uncond, eps_cond, w: float):
    """Classifier-free guidance: ``eps_uncond + w * (eps_cond - eps_uncond)``."""
    _check_shapes(eps_uncond, eps_cond, "cfg_combine")
    return eps_uncond + w * (eps_cond - eps_uncond)
