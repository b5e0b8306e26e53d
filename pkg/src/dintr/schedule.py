"""Noise schedules, forward noising and the interpolation weights k/T.

Two different sequences live here and must not be confused:

* ``alpha_bar[k]`` is the cumulative signal coefficient used by forward
  noising, ``alpha_bar[0] = 1``.
* ``interp_weight[k] = k / T`` is the blending weight of the interpolation
  operators.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    interp_weight: np.ndarray = field(repr=False)

    def check_step(self, k: int) -> None:
        if not 0 <= k <= self.T:
            raise IndexError(f"step {k} outside [0, {self.T}]")


def make_linear(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    interp = np.arange(T + 1) / T
    for arr in (beta, alpha_bar, interp):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha_bar, interp)


def from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size == 0 or np.any(beta <= 0) or np.any(beta >= 1):
        raise ConfigError("betas must be a non-empty vector in (0, 1)")
    T = beta.size
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(T, beta, alpha_bar, np.arange(T + 1) / T)


def q_sample_coeffs(schedule: NoiseSchedule, k: int) -> tuple[float, float]:
    schedule.check_step(k)
    ab = float(schedule.alpha_bar[k])
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def q_sample(z0: np.ndarray, k: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_k) * z0 + sqrt(1 - abar_k) * eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latent {z0.shape}")
    a, b = q_sample_coeffs(schedule, k)
    if b == 0.0:
        return z0.copy()
    return a * z0 + b * eps


def seeded_noise(shape, seed: int | tuple, k: int) -> np.ndarray:
    """Standard normal draw keyed by ``(seed, k)``; identical keys give identical draws."""
    key = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    rng = np.random.default_rng([*key, int(k)])
    return rng.standard_normal(tuple(shape))


@dataclass(frozen=True)
class NoiseContext:
    """Noise for one frame pair: independent draws per (frame, step)."""

    seed: int
    pair_index: int = 0
    zero: bool = False

    def eps(self, shape, frame: int, k: int) -> np.ndarray:
        """``frame`` is 0 for the current frame, 1 for the next one."""
        if self.zero:
            return np.zeros(shape)
        return seeded_noise(shape, (self.seed, self.pair_index, frame), k)

    def q(self, z0: np.ndarray, frame: int, k: int, schedule: NoiseSchedule) -> np.ndarray:
        return q_sample(z0, k, self.eps(np.shape(z0), frame, k), schedule)
