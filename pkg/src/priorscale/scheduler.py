"""Noise schedules, forward noising and the deterministic reverse step.

Timesteps index the training schedule: ``alpha_bars[0] == 1`` is clean data
and ``alpha_bars[T]`` is the noisiest level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

DEFAULT_BETA_RANGE = (0.00085, 0.012)
DEFAULT_TRAIN_STEPS = 1000

GSP_KINDS = ("cosine", "linear_decreasing", "linear_increasing", "constant")


@dataclass(frozen=True)
class NoiseSchedule:
    total_steps: int
    alphas: np.ndarray  # shape (T,), alphas[i] is alpha_{i+1}
    alpha_bars: np.ndarray  # shape (T+1,), alpha_bars[0] == 1

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bars[t])

    def _check_t(self, t: int) -> None:
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"timestep {t} outside [0, {self.total_steps}]")

    @classmethod
    def from_alpha_bars(cls, alpha_bars) -> "NoiseSchedule":
        """Build a schedule from a cumulative table that excludes the leading 1."""
        ab = np.asarray(alpha_bars, dtype=np.float64)
        if ab.ndim != 1 or ab.size == 0:
            raise ConfigurationError("alpha_bars must be a non-empty 1-D table")
        full = np.concatenate([[1.0], ab])
        alphas = full[1:] / full[:-1]
        if np.any(np.diff(full) >= 0) or full[-1] <= 0:
            raise ConfigurationError("alpha_bars must be strictly decreasing and positive")
        return cls(total_steps=ab.size, alphas=alphas, alpha_bars=full)


def build_schedule(
    total_steps: int = DEFAULT_TRAIN_STEPS, beta_range: tuple[float, float] = DEFAULT_BETA_RANGE
) -> NoiseSchedule:
    """Scaled-linear schedule: betas are linear in sqrt space."""
    beta_min, beta_max = beta_range
    if total_steps < 1:
        raise ConfigurationError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 < beta_min <= beta_max < 1:
        raise ConfigurationError(f"invalid beta range {beta_range}")
    betas = np.linspace(math.sqrt(beta_min), math.sqrt(beta_max), total_steps, dtype=np.float64) ** 2
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(total_steps=total_steps, alphas=alphas, alpha_bars=alpha_bars)


def add_noise(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {z0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def predict_z0(z_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Clean-latent estimate obtained by inverting the forward noising."""
    if t < 1:
        raise ValueError("predict_z0 needs t >= 1")
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: z_t {z_t.shape} vs eps_hat {eps_hat.shape}")
    ab = sched.alpha_bar(t)
    return (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def ddim_step(
    z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    z0_hat = predict_z0(z_t, eps_hat, t, sched)
    ab_prev = sched.alpha_bar(t_prev)
    return math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def entry_step(default_steps: int, fraction: float) -> int:
    """Number of active denoising steps for diffuse-then-denoise.

    Rounds down (8 steps at 0.45 gives 3), never below 1.
    """
    if default_steps < 1:
        raise ValueError(f"default_steps must be >= 1, got {default_steps}")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    # the epsilon absorbs binary representation error, e.g. 0.45 * 20
    return max(1, math.floor(fraction * default_steps + 1e-9))


def inference_timesteps(num_steps: int, total_steps: int) -> list[int]:
    """Training timesteps of an ``num_steps`` sampler, largest first.

    Step ``i`` (1-based) sits at ``round(i * T / num_steps)`` so the grid
    always ends at ``T`` and the first step lands at a positive timestep.
    """
    if not 1 <= num_steps <= total_steps:
        raise ValueError(f"num_steps must be in [1, {total_steps}], got {num_steps}")
    return [int(round(i * total_steps / num_steps)) for i in range(num_steps, 0, -1)]


def active_steps(default_steps: int, fraction: float, total_steps: int) -> list[tuple[int, int]]:
    """(t, t_prev) pairs for the last S steps of the default sampler grid.

    The final pair always steps to ``t_prev = 0``.
    """
    s = entry_step(default_steps, fraction)
    grid = inference_timesteps(default_steps, total_steps)[-s:] + [0]
    return list(zip(grid[:-1], grid[1:]))


@dataclass(frozen=True)
class GSPSchedule:
    step_size: float = 0.2
    kind: str = "cosine"

    def __post_init__(self):
        if self.step_size < 0:
            raise ConfigurationError(f"gsp step size must be >= 0, got {self.step_size}")
        if self.kind not in GSP_KINDS:
            raise ConfigurationError(f"unknown gsp schedule {self.kind!r}; expected one of {GSP_KINDS}")


def gsp_delta(t: int, T: int, gsp: GSPSchedule) -> float:
    """Guidance weight at timestep ``t``; time flows from ``T`` down to 0."""
    if not 0 <= t <= T:
        raise ValueError(f"timestep {t} outside [0, {T}]")
    s = gsp.step_size
    r = t / T
    if gsp.kind == "cosine":
        return s * (1.0 + math.cos((1.0 - r) * math.pi)) / 2.0
    if gsp.kind == "linear_decreasing":
        return s * r
    if gsp.kind == "linear_increasing":
        return s * (1.0 - r)
    return s
