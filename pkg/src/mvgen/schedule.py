"""Noise schedule for the diffusion process.

``alpha_bar[t]`` is the cumulative product of per-step retention factors
(1 - beta_s); it controls the signal/noise mix when diffusing to step t.
The default is the linear beta schedule 1e-4 -> 0.02 over T=1000 steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass
class NoiseSchedule:
    beta: np.ndarray       # (T,) float64 per-step variances
    alpha_bar: np.ndarray  # (T,) float64 cumulative products of (1 - beta)

    @property
    def T(self) -> int:
        return len(self.beta)

    def validate(self) -> None:
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ValueError("beta values must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if not np.allclose(self.alpha_bar, np.cumprod(1.0 - self.beta), atol=1e-6):
            raise ValueError("alpha_bar inconsistent with beta products")


def make_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    sched = NoiseSchedule(beta=beta, alpha_bar=np.cumprod(1.0 - beta))
    sched.validate()
    return sched


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Diffuse clean data to step t: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.T):
        raise ValueError(f"t out of range [0, {schedule.T})")
    ab = schedule.alpha_bar[t_arr]
    if t_arr.ndim > 0:
        # per-item coefficients broadcast over trailing axes
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    coef_signal = np.sqrt(ab).astype(x0.dtype)
    coef_noise = np.sqrt(1.0 - ab).astype(x0.dtype)
    return coef_signal * x0 + coef_noise * eps
