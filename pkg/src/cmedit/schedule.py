"""Diffusion constants and single-step update rules.

``alpha_bar`` is the cumulative product of ``1 - beta``. All step formulas
take float32 tensors, evaluate in float64 and round the result once.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    # sigma[t] = sqrt(1 - alpha_bar[t-1]): the variance choice that removes the
    # "direction to z_t" term of the DDPM update (sigma[0] = 0)
    sigma: np.ndarray
    t0: int = 0
    tau: tuple[int, ...] = field(default=())

    def a(self, t: int) -> float:
        """sqrt(alpha_bar_t) in float64."""
        return float(np.sqrt(self.alpha_bar[t]))

    def b(self, t: int) -> float:
        """sqrt(1 - alpha_bar_t) in float64."""
        return float(np.sqrt(1.0 - self.alpha_bar[t]))


def build_schedule(
    T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012, t0: int = 0
) -> Schedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not (0 <= t0 < T):
        raise ScheduleError(f"t0 must lie in [0, {T}), got {t0}")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        frac = np.arange(T, dtype=np.float64) / (T - 1)
        beta = (np.sqrt(beta_start) + frac * (np.sqrt(beta_end) - np.sqrt(beta_start))) ** 2
    alpha_bar = np.cumprod(1.0 - beta)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.sqrt(1.0 - prev)
    return Schedule(T=T, beta=beta, alpha_bar=alpha_bar, sigma=sigma, t0=t0)


def select_timesteps(s: Schedule, N: int) -> list[int]:
    """N-1 evenly spaced timesteps from T-1 down toward t0."""
    n = N - 1
    span = s.T - s.t0
    if n < 1:
        raise ScheduleError(f"need N >= 2, got {N}")
    if n > span:
        raise ScheduleError(f"N-1 = {n} exceeds the {span} available timesteps")
    return [s.T - 1 - (k * span) // n for k in range(n)]


def with_timesteps(s: Schedule, N: int) -> Schedule:
    return Schedule(s.T, s.beta, s.alpha_bar, s.sigma, s.t0, tuple(select_timesteps(s, N)))


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _same_shape(*xs) -> None:
    shapes = {np.shape(x) for x in xs}
    if len(shapes) != 1:
        raise ScheduleError(f"shape mismatch: {sorted(shapes)}")


def predict_z0(z_t, t: int, eps, s: Schedule) -> np.ndarray:
    _same_shape(z_t, eps)
    return ((_f64(z_t) - s.b(t) * _f64(eps)) / s.a(t)).astype(np.float32)


def add_noise(z0, eps, t: int, s: Schedule) -> np.ndarray:
    _same_shape(z0, eps)
    return (s.a(t) * _f64(z0) + s.b(t) * _f64(eps)).astype(np.float32)


def consistency_noise(z_t, z0, t: int, s: Schedule) -> np.ndarray:
    """Closed-form noise that makes the clean prediction return ``z0`` exactly."""
    _same_shape(z_t, z0)
    return ((_f64(z_t) - s.a(t) * _f64(z0)) / s.b(t)).astype(np.float32)


def ddpm_step(z_t, t: int, eps_pred, sigma_t: float, noise, s: Schedule) -> np.ndarray:
    """One ancestral DDPM update from t to t-1 with explicit variance sigma_t."""
    _same_shape(z_t, eps_pred, noise)
    if not (1 <= t < s.T):
        raise ScheduleError(f"t must lie in [1, {s.T}), got {t}")
    ab_prev = float(s.alpha_bar[t - 1])
    var_left = 1.0 - ab_prev - float(sigma_t) ** 2
    if var_left < -1e-12 * max(1.0, 1.0 - ab_prev):
        raise ScheduleError(
            f"invalid variance: sigma_t^2 = {float(sigma_t) ** 2:.6g} > 1 - alpha_bar[t-1] = {1 - ab_prev:.6g}"
        )
    direction = np.sqrt(max(var_left, 0.0))
    z0_hat = (_f64(z_t) - s.b(t) * _f64(eps_pred)) / s.a(t)
    out = np.sqrt(ab_prev) * z0_hat + direction * _f64(eps_pred) + float(sigma_t) * _f64(noise)
    return out.astype(np.float32)
