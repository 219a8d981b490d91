"""Linear-beta DDPM noise schedule."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from ..errors import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor  # (T,) float64

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    @property
    def alphas(self) -> torch.Tensor:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> torch.Tensor:
        return torch.cumprod(self.alphas, dim=0)

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(torch.tensor(d["betas"], dtype=torch.float64))


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ConfigError("T must be >= 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(torch.linspace(beta_start, beta_end, T, dtype=torch.float64))


def _check_t(t, schedule: NoiseSchedule) -> torch.Tensor:
    t = torch.as_tensor(t)
    if bool((t < 0).any()) or bool((t >= schedule.T).any()):
        raise ConfigError(f"timestep out of range [0, {schedule.T})")
    return t


def add_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``t`` is a scalar or per-leading-row."""
    t = _check_t(t, schedule)
    abar = schedule.alpha_bars[t].to(z0.dtype)
    abar = abar.reshape(abar.shape + (1,) * (z0.ndim - abar.ndim))
    return abar.sqrt() * z0 + (1 - abar).sqrt() * eps


def ddpm_step(z_t: torch.Tensor, t: int, t_prev: int, eps: torch.Tensor, schedule: NoiseSchedule,
              noise: torch.Tensor) -> torch.Tensor:
    """One ancestral step from t to t_prev (< t; -1 means the clean sample).

    Strided steps use the effective beta 1 - abar_t / abar_prev.
    """
    abar = schedule.alpha_bars
    a_t = float(abar[t])
    a_prev = float(abar[t_prev]) if t_prev >= 0 else 1.0
    beta = 1.0 - a_t / a_prev
    z0 = ((z_t - (1 - a_t) ** 0.5 * eps) / a_t**0.5).clamp(-1, 1)
    if t_prev < 0:
        return z0
    # posterior q(z_prev | z_t, z0)
    c0 = a_prev**0.5 * beta / (1 - a_t)
    ct = (1 - beta) ** 0.5 * (1 - a_prev) / (1 - a_t)
    var = beta * (1 - a_prev) / (1 - a_t)
    return c0 * z0 + ct * z_t + var**0.5 * noise


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Descending, evenly strided timesteps starting at T - 1."""
    if not 1 <= steps <= T:
        raise ConfigError(f"sampling steps must be in [1, {T}]")
    ts = torch.linspace(T - 1, 0, steps).round().long().tolist()
    return list(dict.fromkeys(ts))
