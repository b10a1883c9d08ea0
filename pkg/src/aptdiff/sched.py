"""Discrete-time DDPM math: forward noising, x0 recovery, ancestral steps, guidance.

Conventions: timesteps are integers in ``[0, T)``, ``t = 0`` is the least noisy
step, and the network predicts the added noise (epsilon parameterization).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from aptdiff.errors import RangeError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        if self.betas.shape != (self.T,) or self.alpha_bars.shape != (self.T,):
            raise ShapeError("betas and alpha_bars must both have length T")

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def signal(self, t: int) -> float:
        """sqrt(alpha_bar_t), the coefficient on x0."""
        return float(np.sqrt(self.alpha_bars[t]))

    def sigma(self, t: int) -> float:
        """sqrt(1 - alpha_bar_t), the coefficient on the noise."""
        return float(np.sqrt(1.0 - self.alpha_bars[t]))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule in float64."""
    if T < 2:
        raise RangeError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise RangeError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars)


def schedule_from_alpha_bars(alpha_bars) -> NoiseSchedule:
    """Build a schedule from an explicit cumulative-product sequence (used for tests and respacing)."""
    alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
    if alpha_bars.ndim != 1 or alpha_bars.size < 2:
        raise RangeError("need at least two alpha_bars")
    if np.any(alpha_bars <= 0) or np.any(alpha_bars > 1) or np.any(np.diff(alpha_bars) >= 0):
        raise RangeError("alpha_bars must be strictly decreasing within (0, 1]")
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    betas = 1.0 - alpha_bars / prev
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise RangeError("implied betas must lie in (0, 1)")
    return NoiseSchedule(T=alpha_bars.size, betas=betas, alpha_bars=alpha_bars)


def _check_t(t, schedule: NoiseSchedule):
    if isinstance(t, torch.Tensor):
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= schedule.T):
            raise RangeError(f"timestep out of range [0, {schedule.T})")
    elif not 0 <= int(t) < schedule.T:
        raise RangeError(f"timestep {t} out of range [0, {schedule.T})")


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor | float:
    # per-sample timesteps broadcast over all non-batch dims
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        c = torch.from_numpy(values)[t.long()].to(like.dtype)
        return c.view(-1, *([1] * (like.ndim - 1)))
    return float(values[int(t)])


def q_sample(x0: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Jump straight to step ``t``: sqrt(ab)*x0 + sqrt(1-ab)*eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    _check_t(t, schedule)
    a = _coef(np.sqrt(schedule.alpha_bars), t, x0)
    s = _coef(np.sqrt(1.0 - schedule.alpha_bars), t, x0)
    return a * x0 + s * eps


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    _check_t(t, schedule)
    a = _coef(np.sqrt(schedule.alpha_bars), t, x_t)
    s = _coef(np.sqrt(1.0 - schedule.alpha_bars), t, x_t)
    return (x_t - s * eps_hat) / a


def posterior_mean(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, schedule: NoiseSchedule,
                   clip_x0: bool = False) -> torch.Tensor:
    """Mean of q(x_{t-1} | x_t, x0_hat) with x0_hat recovered from the noise estimate."""
    _check_t(t, schedule)
    t = int(t)
    ab = float(schedule.alpha_bars[t])
    ab_prev = schedule.alpha_bar_prev(t)
    beta = float(schedule.betas[t])
    x0_hat = predict_x0(x_t, eps_hat, t, schedule)
    if clip_x0:
        x0_hat = x0_hat.clamp(-1.0, 1.0)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    return float(c0) * x0_hat + float(ct) * x_t


def posterior_std(t: int, schedule: NoiseSchedule) -> float:
    t = int(t)
    if t == 0:
        return 0.0
    ab = float(schedule.alpha_bars[t])
    var = float(schedule.betas[t]) * (1.0 - schedule.alpha_bar_prev(t)) / (1.0 - ab)
    return float(np.sqrt(var))


def sample_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, schedule: NoiseSchedule,
                rng: torch.Generator | None = None, clip_x0: bool = False) -> torch.Tensor:
    """One ancestral reverse step x_t -> x_{t-1}; noise-free at ``t == 0``."""
    mean = posterior_mean(x_t, eps_hat, t, schedule, clip_x0=clip_x0)
    if int(t) == 0:
        return mean
    z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
    return mean + posterior_std(t, schedule) * z


def respace(schedule: NoiseSchedule, steps: int) -> tuple[NoiseSchedule, np.ndarray]:
    """Evenly strided sub-schedule for faster ancestral sampling.

    Returns the respaced schedule and, for each of its steps, the original
    timestep the network should be conditioned on.
    """
    if steps >= schedule.T:
        return schedule, np.arange(schedule.T)
    if steps < 2:
        raise RangeError("respaced sampling needs at least 2 steps")
    use = np.unique(np.round(np.linspace(0, schedule.T - 1, steps)).astype(np.int64))
    return schedule_from_alpha_bars(schedule.alpha_bars[use]), use


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(f"guidance inputs differ: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    return eps_uncond + w * (eps_cond - eps_uncond)
