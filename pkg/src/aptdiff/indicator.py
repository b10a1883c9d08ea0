"""Per-timestep-bin overfitting indicator and the two knobs it drives.

The indicator for a bin compares smoothed denoising losses of the frozen prior
and the fine-tuned model::

    gamma = 1 - exp(-temperature * (ema_prior - ema_tuned))

floored at 0 so a tuned model that is *worse* than the prior never increases
its own loss weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from aptdiff.csvlog import CsvLog
from aptdiff.errors import NonFiniteError, RangeError

# largest double below 1; keeps gamma inside [0, 1) once the exponential underflows
_GAMMA_CAP = math.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class BinMap:
    T: int
    B: int

    def __post_init__(self):
        if self.B < 1 or self.T < 1 or self.T % self.B:
            raise RangeError(f"bin count {self.B} must divide T={self.T}")

    @property
    def width(self) -> int:
        return self.T // self.B

    def bin_of(self, t: int) -> int:
        if not 0 <= t < self.T:
            raise RangeError(f"timestep {t} outside [0, {self.T})")
        return int(t) // self.width

    def bin_range(self, b: int) -> tuple[int, int]:
        return b * self.width, (b + 1) * self.width


def bin_of(t: int, binmap: BinMap) -> int:
    return binmap.bin_of(t)


def compute_gamma(ema_phi: float, ema_theta: float, temperature: float) -> float:
    """Overfitting degree in [0, 1) from the prior/tuned EMA gap."""
    if not (math.isfinite(ema_phi) and math.isfinite(ema_theta) and math.isfinite(temperature)):
        raise NonFiniteError("indicator inputs must be finite")
    if temperature <= 0:
        raise RangeError(f"temperature must be > 0, got {temperature}")
    gap = ema_phi - ema_theta
    if gap <= 0.0:
        return 0.0
    return min(-math.expm1(-temperature * gap), _GAMMA_CAP)


def augment_probability(gamma: float, p_max: float) -> float:
    if not 0.0 <= p_max <= 1.0:
        raise RangeError(f"p_max must lie in [0, 1], got {p_max}")
    return min(max(gamma, 0.0), p_max)


def adaptive_weight(gamma: float) -> float:
    """Loss multiplier ``1 - clamp(gamma, 0, 1)``."""
    return 1.0 - min(max(gamma, 0.0), 1.0)


def ema_step(prev: float | None, value: float, alpha: float) -> float:
    return value if prev is None else (1.0 - alpha) * prev + alpha * value


def temperature_for(mode: str, T: int) -> float:
    if mode == "full":
        return float(T)
    if mode == "tenth":
        return T / 10.0
    raise RangeError(f"unknown temperature mode {mode!r} (expected 'full' or 'tenth')")


class IndicatorState:
    """EMA pair per bin; ``gamma`` is always derived from them, never stored."""

    def __init__(self, bins: int, alpha: float = 0.1, temperature: float = 1000.0):
        if not 0.0 < alpha <= 1.0:
            raise RangeError(f"EMA alpha must lie in (0, 1], got {alpha}")
        if temperature <= 0:
            raise RangeError("temperature must be > 0")
        self.bins = bins
        self.alpha = alpha
        self.temperature = temperature
        self.ema_phi = np.zeros(bins)
        self.ema_theta = np.zeros(bins)
        self.initialized = np.zeros((bins, 2), dtype=bool)

    def gamma_of(self, b: int) -> float:
        if not self.initialized[b].all():
            return 0.0
        return compute_gamma(float(self.ema_phi[b]), float(self.ema_theta[b]), self.temperature)

    @property
    def gamma(self) -> np.ndarray:
        return np.array([self.gamma_of(b) for b in range(self.bins)])

    def update(self, b: int, loss_phi: float, loss_theta: float) -> "IndicatorState":
        if not 0 <= b < self.bins:
            raise RangeError(f"bin {b} outside [0, {self.bins})")
        for v in (loss_phi, loss_theta):
            if not math.isfinite(v):
                raise NonFiniteError(f"non-finite loss {v}")
            if v < 0:
                raise RangeError(f"loss must be >= 0, got {v}")
        for col, track, v in ((0, self.ema_phi, loss_phi), (1, self.ema_theta, loss_theta)):
            prev = float(track[b]) if self.initialized[b, col] else None
            track[b] = ema_step(prev, float(v), self.alpha)
            self.initialized[b, col] = True
        return self

    def state_dict(self) -> dict:
        return {
            "bins": self.bins,
            "alpha": self.alpha,
            "temperature": self.temperature,
            "ema_phi": self.ema_phi.tolist(),
            "ema_theta": self.ema_theta.tolist(),
            "initialized": self.initialized.tolist(),
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "IndicatorState":
        s = cls(d["bins"], d["alpha"], d["temperature"])
        s.ema_phi = np.array(d["ema_phi"], dtype=np.float64)
        s.ema_theta = np.array(d["ema_theta"], dtype=np.float64)
        s.initialized = np.array(d["initialized"], dtype=bool)
        return s


def ema_update(state: IndicatorState, b: int, loss_phi: float, loss_theta: float) -> IndicatorState:
    return state.update(b, loss_phi, loss_theta)


INDICATOR_COLUMNS = ("step", "bin", "ema_phi", "ema_theta", "gamma")


class IndicatorLog(CsvLog):
    """Append-only CSV, one row per update (the bin touched at that step)."""

    def __init__(self, path, resume_step: int | None = None):
        super().__init__(path, INDICATOR_COLUMNS, resume_step)

    def record(self, step: int, b: int, state: IndicatorState) -> None:
        self.write([step, b, float(state.ema_phi[b]), float(state.ema_theta[b]), state.gamma_of(b)])
