"""Loss, selection bias, efficiency and adjacent averaging."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

__all__ = [
    "PerNMetrics",
    "loss_simple",
    "expected_bias_increment",
    "guess_outcome",
    "efficiency",
    "adjacent_average",
    "MomentSums",
]


@dataclass(frozen=True)
class PerNMetrics:
    n: int
    loss_mean: float
    bias_mean: float
    loss_se: float = 0.0
    bias_se: float = 0.0


def loss_simple(d, n):
    """Effective number of patients lost to imbalance, ``d**2 / n``.

    The same expression is used for odd ``n``.
    """
    d = np.asarray(d, dtype=float)
    n = np.asarray(n, dtype=float)
    if np.any(n < 1):
        raise ParameterError("loss needs n >= 1")
    if np.any(np.abs(d) > n):
        raise ParameterError("imbalance larger than the number of patients")
    out = d * d / n
    return float(out) if out.ndim == 0 else out


def expected_bias_increment(pi1):
    """Expected (correct - incorrect) guesses when guessing the likelier arm.

    Equals ``2 max(pi1, 1 - pi1) - 1``; zero for a fair coin.
    """
    pi1 = np.asarray(pi1, dtype=float)
    if np.any((pi1 < 0) | (pi1 > 1)):
        raise ParameterError("allocation probability outside [0, 1]")
    out = np.abs(2.0 * pi1 - 1.0)
    return float(out) if out.ndim == 0 else out


def guess_outcome(pi1, arm1):
    """Realised guess score: +1 correct, -1 wrong, 0 when ``pi1 = 0.5``.

    ``arm1`` is true where treatment 1 was allocated.
    """
    pi1 = np.asarray(pi1, dtype=float)
    guess1 = pi1 > 0.5
    score = np.where(guess1 == np.asarray(arm1, dtype=bool), 1.0, -1.0)
    return np.where(pi1 == 0.5, 0.0, score)


def efficiency(loss, n):
    """Efficiency ``1 - loss/n`` relative to the balanced design."""
    loss = np.asarray(loss, dtype=float)
    if np.any(loss < 0) or np.any(loss > n):
        raise ParameterError(f"loss must lie in [0, n={n}]")
    out = 1.0 - loss / n
    return float(out) if out.ndim == 0 else out


def adjacent_average(series):
    """Average of neighbouring values, ``(x[n-1] + x[n]) / 2``.

    ``series[k]`` holds the value at ``n = k + 1``; the first entry of the
    result is NaN because there is no value at ``n = 0``. A mapping
    ``{n: value}`` is also accepted and a mapping is returned for every
    ``n`` whose predecessor is present.
    """
    if isinstance(series, dict):
        return {n: 0.5 * (series[n - 1] + v) for n, v in series.items() if n - 1 in series}
    x = np.asarray(series, dtype=float)
    out = np.full_like(x, np.nan)
    out[1:] = 0.5 * (x[:-1] + x[1:])
    return out


@dataclass
class MomentSums:
    """Per-n count, sum and sum of squares; merged in a fixed order.

    NaN entries (undefined values, e.g. loss before the design has full
    rank) are skipped.
    """

    count: np.ndarray
    total: np.ndarray
    sumsq: np.ndarray

    @classmethod
    def zeros(cls, length: int) -> "MomentSums":
        return cls(np.zeros(length), np.zeros(length), np.zeros(length))

    @classmethod
    def from_traces(cls, traces: np.ndarray) -> "MomentSums":
        traces = np.asarray(traces, dtype=float)
        ok = ~np.isnan(traces)
        vals = np.where(ok, traces, 0.0)
        return cls(ok.sum(axis=0).astype(float), vals.sum(axis=0), (vals * vals).sum(axis=0))

    def merge(self, other: "MomentSums") -> "MomentSums":
        return MomentSums(self.count + other.count, self.total + other.total, self.sumsq + other.sumsq)

    def mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, self.total / self.count, np.nan)

    def se(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = self.mean()
            ss = self.sumsq - self.count * mean * mean
            # cancellation noise when every value is the same
            ss = np.where(ss <= 64 * np.finfo(float).eps * self.sumsq, 0.0, ss)
            var = ss / (self.count - 1)
            return np.where(self.count > 1, np.sqrt(np.maximum(var, 0.0) / self.count), np.nan)
