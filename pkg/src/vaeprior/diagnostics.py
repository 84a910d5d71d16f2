"""MCMC and model-quality diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatchError, InvalidArgumentError
from .spatial import SpatialStructure


@dataclass(frozen=True)
class EssResult:
    ess: float
    lag: int
    degenerate: bool = False


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each column of ``x`` (draws x chains) via FFT."""
    n = x.shape[0]
    centered = x - x.mean(axis=0)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centered, n=size, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=0)[:n]
    return acov / n


def ess(chains: np.ndarray) -> EssResult:
    """Multi-chain effective sample size with Geyer's initial positive sequence.

    ``chains`` has shape (draws, chains); a 1-D array is a single chain.
    """
    x = np.asarray(chains, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, m = x.shape
    if n < 4:
        raise InvalidArgumentError("ESS needs at least 4 draws per chain")
    total = n * m
    acov = _autocovariance(x)
    chain_var = acov[0] * n / (n - 1.0)
    w = chain_var.mean()
    var_plus = w * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=0).var(ddof=1)
    if not var_plus > 0 or not np.isfinite(var_plus):
        return EssResult(float(total), 0, degenerate=True)
    rho = 1.0 - (w - acov.mean(axis=1)) / var_plus
    rho[0] = 1.0
    # Geyer: sum consecutive pairs while positive, forcing them nonincreasing.
    pair_sums = []
    t = 0
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p <= 0:
            break
        if pair_sums and p > pair_sums[-1]:
            p = pair_sums[-1]
        pair_sums.append(p)
        t += 2
    tau = -1.0 + 2.0 * float(np.sum(pair_sums)) if pair_sums else 1.0
    tau = max(tau, 1.0 / 1.5)
    return EssResult(total / tau, t)


def split_rhat(chains: np.ndarray) -> tuple[float, bool]:
    """Split-chain potential scale reduction. Returns (rhat, degenerate_flag)."""
    x = np.asarray(chains, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n % 2:
        x = x[1:]
        n -= 1
    if n < 4:
        raise InvalidArgumentError("split R-hat needs at least 4 draws per chain")
    half = n // 2
    split = np.concatenate([x[:half], x[half:]], axis=1)
    w = split.var(axis=0, ddof=1).mean()
    if not w > 0:
        return 1.0, True
    b_over_n = split.mean(axis=0).var(ddof=1)
    var_plus = w * (half - 1.0) / half + b_over_n
    return float(np.sqrt(var_plus / w)), False


@dataclass
class EssReport:
    names: list[str]
    ess: np.ndarray
    rhat: np.ndarray
    per_chain_ess: np.ndarray
    lags: np.ndarray
    degenerate: np.ndarray

    @property
    def mean_ess(self) -> float:
        return float(np.mean(self.ess))

    def subset(self, prefix: str) -> "EssReport":
        idx = [i for i, name in enumerate(self.names) if name.startswith(prefix)]
        return EssReport(
            [self.names[i] for i in idx],
            self.ess[idx],
            self.rhat[idx],
            self.per_chain_ess[:, idx],
            self.lags[idx],
            self.degenerate[idx],
        )


def ess_report(draws: np.ndarray, names: Sequence[str]) -> EssReport:
    """Diagnostics for draws shaped (chains, samples, params)."""
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim != 3 or draws.shape[2] != len(names):
        raise DimensionMismatchError("draws must be (chains, samples, params) matching names")
    m, _, p = draws.shape
    pooled = np.empty(p)
    lags = np.empty(p, dtype=int)
    degenerate = np.zeros(p, dtype=bool)
    rhat = np.empty(p)
    per_chain = np.empty((m, p))
    for j in range(p):
        col = draws[:, :, j].T
        res = ess(col)
        pooled[j], lags[j], degenerate[j] = res.ess, res.lag, res.degenerate
        rhat[j] = split_rhat(col)[0]
        for c in range(m):
            per_chain[c, j] = ess(col[:, c]).ess
    return EssReport(list(names), pooled, rhat, per_chain, lags, degenerate)


# --------------------------------------------------------------------------
# Spectra
# --------------------------------------------------------------------------


@dataclass
class PsdEstimate:
    frequencies: np.ndarray
    mean_log_power: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def periodogram_power(samples: np.ndarray) -> np.ndarray:
    """One-sided periodogram of each demeaned row, normalised so rows sum to sum((x - mean)^2)."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = x.shape[1]
    centered = x - x.mean(axis=1, keepdims=True)
    power = np.abs(np.fft.rfft(centered, axis=1)) ** 2 / n
    if n % 2 == 0:
        power[:, 1:-1] *= 2.0
    else:
        power[:, 1:] *= 2.0
    return power


def periodogram(samples: np.ndarray, spacing: float | SpatialStructure) -> PsdEstimate:
    """Mean and 2.5/97.5% envelopes of per-draw log-periodograms.

    DC and Nyquist bins are dropped; frequencies are in cycles per unit length.
    """
    if isinstance(spacing, SpatialStructure):
        if not spacing.regular or spacing.spacing is None or spacing.points.shape[1] != 1:
            raise InvalidArgumentError("periodograms need a regular 1-D grid")
        spacing = spacing.spacing
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = x.shape[1]
    if n < 8:
        raise InvalidArgumentError("periodograms need n >= 8")
    power = periodogram_power(x)
    last = n // 2 if n % 2 else n // 2 - 1
    log_power = np.log(np.maximum(power[:, 1 : last + 1], np.finfo(float).tiny))
    freqs = np.fft.rfftfreq(n, d=spacing)[1 : last + 1]
    lo, hi = np.percentile(log_power, [2.5, 97.5], axis=0)
    return PsdEstimate(freqs, log_power.mean(axis=0), lo, hi)


def low_frequency_gap(a: PsdEstimate, b: PsdEstimate, fraction: float = 0.25) -> float:
    """Max |difference| of mean log-power over the lowest ``fraction`` of bins."""
    if a.frequencies.shape != b.frequencies.shape:
        raise DimensionMismatchError("PSD estimates have different bins")
    k = max(1, int(len(a.frequencies) * fraction))
    return float(np.max(np.abs(a.mean_log_power[:k] - b.mean_log_power[:k])))


def write_psd_csv(path: str | Path, estimates: Mapping[str, PsdEstimate]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "bin", "frequency", "mean_log_power", "lo", "hi"])
        for source, est in estimates.items():
            for k in range(len(est.frequencies)):
                writer.writerow(
                    [
                        source,
                        k + 1,
                        repr(float(est.frequencies[k])),
                        repr(float(est.mean_log_power[k])),
                        repr(float(est.lo[k])),
                        repr(float(est.hi[k])),
                    ]
                )


# --------------------------------------------------------------------------
# Prediction error and cross-validation
# --------------------------------------------------------------------------


def mse(pred: np.ndarray, obs: np.ndarray) -> float:
    pred, obs = np.asarray(pred, dtype=np.float64), np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise DimensionMismatchError(f"shape {pred.shape} != {obs.shape}")
    return float(np.mean((pred - obs) ** 2))


def kfold_split(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Random partition of range(n) into k folds whose sizes differ by at most one."""
    if k < 1 or k > n:
        raise InvalidArgumentError(f"need 1 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(fold) for fold in np.array_split(perm, k)]
