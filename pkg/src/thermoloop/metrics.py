"""Prediction-error and closed-loop stability statistics.

Prediction reports give per-step and pooled MAE/RMSE/MAPE for multi-step
forecasts; MAPE denominators are temperatures in Celsius (kelvin denominators
would shrink the percentages by an order of magnitude and zero-Celsius targets
are excluded and counted). Stability reports bundle the range, the population
standard deviation and the non-overlapping two-sample (Allan) deviation of
block means at averaging times of 1, 10 and 100 s.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .configio import atomic_write_text

KELVIN_OFFSET = 273.15
DEFAULT_TAUS = (1.0, 10.0, 100.0)


@dataclass
class PredictionReport:
    per_step_mae: np.ndarray    # (m,) kelvin
    per_step_rmse: np.ndarray   # (m,) kelvin
    per_step_mape: np.ndarray   # (m,) percent
    overall_mae: float
    overall_rmse: float
    overall_mape: float
    sample_count: int
    mape_excluded: int          # targets at exactly 0 C dropped from MAPE

    @property
    def horizon(self) -> int:
        return len(self.per_step_mae)

    def to_csv(self) -> str:
        lines = ["step,mae_C,rmse_C,mape_pct"]
        for l in range(self.horizon):
            lines.append(f"{l + 1},{float(self.per_step_mae[l])!r},"
                         f"{float(self.per_step_rmse[l])!r},{float(self.per_step_mape[l])!r}")
        lines.append(f"overall,{self.overall_mae!r},{self.overall_rmse!r},{self.overall_mape!r}")
        lines.append(f"# samples={self.sample_count} mape_excluded={self.mape_excluded}")
        return "\n".join(lines) + "\n"


@dataclass
class StabilityReport:
    range_k: float
    std_k: float
    allan: list[tuple[float, float]]   # (tau seconds, sigma kelvin)
    duration_s: float = float("nan")

    def to_csv(self) -> str:
        lines = ["metric,value", f"range_C,{self.range_k!r}", f"std_C,{self.std_k!r}"]
        for tau, sigma in self.allan:
            lines.append(f"allan_{tau:g}s_C,{sigma!r}")
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        atomic_write_text(path, self.to_csv())


def stepwise_errors(preds: np.ndarray, targets: np.ndarray) -> PredictionReport:
    """Per-step and pooled error metrics of a batch of m-step forecasts (kelvin in)."""
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {targets.shape}")
    if preds.size == 0:
        raise ValueError("empty prediction batch")
    err = preds - targets
    mae = np.mean(np.abs(err), axis=0)
    rmse = np.sqrt(np.mean(err ** 2, axis=0))

    target_c = targets - KELVIN_OFFSET
    nonzero = target_c != 0.0
    excluded = int(targets.size - np.count_nonzero(nonzero))
    ape = np.where(nonzero, np.abs(err) / np.where(nonzero, np.abs(target_c), 1.0), np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN steps stay NaN
        mape = 100.0 * np.nanmean(ape, axis=0)
        overall_mape = 100.0 * float(np.nanmean(ape))
    return PredictionReport(
        per_step_mae=mae, per_step_rmse=rmse, per_step_mape=mape,
        overall_mae=float(np.mean(np.abs(err))),
        overall_rmse=float(np.sqrt(np.mean(err ** 2))),
        overall_mape=overall_mape,
        sample_count=preds.shape[0], mape_excluded=excluded)


def range_stat(series) -> float:
    """Peak-to-peak amplitude."""
    series = np.asarray(series, dtype=np.float64)
    if series.size == 0:
        raise ValueError("empty series")
    return float(np.max(series) - np.min(series))


def std_stat(series) -> float:
    """Population (1/N) standard deviation."""
    series = np.asarray(series, dtype=np.float64)
    if series.size == 0:
        raise ValueError("empty series")
    return float(np.std(series))


def allan_deviation(series, sample_period: float,
                    taus=DEFAULT_TAUS) -> list[tuple[float, float]]:
    """Two-sample deviation of non-overlapping block means per averaging time.

    Each tau must be a whole multiple of the sample period; taus leaving fewer
    than two full blocks are skipped with a warning. Leftover samples beyond
    the last full block are discarded.
    """
    series = np.asarray(series, dtype=np.float64)
    if sample_period <= 0:
        raise ValueError("sample_period must be > 0")
    out: list[tuple[float, float]] = []
    for tau in taus:
        block = tau / sample_period
        block_len = int(round(block))
        if block_len < 1 or abs(block - block_len) > 1e-9:
            raise ValueError(f"tau={tau} s is not a positive multiple of the "
                             f"sample period {sample_period} s")
        n_blocks = series.size // block_len
        if n_blocks < 2:
            warnings.warn(f"tau={tau} s skipped: only {n_blocks} full block(s)")
            continue
        means = series[:n_blocks * block_len].reshape(n_blocks, block_len).mean(axis=1)
        diffs = np.diff(means)
        sigma = math.sqrt(float(np.sum(diffs ** 2)) / (2.0 * (n_blocks - 1)))
        out.append((float(tau), sigma))
    return out


def stability_report(series, sample_period: float,
                     taus=DEFAULT_TAUS, min_duration: float = 1000.0) -> StabilityReport:
    """Bundle range, standard deviation and Allan deviations of one series."""
    series = np.asarray(series, dtype=np.float64)
    duration = series.size * sample_period
    if duration < min_duration:
        raise ValueError(f"series covers {duration:.1f} s, need at least "
                         f"{min_duration:.0f} s")
    return StabilityReport(range_k=range_stat(series), std_k=std_stat(series),
                           allan=allan_deviation(series, sample_period, taus),
                           duration_s=duration)
