"""Probabilistic occupancy forecasting.

Two forecasters share one distribution object:

* microscopic: conditions on the ages of currently parked vehicles. Each
  parked vehicle survives the horizon with probability

      sum_j S_j(age + dt) lam_j / sum_k S_k(age) lam_k,   S = 1 - G,

  giving a Bernoulli sum, while vehicles yet to arrive contribute a Poisson
  count with mean integral_0^dt M(t + dt - s) S(s) ds. The sum of the two
  variances is an intrinsic floor on the error of any forecaster; the excess
  observed in backtests is calibrated as a multiplicative sigma2_pred.
* macroscopic: a calendar + SARIMA forecast of the aggregate hourly
  occupancy series, ignoring per-vehicle state. Better at long horizons
  where state information has washed out.

An hourly-relaxation baseline (exponential decay toward a per-cell
equilibrium, the constant-rate/exponential-service prediction) is included
for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .eventlog import StayRecord
from .queueing import HOUR, EmpiricalCdf, RateFunction, integrate_rate_survival
from .seasonal import (
    FixedEffects,
    HourlySeries,
    SarimaModel,
    calendar_tags_for,
    forecast_sarima,
    residual_series,
)

__all__ = [
    "LotState",
    "ForecastParts",
    "ForecastDistribution",
    "SigmaPredTable",
    "MmcParams",
    "BacktestRecord",
    "InsufficientBacktest",
    "LengthMismatch",
    "lot_state_at",
    "survival_prob",
    "survival_probs",
    "expected_remaining",
    "expected_new",
    "var_lower_bound",
    "micro_forecast",
    "perfect_arrival_micro_forecast",
    "estimate_sigma_pred",
    "macro_forecast",
    "mmc_fit",
    "mmc_forecast",
    "rmse",
    "evaluate",
]

SharesFn = Callable[[float], np.ndarray]


class InsufficientBacktest(ValueError):
    """Too few backtest points to calibrate prediction variance."""


class LengthMismatch(ValueError):
    """Forecasts and actuals do not align."""


@dataclass
class LotState:
    """Arrival times of every vehicle parked at ``as_of``."""

    as_of: float
    arrival_times: np.ndarray

    def __post_init__(self):
        self.arrival_times = np.asarray(self.arrival_times, dtype=float)
        if self.arrival_times.size and self.arrival_times.max() > self.as_of:
            raise ValueError("parked vehicles must have arrived by as_of")

    @property
    def count(self) -> int:
        return int(self.arrival_times.size)


def lot_state_at(stays: Sequence[StayRecord], t: float) -> LotState:
    arrivals = np.array(
        [s.arrival_time for s in stays if s.arrival_time <= t < s.departure_time],
        dtype=float,
    )
    return LotState(as_of=t, arrival_times=np.sort(arrivals))


@dataclass
class ForecastParts:
    e_old: float
    var_old: float
    e_new: float
    var_new: float


@dataclass
class ForecastDistribution:
    """Gaussian occupancy forecast with the variance floor attached.

    ``var_lb`` is the method's base variance (for the microscopic method the
    intrinsic Bernoulli + Poisson floor); the calibrated total variance is
    var_lb * (1 + sigma_pred_sq).
    """

    horizon: float
    mean: float
    var_lb: float
    sigma_pred_sq: float = 0.0
    parts: ForecastParts | None = None
    flagged: int = 0

    @property
    def var_total(self) -> float:
        return self.var_lb * (1.0 + self.sigma_pred_sq)

    def interval(self, level: float = 0.95) -> tuple[float, float]:
        half = stats.norm.ppf(0.5 + level / 2.0) * math.sqrt(max(self.var_total, 0.0))
        return self.mean - half, self.mean + half


def _survival_matrix(components: Sequence[EmpiricalCdf], ages: np.ndarray) -> np.ndarray:
    """S_j(age) stacked as (n_vehicles, n_components)."""
    cols = [np.asarray(comp.survival(ages), dtype=float) for comp in components]
    return np.column_stack(cols) if cols else np.empty((ages.size, 0))


def _shares_matrix(
    shares_of: SharesFn, arrival_times: np.ndarray, n_components: int
) -> np.ndarray:
    """Shares per vehicle; evaluated once per distinct arrival hour."""
    hours = np.floor(arrival_times / HOUR).astype(np.int64)
    out = np.empty((arrival_times.size, n_components))
    for h in np.unique(hours):
        row = np.asarray(shares_of((h + 0.5) * HOUR), dtype=float)
        out[hours == h] = row
    return out


def survival_probs(
    state: LotState,
    components: Sequence[EmpiricalCdf],
    shares_of: SharesFn,
    delta_t: float,
) -> tuple[np.ndarray, int]:
    """Per-vehicle probability of still being parked after ``delta_t``.

    Vehicles whose age already exhausts every component support have a zero
    denominator; they are treated as departure-imminent (probability 0) and
    counted in the returned flag total.
    """
    if delta_t < 0:
        raise ValueError("delta_t must be non-negative")
    if state.count == 0:
        return np.empty(0), 0
    ages = state.as_of - state.arrival_times
    lam = _shares_matrix(shares_of, state.arrival_times, len(components))
    s_now = np.sum(_survival_matrix(components, ages) * lam, axis=1)
    s_later = np.sum(_survival_matrix(components, ages + delta_t) * lam, axis=1)
    flagged = int(np.sum(s_now <= 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        probs = np.where(s_now > 0, s_later / np.where(s_now > 0, s_now, 1.0), 0.0)
    return np.clip(probs, 0.0, 1.0), flagged


def survival_prob(
    arrival_time: float,
    t: float,
    delta_t: float,
    shares: np.ndarray,
    components: Sequence[EmpiricalCdf],
) -> float:
    """Probability one vehicle parked since ``arrival_time`` is still parked
    at ``t + delta_t``; value is in [0, 1] and non-increasing in delta_t."""
    state = LotState(as_of=t, arrival_times=np.array([arrival_time]))
    probs, _ = survival_probs(state, components, lambda _: np.asarray(shares), delta_t)
    return float(probs[0])


def expected_remaining(
    state: LotState,
    components: Sequence[EmpiricalCdf],
    shares_of: SharesFn,
    delta_t: float,
) -> tuple[float, float, int]:
    """Mean and variance of the surviving-vehicle count (Bernoulli sum)."""
    probs, flagged = survival_probs(state, components, shares_of, delta_t)
    return float(np.sum(probs)), float(np.sum(probs * (1.0 - probs))), flagged


def expected_new(
    rate_paths: Sequence[RateFunction],
    components: Sequence[EmpiricalCdf],
    t: float,
    delta_t: float,
) -> float:
    """Poisson mean (= variance) of vehicles arriving in (t, t + delta_t]
    and still parked at the end."""
    if delta_t < 0:
        raise ValueError("delta_t must be non-negative")
    if delta_t == 0:
        return 0.0
    if len(rate_paths) != len(components):
        raise ValueError("need one rate path per component")
    return float(
        sum(
            integrate_rate_survival(rate, comp, t + delta_t, s_max=delta_t)
            for rate, comp in zip(rate_paths, components)
        )
    )


def micro_forecast(
    state: LotState,
    components: Sequence[EmpiricalCdf],
    shares_of: SharesFn,
    rate_paths: Sequence[RateFunction],
    delta_t: float,
    sigma_pred: "SigmaPredTable | float | None" = None,
) -> ForecastDistribution:
    """State-conditional occupancy forecast at horizon ``delta_t``."""
    e_old, var_old, flagged = expected_remaining(state, components, shares_of, delta_t)
    e_new = expected_new(rate_paths, components, state.as_of, delta_t)
    parts = ForecastParts(e_old=e_old, var_old=var_old, e_new=e_new, var_new=e_new)
    return ForecastDistribution(
        horizon=delta_t,
        mean=e_old + e_new,
        var_lb=var_old + e_new,
        sigma_pred_sq=_sigma_at(sigma_pred, delta_t),
        parts=parts,
        flagged=flagged,
    )


def perfect_arrival_micro_forecast(
    state: LotState,
    components: Sequence[EmpiricalCdf],
    shares_of: SharesFn,
    true_rate_paths: Sequence[RateFunction],
    delta_t: float,
    sigma_pred: "SigmaPredTable | float | None" = None,
) -> ForecastDistribution:
    """Microscopic forecast with the realized arrival rates in place of the
    fitted forecast; isolates how much error the rate prediction adds."""
    return micro_forecast(state, components, shares_of, true_rate_paths, delta_t, sigma_pred)


def var_lower_bound(
    state: LotState,
    components: Sequence[EmpiricalCdf],
    shares_of: SharesFn,
    rate_paths: Sequence[RateFunction],
    delta_t: float,
) -> float:
    """Intrinsic forecast variance: no predictor conditioned on the current
    state can beat it when the model holds."""
    _, var_old, _ = expected_remaining(state, components, shares_of, delta_t)
    return var_old + expected_new(rate_paths, components, state.as_of, delta_t)


@dataclass
class SigmaPredTable:
    """Per-horizon relative excess variance, log-linear in the horizon
    between calibrated points and constant beyond them."""

    horizons: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.horizons = np.asarray(self.horizons, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.horizons.ndim != 1 or self.horizons.shape != self.values.shape:
            raise ValueError("horizons and values must be equal-length vectors")
        if np.any(np.diff(self.horizons) <= 0):
            raise ValueError("horizons must be strictly increasing")
        if np.any(self.values < 0):
            raise ValueError("sigma2_pred values are non-negative")

    def at(self, delta_t: float) -> float:
        h, v = self.horizons, self.values
        if delta_t <= h[0]:
            return float(v[0])
        if delta_t >= h[-1]:
            return float(v[-1])
        return float(np.interp(np.log(delta_t), np.log(h), v))


def _sigma_at(sigma_pred: SigmaPredTable | float | None, delta_t: float) -> float:
    if sigma_pred is None:
        return 0.0
    if isinstance(sigma_pred, SigmaPredTable):
        return sigma_pred.at(delta_t)
    return float(sigma_pred)


@dataclass
class BacktestRecord:
    """One forecast/actual pair.

    ``var_base`` is the method's own pre-calibration variance (for the
    microscopic method it coincides with the queueing floor), ``var_lb`` is
    the queueing variance floor used for normalized-error reporting, and
    ``var_total`` is the calibrated variance behind coverage intervals.
    Point-only methods carry NaN variances.
    """

    method: str
    horizon: float
    origin: float
    mean: float
    var_base: float
    var_total: float
    var_lb: float
    actual: float


def estimate_sigma_pred(
    records: Sequence[BacktestRecord], min_samples: int = 30
) -> SigmaPredTable:
    """Calibrate sigma2_pred per horizon from backtest errors.

    For each horizon the errors normalized by the method's base variance,
    (actual - mean)/sqrt(var_base), would have unit variance if the model
    were exact; the observed excess, clamped at zero, is the horizon's
    sigma2_pred.
    """
    by_horizon: dict[float, list[float]] = {}
    for rec in records:
        if rec.var_base > 0:
            by_horizon.setdefault(rec.horizon, []).append(
                (rec.actual - rec.mean) / math.sqrt(rec.var_base)
            )
    if not by_horizon:
        raise InsufficientBacktest("no usable backtest records")
    horizons = sorted(by_horizon)
    values = []
    for h in horizons:
        z = np.asarray(by_horizon[h])
        if z.size < min_samples:
            raise InsufficientBacktest(
                f"horizon {h}: {z.size} samples, need at least {min_samples}"
            )
        values.append(max(0.0, float(np.var(z, ddof=1)) - 1.0))
    return SigmaPredTable(horizons=np.asarray(horizons), values=np.asarray(values))


def macro_forecast(
    history: HourlySeries,
    effects: FixedEffects,
    sarima: SarimaModel,
    delta_t: float,
    sigma_pred: SigmaPredTable | float | None = None,
) -> ForecastDistribution:
    """Aggregate-occupancy forecast, independent of per-vehicle state.

    The hourly mean path is the calendar cell mean plus the SARIMA residual
    forecast; sub-hour horizons interpolate between the latest observation
    and the hourly path, with variance interpolated from zero at the origin.
    """
    if delta_t < 0:
        raise ValueError("delta_t must be non-negative")
    if len(history) < 1:
        raise ValueError("history must contain at least one hour")
    anchor = float(history.values[-1])
    if delta_t == 0:
        return ForecastDistribution(
            horizon=0.0, mean=anchor, var_lb=0.0, sigma_pred_sq=_sigma_at(sigma_pred, 0.0)
        )
    steps = int(np.ceil(delta_t / HOUR - 1e-9))
    resid = residual_series(history, effects)
    resid_means, step_vars = forecast_sarima(sarima, resid, steps)
    weekday, hod = calendar_tags_for(history.end, steps, history.utc_offset_hours)
    means = np.maximum(effects.cell_means[weekday, hod] + resid_means, 0.0)
    grid = HOUR * np.arange(steps + 1)
    mean_path = np.concatenate([[anchor], means])
    var_path = np.concatenate([[0.0], step_vars])
    return ForecastDistribution(
        horizon=delta_t,
        mean=float(np.interp(delta_t, grid, mean_path)),
        var_lb=float(np.interp(delta_t, grid, var_path)),
        sigma_pred_sq=_sigma_at(sigma_pred, delta_t),
    )


@dataclass
class MmcParams:
    """Per-(weekday, hour) exponential relaxation toward an equilibrium.

    N(t + dt) = exp(-r dt) (N(t) - c) + c with r per hour; in queueing terms
    the cell's departure rate is mu = r and arrival rate lambda = c * r.
    """

    rate: np.ndarray  # (7, 24) relaxation rate r, 1/hour
    level: np.ndarray  # (7, 24) equilibrium c, vehicles
    fitted: np.ndarray  # cells estimated from data (vs filled from neighbors)

    @property
    def mu(self) -> np.ndarray:
        return self.rate

    @property
    def lam(self) -> np.ndarray:
        return self.level * self.rate


def mmc_fit(
    occupancy: HourlySeries, min_transitions: int = 10, default_rate: float = 1.0
) -> MmcParams:
    """Least-squares fit of hourly relaxation per (weekday, hour) cell.

    With fixed one-hour transitions the model is linear: N(t+1h) = a N(t) + b
    with a = exp(-r) and b = c (1 - a). Cells with too few transitions, a
    slope outside (0, 1), or a negative equilibrium are filled from the
    nearest fitted hour of the same weekday.
    """
    values = occupancy.values
    if len(values) < 2:
        raise ValueError("need at least one transition")
    weekday, hod = occupancy.calendar_tags()
    rate = np.full((7, 24), np.nan)
    level = np.full((7, 24), np.nan)
    fitted = np.zeros((7, 24), dtype=bool)
    for j in range(7):
        for k in range(24):
            sel = (weekday[:-1] == j) & (hod[:-1] == k)
            x = values[:-1][sel]
            y = values[1:][sel]
            if x.size < min_transitions:
                continue
            var_x = float(np.var(x))
            if var_x == 0.0:
                # already at equilibrium; any relaxation rate gives zero residual
                rate[j, k] = default_rate
                level[j, k] = float(np.mean(y))
                fitted[j, k] = True
                continue
            a = float(np.cov(x, y, bias=True)[0, 1] / var_x)
            b = float(np.mean(y) - a * np.mean(x))
            if not (0.0 < a < 1.0):
                continue
            c = b / (1.0 - a)
            if c < 0:
                continue
            rate[j, k] = -math.log(a)
            level[j, k] = c
            fitted[j, k] = True
    if not fitted.any():
        raise InsufficientBacktest("no cell produced a valid relaxation fit")
    for j in range(7):
        for k in range(24):
            if fitted[j, k]:
                continue
            for step in range(1, 24):
                for kk in ((k - step) % 24, (k + step) % 24):
                    if fitted[j, kk]:
                        rate[j, k] = rate[j, kk]
                        level[j, k] = level[j, kk]
                        break
                if not np.isnan(rate[j, k]):
                    break
            if np.isnan(rate[j, k]):
                rate[j, k] = np.nanmean(rate[fitted])
                level[j, k] = np.nanmean(level[fitted])
    return MmcParams(rate=rate, level=level, fitted=fitted)


def mmc_forecast(
    n_now: float, params: MmcParams, t: float, delta_t: float, utc_offset_hours: int = 0
) -> float:
    """Iterate the hourly relaxation, cell by cell, up to ``t + delta_t``."""
    if delta_t < 0:
        raise ValueError("delta_t must be non-negative")
    current = float(n_now)
    now = float(t)
    end = t + delta_t
    while now < end - 1e-9:
        boundary = (math.floor(now / HOUR) + 1) * HOUR
        step_end = min(boundary, end)
        step_hours = (step_end - now) / HOUR
        local_hour = int(math.floor(now / HOUR)) + utc_offset_hours
        j = (local_hour // 24 + 3) % 7
        k = local_hour % 24
        r = float(params.rate[j, k])
        c = float(params.level[j, k])
        current = math.exp(-r * step_hours) * (current - c) + c
        now = step_end
    return current


def rmse(forecasts: np.ndarray, actuals: np.ndarray) -> float:
    forecasts = np.asarray(forecasts, dtype=float)
    actuals = np.asarray(actuals, dtype=float)
    if forecasts.shape != actuals.shape:
        raise LengthMismatch(f"{forecasts.shape} vs {actuals.shape}")
    if forecasts.size == 0:
        raise LengthMismatch("no points to evaluate")
    return float(np.sqrt(np.mean((forecasts - actuals) ** 2)))


def evaluate(records: Sequence[BacktestRecord]) -> dict[tuple[str, float], dict]:
    """Aggregate backtest records by (method, horizon).

    Each row carries RMSE, central-interval coverage at 90/95% (when the
    method reports a variance), and the errors normalized by the queueing
    variance floor for distribution checks.
    """
    groups: dict[tuple[str, float], list[BacktestRecord]] = {}
    for rec in records:
        groups.setdefault((rec.method, rec.horizon), []).append(rec)
    report: dict[tuple[str, float], dict] = {}
    z90 = stats.norm.ppf(0.95)
    z95 = stats.norm.ppf(0.975)
    for key in sorted(groups):
        recs = groups[key]
        means = np.array([r.mean for r in recs])
        actual = np.array([r.actual for r in recs])
        var_total = np.array([r.var_total for r in recs])
        var_lb = np.array([r.var_lb for r in recs])
        err = actual - means
        with np.errstate(invalid="ignore", divide="ignore"):
            normalized = np.where(var_lb > 0, err / np.sqrt(np.where(var_lb > 0, var_lb, 1.0)), np.nan)
        row = {
            "n": len(recs),
            "rmse": rmse(means, actual),
            "mean_var_lb": float(np.nanmean(var_lb)) if np.any(np.isfinite(var_lb)) else float("nan"),
            "normalized_errors": normalized[np.isfinite(normalized)],
        }
        if np.all(np.isfinite(var_total)):
            sd = np.sqrt(np.maximum(var_total, 0.0))
            row["coverage90"] = float(np.mean(np.abs(err) <= z90 * sd))
            row["coverage95"] = float(np.mean(np.abs(err) <= z95 * sd))
        else:
            row["coverage90"] = float("nan")
            row["coverage95"] = float("nan")
        report[key] = row
    return report
