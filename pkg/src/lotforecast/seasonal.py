"""Arrival-rate analysis and models: populations, seasonality, SARIMA.

Arrivals are split into four populations by service-time support (very
short, short, normal, long stops). Each population's hourly arrival count is
modeled as deterministic (weekday, hour-of-day) cell effects plus a
stochastic residual following a SARIMA (1,0,0)x(0,1,1) model with a 24-hour
season:

    (1 - phi B) (x_t - x_{t-24}) = (1 + theta B^24) eps_t

Estimation is conditional sum of squares on the seasonally differenced
series with zero-initialized residuals, then a polish pass from the CSS
optimum. The same scheme serves the aggregate occupancy series for the
macroscopic forecaster.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, signal

from .eventlog import StayRecord
from .queueing import HOUR, EmpiricalCdf, RateFunction

__all__ = [
    "PopulationPartition",
    "HourlySeries",
    "FixedEffects",
    "SarimaModel",
    "PopulationRateModel",
    "SeasonalArrivalModel",
    "PopulationSeries",
    "ComponentEstimate",
    "NonConvergence",
    "DegenerateSeries",
    "classify_stay",
    "empirical_component_cdfs",
    "hourly_population_series",
    "hourly_occupancy_series",
    "acf_pacf",
    "fit_fixed_effects",
    "residual_series",
    "sarima_css",
    "fit_sarima",
    "forecast_sarima",
    "fit_seasonal_arrival_model",
    "forecast_arrival_rate",
]

SEASON = 24


class NonConvergence(RuntimeError):
    """The SARIMA optimizer failed to produce a usable optimum."""


class DegenerateSeries(ValueError):
    """The series has no variation to fit."""


@dataclass(frozen=True)
class PopulationPartition:
    """Service-time class boundaries in minutes; intervals are half-open
    [0, b1), [b1, b2), [b2, b3), [b3, inf)."""

    boundaries_minutes: tuple[float, float, float] = (5.0, 25.0, 360.0)
    labels: tuple[str, ...] = ("very_short", "short", "normal", "long")

    def __post_init__(self):
        b = self.boundaries_minutes
        if len(b) != 3 or not (0 < b[0] < b[1] < b[2]):
            raise ValueError("boundaries must be three increasing positive values")

    @property
    def n_classes(self) -> int:
        return 4

    @property
    def boundaries_seconds(self) -> np.ndarray:
        return np.asarray(self.boundaries_minutes, dtype=float) * 60.0

    def class_interval_seconds(self, index: int, cap: float | None = None) -> tuple[float, float]:
        """Support of class ``index`` (1-based); the last class needs a cap."""
        edges = np.concatenate([[0.0], self.boundaries_seconds])
        if index < self.n_classes:
            return float(edges[index - 1]), float(edges[index])
        if cap is None:
            raise ValueError("the unbounded class requires an explicit cap")
        return float(edges[-1]), float(cap)


def classify_stay(service_time: float, partition: PopulationPartition) -> int:
    """Population index 1..4 for a positive service time in seconds."""
    if service_time <= 0:
        raise ValueError("service time must be positive")
    return int(np.searchsorted(partition.boundaries_seconds, service_time, side="right")) + 1


@dataclass
class HourlySeries:
    """One value per hour starting at ``origin`` (hour-aligned epoch seconds)."""

    origin: float
    values: np.ndarray
    utc_offset_hours: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.origin % HOUR != 0:
            raise ValueError("origin must be hour-aligned")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def end(self) -> float:
        return self.origin + HOUR * len(self.values)

    def hour_times(self) -> np.ndarray:
        return self.origin + HOUR * np.arange(len(self.values))

    def calendar_tags(self) -> tuple[np.ndarray, np.ndarray]:
        """(weekday 0..6 with Monday = 0, hour-of-day 0..23) per entry."""
        local_hours = (self.hour_times() / HOUR).astype(np.int64) + self.utc_offset_hours
        hod = local_hours % 24
        weekday = (local_hours // 24 + 3) % 7  # epoch day 0 was a Thursday
        return weekday.astype(int), hod.astype(int)

    def up_to(self, t: float) -> "HourlySeries":
        """Truncate to hours that end at or before t."""
        n = int(np.floor((t - self.origin) / HOUR + 1e-9))
        n = max(0, min(n, len(self.values)))
        return HourlySeries(self.origin, self.values[:n].copy(), self.utc_offset_hours)


def calendar_tags_for(origin: float, n_hours: int, utc_offset_hours: int = 0):
    return HourlySeries(origin, np.zeros(n_hours), utc_offset_hours).calendar_tags()


@dataclass
class PopulationSeries:
    series: list[HourlySeries]
    shares: np.ndarray  # (n_hours, 4); zero rows where the hour is empty
    empty_hours: np.ndarray

    @property
    def origin(self) -> float:
        return self.series[0].origin


@dataclass
class ComponentEstimate:
    components: list[EmpiricalCdf | None]
    empty_classes: list[int]
    cap: float


def empirical_component_cdfs(
    stays: Sequence[StayRecord],
    partition: PopulationPartition,
    cap: float | None = None,
) -> ComponentEstimate:
    """Empirical service-time distribution of each population on its own
    support. Classes without stays are flagged, not fabricated."""
    services = np.array([s.service_time for s in stays], dtype=float)
    if cap is None:
        cap = float(services.max()) if services.size else float(
            partition.boundaries_seconds[-1]
        )
    classes = (
        np.searchsorted(partition.boundaries_seconds, services, side="right") + 1
        if services.size
        else np.empty(0, dtype=int)
    )
    components: list[EmpiricalCdf | None] = []
    empty: list[int] = []
    for i in range(1, partition.n_classes + 1):
        inside = services[classes == i]
        if inside.size == 0:
            components.append(None)
            empty.append(i)
            continue
        lo, hi = partition.class_interval_seconds(i, cap=max(cap, float(inside.max())))
        components.append(EmpiricalCdf.from_samples(inside, support=(lo, hi)))
    return ComponentEstimate(components=components, empty_classes=empty, cap=cap)


def hourly_population_series(
    stays: Sequence[StayRecord],
    partition: PopulationPartition,
    utc_offset_hours: int = 0,
    origin: float | None = None,
    n_hours: int | None = None,
) -> PopulationSeries:
    """Hourly arrival counts per population and the hourly shares.

    Shares sum to 1 on hours with arrivals; empty hours are flagged and get a
    zero share row (consumers fall back to fitted fixed-effect shares there).
    """
    arrivals = np.array([s.arrival_time for s in stays], dtype=float)
    services = np.array([s.service_time for s in stays], dtype=float)
    if origin is None:
        start = arrivals.min() if arrivals.size else 0.0
        origin = np.floor(start / HOUR) * HOUR
    if n_hours is None:
        end = arrivals.max() if arrivals.size else 0.0
        n_hours = max(int(np.floor((end - origin) / HOUR)) + 1, 1)
    counts = np.zeros((n_hours, partition.n_classes))
    if arrivals.size:
        hour_idx = np.floor((arrivals - origin) / HOUR).astype(int)
        ok = (hour_idx >= 0) & (hour_idx < n_hours)
        classes = np.searchsorted(partition.boundaries_seconds, services, side="right")
        np.add.at(counts, (hour_idx[ok], classes[ok]), 1.0)
    totals = counts.sum(axis=1)
    empty = totals == 0
    shares = np.zeros_like(counts)
    shares[~empty] = counts[~empty] / totals[~empty, None]
    series = [
        HourlySeries(origin, counts[:, i], utc_offset_hours)
        for i in range(partition.n_classes)
    ]
    return PopulationSeries(series=series, shares=shares, empty_hours=empty)


def hourly_occupancy_series(
    stays: Sequence[StayRecord],
    origin: float,
    n_hours: int,
    utc_offset_hours: int = 0,
) -> HourlySeries:
    """Occupancy sampled at hour starts, as the macroscopic model's input."""
    from .eventlog import occupancy_from_stays

    times = origin + HOUR * np.arange(n_hours)
    return HourlySeries(origin, occupancy_from_stays(stays, times).astype(float), utc_offset_hours)


def acf_pacf(values: np.ndarray | HourlySeries, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample autocorrelation and Durbin-Levinson partial autocorrelation,
    both indexed 0..max_lag with value 1 at lag 0."""
    if isinstance(values, HourlySeries):
        values = values.values
    x = np.asarray(values, dtype=float)
    n = x.size
    if n <= max_lag:
        raise ValueError("series must be longer than max_lag")
    x = x - x.mean()
    denom = float(np.dot(x, x))
    if denom == 0:
        raise DegenerateSeries("zero-variance series")
    acf = np.empty(max_lag + 1)
    acf[0] = 1.0
    for k in range(1, max_lag + 1):
        acf[k] = float(np.dot(x[:-k], x[k:])) / denom

    pacf = np.empty(max_lag + 1)
    pacf[0] = 1.0
    if max_lag >= 1:
        phi_prev = np.array([acf[1]])
        pacf[1] = acf[1]
        for k in range(2, max_lag + 1):
            num = acf[k] - float(np.dot(phi_prev, acf[k - 1 : 0 : -1]))
            den = 1.0 - float(np.dot(phi_prev, acf[1:k]))
            phi_kk = num / den if den != 0 else 0.0
            phi_prev = np.concatenate([phi_prev - phi_kk * phi_prev[::-1], [phi_kk]])
            pacf[k] = phi_kk
    return acf, pacf


@dataclass
class FixedEffects:
    """Per-(weekday, hour) cell means with a sum-to-zero decomposition.

    cell_means[j, k] = grand_mean + alpha[j] + beta[k] + gamma[j, k] exactly;
    alpha and beta each sum to zero. Cells with no observations are imputed
    from the additive fit and flagged.
    """

    cell_means: np.ndarray  # (7, 24)
    counts: np.ndarray
    grand_mean: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    imputed: np.ndarray

    def predict(self, weekday: np.ndarray | int, hod: np.ndarray | int) -> np.ndarray | float:
        return self.cell_means[weekday, hod]


def fit_fixed_effects(series: HourlySeries) -> FixedEffects:
    """Least-squares fit of the full-interaction calendar model.

    With the full interaction the fitted value for each (weekday, hour) cell
    is the cell mean; the reported alpha/beta/gamma are the sum-to-zero
    re-expression of those means.
    """
    weekday, hod = series.calendar_tags()
    sums = np.zeros((7, 24))
    counts = np.zeros((7, 24))
    np.add.at(sums, (weekday, hod), series.values)
    np.add.at(counts, (weekday, hod), 1.0)
    if counts.sum() == 0:
        raise DegenerateSeries("empty series")
    observed = counts > 0
    means = np.zeros((7, 24))
    means[observed] = sums[observed] / counts[observed]

    imputed = ~observed
    if imputed.any():
        # additive (weekday + hour) least squares on observed cell means
        jj, kk = np.nonzero(observed)
        design = np.zeros((jj.size, 1 + 7 + 24))
        design[:, 0] = 1.0
        design[np.arange(jj.size), 1 + jj] = 1.0
        design[np.arange(jj.size), 8 + kk] = 1.0
        coef, *_ = np.linalg.lstsq(design, means[observed], rcond=None)
        jj_m, kk_m = np.nonzero(imputed)
        means[imputed] = coef[0] + coef[1 + jj_m] + coef[8 + kk_m]

    grand = float(means.mean())
    alpha = means.mean(axis=1) - grand
    beta = means.mean(axis=0) - grand
    gamma = means - grand - alpha[:, None] - beta[None, :]
    return FixedEffects(
        cell_means=means,
        counts=counts,
        grand_mean=grand,
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        imputed=imputed,
    )


def residual_series(series: HourlySeries, effects: FixedEffects) -> HourlySeries:
    """Series minus its fitted (weekday, hour) cell mean."""
    weekday, hod = series.calendar_tags()
    resid = series.values - effects.cell_means[weekday, hod]
    return HourlySeries(series.origin, resid, series.utc_offset_hours)


@dataclass
class SarimaModel:
    """AR(1) with one seasonal difference and a seasonal MA(1), season 24."""

    phi: float
    theta: float
    sigma2: float
    n_obs: int = 0
    css: float = 0.0

    def __post_init__(self):
        if not (abs(self.phi) < 1 and abs(self.theta) < 1):
            raise ValueError("parameters must satisfy |phi| < 1 and |theta| < 1")
        if self.sigma2 < 0:
            raise ValueError("innovation variance must be non-negative")

    @property
    def aic(self) -> float:
        if self.n_obs == 0 or self.sigma2 <= 0:
            return float("nan")
        return self.n_obs * float(np.log(self.sigma2)) + 2 * 3


def _css_residuals(y: np.ndarray, phi: float, theta: float) -> np.ndarray:
    """Zero-initialized residual filter for the differenced series.

    eps_t = (y_t - phi y_{t-1}) - theta eps_{t-24}; the first observation is
    conditioned on (no residual), and eps before the sample is zero. The
    seasonal MA recursion splits into 24 independent chains, one per phase.
    """
    m = y.size
    eps = np.zeros(m)
    if m < 2:
        return eps
    z = y[1:] - phi * y[:-1]
    t_idx = np.arange(1, m)
    for r in range(SEASON):
        sel = t_idx[t_idx % SEASON == r]
        if sel.size == 0:
            continue
        eps[sel] = signal.lfilter([1.0], [1.0, theta], z[sel - 1])
    return eps


def sarima_css(x: np.ndarray, phi: float, theta: float) -> tuple[float, int]:
    """Conditional sum of squares of the model on a raw (undifferenced)
    series; returns (css, effective observation count)."""
    x = np.asarray(x, dtype=float)
    if x.size < SEASON + 2:
        raise ValueError("series too short for a seasonal difference")
    y = x[SEASON:] - x[:-SEASON]
    eps = _css_residuals(y, phi, theta)
    return float(np.sum(eps[1:] ** 2)), eps.size - 1


def fit_sarima(
    x: np.ndarray | HourlySeries,
    min_length: int = 10 * SEASON,
    theta_bound: float = 0.98,
    phi_bound: float = 0.99,
) -> SarimaModel:
    """CSS fit of the (1,0,0)x(0,1,1)_24 model, then a polish pass.

    The optimizer is bounded inside the stationarity/invertibility region;
    the theta bound sits slightly inside -1 because a seasonal difference of
    weakly seasonal data pushes theta toward the boundary.
    """
    if isinstance(x, HourlySeries):
        x = x.values
    x = np.asarray(x, dtype=float)
    y = x[SEASON:] - x[:-SEASON]
    if y.size < min_length:
        raise ValueError(f"need at least {min_length} seasonally differenced points")
    if float(np.var(y)) == 0.0:
        raise DegenerateSeries("differenced series has zero variance")

    def objective(params: np.ndarray) -> float:
        eps = _css_residuals(y, params[0], params[1])
        return float(np.sum(eps[1:] ** 2))

    bounds = [(-phi_bound, phi_bound), (-theta_bound, theta_bound)]
    starts = [(0.0, 0.0), (0.3, -0.5), (0.6, -0.8), (-0.3, 0.3), (0.3, 0.3)]
    best = None
    for start in starts:
        res = optimize.minimize(
            objective,
            np.asarray(start),
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": 500, "ftol": 1e-8},
        )
        if best is None or res.fun < best.fun:
            best = res
    # polish from the incumbent optimum at tighter tolerance
    res = optimize.minimize(
        objective,
        best.x,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": 500, "ftol": 1e-12},
    )
    if res.fun <= best.fun:
        best = res
    if not np.isfinite(best.fun):
        raise NonConvergence(f"CSS optimization failed: {best.message}")
    phi, theta = float(best.x[0]), float(best.x[1])
    n_eff = y.size - 1
    sigma2 = float(best.fun) / n_eff
    return SarimaModel(phi=phi, theta=theta, sigma2=sigma2, n_obs=n_eff, css=float(best.fun))


def psi_weights(model: SarimaModel, h: int) -> np.ndarray:
    """Moving-average representation weights of the integrated process."""
    psi = np.zeros(h)
    if h == 0:
        return psi
    psi[0] = 1.0
    for j in range(1, h):
        val = model.phi * psi[j - 1]
        if j >= SEASON:
            val += psi[j - SEASON]
        if j >= SEASON + 1:
            val -= model.phi * psi[j - SEASON - 1]
        if j == SEASON:
            val += model.theta
        psi[j] = val
    return psi


def forecast_sarima(
    model: SarimaModel, history: np.ndarray | HourlySeries, h: int
) -> tuple[np.ndarray, np.ndarray]:
    """Recursive h-step forecast; returns (means, variances) per step.

    Variances accumulate squared MA-representation weights, so they are
    non-decreasing in the horizon and the 1-step variance is sigma2 exactly.
    """
    if isinstance(history, HourlySeries):
        history = history.values
    x = np.asarray(history, dtype=float)
    if x.size < SEASON + 1:
        raise ValueError("history must cover at least one season plus one point")
    if h < 1:
        return np.empty(0), np.empty(0)
    y = x[SEASON:] - x[:-SEASON]
    eps = _css_residuals(y, model.phi, model.theta)

    ybuf = list(y)
    ebuf = list(eps)
    xbuf = list(x)
    for _ in range(h):
        t = len(ybuf)
        lag = ebuf[t - SEASON] if t >= SEASON else 0.0
        y_next = model.phi * ybuf[-1] + model.theta * lag
        ybuf.append(y_next)
        ebuf.append(0.0)
        xbuf.append(y_next + xbuf[-SEASON])
    means = np.asarray(xbuf[len(x):], dtype=float)
    psi = psi_weights(model, h)
    variances = model.sigma2 * np.cumsum(psi**2)
    return means, variances


@dataclass
class PopulationRateModel:
    effects: FixedEffects
    sarima: SarimaModel


@dataclass
class SeasonalArrivalModel:
    """Fitted arrival model: one fixed-effects + SARIMA block per population."""

    populations: list[PopulationRateModel]
    utc_offset_hours: int = 0

    @property
    def n_populations(self) -> int:
        return len(self.populations)

    def cell_rates_at(self, t: float) -> np.ndarray:
        """Fixed-effect arrival rates of each population for the hour of t."""
        local_hour = int(np.floor(t / HOUR)) + self.utc_offset_hours
        hod = local_hour % 24
        weekday = (local_hour // 24 + 3) % 7
        return np.array(
            [max(float(p.effects.cell_means[weekday, hod]), 0.0) for p in self.populations]
        )

    def shares_at(self, t: float, observed: PopulationSeries | None = None) -> np.ndarray:
        """Population shares for an arrival at t.

        Observed hourly shares are used when a series is supplied and the
        hour is non-empty; otherwise shares come from the fitted cell rates.
        An all-zero cell falls back to uniform shares.
        """
        if observed is not None:
            idx = int(np.floor((t - observed.origin) / HOUR))
            if 0 <= idx < observed.shares.shape[0] and not observed.empty_hours[idx]:
                return observed.shares[idx]
        rates = self.cell_rates_at(t)
        total = rates.sum()
        if total <= 0:
            return np.full(self.n_populations, 1.0 / self.n_populations)
        return rates / total


def fit_seasonal_arrival_model(
    population_series: Sequence[HourlySeries],
    min_length: int = 10 * SEASON,
) -> SeasonalArrivalModel:
    populations = []
    for series in population_series:
        effects = fit_fixed_effects(series)
        resid = residual_series(series, effects)
        sarima = fit_sarima(resid, min_length=min_length)
        populations.append(PopulationRateModel(effects=effects, sarima=sarima))
    return SeasonalArrivalModel(
        populations=populations,
        utc_offset_hours=population_series[0].utc_offset_hours,
    )


def forecast_arrival_rate(
    model: SeasonalArrivalModel,
    histories: Sequence[HourlySeries],
    horizon_hours: int,
) -> list[RateFunction]:
    """Per-population rate forecasts for the hours after the histories end.

    Each path is the fixed-effect cell mean plus the SARIMA residual
    forecast, floored at zero.
    """
    if len(histories) != model.n_populations:
        raise ValueError("need one history per population")
    out = []
    for pop, history in zip(model.populations, histories):
        resid = residual_series(history, pop.effects)
        means, _ = forecast_sarima(pop.sarima, resid, horizon_hours)
        weekday, hod = calendar_tags_for(history.end, horizon_hours, model.utc_offset_hours)
        cells = pop.effects.cell_means[weekday, hod]
        out.append(RateFunction(np.maximum(cells + means, 0.0), origin=history.end))
    return out
