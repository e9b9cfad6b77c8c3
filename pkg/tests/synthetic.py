"""Shared synthetic lot scenarios for the test suite.

The generator realizes the same process the library models: four arrival
populations with weekly calendar rate patterns (optionally plus a stochastic
SARIMA residual), service times drawn from fixed per-class distributions,
and optional drift between the training and evaluation spans (long-stay
durations and/or one population's arrival rate scaled by a constant from a
given week onward). Drift is what separates the fitted model from the data
generator in the benchmark criteria.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from lotforecast.eventlog import StayRecord
from lotforecast.queueing import HOUR, EmpiricalCdf, RateFunction, sample_nhpp
from lotforecast.seasonal import SEASON

WEEK_HOURS = 7 * 24


def smooth_component(lo: float, hi: float, shape: float, n_knots: int = 60) -> EmpiricalCdf:
    """A smooth service-time distribution on [lo, hi): quantile function
    lo + (hi - lo) * u**shape, so shape > 1 concentrates mass near lo."""
    u = np.linspace(0.0, 1.0, n_knots)
    xs = lo + (hi - lo) * u**shape
    return EmpiricalCdf(knots_x=xs, knots_p=u, support=(lo, hi))


def default_components() -> list[EmpiricalCdf]:
    return [
        smooth_component(60.0, 300.0, 1.0),
        smooth_component(300.0, 1500.0, 1.2),
        smooth_component(1500.0, 21600.0, 1.5),
        smooth_component(21600.0, 86400.0, 2.0),
    ]


def weekly_cell_rates(
    n_hours: int,
    base: float,
    peak_hour: float,
    amplitude: float,
    weekday_factor: np.ndarray | None = None,
) -> np.ndarray:
    hod = np.arange(n_hours) % 24
    weekday = (np.arange(n_hours) // 24 + 3) % 7
    if weekday_factor is None:
        weekday_factor = np.array([1.0, 1.1, 1.15, 1.1, 1.0, 0.85, 0.8])
    return base * (1.0 + amplitude * np.sin(2 * np.pi * (hod - peak_hour) / 24)) * weekday_factor[weekday]


def simulate_sarima_series(
    phi: float, theta: float, sigma: float, n: int, rng: np.random.Generator, burn: int = 480
) -> np.ndarray:
    """Simulate the (1,0,0)x(0,1,1)_24 process used for rate residuals."""
    total = n + burn
    eps = rng.normal(0.0, sigma, total)
    ma = eps.copy()
    ma[SEASON:] += theta * eps[:-SEASON]
    y = signal.lfilter([1.0], [1.0, -phi], ma)
    blocks = total // SEASON
    x = y[: blocks * SEASON].reshape(blocks, SEASON).cumsum(axis=0).ravel()
    return x[-n:]


@dataclass
class Scenario:
    stays: list[StayRecord]
    rates: list[RateFunction]  # realized hourly rates, drift included
    components: list[EmpiricalCdf]  # generating components before drift
    n_hours: int
    drift_start: float | None

    @property
    def horizon(self) -> float:
        return self.n_hours * HOUR

    def true_shares_at(self, t: float) -> np.ndarray:
        k = int(t // HOUR)
        row = np.array([r.hourly_rates[k] for r in self.rates])
        total = row.sum()
        return row / total if total > 0 else np.full(len(row), 1.0 / len(row))


def build_scenario(
    weeks: int = 13,
    seed: int = 0,
    bases: tuple = (20.0, 24.0, 26.0, 12.0),
    peaks: tuple = (12.0, 13.0, 14.0, 19.0),
    amplitudes: tuple = (0.5, 0.5, 0.4, 0.6),
    resid_sigma_frac: float = 0.0,
    resid_phi: float = 0.4,
    resid_theta: float = -0.5,
    drift_start_week: int | None = None,
    long_stay_scale: float = 1.0,
    long_rate_scale: float = 1.0,
) -> Scenario:
    """Simulate one lot.

    With ``resid_sigma_frac`` > 0 each population's hourly rate carries a
    SARIMA residual on top of the calendar pattern. From the start of
    ``drift_start_week`` (0-based), population 4's realized rates scale by
    ``long_rate_scale`` and its service durations by ``long_stay_scale``;
    a model fitted on earlier weeks never sees either change.
    """
    rng = np.random.default_rng(seed)
    n_hours = weeks * WEEK_HOURS
    components = default_components()
    drift_start = None if drift_start_week is None else drift_start_week * WEEK_HOURS * HOUR

    rates: list[RateFunction] = []
    for i, (base, peak, amp) in enumerate(zip(bases, peaks, amplitudes)):
        cells = weekly_cell_rates(n_hours, base, peak, amp)
        if resid_sigma_frac > 0:
            resid = simulate_sarima_series(
                resid_phi, resid_theta, resid_sigma_frac * base, n_hours, rng
            )
            cells = np.maximum(cells + resid, 0.0)
        if i == 3 and drift_start is not None and long_rate_scale != 1.0:
            k0 = int(drift_start / HOUR)
            cells = cells.copy()
            cells[k0:] *= long_rate_scale
        rates.append(RateFunction(cells, 0.0))

    stays: list[StayRecord] = []
    idx = 0
    for i, (rate, comp) in enumerate(zip(rates, components)):
        arrivals = sample_nhpp(rate, n_hours * HOUR, rng)
        durations = np.asarray(comp.quantile(rng.random(arrivals.size)), dtype=float)
        if i == 3 and drift_start is not None and long_stay_scale != 1.0:
            durations = np.where(arrivals >= drift_start, durations * long_stay_scale, durations)
        for a, d in zip(arrivals, durations):
            stays.append(StayRecord(f"v{idx:07d}", float(a), float(a + d)))
            idx += 1
    stays.sort(key=lambda s: (s.arrival_time, s.spot_id))
    return Scenario(
        stays=stays,
        rates=rates,
        components=components,
        n_hours=n_hours,
        drift_start=drift_start,
    )
