"""Infinite-server queue with hourly-varying Poisson arrivals.

The lot is modeled as an infinite-server queue: vehicles arrive by a
non-homogeneous Poisson process with a piecewise-constant hourly rate, park
for a random duration drawn from a four-component service-time mixture, and
never find the lot full. The expected occupancy at time t is

    sum_i integral_0^inf M_i(t - s) * (1 - G_i(s)) ds

which this module evaluates exactly for piecewise-constant rates against
piecewise-linear empirical service distributions. The simulator realizes the
same process and is the oracle for every statistical module downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .eventlog import EventLog, StayRecord, log_from_stays

__all__ = [
    "HOUR",
    "RateFunction",
    "EmpiricalCdf",
    "ServiceMixture",
    "SimConfig",
    "UndefinedHistory",
    "sample_nhpp",
    "sample_service",
    "simulate_lot",
    "simulate_stays",
    "expected_occupancy",
    "integrate_rate_survival",
]

HOUR = 3600.0


class UndefinedHistory(ValueError):
    """The rate function does not reach far enough back for the requested time."""


@dataclass
class RateFunction:
    """Piecewise-constant arrival rate, one value per hour slot.

    ``hourly_rates[k]`` applies on ``[origin + k*3600, origin + (k+1)*3600)``
    in vehicles per hour.
    """

    hourly_rates: np.ndarray
    origin: float = 0.0

    def __post_init__(self):
        self.hourly_rates = np.asarray(self.hourly_rates, dtype=float)
        if self.hourly_rates.ndim != 1:
            raise ValueError("hourly_rates must be one-dimensional")
        if not np.all(np.isfinite(self.hourly_rates)) or np.any(self.hourly_rates < 0):
            raise ValueError("rates must be finite and non-negative")

    @property
    def end(self) -> float:
        return self.origin + HOUR * len(self.hourly_rates)

    def at(self, t: float) -> float:
        if t < self.origin or t >= self.end:
            raise UndefinedHistory(f"rate undefined at t={t}")
        return float(self.hourly_rates[int((t - self.origin) // HOUR)])

    def integral(self, a: float, b: float) -> float:
        """Integrated rate over [a, b] in expected vehicle counts."""
        if b <= a:
            return 0.0
        if a < self.origin or b > self.end + 1e-9:
            raise UndefinedHistory(f"rate undefined on [{a}, {b}]")
        edges = self.origin + HOUR * np.arange(len(self.hourly_rates) + 1)
        left = np.clip(edges[:-1], a, b)
        right = np.clip(edges[1:], a, b)
        return float(np.sum(self.hourly_rates * (right - left)) / HOUR)


@dataclass
class EmpiricalCdf:
    """Piecewise-linear CDF over a bounded support, in seconds.

    ``knots_x`` / ``knots_p`` are the CDF knot coordinates: non-decreasing,
    first probability 0, last probability 1. Repeated x-values encode jumps
    (point masses); the CDF is right-continuous there. Built from data via
    ``from_samples`` which places knots at the sorted sample values.
    """

    knots_x: np.ndarray
    knots_p: np.ndarray
    support: tuple[float, float]

    def __post_init__(self):
        self.knots_x = np.asarray(self.knots_x, dtype=float)
        self.knots_p = np.asarray(self.knots_p, dtype=float)
        if self.knots_x.shape != self.knots_p.shape or self.knots_x.ndim != 1:
            raise ValueError("knot arrays must be one-dimensional and equal length")
        if len(self.knots_x) < 2:
            raise ValueError("need at least two knots")
        if np.any(np.diff(self.knots_x) < 0) or np.any(np.diff(self.knots_p) < 0):
            raise ValueError("knots must be non-decreasing")
        if self.knots_p[0] != 0.0 or self.knots_p[-1] != 1.0:
            raise ValueError("knot probabilities must start at 0 and end at 1")
        lo, hi = self.support
        if not (lo <= self.knots_x[0] and self.knots_x[-1] <= hi):
            raise ValueError("knots must lie inside the support")

    @classmethod
    def from_samples(
        cls, samples: Sequence[float], support: tuple[float, float] | None = None
    ) -> "EmpiricalCdf":
        xs = np.sort(np.asarray(samples, dtype=float))
        if xs.size == 0:
            raise ValueError("cannot build an empirical CDF from zero samples")
        if support is None:
            support = (float(xs[0]), float(xs[-1]))
        if xs.size == 1 or xs[0] == xs[-1]:
            return cls.point_mass(float(xs[0]), support=support)
        probs = np.arange(xs.size, dtype=float) / (xs.size - 1)
        return cls(knots_x=xs, knots_p=probs, support=support)

    @classmethod
    def point_mass(
        cls, value: float, support: tuple[float, float] | None = None
    ) -> "EmpiricalCdf":
        if support is None:
            support = (value, value)
        return cls(
            knots_x=np.array([value, value]),
            knots_p=np.array([0.0, 1.0]),
            support=support,
        )

    @property
    def max_support(self) -> float:
        return float(self.knots_x[-1])

    def cdf(self, s: np.ndarray | float) -> np.ndarray | float:
        s = np.asarray(s, dtype=float)
        xs, ps = self.knots_x, self.knots_p
        out = np.empty(s.shape, dtype=float)
        below = s < xs[0]
        above = s >= xs[-1]
        mid = ~(below | above)
        out[below] = 0.0
        out[above] = 1.0
        if np.any(mid):
            # right-continuity at jump knots: take the highest knot at equal x
            idx = np.searchsorted(xs, s[mid], side="right")
            x0, x1 = xs[idx - 1], xs[idx]
            p0, p1 = ps[idx - 1], ps[idx]
            width = x1 - x0
            frac = np.where(width > 0, (s[mid] - x0) / np.where(width > 0, width, 1.0), 0.0)
            out[mid] = p0 + frac * (p1 - p0)
        return out if out.shape else float(out)

    def survival(self, s: np.ndarray | float) -> np.ndarray | float:
        return 1.0 - self.cdf(s)

    def quantile(self, u: np.ndarray | float) -> np.ndarray | float:
        u = np.asarray(u, dtype=float)
        out = np.interp(u, self.knots_p, self.knots_x)
        return out if out.shape else float(out)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray | float:
        return self.quantile(rng.random(size))


@dataclass
class ServiceMixture:
    """Four service-time components with per-hour mixing shares.

    Component supports are pairwise disjoint and ordered; ``shares[k]`` is
    the probability vector over components for arrivals in hour slot k
    (relative to ``origin``).
    """

    components: list[EmpiricalCdf]
    shares: np.ndarray
    origin: float = 0.0

    def __post_init__(self):
        self.shares = np.asarray(self.shares, dtype=float)
        if self.shares.ndim != 2 or self.shares.shape[1] != len(self.components):
            raise ValueError("shares must be (n_hours, n_components)")
        if np.any(self.shares < 0):
            raise ValueError("shares must be non-negative")
        sums = self.shares.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ValueError("shares must sum to 1 per hour")
        last_hi = -np.inf
        for comp in self.components:
            lo, hi = comp.support
            if lo < last_hi:
                raise ValueError("component supports must be disjoint and ordered")
            last_hi = hi

    @classmethod
    def constant_shares(
        cls,
        components: list[EmpiricalCdf],
        shares: Sequence[float],
        n_hours: int,
        origin: float = 0.0,
    ) -> "ServiceMixture":
        row = np.asarray(shares, dtype=float)
        return cls(components=components, shares=np.tile(row, (n_hours, 1)), origin=origin)

    def shares_at(self, t: float) -> np.ndarray:
        idx = int((t - self.origin) // HOUR)
        if idx < 0 or idx >= self.shares.shape[0]:
            raise UndefinedHistory(f"mixture shares undefined at t={t}")
        return self.shares[idx]

    @property
    def max_support(self) -> float:
        return max(comp.max_support for comp in self.components)


@dataclass
class SimConfig:
    """One synthetic lot: per-population rates, components, horizon, seed."""

    rates: list[RateFunction]
    components: list[EmpiricalCdf]
    horizon: float
    seed: int
    location_id: str = "sim"

    def __post_init__(self):
        if len(self.rates) != len(self.components):
            raise ValueError("need one rate function per component")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        for rate in self.rates:
            if rate.origin + self.horizon > rate.end + 1e-9:
                raise ValueError("horizon exceeds the rate definition")

    @property
    def origin(self) -> float:
        return self.rates[0].origin

    def mixture(self) -> ServiceMixture:
        """Derive per-hour shares from the population rates.

        Hours where every population rate is zero get uniform shares; no
        arrival can occur there, the row only keeps the invariant intact.
        """
        n_hours = int(np.ceil(self.horizon / HOUR))
        rates = np.stack([r.hourly_rates[:n_hours] for r in self.rates], axis=1)
        totals = rates.sum(axis=1, keepdims=True)
        k = rates.shape[1]
        shares = np.where(totals > 0, rates / np.where(totals > 0, totals, 1.0), 1.0 / k)
        return ServiceMixture(components=list(self.components), shares=shares, origin=self.origin)

    def to_json(self) -> str:
        doc = {
            "location_id": self.location_id,
            "seed": int(self.seed),
            "horizon": float(self.horizon),
            "origin": float(self.origin),
            "populations": [
                {
                    "hourly_rates": rate.hourly_rates.tolist(),
                    "service_knots_x": comp.knots_x.tolist(),
                    "service_knots_p": comp.knots_p.tolist(),
                    "support": [float(comp.support[0]), float(comp.support[1])],
                }
                for rate, comp in zip(self.rates, self.components)
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SimConfig":
        doc = json.loads(text)
        origin = float(doc.get("origin", 0.0))
        rates = []
        components = []
        for pop in doc["populations"]:
            rates.append(RateFunction(np.asarray(pop["hourly_rates"], dtype=float), origin))
            components.append(
                EmpiricalCdf(
                    knots_x=np.asarray(pop["service_knots_x"], dtype=float),
                    knots_p=np.asarray(pop["service_knots_p"], dtype=float),
                    support=(float(pop["support"][0]), float(pop["support"][1])),
                )
            )
        return cls(
            rates=rates,
            components=components,
            horizon=float(doc["horizon"]),
            seed=int(doc["seed"]),
            location_id=str(doc.get("location_id", "sim")),
        )


def sample_nhpp(
    rate: RateFunction, horizon: float, rng: np.random.Generator
) -> np.ndarray:
    """Draw sorted arrival times on [origin, origin + horizon).

    The rate is constant within each hour bin, so the bin count is Poisson
    with mean rate*1h and the times are uniform within the bin; this is the
    thinning construction with the bin rate as its own majorant, i.e. no
    rejections.
    """
    if horizon < 0 or rate.origin + horizon > rate.end + 1e-9:
        raise UndefinedHistory("horizon outside the rate definition")
    n_bins = int(np.ceil(horizon / HOUR - 1e-12))
    times: list[np.ndarray] = []
    for k in range(n_bins):
        width = min(HOUR, horizon - k * HOUR)
        mean = rate.hourly_rates[k] * width / HOUR
        count = rng.poisson(mean)
        if count:
            start = rate.origin + k * HOUR
            times.append(start + np.sort(rng.random(count)) * width)
    if not times:
        return np.empty(0, dtype=float)
    return np.concatenate(times)


def sample_service(
    mixture: ServiceMixture, arrival_time: float, rng: np.random.Generator
) -> float:
    """Draw one service duration for an arrival at the given time."""
    shares = mixture.shares_at(arrival_time)
    j = int(rng.choice(len(shares), p=shares))
    return float(mixture.components[j].sample(rng))


def simulate_stays(
    cfg: SimConfig, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized realization: (arrival_times, durations, population_index).

    Arrays are sorted by arrival time; population_index is 0-based.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    arrivals: list[np.ndarray] = []
    durations: list[np.ndarray] = []
    population: list[np.ndarray] = []
    for i, (rate, comp) in enumerate(zip(cfg.rates, cfg.components)):
        t_i = sample_nhpp(rate, cfg.horizon, rng)
        arrivals.append(t_i)
        durations.append(np.asarray(comp.quantile(rng.random(t_i.size)), dtype=float))
        population.append(np.full(t_i.size, i, dtype=int))
    arr = np.concatenate(arrivals) if arrivals else np.empty(0)
    dur = np.concatenate(durations) if durations else np.empty(0)
    pop = np.concatenate(population) if population else np.empty(0, dtype=int)
    order = np.argsort(arr, kind="stable")
    return arr[order], dur[order], pop[order]


def simulate_lot(cfg: SimConfig, rng: np.random.Generator | None = None) -> EventLog:
    """Simulate the lot and return an event log.

    Every vehicle gets a fresh synthetic spot id (infinite-server semantics,
    capacity is never modeled), so the log always repairs with zero
    insertions. Departures may fall beyond the horizon; stays are never
    censored.
    """
    arr, dur, _ = simulate_stays(cfg, rng)
    stays = [
        StayRecord(f"v{i:07d}", float(a), float(a + d))
        for i, (a, d) in enumerate(zip(arr, dur))
    ]
    span_hi = max(cfg.origin + cfg.horizon, float(np.max(arr + dur)) if arr.size else 0.0)
    return log_from_stays(stays, location_id=cfg.location_id, span=(cfg.origin, span_hi))


def _survival_segments(comp: EmpiricalCdf) -> tuple[np.ndarray, np.ndarray]:
    """Survival knot coordinates including the age-zero anchor."""
    xs = comp.knots_x
    sv = 1.0 - comp.knots_p
    if xs[0] > 0.0:
        xs = np.concatenate([[0.0], xs])
        sv = np.concatenate([[1.0], sv])
    return xs, sv


def integrate_rate_survival(
    rate: RateFunction,
    comp: EmpiricalCdf,
    t_end: float,
    s_max: float | None = None,
    assume_empty_before: bool = False,
) -> float:
    """Exact integral of M(t_end - s) * (1 - G(s)) over s in [0, s_max].

    Breakpoints collect the survival knots and the rate's hour boundaries, so
    on each segment the integrand is linear and the midpoint rule is exact.
    Midpoints never coincide with jump knots, which keeps the evaluation
    unambiguous for point masses. With ``assume_empty_before`` the rate is
    treated as zero before its origin instead of raising UndefinedHistory.
    """
    if s_max is None:
        s_max = comp.max_support
    s_max = min(float(s_max), comp.max_support)
    if s_max <= 0:
        return 0.0
    if t_end > rate.end + 1e-9:
        raise UndefinedHistory(f"rate undefined at t={t_end}")
    if t_end - s_max < rate.origin - 1e-9:
        if not assume_empty_before:
            raise UndefinedHistory(
                f"rate history required back to t={t_end - s_max}, defined from {rate.origin}"
            )
        s_max = t_end - rate.origin
        if s_max <= 0:
            return 0.0

    xs, sv = _survival_segments(comp)
    # hour boundaries of the rate, expressed in age s = t_end - u
    k_lo = int(np.ceil((t_end - s_max - rate.origin) / HOUR - 1e-12))
    k_hi = int(np.floor((t_end - rate.origin) / HOUR + 1e-12))
    hour_breaks = t_end - (rate.origin + HOUR * np.arange(k_lo, k_hi + 1))
    breaks = np.concatenate([[0.0, s_max], xs[(xs > 0) & (xs < s_max)], hour_breaks])
    breaks = np.unique(np.clip(breaks, 0.0, s_max))

    widths = np.diff(breaks)
    mids = 0.5 * (breaks[:-1] + breaks[1:])
    keep = widths > 0
    widths, mids = widths[keep], mids[keep]
    surv_mid = np.interp(mids, xs, sv, left=1.0, right=0.0)
    slot = np.floor((t_end - mids - rate.origin) / HOUR).astype(int)
    valid = (slot >= 0) & (slot < len(rate.hourly_rates))
    rates = np.where(valid, rate.hourly_rates[np.clip(slot, 0, len(rate.hourly_rates) - 1)], 0.0)
    return float(np.sum(rates / HOUR * surv_mid * widths))


def expected_occupancy(
    rates: Sequence[RateFunction],
    components: Sequence[EmpiricalCdf],
    t: float,
    assume_empty_before: bool = False,
) -> float:
    """Expected occupancy: the Poisson mean of N(t) under the queue model."""
    if len(rates) != len(components):
        raise ValueError("need one rate per component")
    return sum(
        integrate_rate_survival(rate, comp, t, assume_empty_before=assume_empty_before)
        for rate, comp in zip(rates, components)
    )
