"""Statistical checks for the three queueing assumptions.

Three families of checks against an event log:

* a capacity check that the lot never fills (otherwise demand is censored
  and the infinite-server reading of the data breaks down),
* a Pearson chi-square independence test on consecutive service times,
  windowed by arrival hour so the time-varying service distribution cannot
  masquerade as dependence,
* Poisson-arrival tests on one-hour windows: the standard KS test on
  normalized inter-arrival times against exp(1), the conditional-uniform KS
  test, its logarithmic variant, and Lewis' spacings variant.

All tests report both a pooled p-value and the per-window p-values, since a
persistent small model mismatch makes pooled tests over long horizons reject
even when each window looks fine.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .eventlog import EventLog, StayRecord, occupancy_from_stays, stays_from_log

__all__ = [
    "TestResult",
    "ArrivalWindow",
    "NormalizedInterarrivals",
    "ConditionalHistogram",
    "InsufficientData",
    "WindowTooSmall",
    "max_occupancy_check",
    "pearson_chi_square",
    "quantile_bin",
    "chi_square_independence",
    "service_pairs_by_window",
    "window_arrivals",
    "normalized_interarrivals",
    "ks_statistic",
    "ks_p_value",
    "ks_standard",
    "ks_cu",
    "ks_log",
    "ks_lewis",
    "pp_qq_data",
    "conditional_interarrival_histogram",
    "nhpp_test_battery",
]

HOUR = 3600.0


class InsufficientData(ValueError):
    """Not enough qualifying data to run the requested test."""


class WindowTooSmall(ValueError):
    """A window with no arrivals was passed where at least one is required."""


@dataclass
class TestResult:
    statistic: float
    n: int
    p_value: float
    dof: int | None = None
    windows_used: int = 0
    windows_skipped: int = 0
    window_p_values: list[float] = field(default_factory=list)

    @property
    def window_p_mean(self) -> float:
        return float(np.mean(self.window_p_values)) if self.window_p_values else float("nan")


@dataclass
class ArrivalWindow:
    start: float
    length: float
    times: np.ndarray

    @property
    def count(self) -> int:
        return int(self.times.size)

    def scaled(self) -> np.ndarray:
        """Arrival offsets mapped to [0, 1)."""
        return (self.times - self.start) / self.length


@dataclass
class NormalizedInterarrivals:
    values: np.ndarray
    window_index: np.ndarray


@dataclass
class ConditionalHistogram:
    lag_edges: np.ndarray
    value_edges: np.ndarray
    densities: np.ndarray  # (lag_bins, value_bins), rows sum to 1
    counts: np.ndarray


def max_occupancy_check(log: EventLog, capacity: int) -> dict:
    """Maximum occupancy over the span relative to capacity."""
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    stays = stays_from_log(log)
    if not stays:
        return {"max_occupancy": 0, "max_ratio": 0.0, "ever_full": False}
    # occupancy only changes at arrivals; evaluating there captures the max
    times = np.array([s.arrival_time for s in stays], dtype=float)
    counts = occupancy_from_stays(stays, times)
    peak = int(counts.max())
    ratio = peak / capacity
    return {"max_occupancy": peak, "max_ratio": ratio, "ever_full": ratio >= 1.0}


def pearson_chi_square(table: np.ndarray) -> TestResult:
    """Pearson's chi-square test of independence on a contingency table."""
    table = np.asarray(table, dtype=float)
    total = table.sum()
    if total <= 0:
        raise InsufficientData("empty contingency table")
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / total
    mask = expected > 0
    statistic = float(np.sum((table[mask] - expected[mask]) ** 2 / expected[mask]))
    dof = (table.shape[0] - 1) * (table.shape[1] - 1)
    p = float(stats.chi2.sf(statistic, dof))
    return TestResult(statistic=statistic, n=int(total), p_value=p, dof=dof)


def quantile_bin(values: np.ndarray, bins: int) -> np.ndarray:
    """Assign equal-mass bin indices in [0, bins)."""
    values = np.asarray(values, dtype=float)
    edges = np.quantile(values, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, values, side="right")


def chi_square_independence(
    window_pairs: Sequence[Sequence[tuple[float, float]]],
    bins: int = 5,
    min_expected: float = 5.0,
) -> TestResult:
    """Independence of consecutive values, windowed.

    Each window's pairs are quantile-binned on both margins into ``bins``
    equal-mass bins and tested on the resulting contingency table. Windows
    where any expected cell count falls below ``min_expected`` are skipped
    and counted. Statistics add across windows (independent tables), and the
    per-window p-values are kept for uniformity diagnostics.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    total_stat = 0.0
    total_dof = 0
    total_n = 0
    used = 0
    skipped = 0
    window_ps: list[float] = []
    for pairs in window_pairs:
        pairs = np.asarray(pairs, dtype=float)
        if pairs.size == 0:
            skipped += 1
            continue
        n = pairs.shape[0]
        first = quantile_bin(pairs[:, 0], bins)
        second = quantile_bin(pairs[:, 1], bins)
        table = np.zeros((bins, bins))
        np.add.at(table, (first, second), 1.0)
        expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / n
        if expected.min() < min_expected:
            skipped += 1
            continue
        result = pearson_chi_square(table)
        total_stat += result.statistic
        total_dof += result.dof
        total_n += n
        used += 1
        window_ps.append(result.p_value)
    if used == 0:
        raise InsufficientData("no window met the expected-count threshold")
    p = float(stats.chi2.sf(total_stat, total_dof))
    return TestResult(
        statistic=total_stat,
        n=total_n,
        p_value=p,
        dof=total_dof,
        windows_used=used,
        windows_skipped=skipped,
        window_p_values=window_ps,
    )


def service_pairs_by_window(
    stays: Sequence[StayRecord], window: float = HOUR, origin: float | None = None
) -> list[list[tuple[float, float]]]:
    """Consecutive service-time pairs grouped by the arrival hour.

    Pairs are formed between stays whose arrivals fall in the same window;
    pairs never span windows.
    """
    if not stays:
        return []
    arrivals = np.array([s.arrival_time for s in stays], dtype=float)
    services = np.array([s.service_time for s in stays], dtype=float)
    order = np.argsort(arrivals, kind="stable")
    arrivals, services = arrivals[order], services[order]
    if origin is None:
        origin = np.floor(arrivals[0] / window) * window
    idx = np.floor((arrivals - origin) / window).astype(int)
    windows: dict[int, list[tuple[float, float]]] = {}
    for i in range(len(stays) - 1):
        if idx[i] == idx[i + 1]:
            windows.setdefault(idx[i], []).append((services[i], services[i + 1]))
    return [windows[k] for k in sorted(windows)]


def window_arrivals(
    arrivals: np.ndarray,
    window: float = HOUR,
    origin: float | None = None,
    drop_empty: bool = True,
) -> list[ArrivalWindow]:
    """Slice sorted arrival times into consecutive fixed-length windows."""
    arrivals = np.asarray(arrivals, dtype=float)
    if arrivals.size == 0:
        return []
    if origin is None:
        origin = np.floor(arrivals[0] / window) * window
    idx = np.floor((arrivals - origin) / window).astype(int)
    out = []
    for k in range(idx.min(), idx.max() + 1):
        times = arrivals[idx == k]
        if drop_empty and times.size == 0:
            continue
        out.append(ArrivalWindow(start=origin + k * window, length=window, times=times))
    return out


def normalized_interarrivals(
    arrivals: np.ndarray, window: float = HOUR, origin: float | None = None
) -> NormalizedInterarrivals:
    """Inter-arrival gaps scaled by the local arrival rate.

    The rate for the window holding arrival i is estimated by that window's
    arrival count; a gap spanning two windows uses the earlier window's rate.
    Windows with fewer than two arrivals contribute no values. Under Poisson
    arrivals the values are approximately i.i.d. exp(1).
    """
    arrivals = np.sort(np.asarray(arrivals, dtype=float))
    if arrivals.size < 2:
        return NormalizedInterarrivals(np.empty(0), np.empty(0, dtype=int))
    if origin is None:
        origin = np.floor(arrivals[0] / window) * window
    idx = np.floor((arrivals - origin) / window).astype(int)
    counts: dict[int, int] = {}
    for k in idx:
        counts[k] = counts.get(k, 0) + 1
    gaps = np.diff(arrivals)
    window_of_gap = idx[:-1]
    rate = np.array([counts[k] for k in window_of_gap], dtype=float) / window
    eligible = np.array([counts[k] >= 2 for k in window_of_gap])
    values = gaps[eligible] * rate[eligible]
    keep = values > 0
    return NormalizedInterarrivals(values=values[keep], window_index=window_of_gap[eligible][keep])


def ks_statistic(samples: np.ndarray, ref_cdf) -> float:
    """Two-sided Kolmogorov-Smirnov distance against a reference CDF."""
    xs = np.sort(np.asarray(samples, dtype=float))
    n = xs.size
    if n == 0:
        raise InsufficientData("no samples for KS statistic")
    f = np.asarray(ref_cdf(xs), dtype=float)
    upper = np.max(np.arange(1, n + 1) / n - f)
    lower = np.max(f - np.arange(0, n) / n)
    return float(max(upper, lower))


def ks_p_value(d: float, n: int, exact_below: int = 512) -> float:
    """KS p-value: exact finite-n distribution for small n, Kolmogorov
    asymptotic with sqrt(n) scaling above.

    The cutoff covers one-hour windows (tens to a few hundred arrivals),
    where the asymptotic tail is visibly biased and would distort
    window-level p-value distributions; pooled samples far above the cutoff
    are well inside the asymptotic regime.
    """
    if n <= exact_below:
        return float(stats.kstwo.sf(d, n))
    return float(stats.kstwobign.sf(np.sqrt(n) * d))


def _exp1_cdf(x: np.ndarray) -> np.ndarray:
    return 1.0 - np.exp(-x)


def _uniform_cdf(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def _ks_test(samples: np.ndarray, ref_cdf) -> TestResult:
    d = ks_statistic(samples, ref_cdf)
    n = int(np.asarray(samples).size)
    return TestResult(statistic=d, n=n, p_value=ks_p_value(d, n))


def ks_standard(samples: np.ndarray) -> TestResult:
    """KS test of positive samples against the exp(1) distribution."""
    return _ks_test(samples, _exp1_cdf)


def ks_cu(windows: Sequence[ArrivalWindow]) -> TestResult:
    """Conditional-uniform KS test.

    Given the count, Poisson arrival times within a constant-rate window are
    uniform order statistics; offsets are pooled across windows and tested
    against U(0, 1).
    """
    pooled: list[np.ndarray] = []
    used = 0
    window_ps = []
    for w in windows:
        if w.count < 1:
            continue
        scaled = w.scaled()
        pooled.append(scaled)
        window_ps.append(_ks_test(scaled, _uniform_cdf).p_value)
        used += 1
    if not pooled:
        raise InsufficientData("no non-empty window")
    result = _ks_test(np.concatenate(pooled), _uniform_cdf)
    result.windows_used = used
    result.window_p_values = window_ps
    return result


def _log_transform(scaled: np.ndarray) -> np.ndarray:
    """Map sorted uniforms to i.i.d. exp(1) via normalized log-spacings.

    With U_(1) <= ... <= U_(n), the quantities
    -(n - j + 1) * log((1 - U_(j)) / (1 - U_(j-1))), U_(0) = 0,
    are i.i.d. exp(1) under the uniform null.
    """
    u = np.sort(scaled)
    n = u.size
    log_surv = np.log1p(-np.clip(u, 0.0, 1.0 - 1e-15))
    prev = np.concatenate([[0.0], log_surv[:-1]])
    return -(n - np.arange(n)) * (log_surv - prev)


def ks_log(windows: Sequence[ArrivalWindow]) -> TestResult:
    """Logarithmic KS variant: per-window log-spacing transform, then KS
    of the pooled values against exp(1)."""
    pooled: list[np.ndarray] = []
    used = 0
    window_ps = []
    for w in windows:
        if w.count < 1:
            raise WindowTooSmall("window without arrivals")
        t = _log_transform(w.scaled())
        pooled.append(t)
        window_ps.append(_ks_test(t, _exp1_cdf).p_value)
        used += 1
    if not pooled:
        raise InsufficientData("no windows")
    result = _ks_test(np.concatenate(pooled), _exp1_cdf)
    result.windows_used = used
    result.window_p_values = window_ps
    return result


def _lewis_transform(scaled: np.ndarray) -> np.ndarray:
    """Durbin's spacings transform of sorted uniforms.

    The n+1 spacings (including the tail spacing to 1) are sorted and turned
    into normalized spacing increments whose partial sums are again
    distributed as n uniform order statistics under the null, but with much
    higher sensitivity to non-exponential gap distributions.
    """
    u = np.sort(scaled)
    n = u.size
    gaps = np.diff(np.concatenate([[0.0], u, [1.0]]))
    c = np.sort(gaps)
    prev = np.concatenate([[0.0], c[:-1]])
    z = (n + 1 - np.arange(n + 1)) * (c - prev)
    return np.cumsum(z)[:-1]


def ks_lewis(windows: Sequence[ArrivalWindow]) -> TestResult:
    """Lewis KS variant: Durbin transform per window, pooled KS vs U(0, 1)."""
    pooled: list[np.ndarray] = []
    used = 0
    window_ps = []
    for w in windows:
        if w.count < 1:
            raise WindowTooSmall("window without arrivals")
        t = _lewis_transform(w.scaled())
        pooled.append(t)
        window_ps.append(_ks_test(t, _uniform_cdf).p_value)
        used += 1
    if not pooled:
        raise InsufficientData("no windows")
    result = _ks_test(np.concatenate(pooled), _uniform_cdf)
    result.windows_used = used
    result.window_p_values = window_ps
    return result


def pp_qq_data(samples: np.ndarray, reference: str = "exp1") -> dict[str, np.ndarray]:
    """Points for probability-probability and quantile-quantile plots.

    P-P pairs (F_ref(x_(i)), i/n); Q-Q pairs (F_ref^-1((i - 0.5)/n), x_(i)).
    """
    if reference != "exp1":
        raise ValueError(f"unsupported reference {reference!r}")
    xs = np.sort(np.asarray(samples, dtype=float))
    n = xs.size
    if n == 0:
        raise InsufficientData("no samples")
    ranks = np.arange(1, n + 1)
    pp_x = _exp1_cdf(xs)
    pp_y = ranks / n
    qq_x = -np.log1p(-(ranks - 0.5) / n)
    return {"pp": np.column_stack([pp_x, pp_y]), "qq": np.column_stack([qq_x, xs])}


def conditional_interarrival_histogram(
    normalized: NormalizedInterarrivals, lag_bins: int, value_bins: int = 20
) -> ConditionalHistogram:
    """Distribution of each normalized gap conditioned on the previous one.

    Under i.i.d. gaps all conditional rows coincide; dependence shows up as
    rows drifting apart. Rows are probability vectors over shared equal-mass
    value bins.
    """
    values = normalized.values
    if values.size < 2:
        raise InsufficientData("need at least two normalized inter-arrivals")
    prev, curr = values[:-1], values[1:]
    lag_edges = np.unique(np.quantile(prev, np.linspace(0, 1, lag_bins + 1)))
    value_edges = np.unique(np.quantile(curr, np.linspace(0, 1, value_bins + 1)))
    n_lag = max(len(lag_edges) - 1, 1)
    n_val = max(len(value_edges) - 1, 1)
    lag_idx = np.clip(np.searchsorted(lag_edges, prev, side="right") - 1, 0, n_lag - 1)
    val_idx = np.clip(np.searchsorted(value_edges, curr, side="right") - 1, 0, n_val - 1)
    counts = np.zeros((n_lag, n_val))
    np.add.at(counts, (lag_idx, val_idx), 1.0)
    rows = counts.sum(axis=1, keepdims=True)
    densities = np.where(rows > 0, counts / np.where(rows > 0, rows, 1.0), 0.0)
    return ConditionalHistogram(
        lag_edges=lag_edges, value_edges=value_edges, densities=densities, counts=counts
    )


def nhpp_test_battery(
    arrivals: np.ndarray, window: float = HOUR, origin: float | None = None
) -> dict[str, TestResult]:
    """Run the four Poisson-arrival tests on one-hour windows.

    The standard test runs on normalized inter-arrivals (pooled, plus one
    p-value per window with at least two gaps); the CU, Log, and Lewis tests
    run on the window offsets directly.
    """
    arrivals = np.sort(np.asarray(arrivals, dtype=float))
    windows = window_arrivals(arrivals, window=window, origin=origin)
    if not windows:
        raise InsufficientData("no arrivals")
    normalized = normalized_interarrivals(arrivals, window=window, origin=origin)
    if normalized.values.size == 0:
        raise InsufficientData("no window holds two or more arrivals")
    standard = ks_standard(normalized.values)
    for k in np.unique(normalized.window_index):
        vals = normalized.values[normalized.window_index == k]
        if vals.size >= 2:
            standard.window_p_values.append(ks_standard(vals).p_value)
    standard.windows_used = len(standard.window_p_values)
    return {
        "standard": standard,
        "cu": ks_cu(windows),
        "log": ks_log(windows),
        "lewis": ks_lewis(windows),
    }
