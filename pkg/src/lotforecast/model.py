"""Fitted lot model: assembly, serialization, and the backtest harness.

A LotModel bundles everything a forecaster needs without the raw event data:
the four service-time components, the per-population arrival models, the
aggregate-occupancy model for the macroscopic method, the hourly-relaxation
baseline, and the calibrated per-horizon variance inflation tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .eventlog import StayRecord
from .forecast import (
    BacktestRecord,
    InsufficientBacktest,
    LotState,
    MmcParams,
    SigmaPredTable,
    estimate_sigma_pred,
    expected_new,
    expected_remaining,
    macro_forecast,
    micro_forecast,
    mmc_fit,
    mmc_forecast,
)
from .queueing import HOUR, EmpiricalCdf, RateFunction
from .seasonal import (
    DegenerateSeries,
    FixedEffects,
    HourlySeries,
    PopulationPartition,
    PopulationRateModel,
    SarimaModel,
    SeasonalArrivalModel,
    empirical_component_cdfs,
    fit_fixed_effects,
    fit_sarima,
    forecast_arrival_rate,
    hourly_occupancy_series,
    hourly_population_series,
    residual_series,
)

__all__ = [
    "LotModel",
    "DEFAULT_HORIZONS",
    "fit_lot_model",
    "calibrate_sigma_pred",
    "run_backtest",
]

DEFAULT_HORIZONS = (300.0, 3600.0, 6 * 3600.0, 24 * 3600.0)


@dataclass
class LotModel:
    location_id: str
    utc_offset_hours: int
    partition: PopulationPartition
    cap: float
    components: list[EmpiricalCdf]
    arrivals: SeasonalArrivalModel
    occupancy_effects: FixedEffects
    occupancy_sarima: SarimaModel
    mmc: MmcParams | None
    trained_span: tuple[float, float]
    empty_classes: list[int] = field(default_factory=list)
    sigma_micro: SigmaPredTable | None = None
    sigma_macro: SigmaPredTable | None = None

    def to_json(self) -> str:
        def effects_doc(effects: FixedEffects) -> dict:
            return {"cell_means": effects.cell_means.tolist()}

        def sarima_doc(model: SarimaModel) -> dict:
            return {
                "phi": model.phi,
                "theta": model.theta,
                "sigma2": model.sigma2,
                "n_obs": model.n_obs,
                "css": model.css,
            }

        def sigma_doc(table: SigmaPredTable | None) -> dict | None:
            if table is None:
                return None
            return {"horizons": table.horizons.tolist(), "values": table.values.tolist()}

        doc = {
            "location_id": self.location_id,
            "utc_offset_hours": self.utc_offset_hours,
            "partition_minutes": list(self.partition.boundaries_minutes),
            "service_cap_seconds": self.cap,
            "trained_span": list(self.trained_span),
            "empty_classes": list(self.empty_classes),
            "populations": [
                {
                    "effects": effects_doc(pop.effects),
                    "sarima": sarima_doc(pop.sarima),
                    "component": {
                        "knots_x": comp.knots_x.tolist(),
                        "knots_p": comp.knots_p.tolist(),
                        "support": [comp.support[0], comp.support[1]],
                    },
                }
                for pop, comp in zip(self.arrivals.populations, self.components)
            ],
            "occupancy": {
                "effects": effects_doc(self.occupancy_effects),
                "sarima": sarima_doc(self.occupancy_sarima),
            },
            "mmc": None
            if self.mmc is None
            else {
                "rate": self.mmc.rate.tolist(),
                "level": self.mmc.level.tolist(),
                "fitted": self.mmc.fitted.astype(int).tolist(),
            },
            "sigma_pred": {
                "micro": sigma_doc(self.sigma_micro),
                "macro": sigma_doc(self.sigma_macro),
            },
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LotModel":
        doc = json.loads(text)

        def effects_from(d: dict) -> FixedEffects:
            return fixed_effects_from_means(np.asarray(d["cell_means"], dtype=float))

        def sarima_from(d: dict) -> SarimaModel:
            return SarimaModel(
                phi=float(d["phi"]),
                theta=float(d["theta"]),
                sigma2=float(d["sigma2"]),
                n_obs=int(d.get("n_obs", 0)),
                css=float(d.get("css", 0.0)),
            )

        def sigma_from(d: dict | None) -> SigmaPredTable | None:
            if d is None:
                return None
            return SigmaPredTable(
                horizons=np.asarray(d["horizons"], dtype=float),
                values=np.asarray(d["values"], dtype=float),
            )

        populations = []
        components = []
        for pop in doc["populations"]:
            populations.append(
                PopulationRateModel(
                    effects=effects_from(pop["effects"]), sarima=sarima_from(pop["sarima"])
                )
            )
            comp = pop["component"]
            components.append(
                EmpiricalCdf(
                    knots_x=np.asarray(comp["knots_x"], dtype=float),
                    knots_p=np.asarray(comp["knots_p"], dtype=float),
                    support=(float(comp["support"][0]), float(comp["support"][1])),
                )
            )
        mmc_doc = doc.get("mmc")
        mmc = (
            None
            if mmc_doc is None
            else MmcParams(
                rate=np.asarray(mmc_doc["rate"], dtype=float),
                level=np.asarray(mmc_doc["level"], dtype=float),
                fitted=np.asarray(mmc_doc["fitted"], dtype=bool),
            )
        )
        return cls(
            location_id=str(doc["location_id"]),
            utc_offset_hours=int(doc["utc_offset_hours"]),
            partition=PopulationPartition(tuple(doc["partition_minutes"])),
            cap=float(doc["service_cap_seconds"]),
            components=components,
            arrivals=SeasonalArrivalModel(
                populations=populations, utc_offset_hours=int(doc["utc_offset_hours"])
            ),
            occupancy_effects=effects_from(doc["occupancy"]["effects"]),
            occupancy_sarima=sarima_from(doc["occupancy"]["sarima"]),
            mmc=mmc,
            trained_span=(float(doc["trained_span"][0]), float(doc["trained_span"][1])),
            empty_classes=[int(i) for i in doc.get("empty_classes", [])],
            sigma_micro=sigma_from(doc["sigma_pred"].get("micro")),
            sigma_macro=sigma_from(doc["sigma_pred"].get("macro")),
        )


def fixed_effects_from_means(cell_means: np.ndarray) -> FixedEffects:
    """Rebuild the sum-to-zero decomposition from stored cell means."""
    means = np.asarray(cell_means, dtype=float)
    grand = float(means.mean())
    alpha = means.mean(axis=1) - grand
    beta = means.mean(axis=0) - grand
    gamma = means - grand - alpha[:, None] - beta[None, :]
    return FixedEffects(
        cell_means=means,
        counts=np.zeros_like(means),
        grand_mean=grand,
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        imputed=np.zeros_like(means, dtype=bool),
    )


def _fit_sarima_or_flat(resid: HourlySeries, min_length: int) -> SarimaModel:
    """A class with no arrivals anywhere has a zero residual series; model it
    as exactly flat instead of failing the whole fit."""
    try:
        return fit_sarima(resid, min_length=min_length)
    except DegenerateSeries:
        return SarimaModel(phi=0.0, theta=0.0, sigma2=0.0, n_obs=len(resid))


def fit_lot_model(
    stays: Sequence[StayRecord],
    location_id: str = "lot",
    utc_offset_hours: int = 0,
    partition: PopulationPartition | None = None,
    cap: float | None = None,
    span: tuple[float, float] | None = None,
    min_length: int = 240,
    mmc_min_transitions: int = 10,
) -> LotModel:
    """Fit every sub-model from a stay list.

    ``span`` restricts training to stays arriving inside it (hour-aligned;
    defaults to the full extent of the data). Classes with no stays get a
    placeholder point-mass component and are listed in ``empty_classes``;
    their fitted arrival rate is identically zero so the placeholder never
    receives probability mass.
    """
    if not stays:
        raise ValueError("cannot fit a model from zero stays")
    partition = partition or PopulationPartition()
    arrivals = np.array([s.arrival_time for s in stays], dtype=float)
    if span is None:
        origin = float(np.floor(arrivals.min() / HOUR) * HOUR)
        end = float(np.floor(arrivals.max() / HOUR) * HOUR + HOUR)
    else:
        origin, end = float(span[0]), float(span[1])
        if origin % HOUR or end % HOUR:
            raise ValueError("span must be hour-aligned")
    n_hours = int(round((end - origin) / HOUR))
    train = [s for s in stays if origin <= s.arrival_time < end]
    if not train:
        raise ValueError("no stays inside the training span")

    estimate = empirical_component_cdfs(train, partition, cap=cap)
    components: list[EmpiricalCdf] = []
    for i, comp in enumerate(estimate.components, start=1):
        if comp is None:
            lo, hi = partition.class_interval_seconds(i, cap=max(estimate.cap, partition.boundaries_seconds[-1] * 2))
            components.append(EmpiricalCdf.point_mass(0.5 * (lo + hi), support=(lo, hi)))
        else:
            components.append(comp)

    pops = hourly_population_series(
        train, partition, utc_offset_hours=utc_offset_hours, origin=origin, n_hours=n_hours
    )
    population_models = []
    for series in pops.series:
        effects = fit_fixed_effects(series)
        resid = residual_series(series, effects)
        population_models.append(
            PopulationRateModel(effects=effects, sarima=_fit_sarima_or_flat(resid, min_length))
        )
    arrival_model = SeasonalArrivalModel(
        populations=population_models, utc_offset_hours=utc_offset_hours
    )

    occupancy = hourly_occupancy_series(stays, origin, n_hours, utc_offset_hours)
    occ_effects = fit_fixed_effects(occupancy)
    occ_sarima = _fit_sarima_or_flat(residual_series(occupancy, occ_effects), min_length)
    try:
        mmc = mmc_fit(occupancy, min_transitions=mmc_min_transitions)
    except InsufficientBacktest:
        # fewer than min_transitions weeks of training data; the baseline
        # simply becomes unavailable
        mmc = None

    return LotModel(
        location_id=location_id,
        utc_offset_hours=utc_offset_hours,
        partition=partition,
        cap=estimate.cap,
        components=components,
        arrivals=arrival_model,
        occupancy_effects=occ_effects,
        occupancy_sarima=occ_sarima,
        mmc=mmc,
        trained_span=(origin, end),
        empty_classes=estimate.empty_classes,
    )


def _histories(
    stays: Sequence[StayRecord], model: LotModel, through: float
) -> tuple[list[HourlySeries], HourlySeries, np.ndarray]:
    """Precompute full-span population counts and occupancy up to ``through``."""
    origin = model.trained_span[0]
    n_hours = int(np.ceil((through - origin) / HOUR))
    pops = hourly_population_series(
        stays,
        model.partition,
        utc_offset_hours=model.utc_offset_hours,
        origin=origin,
        n_hours=n_hours,
    )
    occupancy = hourly_occupancy_series(stays, origin, n_hours + 1, model.utc_offset_hours)
    return pops.series, occupancy, pops.empty_hours


def run_backtest(
    stays: Sequence[StayRecord],
    model: LotModel,
    origins: Sequence[float],
    horizons: Sequence[float] = DEFAULT_HORIZONS,
    methods: Sequence[str] = ("micro", "macro"),
    truth_rates: Sequence[RateFunction] | None = None,
    apply_sigma: bool = True,
) -> list[BacktestRecord]:
    """Forecast from every origin at every horizon and pair with actuals.

    Origins must be hour-aligned so that hourly histories are well defined
    at the forecast time. ``truth_rates`` (the realized generating rates)
    enable the ``micro_perfect`` method. The queueing variance floor is
    attached to every record for normalized-error reporting.
    """
    origins = np.asarray(origins, dtype=float)
    horizons = [float(h) for h in horizons]
    if origins.size == 0 or not horizons:
        raise ValueError("need at least one origin and one horizon")
    if np.any(origins % HOUR != 0):
        raise ValueError("origins must be hour-aligned")
    unknown = set(methods) - {"micro", "macro", "mmc", "micro_perfect"}
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")
    if "micro_perfect" in methods and truth_rates is None:
        raise ValueError("micro_perfect needs the realized rates")
    if "mmc" in methods and model.mmc is None:
        raise ValueError("mmc method requested but the model carries no relaxation fit")

    pop_series, occupancy, _ = _histories(stays, model, float(origins.max()))
    max_h_hours = int(np.ceil(max(horizons) / HOUR))
    sigma_micro = model.sigma_micro if apply_sigma else None
    sigma_macro = model.sigma_macro if apply_sigma else None
    origin0 = model.trained_span[0]
    records: list[BacktestRecord] = []

    # stay arrays once; per-origin state and actuals come from array scans
    arr_all = np.array([s.arrival_time for s in stays], dtype=float)
    dep_all = np.array([s.departure_time for s in stays], dtype=float)
    arr_sorted = np.sort(arr_all)
    dep_sorted = np.sort(dep_all)

    for t0 in origins:
        k = int(round((t0 - origin0) / HOUR))
        parked = (arr_all <= t0) & (dep_all > t0)
        state = LotState(as_of=float(t0), arrival_times=np.sort(arr_all[parked]))
        probe = t0 + np.asarray(horizons)
        actuals = np.searchsorted(arr_sorted, probe, side="right") - np.searchsorted(
            dep_sorted, probe, side="right"
        )
        shares_of = model.arrivals.shares_at

        lb_by_h: dict[float, float] = {}
        if {"micro", "micro_perfect", "mmc", "macro"} & set(methods):
            pop_hist = [
                HourlySeries(s.origin, s.values[:k], s.utc_offset_hours) for s in pop_series
            ]
            rate_paths = forecast_arrival_rate(model.arrivals, pop_hist, max_h_hours)
            for h in horizons:
                _, var_old, _ = expected_remaining(state, model.components, shares_of, h)
                lb_by_h[h] = var_old + expected_new(rate_paths, model.components, t0, h)

        for h, actual in zip(horizons, actuals):
            if "micro" in methods:
                dist = micro_forecast(
                    state, model.components, shares_of, rate_paths, h, sigma_micro
                )
                records.append(
                    BacktestRecord(
                        "micro", h, float(t0), dist.mean, dist.var_lb, dist.var_total,
                        lb_by_h[h], float(actual),
                    )
                )
            if "micro_perfect" in methods:
                dist = micro_forecast(
                    state, model.components, shares_of, truth_rates, h, sigma_micro
                )
                records.append(
                    BacktestRecord(
                        "micro_perfect", h, float(t0), dist.mean, dist.var_lb,
                        dist.var_total, lb_by_h[h], float(actual),
                    )
                )
            if "macro" in methods:
                occ_hist = HourlySeries(
                    occupancy.origin, occupancy.values[: k + 1], occupancy.utc_offset_hours
                )
                dist = macro_forecast(
                    occ_hist, model.occupancy_effects, model.occupancy_sarima, h, sigma_macro
                )
                records.append(
                    BacktestRecord(
                        "macro", h, float(t0), dist.mean, dist.var_lb, dist.var_total,
                        lb_by_h[h], float(actual),
                    )
                )
            if "mmc" in methods:
                mean = mmc_forecast(
                    state.count, model.mmc, float(t0), h, model.utc_offset_hours
                )
                records.append(
                    BacktestRecord(
                        "mmc", h, float(t0), mean, float("nan"), float("nan"),
                        lb_by_h[h], float(actual),
                    )
                )
    return records


def calibrate_sigma_pred(
    stays: Sequence[StayRecord],
    model: LotModel,
    origins: Sequence[float],
    horizons: Sequence[float] = DEFAULT_HORIZONS,
    min_samples: int = 30,
) -> LotModel:
    """Estimate the variance-inflation tables on held-out origins and attach
    them to the model (mutated in place and returned)."""
    records = run_backtest(
        stays, model, origins, horizons, methods=("micro", "macro"), apply_sigma=False
    )
    model.sigma_micro = estimate_sigma_pred(
        [r for r in records if r.method == "micro"], min_samples=min_samples
    )
    model.sigma_macro = estimate_sigma_pred(
        [r for r in records if r.method == "macro"], min_samples=min_samples
    )
    return model
