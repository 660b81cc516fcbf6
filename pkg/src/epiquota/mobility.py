"""Origin-destination mobility demand: data model, synthetic city generator, quota operator.

Regions are indexed 0..K-1, row-major over a rectangular grid. Demand is a
time-indexed sequence of KxK matrices in persons/hour with a zero diagonal
(intra-region movement is not modeled as flow).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np
import pandas as pd

# Destinations kept per origin in the synthetic generator (top gravity scores).
NEIGHBOR_CAP = 64
# Hourly move-fraction ceiling; leaves headroom for hospitalized removals.
MAX_HOURLY_OUT_FRACTION = 0.8

# Relative weight of each hour of day in the move-fraction profile (calibrated
# to the target mean move probability afterwards).
HOURLY_SHAPE = np.array(
    [0.20, 0.15, 0.10, 0.10, 0.15, 0.30, 0.70, 1.50, 1.60, 1.00, 0.80, 0.90,
     1.00, 0.90, 0.80, 0.90, 1.10, 1.50, 1.60, 1.20, 0.80, 0.60, 0.40, 0.30])
# Commute-direction bumps: morning pulls flows toward work regions, evening
# pushes them back toward residential regions.
MORNING_SHAPE = np.array(
    [0, 0, 0, 0, 0, 0.2, 0.7, 1.0, 1.0, 0.6, 0.2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0])
EVENING_SHAPE = np.array(
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0.2, 0.6, 1.0, 1.0, 0.6, 0.2, 0, 0, 0])

BASE_DAYS = 31  # one-month base series


class OdCsvError(ValueError):
    """Raised when an OD CSV file cannot be parsed or fails validation."""


@dataclass(frozen=True)
class CityGenParams:
    """Parameters of the synthetic city generator."""

    grid_rows: int = 17
    grid_cols: int = 19
    mean_population: float = 1686.0
    p_move: float = 0.18
    commute_fraction: float = 0.6
    seed: int = 0

    def validate(self):
        if self.grid_rows * self.grid_cols < 2:
            raise ValueError("city must have at least 2 regions")
        if self.mean_population <= 0:
            raise ValueError("mean_population must be positive")
        if not 0.0 < self.p_move < 1.0:
            raise ValueError("p_move must be in (0, 1)")
        if not 0.0 <= self.commute_fraction <= 1.0:
            raise ValueError("commute_fraction must be in [0, 1]")


class MobilitySeries:
    """Time-indexed hourly OD demand plus region populations.

    Immutable after construction. The demand is stored as a base block of
    ``base_hours`` matrices tiled ``repeats`` times, so prolonged series cost
    no extra memory; ``demand_at(t)`` resolves any hour.
    """

    def __init__(self, demand, initial_population, repeats=1):
        demand = np.asarray(demand)
        if demand.ndim != 3 or demand.shape[1] != demand.shape[2]:
            raise ValueError("demand must have shape (T, K, K)")
        pop = np.asarray(initial_population, dtype=np.float64)
        if pop.shape != (demand.shape[1],):
            raise ValueError("initial_population length must match K")
        if np.any(pop <= 0):
            raise ValueError("populations must be positive")
        if np.any(demand < 0):
            raise ValueError("demand entries must be non-negative")
        diag = np.einsum("tii->ti", demand)
        if np.any(diag != 0):
            raise ValueError("demand diagonal must be zero")
        if repeats < 1:
            raise ValueError("repeats must be >= 1")
        self._base = demand
        self._base.flags.writeable = False
        self._pop = pop
        self._pop.flags.writeable = False
        self._repeats = int(repeats)

    @property
    def num_regions(self):
        return self._base.shape[1]

    @property
    def base_hours(self):
        return self._base.shape[0]

    @property
    def horizon(self):
        """Total horizon in hours (base block times repeats)."""
        return self._base.shape[0] * self._repeats

    @property
    def initial_population(self):
        return self._pop

    def demand_at(self, hour):
        """KxK demand matrix for the given hour (read-only view)."""
        if not 0 <= hour < self.horizon:
            raise IndexError(f"hour {hour} outside horizon {self.horizon}")
        return self._base[hour % self.base_hours]

    def window(self, hour, length):
        """Stack of ``length`` consecutive hourly matrices starting at ``hour``."""
        return np.stack([self.demand_at(hour + k) for k in range(length)])

    def windows(self, hours, length):
        """Batched ``window``: (len(hours), length, K, K) in one periodic lookup."""
        hours = np.asarray(hours, dtype=np.int64)
        if hours.size and not (hours.min() >= 0
                               and hours.max() + length <= self.horizon):
            raise IndexError(f"window range outside horizon {self.horizon}")
        return self._base[(hours[:, None] + np.arange(length))
                          % self.base_hours]

    def as_array(self):
        """Materialize the full (T, K, K) demand array. Memory-heavy for prolonged series."""
        if self._repeats == 1:
            return self._base
        return np.tile(self._base, (self._repeats, 1, 1))

    def __eq__(self, other):
        if not isinstance(other, MobilitySeries):
            return NotImplemented
        if self.num_regions != other.num_regions or self.horizon != other.horizon:
            return False
        if not np.array_equal(self._pop, other._pop):
            return False
        if self.base_hours == other.base_hours:
            return np.array_equal(self._base, other._base)
        return all(
            np.array_equal(self.demand_at(t), other.demand_at(t))
            for t in range(self.horizon))

    def __repr__(self):
        return (f"MobilitySeries(K={self.num_regions}, horizon={self.horizon}h, "
                f"base={self.base_hours}h x {self._repeats})")


def apply_quota(demand_matrix, quota):
    """Allowed mobility: elementwise product of demand and quota rates."""
    demand_matrix = np.asarray(demand_matrix)
    quota = np.asarray(quota)
    if demand_matrix.shape != quota.shape:
        raise ValueError(
            f"shape mismatch: demand {demand_matrix.shape} vs quota {quota.shape}")
    validate_quota(quota, demand_matrix.shape[0])
    return quota * demand_matrix


def validate_quota(quota, num_regions):
    """Check that a quota matrix is KxK with entries in [0, 1]."""
    quota = np.asarray(quota)
    if quota.shape != (num_regions, num_regions):
        raise ValueError(
            f"quota must be {num_regions}x{num_regions}, got {quota.shape}")
    if not np.all(np.isfinite(quota)):
        raise ValueError("quota entries must be finite")
    if quota.min() < 0.0 or quota.max() > 1.0:
        raise ValueError("quota entries must lie in [0, 1]")
    return quota


def prolong(series, repeats):
    """Tile a series periodically, multiplying its horizon by ``repeats``."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    return MobilitySeries(series._base, series.initial_population.copy(),
                          repeats=series._repeats * int(repeats))


def mean_outflow(series, region):
    """Time-mean hourly outflow of one region over the full horizon.

    Returns 0.0 for a region with no demand at all; callers dividing by the
    mean outflow must guard that case (see ``zero_outflow_regions``).
    """
    if not 0 <= region < series.num_regions:
        raise IndexError(f"region {region} out of range")
    return float(series._base[:, region, :].sum() / series.base_hours)


def mean_outflows(series):
    """Vector of per-region time-mean hourly outflows."""
    return series._base.sum(axis=2, dtype=np.float64).mean(axis=0)


def zero_outflow_regions(series):
    """Boolean mask of regions whose demand is identically zero."""
    return mean_outflows(series) == 0.0


def realized_move_probability(series):
    """Mean hourly probability of an individual moving, over the whole series."""
    movers_per_hour = series._base.sum(dtype=np.float64) / series.base_hours
    return float(movers_per_hour / series.initial_population.sum())


def generate_synthetic_city(params: CityGenParams) -> MobilitySeries:
    """Generate a one-month (744 h) hourly OD demand series on a grid city.

    Flows follow a gravity kernel (pop_i * pop_j / distance^2) modulated by a
    24-hour commute profile: mornings pull people toward high-population
    "work" regions, evenings send them back. Populations circulate
    self-consistently, so every hourly outflow is feasible for the
    unrestricted population trajectory. Deterministic for a fixed seed.
    """
    params.validate()
    rows, cols = params.grid_rows, params.grid_cols
    num_regions = rows * cols
    rng = np.random.default_rng(params.seed)

    pop0 = np.exp(rng.normal(0.0, 0.3, size=num_regions))
    pop0 *= params.mean_population / pop0.mean()

    rr, cc = np.divmod(np.arange(num_regions), cols)
    d2 = (rr[:, None] - rr[None, :]) ** 2 + (cc[:, None] - cc[None, :]) ** 2
    np.fill_diagonal(d2, 1)  # placeholder; diagonal masked below
    gravity = pop0[:, None] * pop0[None, :] / d2
    np.fill_diagonal(gravity, 0.0)

    n_work = max(1, round(0.12 * num_regions))
    work = np.zeros(num_regions)
    work[np.argsort(pop0)[-n_work:]] = 1.0
    home = 1.0 - work

    # Keep only the strongest destinations per origin (work hubs get a boost
    # so that commuting targets survive the cut).
    mask = np.zeros_like(gravity, dtype=bool)
    score = gravity * (1.0 + 1.5 * work[None, :])
    keep = min(NEIGHBOR_CAP, num_regions - 1)
    top = np.argsort(score, axis=1)[:, -keep:]
    mask[np.arange(num_regions)[:, None], top] = True
    mask &= score > 0

    hours = BASE_DAYS * 24
    day_factor = np.clip(1.0 + 0.05 * rng.standard_normal(BASE_DAYS), 0.85, 1.15)

    frac_scale = params.p_move / float(HOURLY_SHAPE.mean())
    demand = np.empty((hours, num_regions, num_regions), dtype=np.float32)
    # Two passes: generate, measure realized move probability, rescale once.
    for _ in range(2):
        realized = _fill_demand(demand, pop0, gravity, mask, work, home,
                                day_factor, frac_scale, params.commute_fraction)
        frac_scale *= params.p_move / realized

    return MobilitySeries(demand, pop0.copy())


def _fill_demand(demand, pop0, gravity, mask, work, home, day_factor,
                 frac_scale, commute):
    """Fill the demand array hour by hour; returns realized move probability."""
    num_regions = pop0.shape[0]
    pop = pop0.copy()
    total_pop = pop0.sum()
    moved = 0.0
    for t in range(demand.shape[0]):
        h = t % 24
        morning, evening = MORNING_SHAPE[h], EVENING_SHAPE[h]
        out_frac = frac_scale * HOURLY_SHAPE[h] * day_factor[t // 24] * (
            1.0 + 1.5 * commute * (morning * home + evening * work))
        out_frac = np.minimum(out_frac, MAX_HOURLY_OUT_FRACTION)
        attract = 1.0 + 4.0 * commute * (morning * work + evening * home)
        weights = np.where(mask, gravity * attract[None, :], 0.0)
        weights /= np.maximum(weights.sum(axis=1, keepdims=True), 1e-300)
        flows = (pop * out_frac)[:, None] * weights
        demand[t] = flows
        outflow = flows.sum(axis=1)
        pop = pop - outflow + flows.sum(axis=0)
        moved += outflow.sum()
    return moved / (demand.shape[0] * total_pop)


def save_od_csv(series, path):
    """Write a series as `hour,origin,destination,flow` rows (non-zero flows only).

    A sidecar ``<path>.meta.json`` records K, the horizon and the region
    populations so that ``load_od_csv`` can reconstruct the series exactly.
    """
    frames = []
    for t in range(series.horizon):
        mat = series.demand_at(t)
        orig, dest = np.nonzero(mat)
        frames.append(pd.DataFrame({
            "hour": np.full(orig.shape[0], t, dtype=np.int64),
            "origin": orig.astype(np.int64),
            "destination": dest.astype(np.int64),
            "flow": mat[orig, dest].astype(np.float64),
        }))
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["hour", "origin", "destination", "flow"])
    # %.17g keeps float64 text roundtrips exact (pandas default truncates).
    table.to_csv(path, index=False, float_format="%.17g")
    meta = {
        "format": "epiquota-od-csv",
        "version": 1,
        "num_regions": series.num_regions,
        "horizon_hours": series.horizon,
        "initial_population": series.initial_population.tolist(),
    }
    with open(_meta_path(path), "w") as fh:
        json.dump(meta, fh)


def load_od_csv(path):
    """Load a series written by ``save_od_csv``; validates every row."""
    meta_path = _meta_path(path)
    if not os.path.exists(meta_path):
        raise OdCsvError(f"missing sidecar metadata file {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    num_regions = int(meta["num_regions"])
    horizon = int(meta["horizon_hours"])
    pop = np.asarray(meta["initial_population"], dtype=np.float64)

    try:
        table = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise OdCsvError(f"{path}: no records") from None
    if list(table.columns) != ["hour", "origin", "destination", "flow"]:
        raise OdCsvError(
            f"{path}: expected header hour,origin,destination,flow, "
            f"got {list(table.columns)}")
    if len(table) == 0:
        raise OdCsvError(f"{path}: no records")

    for col in ("hour", "origin", "destination"):
        values = pd.to_numeric(table[col], errors="coerce")
        _raise_on_bad_rows(path, values.isna() | (values % 1 != 0),
                           f"non-integer {col}")
        table[col] = values.astype(np.int64)
    flow = pd.to_numeric(table["flow"], errors="coerce")
    _raise_on_bad_rows(path, flow.isna(), "malformed flow")
    _raise_on_bad_rows(path, flow < 0, "negative flow")
    _raise_on_bad_rows(path, (table["hour"] < 0) | (table["hour"] >= horizon),
                       f"hour outside 0..{horizon - 1}")
    for col in ("origin", "destination"):
        _raise_on_bad_rows(
            path, (table[col] < 0) | (table[col] >= num_regions),
            f"{col} inconsistent with K={num_regions}")
    _raise_on_bad_rows(path, table["origin"] == table["destination"],
                       "flow on the diagonal")

    demand = np.zeros((horizon, num_regions, num_regions), dtype=np.float64)
    demand[table["hour"], table["origin"], table["destination"]] = flow
    return MobilitySeries(demand, pop)


def save_city_config(params: CityGenParams, path):
    with open(path, "w") as fh:
        json.dump(asdict(params), fh, indent=2)


def load_city_config(path) -> CityGenParams:
    with open(path) as fh:
        data = json.load(fh)
    unknown = set(data) - {f for f in CityGenParams.__dataclass_fields__}
    if unknown:
        raise ValueError(f"unknown city config keys: {sorted(unknown)}")
    params = CityGenParams(**data)
    params.validate()
    return params


def _meta_path(path):
    return f"{path}.meta.json"


def _raise_on_bad_rows(path, bad, reason):
    if bad.any():
        # +2: one for the header line, one for 1-based numbering.
        line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
        raise OdCsvError(f"{path}:{line}: {reason}")
