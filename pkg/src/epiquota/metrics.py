"""Episode metrics, baseline comparison tables, and figure-data export.

All metrics cover the intervened period only (hours from t_start on) and
report compartment counts as per-region averages.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .env import QuotaEnv, run_episode

T20_CUT = 0.20

METRIC_COLUMNS = ["mean_h", "max_h", "total_r", "q", "t20_city", "t20_region"]
REPORT_COLUMNS = (["policy"] + METRIC_COLUMNS
                  + ["reward", "termination_reason", "status", "error"])


@dataclass
class MetricsReport:
    mean_h: float
    max_h: float
    total_r: float
    q: float
    t20_city: int
    t20_region: int

    def as_dict(self):
        return asdict(self)


def _intervened(log):
    hours = np.asarray(log.hours)
    keep = hours >= log.t_start_hour
    if not keep.any():
        raise ValueError("log has no rows in the intervened period")
    return (hours[keep], np.stack(log.h)[keep], np.stack(log.r)[keep],
            np.stack(log.demand_out)[keep], np.stack(log.allowed_out)[keep])


def _daily_below(hours, demand, allowed, start_hour, cut):
    """Count whole midnight-aligned days whose retained-mobility ratio is
    strictly below the cut. Columns of demand/allowed are regions; pass
    city-summed columns for the city count. Zero-demand days are skipped."""
    last = start_hour + 24 * ((hours.max() + 1 - start_hour) // 24)
    counts = np.zeros(demand.shape[1], dtype=int)
    for day_start in range(start_hour, last, 24):
        rows = (hours >= day_start) & (hours < day_start + 24)
        day_demand = demand[rows].sum(axis=0)
        day_allowed = allowed[rows].sum(axis=0)
        live = day_demand > 0
        counts += live & (day_allowed < cut * day_demand)
    return counts


def compute_metrics(log, cut=T20_CUT) -> MetricsReport:
    """Six summary numbers for one episode log."""
    hours, h, r, demand, allowed = _intervened(log)
    total_demand = float(demand.sum())
    if total_demand == 0.0:
        raise ValueError("q is undefined: zero total demand")
    h_mean = h.mean(axis=1)                       # per-region average H
    city = _daily_below(hours, demand.sum(axis=1, keepdims=True),
                        allowed.sum(axis=1, keepdims=True),
                        log.t_start_hour, cut)
    region = _daily_below(hours, demand, allowed, log.t_start_hour, cut)
    return MetricsReport(
        mean_h=float(h_mean.mean()),
        max_h=float(h_mean.max()),
        total_r=float(r[-1].mean()),
        q=float(allowed.sum()) / total_demand,
        t20_city=int(city[0]),
        t20_region=int(region.max()),
    )


def run_baseline_suite(series, disease, config, policies, seed_region=None,
                       rng_seed=None):
    """Run each policy from one shared epidemic initialization.

    Returns a report frame in the comparison-table column order; a policy
    that raises gets a failed row and the suite continues.
    """
    if seed_region is None:
        rng = np.random.default_rng(rng_seed)
        weights = series.initial_population
        seed_region = int(rng.choice(series.num_regions,
                                     p=weights / weights.sum()))
    rows = []
    for policy in policies:
        name = getattr(policy, "name", type(policy).__name__)
        row = {"policy": name, "status": "ok", "error": ""}
        try:
            env = QuotaEnv(series, disease, config)
            log = run_episode(env, policy, seed_region=seed_region)
            row.update(compute_metrics(log).as_dict())
            row["reward"] = log.total_reward()
            row["termination_reason"] = env.termination_reason
        except Exception as exc:
            row["status"] = "failed"
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def save_report(frame, csv_path=None, json_path=None):
    if csv_path is not None:
        frame.to_csv(csv_path, index=False, float_format="%.17g")
    if json_path is not None:
        payload = frame.to_dict(orient="records")
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)


def export_figure_data(log, out_dir, period_hours=4, bins=20, prefix=""):
    """Emit plot-ready CSVs: the H curve, the per-period per-region
    quota-rate grid, and the quota-rate histogram. Returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hours = np.asarray(log.hours)
    h = np.stack(log.h)

    curve = pd.DataFrame({"hour": hours, "h_mean": h.mean(axis=1),
                          "h_total": h.sum(axis=1)})
    curve_path = out / f"{prefix}h_curve.csv"
    curve.to_csv(curve_path, index=False, float_format="%.17g")

    hours_i, _, _, demand, allowed = _intervened(log)
    k = demand.shape[1]
    records = []
    start = log.t_start_hour
    while start + period_hours <= hours_i.max() + 1:
        rows = (hours_i >= start) & (hours_i < start + period_hours)
        den = demand[rows].sum(axis=0)
        num = allowed[rows].sum(axis=0)
        ratio = np.divide(num, den, out=np.full(k, np.nan), where=den > 0)
        for region in range(k):
            records.append({"period_start_hour": start, "region": region,
                            "quota_rate": ratio[region]})
        start += period_hours
    grid = pd.DataFrame(records,
                        columns=["period_start_hour", "region", "quota_rate"])
    grid_path = out / f"{prefix}quota_grid.csv"
    grid.to_csv(grid_path, index=False, float_format="%.17g")

    values = grid["quota_rate"].dropna().to_numpy()
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    hist = pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:],
                         "count": counts})
    hist_path = out / f"{prefix}quota_hist.csv"
    hist.to_csv(hist_path, index=False, float_format="%.17g")

    return {"h_curve": curve_path, "quota_grid": grid_path,
            "quota_hist": hist_path}
