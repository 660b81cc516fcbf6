"""SIHR epidemic dynamics on a metapopulation connected by OD flows.

Each hour splits into two sub-steps: mobility (movable people relocate along
the allowed OD matrix) and infection (staying and newly arrived groups mix
separately). Hospitalized people never move and never infect.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

# Negative values smaller than this (relative to region population) are
# treated as float roundoff and clamped to zero.
NEG_TOL = 1e-9


class StateError(ValueError):
    """Raised when dynamics produce or receive an invalid epidemic state."""


@dataclass(frozen=True)
class DiseaseParams:
    """Per-hour transmission/transition rates, shared by all regions.

    ``beta_s`` applies to people staying in a region, ``beta_m`` to the hour's
    new arrivals. ``include_h_in_stay_denominator`` controls whether the
    hospitalized (immobile, non-infectious) are counted in the staying group's
    mixing population.
    """

    beta_m: float = 3.0 / 24.0
    beta_s: float = 0.1 / 24.0
    gamma: float = 0.3 / 24.0
    theta: float = 0.3 / 24.0
    include_h_in_stay_denominator: bool = True

    def validate(self):
        for name in ("beta_m", "beta_s", "gamma", "theta"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {value}")
        if self.beta_m < self.beta_s:
            raise ValueError("beta_m must be >= beta_s")
        return self


@dataclass(frozen=True)
class EpidemicState:
    """Per-region S, I, H, R compartments (fractional persons)."""

    s: np.ndarray
    i: np.ndarray
    h: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=np.float64) for a in (self.s, self.i, self.h, self.r)]
        k = arrays[0].shape
        if any(a.shape != k or a.ndim != 1 for a in arrays):
            raise StateError("compartments must be equal-length 1-d vectors")
        if any(np.any(a < 0) or not np.all(np.isfinite(a)) for a in arrays):
            raise StateError("compartments must be finite and non-negative")
        for name, a in zip("sihr", arrays):
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @property
    def num_regions(self):
        return self.s.shape[0]

    @property
    def total(self):
        """Per-region population N."""
        return self.s + self.i + self.h + self.r

    @property
    def movable(self):
        """Per-region movable population (everyone but the hospitalized)."""
        return self.s + self.i + self.r

    def city_total(self):
        return float(self.s.sum() + self.i.sum() + self.h.sum() + self.r.sum())

    def add(self, other):
        return EpidemicState(self.s + other.s, self.i + other.i,
                             self.h + other.h, self.r + other.r)


@dataclass(frozen=True)
class VisibleState:
    """What an observer sees: S and I are indistinguishable, reported as one."""

    si: np.ndarray
    h: np.ndarray
    r: np.ndarray


def all_susceptible(population) -> EpidemicState:
    population = np.asarray(population, dtype=np.float64)
    zero = np.zeros_like(population)
    return EpidemicState(population.copy(), zero.copy(), zero.copy(), zero.copy())


def seed_infection(state, region, count) -> EpidemicState:
    """Move ``count`` persons from S to I in one region."""
    if count < 0:
        raise StateError("infection count must be non-negative")
    if count > state.s[region]:
        raise StateError(
            f"cannot seed {count} infections in region {region}: "
            f"only {state.s[region]} susceptible")
    s, i = state.s.copy(), state.i.copy()
    s[region] -= count
    i[region] += count
    return replace(state, s=s, i=i)


def mobility_substep(state, allowed):
    """Relocate movable people along the allowed OD matrix.

    Returns ``(stay, arrived, clipped)``: the epidemic state of people who
    stayed (H rides here, it never moves), the state of this hour's arrivals
    (zero H), and whether any region's requested outflow had to be rescaled to
    its movable population.
    """
    allowed = np.asarray(allowed, dtype=np.float64)
    k = state.num_regions
    if allowed.shape != (k, k):
        raise StateError(f"allowed matrix must be {k}x{k}, got {allowed.shape}")
    movable = state.movable
    outflow = allowed.sum(axis=1)

    # Fraction of each movable compartment that leaves; clip infeasible rows.
    with np.errstate(divide="ignore", invalid="ignore"):
        frac_out = np.where(movable > 0, outflow / movable, 0.0)
    clipped = bool(np.any(frac_out > 1.0) or np.any((movable == 0) & (outflow > 0)))
    if clipped:
        scale = np.where(frac_out > 1.0, 1.0 / np.maximum(frac_out, 1.0), 1.0)
        scale = np.where(movable > 0, scale, 0.0)
        allowed = allowed * scale[:, None]
        frac_out = np.minimum(frac_out, 1.0) * (movable > 0)

    with np.errstate(divide="ignore", invalid="ignore"):
        share = np.where(movable > 0, 1.0 / movable, 0.0)
    stay = EpidemicState((1.0 - frac_out) * state.s, (1.0 - frac_out) * state.i,
                         state.h.copy(), (1.0 - frac_out) * state.r)
    arrived = EpidemicState(allowed.T @ (share * state.s),
                            allowed.T @ (share * state.i),
                            np.zeros(k),
                            allowed.T @ (share * state.r))
    return stay, arrived, clipped


def infection_substep(stay, arrived, params) -> EpidemicState:
    """Mix the staying and arrived groups separately, then hospital flows.

    New infections per region are beta_s*S_s*I_s/N_s + beta_m*S_m*I_m/N_m,
    each term zero when its group is empty. The hospitalization drain applies
    to post-mobility I (before this hour's new infections join), and recovery
    drains the pre-update H.
    """
    n_stay = stay.s + stay.i + stay.r
    if params.include_h_in_stay_denominator:
        n_stay = n_stay + stay.h
    n_move = arrived.s + arrived.i + arrived.r

    new_inf = (_mix(stay.s, stay.i, n_stay, params.beta_s)
               + _mix(arrived.s, arrived.i, n_move, params.beta_m))

    s_hat = stay.s + arrived.s
    i_hat = stay.i + arrived.i
    h = stay.h + arrived.h
    r_hat = stay.r + arrived.r

    s_next = s_hat - new_inf
    i_next = i_hat + new_inf - params.gamma * i_hat
    h_next = h + params.gamma * i_hat - params.theta * h
    r_next = r_hat + params.theta * h

    scale = np.maximum(s_hat + i_hat + h + r_hat, 1.0)
    for name, vec in (("S", s_next), ("I", i_next), ("H", h_next), ("R", r_next)):
        if np.any(vec < -NEG_TOL * scale):
            raise StateError(f"negative {name} after infection sub-step")
    return EpidemicState(np.maximum(s_next, 0.0), np.maximum(i_next, 0.0),
                         np.maximum(h_next, 0.0), np.maximum(r_next, 0.0))


def step_hour(state, allowed, params):
    """One full hour: mobility then infection. Returns (next_state, clipped)."""
    stay, arrived, clipped = mobility_substep(state, allowed)
    return infection_substep(stay, arrived, params), clipped


def estimate_r0(params, p_move) -> float:
    """Basic reproduction number from the move-probability-weighted mean rate."""
    if params.gamma <= 0:
        raise ZeroDivisionError("R0 estimate requires gamma > 0")
    beta_bar = p_move * params.beta_m + (1.0 - p_move) * params.beta_s
    return beta_bar / params.gamma


def visible(state) -> VisibleState:
    return VisibleState(state.s + state.i, state.h.copy(), state.r.copy())


def visible_delta(current, previous) -> VisibleState:
    """Elementwise change between two visible states (current minus previous)."""
    return VisibleState(current.si - previous.si, current.h - previous.h,
                        current.r - previous.r)


def save_trajectory_csv(states, path):
    """Write a state sequence as `hour,region,S,I,H,R` rows."""
    if not states:
        raise ValueError("empty trajectory")
    k = states[0].num_regions
    hours = np.repeat(np.arange(len(states)), k)
    regions = np.tile(np.arange(k), len(states))
    table = pd.DataFrame({
        "hour": hours,
        "region": regions,
        "S": np.concatenate([st.s for st in states]),
        "I": np.concatenate([st.i for st in states]),
        "H": np.concatenate([st.h for st in states]),
        "R": np.concatenate([st.r for st in states]),
    })
    table.to_csv(path, index=False, float_format="%.17g")


def _mix(s, i, n, beta):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(n > 0, beta * s * i / np.where(n > 0, n, 1.0), 0.0)
