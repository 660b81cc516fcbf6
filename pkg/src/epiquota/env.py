"""Quota-control environment: hourly SIHR dynamics driven by actions held for
a multi-hour control period, a dual infection/mobility-restriction cost, and
the exponentially discounted per-region restriction history L.

Costs for hour t use the state before that hour's transition: the infection
cost reads H^t and the mobility cost weights this hour's restriction by
exp(L^t / L_0), where L^t excludes the current hour. Both are negated and
summed over the control period into one reward per action.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import sihr
from .mobility import mean_outflows, validate_quota

EXTINCTION_EPS = 1e-6


class ProtocolError(RuntimeError):
    """Raised when the env API is driven out of order (e.g. step after done)."""


@dataclass(frozen=True)
class EnvConfig:
    control_period: int = 4       # hours an action is held
    t_start: int = 20             # days of free spread before control begins
    horizon: int = 60             # episode length in days, warm-up included
    k_h: float = 1.0
    h_0: float = 3.0
    l_0: float = 72.0
    lam: float = 0.99             # hourly decay of the restriction history
    i_threshold: float = 100.0    # mean infected tripwire (training only)
    l_threshold: float = 336.0    # max restriction-history tripwire
    terminal_penalty: float = 1000.0
    thresholds_enabled: bool = True
    seed_count: float = 1.0

    def validate(self):
        if self.control_period < 1 or 24 % self.control_period != 0:
            raise ValueError("control_period must divide 24")
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lambda must be in (0, 1)")
        if min(self.k_h, self.h_0, self.l_0) <= 0:
            raise ValueError("k_h, H_0, L_0 must be positive")
        if self.t_start < 0 or self.horizon <= 0:
            raise ValueError("t_start must be >= 0 and horizon positive")
        if self.t_start >= self.horizon:
            raise ValueError("t_start must leave time inside the horizon")
        if self.seed_count <= 0:
            raise ValueError("seed_count must be positive")
        return self


@dataclass(frozen=True)
class Observation:
    hour: int
    visible: sihr.VisibleState
    delta: sihr.VisibleState
    demand_window: np.ndarray     # (control_period, K, K)
    loss: np.ndarray              # (K,) restriction history L

    @property
    def num_regions(self):
        return self.loss.shape[0]

    @property
    def n_movable(self):
        """Movable population per region: everyone not hospitalized."""
        return self.visible.si + self.visible.r


@dataclass(frozen=True)
class StepOutcome:
    observation: Observation
    reward: float
    done: bool
    info: dict


@dataclass
class EpisodeLog:
    """Hour-resolution record of one episode, warm-up hours included."""

    num_regions: int
    t_start_hour: int
    hours: list = field(default_factory=list)
    s: list = field(default_factory=list)
    i: list = field(default_factory=list)
    h: list = field(default_factory=list)
    r: list = field(default_factory=list)
    demand_out: list = field(default_factory=list)
    allowed_out: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    step_rewards: list = field(default_factory=list)   # one entry per action

    def record_hour(self, hour, state, demand_out, allowed_out, loss):
        self.hours.append(hour)
        self.s.append(state.s)
        self.i.append(state.i)
        self.h.append(state.h)
        self.r.append(state.r)
        self.demand_out.append(demand_out)
        self.allowed_out.append(allowed_out)
        self.loss.append(loss)

    def record_step(self, step, hour, reward, infection_cost, mobility_cost):
        self.step_rewards.append((step, hour, reward, infection_cost,
                                  mobility_cost))

    @property
    def final_state(self) -> sihr.EpidemicState:
        return sihr.EpidemicState(self.s[-1], self.i[-1], self.h[-1],
                                  self.r[-1])

    def total_reward(self):
        return float(sum(row[2] for row in self.step_rewards))

    def to_frame(self):
        k = self.num_regions
        n = len(self.hours)
        return pd.DataFrame({
            "hour": np.repeat(np.asarray(self.hours), k),
            "region": np.tile(np.arange(k), n),
            "S": np.concatenate(self.s),
            "I": np.concatenate(self.i),
            "H": np.concatenate(self.h),
            "R": np.concatenate(self.r),
            "demand_out": np.concatenate(self.demand_out),
            "allowed_out": np.concatenate(self.allowed_out),
            "L": np.concatenate(self.loss),
        })

    def save(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def save_rewards(self, path):
        table = pd.DataFrame(
            self.step_rewards,
            columns=["step", "hour", "reward", "infection_cost",
                     "mobility_cost"])
        table.to_csv(path, index=False, float_format="%.17g")


def load_episode_log(path, t_start_hour) -> EpisodeLog:
    table = pd.read_csv(path, float_precision="round_trip")
    k = int(table["region"].max()) + 1
    log = EpisodeLog(num_regions=k, t_start_hour=t_start_hour)
    for hour, group in table.groupby("hour", sort=True):
        group = group.sort_values("region")
        col = lambda name: group[name].to_numpy(dtype=np.float64)
        log.record_hour(
            int(hour),
            sihr.EpidemicState(col("S"), col("I"), col("H"), col("R")),
            col("demand_out"), col("allowed_out"), col("L"))
    return log


def reward_infection(h, k_h, h_0) -> float:
    """Infection cost for one hour: k_h * exp(mean(H) / H_0)."""
    return float(k_h * np.exp(np.mean(h) / h_0))


def restriction_fraction(demand_out, allowed_out, mean_out):
    """Per-region restricted outflow normalized by the mean outflow."""
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(mean_out > 0, (demand_out - allowed_out)
                        / np.where(mean_out > 0, mean_out, 1.0), 0.0)
    return frac


def update_loss(loss, demand_out, allowed_out, mean_out, lam):
    """L' = lam * (L + restricted/mean outflow); zero-demand regions add 0."""
    return lam * (loss + restriction_fraction(demand_out, allowed_out,
                                              mean_out))


def reward_mobility(loss, demand_out, allowed_out, mean_out, l_0) -> float:
    """Mobility cost for one hour, escalating with the restriction history."""
    frac = restriction_fraction(demand_out, allowed_out, mean_out)
    return float(np.mean(np.exp(loss / l_0) * frac))


def check_termination(state, loss, config):
    """Threshold tripwires; returns a reason string or None (strict >)."""
    if float(np.mean(state.i)) > config.i_threshold:
        return "infection-threshold"
    if float(np.max(loss)) > config.l_threshold:
        return "lockdown-threshold"
    return None


class QuotaEnv:
    """One episode at a time over a fixed mobility series and disease."""

    def __init__(self, series, disease: sihr.DiseaseParams, config: EnvConfig):
        config.validate()
        disease.validate()
        if config.horizon * 24 + config.control_period > series.horizon:
            raise ValueError(
                f"horizon {config.horizon}d (+1 control period) exceeds the "
                f"series horizon of {series.horizon} hours")
        self.series = series
        self.disease = disease
        self.config = config
        self.mean_out = mean_outflows(series)
        self.num_regions = series.num_regions
        self._state = None
        self._done = True
        self._termination_reason = None

    def reset(self, seed_region=None, rng_seed=None) -> Observation:
        """Seed an infection, run the uncontrolled warm-up, start control.

        ``seed_region`` fixes the outbreak location; otherwise it is drawn
        population-weighted from ``rng_seed``.
        """
        cfg = self.config
        if seed_region is None:
            rng = np.random.default_rng(rng_seed)
            weights = self.series.initial_population
            seed_region = int(rng.choice(self.num_regions,
                                         p=weights / weights.sum()))
        state = sihr.seed_infection(
            sihr.all_susceptible(self.series.initial_population),
            seed_region, cfg.seed_count)

        self._log = EpisodeLog(num_regions=self.num_regions,
                               t_start_hour=cfg.t_start * 24)
        self._loss = np.zeros(self.num_regions)
        self._hour = 0
        self._step_index = 0
        self._clip_events = 0
        self._prev_visible = sihr.visible(state)

        for _ in range(cfg.t_start * 24):
            demand = np.asarray(self.series.demand_at(self._hour),
                                dtype=np.float64)
            self._log.record_hour(self._hour, state, demand.sum(axis=1),
                                  demand.sum(axis=1), self._loss)
            self._prev_visible = sihr.visible(state)
            state, clipped = sihr.step_hour(state, demand, self.disease)
            self._clip_events += clipped
            self._hour += 1

        self._state = state
        self._done = False
        self._termination_reason = None
        self.seed_region = seed_region
        return self._observe()

    def step(self, quota) -> StepOutcome:
        if self._done:
            raise ProtocolError("step() called on a finished episode")
        cfg = self.config
        quota = validate_quota(quota, self.num_regions)

        reward = 0.0
        infection_cost = 0.0
        mobility_cost = 0.0
        step_demand = np.zeros(self.num_regions)
        step_allowed = np.zeros(self.num_regions)
        reason = None
        start_hour = self._hour

        for _ in range(cfg.control_period):
            demand = np.asarray(self.series.demand_at(self._hour),
                                dtype=np.float64)
            allowed = quota * demand
            demand_out = demand.sum(axis=1)
            allowed_out = allowed.sum(axis=1)

            r_h = reward_infection(self._state.h, cfg.k_h, cfg.h_0)
            r_m = reward_mobility(self._loss, demand_out, allowed_out,
                                  self.mean_out, cfg.l_0)
            infection_cost += r_h
            mobility_cost += r_m
            reward -= r_h + r_m

            self._log.record_hour(self._hour, self._state, demand_out,
                                  allowed_out, self._loss)
            self._prev_visible = sihr.visible(self._state)
            self._state, clipped = sihr.step_hour(self._state, allowed,
                                                  self.disease)
            self._clip_events += clipped
            self._loss = update_loss(self._loss, demand_out, allowed_out,
                                     self.mean_out, cfg.lam)
            self._hour += 1
            step_demand += demand_out
            step_allowed += allowed_out

            if cfg.thresholds_enabled:
                reason = check_termination(self._state, self._loss, cfg)
                if reason:
                    reward -= cfg.terminal_penalty
                    break
            if (self._state.i.sum() < EXTINCTION_EPS
                    and self._state.h.sum() < EXTINCTION_EPS):
                reason = "extinct"
                break

        if reason is None and self._hour >= cfg.horizon * 24:
            reason = "horizon"
        self._done = reason is not None
        if self._done:
            self._termination_reason = reason

        if self._done:
            # Close the log with the terminal state (no action follows it).
            zero = np.zeros(self.num_regions)
            self._log.record_hour(self._hour, self._state, zero, zero,
                                  self._loss)

        self._log.record_step(self._step_index, start_hour, reward,
                              infection_cost, mobility_cost)
        self._step_index += 1

        info = {
            "hour": self._hour,
            "demand_out": step_demand,
            "allowed_out": step_allowed,
            "mean_h": float(np.mean(self._state.h)),
            "max_h": float(np.max(self._state.h)),
            "clip_events": self._clip_events,
            "termination_reason": reason,
        }
        return StepOutcome(self._observe(), reward, self._done, info)

    @property
    def log(self) -> EpisodeLog:
        return self._log

    @property
    def state(self) -> sihr.EpidemicState:
        return self._state

    @property
    def loss(self):
        return self._loss.copy()

    @property
    def hour(self):
        return self._hour

    @property
    def termination_reason(self):
        """How the last episode ended; None while one is still running."""
        return self._termination_reason

    def _observe(self) -> Observation:
        vis = sihr.visible(self._state)
        window_len = min(self.config.control_period,
                         self.series.horizon - self._hour)
        window = self.series.window(self._hour, window_len)
        if window_len < self.config.control_period:
            pad = np.repeat(window[-1:], self.config.control_period - window_len,
                            axis=0)
            window = np.concatenate([window, pad])
        return Observation(hour=self._hour, visible=vis,
                           delta=sihr.visible_delta(vis, self._prev_visible),
                           demand_window=window, loss=self._loss.copy())


def run_episode(env, policy, seed_region=None, rng_seed=None,
                max_steps=None) -> EpisodeLog:
    """Roll one full episode under a policy; returns the env's episode log."""
    obs = env.reset(seed_region=seed_region, rng_seed=rng_seed)
    if hasattr(policy, "reset"):
        policy.reset(obs)
    steps = 0
    while True:
        action = policy.act(obs) if hasattr(policy, "act") else policy(obs)
        outcome = env.step(action)
        if hasattr(policy, "observe"):
            policy.observe(outcome)
        obs = outcome.observation
        steps += 1
        if outcome.done or (max_steps is not None and steps >= max_steps):
            return env.log
