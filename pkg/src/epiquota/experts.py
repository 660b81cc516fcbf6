"""Rule-based quota policies: fixed-rate, threshold lockdowns, and the
pseudo expert mixed into agent training.

All rules decide per region and fill the region's outgoing row of the quota
matrix; incoming flow is controlled by the other regions' rows.
"""

from __future__ import annotations

from collections import deque

import numpy as np


def ep_fixed(x_q, num_regions):
    """Constant quota rate on every OD pair."""
    if not 0.0 <= x_q <= 1.0:
        raise ValueError("x_q must be in [0, 1]")
    return np.full((num_regions, num_regions), float(x_q))


def ep_soft(h, loss, x_h, x_l):
    """Zero the outgoing row of regions with H above x_h, until the
    accumulated restriction history reaches x_l (then reopen)."""
    h = np.asarray(h)
    loss = np.asarray(loss)
    locked = (h > x_h) & (loss < x_l)
    return np.tile(np.where(locked, 0.0, 1.0)[:, None], (1, h.shape[0]))


def ep_lockdown(h, loss):
    """Lock any region with patients, and never reopen while they remain."""
    return ep_soft(h, loss, 0.0, np.inf)


def pseudo_expert(h, loss, x_h=1.0, x_l=168.0):
    """The exploration guide: a soft lockdown with lenient defaults."""
    return ep_soft(h, loss, x_h, x_l)


def ep_hard(h, recent_allowed_out, x_h, x_t_days=7):
    """Zero rows of regions with H above x_h unless the region already spent
    the last ``x_t_days`` fully locked (zero allowed outflow), which reopens
    it for one decision period.

    ``recent_allowed_out`` is the per-region allowed outflow summed over the
    last ``x_t_days`` days, or None when that much history does not exist yet
    (treated as nonzero, i.e. the region has not served its lockdown).
    """
    h = np.asarray(h)
    if recent_allowed_out is None:
        recent = np.full(h.shape[0], np.inf)
    else:
        recent = np.asarray(recent_allowed_out)
    locked = (h > x_h) & (recent > 0)
    return np.tile(np.where(locked, 0.0, 1.0)[:, None], (1, h.shape[0]))


class StatelessPolicy:
    """Adapter turning f(observation) -> quota into the policy protocol."""

    def __init__(self, fn, name):
        self._fn = fn
        self.name = name

    def reset(self, observation):
        pass

    def act(self, observation):
        return self._fn(observation)

    def observe(self, outcome):
        pass


def no_intervention_policy():
    return StatelessPolicy(
        lambda obs: np.ones((obs.num_regions, obs.num_regions)),
        "no-intervention")


def ep_fixed_policy(x_q):
    return StatelessPolicy(
        lambda obs: ep_fixed(x_q, obs.num_regions),
        f"ep-fixed-{x_q:g}")


def ep_soft_policy(x_h=0.0, x_l=168.0):
    return StatelessPolicy(
        lambda obs: ep_soft(obs.visible.h, obs.loss, x_h, x_l), "ep-soft")


def ep_lockdown_policy():
    return StatelessPolicy(
        lambda obs: ep_lockdown(obs.visible.h, obs.loss), "ep-lockdown")


def pseudo_expert_policy(x_h=1.0, x_l=168.0):
    return StatelessPolicy(
        lambda obs: pseudo_expert(obs.visible.h, obs.loss, x_h, x_l),
        "pseudo-expert")


class EpHardPolicy:
    """Daily lockdown rule: decisions are made at midnight and held 24 hours.

    Tracks the allowed outflow its own actions produced to judge whether a
    region has been fully locked for the last ``x_t_days`` days.
    """

    name = "ep-hard"

    def __init__(self, x_h=0.0, x_t_days=7):
        if x_t_days < 1:
            raise ValueError("x_t_days must be >= 1")
        self.x_h = x_h
        self.x_t_days = x_t_days

    def reset(self, observation):
        k = observation.num_regions
        self._daily = deque(maxlen=self.x_t_days)
        self._today = np.zeros(k)
        self._current = np.ones((k, k))
        self._decide(observation)
        self._last_day = observation.hour // 24

    def act(self, observation):
        day = observation.hour // 24
        if day != self._last_day:
            self._daily.append(self._today)
            self._today = np.zeros(observation.num_regions)
            self._decide(observation)
            self._last_day = day
        return self._current

    def observe(self, outcome):
        self._today = self._today + outcome.info["allowed_out"]

    def _decide(self, observation):
        if len(self._daily) < self.x_t_days:
            recent = None
        else:
            recent = np.sum(self._daily, axis=0)
        self._current = ep_hard(observation.visible.h, recent, self.x_h,
                                self.x_t_days)


BASELINES = {
    "no-intervention": no_intervention_policy,
    "ep-fixed": ep_fixed_policy,
    "ep-soft": ep_soft_policy,
    "ep-hard": EpHardPolicy,
    "ep-lockdown": ep_lockdown_policy,
    "pseudo-expert": pseudo_expert_policy,
}


def make_policy(name, **kwargs):
    """Build a named baseline policy; unknown names raise."""
    if name not in BASELINES:
        raise ValueError(
            f"unknown policy {name!r}; choose from {sorted(BASELINES)}")
    return BASELINES[name](**kwargs)
