"""Run-level configuration: one JSON document covering city generation,
disease, environment, agent, and expert parameters, plus the global seed.

Unknown keys are rejected everywhere so a typo cannot silently fall back
to a default. The single seed fans out to per-purpose seeds through a
fixed spawn-key derivation, so commands never share random streams.
"""

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .ddpg import AgentConfig
from .env import EnvConfig
from .mobility import CityGenParams
from .sihr import DiseaseParams

PURPOSE_KEYS = {"gen-data": 0, "simulate": 1, "train": 2, "evaluate": 3}


def seed_for(seed, purpose):
    """Per-purpose seed sequence derived from the one global seed."""
    return np.random.SeedSequence(entropy=int(seed),
                                  spawn_key=(PURPOSE_KEYS[purpose],))


def seed_int(seed, purpose):
    """Same derivation collapsed to a plain integer seed."""
    return int(seed_for(seed, purpose).generate_state(1)[0])


@dataclass
class ExpertParams:
    x_q: float = 0.15         # ep-fixed quota rate
    x_h: float = 0.0          # ep-soft / ep-hard hospitalization trigger
    x_l: float = 168.0        # ep-soft loss ceiling
    x_t_days: int = 7         # ep-hard reopening lookback

    def validate(self):
        if not 0.0 <= self.x_q <= 1.0:
            raise ValueError("x_q must be in [0, 1]")
        if self.x_h < 0 or self.x_l < 0:
            raise ValueError("thresholds must be non-negative")
        if self.x_t_days < 1:
            raise ValueError("x_t_days must be positive")
        return self


_GROUPS = {
    "city": CityGenParams,
    "disease": DiseaseParams,
    "env": EnvConfig,
    "agent": AgentConfig,
    "experts": ExpertParams,
}


@dataclass
class RunConfig:
    city: CityGenParams = field(default_factory=CityGenParams)
    disease: DiseaseParams = field(default_factory=DiseaseParams)
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    experts: ExpertParams = field(default_factory=ExpertParams)
    seed: int = 0
    out_dir: str = "runs"

    def validate(self):
        for name in _GROUPS:
            getattr(self, name).validate()
        if self.agent.depth != self.env.control_period:
            raise ValueError(
                f"agent.depth ({self.agent.depth}) must equal "
                f"env.control_period ({self.env.control_period}): the "
                "network consumes one demand hour per layer")
        return self

    def to_dict(self):
        out = {name: asdict(getattr(self, name)) for name in _GROUPS}
        out["seed"] = self.seed
        out["out_dir"] = self.out_dir
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        kwargs = {}
        for name, group_cls in _GROUPS.items():
            raw = data.pop(name, None)
            if raw is None:
                continue
            known = {f.name for f in fields(group_cls)}
            extra = set(raw) - known
            if extra:
                raise ValueError(f"{name}: unknown keys {sorted(extra)}")
            kwargs[name] = group_cls(**raw)
        for name in ("seed", "out_dir"):
            if name in data:
                kwargs[name] = data.pop(name)
        if data:
            raise ValueError(f"unknown config sections {sorted(data)}")
        return cls(**kwargs)


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


def save_run_config(config: RunConfig, path):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
