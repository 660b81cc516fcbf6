"""DDPG agent for mobility-quota control.

Graph-network actor and critic over the demand window, ring replay buffer,
target networks, parameter-noise exploration, and expert-guided action
mixing with a decaying schedule.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import experts
from .nn import Adam, NumericError, Tensor
from .nn.layers import (ActorNetwork, CriticNetwork, GRAPH_LAYERS,
                        NUM_NODE_FEATURES)
from .nn.optim import clip_grad_norm

CHECKPOINT_FORMAT = "epiquota-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class AgentConfig:
    width: int = 32
    depth: int = 4
    layer_kind: str = "flow"
    num_features: int = NUM_NODE_FEATURES
    gamma_rl: float = 0.99
    batch_size: int = 32
    buffer_capacity: int = 100_000
    tau_soft: float = 0.001
    lr: float = 1e-4
    total_steps: int = 400_000
    epsilon_start: float = 0.5
    decay_steps: int = 0          # 0 means half of total_steps
    expert_x_h: float = 1.0       # guide locks regions above this H
    expert_x_l: float = 168.0     # guide reopens above this history
    noise_std: float = 0.1
    noise_target: float = 0.1
    noise_adapt: float = 1.01
    huber_delta: float = 1.0
    grad_clip: float = 10.0
    reward_scale: float = 0.01
    logit_decay: float = 1e-3     # actor pre-squash L2, keeps gradients alive
    checkpoint_every: int = 0     # episodes between snapshots; 0 = final only

    def validate(self):
        if self.layer_kind not in GRAPH_LAYERS:
            raise ValueError(f"unknown layer kind {self.layer_kind!r}")
        for name in ("width", "depth", "num_features", "batch_size",
                     "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.gamma_rl < 1.0:
            raise ValueError("gamma_rl must be in [0, 1)")
        if not 0.0 <= self.epsilon_start <= 1.0:
            raise ValueError("epsilon_start must be in [0, 1]")
        if not 0.0 < self.tau_soft <= 1.0:
            raise ValueError("tau_soft must be in (0, 1]")
        if self.noise_adapt <= 1.0:
            raise ValueError("noise_adapt must exceed 1")
        if min(self.lr, self.noise_std, self.noise_target, self.huber_delta,
               self.grad_clip, self.reward_scale, self.logit_decay,
               self.expert_x_h, self.expert_x_l) < 0:
            raise ValueError("rates and scales must be non-negative")
        if min(self.total_steps, self.decay_steps, self.checkpoint_every) < 0:
            raise ValueError("step counts must be non-negative")
        return self


@dataclass
class Batch:
    hour: np.ndarray
    f: np.ndarray
    n_mov: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_hour: np.ndarray
    next_f: np.ndarray
    next_n_mov: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """Ring buffer of compact transitions.

    Rows hold node features and the action only; demand windows are rebuilt
    from the shared mobility series at sample time, so memory stays at
    O(capacity * K^2) for the action matrices.
    """

    def __init__(self, capacity, num_regions, num_features=NUM_NODE_FEATURES):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        k, nf = int(num_regions), int(num_features)
        self._hour = np.zeros(self.capacity, dtype=np.int64)
        self._f = np.zeros((self.capacity, k, nf), dtype=np.float32)
        self._n_mov = np.zeros((self.capacity, k), dtype=np.float32)
        self._action = np.zeros((self.capacity, k, k), dtype=np.float32)
        self._reward = np.zeros(self.capacity)
        self._next_hour = np.zeros(self.capacity, dtype=np.int64)
        self._next_f = np.zeros_like(self._f)
        self._next_n_mov = np.zeros_like(self._n_mov)
        self._done = np.zeros(self.capacity, dtype=bool)
        self._cursor = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, hour, f, n_mov, action, reward, next_hour, next_f,
             next_n_mov, done):
        i = self._cursor
        self._hour[i] = hour
        self._f[i] = f
        self._n_mov[i] = n_mov
        self._action[i] = action
        self._reward[i] = reward
        self._next_hour[i] = next_hour
        self._next_f[i] = next_f
        self._next_n_mov[i] = next_n_mov
        self._done[i] = done
        self._cursor = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, rng, batch_size):
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=batch_size)
        return Batch(
            hour=self._hour[idx],
            f=self._f[idx].astype(np.float64),
            n_mov=self._n_mov[idx].astype(np.float64),
            action=self._action[idx].astype(np.float64),
            reward=self._reward[idx],
            next_hour=self._next_hour[idx],
            next_f=self._next_f[idx].astype(np.float64),
            next_n_mov=self._next_n_mov[idx].astype(np.float64),
            done=self._done[idx].astype(np.float64),
        )


def _mean_positive_demand(series):
    total, count = 0.0, 0
    for hour in range(series.base_hours):
        m = series.demand_at(hour)
        total += float(m.sum())
        count += int(np.count_nonzero(m))
    return total / count if count else 1.0


class DdpgAgent:
    """Actor-critic pair with targets, a perturbed exploration copy, and the
    expert-mixing schedule. Attach a mobility series before acting."""

    def __init__(self, config: AgentConfig, rng):
        config.validate()
        self.config = config
        self._rng = rng
        kw = dict(num_features=config.num_features, width=config.width,
                  depth=config.depth, layer_kind=config.layer_kind)
        self.actor = ActorNetwork(rng, **kw)
        self.critic = CriticNetwork(rng, **kw)
        self.actor_target = ActorNetwork(rng, **kw)
        self.critic_target = CriticNetwork(rng, **kw)
        self.actor_target.copy_from(self.actor)
        self.critic_target.copy_from(self.critic)
        self.perturbed = ActorNetwork(rng, **kw)
        self.perturbed.copy_from(self.actor)
        self.actor_opt = Adam(self.actor.parameters(), lr=config.lr)
        self.critic_opt = Adam(self.critic.parameters(), lr=config.lr)
        self.noise_std = config.noise_std
        self.step_count = 0
        self._series = None
        self._pops = None
        self._l_0 = None

    # ---- wiring ----------------------------------------------------------

    def attach(self, series, l_0):
        """Bind the city the agent acts on: population scales for features,
        mean demand for the edge head, and the series for replay windows."""
        self._series = series
        self._pops = np.asarray(series.initial_population, dtype=np.float64)
        self._l_0 = float(l_0)
        scale = _mean_positive_demand(series)
        for net in (self.actor, self.actor_target, self.perturbed):
            net.demand_scale = scale

    def features(self, obs):
        """Per-region node features: visible compartment shares, their
        last-transition changes, and the accumulated loss."""
        if self._pops is None:
            raise RuntimeError("agent is not attached to a city")
        pops = self._pops
        vis, delta = obs.visible, obs.delta
        return np.stack([vis.si / pops, vis.h / pops, vis.r / pops,
                         delta.si / pops, delta.h / pops, delta.r / pops,
                         obs.loss / self._l_0], axis=1)

    def _net_inputs(self, obs):
        window = np.asarray(obs.demand_window, dtype=np.float64)
        edges = [window[k] for k in range(window.shape[0])]
        return self.features(obs), edges, obs.n_movable

    # ---- exploration -------------------------------------------------------

    def epsilon(self, step):
        decay = self.config.decay_steps or max(1, self.config.total_steps // 2)
        return self.config.epsilon_start * max(0.0, 1.0 - step / decay)

    def reset_noise(self):
        self.perturbed.perturb_from(self.actor, self._rng, self.noise_std)

    def adapt_noise(self, distance):
        """Multiplicative std control toward the action-space target."""
        if distance < self.config.noise_target:
            self.noise_std *= self.config.noise_adapt
        elif distance > self.config.noise_target:
            self.noise_std /= self.config.noise_adapt
        return self.noise_std

    def select_action(self, obs, step=None, mode="train"):
        """Returns (quota matrix, source). Train mode takes the expert action
        with probability eps(step), otherwise the perturbed actor; eval mode
        is always the clean actor."""
        if mode == "eval":
            return self.actor.act(*self._net_inputs(obs)), "agent"
        if mode != "train":
            raise ValueError(f"unknown mode {mode!r}")
        step = self.step_count if step is None else step
        if self._rng.random() < self.epsilon(step):
            return experts.pseudo_expert(obs.visible.h, obs.loss,
                                         self.config.expert_x_h,
                                         self.config.expert_x_l), "expert"
        f, edges, n_mov = self._net_inputs(obs)
        clean = self.actor.act(f, edges, n_mov)
        noisy = self.perturbed.act(f, edges, n_mov)
        self.adapt_noise(float(np.sqrt(np.mean((noisy - clean) ** 2))))
        return noisy, "agent"

    # ---- learning ----------------------------------------------------------

    def _windows(self, hours):
        return self._series.windows(hours, self.config.depth)

    def train_step(self, batch):
        """One critic regression + one actor ascent + soft target updates.
        Returns (critic loss, actor objective)."""
        if self._series is None:
            raise RuntimeError("agent is not attached to a city")
        cfg = self.config
        depth = cfg.depth
        windows = self._windows(batch.hour)            # (B, P, K, K)
        next_windows = self._windows(batch.next_hour)

        next_edges = [next_windows[:, k] for k in range(depth)]
        p_next = self.actor_target.act(batch.next_f, next_edges,
                                       batch.next_n_mov)
        q_next = self.critic_target.forward(
            batch.next_f, [Tensor(e * p_next) for e in next_edges],
            batch.next_n_mov).data
        target = (cfg.reward_scale * batch.reward
                  + cfg.gamma_rl * (1.0 - batch.done) * q_next)

        edges = [windows[:, k] for k in range(depth)]
        q = self.critic.forward(batch.f,
                                [Tensor(e * batch.action) for e in edges],
                                batch.n_mov)
        gap = (q - Tensor(target)).abs()
        excess = (gap - cfg.huber_delta).relu()
        capped = gap - excess                          # min(gap, delta)
        critic_loss = (0.5 * capped * capped
                       + cfg.huber_delta * excess).mean()
        value = float(critic_loss.data)
        if not np.isfinite(value):
            raise NumericError(
                f"critic loss diverged at step {self.step_count}: {value}")
        self.critic_opt.zero_grad()
        self.actor_opt.zero_grad()
        critic_loss.backward()
        clip_grad_norm(self.critic.parameters(), cfg.grad_clip)
        self.critic_opt.step()

        z = self.actor.logits(batch.f, edges, batch.n_mov)
        p = z.sigmoid()
        q_pi = self.critic.forward(batch.f, [Tensor(e) * p for e in edges],
                                   batch.n_mov)
        # The L2 on the pre-squash scores keeps the sigmoid off its rails:
        # its pull grows with |z| while dQ/dz dies there, so a saturated
        # actor always drifts back into the responsive band.
        objective = q_pi.mean() - cfg.logit_decay * (z * z).mean()
        score = float(objective.data)
        if not np.isfinite(score):
            raise NumericError(
                f"actor objective diverged at step {self.step_count}: {score}")
        self.actor_opt.zero_grad()
        self.critic_opt.zero_grad()
        (-objective).backward()
        clip_grad_norm(self.actor.parameters(), cfg.grad_clip)
        self.actor_opt.step()

        self.actor_target.soft_update_from(self.actor, cfg.tau_soft)
        self.critic_target.soft_update_from(self.critic, cfg.tau_soft)
        return value, score


class AgentPolicy:
    """Evaluation adapter: the clean deterministic actor behind the common
    reset/act/observe policy protocol."""

    def __init__(self, agent, name="agent"):
        self.agent = agent
        self.name = name

    def reset(self, obs):
        pass

    def act(self, obs):
        return self.agent.select_action(obs, mode="eval")[0]

    def observe(self, outcome):
        pass


# ---- persistence -------------------------------------------------------


def save_checkpoint(path, agent):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(agent.config),
        "step": agent.step_count,
        "noise_std": agent.noise_std,
        "city": None if agent._pops is None else {
            "populations": agent._pops.tolist(),
            "l_0": agent._l_0,
            "demand_scale": agent.actor.demand_scale,
        },
        "actor": agent.actor.state_dict(),
        "critic": agent.critic.state_dict(),
        "actor_target": agent.actor_target.state_dict(),
        "critic_target": agent.critic_target.state_dict(),
        "actor_opt": agent.actor_opt.state_dict(),
        "critic_opt": agent.critic_opt.state_dict(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)


def load_checkpoint(path, series=None):
    """Restore an agent exactly. Pass the mobility series to resume training;
    evaluation only needs the checkpoint."""
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if data.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {data.get('version')}")
    agent = DdpgAgent(AgentConfig(**data["config"]), np.random.default_rng(0))
    agent.actor.load_state_dict(data["actor"])
    agent.critic.load_state_dict(data["critic"])
    agent.actor_target.load_state_dict(data["actor_target"])
    agent.critic_target.load_state_dict(data["critic_target"])
    agent.actor_opt.load_state_dict(data["actor_opt"])
    agent.critic_opt.load_state_dict(data["critic_opt"])
    agent.perturbed.copy_from(agent.actor)
    agent.step_count = int(data["step"])
    agent.noise_std = float(data["noise_std"])
    city = data["city"]
    if city is not None:
        agent._pops = np.asarray(city["populations"], dtype=np.float64)
        agent._l_0 = float(city["l_0"])
        for net in (agent.actor, agent.actor_target, agent.perturbed):
            net.demand_scale = float(city["demand_scale"])
    if series is not None:
        if city is not None and series.num_regions != len(city["populations"]):
            raise ValueError("checkpoint city size does not match the series")
        agent._series = series
    return agent


# ---- training loop -----------------------------------------------------


@dataclass
class TrainingResult:
    agent: DdpgAgent
    episodes: list
    checkpoint_path: str = None
    log_path: str = None


def episodes_frame(episodes):
    return pd.DataFrame(episodes, columns=["episode", "steps", "reward",
                                           "termination_reason",
                                           "expert_fraction"])


def run_training(env, config, seed=0, out_dir=None, total_steps=None,
                 checkpoint_every=None):
    """Episode loop with one gradient update per control step.

    The whole run is reproducible from the seed (an int or a SeedSequence):
    agent init, epidemic seeding, exploration draws, and replay sampling
    all fan out from it. checkpoint_every > 0 writes periodic snapshots
    (counted in episodes) in addition to the final checkpoint.
    """
    config.validate()
    if total_steps is None:
        total_steps = config.total_steps
    if checkpoint_every is None:
        checkpoint_every = config.checkpoint_every
    if isinstance(seed, np.random.SeedSequence):
        root = seed
    else:
        root = np.random.SeedSequence(seed)
    s_init, s_episode, s_sample = root.spawn(3)
    agent = DdpgAgent(config, np.random.default_rng(s_init))
    agent.attach(env.series, env.config.l_0)
    buffer = ReplayBuffer(config.buffer_capacity, env.series.num_regions,
                          config.num_features)
    sample_rng = np.random.default_rng(s_sample)

    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

    episodes = []
    steps_done = 0
    episode = 0
    while steps_done < total_steps:
        episode += 1
        obs = env.reset(rng_seed=s_episode.spawn(1)[0])
        agent.reset_noise()
        ep_reward, ep_steps, expert_steps = 0.0, 0, 0
        reason = "step-budget"                # overwritten unless truncated
        while steps_done < total_steps:
            f, n_mov = agent.features(obs), obs.n_movable
            action, source = agent.select_action(obs, step=steps_done)
            outcome = env.step(action)
            nxt = outcome.observation
            buffer.push(obs.hour, f, n_mov, action, outcome.reward,
                        nxt.hour, agent.features(nxt), nxt.n_movable,
                        outcome.done)
            ep_reward += outcome.reward
            ep_steps += 1
            expert_steps += source == "expert"
            steps_done += 1
            agent.step_count = steps_done
            if len(buffer) >= config.batch_size:
                agent.train_step(buffer.sample(sample_rng, config.batch_size))
            obs = nxt
            if outcome.done:
                reason = outcome.info["termination_reason"]
                break
        episodes.append({
            "episode": episode,
            "steps": ep_steps,
            "reward": ep_reward,
            "termination_reason": reason,
            "expert_fraction": expert_steps / ep_steps,
        })
        if out is not None and checkpoint_every and \
                episode % checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_ep{episode:05d}.json", agent)

    result = TrainingResult(agent=agent, episodes=episodes)
    if out is not None:
        ckpt = out / "checkpoint.json"
        save_checkpoint(ckpt, agent)
        log = out / "training_log.csv"
        episodes_frame(episodes).to_csv(log, index=False,
                                        float_format="%.17g")
        result.checkpoint_path = str(ckpt)
        result.log_path = str(log)
    return result
