import json

import numpy as np
import pytest

from epiquota.ddpg import (
    AgentConfig, AgentPolicy, DdpgAgent, ReplayBuffer, episodes_frame,
    load_checkpoint, run_training, save_checkpoint,
)
from epiquota.env import EnvConfig, QuotaEnv, run_episode
from epiquota.mobility import MobilitySeries
from epiquota.nn import NumericError
from epiquota.sihr import DiseaseParams


def small_setup(k=3, horizon=2, t_start=0, control_period=2,
                thresholds=False):
    hours = horizon * 24 + control_period
    demand = np.full((hours, k, k), 2.0, dtype=np.float64)
    for h in range(hours):
        np.fill_diagonal(demand[h], 0.0)
    series = MobilitySeries(demand, np.full(k, 50.0))
    config = EnvConfig(control_period=control_period, t_start=t_start,
                       horizon=horizon, thresholds_enabled=thresholds)
    env = QuotaEnv(series, DiseaseParams(), config)
    return env


def small_agent(env, seed=0, **overrides):
    kw = dict(width=4, depth=env.config.control_period, batch_size=4,
              buffer_capacity=500, total_steps=100)
    kw.update(overrides)
    agent = DdpgAgent(AgentConfig(**kw), np.random.default_rng(seed))
    agent.attach(env.series, env.config.l_0)
    return agent


# ---- config ----------------------------------------------------------------


def test_config_validation():
    AgentConfig().validate()
    with pytest.raises(ValueError, match="layer kind"):
        AgentConfig(layer_kind="conv").validate()
    with pytest.raises(ValueError, match="gamma_rl"):
        AgentConfig(gamma_rl=1.0).validate()
    with pytest.raises(ValueError, match="epsilon_start"):
        AgentConfig(epsilon_start=1.5).validate()
    with pytest.raises(ValueError, match="noise_adapt"):
        AgentConfig(noise_adapt=0.99).validate()


# ---- replay buffer ---------------------------------------------------------


def fill_buffer(buf, count, k=2):
    for idx in range(count):
        f = np.full((k, 7), float(idx))
        buf.push(idx, f, np.ones(k), np.full((k, k), 0.5), -float(idx),
                 idx + 1, f + 1, np.ones(k), idx % 7 == 6)


def test_buffer_ring_overwrite():
    buf = ReplayBuffer(5, num_regions=2)
    fill_buffer(buf, 8)
    assert len(buf) == 5
    batch = buf.sample(np.random.default_rng(0), 64)
    assert set(batch.hour) <= {3, 4, 5, 6, 7}
    assert batch.f.dtype == np.float64


def test_buffer_empty_sample_raises():
    buf = ReplayBuffer(10, num_regions=2)
    with pytest.raises(ValueError, match="empty"):
        buf.sample(np.random.default_rng(0), 4)


def test_buffer_sampling_uniform_chi_square():
    n, draws = 50, 40_000
    buf = ReplayBuffer(n, num_regions=2)
    fill_buffer(buf, n)
    rng = np.random.default_rng(42)
    counts = np.zeros(n)
    for _ in range(draws // 100):
        batch = buf.sample(rng, 100)
        counts += np.bincount(batch.hour, minlength=n)
    expected = draws / n
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # Wilson-Hilferty upper 1% point of chi-square with n-1 dof.
    dof = n - 1
    crit = dof * (1 - 2 / (9 * dof) + 2.3263 * np.sqrt(2 / (9 * dof))) ** 3
    assert chi2 < crit


def test_buffer_transition_fields_roundtrip():
    buf = ReplayBuffer(4, num_regions=2)
    fill_buffer(buf, 2)
    batch = buf.sample(np.random.default_rng(1), 32)
    zero = batch.hour == 0
    assert np.all(batch.reward[zero] == 0.0)
    assert np.all(batch.next_hour[zero] == 1)
    assert np.all(batch.f[zero] == 0.0)
    assert np.all(batch.next_f[zero] == 1.0)
    assert np.all(batch.done == 0.0)


# ---- exploration -----------------------------------------------------------


def test_epsilon_schedule():
    env = small_setup()
    agent = small_agent(env, total_steps=100, epsilon_start=0.5)
    values = [agent.epsilon(s) for s in range(101)]
    assert values[0] == 0.5
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert agent.epsilon(50) == 0.0     # decay defaults to total / 2
    assert agent.epsilon(100) == 0.0
    explicit = small_agent(env, total_steps=100, decay_steps=80)
    assert explicit.epsilon(40) == pytest.approx(0.25)


def test_select_action_expert_endpoint():
    env = small_setup()
    agent = small_agent(env, epsilon_start=1.0)
    obs = env.reset(seed_region=0)
    for _ in range(5):
        quota, source = agent.select_action(obs, step=0)
        assert source == "expert"
        assert set(np.unique(quota)) <= {0.0, 1.0}


def test_select_action_greedy_matches_actor():
    env = small_setup()
    agent = small_agent(env, epsilon_start=0.0, noise_std=0.0)
    obs = env.reset(seed_region=0)
    quota, source = agent.select_action(obs, step=0)
    assert source == "agent"
    clean, _ = agent.select_action(obs, mode="eval")
    assert np.array_equal(quota, clean)
    assert np.all((quota > 0) & (quota < 1))


def test_select_action_expert_frequency():
    env = small_setup()
    agent = small_agent(env, epsilon_start=0.3, noise_std=0.0)
    obs = env.reset(seed_region=0)
    hits = sum(agent.select_action(obs, step=0)[1] == "expert"
               for _ in range(10_000))
    assert abs(hits / 10_000 - 0.3) <= 0.02


def test_adapt_noise_direction_and_fixed_point():
    env = small_setup()
    agent = small_agent(env, noise_std=0.2, noise_target=0.1)
    agent.adapt_noise(0.1)
    assert agent.noise_std == 0.2       # exactly on target: unchanged
    agent.adapt_noise(0.0)
    assert agent.noise_std == pytest.approx(0.202)
    agent.adapt_noise(5.0)
    assert agent.noise_std == pytest.approx(0.2)


def test_adapt_noise_converges_to_target_distance():
    env = small_setup()
    agent = small_agent(env, seed=3, noise_std=1.0, noise_target=0.05,
                        noise_adapt=1.05)
    obs = env.reset(seed_region=0)
    f, n_mov = agent.features(obs), obs.n_movable
    edges = list(np.asarray(obs.demand_window, dtype=np.float64))
    distance = None
    for _ in range(300):
        agent.reset_noise()
        noisy = agent.perturbed.act(f, edges, n_mov)
        clean = agent.actor.act(f, edges, n_mov)
        distance = float(np.sqrt(np.mean((noisy - clean) ** 2)))
        agent.adapt_noise(distance)
    assert 0.5 * 0.05 <= distance <= 2.0 * 0.05


# ---- learning ----------------------------------------------------------


def rollout_into_buffer(env, agent, buf, steps, rng):
    obs = env.reset(seed_region=0)
    for _ in range(steps):
        action = rng.uniform(0.2, 0.9, (env.num_regions, env.num_regions))
        outcome = env.step(action)
        nxt = outcome.observation
        buf.push(obs.hour, agent.features(obs), obs.n_movable, action,
                 outcome.reward, nxt.hour, agent.features(nxt),
                 nxt.n_movable, outcome.done)
        obs = nxt
        if outcome.done:
            obs = env.reset(seed_region=0)


def test_train_step_decreases_critic_loss_on_frozen_buffer():
    env = small_setup()
    agent = small_agent(env, seed=5, lr=3e-3)
    buf = ReplayBuffer(64, env.num_regions)
    rollout_into_buffer(env, agent, buf, 30, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    losses = [agent.train_step(buf.sample(rng, 8))[0] for _ in range(120)]
    assert all(np.isfinite(losses))
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_train_step_regresses_to_reward_when_done():
    # A single terminal transition: no bootstrap, the critic must fit r.
    env = small_setup()
    agent = small_agent(env, seed=6, lr=1e-2, reward_scale=1.0)
    buf = ReplayBuffer(8, env.num_regions)
    obs = env.reset(seed_region=0)
    action = np.full((env.num_regions,) * 2, 0.5)
    f, n_mov = agent.features(obs), obs.n_movable
    buf.push(obs.hour, f, n_mov, action, -2.5, obs.hour + 2, f, n_mov, True)
    rng = np.random.default_rng(9)
    for _ in range(400):
        agent.train_step(buf.sample(rng, 4))
    windows = agent._windows([obs.hour])
    edges = [windows[:, k] * action for k in range(agent.config.depth)]
    q = agent.critic.forward(batch_f([f]), edges, batch_f([n_mov])).data
    assert abs(float(q[0]) - (-2.5)) < 0.05


def batch_f(rows):
    return np.stack([np.asarray(r, dtype=np.float64) for r in rows])


def test_train_step_full_tau_copies_targets():
    env = small_setup()
    agent = small_agent(env, seed=10, tau_soft=1.0)
    buf = ReplayBuffer(16, env.num_regions)
    rollout_into_buffer(env, agent, buf, 6, np.random.default_rng(11))
    agent.train_step(buf.sample(np.random.default_rng(12), 4))
    for mine, theirs in zip(agent.actor_target.parameters(),
                            agent.actor.parameters()):
        assert np.array_equal(mine.data, theirs.data)
    for mine, theirs in zip(agent.critic_target.parameters(),
                            agent.critic.parameters()):
        assert np.array_equal(mine.data, theirs.data)


def test_train_step_nan_aborts_with_diagnostic():
    env = small_setup()
    agent = small_agent(env, seed=13)
    buf = ReplayBuffer(16, env.num_regions)
    rollout_into_buffer(env, agent, buf, 6, np.random.default_rng(14))
    agent.critic.head2.w.data[:] = np.nan
    with pytest.raises(NumericError, match="critic loss"):
        agent.train_step(buf.sample(np.random.default_rng(15), 4))


def test_unattached_agent_refuses_to_act():
    agent = DdpgAgent(AgentConfig(width=4, depth=2),
                      np.random.default_rng(0))
    env = small_setup()
    obs = env.reset(seed_region=0)
    with pytest.raises(RuntimeError, match="not attached"):
        agent.select_action(obs, mode="eval")


# ---- checkpoints -----------------------------------------------------------


def test_checkpoint_roundtrip_exact(tmp_path):
    env = small_setup()
    agent = small_agent(env, seed=16)
    buf = ReplayBuffer(32, env.num_regions)
    rollout_into_buffer(env, agent, buf, 10, np.random.default_rng(17))
    rng = np.random.default_rng(18)
    for _ in range(5):
        agent.train_step(buf.sample(rng, 4))
    agent.step_count = 5
    agent.noise_std = 0.123

    first = tmp_path / "ckpt.json"
    save_checkpoint(first, agent)
    restored = load_checkpoint(first, series=env.series)
    second = tmp_path / "ckpt2.json"
    save_checkpoint(second, restored)
    assert first.read_bytes() == second.read_bytes()

    obs = env.reset(seed_region=1)
    assert np.array_equal(restored.select_action(obs, mode="eval")[0],
                          agent.select_action(obs, mode="eval")[0])
    assert restored.step_count == 5 and restored.noise_std == 0.123


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(bad)
    env = small_setup()
    agent = small_agent(env)
    path = tmp_path / "ok.json"
    save_checkpoint(path, agent)
    data = json.loads(path.read_text())
    data["version"] = 99
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_checkpoint_series_size_mismatch(tmp_path):
    env = small_setup(k=3)
    agent = small_agent(env)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, agent)
    other = small_setup(k=4)
    with pytest.raises(ValueError, match="does not match"):
        load_checkpoint(path, series=other.series)


# ---- training loop ---------------------------------------------------------


def test_run_training_zero_steps_checkpoint_is_init(tmp_path):
    env = small_setup()
    cfg = AgentConfig(width=4, depth=2, total_steps=0)
    result = run_training(env, cfg, seed=1, out_dir=tmp_path)
    assert result.episodes == []
    restored = load_checkpoint(result.checkpoint_path)
    assert restored.step_count == 0
    assert restored.actor.state_dict() == result.agent.actor.state_dict()


def test_run_training_logs_and_determinism(tmp_path):
    env = small_setup(horizon=1, control_period=2)
    cfg = AgentConfig(width=4, depth=2, batch_size=4, total_steps=30,
                      epsilon_start=0.5)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        runs.append(run_training(env, cfg, seed=21, out_dir=out))
    first, second = runs
    assert first.episodes == second.episodes
    assert len(first.episodes) >= 2
    for row in first.episodes:
        assert row["termination_reason"] in ("horizon", "step-budget")
        assert 0.0 <= row["expert_fraction"] <= 1.0
    frame = episodes_frame(first.episodes)
    assert list(frame.columns) == ["episode", "steps", "reward",
                                   "termination_reason", "expert_fraction"]
    log_a = (tmp_path / "a" / "training_log.csv").read_bytes()
    log_b = (tmp_path / "b" / "training_log.csv").read_bytes()
    assert log_a == log_b
    assert first.agent.actor.state_dict() == second.agent.actor.state_dict()


def test_run_training_periodic_checkpoints(tmp_path):
    env = small_setup(horizon=1, control_period=2)
    cfg = AgentConfig(width=4, depth=2, batch_size=4, total_steps=26)
    run_training(env, cfg, seed=2, out_dir=tmp_path, checkpoint_every=1)
    assert (tmp_path / "checkpoint_ep00001.json").exists()
    assert (tmp_path / "checkpoint_ep00002.json").exists()
    assert (tmp_path / "checkpoint.json").exists()


def test_agent_policy_eval_is_deterministic(tmp_path):
    env = small_setup(horizon=1, control_period=2)
    cfg = AgentConfig(width=4, depth=2, batch_size=4, total_steps=12)
    result = run_training(env, cfg, seed=3, out_dir=tmp_path)
    agent = load_checkpoint(tmp_path / "checkpoint.json")
    logs = []
    for _ in range(2):
        run_episode(env, AgentPolicy(agent), seed_region=0)
        logs.append(env.log.to_frame())
    assert logs[0].equals(logs[1])
    assert result.agent is not agent
