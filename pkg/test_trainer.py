import json

import numpy as np
import pytest

from conftest import make_tiny_config
from models import CurriculumConfig, NetworkConfig, PpoConfig, RobotConfig, TerrainConfig, TerrainKind, TrainingMode
from neural import ACTION_DIM, Adam, AfrPolicy, CheckpointMismatchError, gaussian_log_prob
from quadsim import NumericalDivergence
from recovery_env import PRIVILEGED_DIM, REWARD_TERMS, SCAN_DIM, TerminationReason
from trainer import (
    EPISODES_FILE,
    LATEST_FILE,
    METRICS_FILE,
    Curriculum,
    NonFiniteLoss,
    RolloutBuffer,
    RolloutCollector,
    Trainer,
    collect_rollout,
    compute_gae,
    episode_seed,
    evaluate_policy,
    load_metrics,
    loss_and_gradients,
    train,
    update,
)

SMALL = NetworkConfig(history=2, latent_dim=3, heightmap_dim=4, estimator_hidden=[8], heightmap_hidden=[5],
                      actor_hidden=[8], critic_hidden=[8])


def reference_gae(rewards, values, dones, bootstrap, gamma, lam):
    """Forward sum of discounted TD errors, cut at episode ends"""
    T = len(rewards)
    next_values = np.append(values[1:], bootstrap)
    deltas = [rewards[t] + gamma * next_values[t] * (1 - dones[t]) - values[t] for t in range(T)]
    out = np.zeros(T)
    for t in range(T):
        factor = 1.0
        for k in range(t, T):
            out[t] += factor * deltas[k]
            if dones[k]:
                break
            factor *= gamma * lam
    return out


def toy_batch(policy, rng, size=6):
    """Minibatch whose stored log-probs match the current policy"""
    histories = rng.normal(size=(size, policy.history_dim))
    out = policy.act(histories)
    actions = out.mean + out.std * rng.standard_normal(out.mean.shape)
    return {
        "histories": histories,
        "privileged": rng.normal(size=(size, PRIVILEGED_DIM)),
        "scans": rng.uniform(-1, 1, size=(size, SCAN_DIM)),
        "actions": actions,
        "log_probs": gaussian_log_prob(actions, out.mean, np.log(out.std)),
        "values": rng.normal(size=size),
        "advantages": rng.normal(size=size),
        "returns": rng.normal(size=size),
        "masses": rng.uniform(0.2, 6.0, size=(size, 4)),
    }


def filled_buffer(t_roll=2, n_envs=2, history_dim=84, reward=0.0):
    buffer = RolloutBuffer(t_roll, n_envs, history_dim)
    for _ in range(t_roll):
        buffer.add(
            np.zeros((n_envs, history_dim)), np.zeros((n_envs, PRIVILEGED_DIM)), np.zeros((n_envs, SCAN_DIM)),
            np.zeros((n_envs, ACTION_DIM)), np.zeros(n_envs), np.zeros(n_envs), np.full(n_envs, reward),
            np.zeros(n_envs), np.ones((n_envs, 4)), np.zeros((n_envs, len(REWARD_TERMS))),
        )
    return buffer


class TestAdvantages:
    """GAE"""

    def test_one_step_lookahead(self):
        rewards = np.array([1.0, 2.0, 3.0])
        values = np.array([0.5, 0.4, 0.3])
        dones = np.zeros(3)
        adv, _ = compute_gae(rewards, values, dones, 0.2, 0.9, 0.0, normalize=False)
        assert adv == pytest.approx([1.0 + 0.9 * 0.4 - 0.5, 2.0 + 0.9 * 0.3 - 0.4, 3.0 + 0.9 * 0.2 - 0.3])

    def test_terminal_step_ignores_bootstrap(self):
        adv, ret = compute_gae(np.array([1.0]), np.array([0.3]), np.array([1.0]), 5.0, 0.99, 0.95, normalize=False)
        assert adv == pytest.approx([0.7])
        assert ret == pytest.approx([1.0])

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            T = int(rng.integers(1, 12))
            rewards, values = rng.normal(size=T), rng.normal(size=T)
            dones = (rng.uniform(size=T) < 0.2).astype(float)
            bootstrap = float(rng.normal())
            adv, ret = compute_gae(rewards, values, dones, bootstrap, 0.97, 0.9, normalize=False)
            assert adv == pytest.approx(reference_gae(rewards, values, dones, bootstrap, 0.97, 0.9))
            assert ret == pytest.approx(adv + values)

    @pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
    def test_matches_reference_tightly(self, lam):
        rng = np.random.default_rng(int(lam * 10) + 3)
        for _ in range(100):
            T = int(rng.integers(1, 21))
            rewards, values = rng.normal(size=T), rng.normal(size=T)
            dones = (rng.uniform(size=T) < 0.2).astype(float)
            bootstrap = float(rng.normal())
            adv, ret = compute_gae(rewards, values, dones, bootstrap, 0.99, lam, normalize=False)
            assert adv == pytest.approx(reference_gae(rewards, values, dones, bootstrap, 0.99, lam), rel=0, abs=1e-10)
            assert ret == pytest.approx(adv + values, rel=0, abs=1e-10)

    def test_lambda_one_gives_discounted_return(self):
        rewards = np.array([1.0, 0.0, 2.0])
        adv, ret = compute_gae(rewards, np.zeros(3), np.zeros(3), 4.0, 0.5, 1.0, normalize=False)
        assert ret == pytest.approx([1.0 + 0.25 * 2.0 + 0.125 * 4.0, 0.5 * 2.0 + 0.25 * 4.0, 2.0 + 0.5 * 4.0])

    def test_batch_axes(self):
        rng = np.random.default_rng(1)
        rewards, values = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        dones = np.zeros((5, 3))
        bootstrap = rng.normal(size=3)
        adv, _ = compute_gae(rewards, values, dones, bootstrap, 0.99, 0.95, normalize=False)
        for i in range(3):
            column, _ = compute_gae(rewards[:, i], values[:, i], dones[:, i], bootstrap[i], 0.99, 0.95, normalize=False)
            assert adv[:, i] == pytest.approx(column)

    def test_normalized(self):
        rng = np.random.default_rng(2)
        adv, _ = compute_gae(rng.normal(size=(8, 4)), rng.normal(size=(8, 4)), np.zeros((8, 4)), np.zeros(4), 0.99, 0.95)
        assert adv.mean() == pytest.approx(0.0, abs=1e-12)
        assert adv.std() == pytest.approx(1.0)

    def test_constant_advantages_stay_finite(self):
        adv, _ = compute_gae(np.zeros(4), np.zeros(4), np.zeros(4), 0.0, 0.99, 0.95)
        assert np.all(adv == 0.0)


class TestRolloutBuffer:
    """Fixed-capacity storage"""

    def test_capacity(self):
        buffer = filled_buffer(t_roll=8, n_envs=2)
        assert len(buffer) == 16
        assert buffer.full
        with pytest.raises(IndexError):
            buffer.add(*[np.zeros(1)] * 10)

    def test_flatten_shapes(self):
        buffer = filled_buffer(t_roll=3, n_envs=2, history_dim=10)
        buffer.finish(np.zeros(2), 0.99, 0.95)
        data = buffer.flatten()
        assert data["histories"].shape == (6, 10)
        assert data["actions"].shape == (6, ACTION_DIM)
        assert data["advantages"].shape == (6,)


class TestSeeds:
    """Episode seed derivation"""

    def test_stable_and_distinct(self):
        assert episode_seed(7, 0, 0) == episode_seed(7, 0, 0)
        seeds = {episode_seed(7, env, ep) for env in range(4) for ep in range(25)}
        assert len(seeds) == 100
        assert all(0 <= s < (1 << 63) for s in seeds)


class TestLoss:
    """PPO objective and gradients"""

    def test_total_loss_gradient(self):
        rng = np.random.default_rng(3)
        policy = AfrPolicy(TrainingMode.AFR, SMALL, rng)
        policy.log_std[:] = rng.uniform(-1.0, 0.0, size=ACTION_DIM)
        batch = toy_batch(policy, rng)
        # perturb the stored log-probs so the ratio moves off 1 but stays inside the clip band
        batch["log_probs"] = batch["log_probs"] + rng.uniform(-0.05, 0.05, size=6)
        ppo = PpoConfig(entropy_coef=0.01)

        loss_and_gradients(policy, batch, ppo)
        analytic = {name: g.copy() for name, _, g in policy.named_parameters()}

        eps = 1e-6
        for name, p, _ in policy.named_parameters():
            flat = p.reshape(-1)
            for idx in rng.choice(flat.size, size=min(8, flat.size), replace=False):
                old = flat[idx]
                flat[idx] = old + eps
                up = loss_and_gradients(policy, batch, ppo)["loss"]
                flat[idx] = old - eps
                down = loss_and_gradients(policy, batch, ppo)["loss"]
                flat[idx] = old
                numeric = (up - down) / (2 * eps)
                assert analytic[name].reshape(-1)[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-6), name

    def test_regression_term_scales_with_coefficient(self):
        rng = np.random.default_rng(4)
        policy = AfrPolicy(TrainingMode.AFR, SMALL, rng)
        batch = toy_batch(policy, rng)
        off = loss_and_gradients(policy, batch, PpoConfig(regression_coef=0.0))
        on = loss_and_gradients(policy, batch, PpoConfig(regression_coef=1.0))
        assert on["regression_loss"] > 0
        assert on["loss"] - off["loss"] == pytest.approx(on["regression_loss"])

    def test_ppo_mode_has_no_regression(self):
        rng = np.random.default_rng(5)
        policy = AfrPolicy(TrainingMode.PPO, SMALL, rng)
        parts = loss_and_gradients(policy, toy_batch(policy, rng), PpoConfig())
        assert parts["regression_loss"] == 0.0
        assert parts["approx_kl"] == pytest.approx(0.0, abs=1e-12)
        assert parts["clip_fraction"] == 0.0

    def test_zero_learning_rate_keeps_parameters(self):
        rng = np.random.default_rng(6)
        policy = AfrPolicy(TrainingMode.AFR, SMALL, rng)
        buffer = filled_buffer(history_dim=policy.history_dim, reward=1.0)
        buffer.rewards[0, 0] = 2.0
        buffer.finish(np.zeros(2), 0.99, 0.95)
        before = policy.state_dict()
        ppo = PpoConfig(learning_rate=0.0, epochs=2, minibatches=2)
        stats = update(policy, Adam(policy.parameters(), lr=0.0), buffer, ppo, rng)
        after = policy.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert np.isfinite(stats.policy_loss)

    def test_non_finite_loss_dumps_minibatch(self, tmp_path):
        rng = np.random.default_rng(7)
        policy = AfrPolicy(TrainingMode.AFR, SMALL, rng)
        buffer = filled_buffer(history_dim=policy.history_dim, reward=np.nan)
        buffer.finish(np.zeros(2), 0.99, 0.95)
        before = policy.state_dict()
        with pytest.raises(NonFiniteLoss) as info:
            update(policy, Adam(policy.parameters()), buffer, PpoConfig(), rng, str(tmp_path / "debug"))
        assert info.value.dump_path.endswith("nonfinite_epoch0_mb0.npz")
        assert (tmp_path / "debug" / "nonfinite_epoch0_mb0.npz").is_file()
        assert all(np.array_equal(before[k], v) for k, v in policy.state_dict().items())


class TestRollouts:
    """Collection over the environment batch"""

    def test_same_seed_same_rollout(self, tiny_config):
        def run():
            collector = RolloutCollector(tiny_config)
            policy = AfrPolicy(tiny_config.ppo.mode, tiny_config.network, np.random.default_rng(0))
            return collect_rollout(policy, collector, 8, np.random.default_rng(1), tiny_config.ppo)

        a, b = run(), run()
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.rewards, b.rewards)
        assert np.array_equal(a.advantages, b.advantages)

    def test_supine_robot_earns_no_upright_reward(self, tiny_config):
        collector = RolloutCollector(tiny_config)
        policy = AfrPolicy(tiny_config.ppo.mode, tiny_config.network, np.random.default_rng(0))
        buffer = collect_rollout(policy, collector, 8, np.random.default_rng(1), tiny_config.ppo)
        upright = buffer.reward_terms[..., REWARD_TERMS.index("upright")]
        assert upright.mean() < 0.1
        assert not np.isnan(buffer.mass_estimates).any()

    def test_timeouts_are_recorded(self):
        config = make_tiny_config(t_roll=30)
        collector = RolloutCollector(config)
        policy = AfrPolicy(config.ppo.mode, config.network, np.random.default_rng(0))
        buffer = collect_rollout(policy, collector, 30, np.random.default_rng(1), config.ppo)
        episodes = collector.drain_episodes()
        assert len(episodes) == 2
        assert all(e.termination_reason == "Timeout" for e in episodes)
        assert buffer.dones[-1].tolist() == [1.0, 1.0]
        assert collector.drain_episodes() == []

    def test_resets_that_always_diverge_give_up(self):
        config = make_tiny_config().model_copy(update={"robot": RobotConfig(kp=1e7, torque_limit=1e9)})
        with pytest.raises(NumericalDivergence, match="consecutive resets diverged"):
            RolloutCollector(config)

    def test_diverged_resets_are_recorded(self, monkeypatch):
        config = make_tiny_config(n_envs=1)
        collector = RolloutCollector(config)
        collector.drain_episodes()
        env = collector.envs[0]
        real_reset = env.reset
        calls = []

        def flaky_reset(seed, spec=None, start="supine"):
            observation = real_reset(seed, spec, start)
            calls.append(seed)
            if len(calls) < 3:
                env.terminated = True
                env.termination_reason = TerminationReason.DIVERGED
            return observation

        monkeypatch.setattr(env, "reset", flaky_reset)
        collector._reset_env(0)
        episodes = collector.drain_episodes()
        assert [e.termination_reason for e in episodes] == ["Diverged", "Diverged"]
        assert not any(e.success for e in episodes)
        assert len(set(calls)) == 3
        assert not env.terminated


class TestCurriculum:
    """Per-kind difficulty tracking"""

    def test_promotes_after_window(self):
        config = TerrainConfig(kinds=[TerrainKind.STAIRS], curriculum=CurriculumConfig(window=4, min_episodes=3))
        curriculum = Curriculum(config)
        for _ in range(2):
            curriculum.record(TerrainKind.STAIRS, True)
        curriculum.update()
        assert curriculum.spec(TerrainKind.STAIRS).difficulty == 0.0
        curriculum.record(TerrainKind.STAIRS, True)
        curriculum.update()
        assert curriculum.difficulties() == {"stairs": pytest.approx(0.05)}
        assert len(curriculum.windows[TerrainKind.STAIRS]) == 0

    def test_disabled_holds(self):
        config = TerrainConfig(curriculum=CurriculumConfig(enabled=False, min_episodes=1))
        curriculum = Curriculum(config)
        curriculum.record(TerrainKind.FLAT, True)
        curriculum.update()
        assert curriculum.spec(TerrainKind.FLAT).difficulty == 0.0


class TestTrainer:
    """Training loop, outputs and resume"""

    def test_two_iterations(self, tiny_config, tmp_path):
        path = train(tiny_config, str(tmp_path))
        records = load_metrics(str(tmp_path))
        assert [r.iteration for r in records] == [1, 2]
        assert records[0].mode == TrainingMode.AFR
        assert set(records[0].reward_terms) == set(REWARD_TERMS)
        assert records[0].mass_error is not None
        assert path.endswith("ckpt_2.bin")
        assert (tmp_path / LATEST_FILE).read_text().strip() == "ckpt_2.bin"
        assert (tmp_path / EPISODES_FILE).is_file()

    @pytest.mark.parametrize("mode", [TrainingMode.PPO, TrainingMode.AFR_RAW])
    def test_other_modes_train(self, mode, tmp_path):
        config = make_tiny_config(mode=mode)
        train(config, str(tmp_path))
        records = load_metrics(str(tmp_path))
        assert len(records) == 2
        assert records[-1].mode == mode
        if mode == TrainingMode.PPO:
            assert records[-1].loss_reg == 0.0
            assert records[-1].mass_error is None

    def test_reruns_are_byte_identical(self, tiny_config, tmp_path):
        train(tiny_config, str(tmp_path / "a"))
        train(tiny_config, str(tmp_path / "b"))
        assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (tmp_path / "b" / METRICS_FILE).read_bytes()

    def test_resume_matches_straight_run(self, tmp_path):
        config = make_tiny_config(total_iterations=4)
        train(config, str(tmp_path / "straight"))
        train(config, str(tmp_path / "split"), stop_after=2)
        assert len(load_metrics(str(tmp_path / "split"))) == 2
        train(config, str(tmp_path / "split"))
        straight = (tmp_path / "straight" / METRICS_FILE).read_bytes()
        assert (tmp_path / "split" / METRICS_FILE).read_bytes() == straight

    def test_resume_rejects_changed_config(self, tiny_config, tmp_path):
        train(tiny_config, str(tmp_path), stop_after=1)
        changed = tiny_config.model_copy(update={"seed": 8})
        with pytest.raises(CheckpointMismatchError):
            Trainer(changed, str(tmp_path))

    def test_iteration_callback(self, tiny_config, tmp_path):
        seen = []
        train(tiny_config, str(tmp_path), on_iteration=seen.append)
        assert [r.iteration for r in seen] == [1, 2]

    def test_metrics_lines_are_json(self, tiny_config, tmp_path):
        train(tiny_config, str(tmp_path))
        for line in (tmp_path / METRICS_FILE).read_text().splitlines():
            record = json.loads(line)
            assert "total_reward_mean" in record
            assert "target_posture_mean" in record

    def test_missing_metrics(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_metrics(str(tmp_path))


class TestEvaluation:
    """Deterministic trials"""

    def test_untrained_policy_never_recovers(self, tiny_config, tmp_path):
        policy = AfrPolicy(tiny_config.ppo.mode, tiny_config.network, np.random.default_rng(0))
        results = evaluate_policy(policy, tiny_config, [TerrainKind.FLAT, TerrainKind.STAIRS], trials=2, seed=1,
                                  trajectory_dir=str(tmp_path), label="AFR")
        assert [r.terrain for r in results] == [TerrainKind.FLAT, TerrainKind.STAIRS]
        assert all(r.success_rate == 0.0 and r.recovery_time is None for r in results)
        trajectory = tmp_path / "AFR_flat_trial0.jsonl"
        assert len(trajectory.read_text().splitlines()) > 0

    def test_evaluation_is_deterministic(self, tiny_config):
        policy = AfrPolicy(tiny_config.ppo.mode, tiny_config.network, np.random.default_rng(0))
        a = evaluate_policy(policy, tiny_config, [TerrainKind.FLAT], trials=1, seed=3)
        b = evaluate_policy(policy, tiny_config, [TerrainKind.FLAT], trials=1, seed=3)
        assert a == b
