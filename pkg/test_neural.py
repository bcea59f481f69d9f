import math

import numpy as np
import pytest

from models import NetworkConfig, TrainingMode
from neural import (
    ACTION_DIM,
    LOG_STD_MAX,
    LOG_STD_MIN,
    Adam,
    AfrPolicy,
    CheckpointMismatchError,
    Mlp,
    ObservationHistory,
    clip_grad_norm,
    gaussian_entropy,
    gaussian_log_prob,
    load_checkpoint,
    policy_from_checkpoint,
    regression_loss,
    restore_optimizer,
    save_checkpoint,
)
from recovery_env import OBS_DIM, PRIVILEGED_DIM, SCAN_DIM

SMALL = NetworkConfig(history=3, latent_dim=4, heightmap_dim=6, estimator_hidden=[10], heightmap_hidden=[7],
                      actor_hidden=[9], critic_hidden=[8])


def batch_inputs(policy, rng, n=3):
    return (
        rng.normal(size=(n, policy.history_dim)),
        rng.normal(size=(n, PRIVILEGED_DIM)),
        rng.uniform(-1, 1, size=(n, SCAN_DIM)),
    )


def check_gradients(policy, loss_fn, backward_fn, rng, samples=20):
    """Compare accumulated gradients against central differences on sampled entries"""
    policy.zero_grad()
    backward_fn()
    params = [(name, p, g.copy()) for name, p, g in policy.named_parameters() if name != "log_std"]
    eps = 1e-6
    checked = 0
    for name, p, g in params:
        flat = p.reshape(-1)
        grad = g.reshape(-1)
        for idx in rng.choice(flat.size, size=min(samples, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + eps
            up = loss_fn()
            flat[idx] = old - eps
            down = loss_fn()
            flat[idx] = old
            numeric = (up - down) / (2 * eps)
            assert grad[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-6), name
            checked += 1
    return checked


class TestMlp:
    """Dense network basics"""

    def test_batched_equals_single(self):
        rng = np.random.default_rng(0)
        mlp = Mlp([5, 8, 3], rng)
        x = rng.normal(size=(4, 5))
        batched = mlp(x)
        for i in range(4):
            assert mlp(x[i]) == pytest.approx(batched[i])

    def test_rejects_single_size(self):
        with pytest.raises(ValueError):
            Mlp([5])

    def test_input_gradient(self):
        rng = np.random.default_rng(1)
        mlp = Mlp([4, 6, 2], rng)
        x = rng.normal(size=(1, 4))
        c = rng.normal(size=(1, 2))
        _, cache = mlp.forward(x)
        grad = mlp.backward(cache, c)
        eps = 1e-6
        for j in range(4):
            dx = np.zeros_like(x)
            dx[0, j] = eps
            numeric = (np.sum(c * mlp(x + dx)) - np.sum(c * mlp(x - dx))) / (2 * eps)
            assert grad[0, j] == pytest.approx(numeric, rel=1e-4, abs=1e-6)


class TestPolicyShapes:
    """Sub-network wiring per mode"""

    def test_afr_dimensions(self):
        policy = AfrPolicy(TrainingMode.AFR, NetworkConfig())
        sizes = policy.layer_sizes()
        assert sizes["estimator"][0] == 210
        assert sizes["estimator"][-1] == 20
        assert sizes["actor"][0] == 62
        assert sizes["critic"][0] == 110
        assert sizes["heightmap"] == [SCAN_DIM, 64, 32]

    def test_afr_raw_dimensions(self):
        sizes = AfrPolicy(TrainingMode.AFR_RAW, NetworkConfig()).layer_sizes()
        assert "heightmap" not in sizes
        assert sizes["critic"][0] == 265
        assert sizes["actor"][0] == 62

    def test_ppo_dimensions(self):
        sizes = AfrPolicy(TrainingMode.PPO, NetworkConfig()).layer_sizes()
        assert set(sizes) == {"actor", "critic"}
        assert sizes["actor"][0] == 42
        assert sizes["critic"][0] == 42
        assert sizes["actor"][-1] == ACTION_DIM

    def test_zero_parameters(self):
        policy = AfrPolicy(TrainingMode.AFR, SMALL)
        for _, p, _ in policy.named_parameters():
            if p is not policy.log_std:
                p.fill(0.0)
        rng = np.random.default_rng(0)
        history, privileged, scan = batch_inputs(policy, rng)
        out = policy.act(history)
        assert out.m_hat == pytest.approx(np.full((3, 4), math.log(2.0)))
        assert out.mean == pytest.approx(np.zeros((3, ACTION_DIM)))
        encoded, _ = policy.heightmap_forward(scan)
        assert encoded == pytest.approx(np.zeros((3, SMALL.heightmap_dim)))
        value, _ = policy.value(history, privileged, scan)
        assert value == pytest.approx(np.zeros(3))

    def test_masses_are_positive(self):
        policy = AfrPolicy(TrainingMode.AFR, SMALL, np.random.default_rng(2))
        history = np.random.default_rng(3).normal(scale=10.0, size=(16, policy.history_dim))
        assert np.all(policy.act(history).m_hat > 0)


class TestGradients:
    """Backprop against finite differences"""

    @pytest.mark.parametrize("mode", [TrainingMode.AFR, TrainingMode.AFR_RAW, TrainingMode.PPO])
    def test_policy_gradients(self, mode):
        rng = np.random.default_rng(4)
        policy = AfrPolicy(mode, SMALL, rng)
        history, _, _ = batch_inputs(policy, rng)
        c_mean = rng.normal(size=(3, ACTION_DIM))
        c_mass = rng.normal(size=(3, 4)) if policy.estimator is not None else None

        def loss():
            out = policy.act(history)
            total = float(np.sum(c_mean * out.mean))
            if c_mass is not None:
                total += float(np.sum(c_mass * out.m_hat))
            return total

        def backward():
            out = policy.act(history)
            policy.backward_policy(out.cache, c_mean, c_mass)

        assert check_gradients(policy, loss, backward, rng) > 0

    @pytest.mark.parametrize("mode", [TrainingMode.AFR, TrainingMode.AFR_RAW, TrainingMode.PPO])
    def test_value_gradients(self, mode):
        rng = np.random.default_rng(5)
        policy = AfrPolicy(mode, SMALL, rng)
        history, privileged, scan = batch_inputs(policy, rng)
        c = rng.normal(size=3)

        def loss():
            value, _ = policy.value(history, privileged, scan)
            return float(np.sum(c * value))

        def backward():
            _, cache = policy.value(history, privileged, scan)
            policy.backward_value(cache, c)

        assert check_gradients(policy, loss, backward, rng) > 0

    def test_mass_gradient_reaches_estimator_only(self):
        rng = np.random.default_rng(6)
        policy = AfrPolicy(TrainingMode.AFR, SMALL, rng)
        history, _, _ = batch_inputs(policy, rng)
        target = rng.uniform(0.5, 5.0, size=(3, 4))

        def loss():
            return regression_loss(policy.act(history).m_hat, target)[0]

        def backward():
            out = policy.act(history)
            _, grad = regression_loss(out.m_hat, target)
            policy.backward_mass(out.cache, grad)

        check_gradients(policy, loss, backward, rng)
        assert np.all(policy.actor.grad_weights[0] == 0.0)
        assert np.all(policy.critic.grad_weights[0] == 0.0)


class TestDistributions:
    """Gaussian helpers and losses"""

    def test_log_prob_at_mean(self):
        mean = np.random.default_rng(0).normal(size=ACTION_DIM)
        assert gaussian_log_prob(mean, mean, np.zeros(ACTION_DIM)) == pytest.approx(-6.0 * math.log(2 * math.pi))

    def test_log_prob_matches_density(self):
        log_std = np.full(ACTION_DIM, math.log(0.5))
        action = np.full(ACTION_DIM, 0.5)
        per_dim = -0.5 * 1.0 - math.log(0.5) - 0.5 * math.log(2 * math.pi)
        assert gaussian_log_prob(action, np.zeros(ACTION_DIM), log_std) == pytest.approx(12 * per_dim)

    def test_entropy(self):
        assert gaussian_entropy(np.zeros(ACTION_DIM)) == pytest.approx(6.0 * (1.0 + math.log(2 * math.pi)))

    def test_regression_loss(self):
        loss, grad = regression_loss(np.array([[1.0, 2.0, 3.0, 4.0]]), np.array([[1.0, 2.0, 3.0, 4.0]]))
        assert loss == 0.0
        assert np.all(grad == 0.0)
        loss, grad = regression_loss(np.array([[2.0, 2.0, 3.0, 4.0]]), np.array([[1.0, 2.0, 3.0, 4.0]]))
        assert loss == pytest.approx(0.25)
        assert grad[0, 0] == pytest.approx(0.5)


class TestHistory:
    """Observation history buffer"""

    def test_oldest_first(self):
        history = ObservationHistory(length=3, dim=2)
        for k in range(1, 5):
            history.push(np.full(2, float(k)))
        assert history.flat().tolist() == [2.0, 2.0, 3.0, 3.0, 4.0, 4.0]

    def test_reset_zeroes(self):
        history = ObservationHistory(length=2, dim=OBS_DIM)
        history.push(np.ones(OBS_DIM))
        history.reset()
        assert np.all(history.flat() == 0.0)
        assert history.flat().shape == (2 * OBS_DIM,)


class TestOptimizer:
    """Adam, clipping and log-std bounds"""

    def test_zero_learning_rate_keeps_parameters(self):
        policy = AfrPolicy(TrainingMode.AFR, SMALL, np.random.default_rng(7))
        before = policy.state_dict()
        optimizer = Adam(policy.parameters(), lr=0.0)
        for g in policy.gradients():
            g.fill(1.0)
        optimizer.step(policy.gradients())
        after = policy.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert optimizer.t == 1

    def test_adam_first_step_is_lr_sized(self):
        p = np.array([1.0, -1.0])
        Adam([p], lr=0.1).step([np.array([3.0, -0.5])])
        assert p == pytest.approx([0.9, -0.9])

    def test_clip_grad_norm(self):
        grads = [np.array([3.0]), np.array([4.0])]
        assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        assert grads[0][0] == pytest.approx(0.6)
        assert grads[1][0] == pytest.approx(0.8)

    def test_small_norm_untouched(self):
        grads = [np.array([0.3, 0.4])]
        clip_grad_norm(grads, 1.0)
        assert grads[0] == pytest.approx([0.3, 0.4])

    def test_log_std_clamp(self):
        policy = AfrPolicy(TrainingMode.PPO, SMALL)
        policy.log_std[:6] = 10.0
        policy.log_std[6:] = -10.0
        out = policy.act(np.zeros((1, policy.history_dim)))
        assert out.std[0, 0] == pytest.approx(math.exp(LOG_STD_MAX))
        assert out.std[0, 11] == pytest.approx(math.exp(LOG_STD_MIN))
        policy.clamp_log_std()
        assert policy.log_std.max() == LOG_STD_MAX
        assert policy.log_std.min() == LOG_STD_MIN


class TestCheckpoint:
    """npz checkpoint container"""

    def test_round_trip_is_exact(self, tmp_path):
        policy = AfrPolicy(TrainingMode.AFR, SMALL, np.random.default_rng(8))
        optimizer = Adam(policy.parameters(), lr=1e-3)
        for g in policy.gradients():
            g[...] = np.random.default_rng(9).normal(size=g.shape)
        optimizer.step(policy.gradients())
        path = tmp_path / "ckpt.bin"
        save_checkpoint(str(path), policy, optimizer, {"iteration": 3}, runtime=b"opaque")

        checkpoint = load_checkpoint(str(path))
        assert checkpoint.meta["iteration"] == 3
        assert checkpoint.meta["mode"] == "afr"
        assert checkpoint.meta["adam_step"] == 1
        assert checkpoint.runtime == b"opaque"

        restored = policy_from_checkpoint(checkpoint, SMALL)
        original = policy.state_dict()
        for name, value in restored.state_dict().items():
            assert np.array_equal(value, original[name]), name

        fresh = Adam(restored.parameters(), lr=1e-3)
        restore_optimizer(fresh, restored, checkpoint)
        assert fresh.t == 1
        assert all(np.array_equal(a, b) for a, b in zip(fresh.v, optimizer.v))

    def test_shape_mismatch_names_layer(self, tmp_path):
        policy = AfrPolicy(TrainingMode.AFR, SMALL)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(str(path), policy, None, {})
        wider = SMALL.model_copy(update={"actor_hidden": [11]})
        with pytest.raises(CheckpointMismatchError, match="actor.0.weight"):
            policy_from_checkpoint(load_checkpoint(str(path)), wider)

    def test_mode_mismatch_reports_layers(self):
        afr = AfrPolicy(TrainingMode.AFR, SMALL)
        ppo = AfrPolicy(TrainingMode.PPO, SMALL)
        with pytest.raises(CheckpointMismatchError, match="estimator"):
            ppo.load_state_dict(afr.state_dict())
