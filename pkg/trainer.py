"""
PPO training for fall recovery

Rollout collection over a batch of recovery environments, GAE, the clipped
surrogate update with the mass regression loss, per-terrain curriculum,
metrics.jsonl, checkpoints with bit-exact resume, and deterministic evaluation.
"""

import json
import logging
import math
import os
import pickle
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

import quadsim
from quadsim import NumericalDivergence
from models import (
    EpisodeRecord,
    MetricsRecord,
    PpoConfig,
    RandomizationConfig,
    RunConfig,
    TerrainConfig,
    TerrainKind,
    TerrainResult,
    TerrainSpec,
    UpdateStats,
    config_hash,
)
from neural import (
    ACTION_DIM,
    LOG_STD_MAX,
    LOG_STD_MIN,
    Adam,
    AfrPolicy,
    CheckpointMismatchError,
    ObservationHistory,
    clip_grad_norm,
    gaussian_entropy,
    gaussian_log_prob,
    load_checkpoint,
    regression_loss,
    restore_optimizer,
    save_checkpoint,
)
from recovery_env import (
    MASS_DIM,
    PRIVILEGED_DIM,
    REWARD_TERMS,
    SCAN_DIM,
    WEIGHT_VECTOR,
    BatchEnv,
    RecoveryEnv,
    curriculum_update,
)

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
EPISODES_FILE = "episodes.jsonl"
LATEST_FILE = "latest"
DEBUG_DIR = "debug"
# back-to-back resets that may diverge while settling before one env gives up
MAX_RESET_ATTEMPTS = 20


class NonFiniteLoss(Exception):
    """A PPO minibatch produced a NaN or infinite loss"""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.dump_path = dump_path
        super().__init__(message)


class RolloutBuffer:
    """Fixed-capacity (T_roll, N) transition storage"""

    def __init__(self, t_roll: int, n_envs: int, history_dim: int):
        self.t_roll = t_roll
        self.n_envs = n_envs
        shape = (t_roll, n_envs)
        self.histories = np.zeros(shape + (history_dim,))
        self.privileged = np.zeros(shape + (PRIVILEGED_DIM,))
        self.scans = np.zeros(shape + (SCAN_DIM,))
        self.actions = np.zeros(shape + (ACTION_DIM,))
        self.log_probs = np.zeros(shape)
        self.values = np.zeros(shape)
        self.rewards = np.zeros(shape)
        self.dones = np.zeros(shape)
        self.masses = np.zeros(shape + (MASS_DIM,))
        self.mass_estimates = np.full(shape + (MASS_DIM,), np.nan)
        self.reward_terms = np.zeros(shape + (len(REWARD_TERMS),))
        self.bootstrap_values = np.zeros(n_envs)
        self.advantages = np.zeros(shape)
        self.returns = np.zeros(shape)
        self.step = 0

    def __len__(self) -> int:
        return self.t_roll * self.n_envs

    @property
    def full(self) -> bool:
        return self.step == self.t_roll

    def add(self, histories, privileged, scans, actions, log_probs, values, rewards, dones, masses, terms, mass_estimates=None):
        if self.full:
            raise IndexError("rollout buffer is full")
        t = self.step
        self.histories[t] = histories
        self.privileged[t] = privileged
        self.scans[t] = scans
        self.actions[t] = actions
        self.log_probs[t] = log_probs
        self.values[t] = values
        self.rewards[t] = rewards
        self.dones[t] = dones
        self.masses[t] = masses
        self.reward_terms[t] = terms
        if mass_estimates is not None:
            self.mass_estimates[t] = mass_estimates
        self.step += 1

    def finish(self, bootstrap_values: np.ndarray, gamma: float, lam: float):
        self.bootstrap_values = np.asarray(bootstrap_values, dtype=float)
        self.advantages, self.returns = compute_gae(
            self.rewards, self.values, self.dones, self.bootstrap_values, gamma, lam, normalize=True
        )

    def flatten(self) -> Dict[str, np.ndarray]:
        n = len(self)
        return {
            "histories": self.histories.reshape(n, -1),
            "privileged": self.privileged.reshape(n, -1),
            "scans": self.scans.reshape(n, -1),
            "actions": self.actions.reshape(n, -1),
            "log_probs": self.log_probs.reshape(n),
            "values": self.values.reshape(n),
            "advantages": self.advantages.reshape(n),
            "returns": self.returns.reshape(n),
            "masses": self.masses.reshape(n, -1),
        }


def compute_gae(rewards, values, dones, bootstrap_value, gamma: float, lam: float, normalize: bool = True):
    """
    Generalized advantage estimation along axis 0.

    Returns (advantages, returns); returns use the raw advantages, and the
    advantages are normalized over the whole batch when normalize is set.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    next_value = np.asarray(bootstrap_value, dtype=float)
    advantages = np.zeros_like(rewards)
    running = np.zeros_like(next_value)
    for t in reversed(range(rewards.shape[0])):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        advantages[t] = running
        next_value = values[t]
    returns = advantages + values
    if normalize:
        advantages = (advantages - advantages.mean()) / max(float(advantages.std()), 1e-8)
    return advantages, returns


class Curriculum:
    """Difficulty per terrain kind, driven by a trailing window of episode outcomes"""

    def __init__(self, config: TerrainConfig):
        self.config = config.curriculum
        self.specs = {kind: TerrainSpec(kind=kind, difficulty=config.initial_difficulty) for kind in config.kinds}
        self.windows = {kind: deque(maxlen=self.config.window) for kind in config.kinds}

    def spec(self, kind: TerrainKind) -> TerrainSpec:
        return self.specs[kind]

    def record(self, kind: TerrainKind, success: bool):
        self.windows[kind].append(bool(success))

    def update(self):
        if not self.config.enabled:
            return
        for kind, window in self.windows.items():
            if len(window) < self.config.min_episodes:
                continue
            rate = sum(window) / len(window)
            updated = curriculum_update(self.specs[kind], rate, self.config)
            if updated.difficulty != self.specs[kind].difficulty:
                logger.info("Curriculum %s: difficulty %.2f -> %.2f (success %.2f)",
                            kind.value, self.specs[kind].difficulty, updated.difficulty, rate)
                self.specs[kind] = updated
                window.clear()

    def difficulties(self) -> Dict[str, float]:
        return {kind.value: spec.difficulty for kind, spec in self.specs.items()}


def episode_seed(base_seed: int, env_index: int, episode: int) -> int:
    state = np.random.SeedSequence([base_seed % (1 << 63), env_index, episode]).generate_state(2)
    return (int(state[0]) << 31) | (int(state[1]) >> 1)


class RolloutCollector:
    """Environment batch plus the per-env history and latest privileged inputs"""

    def __init__(self, config: RunConfig, workers: int = 1):
        self.config = config
        n = config.ppo.n_envs
        self.kinds = list(config.terrain.kinds)
        self.curriculum = Curriculum(config.terrain)
        self.batch = BatchEnv([RecoveryEnv(config) for _ in range(n)], workers)
        self.histories = [ObservationHistory(config.network.history) for _ in range(n)]
        self.privileged = np.zeros((n, PRIVILEGED_DIM))
        self.scans = np.zeros((n, SCAN_DIM))
        self.episode_counts = [0] * n
        self.completed: List[EpisodeRecord] = []
        for i in range(n):
            self._reset_env(i)

    @property
    def envs(self) -> List[RecoveryEnv]:
        return self.batch.envs

    def kind_for(self, index: int) -> TerrainKind:
        return self.kinds[index % len(self.kinds)]

    def finish_episode(self, env: RecoveryEnv):
        record = env.episode_record()
        self.completed.append(record)
        self.curriculum.record(record.terrain, record.success)

    def _reset_env(self, index: int):
        env = self.envs[index]
        for _ in range(MAX_RESET_ATTEMPTS):
            seed = episode_seed(self.config.seed, index, self.episode_counts[index])
            self.episode_counts[index] += 1
            spec = self.curriculum.spec(self.kind_for(index)).model_copy(update={"seed": seed})
            observation = env.reset(seed, spec)
            if not env.terminated:
                break
            # diverged while settling; counts as a finished Diverged episode
            self.finish_episode(env)
        else:
            raise NumericalDivergence(
                f"env {index}: {MAX_RESET_ATTEMPTS} consecutive resets diverged while settling; check the robot config"
            )
        self.histories[index].reset()
        self.histories[index].push(observation.pack())
        self.privileged[index] = env.privileged().pack()
        self.scans[index] = env.height_scan().values

    def stacked_histories(self) -> np.ndarray:
        return np.stack([h.flat() for h in self.histories])

    def drain_episodes(self) -> List[EpisodeRecord]:
        done, self.completed = self.completed, []
        return done


def collect_rollout(policy: AfrPolicy, collector: RolloutCollector, t_roll: int, rng: np.random.Generator, ppo: PpoConfig) -> RolloutBuffer:
    """Step every env t_roll times with sampled actions, resetting finished episodes"""
    n = len(collector.envs)
    buffer = RolloutBuffer(t_roll, n, policy.history_dim)
    for _ in range(t_roll):
        histories = collector.stacked_histories()
        out = policy.act(histories)
        actions = out.mean + out.std * rng.standard_normal(out.mean.shape)
        log_probs = gaussian_log_prob(actions, out.mean, np.log(out.std))
        values, _ = policy.value(histories, collector.privileged, collector.scans)
        masses = np.stack([env.model.link_masses for env in collector.envs])
        privileged, scans = collector.privileged.copy(), collector.scans.copy()

        results = collector.batch.step(actions)
        rewards = np.array([r.reward.total for r in results])
        dones = np.array([float(r.status.terminated) for r in results])
        terms = np.stack([r.reward.values() for r in results]) * WEIGHT_VECTOR
        buffer.add(histories, privileged, scans, actions, log_probs, values, rewards, dones, masses, terms, out.m_hat)

        for i, result in enumerate(results):
            env = collector.envs[i]
            if result.status.terminated:
                collector.finish_episode(env)
                collector._reset_env(i)
            else:
                collector.histories[i].push(result.observation.pack())
                collector.privileged[i] = result.privileged.pack()
                collector.scans[i] = result.scan.values

    bootstrap, _ = policy.value(collector.stacked_histories(), collector.privileged, collector.scans)
    buffer.finish(bootstrap, ppo.gamma, ppo.lam)
    return buffer


def loss_and_gradients(policy: AfrPolicy, batch: Dict[str, np.ndarray], ppo: PpoConfig) -> Dict[str, float]:
    """Total PPO loss of one minibatch; leaves d(loss)/d(parameters) in the policy's gradient buffers"""
    policy.zero_grad()
    size = batch["actions"].shape[0]
    adv = batch["advantages"]

    out = policy.act(batch["histories"])
    log_std = np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX)
    log_probs = gaussian_log_prob(batch["actions"], out.mean, log_std)
    log_ratio = log_probs - batch["log_probs"]
    ratio = np.exp(log_ratio)
    lo, hi = 1.0 - ppo.clip_ratio, 1.0 + ppo.clip_ratio
    surr1 = ratio * adv
    surr2 = np.clip(ratio, lo, hi) * adv
    policy_loss = -float(np.mean(np.minimum(surr1, surr2)))

    values, value_cache = policy.value(batch["histories"], batch["privileged"], batch["scans"])
    value_loss = float(np.mean((values - batch["returns"]) ** 2))
    entropy = gaussian_entropy(log_std)

    reg_loss, grad_m_hat = 0.0, None
    if out.m_hat is not None:
        reg_loss, grad_m_hat = regression_loss(out.m_hat, batch["masses"])

    total = policy_loss + ppo.value_coef * value_loss - ppo.entropy_coef * entropy + ppo.regression_coef * reg_loss

    # gradient of the clipped surrogate with respect to the new log-probs
    inside = (ratio >= lo) & (ratio <= hi)
    active = np.where(surr1 <= surr2, 1.0, inside.astype(float))
    grad_logp = -adv * ratio * active / size

    std = np.exp(log_std)
    diff = batch["actions"] - out.mean
    grad_mean = grad_logp[:, None] * diff / std**2
    reg_grad = None if grad_m_hat is None else ppo.regression_coef * grad_m_hat
    policy.backward_policy(out.cache, grad_mean, reg_grad)

    z2 = (diff / std) ** 2
    grad_log_std = np.sum(grad_logp[:, None] * (z2 - 1.0), axis=0) - ppo.entropy_coef
    free = (policy.log_std >= LOG_STD_MIN) & (policy.log_std <= LOG_STD_MAX)
    policy.grad_log_std += grad_log_std * free

    policy.backward_value(value_cache, ppo.value_coef * 2.0 * (values - batch["returns"]) / size)

    return {
        "loss": total,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "regression_loss": reg_loss,
        "approx_kl": float(np.mean((ratio - 1.0) - log_ratio)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > ppo.clip_ratio)),
    }


def _dump_minibatch(batch: Dict[str, np.ndarray], debug_dir: Optional[str], tag: str) -> Optional[str]:
    if debug_dir is None:
        return None
    os.makedirs(debug_dir, exist_ok=True)
    path = os.path.join(debug_dir, f"nonfinite_{tag}.npz")
    np.savez(path, **batch)
    return path


def update(
    policy: AfrPolicy,
    optimizer: Adam,
    buffer: RolloutBuffer,
    ppo: PpoConfig,
    rng: np.random.Generator,
    debug_dir: Optional[str] = None,
) -> UpdateStats:
    """Epochs of minibatch PPO; raises NonFiniteLoss before touching parameters on a bad minibatch"""
    data = buffer.flatten()
    size = len(buffer)
    batches = max(1, min(ppo.minibatches, size))
    optimizer.lr = ppo.learning_rate
    sums: Dict[str, float] = {}
    count = 0

    for epoch in range(ppo.epochs):
        order = rng.permutation(size)
        for k, index in enumerate(np.array_split(order, batches)):
            batch = {key: value[index] for key, value in data.items()}
            parts = loss_and_gradients(policy, batch, ppo)
            if not all(math.isfinite(v) for v in parts.values()):
                path = _dump_minibatch(batch, debug_dir, f"epoch{epoch}_mb{k}")
                logger.error("Non-finite loss in epoch %d minibatch %d; dumped to %s", epoch, k, path)
                raise NonFiniteLoss(f"non-finite loss in epoch {epoch} minibatch {k}", path)
            grads = policy.gradients()
            parts["grad_norm"] = clip_grad_norm(grads, ppo.max_grad_norm)
            optimizer.step(grads)
            policy.clamp_log_std()
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value
            count += 1

    mean = {key: value / count for key, value in sums.items()}
    return UpdateStats(
        policy_loss=mean["policy_loss"],
        value_loss=mean["value_loss"],
        entropy=mean["entropy"],
        regression_loss=mean["regression_loss"],
        approx_kl=mean["approx_kl"],
        clip_fraction=mean["clip_fraction"],
        grad_norm=mean["grad_norm"],
    )


def _env_mean_std(per_step: np.ndarray):
    per_env = per_step.mean(axis=0)
    return float(per_env.mean()), float(per_env.std())


def build_metrics(iteration: int, config: RunConfig, buffer: RolloutBuffer, stats: UpdateStats,
                  episodes: Sequence[EpisodeRecord], curriculum: Curriculum) -> MetricsRecord:
    total_mean, total_std = _env_mean_std(buffer.rewards)
    posture = buffer.reward_terms[..., REWARD_TERMS.index("target_posture")]
    posture_mean, posture_std = _env_mean_std(posture)
    term_means = buffer.reward_terms.reshape(-1, len(REWARD_TERMS)).mean(axis=0)

    success_rate = recovery_time = None
    if episodes:
        successes = [e for e in episodes if e.success]
        success_rate = len(successes) / len(episodes)
        if successes:
            recovery_time = float(np.mean([e.recovery_time for e in successes]))

    mass_error = mass_baseline = None
    if not np.isnan(buffer.mass_estimates).any():
        trunk = buffer.masses[..., 0]
        mass_error = float(np.mean(np.abs(buffer.mass_estimates[..., 0] - trunk)))
        mass_baseline = float(np.mean(np.abs(trunk.mean() - trunk)))

    return MetricsRecord(
        iteration=iteration,
        config_hash=config_hash(config),
        mode=config.ppo.mode,
        total_reward_mean=total_mean,
        total_reward_std=total_std,
        target_posture_mean=posture_mean,
        target_posture_std=posture_std,
        reward_terms={name: float(v) for name, v in zip(REWARD_TERMS, term_means)},
        policy_loss=stats.policy_loss,
        value_loss=stats.value_loss,
        entropy=stats.entropy,
        loss_reg=stats.regression_loss,
        approx_kl=stats.approx_kl,
        clip_fraction=stats.clip_fraction,
        grad_norm=stats.grad_norm,
        episodes=len(episodes),
        success_rate=success_rate,
        recovery_time=recovery_time,
        mass_error=mass_error,
        mass_error_baseline=mass_baseline,
        curriculum=curriculum.difficulties(),
    )


@dataclass
class RuntimeState:
    """Everything besides parameters and Adam moments that a resumed run needs"""

    iteration: int
    rng: np.random.Generator
    collector: RolloutCollector


class Trainer:
    """Collect, estimate advantages, update; writes metrics and checkpoints into run_dir"""

    def __init__(self, config: RunConfig, run_dir: str, workers: Optional[int] = None,
                 on_iteration: Optional[Callable[[MetricsRecord], None]] = None):
        self.config = config
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.workers = workers or config.ppo.workers
        self.on_iteration = on_iteration
        self.config_hash = config_hash(config)
        self.metrics_path = self.run_dir / METRICS_FILE
        self.episodes_path = self.run_dir / EPISODES_FILE

        rng = np.random.default_rng(config.seed)
        self.policy = AfrPolicy(config.ppo.mode, config.network, np.random.default_rng(rng.integers(1 << 63)))
        self.optimizer = Adam(self.policy.parameters(), lr=config.ppo.learning_rate)
        self.runtime: Optional[RuntimeState] = None
        if not self._resume():
            self.runtime = RuntimeState(0, rng, RolloutCollector(config, self.workers))
            self.metrics_path.write_text("")
            self.episodes_path.write_text("")

    @property
    def iteration(self) -> int:
        return self.runtime.iteration

    def _resume(self) -> bool:
        latest = self.run_dir / LATEST_FILE
        if not latest.is_file():
            return False
        path = self.run_dir / latest.read_text().strip()
        checkpoint = load_checkpoint(str(path))
        if checkpoint.meta.get("config_hash") != self.config_hash:
            raise CheckpointMismatchError(
                f"{path} was written with config {checkpoint.meta.get('config_hash')}, current config is {self.config_hash}"
            )
        self.policy.load_state_dict(checkpoint.params)
        restore_optimizer(self.optimizer, self.policy, checkpoint)
        self.runtime = pickle.loads(checkpoint.runtime)
        collector = self.runtime.collector
        collector.batch = BatchEnv(collector.batch.envs, self.workers)
        _truncate_jsonl(self.metrics_path, self.iteration)
        _truncate_jsonl(self.episodes_path, self.iteration)
        logger.info("Resumed %s from %s at iteration %d", self.run_dir, path.name, self.iteration)
        return True

    def save(self) -> str:
        name = f"ckpt_{self.iteration}.bin"
        path = self.run_dir / name
        meta = {"config_hash": self.config_hash, "iteration": self.iteration,
                "config": self.config.model_dump(mode="json"),
                "curriculum": self.runtime.collector.curriculum.difficulties()}
        save_checkpoint(str(path), self.policy, self.optimizer, meta, pickle.dumps(self.runtime))
        (self.run_dir / LATEST_FILE).write_text(name + "\n")
        return str(path)

    def run_iteration(self) -> MetricsRecord:
        ppo = self.config.ppo
        runtime = self.runtime
        buffer = collect_rollout(self.policy, runtime.collector, ppo.t_roll, runtime.rng, ppo)
        stats = update(self.policy, self.optimizer, buffer, ppo, runtime.rng, str(self.run_dir / DEBUG_DIR))
        runtime.iteration += 1
        episodes = runtime.collector.drain_episodes()
        record = build_metrics(runtime.iteration, self.config, buffer, stats, episodes, runtime.collector.curriculum)
        runtime.collector.curriculum.update()

        with open(self.metrics_path, "a") as f:
            f.write(record.model_dump_json() + "\n")
        with open(self.episodes_path, "a") as f:
            for episode in episodes:
                f.write(json.dumps({"iteration": record.iteration, **episode.model_dump(mode="json")}) + "\n")
        logger.info(
            "iter %d reward %.3f +/- %.3f posture %.3f loss_reg %.4f episodes %d success %s",
            record.iteration, record.total_reward_mean, record.total_reward_std, record.target_posture_mean,
            record.loss_reg, record.episodes, "-" if record.success_rate is None else f"{record.success_rate:.2f}",
        )
        if self.on_iteration:
            self.on_iteration(record)
        return record

    def train(self, stop_after: Optional[int] = None) -> str:
        """Run to total_iterations (or stop_after more iterations); returns the last checkpoint path"""
        ppo = self.config.ppo
        done = 0
        checkpoint = None
        while self.iteration < ppo.total_iterations and (stop_after is None or done < stop_after):
            self.run_iteration()
            done += 1
            checkpoint = None
            if self.iteration % ppo.checkpoint_interval == 0:
                checkpoint = self.save()
        if checkpoint is None:
            checkpoint = self.save()
        self.runtime.collector.batch.close()
        return checkpoint


def _truncate_jsonl(path: Path, iteration: int):
    """Drop metrics lines past the resumed iteration"""
    if not path.is_file():
        path.write_text("")
        return
    kept = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        if record.get("iteration", 0) <= iteration:
            kept.append(line)
    path.write_text("".join(line + "\n" for line in kept))


def train(config: RunConfig, run_dir: str, stop_after: Optional[int] = None, workers: Optional[int] = None,
          on_iteration: Optional[Callable[[MetricsRecord], None]] = None) -> str:
    return Trainer(config, run_dir, workers, on_iteration).train(stop_after)


def evaluation_randomization(randomize_payload: bool) -> RandomizationConfig:
    """Eval keeps nominal dynamics except, optionally, the payload"""
    return RandomizationConfig(
        enabled=randomize_payload,
        randomize_payload=True,
        randomize_masses=False,
        randomize_gains=False,
        randomize_com=False,
        randomize_friction=False,
    )


def evaluate_policy(
    policy: AfrPolicy,
    config: RunConfig,
    kinds: Sequence[TerrainKind],
    trials: int,
    seed: int,
    difficulties: Optional[Dict[str, float]] = None,
    trajectory_dir: Optional[str] = None,
    label: str = "",
) -> List[TerrainResult]:
    """Deterministic (mean-action) trials per terrain kind"""
    difficulties = difficulties or {}
    env = RecoveryEnv(config)
    env.randomization = evaluation_randomization(config.eval.randomize_payload)
    history = ObservationHistory(config.network.history)
    results = []
    for kind_index, kind in enumerate(kinds):
        difficulty = difficulties.get(kind.value, config.terrain.initial_difficulty)
        successes, times = 0, []
        for trial in range(trials):
            trial_seed = episode_seed(seed, kind_index, trial)
            env.record_trajectory = trajectory_dir is not None and trial == 0
            observation = env.reset(trial_seed, TerrainSpec(kind=kind, difficulty=difficulty, seed=trial_seed))
            history.reset()
            history.push(observation.pack())
            while not env.terminated:
                action = policy.act(history.flat()).mean[0]
                result = env.step(action)
                history.push(result.observation.pack())
            record = env.episode_record()
            if record.success:
                successes += 1
                times.append(record.recovery_time)
            if env.record_trajectory:
                os.makedirs(trajectory_dir, exist_ok=True)
                stem = f"{label}_{kind.value}" if label else kind.value
                quadsim.write_trajectory(env.trajectory, os.path.join(trajectory_dir, f"{stem}_trial0.jsonl"))
        result = TerrainResult(
            terrain=kind,
            trials=trials,
            success_rate=successes / trials,
            recovery_time=float(np.mean(times)) if times else None,
        )
        logger.info("eval %s %s: success %.2f time %s", label or "policy", kind.value, result.success_rate,
                    "-" if result.recovery_time is None else f"{result.recovery_time:.3f}")
        results.append(result)
    return results


def load_metrics(run_dir: str) -> List[MetricsRecord]:
    path = Path(run_dir) / METRICS_FILE
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no metrics recorded")
    return [MetricsRecord.model_validate_json(line) for line in path.read_text().splitlines() if line.strip()]
