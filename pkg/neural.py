"""
Networks for the recovery policy

Plain numpy MLPs with exact backpropagation, the estimator / heightmap encoder /
actor / critic wiring for the three training modes, Gaussian action helpers, Adam,
and the checkpoint container.
"""

import io
import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import NetworkConfig, TrainingMode
from recovery_env import MASS_DIM, OBS_DIM, PRIVILEGED_DIM, SCAN_DIM

logger = logging.getLogger(__name__)

ACTION_DIM = 12
LOG_STD_MIN = -4.0
LOG_STD_MAX = 1.0
CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


class CheckpointMismatchError(Exception):
    """Checkpoint parameters do not fit the network they are loaded into"""


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return np.ascontiguousarray(gain * q[:fan_in, :fan_out])


class Mlp:
    """ELU hidden layers, linear output; weights are (fan_in, fan_out)"""

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None, output_gain: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        rng = rng or np.random.default_rng(0)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            self.weights.append(_orthogonal(rng, fan_in, fan_out, output_gain if last else math.sqrt(2.0)))
            self.biases.append(np.zeros(fan_out))
        self.grad_weights = [np.zeros_like(w) for w in self.weights]
        self.grad_biases = [np.zeros_like(b) for b in self.biases]

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray):
        """Returns (output, cache); the cache feeds backward"""
        h = np.atleast_2d(np.asarray(x, dtype=float))
        inputs, pre = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            pre.append(z)
            h = z if i == len(self.weights) - 1 else elu(z)
        return h, (inputs, pre)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(x)
        return out[0] if np.ndim(x) == 1 else out

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients and return d(loss)/d(input)"""
        inputs, pre = cache
        g = np.atleast_2d(grad_out)
        for i in reversed(range(len(self.weights))):
            if i != len(self.weights) - 1:
                g = g * elu_grad(pre[i])
            self.grad_weights[i] += inputs[i].T @ g
            self.grad_biases[i] += g.sum(axis=0)
            g = g @ self.weights[i].T
        return g

    def zero_grad(self):
        for g in self.grad_weights + self.grad_biases:
            g.fill(0.0)

    def named_parameters(self, prefix: str):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.{i}.weight", w, self.grad_weights[i]
            yield f"{prefix}.{i}.bias", b, self.grad_biases[i]


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Sum of per-dimension Gaussian log densities"""
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z**2 - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std + 0.5 * (1.0 + LOG_2PI)))


def regression_loss(m_hat: np.ndarray, m_true: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared mass error and its gradient with respect to m_hat"""
    diff = np.asarray(m_hat, dtype=float) - np.asarray(m_true, dtype=float)
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


class ObservationHistory:
    """The last H observations, oldest first, zero-padded after reset"""

    def __init__(self, length: int = 5, dim: int = OBS_DIM):
        self.length = length
        self.dim = dim
        self.frames = np.zeros((length, dim))

    def reset(self):
        self.frames.fill(0.0)

    def push(self, observation: np.ndarray):
        self.frames = np.roll(self.frames, -1, axis=0)
        self.frames[-1] = observation

    def flat(self) -> np.ndarray:
        return self.frames.reshape(-1).copy()


@dataclass
class PolicyOutput:
    mean: np.ndarray
    std: np.ndarray
    m_hat: Optional[np.ndarray]
    cache: dict


class AfrPolicy:
    """
    Estimator, heightmap encoder, actor and critic for one training mode.

    AFR: actor(o, m_hat, z) and critic(o, eta, encoded scan).
    AFR_RAW: as AFR, but the critic reads the raw 187-point scan.
    PPO: actor(o) and critic(o) on the single current observation.
    """

    def __init__(self, mode: TrainingMode = TrainingMode.AFR, config: Optional[NetworkConfig] = None, rng: Optional[np.random.Generator] = None):
        self.mode = TrainingMode(mode)
        self.config = config or NetworkConfig()
        rng = rng or np.random.default_rng(0)
        cfg = self.config
        self.history_dim = cfg.history * OBS_DIM

        self.estimator: Optional[Mlp] = None
        self.heightmap: Optional[Mlp] = None
        if self.mode in (TrainingMode.AFR, TrainingMode.AFR_RAW):
            self.estimator = Mlp([self.history_dim, *cfg.estimator_hidden, MASS_DIM + cfg.latent_dim], rng)
            actor_in = OBS_DIM + MASS_DIM + cfg.latent_dim
        else:
            actor_in = OBS_DIM

        if self.mode == TrainingMode.AFR:
            self.heightmap = Mlp([SCAN_DIM, *cfg.heightmap_hidden, cfg.heightmap_dim], rng)
            critic_in = OBS_DIM + PRIVILEGED_DIM + cfg.heightmap_dim
        elif self.mode == TrainingMode.AFR_RAW:
            critic_in = OBS_DIM + PRIVILEGED_DIM + SCAN_DIM
        else:
            critic_in = OBS_DIM

        self.actor = Mlp([actor_in, *cfg.actor_hidden, ACTION_DIM], rng, output_gain=0.01)
        self.critic = Mlp([critic_in, *cfg.critic_hidden, 1], rng)
        self.log_std = np.full(ACTION_DIM, cfg.init_log_std)
        self.grad_log_std = np.zeros(ACTION_DIM)

    def modules(self) -> Dict[str, Mlp]:
        named = {"estimator": self.estimator, "heightmap": self.heightmap, "actor": self.actor, "critic": self.critic}
        return {name: mlp for name, mlp in named.items() if mlp is not None}

    def layer_sizes(self) -> Dict[str, List[int]]:
        return {name: mlp.sizes for name, mlp in self.modules().items()}

    def named_parameters(self):
        """(name, parameter, gradient) in a fixed order"""
        for name, mlp in self.modules().items():
            yield from mlp.named_parameters(name)
        yield "log_std", self.log_std, self.grad_log_std

    def parameters(self) -> List[np.ndarray]:
        return [p for _, p, _ in self.named_parameters()]

    def gradients(self) -> List[np.ndarray]:
        return [g for _, _, g in self.named_parameters()]

    def zero_grad(self):
        for g in self.gradients():
            g.fill(0.0)

    def clamp_log_std(self):
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    # -- forward passes ----------------------------------------------------------

    def estimator_forward(self, history: np.ndarray):
        """(m_hat, z, cache); m_hat goes through softplus so it stays positive"""
        out, cache = self.estimator.forward(history)
        return softplus(out[:, :MASS_DIM]), out[:, MASS_DIM:], (cache, out)

    def heightmap_forward(self, scan: np.ndarray):
        out, cache = self.heightmap.forward(scan)
        return out, cache

    def actor_forward(self, observation: np.ndarray, m_hat: Optional[np.ndarray] = None, z: Optional[np.ndarray] = None):
        parts = [np.atleast_2d(observation)]
        if m_hat is not None:
            parts += [np.atleast_2d(m_hat), np.atleast_2d(z)]
        mean, cache = self.actor.forward(np.concatenate(parts, axis=1))
        std = np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))
        return mean, np.broadcast_to(std, mean.shape).copy(), cache

    def critic_forward(self, observation: np.ndarray, privileged: Optional[np.ndarray] = None, terrain_input: Optional[np.ndarray] = None):
        """terrain_input is the encoded scan (AFR) or the raw scan (AFR_RAW)"""
        parts = [np.atleast_2d(observation)]
        if self.mode != TrainingMode.PPO:
            parts += [np.atleast_2d(privileged), np.atleast_2d(terrain_input)]
        value, cache = self.critic.forward(np.concatenate(parts, axis=1))
        return value[:, 0], cache

    @staticmethod
    def current_observation(history: np.ndarray) -> np.ndarray:
        return np.atleast_2d(history)[:, -OBS_DIM:]

    def act(self, history: np.ndarray) -> PolicyOutput:
        """Action distribution from the observation history (batched)"""
        history = np.atleast_2d(history)
        obs = self.current_observation(history)
        cache = {}
        m_hat = z = None
        if self.estimator is not None:
            m_hat, z, cache["estimator"] = self.estimator_forward(history)
        mean, std, cache["actor"] = self.actor_forward(obs, m_hat, z)
        return PolicyOutput(mean, std, m_hat, cache)

    def value(self, history: np.ndarray, privileged: np.ndarray, scan: np.ndarray):
        obs = self.current_observation(history)
        cache = {}
        terrain_input = None
        if self.mode == TrainingMode.AFR:
            terrain_input, cache["heightmap"] = self.heightmap_forward(scan)
        elif self.mode == TrainingMode.AFR_RAW:
            terrain_input = np.atleast_2d(scan)
        value, cache["critic"] = self.critic_forward(obs, privileged, terrain_input)
        return value, cache

    # -- backward passes ---------------------------------------------------------

    def backward_policy(self, cache: dict, grad_mean: np.ndarray, grad_m_hat: Optional[np.ndarray] = None):
        """Backprop through actor and estimator; grad_m_hat adds a direct mass-head gradient"""
        grad_in = self.actor.backward(cache["actor"], grad_mean)
        if self.estimator is None:
            return
        est_cache, raw = cache["estimator"]
        g_m = grad_in[:, OBS_DIM:OBS_DIM + MASS_DIM]
        if grad_m_hat is not None:
            g_m = g_m + grad_m_hat
        grad_out = np.concatenate([g_m * sigmoid(raw[:, :MASS_DIM]), grad_in[:, OBS_DIM + MASS_DIM:]], axis=1)
        self.estimator.backward(est_cache, grad_out)

    def backward_mass(self, cache: dict, grad_m_hat: np.ndarray):
        """Gradient of a loss on m_hat alone, into the estimator"""
        est_cache, raw = cache["estimator"]
        grad_out = np.zeros_like(raw)
        grad_out[:, :MASS_DIM] = grad_m_hat * sigmoid(raw[:, :MASS_DIM])
        self.estimator.backward(est_cache, grad_out)

    def backward_value(self, cache: dict, grad_value: np.ndarray):
        grad_in = self.critic.backward(cache["critic"], np.asarray(grad_value).reshape(-1, 1))
        if self.mode == TrainingMode.AFR:
            self.heightmap.backward(cache["heightmap"], grad_in[:, OBS_DIM + PRIVILEGED_DIM:])

    # -- state ---------------------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.copy() for name, p, _ in self.named_parameters()}

    def load_state_dict(self, params: Dict[str, np.ndarray]):
        own = {name: p for name, p, _ in self.named_parameters()}
        missing = sorted(set(own) - set(params))
        unexpected = sorted(set(params) - set(own))
        if missing or unexpected:
            raise CheckpointMismatchError(f"layer set differs: missing {missing}, unexpected {unexpected}")
        for name, target in own.items():
            if params[name].shape != target.shape:
                raise CheckpointMismatchError(
                    f"layer {name}: checkpoint shape {params[name].shape} != network shape {target.shape}"
                )
        for name, target in own.items():
            target[...] = params[name]


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global norm of at most max_norm; returns the norm before clipping"""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Checkpoint:
    meta: dict
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray]
    adam_v: Dict[str, np.ndarray]
    runtime: bytes


def save_checkpoint(path: str, policy: AfrPolicy, optimizer: Optional[Adam], meta: dict, runtime: bytes = b""):
    """Write an npz container: metadata JSON, parameters, Adam moments and opaque runtime state"""
    names = [name for name, _, _ in policy.named_parameters()]
    meta = dict(meta, version=CHECKPOINT_VERSION, mode=policy.mode.value, layer_sizes=policy.layer_sizes(),
                adam_step=optimizer.t if optimizer else 0)
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
              "runtime": np.frombuffer(runtime, dtype=np.uint8)}
    for name, p in zip(names, policy.parameters()):
        arrays[f"param/{name}"] = p
    if optimizer is not None:
        for name, m, v in zip(names, optimizer.m, optimizer.v):
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    with open(path, "wb") as f:
        f.write(buffer.getvalue())
    logger.info("Saved checkpoint %s", path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        data = np.load(io.BytesIO(f.read()), allow_pickle=False)
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointMismatchError(f"unsupported checkpoint version {meta.get('version')}")
        sections = {"param/": {}, "adam_m/": {}, "adam_v/": {}}
        for key in data.files:
            for prefix, bucket in sections.items():
                if key.startswith(prefix):
                    bucket[key[len(prefix):]] = data[key]
        return Checkpoint(meta, sections["param/"], sections["adam_m/"], sections["adam_v/"], bytes(data["runtime"]))


def policy_from_checkpoint(checkpoint: Checkpoint, config: NetworkConfig) -> AfrPolicy:
    policy = AfrPolicy(TrainingMode(checkpoint.meta["mode"]), config)
    policy.load_state_dict(checkpoint.params)
    return policy


def restore_optimizer(optimizer: Adam, policy: AfrPolicy, checkpoint: Checkpoint):
    names = [name for name, _, _ in policy.named_parameters()]
    for name, m, v in zip(names, optimizer.m, optimizer.v):
        m[...] = checkpoint.adam_m[name]
        v[...] = checkpoint.adam_v[name]
    optimizer.t = int(checkpoint.meta.get("adam_step", 0))
