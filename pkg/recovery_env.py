"""
Fall recovery environment

Observations, privileged state, the 13-term recovery reward, supine resets,
termination, per-episode dynamics randomization and the difficulty curriculum.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

import quadsim
import terrain
from models import CurriculumConfig, EnvConfig, EpisodeRecord, RandomizationConfig, RunConfig, TerrainSpec
from quadsim import NumericalDivergence, RobotModel, RobotState
from terrain import HeightField

logger = logging.getLogger(__name__)

OBS_DIM = 42
PRIVILEGED_DIM = 36
SCAN_DIM = terrain.SCAN_SHAPE[0] * terrain.SCAN_SHAPE[1]
MASS_DIM = 4
# physics steps a standing start holds the stand pose before the episode begins
STANDING_SETTLE_STEPS = 400

# Frozen observation layout
OBS_INDEX = {
    "omega": slice(0, 3),
    "gravity": slice(3, 6),
    "q": slice(6, 18),
    "qd": slice(18, 30),
    "last_action": slice(30, 42),
}

PRIVILEGED_INDEX = {
    "masses": slice(0, 4),
    "pd_gains": slice(4, 16),
    "com": slice(16, 19),
    "friction": slice(19, 20),
    "contacts": slice(20, 24),
    "foot_forces": slice(24, 36),
}


class StepAfterTermination(Exception):
    """step() was called on an episode that already ended"""


class TerminationReason(str, Enum):
    TIMEOUT = "Timeout"
    STABLE_STAND = "StableStand"
    DIVERGED = "Diverged"


@dataclass(frozen=True, eq=False)
class Observation:
    omega: np.ndarray
    gravity: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    last_action: np.ndarray

    def pack(self) -> np.ndarray:
        out = np.empty(OBS_DIM)
        for name, index in OBS_INDEX.items():
            out[index] = getattr(self, name)
        return out

    @classmethod
    def unpack(cls, vector: np.ndarray) -> "Observation":
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (OBS_DIM,):
            raise ValueError(f"observation vector must have length {OBS_DIM}")
        return cls(**{name: vector[index].copy() for name, index in OBS_INDEX.items()})


@dataclass(frozen=True, eq=False)
class PrivilegedState:
    """Simulator-only quantities; pd_gains holds the six kp factors then the six kd factors"""

    masses: np.ndarray
    pd_gains: np.ndarray
    com: np.ndarray
    friction: float
    contacts: np.ndarray
    foot_forces: np.ndarray

    def pack(self) -> np.ndarray:
        out = np.empty(PRIVILEGED_DIM)
        out[PRIVILEGED_INDEX["masses"]] = self.masses
        out[PRIVILEGED_INDEX["pd_gains"]] = self.pd_gains
        out[PRIVILEGED_INDEX["com"]] = self.com
        out[PRIVILEGED_INDEX["friction"]] = self.friction
        out[PRIVILEGED_INDEX["contacts"]] = self.contacts.astype(float)
        out[PRIVILEGED_INDEX["foot_forces"]] = np.ravel(self.foot_forces)
        return out

    @classmethod
    def unpack(cls, vector: np.ndarray) -> "PrivilegedState":
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (PRIVILEGED_DIM,):
            raise ValueError(f"privileged vector must have length {PRIVILEGED_DIM}")
        return cls(
            masses=vector[PRIVILEGED_INDEX["masses"]].copy(),
            pd_gains=vector[PRIVILEGED_INDEX["pd_gains"]].copy(),
            com=vector[PRIVILEGED_INDEX["com"]].copy(),
            friction=float(vector[PRIVILEGED_INDEX["friction"]][0]),
            contacts=vector[PRIVILEGED_INDEX["contacts"]] > 0.5,
            foot_forces=vector[PRIVILEGED_INDEX["foot_forces"]].reshape(4, 3).copy(),
        )


@dataclass(frozen=True)
class RewardBreakdown:
    """Unweighted term values in reward-table order; total applies REWARD_WEIGHTS"""

    base_orientation: float
    upright: float
    target_height: float
    feet_on_ground: float
    target_posture: float
    action: float
    torques: float
    joint_acc: float
    joint_vel: float
    base_contact: float
    position_limits: float
    ang_vel_limit: float
    action_smoothing: float

    def values(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in REWARD_TERMS])

    def weighted(self) -> Dict[str, float]:
        return {name: REWARD_WEIGHTS[name] * getattr(self, name) for name in REWARD_TERMS}

    @property
    def total(self) -> float:
        return float(np.dot(self.values(), WEIGHT_VECTOR))


REWARD_WEIGHTS = {
    "base_orientation": -0.5,
    "upright": 6.0,
    "target_height": 1.0,
    "feet_on_ground": 0.3,
    "target_posture": 4.0,
    "action": -1e-2,
    "torques": -5e-4,
    "joint_acc": -2.5e-6,
    "joint_vel": -1e-2,
    "base_contact": -0.2,
    "position_limits": -1.0,
    "ang_vel_limit": -0.1,
    "action_smoothing": -0.05,
}
REWARD_TERMS = [f.name for f in fields(RewardBreakdown)]
WEIGHT_VECTOR = np.array([REWARD_WEIGHTS[name] for name in REWARD_TERMS])


class EpisodeStatus(NamedTuple):
    step_count: int
    stable_streak: int
    terminated: bool
    termination_reason: Optional[TerminationReason]


class StepResult(NamedTuple):
    observation: Observation
    privileged: PrivilegedState
    scan: terrain.HeightScan
    reward: RewardBreakdown
    status: EpisodeStatus


def soft_joint_limits(model: RobotModel, factor: float):
    """Joint range shrunk about its midpoint; factor 1 gives the hard limits"""
    mid = 0.5 * (model.joint_lower + model.joint_upper)
    half = 0.5 * (model.joint_upper - model.joint_lower) * factor
    return mid - half, mid + half


def clip_action(action, config: EnvConfig) -> np.ndarray:
    return np.clip(np.asarray(action, dtype=float), -config.action_clip, config.action_clip)


def apply_action(action, model: RobotModel, config: EnvConfig) -> np.ndarray:
    """q* = default pose + scale * clip(a), clamped to the joint limits"""
    target = model.default_pose + config.action_scale * clip_action(action, config)
    return np.clip(target, model.joint_lower, model.joint_upper)


def torso_height(state: RobotState, field: HeightField) -> float:
    return float(state.position[2] - terrain.sample_height(field, state.position[0], state.position[1]))


def compute_reward(
    state: RobotState,
    model: RobotModel,
    field: HeightField,
    action,
    prev_action,
    prev_prev_action,
    config: EnvConfig,
) -> RewardBreakdown:
    g = quadsim.projected_gravity(state)
    eps = config.epsilon
    upright_error = g[2] + 1.0
    gate = abs(upright_error) < eps
    posture = float(np.exp(-np.sum((state.q - model.stand_pose) ** 2))) if gate else 0.0
    lower, upper = soft_joint_limits(model, config.soft_limit_factor)
    a0, a1, a2 = (np.asarray(a, dtype=float) for a in (action, prev_action, prev_prev_action))

    return RewardBreakdown(
        base_orientation=float(g[0] ** 2 + g[1] ** 2),
        upright=float(np.exp(-(upright_error**2) / (2 * eps**2))),
        target_height=float(np.exp(-((config.target_height - torso_height(state, field)) ** 2))),
        feet_on_ground=float(np.count_nonzero(state.foot_contacts)),
        target_posture=posture,
        action=float(np.sum(a0**2)),
        torques=float(np.sum(state.torques**2)),
        joint_acc=float(np.sum(state.qdd**2)),
        joint_vel=float(np.sum(state.qd**2)),
        base_contact=1.0 if state.torso_contact else 0.0,
        position_limits=float(np.count_nonzero((state.q < lower) | (state.q > upper))),
        ang_vel_limit=float(np.sum(np.maximum(np.abs(state.qd) - config.ang_vel_limit, 0.0))),
        action_smoothing=float(np.sum((a0 - a1) ** 2) + np.sum((a0 - 2 * a1 + a2) ** 2)),
    )


def randomize(model: RobotModel, config: RandomizationConfig, rng: np.random.Generator) -> RobotModel:
    """One draw of the dynamics randomization; groups switched off keep the base values"""
    if not config.enabled:
        return model

    updates = {}
    if config.randomize_masses:
        updates["trunk_mass"] = float(rng.uniform(*config.trunk_mass))
        updates["hip_mass"] = float(rng.uniform(*config.hip_mass))
        updates["thigh_mass"] = float(rng.uniform(*config.thigh_mass))
        updates["calf_mass"] = float(rng.uniform(*config.calf_mass))
    if config.randomize_payload:
        updates["payload"] = float(rng.uniform(*config.payload))
    if config.randomize_gains:
        updates["kp_factor"] = rng.uniform(*config.kp_factor, size=quadsim.NUM_GAIN_GROUPS)
        updates["kd_factor"] = rng.uniform(*config.kd_factor, size=quadsim.NUM_GAIN_GROUPS)
        updates["motor_strength"] = rng.uniform(*config.motor_strength, size=quadsim.NUM_JOINTS)
    if config.randomize_com:
        updates["com_offset"] = model.com_offset + rng.uniform(*config.com_shift, size=3)
    if config.randomize_friction:
        updates["friction"] = float(rng.uniform(*config.friction))
    return replace(model, **updates)


def curriculum_update(spec: TerrainSpec, success_rate: float, config: Optional[CurriculumConfig] = None) -> TerrainSpec:
    """Raise difficulty after good windows, lower it after bad ones"""
    config = config or CurriculumConfig()
    difficulty = spec.difficulty
    if success_rate >= config.promote_above:
        difficulty += config.step
    elif success_rate <= config.demote_below:
        difficulty -= config.step
    return spec.model_copy(update={"difficulty": min(1.0, max(0.0, round(difficulty, 10)))})


class RecoveryEnv:
    """One robot on one terrain tile; exclusively owned by a single rollout worker"""

    def __init__(self, config: RunConfig, terrain_spec: Optional[TerrainSpec] = None, base_model: Optional[RobotModel] = None):
        self.config = config
        self.env_config = config.env
        self.base_model = base_model or RobotModel.from_config(config.robot)
        self.terrain_spec = terrain_spec or TerrainSpec(kind=config.terrain.kinds[0], difficulty=config.terrain.initial_difficulty)
        self.randomization = config.randomization
        self.record_trajectory = False
        self.trajectory: List[RobotState] = []

        self.model: Optional[RobotModel] = None
        self.field: Optional[HeightField] = None
        self.state: Optional[RobotState] = None
        self._field_key = None
        self._seed = 0
        self._reset_episode_counters()

    def _reset_episode_counters(self):
        self.step_count = 0
        self.stable_streak = 0
        self.streak_start: Optional[int] = None
        self.terminated = False
        self.termination_reason: Optional[TerminationReason] = None
        self.episode_return = 0.0
        self.term_sums = {name: 0.0 for name in REWARD_TERMS}
        self.last_action = np.zeros(quadsim.NUM_JOINTS)
        self.prev_action = np.zeros(quadsim.NUM_JOINTS)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["field"] = None
        state["_field_key"] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        if self.state is not None:
            self._terrain(self.terrain_spec)

    def _terrain(self, spec: TerrainSpec) -> HeightField:
        key = (spec.kind, spec.difficulty, spec.seed)
        if key != self._field_key:
            self.field = terrain.generate(spec, cell_size=self.config.terrain.cell_size, tile_size=self.config.terrain.tile_size)
            self._field_key = key
        return self.field

    def _spawn_ground(self, x: float, y: float, yaw: float) -> float:
        """Highest terrain point under the torso footprint"""
        c, s = math.cos(yaw), math.sin(yaw)
        corners = np.vstack([[0.0, 0.0], self.base_model.corner_offsets[:, :2]])
        px = x + c * corners[:, 0] - s * corners[:, 1]
        py = y + s * corners[:, 0] + c * corners[:, 1]
        return float(np.max(terrain.sample_height(self.field, px, py)))

    def reset(self, seed: int, terrain_spec: Optional[TerrainSpec] = None, start: str = "supine") -> Observation:
        """Start an episode; start is "supine" (random belly-up pose) or "standing" """
        if terrain_spec is not None:
            self.terrain_spec = terrain_spec
        self._seed = int(seed)
        self._reset_episode_counters()
        self.trajectory = []
        rng = np.random.default_rng(self._seed)
        field = self._terrain(self.terrain_spec)
        self.model = randomize(self.base_model, self.randomization, rng)
        cfg = self.env_config
        yaw = float(rng.uniform(0.0, 2.0 * math.pi))

        if start == "standing":
            self.state = quadsim.standing_state(self.model, field, yaw=yaw)
        elif start == "supine":
            roll = math.radians(float(rng.uniform(*cfg.roll_range_deg)))
            lower, upper = soft_joint_limits(self.model, cfg.joint_init_fraction)
            q = rng.uniform(lower, upper)
            z = self._spawn_ground(0.0, 0.0, yaw) + cfg.spawn_height
            self.state = quadsim.make_state([0.0, 0.0, z], quadsim.quat_from_euler(roll, 0.0, yaw), q)
        else:
            raise ValueError(f"unknown start {start!r}")

        # settle with zero action
        hold = apply_action(np.zeros(quadsim.NUM_JOINTS), self.model, cfg)
        settle = max(cfg.settle_steps, STANDING_SETTLE_STEPS) if start == "standing" else cfg.settle_steps
        try:
            for _ in range(settle):
                self._physics_step(hold)
        except NumericalDivergence:
            logger.warning("Divergence while settling episode seed=%d", self._seed)
            self.terminated = True
            self.termination_reason = TerminationReason.DIVERGED
        return self.observation()

    def _physics_step(self, q_target: np.ndarray):
        self.state = quadsim.step(self.model, self.state, q_target, self.field, self.env_config.sim_dt)
        if self.record_trajectory:
            self.trajectory.append(self.state)

    def observation(self) -> Observation:
        R = quadsim.quat_to_matrix(self.state.orientation)
        return Observation(
            omega=R.T @ self.state.angular_velocity,
            gravity=quadsim.projected_gravity(self.state),
            q=self.state.q.copy(),
            qd=self.state.qd.copy(),
            last_action=self.last_action.copy(),
        )

    def privileged(self) -> PrivilegedState:
        R = quadsim.quat_to_matrix(self.state.orientation)
        com = R.T @ (quadsim.com_position(self.model, self.state) - self.state.position)
        mu = self.model.friction if self.model.friction is not None else self.field.friction
        return PrivilegedState(
            masses=self.model.link_masses,
            pd_gains=np.concatenate([self.model.kp_factor, self.model.kd_factor]),
            com=com,
            friction=float(mu),
            contacts=self.state.foot_contacts.copy(),
            foot_forces=self.state.foot_forces.copy(),
        )

    def height_scan(self) -> terrain.HeightScan:
        return terrain.scan(self.field, self.state.position, quadsim.yaw_of(self.state.orientation))

    def status(self) -> EpisodeStatus:
        return EpisodeStatus(self.step_count, self.stable_streak, self.terminated, self.termination_reason)

    def is_standing(self) -> bool:
        cfg = self.env_config
        g = quadsim.projected_gravity(self.state)
        return (
            abs(g[2] + 1.0) < cfg.epsilon
            and bool(np.all(self.state.foot_contacts))
            and abs(torso_height(self.state, self.field) - cfg.target_height) < cfg.height_tolerance
        )

    def step(self, action) -> StepResult:
        if self.terminated:
            raise StepAfterTermination("episode already terminated; call reset()")
        cfg = self.env_config
        clipped = clip_action(action, cfg)
        q_target = apply_action(clipped, self.model, cfg)

        diverged = False
        try:
            for _ in range(cfg.decimation):
                self._physics_step(q_target)
        except NumericalDivergence:
            # state keeps the last finite substep
            diverged = True
            logger.warning("Simulation diverged at step %d (seed=%d)", self.step_count + 1, self._seed)

        reward = compute_reward(self.state, self.model, self.field, clipped, self.last_action, self.prev_action, cfg)
        self.prev_action = self.last_action
        self.last_action = clipped
        self.step_count += 1
        self.episode_return += reward.total
        for name, value in reward.weighted().items():
            self.term_sums[name] += value

        if not diverged and self.is_standing():
            self.stable_streak += 1
            if self.stable_streak == 1:
                self.streak_start = self.step_count
        else:
            self.stable_streak = 0

        if diverged:
            self._finish(TerminationReason.DIVERGED)
        elif self.stable_streak >= cfg.stable_steps:
            self._finish(TerminationReason.STABLE_STAND)
        elif self.step_count >= cfg.max_episode_steps:
            self._finish(TerminationReason.TIMEOUT)

        return StepResult(self.observation(), self.privileged(), self.height_scan(), reward, self.status())

    def _finish(self, reason: TerminationReason):
        self.terminated = True
        self.termination_reason = reason

    @property
    def recovery_time(self) -> Optional[float]:
        if self.termination_reason != TerminationReason.STABLE_STAND:
            return None
        return self.streak_start * self.env_config.control_dt

    def episode_record(self) -> EpisodeRecord:
        return EpisodeRecord(
            seed=self._seed,
            terrain=self.terrain_spec.kind,
            difficulty=self.terrain_spec.difficulty,
            termination_reason=self.termination_reason.value if self.termination_reason else "Running",
            steps=self.step_count,
            episode_return=self.episode_return,
            reward_terms=dict(self.term_sums),
            success=self.termination_reason == TerminationReason.STABLE_STAND,
            recovery_time=self.recovery_time,
        )


class BatchEnv:
    """Steps N environments; a thread pool fans out when workers > 1"""

    def __init__(self, envs: Sequence[RecoveryEnv], workers: int = 1):
        self.envs = list(envs)
        self.workers = max(1, workers)
        self._pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_pool"] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None

    def __len__(self) -> int:
        return len(self.envs)

    def _map(self, fn, items):
        if self._pool is None:
            return [fn(*item) for item in items]
        return list(self._pool.map(lambda item: fn(*item), items))

    def reset(self, seeds: Sequence[int], specs: Optional[Sequence[Optional[TerrainSpec]]] = None) -> List[Observation]:
        specs = specs or [None] * len(self.envs)
        return self._map(lambda env, seed, spec: env.reset(seed, spec), zip(self.envs, seeds, specs))

    def step(self, actions: np.ndarray) -> List[StepResult]:
        return self._map(lambda env, action: env.step(action), zip(self.envs, actions))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
