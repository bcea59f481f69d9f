import hashlib
import json
import math
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


class ConfigError(Exception):
    """Raised when a run config cannot be read or validated"""

    def __init__(self, path: str, message: str, location: Optional[str] = None):
        self.path = path
        self.location = location
        where = f" ({location})" if location else ""
        super().__init__(f"{path}{where}: {message}")


class TerrainKind(str, Enum):
    FLAT = "flat"
    SLOPE = "slope"
    DISCRETE_OBSTACLES = "discrete_obstacles"
    STAIRS = "stairs"
    SINGLE_GAPS = "single_gaps"
    AIR_BEAMS = "air_beams"
    BEAMS = "beams"
    SPARSE_STONES = "sparse_stones"
    DENSE_STONES = "dense_stones"
    UNEVEN = "uneven"

    @property
    def display_name(self) -> str:
        return self.value.replace("_", " ").title()

    @classmethod
    def from_display_name(cls, name: str) -> "TerrainKind":
        return cls(name.strip().lower().replace(" ", "_"))


# The eight challenge terrains of the recovery curriculum, in report order
CHALLENGE_KINDS = [
    TerrainKind.SLOPE,
    TerrainKind.DISCRETE_OBSTACLES,
    TerrainKind.STAIRS,
    TerrainKind.SINGLE_GAPS,
    TerrainKind.AIR_BEAMS,
    TerrainKind.BEAMS,
    TerrainKind.SPARSE_STONES,
    TerrainKind.DENSE_STONES,
]


class TrainingMode(str, Enum):
    AFR = "afr"
    AFR_RAW = "afr-raw"
    PPO = "ppo"

    @property
    def label(self) -> str:
        return self.value.upper().replace("-", "_")


class _StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TerrainSpec(_StrictModel):
    """One terrain tile request: kind, difficulty and generator seed"""

    kind: TerrainKind = TerrainKind.FLAT
    difficulty: float = Field(default=0.0, description="Difficulty, clamped to [0, 1]")
    seed: int = Field(default=0, description="64-bit generator seed")

    @field_validator("difficulty")
    @classmethod
    def clamp_difficulty(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("difficulty must be finite")
        return min(1.0, max(0.0, v))

    @field_validator("seed")
    @classmethod
    def wrap_seed(cls, v: int) -> int:
        return v % (1 << 64)


class CurriculumConfig(_StrictModel):
    """Success-driven difficulty schedule, tracked per terrain kind"""

    enabled: bool = True
    window: int = Field(default=50, ge=1)
    min_episodes: int = Field(default=20, ge=1)
    promote_above: float = Field(default=0.8, ge=0.0, le=1.0)
    demote_below: float = Field(default=0.3, ge=0.0, le=1.0)
    step: float = Field(default=0.05, gt=0.0, le=1.0)


class TerrainConfig(_StrictModel):
    """Terrain tiles used for training"""

    kinds: List[TerrainKind] = Field(default_factory=lambda: [TerrainKind.FLAT], min_length=1)
    initial_difficulty: float = Field(default=0.0, ge=0.0, le=1.0)
    cell_size: float = Field(default=0.05, gt=0.0)
    tile_size: float = Field(default=10.0, gt=0.0)
    curriculum: CurriculumConfig = Field(default_factory=CurriculumConfig)


class ContactConfig(_StrictModel):
    """Penalty contact and integration constants"""

    stiffness: float = Field(default=2.0e4, ge=0.0, description="k_c in N/m")
    damping: float = Field(default=500.0, ge=0.0, description="d_c in Ns/m")
    tangential_damping: float = Field(default=1000.0, ge=0.0, description="Ns/m")
    gravity: float = Field(default=9.81, ge=0.0)
    max_substep: float = Field(default=0.0025, gt=0.0)
    contact_threshold: float = Field(default=1.0, ge=0.0, description="N")


class RobotConfig(_StrictModel):
    """Go1-scale robot constants; per-leg triples are (hip, thigh, calf)"""

    trunk_mass: float = Field(default=5.204, gt=0.0)
    hip_mass: float = Field(default=0.68, gt=0.0)
    thigh_mass: float = Field(default=1.009, gt=0.0)
    calf_mass: float = Field(default=0.196, gt=0.0)
    com_offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    trunk_size: Tuple[float, float, float] = (0.38, 0.19, 0.12)
    hip_offset: Tuple[float, float] = Field(
        default=(0.1881, 0.04675), description="Hip joint x/y distance from torso center"
    )
    hip_length: float = Field(default=0.08, gt=0.0)
    thigh_length: float = Field(default=0.213, gt=0.0)
    calf_length: float = Field(default=0.213, gt=0.0)
    foot_radius: float = Field(default=0.02, ge=0.0)
    joint_lower: Tuple[float, float, float] = (-0.863, -0.686, -2.818)
    joint_upper: Tuple[float, float, float] = (0.863, 4.501, -0.888)
    torque_limit: float = Field(default=33.5, gt=0.0)
    default_pose: Tuple[float, float, float] = (0.0, 0.8, -1.6)
    stand_pose: Tuple[float, float, float] = (0.0, 0.8, -1.6)
    kp: float = Field(default=20.0, ge=0.0)
    kd: float = Field(default=0.5, ge=0.0)
    armature: float = Field(default=0.01, ge=0.0)
    contact: ContactConfig = Field(default_factory=ContactConfig)

    @model_validator(mode="after")
    def check_limits(self) -> "RobotConfig":
        for lo, hi in zip(self.joint_lower, self.joint_upper):
            if not lo < hi:
                raise ValueError("joint_lower must be below joint_upper for every joint")
        return self


class EnvConfig(_StrictModel):
    """Recovery task constants"""

    epsilon: float = Field(default=0.25, gt=0.0, description="Upright tolerance")
    target_height: float = Field(default=0.30, gt=0.0)
    height_tolerance: float = Field(default=0.1, gt=0.0)
    action_scale: float = Field(default=0.5, gt=0.0)
    action_clip: float = Field(default=3.0, gt=0.0)
    sim_dt: float = Field(default=0.005, gt=0.0, le=0.01)
    decimation: int = Field(default=4, ge=1)
    max_episode_steps: int = Field(default=350, ge=1)
    stable_steps: int = Field(default=100, ge=1)
    settle_steps: int = Field(default=10, ge=0)
    spawn_height: float = Field(default=0.35, gt=0.0)
    roll_range_deg: Tuple[float, float] = (135.0, 225.0)
    joint_init_fraction: float = Field(default=0.8, gt=0.0, le=1.0)
    soft_limit_factor: float = Field(default=0.9, gt=0.0, le=1.0)
    ang_vel_limit: float = Field(default=0.8, ge=0.0)

    @property
    def control_dt(self) -> float:
        return self.sim_dt * self.decimation


class RandomizationConfig(_StrictModel):
    """Per-episode dynamics randomisation ranges"""

    enabled: bool = True
    payload: Tuple[float, float] = (-2.5, 2.5)
    kp_factor: Tuple[float, float] = (0.9, 1.1)
    kd_factor: Tuple[float, float] = (0.9, 1.1)
    motor_strength: Tuple[float, float] = (0.9, 1.1)
    com_shift: Tuple[float, float] = (-0.05, 0.05)
    trunk_mass: Tuple[float, float] = (4.0, 28.0)
    hip_mass: Tuple[float, float] = (0.3, 0.7)
    thigh_mass: Tuple[float, float] = (0.4, 4.0)
    calf_mass: Tuple[float, float] = (0.1, 0.8)
    friction: Tuple[float, float] = (0.3, 1.25)
    randomize_payload: bool = True
    randomize_masses: bool = True
    randomize_gains: bool = True
    randomize_com: bool = True
    randomize_friction: bool = True

    @model_validator(mode="after")
    def check_ranges(self) -> "RandomizationConfig":
        for name in (
            "payload", "kp_factor", "kd_factor", "motor_strength", "com_shift",
            "trunk_mass", "hip_mass", "thigh_mass", "calf_mass", "friction",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is inverted")
        return self


class NetworkConfig(_StrictModel):
    """Sub-network sizes"""

    history: int = Field(default=5, ge=1)
    latent_dim: int = Field(default=16, ge=1)
    heightmap_dim: int = Field(default=32, ge=1)
    estimator_hidden: List[int] = Field(default_factory=lambda: [256, 128])
    heightmap_hidden: List[int] = Field(default_factory=lambda: [64])
    actor_hidden: List[int] = Field(default_factory=lambda: [512, 256, 128])
    critic_hidden: List[int] = Field(default_factory=lambda: [256, 128])
    init_log_std: float = Field(default=math.log(0.8))


class PpoConfig(_StrictModel):
    """PPO hyperparameters; large runs use thousands of envs"""

    gamma: float = Field(default=0.99, gt=0.0, le=1.0)
    lam: float = Field(default=0.95, gt=0.0, le=1.0)
    clip_ratio: float = Field(default=0.2, gt=0.0, lt=1.0)
    learning_rate: float = Field(default=3e-4, ge=0.0)
    epochs: int = Field(default=5, ge=1)
    minibatches: int = Field(default=4, ge=1)
    value_coef: float = Field(default=1.0, ge=0.0)
    entropy_coef: float = Field(default=0.005, ge=0.0)
    regression_coef: float = Field(default=1.0, ge=0.0)
    max_grad_norm: float = Field(default=1.0, ge=0.0)
    n_envs: int = Field(default=64, ge=1)
    t_roll: int = Field(default=24, ge=1)
    total_iterations: int = Field(default=1000, ge=1)
    mode: TrainingMode = TrainingMode.AFR
    checkpoint_interval: int = Field(default=50, ge=1)
    workers: int = Field(default=1, ge=1)


class EvalConfig(_StrictModel):
    trials: int = Field(default=50, ge=1)
    randomize_payload: bool = True


class RunConfig(_StrictModel):
    """Everything a training run needs; one file per run"""

    seed: int = 0
    terrain: TerrainConfig = Field(default_factory=TerrainConfig)
    robot: RobotConfig = Field(default_factory=RobotConfig)
    env: EnvConfig = Field(default_factory=EnvConfig)
    randomization: RandomizationConfig = Field(default_factory=RandomizationConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    ppo: PpoConfig = Field(default_factory=PpoConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical JSON form of the config"""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def load_run_config(path: str) -> RunConfig:
    """Read and validate a JSON run config, raising ConfigError with diagnostics"""
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(str(path), "config file not found")

    text = config_path.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), e.msg, location=f"line {e.lineno}, column {e.colno}")

    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigError(str(path), first["msg"], location=f"field {field}")


class EpisodeRecord(BaseModel):
    """Per-episode log line"""

    seed: int
    terrain: TerrainKind
    difficulty: float
    termination_reason: str
    steps: int
    episode_return: float
    reward_terms: Dict[str, float]
    success: bool
    recovery_time: Optional[float] = None


class UpdateStats(BaseModel):
    """Losses and diagnostics of one PPO update"""

    policy_loss: float
    value_loss: float
    entropy: float
    regression_loss: float
    approx_kl: float
    clip_fraction: float
    grad_norm: float


class MetricsRecord(BaseModel):
    """One metrics.jsonl line; field names are frozen"""

    iteration: int
    config_hash: str
    mode: TrainingMode
    total_reward_mean: float
    total_reward_std: float
    target_posture_mean: float
    target_posture_std: float
    reward_terms: Dict[str, float]
    policy_loss: float
    value_loss: float
    entropy: float
    loss_reg: float
    approx_kl: float
    clip_fraction: float
    grad_norm: float
    episodes: int
    success_rate: Optional[float] = None
    recovery_time: Optional[float] = None
    mass_error: Optional[float] = None
    mass_error_baseline: Optional[float] = None
    curriculum: Dict[str, float]


class TerrainResult(BaseModel):
    """One row of an evaluation report"""

    terrain: TerrainKind
    trials: int = Field(..., ge=1)
    success_rate: float = Field(..., ge=0.0, le=1.0)
    recovery_time: Optional[float] = Field(default=None, gt=0.0, description="Seconds")

    @field_validator("success_rate")
    @classmethod
    def round_rate(cls, v: float) -> float:
        return round(v, 4)

    @field_validator("recovery_time")
    @classmethod
    def round_time(cls, v: Optional[float]) -> Optional[float]:
        return None if v is None else round(v, 3)


class MethodReport(BaseModel):
    """Results of one checkpoint across terrains"""

    method: str
    checkpoint: str
    results: List[TerrainResult]


class EvalReport(BaseModel):
    """Success rate and recovery time per terrain, per method"""

    seed: int
    methods: List[MethodReport]
