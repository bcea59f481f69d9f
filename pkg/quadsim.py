"""
Lumped quadruped simulator

A rigid 6-DoF torso carrying the whole robot mass, four 3-joint legs with lumped
joint inertia, PD actuation and penalty contact for the point feet and four torso
corner spheres against a HeightField. Contacts are folded into a linearly implicit
Euler step over the 18 generalized velocities (torso linear, torso angular, joints).
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Tuple

import numpy as np

from models import RobotConfig
from terrain import HeightField, mesh_height, surface_contact

logger = logging.getLogger(__name__)

NUM_LEGS = 4
NUM_JOINTS = 12
MAX_DT = 0.01
DIVERGENCE_LIMIT = 1.0e3
# terrain search margin beyond the largest contact sphere
CONTACT_REACH = 0.05

LEG_NAMES = ("FR", "FL", "RR", "RL")
# +1 for left legs, -1 for right legs
LEG_SIDE = np.array([-1.0, 1.0, -1.0, 1.0])
LEG_FRONT = np.array([1.0, 1.0, -1.0, -1.0])
# kp/kd factor group of each joint: (front, rear) x (hip, thigh, calf)
JOINT_GROUP = np.array([(0 if LEG_FRONT[leg] > 0 else 3) + k for leg in range(NUM_LEGS) for k in range(3)])
NUM_GAIN_GROUPS = 6


class NumericalDivergence(Exception):
    """The physics state left the range a sane simulation can reach"""


@dataclass(frozen=True)
class ContactParams:
    stiffness: float = 2.0e4
    damping: float = 500.0
    tangential_damping: float = 1000.0
    gravity: float = 9.81
    max_substep: float = 0.0025
    contact_threshold: float = 1.0


@dataclass(frozen=True, eq=False)
class RobotModel:
    """Physical constants of one robot instance; gain factors are per gain group"""

    trunk_mass: float
    hip_mass: float
    thigh_mass: float
    calf_mass: float
    com_offset: np.ndarray
    trunk_size: np.ndarray
    hip_positions: np.ndarray
    hip_length: float
    thigh_length: float
    calf_length: float
    foot_radius: float
    joint_lower: np.ndarray
    joint_upper: np.ndarray
    torque_limit: float
    default_pose: np.ndarray
    stand_pose: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    armature: float = 0.01
    payload: float = 0.0
    kp_factor: np.ndarray = field(default_factory=lambda: np.ones(NUM_GAIN_GROUPS))
    kd_factor: np.ndarray = field(default_factory=lambda: np.ones(NUM_GAIN_GROUPS))
    motor_strength: np.ndarray = field(default_factory=lambda: np.ones(NUM_JOINTS))
    friction: Optional[float] = None
    contact: ContactParams = field(default_factory=ContactParams)

    def __post_init__(self):
        masses = (self.trunk_mass + self.payload, self.hip_mass, self.thigh_mass, self.calf_mass)
        if min(masses) < 0:
            raise ValueError("masses must be non-negative")
        if np.any(self.joint_lower >= self.joint_upper):
            raise ValueError("joint_lower must be below joint_upper")
        if self.torque_limit <= 0:
            raise ValueError("torque_limit must be positive")

    @classmethod
    def from_config(cls, config: RobotConfig) -> "RobotModel":
        hx, hy = config.hip_offset
        hips = np.array([[LEG_FRONT[i] * hx, LEG_SIDE[i] * hy, 0.0] for i in range(NUM_LEGS)])
        contact = ContactParams(**config.contact.model_dump())
        return cls(
            trunk_mass=config.trunk_mass,
            hip_mass=config.hip_mass,
            thigh_mass=config.thigh_mass,
            calf_mass=config.calf_mass,
            com_offset=np.array(config.com_offset, dtype=float),
            trunk_size=np.array(config.trunk_size, dtype=float),
            hip_positions=hips,
            hip_length=config.hip_length,
            thigh_length=config.thigh_length,
            calf_length=config.calf_length,
            foot_radius=config.foot_radius,
            joint_lower=np.tile(config.joint_lower, NUM_LEGS).astype(float),
            joint_upper=np.tile(config.joint_upper, NUM_LEGS).astype(float),
            torque_limit=config.torque_limit,
            default_pose=np.tile(config.default_pose, NUM_LEGS).astype(float),
            stand_pose=np.tile(config.stand_pose, NUM_LEGS).astype(float),
            kp=np.full(NUM_JOINTS, config.kp),
            kd=np.full(NUM_JOINTS, config.kd),
            armature=config.armature,
            contact=contact,
        )

    @property
    def kp_effective(self) -> np.ndarray:
        return self.kp * self.kp_factor[JOINT_GROUP]

    @property
    def kd_effective(self) -> np.ndarray:
        return self.kd * self.kd_factor[JOINT_GROUP]

    @property
    def link_masses(self) -> np.ndarray:
        """(trunk incl. payload, hip, thigh, calf)"""
        return np.array([self.trunk_mass + self.payload, self.hip_mass, self.thigh_mass, self.calf_mass])

    @property
    def total_mass(self) -> float:
        return self.trunk_mass + self.payload + NUM_LEGS * (self.hip_mass + self.thigh_mass + self.calf_mass)

    @property
    def sphere_radius(self) -> float:
        return 0.5 * float(self.trunk_size[2])

    @property
    def corner_offsets(self) -> np.ndarray:
        lx, ly = 0.5 * self.trunk_size[0], 0.5 * self.trunk_size[1]
        return np.array([[lx, -ly, 0.0], [lx, ly, 0.0], [-lx, -ly, 0.0], [-lx, ly, 0.0]])


@dataclass(frozen=True, eq=False)
class RobotState:
    position: np.ndarray
    orientation: np.ndarray
    linear_velocity: np.ndarray
    angular_velocity: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray = field(default_factory=lambda: np.zeros(NUM_JOINTS))
    foot_contacts: np.ndarray = field(default_factory=lambda: np.zeros(NUM_LEGS, dtype=bool))
    foot_forces: np.ndarray = field(default_factory=lambda: np.zeros((NUM_LEGS, 3)))
    torso_contact: bool = False
    torques: np.ndarray = field(default_factory=lambda: np.zeros(NUM_JOINTS))

    def to_record(self) -> dict:
        return {
            "position": self.position.tolist(),
            "orientation": self.orientation.tolist(),
            "linear_velocity": self.linear_velocity.tolist(),
            "angular_velocity": self.angular_velocity.tolist(),
            "q": self.q.tolist(),
            "qd": self.qd.tolist(),
            "qdd": self.qdd.tolist(),
            "foot_contacts": [bool(c) for c in self.foot_contacts],
            "foot_forces": self.foot_forces.tolist(),
            "torso_contact": bool(self.torso_contact),
            "torques": self.torques.tolist(),
        }


def make_state(position, orientation, q, linear_velocity=None, angular_velocity=None, qd=None) -> RobotState:
    return RobotState(
        position=np.array(position, dtype=float),
        orientation=normalize_quaternion(np.array(orientation, dtype=float)),
        linear_velocity=np.zeros(3) if linear_velocity is None else np.array(linear_velocity, dtype=float),
        angular_velocity=np.zeros(3) if angular_velocity is None else np.array(angular_velocity, dtype=float),
        q=np.array(q, dtype=float),
        qd=np.zeros(NUM_JOINTS) if qd is None else np.array(qd, dtype=float),
    )


def write_trajectory(states: Iterable[RobotState], path: str):
    """One JSON state per line"""
    with open(path, "w") as f:
        for state in states:
            f.write(json.dumps(state.to_record()) + "\n")


# -- rotations ---------------------------------------------------------------

def normalize_quaternion(quat: np.ndarray) -> np.ndarray:
    return quat / np.linalg.norm(quat)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_euler(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Z-Y-X (yaw, then pitch, then roll) composition, (w, x, y, z)"""
    cr, sr = math.cos(roll / 2), math.sin(roll / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
    return np.array([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ])


def quat_to_matrix(quat: np.ndarray) -> np.ndarray:
    w, x, y, z = quat
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def yaw_of(quat: np.ndarray) -> float:
    w, x, y, z = quat
    return math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))


def integrate_quaternion(quat: np.ndarray, omega_world: np.ndarray, dt: float) -> np.ndarray:
    angle = float(np.linalg.norm(omega_world)) * dt
    if angle < 1e-15:
        return normalize_quaternion(quat)
    axis = omega_world / np.linalg.norm(omega_world)
    half = 0.5 * angle
    delta = np.concatenate([[math.cos(half)], math.sin(half) * axis])
    return normalize_quaternion(quat_multiply(delta, quat))


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# -- actuation and kinematics ---------------------------------------------------

def pd_torque(model: RobotModel, q_target, q, qd) -> np.ndarray:
    """tau = strength * (kp (q* - q) - kd qd), saturated at the torque limit"""
    tau = model.motor_strength * (
        model.kp_effective * (np.asarray(q_target) - np.asarray(q)) - model.kd_effective * np.asarray(qd)
    )
    return np.clip(tau, -model.torque_limit, model.torque_limit)


def joint_inertia(model: RobotModel) -> np.ndarray:
    """Lumped per-joint inertia (hip, thigh, knee per leg) plus rotor armature"""
    lh, lt, lc = model.hip_length, model.thigh_length, model.calf_length
    knee = model.calf_mass * lc**2
    thigh = model.thigh_mass * (lt / 2) ** 2 + model.calf_mass * lt**2 + knee
    hip = model.hip_mass * (lh / 2) ** 2 + (model.thigh_mass + model.calf_mass) * lh**2 + thigh
    return np.tile([hip, thigh, knee], NUM_LEGS) + model.armature


def leg_kinematics(model: RobotModel, q) -> Tuple[np.ndarray, np.ndarray]:
    """Body-frame foot positions (4, 3) and foot Jacobians d(foot)/d(q_leg) (4, 3, 3)"""
    q = np.asarray(q, dtype=float).reshape(NUM_LEGS, 3)
    q0, q1, q2 = q[:, 0], q[:, 1], q[:, 2]
    lh, lt, lc = model.hip_length, model.thigh_length, model.calf_length
    s0, c0 = np.sin(q0), np.cos(q0)
    s1, c1 = np.sin(q1), np.cos(q1)
    s12, c12 = np.sin(q1 + q2), np.cos(q1 + q2)
    ly = LEG_SIDE * lh

    ax = -lt * s1 - lc * s12
    az = -lt * c1 - lc * c12
    feet = model.hip_positions + np.stack([ax, ly * c0 - az * s0, ly * s0 + az * c0], axis=1)

    jac = np.zeros((NUM_LEGS, 3, 3))
    jac[:, :, 0] = np.stack([np.zeros(NUM_LEGS), -ly * s0 - az * c0, ly * c0 - az * s0], axis=1)
    dax1, daz1 = -lt * c1 - lc * c12, lt * s1 + lc * s12
    jac[:, :, 1] = np.stack([dax1, -daz1 * s0, daz1 * c0], axis=1)
    dax2, daz2 = -lc * c12, lc * s12
    jac[:, :, 2] = np.stack([dax2, -daz2 * s0, daz2 * c0], axis=1)
    return feet, jac


def forward_kinematics(model: RobotModel, position, orientation, q) -> np.ndarray:
    """World-frame foot positions (4, 3)"""
    feet_body, _ = leg_kinematics(model, q)
    return np.asarray(position, dtype=float) + feet_body @ quat_to_matrix(orientation).T


def projected_gravity(state: RobotState) -> np.ndarray:
    """World gravity direction (0, 0, -1) expressed in the torso frame"""
    g = quat_to_matrix(state.orientation).T @ np.array([0.0, 0.0, -1.0])
    return g / np.linalg.norm(g)


def _link_midpoints(model: RobotModel, q) -> np.ndarray:
    """Body-frame midpoints of the hip, thigh and calf links, (4, 3, 3)"""
    q = np.asarray(q, dtype=float).reshape(NUM_LEGS, 3)
    lh, lt, lc = model.hip_length, model.thigh_length, model.calf_length
    out = np.zeros((NUM_LEGS, 3, 3))
    for leg in range(NUM_LEGS):
        q0, q1, q2 = q[leg]
        s0, c0 = math.sin(q0), math.cos(q0)
        rx = np.array([[1.0, 0.0, 0.0], [0.0, c0, -s0], [0.0, s0, c0]])
        side = LEG_SIDE[leg] * lh
        knee_local = np.array([0.0, side, 0.0]) + lt * np.array([-math.sin(q1), 0.0, -math.cos(q1)])
        thigh_mid = np.array([0.0, side, 0.0]) + 0.5 * lt * np.array([-math.sin(q1), 0.0, -math.cos(q1)])
        calf_mid = knee_local + 0.5 * lc * np.array([-math.sin(q1 + q2), 0.0, -math.cos(q1 + q2)])
        hip = model.hip_positions[leg]
        out[leg, 0] = hip + rx @ np.array([0.0, 0.5 * side, 0.0])
        out[leg, 1] = hip + rx @ thigh_mid
        out[leg, 2] = hip + rx @ calf_mid
    return out


def com_position(model: RobotModel, state: RobotState) -> np.ndarray:
    """Mass-weighted center of the trunk (with offset and payload) and the 12 link midpoints"""
    R = quat_to_matrix(state.orientation)
    trunk = model.trunk_mass + model.payload
    weighted = trunk * model.com_offset
    links = _link_midpoints(model, state.q)
    leg_masses = np.array([model.hip_mass, model.thigh_mass, model.calf_mass])
    weighted = weighted + np.einsum("k,lkj->j", leg_masses, links)
    total = trunk + NUM_LEGS * leg_masses.sum()
    return state.position + R @ (weighted / total)


def _body_inertia(model: RobotModel) -> np.ndarray:
    """Torso inertia about the trunk CoM in the body frame, legs lumped at the hips"""
    trunk = model.trunk_mass + model.payload
    a, b, c = model.trunk_size
    inertia = trunk / 12.0 * np.diag([b * b + c * c, a * a + c * c, a * a + b * b])
    leg_mass = model.hip_mass + model.thigh_mass + model.calf_mass
    for hip in model.hip_positions:
        r = hip - model.com_offset
        inertia += leg_mass * (np.dot(r, r) * np.eye(3) - np.outer(r, r))
    return inertia


# -- contact ---------------------------------------------------------------------

def _contact_geometry(model: RobotModel, field: HeightField, position, R, feet_world):
    """Sphere centers, radii, outward normals and normal penetration for feet then torso corners"""
    centers = np.vstack([feet_world, position + model.corner_offsets @ R.T])
    radii = np.concatenate([np.full(NUM_LEGS, model.foot_radius), np.full(4, model.sphere_radius)])
    _, distance, normals = surface_contact(field, centers, float(np.max(radii)) + CONTACT_REACH)
    penetration = radii - distance
    return centers, radii, normals, penetration


def _contact_jacobians(position, R, points, leg_jac) -> np.ndarray:
    """Velocity Jacobians (8, 3, 18) of the contact points w.r.t. (v, omega, qd)"""
    jac = np.zeros((points.shape[0], 3, 6 + NUM_JOINTS))
    jac[:, :, 0:3] = np.eye(3)
    jac[:, :, 3:6] = -_skew_batch(points - position)
    for leg in range(NUM_LEGS):
        jac[leg, :, 6 + 3 * leg : 9 + 3 * leg] = R @ leg_jac[leg]
    return jac


def contact_forces(model: RobotModel, state: RobotState, field: HeightField):
    """Penalty contact forces at a state: foot forces (4, 3), foot normal forces (4,), torso normal forces (4,)"""
    params = model.contact
    mu = model.friction if model.friction is not None else field.friction
    R = quat_to_matrix(state.orientation)
    feet_body, leg_jac = leg_kinematics(model, state.q)
    feet = state.position + feet_body @ R.T
    centers, radii, normals, pen = _contact_geometry(model, field, state.position, R, feet)
    points = centers - radii[:, None] * normals
    jac = _contact_jacobians(state.position, R, points, leg_jac)
    u = np.concatenate([state.linear_velocity, state.angular_velocity, state.qd])
    vel = jac @ u
    vn = np.einsum("ij,ij->i", vel, normals)
    fn = np.where(pen > 0, np.maximum(0.0, params.stiffness * pen - params.damping * vn), 0.0)
    vt = vel - vn[:, None] * normals
    ft = -params.tangential_damping * vt
    ft_norm = np.linalg.norm(ft, axis=1)
    scale = np.where(ft_norm > mu * fn, mu * fn / np.maximum(ft_norm, 1e-12), 1.0)
    forces = fn[:, None] * normals + scale[:, None] * ft
    return forces[:NUM_LEGS], fn[:NUM_LEGS], fn[NUM_LEGS:]


def foot_penetration(model: RobotModel, state: RobotState, field: HeightField) -> np.ndarray:
    R = quat_to_matrix(state.orientation)
    feet = forward_kinematics(model, state.position, state.orientation, state.q)
    _, _, _, pen = _contact_geometry(model, field, state.position, R, feet)
    return np.maximum(pen[:NUM_LEGS], 0.0)


# -- integration -----------------------------------------------------------------

def _substep(model, field, mu, inertia_body, joint_mass, position, quat, v, w, q, qd, q_target, h):
    params = model.contact
    m = model.total_mass
    R = quat_to_matrix(quat)
    r = R @ model.com_offset
    S = _skew(r)
    inertia = R @ inertia_body @ R.T

    mass = np.zeros((18, 18))
    mass[0:3, 0:3] = m * np.eye(3)
    mass[0:3, 3:6] = -m * S
    mass[3:6, 0:3] = m * S
    mass[3:6, 3:6] = inertia - m * S @ S
    mass[6:, 6:] = np.diag(joint_mass)

    gravity = np.array([0.0, 0.0, -params.gravity])
    w_cross_r = np.cross(w, np.cross(w, r))
    tau = pd_torque(model, q_target, q, qd)
    force = np.zeros(18)
    force[0:3] = m * gravity - m * w_cross_r
    force[3:6] = np.cross(r, m * gravity) - np.cross(w, inertia @ w) - m * np.cross(r, w_cross_r)
    force[6:] = tau

    u = np.concatenate([v, w, qd])
    system = mass.copy()
    rhs = mass @ u + h * force

    feet_body, leg_jac = leg_kinematics(model, q)
    feet = position + feet_body @ R.T
    centers, radii, normals, pen = _contact_geometry(model, field, position, R, feet)
    points = centers - radii[:, None] * normals
    jac = _contact_jacobians(position, R, points, leg_jac)
    vel = jac @ u
    vn = np.einsum("ij,ij->i", vel, normals)
    fn = params.stiffness * pen - params.damping * vn
    active = (pen > 0) & (fn > 0)

    for i in np.flatnonzero(active):
        n = normals[i]
        nn = np.outer(n, n)
        weight = (params.damping + h * params.stiffness) * nn
        explicit = params.stiffness * pen[i] * n
        vt = vel[i] - vn[i] * n
        vt_norm = float(np.linalg.norm(vt))
        if params.tangential_damping * vt_norm <= mu * fn[i]:
            weight = weight + params.tangential_damping * (np.eye(3) - nn)
        else:
            explicit = explicit - mu * fn[i] * vt / vt_norm
        system += h * jac[i].T @ weight @ jac[i]
        rhs += h * jac[i].T @ explicit

    u_new = np.linalg.solve(system, rhs)
    _check_divergence(u_new)
    v_new, w_new, qd_new = u_new[0:3], u_new[3:6], u_new[6:].copy()

    position = position + h * v_new
    quat = integrate_quaternion(quat, w_new, h)
    q_free = q + h * qd_new
    q_new = np.clip(q_free, model.joint_lower, model.joint_upper)
    qd_new[q_new != q_free] = 0.0
    return position, quat, v_new, w_new, q_new, qd_new, tau


def _check_divergence(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)) or np.max(np.abs(a)) > DIVERGENCE_LIMIT:
            raise NumericalDivergence("simulation state exceeded the divergence limit")


def step(model: RobotModel, state: RobotState, q_target, field: HeightField, dt: float) -> RobotState:
    """Advance one physics step of length dt with joint targets held fixed"""
    if not 0.0 < dt <= MAX_DT:
        raise ValueError(f"dt must lie in (0, {MAX_DT}], got {dt}")
    substeps = max(1, int(math.ceil(dt / model.contact.max_substep - 1e-9)))
    h = dt / substeps
    mu = model.friction if model.friction is not None else field.friction
    inertia_body = _body_inertia(model)
    joint_mass = joint_inertia(model)
    q_target = np.asarray(q_target, dtype=float)

    position, quat = state.position, state.orientation
    v, w, q, qd = state.linear_velocity, state.angular_velocity, state.q, state.qd
    tau = state.torques
    for _ in range(substeps):
        position, quat, v, w, q, qd, tau = _substep(
            model, field, mu, inertia_body, joint_mass, position, quat, v, w, q, qd, q_target, h
        )
        _check_divergence(position, v, w, q, qd)

    moved = RobotState(
        position=position,
        orientation=quat,
        linear_velocity=v,
        angular_velocity=w,
        q=q,
        qd=qd,
        qdd=(qd - state.qd) / dt,
        torques=tau,
    )
    forces, foot_fn, torso_fn = contact_forces(model, moved, field)
    threshold = model.contact.contact_threshold
    return replace(
        moved,
        foot_contacts=foot_fn > threshold,
        foot_forces=forces,
        torso_contact=bool(np.any(torso_fn > threshold)),
    )


def standing_state(model: RobotModel, field: HeightField, x: float = 0.0, y: float = 0.0, yaw: float = 0.0) -> RobotState:
    """Robot in the stand pose with its feet resting on the terrain at their static load"""
    quat = quat_from_euler(0.0, 0.0, yaw)
    feet_body, _ = leg_kinematics(model, model.stand_pose)
    R = quat_to_matrix(quat)
    feet_xy = np.array([x, y, 0.0]) + feet_body @ R.T
    ground = float(np.max(mesh_height(field, feet_xy[:, 0], feet_xy[:, 1])))
    sink = model.total_mass * model.contact.gravity / NUM_LEGS / max(model.contact.stiffness, 1e-9)
    z = ground + model.foot_radius - float(np.min(feet_body[:, 2])) - min(sink, 0.005)
    return make_state([x, y, z], quat, model.stand_pose)
