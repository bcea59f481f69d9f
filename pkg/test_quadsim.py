import math
from dataclasses import replace

import numpy as np
import pytest

import quadsim
import terrain
from models import RobotConfig
from quadsim import ContactParams, NumericalDivergence, RobotModel


@pytest.fixture
def model():
    return RobotModel.from_config(RobotConfig())


def airborne_state(model, z=2.0, **kwargs):
    return quadsim.make_state([0.0, 0.0, z], [1.0, 0.0, 0.0, 0.0], model.stand_pose, **kwargs)


class TestActuation:
    """PD torque law"""

    def test_pd_torque(self, model):
        tau = quadsim.pd_torque(model, np.full(12, 0.1), np.zeros(12), np.ones(12))
        assert tau == pytest.approx(np.full(12, 1.5))

    def test_equilibrium_has_no_torque(self, model):
        q = model.stand_pose
        assert np.all(quadsim.pd_torque(model, q, q, np.zeros(12)) == 0.0)

    def test_torque_saturates(self, model):
        tau = quadsim.pd_torque(model, np.full(12, 10.0), np.zeros(12), np.zeros(12))
        assert tau == pytest.approx(np.full(12, 33.5))
        tau = quadsim.pd_torque(model, np.full(12, -10.0), np.zeros(12), np.zeros(12))
        assert tau == pytest.approx(np.full(12, -33.5))

    def test_gain_factors_scale_groups(self, model):
        factors = np.ones(6)
        factors[0] = 2.0
        scaled = replace(model, kp_factor=factors)
        tau = quadsim.pd_torque(scaled, np.full(12, 0.1), np.zeros(12), np.zeros(12))
        # front hips are joints 0 and 3
        assert tau[0] == pytest.approx(4.0)
        assert tau[3] == pytest.approx(4.0)
        assert tau[6] == pytest.approx(2.0)


class TestKinematics:
    """Forward kinematics and Jacobians"""

    def test_zero_configuration(self, model):
        feet, _ = quadsim.leg_kinematics(model, np.zeros(12))
        for leg in range(4):
            expected = model.hip_positions[leg] + np.array(
                [0.0, quadsim.LEG_SIDE[leg] * model.hip_length, -(model.thigh_length + model.calf_length)]
            )
            assert feet[leg] == pytest.approx(expected)

    def test_knee_bend_raises_foot(self, model):
        q = np.zeros(12)
        q[2] = -math.pi / 2
        straight, _ = quadsim.leg_kinematics(model, np.zeros(12))
        bent, _ = quadsim.leg_kinematics(model, q)
        assert bent[0, 2] - straight[0, 2] == pytest.approx(model.calf_length)
        assert bent[0, 0] - straight[0, 0] == pytest.approx(model.calf_length)

    def test_supine_feet_point_up(self, model):
        quat = quadsim.quat_from_euler(math.pi, 0.0, 0.0)
        feet = quadsim.forward_kinematics(model, [0.0, 0.0, 0.2], quat, model.default_pose)
        assert np.all(feet[:, 2] > 0.2)

    def test_jacobian_matches_finite_differences(self, model):
        rng = np.random.default_rng(0)
        q = rng.uniform(-1.0, 1.0, size=12)
        _, jac = quadsim.leg_kinematics(model, q)
        eps = 1e-6
        for joint in range(12):
            plus, minus = q.copy(), q.copy()
            plus[joint] += eps
            minus[joint] -= eps
            fp, _ = quadsim.leg_kinematics(model, plus)
            fm, _ = quadsim.leg_kinematics(model, minus)
            leg, k = divmod(joint, 3)
            numeric = (fp[leg] - fm[leg]) / (2 * eps)
            assert jac[leg, :, k] == pytest.approx(numeric, abs=1e-6)


class TestOrientation:
    """Projected gravity"""

    def test_upright(self, model):
        state = airborne_state(model)
        assert quadsim.projected_gravity(state) == pytest.approx([0.0, 0.0, -1.0])

    def test_supine(self, model):
        state = quadsim.make_state([0, 0, 1], quadsim.quat_from_euler(math.pi, 0, 0), model.stand_pose)
        assert quadsim.projected_gravity(state) == pytest.approx([0.0, 0.0, 1.0], abs=1e-12)

    def test_nose_down(self, model):
        state = quadsim.make_state([0, 0, 1], quadsim.quat_from_euler(0, math.pi / 2, 0), model.stand_pose)
        assert quadsim.projected_gravity(state) == pytest.approx([1.0, 0.0, 0.0], abs=1e-12)

    def test_unit_norm(self, model):
        rng = np.random.default_rng(1)
        for _ in range(20):
            quat = quadsim.quat_from_euler(*rng.uniform(-math.pi, math.pi, size=3))
            state = quadsim.make_state([0, 0, 1], quat, model.stand_pose)
            assert np.linalg.norm(quadsim.projected_gravity(state)) == pytest.approx(1.0)

    def test_yaw_round_trip(self):
        assert quadsim.yaw_of(quadsim.quat_from_euler(0.0, 0.0, 0.7)) == pytest.approx(0.7)


class TestCenterOfMass:
    """Mass-weighted CoM"""

    def test_symmetric_pose_is_centered_laterally(self, model):
        com = quadsim.com_position(model, airborne_state(model, z=0.5))
        assert com[1] == pytest.approx(0.0, abs=1e-12)
        assert com[2] < 0.5

    def test_massless_legs_follow_offset(self, model):
        light = replace(model, hip_mass=0.0, thigh_mass=0.0, calf_mass=0.0, com_offset=np.array([0.01, -0.02, 0.03]))
        com = quadsim.com_position(light, airborne_state(light, z=0.5))
        assert com == pytest.approx([0.01, -0.02, 0.53])

    def test_calf_weighted_toy(self, model):
        toy = replace(model, trunk_mass=1.0, hip_mass=0.0, thigh_mass=0.0, calf_mass=1.0)
        state = quadsim.make_state([0, 0, 0], [1, 0, 0, 0], np.zeros(12))
        assert quadsim.com_position(toy, state)[2] == pytest.approx(-0.2556)


class TestDynamics:
    """Integration, contact and divergence"""

    def test_free_body_keeps_momentum(self, model):
        weightless = replace(model, contact=ContactParams(gravity=0.0))
        field = terrain.flat_field(height=-4.0)
        state = airborne_state(weightless, z=0.0, linear_velocity=[0.4, -0.2, 0.1], angular_velocity=[0.3, 0.2, 0.5])
        inertia_body = quadsim._body_inertia(weightless)

        def angular_momentum(s):
            R = quadsim.quat_to_matrix(s.orientation)
            return R @ inertia_body @ R.T @ s.angular_velocity

        start = angular_momentum(state)
        for _ in range(100):
            state = quadsim.step(weightless, state, weightless.stand_pose, field, 0.005)
        assert state.linear_velocity == pytest.approx([0.4, -0.2, 0.1])
        drift = np.linalg.norm(angular_momentum(state) - start) / np.linalg.norm(start)
        assert drift < 1e-2

    def test_free_fall_conserves_energy(self, model):
        passive = replace(model, kp=np.zeros(12), kd=np.zeros(12))
        field = terrain.flat_field(height=-4.0)
        state = airborne_state(passive, z=3.0, linear_velocity=[1.0, 0.0, 0.0])
        m, g = passive.total_mass, passive.contact.gravity

        def energy(s):
            return 0.5 * m * float(s.linear_velocity @ s.linear_velocity) + m * g * (s.position[2] + 4.0)

        start = energy(state)
        for _ in range(200):
            state = quadsim.step(passive, state, passive.stand_pose, field, 0.005)
        assert not state.torso_contact
        assert abs(energy(state) - start) / start < 0.01

    def test_stands_under_pd_control(self, model):
        field = terrain.flat_field()
        state = quadsim.standing_state(model, field)
        heights = []
        for _ in range(500):
            state = quadsim.step(model, state, model.stand_pose, field, 0.005)
            heights.append(state.position[2])
        assert np.all(state.foot_contacts)
        assert not state.torso_contact
        assert abs(heights[-1] - heights[249]) < 0.01
        assert np.max(quadsim.foot_penetration(model, state, field)) <= 0.01

    def test_drop_comes_to_rest_on_the_surface(self, model):
        field = terrain.flat_field()
        grippy = replace(model, friction=0.8)
        state = airborne_state(grippy, z=0.5)
        heights = []
        for _ in range(600):
            state = quadsim.step(grippy, state, grippy.stand_pose, field, 0.005)
            heights.append(state.position[2])
        assert np.all(state.foot_contacts)
        assert abs(heights[-1] - heights[499]) < 0.01
        assert np.max(quadsim.foot_penetration(grippy, state, field)) <= 0.01

    def test_step_is_deterministic(self, model):
        field = terrain.generate(terrain.TerrainSpec(kind="uneven", difficulty=0.5, seed=3))
        start = quadsim.make_state([0, 0, 0.5], quadsim.quat_from_euler(2.5, 0.1, 0.0), model.default_pose)
        targets = np.random.default_rng(2).uniform(-0.5, 0.5, size=(40, 12)) + model.default_pose

        def run():
            state = start
            for target in targets:
                state = quadsim.step(model, state, target, field, 0.005)
            return state

        a, b = run(), run()
        assert np.array_equal(a.position, b.position)
        assert np.array_equal(a.orientation, b.orientation)
        assert np.array_equal(a.q, b.q)
        assert np.array_equal(a.foot_forces, b.foot_forces)

    def test_joint_limit_clamps_and_stops(self, model):
        q = model.stand_pose.copy()
        q[2] = model.joint_upper[2] - 1e-4
        qd = np.zeros(12)
        qd[2] = 5.0
        state = quadsim.make_state([0, 0, 2.0], [1, 0, 0, 0], q, qd=qd)
        out = quadsim.step(model, state, q, terrain.flat_field(), 0.0025)
        assert out.q[2] == model.joint_upper[2]
        assert out.qd[2] == 0.0

    def test_runaway_gains_diverge(self, model):
        stiff = replace(model, kp=np.full(12, 1.0e7), torque_limit=1.0e9)
        state = airborne_state(stiff)
        with pytest.raises(NumericalDivergence):
            quadsim.step(stiff, state, stiff.stand_pose + 0.5, terrain.flat_field(), 0.005)

    @pytest.mark.parametrize("dt", [0.0, -0.001, 0.02])
    def test_dt_is_validated(self, model, dt):
        with pytest.raises(ValueError):
            quadsim.step(model, airborne_state(model), model.stand_pose, terrain.flat_field(), dt)

    def test_negative_mass_rejected(self, model):
        with pytest.raises(ValueError):
            replace(model, calf_mass=-0.1)

    def test_trajectory_lines(self, model, tmp_path):
        path = tmp_path / "traj.jsonl"
        quadsim.write_trajectory([airborne_state(model)] * 3, str(path))
        assert len(path.read_text().splitlines()) == 3
