import json

import numpy as np
import pytest

from kptrack import _kernels
from kptrack import rotations as rot
from kptrack.model import load_model, mirror_base_state, mirror_joint_vector, standing_height
from kptrack.sim import (
    BodyParams,
    ContactParams,
    DelayBuffer,
    PDGains,
    SimConfig,
    SimState,
    SimulationError,
    action_to_target,
    bias_forces,
    contact_forces,
    dump_trajectory,
    ground_contact,
    kinetic_energy,
    linear_momentum,
    mass_matrix,
    pd_torques,
    potential_energy,
    step_control,
    trajectory_record,
)


def random_state(model, rng, batch=None, speed=1.0):
    a = model.arrays
    shape = () if batch is None else (batch,)
    q = rng.uniform(a.lower, a.upper, size=shape + (model.num_joints,))
    quat = rng.standard_normal(shape + (4,))
    quat /= np.linalg.norm(quat, axis=-1, keepdims=True)
    s = SimState.from_pose(model, rng.standard_normal(shape + (3,)), quat, q, batch=batch)
    s.base_linear_velocity = speed * rng.standard_normal(shape + (3,))
    s.base_angular_velocity = speed * rng.standard_normal(shape + (3,))
    s.joint_velocities = speed * rng.standard_normal(shape + (model.num_joints,))
    return s


def passive(model, state, config, steps):
    """Integrate with the actuators switched off."""
    gains = PDGains.from_model(model)
    zero = np.zeros(model.num_joints)
    out = [state]
    for _ in range(steps):
        state, _ = step_control(model, state, zero, config, gains, motor_strength=0.0)
        out.append(state)
    return out


# ---------------------------------------------------------------------------
# actuation


def test_pd_gains_validation():
    with pytest.raises(ValueError):
        PDGains([0.0], [1.0])
    with pytest.raises(ValueError):
        PDGains([1.0], [-1.0])


def test_pd_torques_cases():
    g = PDGains([200.0], [5.0])
    assert pd_torques(g, [0.3], [0.3], [0.0])[0] == 0.0
    assert np.isclose(pd_torques(g, [0.1], [0.0], [1.0])[0], 15.0)
    assert pd_torques(g, [1.0], [0.0], [0.0], torque_limits=np.array([50.0]))[0] == 50.0
    assert pd_torques(g, [-1.0], [0.0], [0.0], torque_limits=np.array([50.0]))[0] == -50.0


def test_action_to_target_cases():
    cfg = SimConfig()
    d = np.array([0.1, -0.2, 0.3])
    assert np.array_equal(action_to_target(cfg, d, np.zeros(3)), d)
    assert np.allclose(action_to_target(cfg, d, [100.0, 0.0, 0.0]), d + [2.5, 0.0, 0.0])
    assert np.allclose(action_to_target(cfg, d, [-0.4, 0.0, 0.0]), d + [-0.1, 0.0, 0.0])


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(physics_dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(substeps_per_control=0)
    with pytest.raises(ValueError):
        SimConfig(contact=ContactParams(friction=-0.1))
    assert np.isclose(SimConfig().control_dt, 0.02)


def test_delay_buffer_applies_old_action():
    for d in range(4):
        buf = DelayBuffer(2, delay=d)
        out = [buf.push(np.full(2, float(k + 1)))[0] for k in range(6)]
        expected = [max(0.0, k + 1 - d) for k in range(6)]
        assert out == expected
    with pytest.raises(ValueError):
        DelayBuffer(2, delay=4)


def test_delay_in_step_control():
    model = load_model("single-joint")
    gains = PDGains.from_model(model)
    cfg = SimConfig()
    buf = DelayBuffer(1, delay=2)
    s = SimState.from_pose(model)
    applied = []
    for k in range(4):
        s, info = step_control(model, s, [float(k + 1)], cfg, gains, delay_buffer=buf)
        applied.append(float(info.applied_action[0]))
    assert applied == [0.0, 0.0, 1.0, 2.0]


# ---------------------------------------------------------------------------
# dynamics terms


def test_free_body_mass_matrix():
    model = load_model("free-body")
    rng = np.random.default_rng(0)
    s = random_state(model, rng)
    M = mass_matrix(model, s)
    R = rot.quat_to_matrix(s.base_orientation)
    I_body = np.array(model.links[0].inertia)
    assert np.allclose(M[:3, :3], 2.0 * np.eye(3))
    assert np.allclose(M[:3, 3:], 0.0, atol=1e-14)
    assert np.allclose(M[3:, 3:], R @ I_body @ R.T, atol=1e-14)


def test_mass_matrix_spd_random_states():
    model = load_model("mini-humanoid")
    rng = np.random.default_rng(1)
    M = mass_matrix(model, random_state(model, rng, batch=1000))
    assert np.allclose(M, np.swapaxes(M, 1, 2), atol=1e-12)
    assert np.min(np.linalg.eigvalsh(M)) > 0


def test_mass_matrix_mirror_conjugation_at_rest():
    model = load_model("mini-humanoid")
    s = SimState.from_pose(model, [0.0, 0.0, 0.6])
    M = mass_matrix(model, s)
    sym = model.symmetry
    T = np.zeros((18, 18))
    T[:3, :3] = np.diag([1.0, -1.0, 1.0])
    T[3:6, 3:6] = np.diag([-1.0, 1.0, -1.0])
    for i, (p, sg) in enumerate(zip(sym.joint_perm, sym.joint_sign)):
        T[6 + i, 6 + p] = sg
    assert np.allclose(T @ M @ T.T, M, atol=1e-12)


def test_bias_zero_at_rest_without_gravity():
    model = load_model("mini-humanoid")
    s = random_state(model, np.random.default_rng(2), speed=0.0)
    assert np.allclose(bias_forces(model, s, gravity=0.0), 0.0, atol=1e-14)


def test_pendulum_gravity_torque():
    model = load_model("pendulum")
    m, l_com, g = 1.0, 0.25, 9.81
    for theta in (0.2, -0.9, 2.5):
        s = SimState.from_pose(model, q=[theta])
        # M qdd = tau - bias, so the bias holds +m g l sin(theta) for a +y hinge
        assert np.isclose(bias_forces(model, s)[0], m * g * l_com * np.sin(theta), atol=1e-12)


@pytest.mark.parametrize("name", ["chain3", "mini-humanoid-fixed"])
def test_bias_matches_lagrangian(name):
    # b = Mdot v - dT/dq + dV/dq for fixed-base models, with derivatives by central differences
    model = load_model(name)
    rng = np.random.default_rng(3)
    eps = 1e-6
    for _ in range(5):
        s = random_state(model, rng)
        q, v = s.joint_positions, s.joint_velocities

        def at(qq, vv=v):
            st = s.copy()
            st.joint_positions, st.joint_velocities = qq, vv
            return st

        Mdot = (mass_matrix(model, at(q + eps * v)) - mass_matrix(model, at(q - eps * v))) / (2 * eps)
        dT = np.zeros_like(q)
        dV = np.zeros_like(q)
        for i in range(len(q)):
            e = np.zeros_like(q)
            e[i] = eps
            dT[i] = (kinetic_energy(model, at(q + e)) - kinetic_energy(model, at(q - e))) / (2 * eps)
            dV[i] = (potential_energy(model, at(q + e)) - potential_energy(model, at(q - e))) / (2 * eps)
        expected = Mdot @ v - dT + dV
        assert np.allclose(bias_forces(model, s), expected, atol=1e-6)


def test_kernel_matches_reference_mass_matrix_and_bias():
    model = load_model("mini-humanoid")
    a = model.arrays
    rng = np.random.default_rng(4)
    body = BodyParams.from_model(model)
    L, n = model.num_links, model.num_joints
    for _ in range(10):
        s = random_state(model, rng)
        x, R, jaxis = np.empty((L, 3)), np.empty((L, 3, 3)), np.empty((n, 3))
        _kernels._fk(s.base_position, s.base_orientation, s.joint_positions, a.parent.astype(np.int64),
                     a.child.astype(np.int64), a.origins, a.axes, x, R, jaxis)
        com, Iw = np.empty((L, 3)), np.empty((L, 3, 3))
        _kernels._link_inertials(x, R, body.coms, body.inertias, com, Iw)
        M = np.empty((n + 6, n + 6))
        _kernels._mass_matrix(False, a.parent.astype(np.int64), a.child.astype(np.int64), a.joint_of_link, x, jaxis,
                              body.masses, com, Iw, a.armature, np.empty(L), np.empty((L, 3)), np.empty((L, 3, 3)), M)
        assert np.allclose(M, mass_matrix(model, s), atol=1e-12)
        v = s.velocity_vector(model)
        w, vo, alpha, ao = (np.empty((L, 3)) for _ in range(4))
        _kernels._velocities(v, False, a.parent.astype(np.int64), a.child.astype(np.int64), x, jaxis, w, vo, alpha, ao)
        b = np.empty(n + 6)
        _kernels._bias(False, a.parent.astype(np.int64), a.child.astype(np.int64), x, jaxis, body.masses, com, Iw,
                       w, alpha, ao, 9.81, np.empty((L, 3)), np.empty((L, 3)), b)
        assert np.allclose(b, bias_forces(model, s), atol=1e-10)


# ---------------------------------------------------------------------------
# contact


def test_contact_cases():
    p = ContactParams(stiffness=1e4, damping=100.0, friction=0.8, friction_damping=1000.0)
    r = ground_contact(np.array([[0.0, 0.0, 1.0]]), np.zeros((1, 3)), 0.02, p)
    assert not r.in_contact[0] and np.all(r.force == 0.0)
    r = ground_contact(np.array([[0.0, 0.0, 0.015]]), np.zeros((1, 3)), 0.02, p)
    assert r.in_contact[0]
    assert np.isclose(r.force[0, 2], 1e4 * 0.005)
    assert np.allclose(r.force[0, :2], 0.0)
    r = ground_contact(np.array([[0.0, 0.0, 0.015]]), np.array([[30.0, -40.0, 0.0]]), 0.02, p)
    ft = r.force[0, :2]
    assert np.isclose(np.linalg.norm(ft), 0.8 * r.force[0, 2])
    assert np.allclose(ft / np.linalg.norm(ft), [-0.6, 0.8])


def test_contact_normal_never_pulls():
    p = ContactParams()
    r = ground_contact(np.array([[0.0, 0.0, 0.019]]), np.array([[0.0, 0.0, 10.0]]), 0.02, p)
    assert r.force[0, 2] == 0.0


def test_humanoid_rest_penetration_small():
    model = load_model("mini-humanoid")
    cfg = SimConfig()
    gains = PDGains.from_model(model)
    s = SimState.from_pose(model, [0.0, 0.0, standing_height(model)])
    for _ in range(100):
        s, info = step_control(model, s, np.zeros(12), cfg, gains)
    res = contact_forces(model, s, cfg)
    total = res.force[:, 2].sum()
    assert np.isclose(total, sum(l.mass for l in model.links) * 9.81, rtol=0.02)
    # penalty contact sinks a few millimetres under the full body weight
    depth = standing_height(model) - s.base_position[2]
    assert 0.0 < depth < 5e-3


# ---------------------------------------------------------------------------
# integration


def test_ballistic_free_body():
    model = load_model("free-body")
    cfg = SimConfig(gravity=0.0)
    s = SimState.from_pose(model, [0.0, 0.0, 5.0])
    s.base_linear_velocity = np.array([1.0, -2.0, 0.5])
    out, _ = step_control(model, s, np.zeros(0), cfg, PDGains.from_model(model))
    assert np.allclose(out.base_linear_velocity, [1.0, -2.0, 0.5], atol=1e-14)
    assert np.allclose(out.base_position, [0.0, 0.0, 5.0] + np.array([1.0, -2.0, 0.5]) * 0.02, atol=1e-14)


def test_push_adds_velocity_exactly():
    model = load_model("free-body")
    cfg = SimConfig(gravity=0.0)
    s = SimState.from_pose(model, [0.0, 0.0, 5.0])
    s.base_linear_velocity = np.array([0.25, 0.0, 0.0])
    out, _ = step_control(model, s, np.zeros(0), cfg, PDGains.from_model(model), push=[1.0, 0.0, 0.0])
    assert out.base_linear_velocity[0] == 1.25


def test_pendulum_small_angle_period():
    model = load_model("pendulum")
    m, d = 1.0, 0.25
    inertia_com = np.array(model.links[1].inertia)[1, 1]
    period = 2 * np.pi * np.sqrt((inertia_com + m * d * d) / (m * 9.81 * d))
    states = passive(model, SimState.from_pose(model, q=[0.01]), SimConfig(), 500)
    theta = np.array([s.joint_positions[0] for s in states])
    t = np.arange(len(theta)) * 0.02
    # downward zero crossings, located by linear interpolation
    idx = np.nonzero((theta[:-1] > 0) & (theta[1:] <= 0))[0]
    crossings = t[idx] + 0.02 * theta[idx] / (theta[idx] - theta[idx + 1])
    measured = np.mean(np.diff(crossings))
    assert abs(measured - period) / period < 0.01


def test_chain_energy_drift():
    model = load_model("chain3")
    cfg = SimConfig()
    s = SimState.from_pose(model, q=[0.8, -0.5, 0.3])
    e0 = kinetic_energy(model, s) + potential_energy(model, s)
    # potential measured from the lowest configuration so the drift is relative to the motion's energy
    ref = potential_energy(model, SimState.from_pose(model, q=[0.0, 0.0, 0.0]))
    states = passive(model, s, cfg, 500)
    e = np.array([kinetic_energy(model, x) + potential_energy(model, x) for x in states])
    assert np.max(np.abs(e - e0)) / (e0 - ref) < 0.01


def test_free_flight_momentum():
    model = load_model("mini-humanoid")
    cfg = SimConfig(gravity=0.0)
    rng = np.random.default_rng(5)
    s = random_state(model, rng)
    s.base_position = np.array([0.0, 0.0, 10.0])
    p0 = linear_momentum(model, s)
    for st in passive(model, s, cfg, 20)[1:]:
        p = linear_momentum(model, st)
        assert np.linalg.norm(p - p0) / np.linalg.norm(p0) < 1e-8


def test_mirror_equivariance_with_contact():
    model = load_model("mini-humanoid")
    cfg = SimConfig()
    gains = PDGains.from_model(model)
    sym = model.symmetry
    rng = np.random.default_rng(6)
    N = 50
    s = random_state(model, rng, batch=N, speed=0.5)
    s.base_position[:, 2] = rng.uniform(0.55, 0.65, N)
    s.base_orientation = rot.quat_normalize(np.array([1.0, 0.0, 0.0, 0.0]) + 0.1 * rng.standard_normal((N, 4)))
    act = rng.standard_normal((N, 12))
    out, _ = step_control(model, s, act, cfg, gains)
    ms = s.copy()
    ms.base_position, ms.base_orientation, ms.base_linear_velocity, ms.base_angular_velocity = mirror_base_state(
        sym, s.base_position, s.base_orientation, s.base_linear_velocity, s.base_angular_velocity)
    ms.joint_positions = mirror_joint_vector(sym, s.joint_positions)
    ms.joint_velocities = mirror_joint_vector(sym, s.joint_velocities)
    mout, _ = step_control(model, ms, mirror_joint_vector(sym, act), cfg, gains)
    exp = mirror_base_state(sym, out.base_position, out.base_orientation, out.base_linear_velocity,
                            out.base_angular_velocity)
    got = (mout.base_position, mout.base_orientation, mout.base_linear_velocity, mout.base_angular_velocity)
    for x, y in zip(got, exp):
        if x.shape[-1] == 4:
            x, y = rot.canonical(x), rot.canonical(y)
        assert np.max(np.abs(x - y)) < 1e-9
    assert np.max(np.abs(mout.joint_positions - mirror_joint_vector(sym, out.joint_positions))) < 1e-9
    assert np.max(np.abs(mout.joint_velocities - mirror_joint_vector(sym, out.joint_velocities))) < 1e-9


def test_quaternion_stays_unit_and_deterministic():
    model = load_model("mini-humanoid")
    cfg = SimConfig()
    gains = PDGains.from_model(model)
    rng = np.random.default_rng(7)
    s0 = SimState.from_pose(model, [0.0, 0.0, standing_height(model)], batch=4)
    acts = rng.standard_normal((30, 4, 12))
    runs = []
    for _ in range(2):
        s = s0.copy()
        for a in acts:
            s, _ = step_control(model, s, a, cfg, gains)
        runs.append(s)
    assert np.allclose(np.linalg.norm(runs[0].base_orientation, axis=-1), 1.0, atol=1e-9)
    for k in runs[0].__dict__:
        assert np.array_equal(np.asarray(getattr(runs[0], k)), np.asarray(getattr(runs[1], k)))


def test_unstable_state_raises():
    model = load_model("single-joint")
    s = SimState.from_pose(model)
    s.joint_velocities = np.array([np.nan])
    with pytest.raises(SimulationError):
        step_control(model, s, [0.0], SimConfig(), PDGains.from_model(model))
    out, info = step_control(model, s, [0.0], SimConfig(), PDGains.from_model(model), raise_on_unstable=False)
    assert bool(info.unstable)


def test_trajectory_dump(tmp_path):
    model = load_model("single-joint")
    s = SimState.from_pose(model)
    recs = []
    for _ in range(3):
        s, info = step_control(model, s, [0.5], SimConfig(), PDGains.from_model(model))
        recs.append(trajectory_record(s, info))
    path = tmp_path / "traj.jsonl"
    dump_trajectory(recs, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    rec = json.loads(lines[-1])
    assert {"time", "base_position", "base_orientation", "q", "qd", "torques", "contact_forces"} <= set(rec)
    assert np.isclose(rec["time"], 0.06)
