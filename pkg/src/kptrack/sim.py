"""Floating-base rigid-body dynamics with penalty ground contact and PD actuation.

Generalized velocity is ``[v_base (world), w_base (world), qdot]`` for floating
models and ``qdot`` for fixed-base models. All internal routines operate on a
leading batch axis so that many environments step with one set of numpy calls;
the public functions accept unbatched states as well.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from kptrack import _kernels
from kptrack import rotations as rot
from kptrack.model import RobotModel, fk_arrays


class SimulationError(RuntimeError):
    """The integrated state became non-finite."""


@dataclass
class SimState:
    base_position: np.ndarray
    base_orientation: np.ndarray
    joint_positions: np.ndarray
    base_linear_velocity: np.ndarray
    base_angular_velocity: np.ndarray
    joint_velocities: np.ndarray
    time: np.ndarray | float = 0.0
    last_contact_forces: np.ndarray | None = None

    @classmethod
    def from_pose(cls, model: RobotModel, base_position=None, base_orientation=None, q=None, batch=None):
        n = model.num_joints
        shape = () if batch is None else (batch,)
        pos = np.zeros(shape + (3,)) if base_position is None else np.broadcast_to(base_position, shape + (3,)).astype(float)
        quat = (np.broadcast_to(rot.IDENTITY_QUAT, shape + (4,)) if base_orientation is None
                else np.broadcast_to(base_orientation, shape + (4,))).astype(float)
        q = np.broadcast_to(model.arrays.default_pose if q is None else q, shape + (n,)).astype(float)
        s = len(model.contact_spheres)
        return cls(
            pos.copy(), quat.copy(), q.copy(),
            np.zeros(shape + (3,)), np.zeros(shape + (3,)), np.zeros(shape + (n,)),
            np.zeros(shape) if batch is not None else 0.0,
            np.zeros(shape + (s, 3)),
        )

    @property
    def batched(self) -> bool:
        return np.ndim(self.base_position) == 2

    def copy(self) -> "SimState":
        return SimState(**{k: (np.array(v, copy=True) if v is not None else None) for k, v in self.__dict__.items()})

    def as_batch(self) -> "SimState":
        if self.batched:
            return self
        out = {k: (np.asarray(v, dtype=float)[None] if v is not None else None) for k, v in self.__dict__.items()}
        return SimState(**out)

    def unbatch(self) -> "SimState":
        out = {k: (np.asarray(v)[0] if v is not None else None) for k, v in self.__dict__.items()}
        out["time"] = float(out["time"])
        return SimState(**out)

    def velocity_vector(self, model: RobotModel):
        parts = [] if model.fixed_base else [self.base_linear_velocity, self.base_angular_velocity]
        return np.concatenate(parts + [self.joint_velocities], axis=-1)


@dataclass
class PDGains:
    kp: np.ndarray
    kd: np.ndarray

    def __post_init__(self):
        self.kp = np.asarray(self.kp, dtype=float)
        self.kd = np.asarray(self.kd, dtype=float)
        if np.any(self.kp <= 0) or np.any(self.kd < 0):
            raise ValueError("PD gains require kp > 0 and kd >= 0")

    @classmethod
    def from_model(cls, model: RobotModel) -> "PDGains":
        return cls(model.arrays.kp.copy(), model.arrays.kd.copy())


@dataclass
class ContactParams:
    stiffness: float = 5.0e4  # N/m
    damping: float = 500.0  # N s/m
    friction: float = 1.0
    # tangential viscous gain before the Coulomb clamp, N s/m
    friction_damping: float = 1000.0


@dataclass
class SimConfig:
    physics_dt: float = 1.0 / 200.0
    substeps_per_control: int = 4
    gravity: float = 9.81
    contact: ContactParams = field(default_factory=ContactParams)
    action_scale: float = 0.25
    action_clip: float = 10.0
    torque_limits: np.ndarray | None = None  # defaults to the model's limits

    def __post_init__(self):
        if not self.physics_dt > 0:
            raise ValueError("physics_dt must be positive")
        if self.substeps_per_control < 1:
            raise ValueError("substeps_per_control must be >= 1")
        if self.contact.friction < 0:
            raise ValueError("friction must be non-negative")

    @property
    def control_dt(self) -> float:
        return self.physics_dt * self.substeps_per_control

    @property
    def gravity_vector(self):
        return np.array([0.0, 0.0, -self.gravity])


@dataclass
class BodyParams:
    """Per-link inertial parameters, optionally batched (randomized per environment)."""

    masses: np.ndarray
    coms: np.ndarray
    inertias: np.ndarray

    @classmethod
    def from_model(cls, model: RobotModel) -> "BodyParams":
        a = model.arrays
        return cls(a.masses.copy(), a.coms.copy(), a.inertias.copy())

    def randomized(self, mass_scale=None, base_com_offset=None) -> "BodyParams":
        masses, coms, inertias = self.masses, self.coms, self.inertias
        if mass_scale is not None:
            mass_scale = np.asarray(mass_scale, dtype=float)
            masses = masses * mass_scale
            inertias = inertias * mass_scale[..., None, None]
        if base_com_offset is not None:
            base_com_offset = np.asarray(base_com_offset, dtype=float)
            coms = np.broadcast_to(coms, base_com_offset.shape[:-1] + coms.shape[-2:]).copy()
            coms[..., 0, :] += base_com_offset
        return BodyParams(masses, coms, inertias)


@dataclass
class GroundContactResult:
    force: np.ndarray  # (..., S, 3) N
    in_contact: np.ndarray  # (..., S)
    slip_velocity: np.ndarray  # (..., S, 3) m/s, tangential


def _cross(a, b):
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


class Geometry:
    """Configuration-dependent quantities of a batch of states."""

    def __init__(self, model: RobotModel, state: SimState, body: BodyParams | None):
        a = model.arrays
        self.model = model
        self.fixed = model.fixed_base
        body = body or BodyParams(a.masses, a.coms, a.inertias)
        self.body = body
        N = state.base_position.shape[0]
        n, L = model.num_joints, model.num_links
        self.N, self.n, self.L = N, n, L
        base_rot = rot.quat_to_matrix(state.base_orientation)
        pos, R = fk_arrays(a, state.base_position, base_rot, state.joint_positions)
        self.pos, self.R = pos, R
        self.x0 = pos[:, 0]
        self.jpos = pos[:, a.child]
        self.axes = np.einsum("Nnij,nj->Nni", R[:, a.parent], a.axes) if n else np.zeros((N, 0, 3))
        coms = np.broadcast_to(body.coms, (N, L, 3))
        self.com = pos + np.einsum("Nlij,Nlj->Nli", R, coms)
        self.masses = np.broadcast_to(body.masses, (N, L))
        self.inertia_world = R @ np.broadcast_to(body.inertias, (N, L, 3, 3)) @ np.swapaxes(R, -1, -2)
        self.Jv_com = self.point_jacobian(np.arange(L), self.com)
        self.Jw = self.angular_jacobian()
        if len(a.sphere_link):
            sl = a.sphere_link
            self.spheres = pos[:, sl] + np.einsum("Nsij,sj->Nsi", R[:, sl], a.sphere_offset)
            self.Jv_sphere = self.point_jacobian(sl, self.spheres)
        else:
            self.spheres = np.zeros((N, 0, 3))
            self.Jv_sphere = np.zeros((N, 0, 3, model.nv))

    @property
    def total_mass(self):
        return self.masses.sum(axis=-1)

    def point_jacobian(self, lid, points):
        """Linear velocity Jacobian (N, M, 3, nv) of points rigidly attached to links ``lid``."""
        a = self.model.arrays
        N, M = points.shape[0], points.shape[1]
        anc = a.ancestors[lid]  # (M, n)
        rel = points[:, :, None, :] - self.jpos[:, None, :, :]  # (N, M, n, 3)
        cols = _cross(np.broadcast_to(self.axes[:, None], rel.shape), rel) * anc[None, :, :, None]
        joint_part = np.swapaxes(cols, -1, -2)  # (N, M, 3, n)
        if self.fixed:
            return joint_part
        J = np.empty((N, M, 3, 6 + self.n))
        J[..., :3] = np.eye(3)
        J[..., 3:6] = -rot.skew(points - self.x0[:, None, :])
        J[..., 6:] = joint_part
        return J

    def angular_jacobian(self):
        a = self.model.arrays
        cols = self.axes[:, None, :, :] * a.ancestors[None, :, :, None]  # (N, L, n, 3)
        joint_part = np.swapaxes(cols, -1, -2)
        if self.fixed:
            return joint_part
        J = np.empty((self.N, self.L, 3, 6 + self.n))
        J[..., :3] = 0.0
        J[..., 3:6] = np.eye(3)
        J[..., 6:] = joint_part
        return J

    def mass_matrix(self):
        N, L, nv = self.N, self.L, self.model.nv
        Jv = self.Jv_com.reshape(N, L * 3, nv)
        mJv = (self.Jv_com * self.masses[:, :, None, None]).reshape(N, L * 3, nv)
        IJw = (self.inertia_world @ self.Jw).reshape(N, L * 3, nv)
        M = np.swapaxes(Jv, -1, -2) @ mJv + np.swapaxes(self.Jw.reshape(N, L * 3, nv), -1, -2) @ IJw
        arm = self.model.arrays.armature
        if arm.any():
            idx = np.arange(nv - self.n, nv)
            M[:, idx, idx] += arm
        return 0.5 * (M + np.swapaxes(M, -1, -2))

    def linear_momentum(self, v):
        return np.einsum("Nl,Nlk->Nk", self.masses, np.einsum("Nlij,Nj->Nli", self.Jv_com, v))


class Motion:
    """Velocity-dependent quantities for a Geometry and generalized velocity."""

    def __init__(self, geo: Geometry, v):
        a = geo.model.arrays
        n = geo.n
        qd = v[:, -n:] if n else np.zeros((geo.N, 0))
        if geo.fixed:
            v0 = np.zeros((geo.N, 3))
            w0 = np.zeros((geo.N, 3))
        else:
            v0, w0 = v[:, :3], v[:, 3:6]
        self.v0, self.w0 = v0, w0
        S = qd[..., None] * geo.axes  # (N, n, 3)
        self.w = w0[:, None, :] + np.einsum("ln,Nnk->Nlk", a.ancestors, S)
        wp = self.w[:, a.parent] if n else np.zeros((geo.N, 0, 3))
        dS = _cross(wp, S)
        self.alpha = np.einsum("ln,Nnk->Nlk", a.ancestors, dS)
        self.vcom = np.einsum("Nlij,Nj->Nli", geo.Jv_com, v)
        self.vorigin = self.vcom - _cross(self.w, geo.com - geo.pos)
        jvel = self.vorigin[:, a.child]
        rel = geo.com[:, :, None, :] - geo.jpos[:, None, :, :]
        dv = self.vcom[:, :, None, :] - jvel[:, None, :, :]
        terms = _cross(np.broadcast_to(dS[:, None], rel.shape), rel) + _cross(np.broadcast_to(S[:, None], dv.shape), dv)
        self.acom_vp = _cross(w0[:, None, :], self.vcom - v0[:, None, :]) + np.einsum("ln,Nlnk->Nlk", a.ancestors, terms)
        self.sphere_vel = np.einsum("Nsij,Nj->Nsi", geo.Jv_sphere, v)

    def bias(self, geo: Geometry, gravity_vector):
        """Generalized Coriolis, centrifugal and gravity force (N, nv)."""
        f = geo.masses[:, :, None] * (self.acom_vp - gravity_vector)
        Iw = np.einsum("Nlij,Nlj->Nli", geo.inertia_world, self.w)
        torque = np.einsum("Nlij,Nlj->Nli", geo.inertia_world, self.alpha) + _cross(self.w, Iw)
        return np.einsum("Nlki,Nlk->Ni", geo.Jv_com, f) + np.einsum("Nlki,Nlk->Ni", geo.Jw, torque)


# ---------------------------------------------------------------------------
# public operations


def _prepare(model, state, body):
    single = not state.batched
    st = state.as_batch()
    return single, st, Geometry(model, st, body)


def mass_matrix(model: RobotModel, state: SimState, body: BodyParams | None = None):
    single, st, geo = _prepare(model, state, body)
    M = geo.mass_matrix()
    return M[0] if single else M


def bias_forces(model: RobotModel, state: SimState, gravity: float = 9.81, body: BodyParams | None = None):
    single, st, geo = _prepare(model, state, body)
    b = Motion(geo, st.velocity_vector(model)).bias(geo, np.array([0.0, 0.0, -gravity]))
    return b[0] if single else b


def kinetic_energy(model, state, body=None):
    single, st, geo = _prepare(model, state, body)
    v = st.velocity_vector(model)
    e = 0.5 * np.einsum("Ni,Nij,Nj->N", v, geo.mass_matrix(), v)
    return e[0] if single else e


def potential_energy(model, state, gravity=9.81, body=None):
    single, st, geo = _prepare(model, state, body)
    e = np.sum(geo.masses * geo.com[..., 2], axis=-1) * gravity
    return e[0] if single else e


def linear_momentum(model, state, body=None):
    single, st, geo = _prepare(model, state, body)
    p = geo.linear_momentum(st.velocity_vector(model))
    return p[0] if single else p


def link_kinematics(model: RobotModel, state: SimState, body: BodyParams | None = None):
    """World link poses and velocities ``(positions, rotations, angular, origin linear)``."""
    single, st, geo = _prepare(model, state, body)
    mot = Motion(geo, st.velocity_vector(model))
    out = (geo.pos, geo.R, mot.w, mot.vorigin)
    return tuple(x[0] for x in out) if single else out


def ground_contact(positions, velocities, radius, params: ContactParams, friction=None) -> GroundContactResult:
    """Penalty normal force with a Coulomb-clamped viscous tangential force."""
    positions = np.asarray(positions, dtype=float)
    velocities = np.asarray(velocities, dtype=float)
    mu = params.friction if friction is None else np.asarray(friction, dtype=float)[..., None]
    depth = radius - positions[..., 2]
    in_contact = depth > 0.0
    normal = np.where(in_contact, np.maximum(params.stiffness * depth - params.damping * velocities[..., 2], 0.0), 0.0)
    slip = velocities.copy()
    slip[..., 2] = 0.0
    slip = np.where(in_contact[..., None], slip, 0.0)
    tangential = -params.friction_damping * slip
    limit = mu * normal
    mag = np.linalg.norm(tangential, axis=-1)
    scale = np.where(mag > limit, limit / np.where(mag > 0, mag, 1.0), 1.0)
    force = tangential * scale[..., None]
    force[..., 2] = normal
    return GroundContactResult(force, in_contact, slip)


def contact_forces(model: RobotModel, state: SimState, config: SimConfig, friction=None, body=None) -> GroundContactResult:
    single, st, geo = _prepare(model, state, body)
    mot = Motion(geo, st.velocity_vector(model))
    res = ground_contact(geo.spheres, mot.sphere_vel, model.arrays.sphere_radius, config.contact, friction)
    if single:
        return GroundContactResult(res.force[0], res.in_contact[0], res.slip_velocity[0])
    return res


def pd_torques(gains: PDGains, q_des, q, qd, torque_limits=None, kp_scale=1.0, kd_scale=1.0, motor_strength=1.0):
    """``kp (q_des - q) - kd qd``, scaled by motor strength and clamped to the limits."""
    tau = gains.kp * kp_scale * (np.asarray(q_des) - q) - gains.kd * kd_scale * np.asarray(qd)
    tau = tau * motor_strength
    if torque_limits is not None:
        tau = np.clip(tau, -torque_limits, torque_limits)
    return tau


def action_to_target(config: SimConfig, default_pose, a):
    return np.asarray(default_pose) + config.action_scale * np.clip(a, -config.action_clip, config.action_clip)


class DelayBuffer:
    """Ring of the last few actions; ``push`` returns the action delayed by ``delay`` steps."""

    MAX_DELAY = 3

    def __init__(self, num_joints: int, delay=0, batch: int | None = None):
        shape = (self.MAX_DELAY + 1, num_joints) if batch is None else (batch, self.MAX_DELAY + 1, num_joints)
        self.buffer = np.zeros(shape)
        self.delay = np.asarray(delay, dtype=int)
        if np.any(self.delay < 0) or np.any(self.delay > self.MAX_DELAY):
            raise ValueError("control delay must lie in {0, 1, 2, 3}")
        self.batch = batch

    def reset(self, mask=None, delay=None):
        if self.batch is None:
            self.buffer[:] = 0.0
        else:
            self.buffer[mask if mask is not None else slice(None)] = 0.0
        if delay is not None:
            if mask is None or self.batch is None:
                self.delay = np.asarray(delay, dtype=int)
            else:
                d = np.broadcast_to(self.delay, (self.batch,)).copy()
                d[mask] = np.asarray(delay, dtype=int)[mask] if np.ndim(delay) else delay
                self.delay = d

    def push(self, action):
        self.buffer = np.roll(self.buffer, 1, axis=-2)
        self.buffer[..., 0, :] = action
        if self.batch is None:
            return self.buffer[int(self.delay)].copy()
        d = np.broadcast_to(self.delay, (self.batch,))
        return self.buffer[np.arange(self.batch), d].copy()


@dataclass
class StepInfo:
    torques: np.ndarray
    contact: GroundContactResult
    q_des: np.ndarray
    applied_action: np.ndarray
    unstable: np.ndarray
    mean_contact_force: np.ndarray
    # link frames and velocities at the end of the step (batched)
    link_positions: np.ndarray
    link_rotations: np.ndarray
    link_angular_velocities: np.ndarray
    link_origin_velocities: np.ndarray


def _per_env(value, N, n):
    return np.ascontiguousarray(np.broadcast_to(np.asarray(value, dtype=float), (N, n)))


def step_control(
    model: RobotModel,
    state: SimState,
    action,
    config: SimConfig,
    gains: PDGains,
    push=None,
    delay_buffer: DelayBuffer | None = None,
    body: BodyParams | None = None,
    friction=None,
    kp_scale=1.0,
    kd_scale=1.0,
    motor_strength=1.0,
    raise_on_unstable: bool = True,
):
    """Advance one control period: delayed action -> PD targets -> sub-stepped dynamics.

    Returns ``(new_state, StepInfo)``. Each substep drifts half a step, solves
    ``M vdot = tau - bias`` at the midpoint using the midpoint velocity (two
    Newton passes, stiff PD and contact terms linearized implicitly), then
    drifts the remaining half. For floating bases the
    total linear momentum is re-anchored to its impulse-integrated value, so it
    is conserved exactly when no external force acts.
    """
    single = not state.batched
    st = state.as_batch()
    N = st.base_position.shape[0]
    a = model.arrays
    n, L, S = model.num_joints, model.num_links, len(a.sphere_link)
    action = np.atleast_2d(np.asarray(action, dtype=float))
    applied = delay_buffer.push(action[0] if single and delay_buffer.batch is None else action) if delay_buffer else action
    applied = np.atleast_2d(applied)
    q_des = action_to_target(config, a.default_pose, applied)
    limits = a.torque_limit if config.torque_limits is None else np.asarray(config.torque_limits, dtype=float)
    body = body or BodyParams.from_model(model)

    base_pos = np.array(st.base_position, dtype=float)
    quat = np.array(st.base_orientation, dtype=float)
    q = np.array(st.joint_positions, dtype=float)
    v = np.ascontiguousarray(st.velocity_vector(model), dtype=float)
    if push is not None and not model.fixed_base:
        v[:, :3] += np.broadcast_to(push, (N, 3))
    mu = np.broadcast_to(np.asarray(config.contact.friction if friction is None else friction, dtype=float), (N,))

    link_pos = np.empty((N, L, 3))
    link_rot = np.empty((N, L, 3, 3))
    link_w = np.empty((N, L, 3))
    link_vo = np.empty((N, L, 3))
    tau = np.zeros((N, n))
    fc_last = np.zeros((N, S, 3))
    fc_mean = np.zeros((N, S, 3))
    c = config.contact
    _kernels.step_batch(
        model.fixed_base, base_pos, quat, q, v,
        np.ascontiguousarray(np.broadcast_to(q_des, (N, n))),
        _per_env(gains.kp * np.asarray(kp_scale, dtype=float), N, n),
        _per_env(gains.kd * np.asarray(kd_scale, dtype=float), N, n),
        _per_env(motor_strength, N, n),
        np.ascontiguousarray(np.broadcast_to(limits, (n,)), dtype=float),
        np.ascontiguousarray(np.broadcast_to(body.masses, (N, L))),
        np.ascontiguousarray(np.broadcast_to(body.coms, (N, L, 3))),
        np.ascontiguousarray(np.broadcast_to(body.inertias, (N, L, 3, 3))),
        np.ascontiguousarray(mu),
        a.parent.astype(np.int64), a.child.astype(np.int64), a.joint_of_link,
        a.origins, a.axes, a.armature,
        a.sphere_link.astype(np.int64), a.sphere_offset, a.sphere_radius,
        float(c.stiffness), float(c.damping), float(c.friction_damping),
        float(config.gravity), float(config.physics_dt), int(config.substeps_per_control),
        link_pos, link_rot, link_w, link_vo, tau, fc_last, fc_mean,
    )
    off = 0 if model.fixed_base else 6
    out = SimState(
        base_pos, quat, q,
        v[:, :3].copy() if off else np.zeros((N, 3)),
        v[:, 3:6].copy() if off else np.zeros((N, 3)),
        v[:, off:].copy(),
        np.asarray(st.time, dtype=float) + config.control_dt,
        fc_last,
    )
    unstable = ~np.all(np.isfinite(v), axis=-1) | ~np.all(np.isfinite(base_pos), axis=-1) | ~np.all(np.isfinite(quat), axis=-1)
    if raise_on_unstable and unstable.any():
        raise SimulationError("non-finite state after control step")
    sph = link_pos[:, a.sphere_link] + np.einsum("Nsij,sj->Nsi", link_rot[:, a.sphere_link], a.sphere_offset)
    sph_vel = link_vo[:, a.sphere_link] + _cross(link_w[:, a.sphere_link], sph - link_pos[:, a.sphere_link])
    in_contact = sph[..., 2] < a.sphere_radius
    slip = np.where(in_contact[..., None], sph_vel * np.array([1.0, 1.0, 0.0]), 0.0)
    contact = GroundContactResult(fc_last, fc_last[..., 2] > 0.0, slip)
    info = StepInfo(tau, contact, q_des, applied, unstable, fc_mean, link_pos, link_rot, link_w, link_vo)
    if single:
        first = lambda x: x[0]
        info = StepInfo(tau[0], GroundContactResult(fc_last[0], contact.in_contact[0], slip[0]), q_des[0], applied[0],
                        unstable[0], fc_mean[0], *map(first, (link_pos, link_rot, link_w, link_vo)))
        return out.unbatch(), info
    return out, info


def dump_trajectory(records, path) -> None:
    """Write one JSON line per control step."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def trajectory_record(state: SimState, info: StepInfo) -> dict:
    return {
        "time": float(state.time),
        "base_position": np.asarray(state.base_position).tolist(),
        "base_orientation": np.asarray(state.base_orientation).tolist(),
        "q": np.asarray(state.joint_positions).tolist(),
        "qd": np.asarray(state.joint_velocities).tolist(),
        "torques": np.asarray(info.torques).tolist(),
        "contact_forces": np.asarray(info.contact.force).tolist(),
    }
