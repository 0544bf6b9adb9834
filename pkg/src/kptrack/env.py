"""Keypoint tracking environment.

A batch of ``num_envs`` robots tracks reference clips. Each control step applies
the policy action through the PD simulator, advances the goal cursor, scores the
transition with the full reward stack, checks termination, swaps in a new clip
when one ends (the robot keeps its state) and assembles the observations:

* ``teacher``: single-step proprioception, global keypoint states, next goal
  keypoints, goal minus robot keypoint positions and the privileged block;
  observation noise applied.
* ``critic``: the same layout without noise or goal offset.
* ``student``: a history of proprioception plus a window of future goal
  keypoints expressed in the robot's heading frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from kptrack import rotations as rot
from kptrack.config import ConfigError
from kptrack.model import WEIGHT_CLASSES, RobotModel, fk_arrays, keypoints_local
from kptrack.motion import GoalTrack, MotionClip, goal_track, resample
from kptrack.sim import BodyParams, DelayBuffer, PDGains, SimConfig, SimState, link_kinematics, step_control

# ---------------------------------------------------------------------------
# configuration

REWARD_WEIGHTS = {
    "tracking_joint_pos": 32.0,
    "tracking_joint_vel": 16.0,
    "tracking_body_pos": 50.0,
    "tracking_body_rot": 20.0,
    "action_rate": -1.0,
    "energy": -1e-6,
    "dof_acc": -3e-6,
    "dof_limits": -100.0,
    "feet_slip": -5.0,
    "orientation": -50.0,
    "feet_contact": -0.03,
    "feet_orientation": -62.5,
    "feet_max_height": -2500.0,
    "feet_air_time": 1000.0,
    "termination": -200.0,
    "alive": 20.0,
}
TERM_NAMES = tuple(REWARD_WEIGHTS)
TRACKING_TERMS = TERM_NAMES[:4]

TERMINATION_NONE, TERMINATION_DEVIATION, TERMINATION_FALL, TERMINATION_UNSTABLE = 0, 1, 2, 3
TERMINATION_REASONS = ("none", "deviation", "fall", "unstable")


@dataclass
class RewardConfig:
    weights: dict = field(default_factory=lambda: dict(REWARD_WEIGHTS))
    sigma_jp: float = 0.5
    sigma_jv: float = 10.0
    sigma_bp: float = 0.3
    sigma_br: float = 1.0
    keypoint_class_weights: dict = field(default_factory=lambda: {"end_effector": 4.0, "upper": 2.0, "lower": 1.0})
    # only upper/lower occur on humanoid joints; end_effector covers rigs that tag joints that way
    joint_class_weights: dict = field(default_factory=lambda: {"end_effector": 4.0, "upper": 2.0, "lower": 1.0})
    use_class_weights: bool = True  # False gives uniform weights (the no-weights ablation)
    air_height_des: float = 0.1  # m
    air_time_des: float = 0.25  # s
    contact_threshold: float = 1.0  # N

    def __post_init__(self):
        unknown = set(self.weights) - set(REWARD_WEIGHTS)
        if unknown:
            raise ConfigError(f"unknown reward terms {sorted(unknown)}")
        self.weights = {**REWARD_WEIGHTS, **{k: float(v) for k, v in self.weights.items()}}
        for name in ("sigma_jp", "sigma_jv", "sigma_bp", "sigma_br"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for table in (self.keypoint_class_weights, self.joint_class_weights):
            if set(table) - set(WEIGHT_CLASSES):
                raise ConfigError(f"class weights must use classes from {WEIGHT_CLASSES}")
            if any(not v > 0 for v in table.values()):
                raise ConfigError("class weights must be positive")


@dataclass
class NoiseConfig:
    """Observation noise standard deviations (additive Gaussian)."""

    joint_pos: float = 0.01
    joint_vel: float = 0.1
    root_angvel: float = 0.5
    gravity: float = 0.1
    local_pos: float = 0.01
    global_pos: float = 0.01
    global_quat: float = 0.01
    global_linvel: float = 0.2
    global_angvel: float = 0.5
    goal_pos: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"noise std {f.name} must be non-negative")


def _check_range(name, r):
    if r is not None and (len(r) != 2 or r[0] > r[1]):
        raise ConfigError(f"{name} must be an ordered pair (lo, hi)")


@dataclass
class DomainRandConfig:
    """Randomization ranges; ``None`` disables a field (nominal value used)."""

    push_interval: float | None = 5.0  # s, measured from episode start
    push_range: tuple | None = (-1.0, 1.0)  # m/s, xy
    friction_range: tuple | None = (0.4, 1.25)
    # base CoM offset per axis in m; the published range has an unusable unit, so the
    # default is sized for the 0.6 m mini-humanoid
    com_range: tuple | None = (-0.02, 0.02)
    mass_range: tuple | None = (0.7, 1.3)
    kp_range: tuple | None = (0.75, 1.25)
    kd_range: tuple | None = (0.75, 1.25)
    motor_strength_range: tuple | None = (0.5, 1.5)
    delay_choices: tuple | None = (0, 1, 2, 3)
    goal_offset_range: tuple | None = (-0.02, 0.02)
    noise: NoiseConfig | None = field(default_factory=NoiseConfig)

    def __post_init__(self):
        for name in ("push_range", "friction_range", "com_range", "mass_range", "kp_range", "kd_range",
                     "motor_strength_range", "goal_offset_range"):
            r = getattr(self, name)
            if r is not None:
                r = tuple(float(x) for x in r)
                setattr(self, name, r)
            _check_range(name, r)
        if self.push_interval is not None and not self.push_interval > 0:
            raise ConfigError("push_interval must be positive")
        if self.delay_choices is not None:
            self.delay_choices = tuple(int(d) for d in self.delay_choices)
            if not self.delay_choices or any(d < 0 or d > DelayBuffer.MAX_DELAY for d in self.delay_choices):
                raise ConfigError("delay_choices must be a non-empty subset of {0, 1, 2, 3}")
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)

    @classmethod
    def disabled(cls) -> "DomainRandConfig":
        return cls(**{f.name: None for f in fields(cls)})


@dataclass
class EnvConfig:
    control_hz: float = 50.0
    history_length: int = 10
    future_length: int = 10
    termination_distance: float = 0.5  # m, mean keypoint deviation
    termination_gravity_xy: float = 0.7  # unit projected gravity component
    termination_enabled: bool = True
    resample_on_motion_end: bool = True
    random_start: bool = True
    max_episode_steps: int | None = 1000
    reward: RewardConfig = field(default_factory=RewardConfig)
    randomization: DomainRandConfig = field(default_factory=DomainRandConfig)
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        if self.history_length < 1 or self.future_length < 1:
            raise ConfigError("history and future lengths must be at least 1")
        if not (self.termination_distance > 0 and self.termination_gravity_xy > 0):
            raise ConfigError("termination thresholds must be positive")
        if self.max_episode_steps is not None and self.max_episode_steps < 1:
            raise ConfigError("max_episode_steps must be positive or null")
        if abs(1.0 / self.sim.control_dt - self.control_hz) > 1e-6:
            raise ConfigError(
                f"control_hz {self.control_hz} disagrees with physics_dt x substeps ({1.0 / self.sim.control_dt:g} Hz)")

    @property
    def dt(self) -> float:
        return 1.0 / self.control_hz


# ---------------------------------------------------------------------------
# reward


def normalized_class_weights(classes, table: dict, enabled: bool = True):
    """Per-item weights from class labels (indices into WEIGHT_CLASSES), summing to 1."""
    classes = np.asarray(classes, dtype=int)
    if not enabled:
        w = np.ones(len(classes))
    else:
        missing = {WEIGHT_CLASSES[c] for c in classes} - set(table)
        if missing:
            raise ConfigError(f"no class weight for {sorted(missing)}")
        w = np.array([table[WEIGHT_CLASSES[c]] for c in classes], dtype=float)
    return w / w.sum()


def weighted_exp_reward(errors, weights, sigma):
    """``exp(-sum_j w_j e_j / sigma^2)`` with the weights normalized to sum 1."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    return np.exp(-np.sum(np.asarray(errors, dtype=float) * w, axis=-1) / sigma**2)


@dataclass
class RobotFrame:
    """Derived per-step robot quantities (leading batch axis)."""

    q: np.ndarray  # (N, n)
    qd: np.ndarray
    base_pos: np.ndarray  # (N, 3)
    base_quat: np.ndarray  # (N, 4)
    base_angvel: np.ndarray  # (N, 3) world
    gravity: np.ndarray  # (N, 3) unit, base frame
    kp_pos: np.ndarray  # (N, K, 3)
    kp_quat: np.ndarray  # (N, K, 4)
    kp_linvel: np.ndarray
    kp_angvel: np.ndarray
    foot_vel: np.ndarray  # (N, F, 3) foot link origin
    foot_gravity: np.ndarray  # (N, F, 3)
    foot_force: np.ndarray  # (N, F, 3)
    foot_height: np.ndarray  # (N, F) lowest sphere clearance

    def assign(self, idx, other: "RobotFrame"):
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def take(self, idx) -> "RobotFrame":
        return RobotFrame(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})


def robot_frame(model: RobotModel, state: SimState, link_pos, link_rot, link_w, link_vo, sphere_force) -> RobotFrame:
    a = model.arrays
    N = link_pos.shape[0]
    kl = a.kp_link
    kp_pos = link_pos[:, kl] + np.einsum("Nkij,kj->Nki", link_rot[:, kl], a.kp_offset)
    kp_w = link_w[:, kl]
    kp_v = link_vo[:, kl] + np.cross(kp_w, kp_pos - link_pos[:, kl])
    fl = a.foot_link
    F = len(fl)
    foot_force = np.zeros((N, F, 3))
    height = np.full((N, F), np.inf)
    if F and len(a.sphere_link):
        sl = a.sphere_link
        centers = link_pos[:, sl] + np.einsum("Nsij,sj->Nsi", link_rot[:, sl], a.sphere_offset)
        clearance = centers[..., 2] - a.sphere_radius
        for s, f in enumerate(a.sphere_foot):
            if f >= 0:
                foot_force[:, f] += sphere_force[:, s]
                height[:, f] = np.minimum(height[:, f], clearance[:, s])
    if F:
        height = np.where(np.isfinite(height), height, link_pos[:, fl, 2])
    quat = np.asarray(state.base_orientation, dtype=float)
    return RobotFrame(
        q=np.array(state.joint_positions, dtype=float),
        qd=np.array(state.joint_velocities, dtype=float),
        base_pos=np.array(state.base_position, dtype=float),
        base_quat=quat.copy(),
        base_angvel=np.array(state.base_angular_velocity, dtype=float),
        gravity=rot.projected_gravity(quat),
        kp_pos=kp_pos,
        kp_quat=rot.matrix_to_quat(link_rot[:, kl]),
        kp_linvel=kp_v,
        kp_angvel=kp_w.copy(),
        foot_vel=link_vo[:, fl].copy(),
        foot_gravity=-link_rot[:, fl, 2, :],
        foot_force=foot_force,
        foot_height=height,
    )


@dataclass
class GoalFrame:
    kp_pos: np.ndarray  # (N, K, 3)
    kp_quat: np.ndarray  # (N, K, 4)
    q: np.ndarray  # (N, n)
    qd: np.ndarray


@dataclass
class FeetStatus:
    contact: np.ndarray  # (N, F) bool
    first_contact: np.ndarray  # touchdown this step
    air_time: np.ndarray  # s, airborne duration ending at this step (valid where first_contact)
    in_air: np.ndarray
    max_height: np.ndarray  # m, highest clearance of the current swing


class FeetTracker:
    """Per-foot swing bookkeeping: lift-off below the force threshold, touchdown above it."""

    def __init__(self, num_envs: int, num_feet: int, threshold: float = 1.0):
        self.threshold = threshold
        self.air_time = np.zeros((num_envs, num_feet))
        self.max_height = np.zeros((num_envs, num_feet))

    def reset(self, idx=slice(None)):
        self.air_time[idx] = 0.0
        self.max_height[idx] = 0.0

    def update(self, foot_force, foot_height, dt) -> FeetStatus:
        contact = np.linalg.norm(foot_force, axis=-1) > self.threshold
        in_air = ~contact
        first = contact & (self.air_time > 0.0)
        self.air_time = self.air_time + dt
        air = self.air_time.copy()
        self.max_height = np.where(in_air, np.maximum(self.max_height, foot_height), 0.0)
        status = FeetStatus(contact, first, air, in_air, self.max_height.copy())
        self.air_time = np.where(contact, 0.0, self.air_time)
        return status


def compute_reward_terms(model: RobotModel, config: RewardConfig, prev: RobotFrame, cur: RobotFrame,
                         action_prev, action, goal: GoalFrame, feet: FeetStatus, torques, terminated, dt):
    """Raw value of every reward term (N,) and the weighted total."""
    a = model.arrays
    jw = normalized_class_weights(a.joint_class, config.joint_class_weights, config.use_class_weights)
    kw = normalized_class_weights(a.keypoint_class, config.keypoint_class_weights, config.use_class_weights)
    terms = {}
    terms["tracking_joint_pos"] = weighted_exp_reward((cur.q - goal.q) ** 2, jw, config.sigma_jp)
    terms["tracking_joint_vel"] = weighted_exp_reward((cur.qd - goal.qd) ** 2, jw, config.sigma_jv)
    terms["tracking_body_pos"] = weighted_exp_reward(np.sum((cur.kp_pos - goal.kp_pos) ** 2, axis=-1), kw, config.sigma_bp)
    terms["tracking_body_rot"] = weighted_exp_reward(rot.quat_angle(goal.kp_quat, cur.kp_quat) ** 2, kw, config.sigma_br)
    terms["action_rate"] = np.sum((np.asarray(action_prev) - np.asarray(action)) ** 2, axis=-1)
    terms["energy"] = np.sum((np.asarray(torques) * cur.q) ** 2, axis=-1)
    terms["dof_acc"] = np.sum(((cur.qd - prev.qd) / dt) ** 2, axis=-1)
    terms["dof_limits"] = np.sum((cur.q > a.upper) | (cur.q < a.lower), axis=-1).astype(float)
    loaded = np.linalg.norm(cur.foot_force, axis=-1) > config.contact_threshold
    terms["feet_slip"] = np.sum(np.linalg.norm(cur.foot_vel, axis=-1) * loaded, axis=-1)
    terms["orientation"] = np.sum(cur.gravity[..., :2] ** 2, axis=-1)
    terms["feet_contact"] = np.sum(np.linalg.norm(cur.foot_force, axis=-1), axis=-1)
    terms["feet_orientation"] = np.sum(np.sum(cur.foot_gravity[..., :2] ** 2, axis=-1), axis=-1)
    terms["feet_max_height"] = np.sum(np.maximum(feet.max_height - config.air_height_des, 0.0) * feet.in_air, axis=-1)
    terms["feet_air_time"] = np.sum((feet.air_time - config.air_time_des) * feet.first_contact, axis=-1)
    terms["termination"] = np.asarray(terminated, dtype=float) * np.ones(len(cur.q))
    terms["alive"] = np.ones(len(cur.q))
    total = sum(config.weights[k] * terms[k] for k in TERM_NAMES)
    return terms, total


def check_termination(kp_pos, goal_kp, gravity, distance: float = 0.5, gravity_xy: float = 0.7):
    """``(terminated, reason)`` per env; a fall takes precedence over deviation."""
    dev = np.mean(np.linalg.norm(np.asarray(kp_pos) - np.asarray(goal_kp), axis=-1), axis=-1)
    g = np.asarray(gravity)
    fall = (np.abs(g[..., 0]) > gravity_xy) | (np.abs(g[..., 1]) > gravity_xy)
    deviation = dev > distance
    reason = np.where(fall, TERMINATION_FALL, np.where(deviation, TERMINATION_DEVIATION, TERMINATION_NONE))
    return fall | deviation, reason


# ---------------------------------------------------------------------------
# randomization


@dataclass
class RandomizedParams:
    friction: np.ndarray  # (N,)
    com_offset: np.ndarray  # (N, 3)
    mass_scale: np.ndarray  # (N, L)
    kp_scale: np.ndarray  # (N, n)
    kd_scale: np.ndarray
    motor_strength: np.ndarray
    delay: np.ndarray  # (N,) int
    goal_offset: np.ndarray  # (N, K, 3)

    @classmethod
    def nominal(cls, model: RobotModel, num_envs: int = 1, friction: float = 1.0) -> "RandomizedParams":
        n, L, K = model.num_joints, model.num_links, len(model.keypoints)
        return cls(np.full(num_envs, friction), np.zeros((num_envs, 3)), np.ones((num_envs, L)),
                   np.ones((num_envs, n)), np.ones((num_envs, n)), np.ones((num_envs, n)),
                   np.zeros(num_envs, dtype=int), np.zeros((num_envs, K, 3)))

    def assign(self, idx, other: "RandomizedParams"):
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name).tolist() for f in fields(self)}


def sample_randomization(config: DomainRandConfig, rng, model: RobotModel, num_envs: int = 1,
                         nominal_friction: float = 1.0) -> RandomizedParams:
    p = RandomizedParams.nominal(model, num_envs, nominal_friction)
    n, L, K = model.num_joints, model.num_links, len(model.keypoints)

    def u(r, shape):
        return rng.uniform(r[0], r[1], size=shape)

    if config.friction_range is not None:
        p.friction = u(config.friction_range, num_envs)
    if config.com_range is not None:
        p.com_offset = u(config.com_range, (num_envs, 3))
    if config.mass_range is not None:
        p.mass_scale = u(config.mass_range, (num_envs, L))
    if config.kp_range is not None:
        p.kp_scale = u(config.kp_range, (num_envs, n))
    if config.kd_range is not None:
        p.kd_scale = u(config.kd_range, (num_envs, n))
    if config.motor_strength_range is not None:
        p.motor_strength = u(config.motor_strength_range, (num_envs, n))
    if config.delay_choices is not None:
        p.delay = rng.choice(np.asarray(config.delay_choices, dtype=int), size=num_envs)
    if config.goal_offset_range is not None:
        p.goal_offset = u(config.goal_offset_range, (num_envs, K, 3))
    return p


# ---------------------------------------------------------------------------
# observation layouts

# Mirror behaviour of a block: every block maps to a signed permutation of itself.
#   joint:      joint permutation with the joint sign (angles, velocities, actions)
#   joint_abs:  joint permutation only (per-joint scales)
#   polar/axial: a single 3-vector reflected as a position or as an angular velocity
#   kp_polar/kp_axial/kp_quat: per-keypoint vectors, permuted and reflected
#   foot/foot_polar: per-foot scalars or vectors, permuted
#   link:       per-link scalars, permuted


@dataclass(frozen=True)
class ObsBlock:
    name: str
    size: int
    kind: str


@dataclass(frozen=True)
class ObsLayout:
    blocks: tuple

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    def slices(self) -> dict:
        out, start = {}, 0
        for b in self.blocks:
            out[b.name] = slice(start, start + b.size)
            start += b.size
        return out


def proprio_blocks(model: RobotModel, prefix: str = ""):
    n, K = model.num_joints, len(model.keypoints)
    return (
        ObsBlock(prefix + "joint_pos", n, "joint"),
        ObsBlock(prefix + "joint_vel", n, "joint"),
        ObsBlock(prefix + "root_angvel", 3, "axial"),
        ObsBlock(prefix + "gravity", 3, "polar"),
        ObsBlock(prefix + "prev_action", n, "joint"),
        ObsBlock(prefix + "local_pos", 3 * K, "kp_polar"),
    )


def teacher_layout(model: RobotModel) -> ObsLayout:
    n, K, L, F = model.num_joints, len(model.keypoints), model.num_links, len(model.arrays.foot_link)
    return ObsLayout(proprio_blocks(model) + (
        ObsBlock("global_pos", 3 * K, "kp_polar"),
        ObsBlock("global_quat", 4 * K, "kp_quat"),
        ObsBlock("global_linvel", 3 * K, "kp_polar"),
        ObsBlock("global_angvel", 3 * K, "kp_axial"),
        ObsBlock("goal_pos", 3 * K, "kp_polar"),
        ObsBlock("goal_diff", 3 * K, "kp_polar"),
        ObsBlock("com_bias", 3, "polar"),
        ObsBlock("feet_friction", F, "foot"),
        ObsBlock("link_mass", L, "link"),
        ObsBlock("kd_scale", n, "joint_abs"),
        ObsBlock("kp_scale", n, "joint_abs"),
        ObsBlock("torque_scale", n, "joint_abs"),
        ObsBlock("feet_force", 3 * F, "foot_polar"),
    ))


def student_layout(model: RobotModel, history: int = 10, future: int = 10) -> ObsLayout:
    K = len(model.keypoints)
    blocks = ()
    for h in range(history):
        blocks += proprio_blocks(model, f"h{h}_")
    for k in range(future):
        blocks += (ObsBlock(f"goal{k}_pos", 3 * K, "kp_polar"),)
    return ObsLayout(blocks)


def layout_sizes(n: int, K: int, L: int, F: int, history: int = 10, future: int = 10) -> dict:
    """Closed-form observation lengths for n joints, K keypoints, L links, F feet."""
    proprio = 3 * n + 6 + 3 * K
    privileged = 3 + F + L + 3 * n + 3 * F
    return {
        "proprio": proprio,
        "teacher": proprio + 13 * K + 6 * K + privileged,
        "privileged": privileged,
        "student": history * proprio + future * 3 * K,
    }


_POLAR = np.array([1.0, -1.0, 1.0])
_AXIAL = np.array([-1.0, 1.0, -1.0])
_QUAT = np.array([1.0, -1.0, 1.0, -1.0])


def _block_mirror(model: RobotModel, block: ObsBlock):
    a = model.arrays
    K = len(model.keypoints)
    kind = block.kind
    if kind == "joint":
        return a.joint_perm, a.joint_sign
    if kind == "joint_abs":
        return a.joint_perm, np.ones(len(a.joint_perm))
    if kind == "polar":
        return np.arange(3), _POLAR
    if kind == "axial":
        return np.arange(3), _AXIAL
    if kind in ("kp_polar", "kp_axial", "kp_quat"):
        d = 4 if kind == "kp_quat" else 3
        sign = {"kp_polar": _POLAR, "kp_axial": _AXIAL, "kp_quat": _QUAT}[kind]
        perm = (a.keypoint_perm[:, None] * d + np.arange(d)).ravel()
        return perm, np.tile(sign, K)
    if kind == "foot":
        return a.foot_perm, np.ones(len(a.foot_perm))
    if kind == "foot_polar":
        F = len(a.foot_perm)
        return (a.foot_perm[:, None] * 3 + np.arange(3)).ravel(), np.tile(_POLAR, F)
    if kind == "link":
        return a.link_perm, np.ones(len(a.link_perm))
    raise ConfigError(f"no mirror map for observation block {block.name!r} of kind {kind!r}")


def mirror_map(model: RobotModel, layout: ObsLayout):
    """``(perm, sign)`` such that the mirrored observation is ``sign * obs[..., perm]``."""
    perms, signs, start = [], [], 0
    for b in layout.blocks:
        p, s = _block_mirror(model, b)
        if len(p) != b.size:
            raise ConfigError(f"mirror map for block {b.name!r} has the wrong size")
        perms.append(np.asarray(p, dtype=int) + start)
        signs.append(np.asarray(s, dtype=float))
        start += b.size
    if not perms:
        return np.zeros(0, dtype=int), np.zeros(0)
    return np.concatenate(perms), np.concatenate(signs)


def action_mirror_map(model: RobotModel):
    return model.arrays.joint_perm.copy(), model.arrays.joint_sign.copy()


# ---------------------------------------------------------------------------
# observation builders


def _noisy(x, std, rng):
    if rng is None or not std:
        return x
    return x + rng.normal(0.0, std, size=np.shape(x))


def proprio_obs(frame: RobotFrame, prev_action, noise: NoiseConfig | None = None, rng=None):
    """Single-step proprioception ``[q, qd, omega_root (base frame), g, a_prev, p_local]``."""
    nz = noise if (noise is not None and rng is not None) else None
    N = len(frame.q)
    omega_local = rot.quat_rotate(rot.quat_conj(frame.base_quat), frame.base_angvel)
    local = keypoints_local(frame.kp_pos, (frame.base_pos, frame.base_quat)).reshape(N, -1)
    parts = [
        _noisy(frame.q, nz and nz.joint_pos, rng),
        _noisy(frame.qd, nz and nz.joint_vel, rng),
        _noisy(omega_local, nz and nz.root_angvel, rng),
        _noisy(frame.gravity, nz and nz.gravity, rng),
        np.asarray(prev_action, dtype=float),
        _noisy(local, nz and nz.local_pos, rng),
    ]
    return np.concatenate(parts, axis=-1)


def build_teacher_obs(model: RobotModel, frame: RobotFrame, prev_action, goal_kp, params: RandomizedParams,
                      noise: NoiseConfig | None = None, rng=None):
    """Teacher observation; ``goal_kp`` already carries any offset. Noise only when ``rng`` is given."""
    nz = noise if (noise is not None and rng is not None) else None
    N = len(frame.q)
    proprio = proprio_obs(frame, prev_action, noise, rng)
    kp = _noisy(frame.kp_pos, nz and nz.global_pos, rng)
    goal = _noisy(np.asarray(goal_kp, dtype=float), nz and nz.goal_pos, rng)
    F = frame.foot_force.shape[1]
    parts = [
        proprio,
        kp.reshape(N, -1),
        _noisy(frame.kp_quat, nz and nz.global_quat, rng).reshape(N, -1),
        _noisy(frame.kp_linvel, nz and nz.global_linvel, rng).reshape(N, -1),
        _noisy(frame.kp_angvel, nz and nz.global_angvel, rng).reshape(N, -1),
        goal.reshape(N, -1),
        (goal - kp).reshape(N, -1),
        params.com_offset,
        np.repeat(params.friction[:, None], F, axis=1),
        params.mass_scale,
        params.kd_scale,
        params.kp_scale,
        params.motor_strength,
        frame.foot_force.reshape(N, -1),
    ]
    return np.concatenate(parts, axis=-1)


def build_student_obs(history, goal_future_local, noise: NoiseConfig | None = None, rng=None):
    """Stack ``history`` (N, l_p, P) newest first and future goals (N, l_g, K, 3) in the heading frame."""
    history = np.asarray(history, dtype=float)
    N = history.shape[0]
    goal = _noisy(np.asarray(goal_future_local, dtype=float),
                  noise.goal_pos if (noise is not None and rng is not None) else 0.0, rng)
    return np.concatenate([history.reshape(N, -1), goal.reshape(N, -1)], axis=-1)


# ---------------------------------------------------------------------------
# environment


@dataclass
class StepResult:
    obs: dict  # teacher / critic / student arrays, shape (N, D)
    reward: np.ndarray  # (N,)
    terms: dict  # raw term values, (N,) each
    terminated: np.ndarray  # (N,) bool
    truncated: np.ndarray  # (N,) bool, episode ended without failure
    info: dict


def _align_transform(pos, quat, yaw, offset):
    R = rot.yaw_matrix(yaw)
    return np.einsum("Nij,N...j->N...i", R, pos) + offset.reshape(offset.shape[:1] + (1,) * (pos.ndim - 2) + (3,)), \
        rot.canonical(rot.quat_mul(np.broadcast_to(rot.quat_from_yaw(yaw)[:, None], quat.shape), quat))


class TrackingEnv:
    """Batched keypoint-tracking environment over a fixed set of clips."""

    def __init__(self, model: RobotModel, clips, config: EnvConfig | None = None, num_envs: int = 1, seed: int = 0):
        if not clips:
            raise ValueError("the environment needs at least one motion clip")
        self.model = model
        self.config = config or EnvConfig()
        self.num_envs = int(num_envs)
        self.rng = np.random.default_rng(seed)
        cfg = self.config
        fps = cfg.control_hz
        self.clips = [c if c.fps == fps else resample(c, fps) for c in clips]
        names = tuple(j.name for j in model.joints)
        for c in self.clips:
            if c.num_joints != model.num_joints or (c.joints and c.joints != names):
                raise ValueError(f"clip {c.name!r} does not match the joints of model {model.name!r}")
        tracks = [goal_track(c, model) for c in self.clips]
        self._lengths = np.array([t.num_frames for t in tracks])
        self._starts = np.concatenate([[0], np.cumsum(self._lengths)[:-1]])
        self._kp = np.concatenate([t.keypoints for t in tracks])
        self._kq = np.concatenate([t.keypoint_quats for t in tracks])
        self._q = np.concatenate([t.q for t in tracks])
        self._qd = np.concatenate([t.qd for t in tracks])
        self._root_pos = np.concatenate([t.root_pos for t in tracks])
        self._root_quat = np.concatenate([t.root_quat for t in tracks])

        N, n = self.num_envs, model.num_joints
        self.gains = PDGains.from_model(model)
        self.nominal_body = BodyParams.from_model(model)
        self.teacher_layout = teacher_layout(model)
        self.student_layout = student_layout(model, cfg.history_length, cfg.future_length)
        self.proprio_size = 3 * n + 6 + 3 * len(model.keypoints)
        self.feet = FeetTracker(N, len(model.arrays.foot_link), cfg.reward.contact_threshold)
        self.delay = DelayBuffer(n, 0, batch=N)
        self.params = RandomizedParams.nominal(model, N, cfg.sim.contact.friction)
        self.state = SimState.from_pose(model, batch=N)
        self.clip_index = np.zeros(N, dtype=int)
        self.cursor = np.zeros(N, dtype=int)
        self.align_yaw = np.zeros(N)
        self.align_offset = np.zeros((N, 3))
        self.episode_step = np.zeros(N, dtype=int)
        self.prev_action = np.zeros((N, n))
        self.history = np.zeros((N, cfg.history_length, self.proprio_size))
        self.forced_clips = None
        self._body = None
        self._needs_history = np.ones(N, dtype=bool)
        lp, lr, lw, lv = link_kinematics(model, self.state)
        self.frame = robot_frame(model, self.state, lp, lr, lw, lv, np.zeros((N, len(model.arrays.sphere_link), 3)))
        self.goal: GoalFrame | None = None

    # -- goal lookup -------------------------------------------------------

    def _goal_rows(self, offset=0, envs=slice(None)):
        c = self.clip_index[envs]
        return self._starts[c] + np.minimum(self.cursor[envs] + offset, self._lengths[c] - 1)

    def goal_frame(self, offset=0) -> GoalFrame:
        """Clean goal (no randomized offset) ``offset`` frames after the cursor, aligned to the episode."""
        rows = self._goal_rows(offset)
        kp, kq = _align_transform(self._kp[rows], self._kq[rows], self.align_yaw, self.align_offset)
        return GoalFrame(kp, kq, self._q[rows], self._qd[rows])

    def goal_window(self, start: int, length: int):
        """Aligned goal keypoints for ``length`` frames from ``cursor + start``: (N, length, K, 3)."""
        rows = np.stack([self._goal_rows(start + k) for k in range(length)], axis=1)
        kp = self._kp[rows]
        R = rot.yaw_matrix(self.align_yaw)
        return np.einsum("Nij,Nfkj->Nfki", R, kp) + self.align_offset[:, None, None, :]

    # -- reset -------------------------------------------------------------

    @property
    def body(self) -> BodyParams:
        if self._body is None:
            self._body = self.nominal_body.randomized(self.params.mass_scale, self.params.com_offset)
        return self._body

    def reset(self, clip_index=None) -> dict:
        """Reset every environment; ``clip_index`` pins the clip(s) used on this and later resets."""
        self.forced_clips = None if clip_index is None else np.asarray(clip_index, dtype=int)
        self._reset_envs(np.arange(self.num_envs))
        return self._observe()

    def _reset_envs(self, idx):
        idx = np.asarray(idx, dtype=int)
        if len(idx) == 0:
            return
        cfg, model, a = self.config, self.model, self.model.arrays
        if self.forced_clips is not None:
            clips = np.broadcast_to(self.forced_clips, (self.num_envs,))[idx]
        else:
            clips = self.rng.integers(len(self.clips), size=len(idx))
        lengths = self._lengths[clips]
        start = (self.rng.integers(0, np.maximum(lengths - 1, 1)) if cfg.random_start
                 else np.zeros(len(idx), dtype=int))
        self.clip_index[idx] = clips
        self.cursor[idx] = start
        self.align_yaw[idx] = 0.0
        self.align_offset[idx] = 0.0
        self.episode_step[idx] = 0
        self.prev_action[idx] = 0.0

        new = sample_randomization(cfg.randomization, self.rng, model, len(idx), cfg.sim.contact.friction)
        self.params.assign(idx, new)
        self._body = None
        self.delay.reset(np.isin(np.arange(self.num_envs), idx), self.params.delay)
        self.feet.reset(idx)

        rows = self._starts[clips] + start
        q = np.clip(self._q[rows], a.lower, a.upper)
        pos = self._root_pos[rows].copy()
        quat = rot.quat_normalize(self._root_quat[rows])
        if not model.fixed_base and len(a.sphere_link):
            pos[:, 2] += _ground_clearance_shift(model, pos, quat, q)
        sub = SimState.from_pose(model, pos, quat, q, batch=len(idx))
        sub.joint_velocities[:] = self._qd[rows]
        for f in fields(SimState):
            v = getattr(self.state, f.name)
            if isinstance(v, np.ndarray):
                v[idx] = getattr(sub, f.name)
        body = self.body
        sub_body = BodyParams(body.masses[idx], body.coms[idx], body.inertias[idx])
        lp, lr, lw, lv = link_kinematics(model, sub, sub_body)
        sub_frame = robot_frame(model, sub, lp, lr, lw, lv, np.zeros((len(idx), len(a.sphere_link), 3)))
        self.frame.assign(idx, sub_frame)
        self._needs_history[idx] = True

    # -- observations ------------------------------------------------------

    def _observe(self) -> dict:
        cfg = self.config
        noise = cfg.randomization.noise
        rng = self.rng if noise is not None else None
        frame = self.frame
        goal_next = self.goal_frame(1).kp_pos
        teacher = build_teacher_obs(self.model, frame, self.prev_action, goal_next + self.params.goal_offset,
                                    self.params, noise, rng)
        critic = build_teacher_obs(self.model, frame, self.prev_action, goal_next, self.params)
        proprio = proprio_obs(frame, self.prev_action, noise, rng)
        # history newest first; freshly reset envs are padded with the current frame
        self.history = np.concatenate([proprio[:, None], self.history[:, :-1]], axis=1)
        fill = self._needs_history
        if fill.any():
            self.history[fill] = proprio[fill][:, None, :]
            fill[:] = False
        window = self.goal_window(1, cfg.future_length) + self.params.goal_offset[:, None]
        R = rot.yaw_matrix(rot.yaw_of(frame.base_quat))
        local = np.einsum("Nji,Nfkj->Nfki", R, window - frame.base_pos[:, None, None, :])
        student = build_student_obs(self.history, local, noise, rng)
        return {"teacher": teacher, "critic": critic, "student": student}

    # -- stepping ----------------------------------------------------------

    def step(self, actions) -> StepResult:
        cfg, model, a = self.config, self.model, self.model.arrays
        N = self.num_envs
        dt = cfg.dt
        actions = np.asarray(actions, dtype=float).reshape(N, model.num_joints)
        rcfg = cfg.randomization
        push = np.zeros((N, 3))
        pushed = np.zeros(N, dtype=bool)
        if rcfg.push_interval is not None and rcfg.push_range is not None and not model.fixed_base:
            every = max(1, int(round(rcfg.push_interval / dt)))
            pushed = (self.episode_step > 0) & (self.episode_step % every == 0)
            if pushed.any():
                push[pushed, :2] = self.rng.uniform(rcfg.push_range[0], rcfg.push_range[1], size=(int(pushed.sum()), 2))
        prev_state = self.state
        state, info = step_control(
            model, prev_state, actions, cfg.sim, self.gains, push=push, delay_buffer=self.delay, body=self.body,
            friction=self.params.friction, kp_scale=self.params.kp_scale, kd_scale=self.params.kd_scale,
            motor_strength=self.params.motor_strength, raise_on_unstable=False,
        )
        foot_forces = info.mean_contact_force
        unstable = info.unstable | ~np.isfinite(info.link_positions).all(axis=(1, 2))
        if unstable.any():
            # keep the last finite state so the terminal transition stays finite
            for f in fields(SimState):
                v = getattr(state, f.name)
                if isinstance(v, np.ndarray):
                    v[unstable] = getattr(prev_state, f.name)[unstable]
            info.torques[unstable] = 0.0
            foot_forces = np.where(unstable[:, None, None], 0.0, foot_forces)
            lp, lr, lw, lv = link_kinematics(model, state, self.body)
        else:
            lp, lr, lw, lv = info.link_positions, info.link_rotations, info.link_angular_velocities, info.link_origin_velocities
        self.state = state
        prev_frame = self.frame
        frame = robot_frame(model, state, lp, lr, lw, lv, foot_forces)
        self.episode_step += 1
        self.cursor += 1
        goal = self.goal_frame(0)
        feet = self.feet.update(frame.foot_force, frame.foot_height, dt)
        if cfg.termination_enabled:
            terminated, reason = check_termination(frame.kp_pos, goal.kp_pos, frame.gravity,
                                                   cfg.termination_distance, cfg.termination_gravity_xy)
        else:
            terminated, reason = np.zeros(N, dtype=bool), np.zeros(N, dtype=int)
        terminated = terminated | unstable
        reason = np.where(unstable, TERMINATION_UNSTABLE, reason)
        terms, total = compute_reward_terms(model, cfg.reward, prev_frame, frame, self.prev_action, actions, goal,
                                            feet, info.torques, terminated, dt)
        self.frame, self.goal = frame, goal
        self.prev_action = actions.copy()

        motion_end = self.cursor >= self._lengths[self.clip_index] - 1
        truncated = np.zeros(N, dtype=bool)
        if cfg.max_episode_steps is not None:
            truncated = self.episode_step >= cfg.max_episode_steps
        resampled = np.zeros(N, dtype=bool)
        if cfg.resample_on_motion_end:
            resampled = motion_end & ~terminated & ~truncated
            if resampled.any():
                self._resample_motion(np.nonzero(resampled)[0])
        else:
            truncated = truncated | motion_end
        truncated &= ~terminated
        done = terminated | truncated
        step_info = {
            "keypoints": frame.kp_pos.copy(),
            "goal_keypoints": goal.kp_pos.copy(),
            "base_pos": frame.base_pos.copy(),
            "base_quat": frame.base_quat.copy(),
            "torques": info.torques.copy(),
            "foot_forces": foot_forces.copy(),
            "termination_reason": reason,
            "motion_resampled": resampled,
            "motion_end": motion_end,
            "push_applied": pushed,
            "push": push,
            "episode_step": self.episode_step.copy(),
            "clip_index": self.clip_index.copy(),
            "unstable": unstable,
        }
        if done.any():
            self._reset_envs(np.nonzero(done)[0])
        return StepResult(self._observe(), total, terms, terminated, truncated, step_info)

    def _resample_motion(self, idx):
        """Start a new clip on ``idx`` without touching the robot; the goal is aligned to the robot's heading."""
        if self.forced_clips is not None:
            clips = np.broadcast_to(self.forced_clips, (self.num_envs,))[idx]
        else:
            clips = self.rng.integers(len(self.clips), size=len(idx))
        rows = self._starts[clips]
        robot_yaw = rot.yaw_of(self.frame.base_quat[idx])
        clip_yaw = rot.yaw_of(self._root_quat[rows])
        yaw = robot_yaw - clip_yaw
        R = rot.yaw_matrix(yaw)
        offset = self.frame.base_pos[idx] - np.einsum("Nij,Nj->Ni", R, self._root_pos[rows])
        offset[:, 2] = 0.0
        self.clip_index[idx] = clips
        self.cursor[idx] = 0
        self.align_yaw[idx] = yaw
        self.align_offset[idx] = offset

    # -- convenience -------------------------------------------------------

    @property
    def observation_sizes(self) -> dict:
        return {"teacher": self.teacher_layout.size, "critic": self.teacher_layout.size,
                "student": self.student_layout.size}

    @property
    def num_actions(self) -> int:
        return self.model.num_joints


def _ground_clearance_shift(model: RobotModel, pos, quat, q):
    """Vertical shift putting the lowest contact sphere of each pose exactly on the ground."""
    a = model.arrays
    lp, lr = fk_arrays(a, pos, rot.quat_to_matrix(quat), q)
    sl = a.sphere_link
    centers = lp[:, sl] + np.einsum("Nsij,sj->Nsi", lr[:, sl], a.sphere_offset)
    return -np.min(centers[..., 2] - a.sphere_radius, axis=-1)
