"""Reference motions: clips, procedural generators, corruption models, retargeting.

Corruptions act directly in joint and root space. The keypoint noise level is
mapped to joint angles with a fixed 1 m <-> 1 rad convention (a unit-length limb
rotated by 1 rad moves its tip by about 1 m), so ``keypoint_noise_std=0.02``
perturbs every joint angle with a 0.02 rad standard deviation and the root
position with 0.02 m.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from kptrack import rotations as rot
from kptrack.model import (
    RobotModel,
    forward_kinematics,
    keypoint_orientations,
    keypoints_global,
    mirror_joint_vector,
    standing_height,
)

DEFAULT_FPS = 50.0
GENERATOR_KINDS = ("stand", "wave", "reach", "squat", "walk_in_place", "composite")


class MotionError(ValueError):
    """Invalid clip document, generator parameters or retarget request."""


@dataclass(eq=False)
class MotionClip:
    fps: float
    root_pos: np.ndarray  # (T, 3)
    root_quat: np.ndarray  # (T, 4) wxyz
    q: np.ndarray  # (T, n)
    joints: tuple = ()
    name: str = "clip"
    source: str = "clean"
    # one dict per applied corruption, in application order
    corruptions: tuple = ()

    def __post_init__(self):
        self.root_pos = np.asarray(self.root_pos, dtype=float)
        self.root_quat = np.asarray(self.root_quat, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.q.ndim == 1:
            self.q = self.q[:, None]
        self.joints = tuple(self.joints)
        self.corruptions = tuple(self.corruptions)
        if not self.fps > 0:
            raise MotionError("fps must be positive")
        T = len(self.q)
        if T < 2:
            raise MotionError("≥ 2 frames required")
        if self.root_pos.shape != (T, 3) or self.root_quat.shape != (T, 4):
            raise MotionError("root trajectories must have one entry per frame")
        dev = np.abs(np.linalg.norm(self.root_quat, axis=-1) - 1.0)
        if np.any(dev > 1e-6):
            raise MotionError(f"frame {int(np.argmax(dev))}: root quaternion is not unit norm")
        if self.joints and len(self.joints) != self.q.shape[1]:
            raise MotionError("joint name count does not match joint angle count")

    @property
    def num_frames(self) -> int:
        return len(self.q)

    @property
    def num_joints(self) -> int:
        return self.q.shape[1]

    @property
    def duration(self) -> float:
        return (self.num_frames - 1) / self.fps

    @property
    def times(self):
        return np.arange(self.num_frames) / self.fps

    def __eq__(self, other):
        if not isinstance(other, MotionClip):
            return NotImplemented
        return (
            self.fps == other.fps
            and self.joints == other.joints
            and self.name == other.name
            and self.source == other.source
            and self.corruptions == other.corruptions
            and np.array_equal(self.root_pos, other.root_pos)
            and np.array_equal(self.root_quat, other.root_quat)
            and np.array_equal(self.q, other.q)
        )

    def frames_equal(self, other) -> bool:
        return (np.array_equal(self.root_pos, other.root_pos) and np.array_equal(self.root_quat, other.root_quat)
                and np.array_equal(self.q, other.q))


@dataclass
class GoalTrack:
    """Per-frame goal quantities derived from a clip through forward kinematics."""

    fps: float
    keypoints: np.ndarray  # (T, K, 3) world
    keypoint_quats: np.ndarray  # (T, K, 4)
    q: np.ndarray  # (T, n)
    qd: np.ndarray  # (T, n)
    root_pos: np.ndarray
    root_quat: np.ndarray

    @property
    def num_frames(self) -> int:
        return len(self.q)


def goal_track(clip: MotionClip, model: RobotModel) -> GoalTrack:
    poses = forward_kinematics(model, (clip.root_pos, clip.root_quat), clip.q)
    kp = keypoints_global(model, poses)
    quats = keypoint_orientations(model, poses)
    # central differences inside, one-sided at the ends
    qd = np.gradient(clip.q, 1.0 / clip.fps, axis=0)
    return GoalTrack(clip.fps, kp, quats, clip.q.copy(), qd, clip.root_pos.copy(), clip.root_quat.copy())


# ---------------------------------------------------------------------------
# serialization


def clip_to_dict(clip: MotionClip) -> dict:
    frames = [
        {"t": i / clip.fps, "root_pos": clip.root_pos[i].tolist(), "root_quat": clip.root_quat[i].tolist(),
         "q": clip.q[i].tolist()}
        for i in range(clip.num_frames)
    ]
    return {
        "name": clip.name,
        "fps": clip.fps,
        "joints": list(clip.joints),
        "frames": frames,
        "provenance": {"source": clip.source, "corruptions": list(clip.corruptions)},
    }


def clip_from_dict(doc: dict) -> MotionClip:
    try:
        fps = float(doc["fps"])
        frames = doc["frames"]
        joints = tuple(doc.get("joints", ()))
    except (KeyError, TypeError) as exc:
        raise MotionError(f"malformed motion document: missing {exc}") from exc
    if len(frames) < 2:
        raise MotionError("≥ 2 frames required")
    n = len(frames[0]["q"])
    for i, fr in enumerate(frames):
        if len(fr["q"]) != n:
            raise MotionError(f"frame {i}: expected {n} joint angles, got {len(fr['q'])}")
    prov = doc.get("provenance", {}) or {}
    return MotionClip(
        fps=fps,
        root_pos=np.array([fr["root_pos"] for fr in frames], dtype=float),
        root_quat=np.array([fr["root_quat"] for fr in frames], dtype=float),
        q=np.array([fr["q"] for fr in frames], dtype=float).reshape(len(frames), n),
        joints=joints,
        name=doc.get("name", "clip"),
        source=prov.get("source", "clean"),
        corruptions=tuple(prov.get("corruptions", ())),
    )


def save_clip(clip: MotionClip, path) -> None:
    Path(path).write_text(json.dumps(clip_to_dict(clip)))


def load_clip(path) -> MotionClip:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MotionError(f"cannot parse motion file {path}: {exc}") from exc
    return clip_from_dict(doc)


# ---------------------------------------------------------------------------
# resampling


def resample(clip: MotionClip, target_fps: float) -> MotionClip:
    """Linear interpolation of positions and angles, slerp for root orientation."""
    if not target_fps > 0:
        raise MotionError("target fps must be positive")
    if target_fps == clip.fps:
        return replace(clip)
    n_out = int(np.floor(clip.duration * target_fps + 1e-9)) + 1
    t = np.arange(n_out) / target_fps
    u = np.clip(t * clip.fps, 0.0, clip.num_frames - 1)
    i0 = np.minimum(np.floor(u).astype(int), clip.num_frames - 2)
    frac = (u - i0)[:, None]
    pos = (1 - frac) * clip.root_pos[i0] + frac * clip.root_pos[i0 + 1]
    q = (1 - frac) * clip.q[i0] + frac * clip.q[i0 + 1]
    quat = rot.slerp(clip.root_quat[i0], clip.root_quat[i0 + 1], frac[:, 0])
    return replace(clip, fps=float(target_fps), root_pos=pos, root_quat=quat, q=q)


# ---------------------------------------------------------------------------
# procedural generators


def _envelope(t, total, ramp):
    """Smoothstep in and out; exactly 0 at both ends."""
    if ramp <= 0:
        return np.ones_like(t)

    def s(x):
        x = np.clip(x, 0.0, 1.0)
        return x * x * (3.0 - 2.0 * x)

    return s(t / ramp) * s((total - t) / ramp)


def _joint_index(model: RobotModel, name: str) -> int:
    names = [j.name for j in model.joints]
    if name not in names:
        raise MotionError(f"model {model.name!r} has no joint {name!r} required by this generator")
    return names.index(name)


def _sides(side):
    if side == "both":
        return ("left", "right")
    if side not in ("left", "right"):
        raise MotionError(f"side must be left, right or both, got {side!r}")
    return (side,)


def _set_joint(model, q, name, values):
    """Write a left-side convention trajectory, applying the mirror sign on the right."""
    j = _joint_index(model, name)
    sign = 1.0
    if name.startswith("right_"):
        sign = float(model.arrays.joint_sign[j])
    q[:, j] = model.arrays.default_pose[j] + sign * values


def _gen_stand(model, t, p):
    return np.broadcast_to(model.arrays.default_pose, (len(t), model.num_joints)).copy()


def _gen_wave(model, t, p):
    amp = float(p.get("amplitude", 0.5))
    freq = float(p.get("frequency", 1.0))
    env = _envelope(t, t[-1], float(p.get("ramp", 0.5)))
    q = _gen_stand(model, t, p)
    if "right_elbow" not in [j.name for j in model.joints]:
        # generic rig: every joint oscillates about its default angle
        return q + (env * amp * np.sin(2 * np.pi * freq * t))[:, None]
    for side in _sides(p.get("side", "right")):
        # raise the arm sideways, then swing the forearm
        _set_joint(model, q, f"{side}_shoulder_roll", 2.4 * amp * env)
        _set_joint(model, q, f"{side}_shoulder_pitch", -1.2 * amp * env)
        _set_joint(model, q, f"{side}_elbow", -amp * env * (1.0 + np.sin(2 * np.pi * freq * t)))
    return q


def _gen_reach(model, t, p):
    amp = float(p.get("amplitude", 1.2))
    env = _envelope(t, t[-1], float(p.get("ramp", t[-1] / 3)))
    q = _gen_stand(model, t, p)
    if "left_shoulder_pitch" not in [j.name for j in model.joints]:
        # generic rig: every joint moves toward ``target`` offsets
        target = np.broadcast_to(np.asarray(p.get("target", amp), dtype=float), (model.num_joints,))
        return q + env[:, None] * target
    for side in _sides(p.get("side", "both")):
        _set_joint(model, q, f"{side}_shoulder_pitch", -amp * env)
        d = model.arrays.default_pose[_joint_index(model, f"{side}_elbow")]
        sign = model.arrays.joint_sign[_joint_index(model, f"{side}_elbow")] if side == "right" else 1.0
        # straighten the elbow while reaching
        _set_joint(model, q, f"{side}_elbow", -sign * d * env)
    return q


def _gen_squat(model, t, p):
    depth = float(p.get("depth", 0.4))
    freq = float(p.get("frequency", 0.5))
    env = _envelope(t, t[-1], float(p.get("ramp", 0.5)))
    bend = depth * env * 0.5 * (1.0 - np.cos(2 * np.pi * freq * t))
    q = _gen_stand(model, t, p)
    for side in ("left", "right"):
        _set_joint(model, q, f"{side}_hip_pitch", -bend)
        _set_joint(model, q, f"{side}_knee", 2.0 * bend)
        _set_joint(model, q, f"{side}_ankle_pitch", -bend)
    return q


def _gen_walk_in_place(model, t, p):
    amp = float(p.get("amplitude", 0.4))
    freq = float(p.get("frequency", 1.0))
    env = _envelope(t, t[-1], float(p.get("ramp", 0.5)))
    q = _gen_stand(model, t, p)
    phase = 2 * np.pi * freq * t
    for side, offset in (("left", 0.0), ("right", np.pi)):
        lift = amp * env * np.maximum(np.sin(phase + offset), 0.0) ** 2
        _set_joint(model, q, f"{side}_hip_pitch", -lift)
        _set_joint(model, q, f"{side}_knee", 2.0 * lift)
        _set_joint(model, q, f"{side}_ankle_pitch", -lift)
        # arms swing against the legs
        _set_joint(model, q, f"{side}_shoulder_pitch", 0.5 * amp * env * np.sin(phase + offset))
    return q


_GENERATORS = {
    "stand": (_gen_stand, 2.0),
    "wave": (_gen_wave, 4.0),
    "reach": (_gen_reach, 3.0),
    "squat": (_gen_squat, 4.0),
    "walk_in_place": (_gen_walk_in_place, 4.0),
}


def _root_track(model: RobotModel, q, kind):
    """Root height keeps the lowest foot on the ground; in-place kinds stay at the standing height."""
    T = len(q)
    pos = np.zeros((T, 3))
    if model.fixed_base or not len(model.contact_spheres):
        pos[:, 2] = 0.0 if model.fixed_base else standing_height(model)
    elif kind == "squat":
        pos[:, 2] = [standing_height(model, qi) for qi in q]
    else:
        pos[:, 2] = standing_height(model)
    quat = np.broadcast_to(rot.IDENTITY_QUAT, (T, 4)).copy()
    return pos, quat


def _check_limits(model: RobotModel, q, kind):
    a = model.arrays
    bad = (q < a.lower - 1e-12) | (q > a.upper + 1e-12)
    if bad.any():
        j = int(np.argwhere(bad)[0][1])
        raise MotionError(f"{kind}: parameters drive joint {model.joints[j].name!r} outside its limits")


def generate(kind: str, model: RobotModel, params: dict | None = None, fps: float = DEFAULT_FPS) -> MotionClip:
    """Procedural reference clip. Every part starts and ends at the default pose."""
    params = dict(params or {})
    if kind == "composite":
        parts = params.get("parts")
        if not parts:
            raise MotionError("composite needs a non-empty list of parts")
        clips = []
        for part in parts:
            if isinstance(part, str):
                part = {"kind": part}
            if part.get("kind") == "composite":
                raise MotionError("nested composites are not supported")
            clips.append(generate(part["kind"], model, part.get("params"), fps))
        names = "+".join(c.name for c in clips)
        return MotionClip(
            fps, np.concatenate([c.root_pos for c in clips]), np.concatenate([c.root_quat for c in clips]),
            np.concatenate([c.q for c in clips]), clips[0].joints, params.get("name", f"composite[{names}]"),
        )
    if kind not in _GENERATORS:
        raise MotionError(f"unknown motion kind {kind!r}; expected one of {GENERATOR_KINDS}")
    fn, default_duration = _GENERATORS[kind]
    duration = float(params.get("duration", default_duration))
    if duration <= 0:
        raise MotionError("duration must be positive")
    T = int(round(duration * fps)) + 1
    t = np.arange(T) / fps
    q = fn(model, t, params)
    _check_limits(model, q, kind)
    pos, quat = _root_track(model, q, kind)
    return MotionClip(fps, pos, quat, q, tuple(j.name for j in model.joints), params.get("name", kind))


# ---------------------------------------------------------------------------
# corruption


@dataclass
class NoiseSpec:
    keypoint_noise_std: float = 0.0  # m, applied as rad per joint (1 m <-> 1 rad)
    occlusion_prob: float = 0.0  # per limb per segment
    occlusion_hold: float = 0.5  # s, also the segment length
    spike_prob: float = 0.0  # per frame
    spike_magnitude: float = 0.0  # rad
    drift_rate: float = 0.0  # m/s
    lr_swap_prob: float = 0.0  # per clip
    lr_swap_duration: float = 1.0  # s
    seed: int = 0

    def __post_init__(self):
        for name in ("occlusion_prob", "spike_prob", "lr_swap_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MotionError(f"{name} must lie in [0, 1]")
        for name in ("keypoint_noise_std", "occlusion_hold", "spike_magnitude", "drift_rate", "lr_swap_duration"):
            if getattr(self, name) < 0:
                raise MotionError(f"{name} must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> "NoiseSpec":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise MotionError(f"unknown noise fields {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def limb_groups(model: RobotModel):
    """Joint index groups that an occlusion freezes together: (side, weight class)."""
    groups = {}
    for i, j in enumerate(model.joints):
        side = j.name.split("_", 1)[0] if j.name.startswith(("left_", "right_")) else "center"
        groups.setdefault((side, j.weight_class), []).append(i)
    return [np.array(v) for _, v in sorted(groups.items())]


def corrupt(clip: MotionClip, spec: NoiseSpec, model: RobotModel):
    """Seeded corruption emulating generated-video artifacts; returns ``(clip, log)``."""
    rng = np.random.default_rng(spec.seed)
    T, fps = clip.num_frames, clip.fps
    pos, quat, q = clip.root_pos.copy(), clip.root_quat.copy(), clip.q.copy()
    a = model.arrays
    log = []

    if spec.lr_swap_prob > 0 and rng.random() < spec.lr_swap_prob:
        n_swap = min(T, max(1, int(round(spec.lr_swap_duration * fps))))
        start = int(rng.integers(0, T - n_swap + 1))
        sl = slice(start, start + n_swap)
        q[sl] = mirror_joint_vector(model.symmetry, q[sl])
        log.append({"type": "lr_swap", "start": start, "frames": n_swap})

    if spec.occlusion_prob > 0:
        seg = max(1, int(round(spec.occlusion_hold * fps)))
        for start in range(0, T, seg):
            for g in limb_groups(model):
                if rng.random() < spec.occlusion_prob:
                    stop = min(T, start + seg)
                    q[start:stop, g] = q[start, g]
                    log.append({"type": "occlusion", "start": start, "frames": stop - start,
                                "joints": [int(i) for i in g]})

    if spec.spike_prob > 0 and spec.spike_magnitude > 0:
        starts = np.nonzero(rng.random(T) < spec.spike_prob)[0]
        for s in starts:
            j = int(rng.integers(model.num_joints))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            # three-frame triangular transient
            for k, scale in ((-1, 0.5), (0, 1.0), (1, 0.5)):
                f = s + k
                if 0 <= f < T:
                    q[f, j] = np.clip(q[f, j] + sign * scale * spec.spike_magnitude, a.lower[j] - 0.2, a.upper[j] + 0.2)
            log.append({"type": "pose_spike", "frame": int(s), "joint": j, "sign": sign})

    if spec.keypoint_noise_std > 0:
        q = q + rng.normal(0.0, spec.keypoint_noise_std, q.shape)
        pos = pos + rng.normal(0.0, spec.keypoint_noise_std, pos.shape)
        log.append({"type": "keypoint_noise", "std": spec.keypoint_noise_std})

    if spec.drift_rate > 0:
        heading = rng.uniform(-np.pi, np.pi)
        direction = np.array([np.cos(heading), np.sin(heading), 0.0])
        pos = pos + spec.drift_rate * clip.times[:, None] * direction
        log.append({"type": "drift", "rate": spec.drift_rate, "direction": direction.tolist()})

    if not log:
        return replace(clip), log
    out = replace(clip, root_pos=pos, root_quat=quat, q=q, source="corrupted",
                  corruptions=clip.corruptions + tuple(log), name=clip.name)
    return out, log


# ---------------------------------------------------------------------------
# retargeting and dataset handling


def leg_length(model: RobotModel) -> float:
    """Chain length from the hip joint down to the first foot link (hip offset excluded)."""
    a = model.arrays
    if not len(a.foot_link):
        raise MotionError(f"model {model.name!r} has no feet")
    lengths = []
    for foot in a.foot_link:
        total, link, chain = 0.0, int(foot), []
        while a.joint_of_link[link] >= 0:
            j = int(a.joint_of_link[link])
            chain.append(j)
            link = int(a.parent[j])
        # chain runs foot -> root; drop the joint attached to the root
        total = sum(np.linalg.norm(a.origins[j]) for j in chain[:-1])
        lengths.append(total)
    return float(np.mean(lengths))


def retarget_scale(clip: MotionClip, src: RobotModel, dst: RobotModel):
    """Copy angles by joint name, scale root height by leg length, clamp to limits.

    Returns ``(clip, clamp_count)``.
    """
    src_names = [j.name for j in src.joints]
    dst_names = [j.name for j in dst.joints]
    if sorted(src_names) != sorted(dst_names):
        raise MotionError("source and destination models differ in joint naming or topology")
    if clip.joints and list(clip.joints) != src_names:
        raise MotionError("clip joints do not match the source model")
    for name in dst_names:
        sj = src.joints[src_names.index(name)]
        dj = dst.joints[dst_names.index(name)]
        if sj.parent != dj.parent or sj.child != dj.child:
            raise MotionError(f"joint {name!r} connects different links in the two models")
    order = [src_names.index(n) for n in dst_names]
    q = clip.q[:, order]
    a = dst.arrays
    clamped = np.clip(q, a.lower, a.upper)
    count = int(np.sum(clamped != q))
    pos = clip.root_pos.copy()
    if len(src.arrays.foot_link) and len(dst.arrays.foot_link):
        pos[:, 2] *= leg_length(dst) / leg_length(src)
    out = replace(clip, root_pos=pos, q=clamped, joints=tuple(dst_names))
    return out, count


def retarget_error(clip: MotionClip, model: RobotModel) -> float:
    """Mean over frames of the summed out-of-limit angle magnitude (rad)."""
    a = model.arrays
    excess = np.abs(clip.q - np.clip(clip.q, a.lower, a.upper)).sum(axis=1)
    return float(excess.mean())


def filter_dataset(clips, model: RobotModel, threshold: float):
    return [c for c in clips if retarget_error(c, model) <= threshold]


def split_dataset(clips, ratio: float, seed: int):
    if not 0.0 < ratio < 1.0:
        raise MotionError("split ratio must lie strictly between 0 and 1")
    clips = list(clips)
    order = np.random.default_rng(seed).permutation(len(clips))
    n_train = int(round(ratio * len(clips)))
    return [clips[i] for i in order[:n_train]], [clips[i] for i in order[n_train:]]


def mirror_clip(clip: MotionClip, model: RobotModel) -> MotionClip:
    """Sagittal mirror image of a clip (root reflected, joints swapped)."""
    from kptrack.model import mirror_base_state

    pos, quat = mirror_base_state(model.symmetry, clip.root_pos, clip.root_quat)
    return replace(clip, root_pos=pos, root_quat=quat, q=mirror_joint_vector(model.symmetry, clip.q))


def default_dataset(model: RobotModel, seed: int = 0, count: int = 20, fps: float = DEFAULT_FPS):
    """Varied clean clips for desk-scale training: upper-body kinds plus some leg motion."""
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(count):
        kind = ("wave", "reach", "wave", "reach", "squat", "walk_in_place", "stand")[i % 7]
        p = {"duration": float(rng.uniform(3.0, 5.0))}
        if kind == "wave":
            p.update(amplitude=float(rng.uniform(0.2, 0.6)), frequency=float(rng.uniform(0.5, 1.5)),
                     side=str(rng.choice(["left", "right", "both"])))
        elif kind == "reach":
            p.update(amplitude=float(rng.uniform(0.5, 1.5)), side=str(rng.choice(["left", "right", "both"])))
        elif kind == "squat":
            p.update(depth=float(rng.uniform(0.1, 0.35)))
        elif kind == "walk_in_place":
            p.update(amplitude=float(rng.uniform(0.15, 0.4)), frequency=float(rng.uniform(0.6, 1.0)))
        c = generate(kind, model, p, fps)
        clips.append(replace(c, name=f"{kind}_{i:03d}"))
    return clips
