"""Articulated humanoid description, forward kinematics and bilateral mirroring.

A model is a tree of rigid links connected by revolute joints, rooted at a
single base link (the pelvis) that is either floating or welded to the world.
Each joint's child frame sits at ``origin`` in the parent frame and rotates
about ``axis`` (shared by parent and child frames). Link frames carry no fixed
rotation offsets, so at zero joint angles every frame is aligned with the base.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from kptrack import rotations as rot

WEIGHT_CLASSES = ("end_effector", "upper", "lower")
REQUIRED_KEYPOINTS = ("pelvis", "head", "left_hand", "right_hand", "left_foot", "right_foot")
MIRROR_POS = np.array([1.0, -1.0, 1.0])
MIRROR_AXIAL = np.array([-1.0, 1.0, -1.0])


class ModelError(ValueError):
    """Raised when a model document is malformed or violates an invariant."""


@dataclass(frozen=True)
class LinkSpec:
    name: str
    mass: float
    inertia: tuple  # 3x3 about the COM, link frame
    com_offset: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class JointSpec:
    name: str
    parent: str
    child: str
    axis: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    weight_class: str = "lower"
    armature: float = 0.0
    torque_limit: float = 100.0
    kp: float = 50.0
    kd: float = 1.0


@dataclass(frozen=True)
class KeypointSpec:
    name: str
    link: str
    offset: tuple = (0.0, 0.0, 0.0)
    weight_class: str = "lower"


@dataclass(frozen=True)
class ContactSphere:
    link: str
    offset: tuple
    radius: float


@dataclass(frozen=True)
class SymmetryMap:
    joint_perm: tuple
    joint_sign: tuple
    keypoint_perm: tuple

    def joint_vector(self, v):
        return mirror_joint_vector(self, v)


@dataclass(frozen=True)
class RobotModel:
    name: str
    links: tuple
    joints: tuple
    default_pose: tuple
    lower: tuple
    upper: tuple
    keypoints: tuple
    contact_spheres: tuple
    symmetry: SymmetryMap
    feet: tuple = ()
    fixed_base: bool = False
    kind: str = "humanoid"

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @property
    def num_links(self) -> int:
        return len(self.links)

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)

    @property
    def nv(self) -> int:
        return self.num_joints + (0 if self.fixed_base else 6)

    @property
    def joint_names(self):
        return [j.name for j in self.joints]

    @property
    def keypoint_names(self):
        return [k.name for k in self.keypoints]

    def keypoint_index(self, name: str) -> int:
        return self.keypoint_names.index(name)

    @cached_property
    def arrays(self) -> "ModelArrays":
        return ModelArrays.build(self)

    def with_masses(self, scale) -> "RobotModel":
        """Copy with link masses (and inertias) multiplied elementwise."""
        links = tuple(
            LinkSpec(l.name, l.mass * s, tuple(map(tuple, np.asarray(l.inertia) * s)), l.com_offset)
            for l, s in zip(self.links, scale)
        )
        return _replace(self, links=links)


def _replace(model, **kw):
    from dataclasses import replace

    return replace(model, **kw)


@dataclass
class ModelArrays:
    """Index tables and constants derived once from a RobotModel."""

    parent: np.ndarray
    child: np.ndarray
    origins: np.ndarray
    axes: np.ndarray
    ancestors: np.ndarray
    masses: np.ndarray
    coms: np.ndarray
    inertias: np.ndarray
    kp_link: np.ndarray
    kp_offset: np.ndarray
    sphere_link: np.ndarray
    sphere_offset: np.ndarray
    sphere_radius: np.ndarray
    sphere_foot: np.ndarray
    foot_link: np.ndarray
    armature: np.ndarray
    torque_limit: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    default_pose: np.ndarray
    joint_perm: np.ndarray
    joint_sign: np.ndarray
    keypoint_perm: np.ndarray
    link_perm: np.ndarray
    sphere_perm: np.ndarray
    foot_perm: np.ndarray
    joint_class: np.ndarray
    keypoint_class: np.ndarray
    axis_k: np.ndarray
    axis_k2: np.ndarray
    joint_of_link: np.ndarray  # -1 for the root

    @classmethod
    def build(cls, model: RobotModel) -> "ModelArrays":
        link_index = {l.name: i for i, l in enumerate(model.links)}
        parent = np.array([link_index[j.parent] for j in model.joints], dtype=int)
        child = np.array([link_index[j.child] for j in model.joints], dtype=int)
        n, L = len(model.joints), len(model.links)
        joint_of_link = {c: j for j, c in enumerate(child)}
        ancestors = np.zeros((L, n))
        for l in range(L):
            k = l
            while k in joint_of_link:
                j = joint_of_link[k]
                ancestors[l, j] = 1.0
                k = parent[j]
        axes = np.array([j.axis for j in model.joints], dtype=float).reshape(n, 3)
        sym = model.symmetry
        joint_perm = np.array(sym.joint_perm, dtype=int)
        link_perm = np.zeros(L, dtype=int)
        root = [i for i in range(L) if i not in joint_of_link]
        link_perm[root[0]] = root[0]
        for j in range(n):
            link_perm[child[j]] = child[joint_perm[j]]
        sphere_link = np.array([link_index[s.link] for s in model.contact_spheres], dtype=int)
        sphere_offset = np.array([s.offset for s in model.contact_spheres], dtype=float).reshape(-1, 3)
        sphere_perm = np.arange(len(sphere_link))
        for s in range(len(sphere_link)):
            target = link_perm[sphere_link[s]]
            mirrored = sphere_offset[s] * MIRROR_POS
            for t in range(len(sphere_link)):
                if sphere_link[t] == target and np.allclose(sphere_offset[t], mirrored, atol=1e-12):
                    sphere_perm[s] = t
                    break
        feet = list(model.feet) or list(dict.fromkeys(s.link for s in model.contact_spheres))
        foot_link = np.array([link_index[f] for f in feet], dtype=int)
        foot_of = {int(l): i for i, l in enumerate(foot_link)}
        sphere_foot = np.array([foot_of.get(int(l), -1) for l in sphere_link], dtype=int)
        foot_perm = np.array([foot_of.get(int(link_perm[l]), i) for i, l in enumerate(foot_link)], dtype=int)
        cls_index = {c: i for i, c in enumerate(WEIGHT_CLASSES)}
        k = rot.skew(axes)
        return cls(
            parent=parent,
            child=child,
            origins=np.array([j.origin for j in model.joints], dtype=float).reshape(n, 3),
            axes=axes,
            ancestors=ancestors,
            masses=np.array([l.mass for l in model.links], dtype=float),
            coms=np.array([l.com_offset for l in model.links], dtype=float).reshape(L, 3),
            inertias=np.array([l.inertia for l in model.links], dtype=float).reshape(L, 3, 3),
            kp_link=np.array([link_index[kp.link] for kp in model.keypoints], dtype=int),
            kp_offset=np.array([kp.offset for kp in model.keypoints], dtype=float).reshape(-1, 3),
            sphere_link=sphere_link,
            sphere_offset=sphere_offset,
            sphere_radius=np.array([s.radius for s in model.contact_spheres], dtype=float),
            sphere_foot=sphere_foot,
            foot_link=foot_link,
            armature=np.array([j.armature for j in model.joints], dtype=float),
            torque_limit=np.array([j.torque_limit for j in model.joints], dtype=float),
            kp=np.array([j.kp for j in model.joints], dtype=float),
            kd=np.array([j.kd for j in model.joints], dtype=float),
            lower=np.array(model.lower, dtype=float),
            upper=np.array(model.upper, dtype=float),
            default_pose=np.array(model.default_pose, dtype=float),
            joint_perm=joint_perm,
            joint_sign=np.array(sym.joint_sign, dtype=float),
            keypoint_perm=np.array(sym.keypoint_perm, dtype=int),
            link_perm=link_perm,
            sphere_perm=sphere_perm,
            foot_perm=foot_perm,
            joint_class=np.array([cls_index[j.weight_class] for j in model.joints], dtype=int),
            keypoint_class=np.array([cls_index[kp.weight_class] for kp in model.keypoints], dtype=int),
            axis_k=k,
            axis_k2=k @ k,
            joint_of_link=np.array([joint_of_link.get(l, -1) for l in range(L)], dtype=np.int64),
        )


# ---------------------------------------------------------------------------
# validation and IO


def validate(model: RobotModel) -> RobotModel:
    """Check every structural invariant, raising ModelError on the first failure."""
    names = [l.name for l in model.links]
    if len(set(names)) != len(names):
        raise ModelError("duplicate link names")
    children = [j.child for j in model.joints]
    roots = [l for l in names if l not in children]
    if len(roots) != 1:
        raise ModelError(f"expected exactly one root link, found {roots}")
    if roots[0] != names[0]:
        raise ModelError("the root link must be listed first")
    if len(set(children)) != len(children):
        raise ModelError("a link is the child of more than one joint")
    seen = {roots[0]}
    for j in model.joints:
        if j.parent not in names or j.child not in names:
            raise ModelError(f"joint {j.name!r} references an unknown link")
        if j.parent not in seen:
            raise ModelError(f"joint {j.name!r}: parent {j.parent!r} not earlier in topological order")
        seen.add(j.child)
        if abs(np.linalg.norm(j.axis) - 1.0) > 1e-9:
            raise ModelError(f"joint {j.name!r}: axis is not a unit vector")
        if j.weight_class not in ("upper", "lower"):
            raise ModelError(f"joint {j.name!r}: weight class must be upper or lower")
        if j.torque_limit <= 0 or j.kp <= 0 or j.kd < 0 or j.armature < 0:
            raise ModelError(f"joint {j.name!r}: gains, armature and torque limit must be positive")
    for l in model.links:
        if not l.mass > 0:
            raise ModelError(f"link {l.name!r}: mass must be positive")
        inertia = np.asarray(l.inertia, dtype=float)
        if inertia.shape != (3, 3) or not np.allclose(inertia, inertia.T, atol=1e-12):
            raise ModelError(f"link {l.name!r}: inertia must be a symmetric 3x3 matrix")
        if np.min(np.linalg.eigvalsh(inertia)) <= 0:
            raise ModelError(f"link {l.name!r}: inertia must be positive definite")
    n = len(model.joints)
    for field_name in ("default_pose", "lower", "upper"):
        if len(getattr(model, field_name)) != n:
            raise ModelError(f"{field_name} has wrong length")
    for j, lo, hi, d in zip(model.joints, model.lower, model.upper, model.default_pose):
        if not lo < hi:
            raise ModelError(f"joint {j.name!r}: lower limit must be below upper limit")
        if not lo < d < hi:
            raise ModelError(f"joint {j.name!r}: default pose outside limits")
    kp_names = [k.name for k in model.keypoints]
    for k in model.keypoints:
        if k.link not in names:
            raise ModelError(f"keypoint {k.name!r} references unknown link {k.link!r}")
        if k.weight_class not in WEIGHT_CLASSES:
            raise ModelError(f"keypoint {k.name!r}: unknown weight class {k.weight_class!r}")
    if model.kind == "humanoid":
        missing = [k for k in REQUIRED_KEYPOINTS if k not in kp_names]
        if missing:
            raise ModelError(f"missing required keypoints {missing}")
        if model.fixed_base is False and roots[0] != "pelvis":
            raise ModelError("humanoid root link must be the pelvis")
    for s in model.contact_spheres:
        if s.link not in names or not s.radius > 0:
            raise ModelError("contact sphere with unknown link or non-positive radius")
    for f in model.feet:
        if f not in names:
            raise ModelError(f"foot {f!r} is not a link")
    _validate_symmetry(model)
    return model


def _is_perm(p, n):
    return sorted(p) == list(range(n))


def _validate_symmetry(model):
    sym = model.symmetry
    n, k = len(model.joints), len(model.keypoints)
    if not _is_perm(list(sym.joint_perm), n) or not _is_perm(list(sym.keypoint_perm), k):
        raise ModelError("symmetry permutation has wrong size or repeats indices")
    if len(sym.joint_sign) != n or any(s not in (1, -1, 1.0, -1.0) for s in sym.joint_sign):
        raise ModelError("joint_sign must hold +1 or -1 per joint")
    jp, kp, js = sym.joint_perm, sym.keypoint_perm, sym.joint_sign
    if any(jp[jp[i]] != i for i in range(n)) or any(kp[kp[i]] != i for i in range(k)):
        raise ModelError("symmetry map not involutive")
    if any(js[i] * js[jp[i]] != 1 for i in range(n)):
        raise ModelError("symmetry map not involutive")
    names = [x.name for x in model.keypoints]
    for i, name in enumerate(names):
        for a, b in (("left_", "right_"), ("right_", "left_")):
            if name.startswith(a) and names[kp[i]] != b + name[len(a):]:
                raise ModelError(f"keypoint {name!r} does not mirror onto its counterpart")


def model_from_dict(doc: dict) -> RobotModel:
    try:
        links = tuple(
            LinkSpec(l["name"], float(l["mass"]), tuple(tuple(float(x) for x in r) for r in l["inertia"]),
                     tuple(float(x) for x in l.get("com_offset", (0, 0, 0))))
            for l in doc["links"]
        )
        joints = tuple(
            JointSpec(
                j["name"], j["parent"], j["child"], tuple(float(x) for x in j["axis"]),
                tuple(float(x) for x in j.get("origin", (0, 0, 0))), j.get("weight_class", "lower"),
                float(j.get("armature", 0.0)), float(j.get("torque_limit", 100.0)),
                float(j.get("kp", 50.0)), float(j.get("kd", 1.0)),
            )
            for j in doc["joints"]
        )
        keypoints = tuple(
            KeypointSpec(k["name"], k["link"], tuple(float(x) for x in k.get("offset", (0, 0, 0))),
                         k.get("weight_class", "lower"))
            for k in doc.get("keypoints", [])
        )
        spheres = tuple(
            ContactSphere(s["link"], tuple(float(x) for x in s["offset"]), float(s["radius"]))
            for s in doc.get("contact_spheres", [])
        )
        sym = doc["symmetry"]
        symmetry = SymmetryMap(
            tuple(int(i) for i in sym["joint_perm"]),
            tuple(int(s) for s in sym["joint_sign"]),
            tuple(int(i) for i in sym["keypoint_perm"]),
        )
        limits = doc["joint_limits"]
        model = RobotModel(
            name=doc["name"],
            links=links,
            joints=joints,
            default_pose=tuple(float(x) for x in doc["default_pose"]),
            lower=tuple(float(x) for x in limits["lower"]),
            upper=tuple(float(x) for x in limits["upper"]),
            keypoints=keypoints,
            contact_spheres=spheres,
            symmetry=symmetry,
            feet=tuple(doc.get("feet", ())),
            fixed_base=bool(doc.get("fixed_base", False)),
            kind=doc.get("kind", "humanoid"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"malformed model document: {exc!r}") from exc
    return validate(model)


def model_to_dict(model: RobotModel) -> dict:
    return {
        "name": model.name,
        "kind": model.kind,
        "fixed_base": model.fixed_base,
        "links": [
            {"name": l.name, "mass": l.mass, "inertia": [list(r) for r in l.inertia], "com_offset": list(l.com_offset)}
            for l in model.links
        ],
        "joints": [
            {
                "name": j.name, "parent": j.parent, "child": j.child, "axis": list(j.axis),
                "origin": list(j.origin), "weight_class": j.weight_class, "armature": j.armature,
                "torque_limit": j.torque_limit, "kp": j.kp, "kd": j.kd,
            }
            for j in model.joints
        ],
        "default_pose": list(model.default_pose),
        "joint_limits": {"lower": list(model.lower), "upper": list(model.upper)},
        "keypoints": [
            {"name": k.name, "link": k.link, "offset": list(k.offset), "weight_class": k.weight_class}
            for k in model.keypoints
        ],
        "contact_spheres": [{"link": s.link, "offset": list(s.offset), "radius": s.radius} for s in model.contact_spheres],
        "feet": list(model.feet),
        "symmetry": {
            "joint_perm": list(model.symmetry.joint_perm),
            "joint_sign": list(model.symmetry.joint_sign),
            "keypoint_perm": list(model.symmetry.keypoint_perm),
        },
    }


def load_model(path) -> RobotModel:
    """Load a model document, or a built-in model by name (e.g. ``"mini-humanoid"``)."""
    if isinstance(path, str) and path in BUILTIN_MODELS:
        return builtin_model(path)
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelError(f"cannot parse model document {path}: {exc}") from exc
    return model_from_dict(doc)


def save_model(model: RobotModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2))


# ---------------------------------------------------------------------------
# built-in models


def _box_inertia(mass, sx, sy, sz):
    return (
        (mass * (sy * sy + sz * sz) / 12.0, 0.0, 0.0),
        (0.0, mass * (sx * sx + sz * sz) / 12.0, 0.0),
        (0.0, 0.0, mass * (sx * sx + sy * sy) / 12.0),
    )


def _mini_humanoid_doc(fixed_base=False):
    links = [{"name": "pelvis", "mass": 6.0, "inertia": _box_inertia(6.0, 0.2, 0.25, 0.45), "com_offset": (0.0, 0.0, 0.12)}]
    joints = []
    default, lower, upper = [], [], []
    keypoints = [
        {"name": "pelvis", "link": "pelvis", "offset": (0.0, 0.0, 0.0), "weight_class": "upper"},
        {"name": "chest", "link": "pelvis", "offset": (0.0, 0.0, 0.3), "weight_class": "upper"},
        {"name": "head", "link": "pelvis", "offset": (0.0, 0.0, 0.5), "weight_class": "end_effector"},
    ]
    spheres = []
    # (side sign, side name); right is the mirror image of left.
    sides = ((1.0, "left"), (-1.0, "right"))
    leg = [
        # joint suffix, child link, axis, origin, mass, box, com, default, lower, upper, armature, kp, kd, limit
        ("hip_pitch", "thigh", (0, 1, 0), (0.0, 0.08, -0.05), 1.5, (0.08, 0.08, 0.25), (0, 0, -0.12), -0.25, -1.5, 1.0, 0.05, 120.0, 3.0, 60.0),
        ("knee", "shank", (0, 1, 0), (0.0, 0.0, -0.25), 1.0, (0.07, 0.07, 0.25), (0, 0, -0.12), 0.5, -0.1, 2.0, 0.05, 120.0, 3.0, 60.0),
        ("ankle_pitch", "foot", (0, 1, 0), (0.0, 0.0, -0.25), 0.4, (0.18, 0.08, 0.04), (0.02, 0, -0.04), -0.25, -0.8, 0.8, 0.03, 60.0, 1.5, 30.0),
    ]
    arm = [
        ("shoulder_pitch", "shoulder", (0, 1, 0), (0.0, 0.15, 0.35), 0.2, (0.05, 0.05, 0.05), (0, 0, 0), 0.0, -3.0, 1.0, 0.02, 40.0, 1.0, 20.0),
        ("shoulder_roll", "upper_arm", (1, 0, 0), (0.0, 0.0, 0.0), 0.6, (0.05, 0.05, 0.2), (0, 0, -0.1), 0.2, -0.3, 2.5, 0.02, 40.0, 1.0, 20.0),
        ("elbow", "forearm", (0, 1, 0), (0.0, 0.0, -0.2), 0.4, (0.04, 0.04, 0.2), (0, 0, -0.1), -0.3, -2.5, 0.1, 0.01, 30.0, 0.8, 15.0),
    ]
    for chain, wclass in ((leg, "lower"), (arm, "upper")):
        for sign, side in sides:
            prev = "pelvis"
            for (sfx, lname, axis, origin, mass, box, com, d, lo, hi, arma, kp, kd, lim) in chain:
                name = f"{side}_{lname}"
                # mirror: y components flip; joint angles flip for axes lying in the mirror plane normal
                ax = np.array(axis, dtype=float)
                jsign = 1.0 if abs(ax[1]) > 0.5 else -1.0
                links.append({"name": name, "mass": mass, "inertia": _box_inertia(mass, *box),
                              "com_offset": (com[0], sign * com[1], com[2])})
                joints.append({
                    "name": f"{side}_{sfx}", "parent": prev, "child": name, "axis": list(axis),
                    "origin": (origin[0], sign * origin[1], origin[2]), "weight_class": wclass,
                    "armature": arma, "torque_limit": lim, "kp": kp, "kd": kd,
                })
                if sign > 0 or jsign > 0:
                    default.append(d), lower.append(lo), upper.append(hi)
                else:
                    default.append(-d), lower.append(-hi), upper.append(-lo)
                prev = name
    for sign, side in sides:
        keypoints += [
            {"name": f"{side}_elbow", "link": f"{side}_forearm", "offset": (0, 0, 0), "weight_class": "upper"},
            {"name": f"{side}_hand", "link": f"{side}_forearm", "offset": (0, 0, -0.2), "weight_class": "end_effector"},
            {"name": f"{side}_knee", "link": f"{side}_shank", "offset": (0, 0, 0), "weight_class": "lower"},
            {"name": f"{side}_foot", "link": f"{side}_foot", "offset": (0.02, 0, -0.05), "weight_class": "lower"},
        ]
        for off in ((-0.05, 0.0, -0.05), (0.10, 0.0, -0.05)):
            spheres.append({"link": f"{side}_foot", "offset": off, "radius": 0.02})
    jn = [j["name"] for j in joints]
    kn = [k["name"] for k in keypoints]

    def swap(name):
        if name.startswith("left_"):
            return "right_" + name[5:]
        if name.startswith("right_"):
            return "left_" + name[6:]
        return name

    joint_sign = [1 if abs(j["axis"][1]) > 0.5 else -1 for j in joints]
    return {
        "name": "mini-humanoid-fixed" if fixed_base else "mini-humanoid",
        "kind": "humanoid",
        "fixed_base": fixed_base,
        "links": links,
        "joints": joints,
        "default_pose": default,
        "joint_limits": {"lower": lower, "upper": upper},
        "keypoints": keypoints,
        "contact_spheres": [] if fixed_base else spheres,
        "feet": ["left_foot", "right_foot"],
        "symmetry": {
            "joint_perm": [jn.index(swap(n)) for n in jn],
            "joint_sign": joint_sign,
            "keypoint_perm": [kn.index(swap(n)) for n in kn],
        },
    }


def _chain_doc(num_links, length=0.5, mass=1.0, axis=(0.0, 1.0, 0.0), fixed_base=True, name=None):
    """Planar chain hanging from a fixed pivot; link COMs at mid-length."""
    links = [{"name": "base", "mass": 1.0, "inertia": _box_inertia(1.0, 0.1, 0.1, 0.1)}]
    joints, kps = [], []
    prev = "base"
    for i in range(num_links):
        lname = f"link{i}"
        links.append({"name": lname, "mass": mass, "inertia": _box_inertia(mass, 0.02, 0.02, length),
                      "com_offset": (0.0, 0.0, -length / 2)})
        joints.append({"name": f"joint{i}", "parent": prev, "child": lname, "axis": list(axis),
                       "origin": (0.0, 0.0, 0.0 if i == 0 else -length), "weight_class": "upper",
                       "torque_limit": 1e6, "kp": 20.0, "kd": 1.0, "armature": 0.0})
        kps.append({"name": f"tip{i}", "link": lname, "offset": (0.0, 0.0, -length), "weight_class": "end_effector"})
        prev = lname
    n = num_links
    return {
        "name": name or f"chain{num_links}",
        "kind": "rig",
        "fixed_base": fixed_base,
        "links": links,
        "joints": joints,
        "default_pose": [0.0] * n,
        "joint_limits": {"lower": [-np.pi] * n, "upper": [np.pi] * n},
        "keypoints": kps,
        "contact_spheres": [],
        "symmetry": {"joint_perm": list(range(n)), "joint_sign": [1] * n, "keypoint_perm": list(range(n))},
    }


def _single_joint_doc():
    doc = _chain_doc(1, length=0.4, mass=1.0, name="single-joint")
    doc["joints"][0].update({"kp": 20.0, "kd": 1.0, "torque_limit": 20.0, "armature": 0.01})
    doc["joint_limits"] = {"lower": [-2.0], "upper": [2.0]}
    return doc


def _free_body_doc():
    return {
        "name": "free-body",
        "kind": "rig",
        "fixed_base": False,
        "links": [{"name": "body", "mass": 2.0, "inertia": _box_inertia(2.0, 0.3, 0.2, 0.1)}],
        "joints": [],
        "default_pose": [],
        "joint_limits": {"lower": [], "upper": []},
        "keypoints": [{"name": "center", "link": "body", "offset": (0, 0, 0), "weight_class": "upper"}],
        "contact_spheres": [],
        "symmetry": {"joint_perm": [], "joint_sign": [], "keypoint_perm": [0]},
    }


BUILTIN_MODELS = {
    "mini-humanoid": lambda: _mini_humanoid_doc(False),
    "mini-humanoid-fixed": lambda: _mini_humanoid_doc(True),
    "pendulum": lambda: _chain_doc(1, name="pendulum"),
    "chain3": lambda: _chain_doc(3, name="chain3"),
    "single-joint": _single_joint_doc,
    "free-body": _free_body_doc,
}


def builtin_model_doc(name: str) -> dict:
    return json.loads(json.dumps(BUILTIN_MODELS[name]()))


def builtin_model(name: str) -> RobotModel:
    if name not in BUILTIN_MODELS:
        raise ModelError(f"unknown built-in model {name!r}")
    return model_from_dict(builtin_model_doc(name))


# ---------------------------------------------------------------------------
# kinematics


@dataclass
class LinkPoses:
    """World pose of every link; arrays carry any leading batch shape."""

    positions: np.ndarray  # (..., L, 3)
    rotations: np.ndarray  # (..., L, 3, 3)

    def pose(self, link: int):
        return self.positions[..., link, :], self.rotations[..., link, :, :]


def _check_quat(q):
    dev = np.abs(np.linalg.norm(q, axis=-1) - 1.0)
    if np.any(dev > 1e-6):
        raise ValueError(f"base quaternion is not unit norm (deviation {np.max(dev):.3g})")


def fk_arrays(arrays: ModelArrays, base_pos, base_rot, q):
    """Batched forward kinematics on raw arrays: returns (positions, rotations)."""
    q = np.asarray(q, dtype=float)
    batch = q.shape[:-1]
    n = q.shape[-1]
    L = len(arrays.masses)
    s = np.sin(q)[..., None, None]
    c = np.cos(q)[..., None, None]
    joint_rot = np.eye(3) + s * arrays.axis_k + (1.0 - c) * arrays.axis_k2
    pos = np.empty(batch + (L, 3))
    rots = np.empty(batch + (L, 3, 3))
    pos[..., 0, :] = base_pos
    rots[..., 0, :, :] = base_rot
    for j in range(n):
        p, ch = arrays.parent[j], arrays.child[j]
        rp = rots[..., p, :, :]
        pos[..., ch, :] = pos[..., p, :] + rp @ arrays.origins[j]
        rots[..., ch, :, :] = rp @ joint_rot[..., j, :, :]
    return pos, rots


def forward_kinematics(model: RobotModel, base_pose, joint_angles) -> LinkPoses:
    """World pose of every link for a base pose ``(position, quaternion)``."""
    base_pos, base_quat = base_pose
    base_pos = np.asarray(base_pos, dtype=float)
    base_quat = np.asarray(base_quat, dtype=float)
    joint_angles = np.asarray(joint_angles, dtype=float)
    if joint_angles.shape[-1] != model.num_joints:
        raise ValueError(f"expected {model.num_joints} joint angles, got {joint_angles.shape[-1]}")
    _check_quat(base_quat)
    pos, rots = fk_arrays(model.arrays, base_pos, rot.quat_to_matrix(base_quat), joint_angles)
    return LinkPoses(pos, rots)


def keypoints_global(model: RobotModel, link_poses: LinkPoses):
    a = model.arrays
    r = link_poses.rotations[..., a.kp_link, :, :]
    return link_poses.positions[..., a.kp_link, :] + np.einsum("...ij,...j->...i", r, a.kp_offset)


def heading_yaw(rotation):
    """Yaw of a rotation matrix's x axis projected on the ground plane."""
    return np.arctan2(rotation[..., 1, 0], rotation[..., 0, 0])


def keypoints_local(keypoints_global, pelvis_pose):
    """Express keypoints in the pelvis heading frame (pelvis origin, yaw only, z up)."""
    pelvis_pos, pelvis_rot = pelvis_pose
    pelvis_rot = np.asarray(pelvis_rot, dtype=float)
    if pelvis_rot.shape[-1] == 4:
        pelvis_rot = rot.quat_to_matrix(pelvis_rot)
    yaw_rot = rot.yaw_matrix(heading_yaw(pelvis_rot))
    rel = np.asarray(keypoints_global) - np.asarray(pelvis_pos)[..., None, :]
    return np.einsum("...ji,...kj->...ki", yaw_rot, rel)


def keypoint_orientations(model: RobotModel, link_poses: LinkPoses):
    """Unit quaternion (w >= 0) of the link carrying each keypoint."""
    return rot.matrix_to_quat(link_poses.rotations[..., model.arrays.kp_link, :, :])


# ---------------------------------------------------------------------------
# mirroring


def mirror_joint_vector(sym: SymmetryMap, v):
    v = np.asarray(v, dtype=float)
    perm = np.asarray(sym.joint_perm, dtype=int)
    if v.shape[-1] != len(perm):
        raise ValueError(f"expected {len(perm)} joint values, got {v.shape[-1]}")
    return np.asarray(sym.joint_sign, dtype=float) * v[..., perm]


def mirror_base_state(sym: SymmetryMap, position, orientation, linear_velocity=None, angular_velocity=None):
    """Reflect base quantities across the sagittal (x-z) plane."""
    out = (
        np.asarray(position, dtype=float) * MIRROR_POS,
        rot.mirror_quat(orientation),
    )
    if linear_velocity is not None:
        out += (np.asarray(linear_velocity, dtype=float) * MIRROR_POS,)
    if angular_velocity is not None:
        out += (np.asarray(angular_velocity, dtype=float) * MIRROR_AXIAL,)
    return out


def mirror_keypoints(sym: SymmetryMap, points):
    """Reflect per-keypoint world vectors and swap left/right indices."""
    points = np.asarray(points, dtype=float)
    return points[..., np.asarray(sym.keypoint_perm, dtype=int), :] * MIRROR_POS


def mirror_configuration(model: RobotModel, base_pos, base_quat, q):
    pos, quat = mirror_base_state(model.symmetry, base_pos, base_quat)
    return pos, quat, mirror_joint_vector(model.symmetry, q)


def standing_height(model: RobotModel, q=None) -> float:
    """Base height that puts the lowest contact sphere exactly on the ground."""
    q = model.arrays.default_pose if q is None else np.asarray(q, dtype=float)
    a = model.arrays
    if len(a.sphere_link) == 0:
        return 0.0
    pos, rots = fk_arrays(a, np.zeros(3), np.eye(3), q)
    centers = pos[a.sphere_link] + np.einsum("sij,sj->si", rots[a.sphere_link], a.sphere_offset)
    return float(-np.min(centers[:, 2] - a.sphere_radius))
