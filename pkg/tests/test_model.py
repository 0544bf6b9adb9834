import json

import numpy as np
import pytest

from kptrack import rotations as rot
from kptrack.model import (
    MIRROR_POS,
    ModelError,
    builtin_model_doc,
    forward_kinematics,
    keypoint_orientations,
    keypoints_global,
    keypoints_local,
    load_model,
    mirror_base_state,
    mirror_configuration,
    mirror_joint_vector,
    mirror_keypoints,
    model_from_dict,
    model_to_dict,
    save_model,
    standing_height,
)


@pytest.fixture(scope="module")
def humanoid():
    return load_model("mini-humanoid")


def random_quat(rng, n=None):
    q = rng.standard_normal((4,) if n is None else (n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def random_q(model, rng, n=None):
    a = model.arrays
    shape = (model.num_joints,) if n is None else (n, model.num_joints)
    return rng.uniform(a.lower, a.upper, size=shape)


def test_builtin_humanoid_shape(humanoid):
    assert humanoid.num_joints == 12
    assert humanoid.num_keypoints == 11
    assert humanoid.num_links == 13
    assert not humanoid.fixed_base
    assert set(["pelvis", "head", "left_hand", "right_hand", "left_foot", "right_foot"]) <= set(humanoid.keypoint_names)


def test_document_roundtrip(humanoid, tmp_path):
    path = tmp_path / "m.json"
    save_model(humanoid, path)
    again = load_model(path)
    assert model_to_dict(again) == model_to_dict(humanoid)


def test_unparseable_document(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ModelError):
        load_model(path)


def test_limit_violation_names_joint():
    doc = builtin_model_doc("mini-humanoid")
    doc["joint_limits"]["lower"][4] = doc["joint_limits"]["upper"][4]
    with pytest.raises(ModelError, match="right_knee"):
        model_from_dict(doc)


def test_non_involutive_symmetry_rejected():
    doc = builtin_model_doc("mini-humanoid")
    perm = list(range(12))
    perm[0], perm[1], perm[2] = 1, 2, 0  # a 3-cycle
    doc["symmetry"]["joint_perm"] = perm
    with pytest.raises(ModelError, match="symmetry map not involutive"):
        model_from_dict(doc)


def test_default_pose_outside_limits_rejected():
    doc = builtin_model_doc("mini-humanoid")
    doc["default_pose"][0] = doc["joint_limits"]["upper"][0] + 0.1
    with pytest.raises(ModelError, match="left_hip_pitch"):
        model_from_dict(doc)


def test_missing_required_keypoint():
    doc = builtin_model_doc("mini-humanoid")
    doc["keypoints"] = [k for k in doc["keypoints"] if k["name"] != "head"]
    doc["symmetry"]["keypoint_perm"] = list(range(len(doc["keypoints"])))
    with pytest.raises(ModelError, match="head"):
        model_from_dict(doc)


def test_rest_pose_fk_matches_layout(humanoid):
    a = humanoid.arrays
    poses = forward_kinematics(humanoid, (np.zeros(3), rot.IDENTITY_QUAT), np.zeros(12))
    assert np.allclose(poses.positions[0], 0.0)
    # with zero angles every link sits at the accumulated joint origins
    for j in range(humanoid.num_joints):
        expected = poses.positions[a.parent[j]] + a.origins[j]
        assert np.allclose(poses.positions[a.child[j]], expected, atol=1e-15)
        assert np.allclose(poses.rotations[a.child[j]], np.eye(3))


def test_pendulum_tip_right_hand_rule():
    # rotation about +y by theta sends (0, 0, -L) to (-L sin, 0, -L cos)
    model = load_model("pendulum")
    L = 0.5
    for theta in (0.3, -1.1, 2.0):
        poses = forward_kinematics(model, (np.zeros(3), rot.IDENTITY_QUAT), [theta])
        tip = keypoints_global(model, poses)[0]
        assert np.allclose(tip, [-L * np.sin(theta), 0.0, -L * np.cos(theta)], atol=1e-14)


def test_pendulum_negative_axis_gives_positive_sine():
    doc = builtin_model_doc("pendulum")
    doc["joints"][0]["axis"] = [0.0, -1.0, 0.0]
    model = model_from_dict(doc)
    theta = 0.7
    tip = keypoints_global(model, forward_kinematics(model, (np.zeros(3), rot.IDENTITY_QUAT), [theta]))[0]
    assert np.allclose(tip, [0.5 * np.sin(theta), 0.0, -0.5 * np.cos(theta)], atol=1e-14)


def test_fk_rejects_bad_inputs(humanoid):
    with pytest.raises(ValueError):
        forward_kinematics(humanoid, (np.zeros(3), [1.0, 0.0, 0.0, 0.1]), np.zeros(12))
    with pytest.raises(ValueError):
        forward_kinematics(humanoid, (np.zeros(3), rot.IDENTITY_QUAT), np.zeros(11))


def test_fk_translation_equivariance(humanoid):
    rng = np.random.default_rng(0)
    q = random_q(humanoid, rng)
    quat = random_quat(rng)
    a = forward_kinematics(humanoid, (np.zeros(3), quat), q)
    b = forward_kinematics(humanoid, (np.array([1.0, 2.0, 3.0]), quat), q)
    assert np.allclose(b.positions - a.positions, [1.0, 2.0, 3.0], atol=1e-14)
    assert np.allclose(a.rotations, b.rotations)


def test_fk_rigid_rotation_equivariance(humanoid):
    rng = np.random.default_rng(1)
    for _ in range(20):
        q = random_q(humanoid, rng)
        quat, pos = random_quat(rng), rng.standard_normal(3)
        r, t = random_quat(rng), rng.standard_normal(3)
        R = rot.quat_to_matrix(r)
        a = forward_kinematics(humanoid, (pos, quat), q)
        b = forward_kinematics(humanoid, (R @ pos + t, rot.quat_mul(r, quat)), q)
        assert np.allclose(b.positions, a.positions @ R.T + t, atol=1e-12)
        assert np.allclose(b.rotations, R @ a.rotations, atol=1e-12)


def test_keypoints_by_direct_transform(humanoid):
    rng = np.random.default_rng(2)
    q = random_q(humanoid, rng)
    poses = forward_kinematics(humanoid, (rng.standard_normal(3), random_quat(rng)), q)
    kp = keypoints_global(humanoid, poses)
    for i, spec in enumerate(humanoid.keypoints):
        link = [l.name for l in humanoid.links].index(spec.link)
        expected = poses.positions[link] + poses.rotations[link] @ np.array(spec.offset)
        assert np.allclose(kp[i], expected, atol=1e-14)


def test_rest_hands_mirror(humanoid):
    poses = forward_kinematics(humanoid, (np.zeros(3), rot.IDENTITY_QUAT), humanoid.arrays.default_pose)
    kp = keypoints_global(humanoid, poses)
    left, right = kp[humanoid.keypoint_index("left_hand")], kp[humanoid.keypoint_index("right_hand")]
    assert np.allclose(left, right * MIRROR_POS, atol=1e-14)


def test_keypoints_local_pelvis_and_heading_invariance(humanoid):
    rng = np.random.default_rng(3)
    q = random_q(humanoid, rng)
    quat = rot.quat_from_euler(0.1, 0.2, 0.3)
    poses = forward_kinematics(humanoid, (np.array([0.3, -0.2, 0.6]), quat), q)
    kp = keypoints_global(humanoid, poses)
    local = keypoints_local(kp, poses.pose(0))
    assert np.allclose(local[humanoid.keypoint_index("pelvis")], 0.0, atol=1e-14)
    r = rot.quat_from_yaw(np.pi / 2)
    poses2 = forward_kinematics(humanoid, (rot.quat_rotate(r, [0.3, -0.2, 0.6]) + [5.0, -1.0, 0.0],
                                           rot.quat_mul(r, quat)), q)
    local2 = keypoints_local(keypoints_global(humanoid, poses2), poses2.pose(0))
    assert np.allclose(local, local2, atol=1e-12)


def test_keypoints_local_tilted_pelvis_uses_yaw_only(humanoid):
    rng = np.random.default_rng(4)
    yaw, pitch, roll = 0.8, 0.4, -0.3
    quat = rot.quat_from_euler(roll, pitch, yaw)
    pos = np.array([0.2, 0.1, 0.5])
    poses = forward_kinematics(humanoid, (pos, quat), random_q(humanoid, rng))
    kp = keypoints_global(humanoid, poses)
    # oracle: heading from the body x axis projected to the ground plane
    x_axis = rot.quat_to_matrix(quat)[:, 0]
    psi = np.arctan2(x_axis[1], x_axis[0])
    assert np.isclose(psi, yaw)
    c, s = np.cos(psi), np.sin(psi)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    expected = (kp - pos) @ Rz
    assert np.allclose(keypoints_local(kp, (pos, quat)), expected, atol=1e-14)


def test_mirror_joint_vector_cases(humanoid):
    sym = humanoid.symmetry
    rng = np.random.default_rng(5)
    v = rng.standard_normal(12)
    assert np.array_equal(mirror_joint_vector(sym, mirror_joint_vector(sym, v)), v)
    d = humanoid.arrays.default_pose
    assert np.array_equal(mirror_joint_vector(sym, d), d)
    bend = np.zeros(12)
    bend[humanoid.joint_names.index("left_elbow")] = 0.9
    expected = np.zeros(12)
    expected[humanoid.joint_names.index("right_elbow")] = 0.9
    assert np.array_equal(mirror_joint_vector(sym, bend), expected)
    roll = np.zeros(12)
    roll[humanoid.joint_names.index("left_shoulder_roll")] = 0.4
    expected = np.zeros(12)
    expected[humanoid.joint_names.index("right_shoulder_roll")] = -0.4
    assert np.array_equal(mirror_joint_vector(sym, roll), expected)
    with pytest.raises(ValueError):
        mirror_joint_vector(sym, np.zeros(5))


def test_mirror_base_state(humanoid):
    sym = humanoid.symmetry
    pos, quat = mirror_base_state(sym, [1.0, 2.0, 3.0], rot.IDENTITY_QUAT)
    assert np.array_equal(pos, [1.0, -2.0, 3.0])
    assert np.allclose(quat, rot.IDENTITY_QUAT)
    M = np.diag([1.0, -1.0, 1.0])
    for psi in (0.3, -2.0):
        _, q2 = mirror_base_state(sym, np.zeros(3), rot.quat_from_yaw(psi))
        assert np.allclose(rot.quat_to_matrix(q2), M @ rot.quat_to_matrix(rot.quat_from_yaw(psi)) @ M)
        assert np.isclose(rot.yaw_of(q2), -psi)
    rng = np.random.default_rng(6)
    args = (rng.standard_normal(3), random_quat(rng), rng.standard_normal(3), rng.standard_normal(3))
    out = mirror_base_state(sym, *args)
    _, q_m, v_m, w_m = out
    assert np.allclose(v_m, args[2] * [1, -1, 1])
    assert np.allclose(w_m, args[3] * [-1, 1, -1])
    assert np.allclose(rot.quat_to_matrix(q_m), M @ rot.quat_to_matrix(args[1]) @ M, atol=1e-14)
    back = mirror_base_state(sym, *out)
    for x, y in zip(back, args):
        assert np.allclose(x, y, atol=1e-15)


def test_fk_mirror_commutation(humanoid):
    rng = np.random.default_rng(7)
    n = 1000
    q = random_q(humanoid, rng, n)
    quat, pos = random_quat(rng, n), rng.standard_normal((n, 3))
    kp = keypoints_global(humanoid, forward_kinematics(humanoid, (pos, quat), q))
    mp, mq, mjq = mirror_configuration(humanoid, pos, quat, q)
    kp_m = keypoints_global(humanoid, forward_kinematics(humanoid, (mp, mq), mjq))
    assert np.max(np.abs(kp_m - mirror_keypoints(humanoid.symmetry, kp))) < 1e-9


def test_keypoint_orientations_unit(humanoid):
    rng = np.random.default_rng(8)
    poses = forward_kinematics(humanoid, (np.zeros(3), random_quat(rng)), random_q(humanoid, rng))
    kq = keypoint_orientations(humanoid, poses)
    assert np.allclose(np.linalg.norm(kq, axis=-1), 1.0)
    assert np.all(kq[:, 0] >= 0)


def test_standing_height_puts_feet_on_ground(humanoid):
    h = standing_height(humanoid)
    a = humanoid.arrays
    poses = forward_kinematics(humanoid, (np.array([0.0, 0.0, h]), rot.IDENTITY_QUAT), a.default_pose)
    centers = poses.positions[a.sphere_link] + np.einsum("sij,sj->si", poses.rotations[a.sphere_link], a.sphere_offset)
    assert np.isclose(np.min(centers[:, 2] - a.sphere_radius), 0.0, atol=1e-14)


def test_document_is_json(humanoid):
    json.dumps(model_to_dict(humanoid))
