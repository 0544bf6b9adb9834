import json

import numpy as np
import pytest

from kptrack import rotations as rot
from kptrack.model import builtin_model_doc, load_model, mirror_joint_vector, model_from_dict
from kptrack.motion import (
    GENERATOR_KINDS,
    MotionClip,
    MotionError,
    NoiseSpec,
    corrupt,
    default_dataset,
    filter_dataset,
    generate,
    goal_track,
    load_clip,
    mirror_clip,
    resample,
    retarget_error,
    retarget_scale,
    save_clip,
    split_dataset,
)


@pytest.fixture(scope="module")
def humanoid():
    return load_model("mini-humanoid")


def two_frame_clip(q0, q1, fps=1.0, quats=None):
    quats = quats if quats is not None else np.tile(rot.IDENTITY_QUAT, (2, 1))
    return MotionClip(fps, np.zeros((2, 3)), quats, np.array([q0, q1], dtype=float))


def test_roundtrip_lossless(humanoid, tmp_path):
    spec = NoiseSpec(keypoint_noise_std=0.03, occlusion_prob=0.3, spike_prob=0.05, spike_magnitude=0.5, seed=3)
    for kind in ("stand", "wave", "reach", "squat", "walk_in_place"):
        clip, _ = corrupt(generate(kind, humanoid), spec, humanoid)
        save_clip(clip, tmp_path / "c.json")
        back = load_clip(tmp_path / "c.json")
        assert back == clip


def test_clip_document_errors(tmp_path):
    with pytest.raises(MotionError, match="2 frames"):
        MotionClip(50.0, np.zeros((1, 3)), np.tile(rot.IDENTITY_QUAT, (1, 1)), np.zeros((1, 2)))
    doc = {"fps": 50, "joints": ["a", "b"], "frames": [
        {"t": 0.0, "root_pos": [0, 0, 0], "root_quat": [1, 0, 0, 0], "q": [0, 0]},
        {"t": 0.02, "root_pos": [0, 0, 0], "root_quat": [1, 0, 0, 0], "q": [0, 0, 0]},
    ]}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(MotionError, match="frame 1"):
        load_clip(path)
    path.write_text("{not json")
    with pytest.raises(MotionError):
        load_clip(path)


def test_resample_identity_and_midpoint():
    clip = two_frame_clip([0.0, 1.0], [1.0, 3.0])
    assert resample(clip, 1.0).frames_equal(clip)
    up = resample(clip, 50.0)
    assert up.num_frames == 51
    assert np.allclose(up.q[25], [0.5, 2.0])
    assert abs(up.duration - clip.duration) <= 1 / 50


def test_resample_slerp_midpoint():
    quats = np.array([rot.IDENTITY_QUAT, rot.quat_from_yaw(np.pi / 2)])
    clip = two_frame_clip([0.0], [0.0], quats=quats)
    up = resample(clip, 50.0)
    assert np.isclose(rot.yaw_of(up.root_quat[25]), np.pi / 4)
    assert np.allclose(np.linalg.norm(up.root_quat, axis=-1), 1.0)


def test_stand_and_zero_amplitude_wave(humanoid):
    stand = generate("stand", humanoid, {"duration": 2.0})
    assert stand.num_frames == 101
    assert np.all(stand.q == humanoid.arrays.default_pose)
    wave = generate("wave", humanoid, {"duration": 2.0, "amplitude": 0.0})
    assert wave.frames_equal(stand)


def test_generators_respect_limits_and_height(humanoid):
    a = humanoid.arrays
    for kind in GENERATOR_KINDS[:-1]:
        clip = generate(kind, humanoid)
        assert clip.fps == 50.0
        assert np.all(clip.q >= a.lower) and np.all(clip.q <= a.upper)
        if kind != "squat":
            assert np.ptp(clip.root_pos[:, 2]) == 0.0
    with pytest.raises(MotionError, match="outside its limits"):
        generate("reach", humanoid, {"amplitude": 10.0})
    with pytest.raises(MotionError, match="unknown motion kind"):
        generate("cartwheel", humanoid)


def test_composite_frame_count_and_seam(humanoid):
    wave = generate("wave", humanoid)
    reach = generate("reach", humanoid)
    comp = generate("composite", humanoid, {"parts": ["wave", "reach"]})
    assert comp.num_frames == wave.num_frames + reach.num_frames
    seam = wave.num_frames
    assert np.max(np.abs(comp.q[seam] - comp.q[seam - 1])) < 1e-9


def test_corrupt_identity_and_determinism(humanoid):
    clip = generate("wave", humanoid)
    out, log = corrupt(clip, NoiseSpec(seed=5), humanoid)
    assert out == clip and log == []
    spec = NoiseSpec(keypoint_noise_std=0.05, occlusion_prob=0.2, spike_prob=0.02, spike_magnitude=0.4,
                     drift_rate=0.1, lr_swap_prob=0.5, seed=5)
    a, la = corrupt(clip, spec, humanoid)
    b, lb = corrupt(clip, spec, humanoid)
    assert a == b and la == lb
    c, _ = corrupt(clip, NoiseSpec(**{**spec.to_dict(), "seed": 6}), humanoid)
    assert not c.frames_equal(a)
    assert a.source == "corrupted" and len(a.corruptions) == len(la)


def test_lr_swap_whole_clip_is_mirror(humanoid):
    clip = generate("wave", humanoid, {"side": "left"})
    out, _ = corrupt(clip, NoiseSpec(lr_swap_prob=1.0, lr_swap_duration=clip.duration + 1.0), humanoid)
    assert np.array_equal(out.q, mirror_joint_vector(humanoid.symmetry, clip.q))
    # the root of an in-place clip lies on the symmetry plane, so the full mirror agrees
    assert np.array_equal(out.q, mirror_clip(clip, humanoid).q)


def test_drift_accumulates_linearly(humanoid):
    clip = generate("stand", humanoid, {"duration": 5.0})
    out, _ = corrupt(clip, NoiseSpec(drift_rate=0.1), humanoid)
    disp = np.linalg.norm(out.root_pos[-1] - clip.root_pos[-1])
    assert np.isclose(disp, 0.5)


def test_spike_clamped_and_occlusion_holds(humanoid):
    a = humanoid.arrays
    clip = generate("walk_in_place", humanoid)
    out, log = corrupt(clip, NoiseSpec(spike_prob=0.1, spike_magnitude=5.0, seed=1), humanoid)
    assert np.all(out.q <= a.upper + 0.2 + 1e-12) and np.all(out.q >= a.lower - 0.2 - 1e-12)
    assert retarget_error(out, humanoid) > 0
    out, log = corrupt(clip, NoiseSpec(occlusion_prob=1.0, occlusion_hold=0.5), humanoid)
    for entry in log:
        s, n, j = entry["start"], entry["frames"], entry["joints"]
        assert np.all(out.q[s:s + n, j] == clip.q[s, j])


def test_noise_spec_validation():
    with pytest.raises(MotionError):
        NoiseSpec(occlusion_prob=1.5)
    with pytest.raises(MotionError):
        NoiseSpec(keypoint_noise_std=-0.1)
    with pytest.raises(MotionError, match="unknown"):
        NoiseSpec.from_dict({"bogus": 1})


def test_retarget_identity_scale_and_clamp(humanoid):
    clip = generate("squat", humanoid)
    same, count = retarget_scale(clip, humanoid, humanoid)
    assert same.frames_equal(clip) and count == 0

    doc = builtin_model_doc("mini-humanoid")
    for j in doc["joints"]:
        if j["name"].endswith(("knee", "ankle_pitch")):
            j["origin"] = [2 * x for x in j["origin"]]
    tall = model_from_dict(doc)
    out, _ = retarget_scale(clip, humanoid, tall)
    assert np.allclose(out.root_pos[:, 2], 2 * clip.root_pos[:, 2])

    q = clip.q.copy()
    q[10, 1] = humanoid.arrays.upper[1] + 0.3
    bad = MotionClip(clip.fps, clip.root_pos, clip.root_quat, q, clip.joints)
    fixed, count = retarget_scale(bad, humanoid, humanoid)
    assert count == 1 and fixed.q[10, 1] == humanoid.arrays.upper[1]

    with pytest.raises(MotionError, match="topology"):
        retarget_scale(clip, humanoid, load_model("chain3"))


def test_retarget_error_and_filter(humanoid):
    clean = generate("wave", humanoid)
    assert retarget_error(clean, humanoid) == 0.0
    spiky, _ = corrupt(clean, NoiseSpec(spike_prob=0.2, spike_magnitude=3.0, seed=2), humanoid)
    assert retarget_error(spiky, humanoid) > 0
    assert filter_dataset([clean, spiky], humanoid, 0.0) == [clean]


def test_split_dataset():
    clips = list(range(10))
    train, test = split_dataset(clips, 0.9, seed=0)
    assert len(train) == 9 and len(test) == 1
    assert sorted(train + test) == clips
    assert split_dataset(clips, 0.9, seed=0) == (train, test)
    assert tuple(map(len, split_dataset([1, 2], 0.5, 0))) == (1, 1)
    with pytest.raises(MotionError):
        split_dataset(clips, 1.0, 0)


def test_goal_track_deterministic(humanoid):
    clip = generate("walk_in_place", humanoid)
    g1, g2 = goal_track(clip, humanoid), goal_track(clip, humanoid)
    for k in ("keypoints", "keypoint_quats", "q", "qd"):
        assert np.array_equal(getattr(g1, k), getattr(g2, k))
    assert g1.keypoints.shape == (clip.num_frames, humanoid.num_keypoints, 3)
    mid = (clip.q[11] - clip.q[9]) * clip.fps / 2
    assert np.allclose(g1.qd[10], mid)


def test_default_dataset_valid(humanoid):
    a = humanoid.arrays
    clips = default_dataset(humanoid, seed=0, count=7)
    assert len({c.name for c in clips}) == 7
    for c in clips:
        assert np.all(c.q >= a.lower) and np.all(c.q <= a.upper)
