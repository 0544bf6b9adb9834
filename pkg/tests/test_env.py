import math
from dataclasses import replace

import numpy as np
import pytest

from oracles import frame_of, mirror_state, random_state, random_transition, reward_terms_scalar

from kptrack import rotations as rot
from kptrack.config import ConfigError
from kptrack.env import (
    TERM_NAMES,
    TERMINATION_DEVIATION,
    TERMINATION_FALL,
    TERMINATION_NONE,
    DomainRandConfig,
    EnvConfig,
    FeetStatus,
    FeetTracker,
    GoalFrame,
    RandomizedParams,
    RewardConfig,
    TrackingEnv,
    build_teacher_obs,
    check_termination,
    compute_reward_terms,
    layout_sizes,
    mirror_map,
    normalized_class_weights,
    proprio_obs,
    sample_randomization,
    teacher_layout,
    weighted_exp_reward,
)
from kptrack.model import load_model, standing_height
from kptrack.motion import generate
from kptrack.sim import SimState


@pytest.fixture(scope="module")
def humanoid():
    return load_model("mini-humanoid")


def quiet_config(**kw):
    return EnvConfig(randomization=DomainRandConfig.disabled(), **kw)


def standing_frame(model, N=1):
    s = SimState.from_pose(model, [0.0, 0.0, standing_height(model)], batch=N)
    return s, frame_of(model, s, np.zeros((N, len(model.arrays.sphere_link), 3)))


def airborne_feet(N, F):
    z = np.zeros((N, F))
    return FeetStatus(z.astype(bool), z.astype(bool), z, np.ones((N, F), dtype=bool), z)


# ---------------------------------------------------------------------------
# weighted exponential reward


def test_weighted_exp_cases():
    assert weighted_exp_reward([0.0, 0.0], [1.0, 3.0], 0.5) == 1.0
    assert math.isclose(weighted_exp_reward([0.25], [1.0], 0.5), math.exp(-1.0))
    with pytest.raises(ValueError):
        weighted_exp_reward([0.0], [1.0], 0.0)
    # strictly decreasing in each error
    base = weighted_exp_reward([0.1, 0.2], [1.0, 2.0], 0.5)
    assert weighted_exp_reward([0.11, 0.2], [1.0, 2.0], 0.5) < base
    assert weighted_exp_reward([0.1, 0.21], [1.0, 2.0], 0.5) < base


def test_humanoid_keypoint_class_weights(humanoid):
    w = normalized_class_weights(humanoid.arrays.keypoint_class, RewardConfig().keypoint_class_weights)
    assert math.isclose(w.sum(), 1.0)
    # 3 end effectors, 4 upper, 4 lower: 12 + 8 + 4 = 24
    names = [k.name for k in humanoid.keypoints]
    for name in ("head", "left_hand", "right_hand"):
        assert math.isclose(w[names.index(name)], 4 / 24)
    assert math.isclose(w[names.index("left_elbow")], 2 / 24)
    assert math.isclose(w[names.index("left_foot")], 1 / 24)
    e = np.random.default_rng(0).random(11)
    expected = math.exp(-sum(wi * ei for wi, ei in zip(w, e)) / 0.3 ** 2)
    assert math.isclose(weighted_exp_reward(e, w, 0.3), expected, rel_tol=1e-12)
    uniform = normalized_class_weights(humanoid.arrays.keypoint_class, {}, enabled=False)
    assert np.allclose(uniform, 1 / 11)


# ---------------------------------------------------------------------------
# reward terms


def test_on_goal_reward_is_138(humanoid):
    cfg = RewardConfig()
    s, fr = standing_frame(humanoid)
    goal = GoalFrame(fr.kp_pos, fr.kp_quat, fr.q, fr.qd)
    terms, total = compute_reward_terms(humanoid, cfg, fr, fr, np.zeros((1, 12)), np.zeros((1, 12)), goal,
                                        airborne_feet(1, 2), np.zeros((1, 12)), np.zeros(1, dtype=bool), 0.02)
    for k in ("tracking_joint_pos", "tracking_joint_vel", "tracking_body_pos", "tracking_body_rot"):
        assert terms[k][0] == 1.0
    # flat feet carry a round-off residue far below any weight's resolution
    for k in TERM_NAMES[4:-1]:
        assert abs(terms[k][0]) < 1e-20
    assert total[0] == 138.0


def test_dof_limit_and_feet_slip_cases(humanoid):
    cfg = RewardConfig()
    s, fr = standing_frame(humanoid)
    goal = GoalFrame(fr.kp_pos, fr.kp_quat, fr.q, fr.qd)
    cur = fr.take(slice(None))
    cur.q = cur.q.copy()
    cur.q[0, 1] = humanoid.arrays.upper[1] + 0.05
    terms, _ = compute_reward_terms(humanoid, cfg, fr, cur, np.zeros((1, 12)), np.zeros((1, 12)), goal,
                                    airborne_feet(1, 2), np.zeros((1, 12)), np.zeros(1, dtype=bool), 0.02)
    assert terms["dof_limits"][0] == 1.0
    assert cfg.weights["dof_limits"] * terms["dof_limits"][0] == -100.0

    cur = fr.take(slice(None))
    cur.foot_force = np.zeros((1, 2, 3))
    cur.foot_force[0, 0, 2] = 50.0
    cur.foot_vel = np.zeros((1, 2, 3))
    cur.foot_vel[0, 0, 0] = 0.2
    terms, _ = compute_reward_terms(humanoid, cfg, fr, cur, np.zeros((1, 12)), np.zeros((1, 12)), goal,
                                    airborne_feet(1, 2), np.zeros((1, 12)), np.zeros(1, dtype=bool), 0.02)
    assert math.isclose(terms["feet_slip"][0], 0.2)
    assert math.isclose(cfg.weights["feet_slip"] * terms["feet_slip"][0], -1.0)


def test_reward_terms_match_scalar_oracle(humanoid):
    rng = np.random.default_rng(1)
    for cfg in (RewardConfig(), RewardConfig(use_class_weights=False)):
        (prev, cur, a_prev, a, goal, feet, tau, term), _ = random_transition(humanoid, rng, 50)
        terms, total = compute_reward_terms(humanoid, cfg, prev, cur, a_prev, a, goal, feet, tau, term, 0.02)
        for e in range(50):
            ref, ref_total = reward_terms_scalar(humanoid, cfg, prev, cur, a_prev, a, goal, feet, tau, term, 0.02, e)
            for k in TERM_NAMES:
                assert abs(terms[k][e] - ref[k]) <= 1e-9 * max(1.0, abs(ref[k])), k
            assert abs(total[e] - ref_total) <= 1e-9 * max(1.0, abs(ref_total))


def test_tracking_terms_in_unit_interval(humanoid):
    (prev, cur, a_prev, a, goal, feet, tau, term), _ = random_transition(humanoid, np.random.default_rng(2), 200)
    terms, total = compute_reward_terms(humanoid, RewardConfig(), prev, cur, a_prev, a, goal, feet, tau, term, 0.02)
    for k in TERM_NAMES[:4]:
        assert np.all((terms[k] > 0) & (terms[k] <= 1))
    assert np.all(np.isfinite(total))


def test_reward_mirror_invariance(humanoid):
    rng = np.random.default_rng(3)
    orig, mirrored = random_transition(humanoid, rng, 200)
    cfg = RewardConfig()
    _, t0 = compute_reward_terms(humanoid, cfg, *orig, 0.02)
    _, t1 = compute_reward_terms(humanoid, cfg, *mirrored, 0.02)
    assert np.max(np.abs(t0 - t1)) <= 1e-9


def test_feet_tracker_step_bookkeeping():
    tr = FeetTracker(1, 1)
    on, off = np.array([[[0.0, 0.0, 10.0]]]), np.zeros((1, 1, 3))
    tr.update(on, np.array([[0.0]]), 0.02)
    heights = [0.05, 0.12, 0.08]
    for h in heights:
        st = tr.update(off, np.array([[h]]), 0.02)
        assert st.in_air[0, 0] and not st.first_contact[0, 0]
    assert math.isclose(st.max_height[0, 0], 0.12)
    st = tr.update(on, np.array([[0.0]]), 0.02)
    assert st.first_contact[0, 0] and math.isclose(st.air_time[0, 0], 0.08)
    st = tr.update(on, np.array([[0.0]]), 0.02)
    assert not st.first_contact[0, 0]


# ---------------------------------------------------------------------------
# termination


def test_termination_cases(humanoid):
    s, fr = standing_frame(humanoid)
    done, reason = check_termination(fr.kp_pos, fr.kp_pos, fr.gravity)
    assert not done[0] and reason[0] == TERMINATION_NONE
    done, reason = check_termination(fr.kp_pos + [0.6, 0.0, 0.0], fr.kp_pos, fr.gravity)
    assert done[0] and reason[0] == TERMINATION_DEVIATION
    g = rot.projected_gravity(rot.quat_from_euler(0.0, np.pi / 3, 0.0)[None])
    assert math.isclose(abs(g[0, 0]), math.sin(np.pi / 3))
    done, reason = check_termination(fr.kp_pos, fr.kp_pos, g)
    assert done[0] and reason[0] == TERMINATION_FALL


def test_termination_monotone(humanoid):
    rng = np.random.default_rng(4)
    kp = rng.standard_normal((500, 11, 3))
    goal = kp + 0.2 * rng.standard_normal((500, 11, 3))
    g = np.tile([0.0, 0.0, -1.0], (500, 1))
    before, _ = check_termination(kp, goal, g)
    after, _ = check_termination(goal + 1.5 * (kp - goal), goal, g)
    assert np.all(after[before])


# ---------------------------------------------------------------------------
# observations


def test_layout_sizes(humanoid):
    sizes = layout_sizes(12, 11, 13, 2)
    # proprio 3*12 + 6 + 3*11 = 75; global 13*11 + goal 6*11 = 209; privileged 3 + 2 + 13 + 36 + 6 = 60
    assert sizes == {"proprio": 75, "teacher": 344, "privileged": 60, "student": 1080}
    env = TrackingEnv(humanoid, [generate("stand", humanoid)], quiet_config())
    assert env.observation_sizes == {"teacher": 344, "critic": 344, "student": 1080}


def test_teacher_obs_goal_diff_and_privileged(humanoid):
    s, fr = standing_frame(humanoid, 3)
    params = sample_randomization(DomainRandConfig(), np.random.default_rng(5), humanoid, 3)
    obs = build_teacher_obs(humanoid, fr, np.zeros((3, 12)), fr.kp_pos, params)
    sl = teacher_layout(humanoid).slices()
    assert np.all(obs[:, sl["goal_diff"]] == 0.0)
    assert np.array_equal(obs[:, sl["com_bias"]], params.com_offset)
    assert np.array_equal(obs[:, sl["link_mass"]], params.mass_scale)
    assert np.array_equal(obs[:, sl["kp_scale"]], params.kp_scale)
    assert np.array_equal(obs[:, sl["kd_scale"]], params.kd_scale)
    assert np.array_equal(obs[:, sl["torque_scale"]], params.motor_strength)
    assert np.array_equal(obs[:, sl["feet_friction"]], np.repeat(params.friction[:, None], 2, axis=1))


def test_critic_matches_teacher_without_noise(humanoid):
    cfg = EnvConfig(randomization=replace(DomainRandConfig(), noise=None, goal_offset_range=None))
    env = TrackingEnv(humanoid, [generate("wave", humanoid)], cfg, num_envs=4, seed=0)
    obs = env.reset()
    for _ in range(5):
        assert np.array_equal(obs["teacher"], obs["critic"])
        obs = env.step(np.zeros((4, 12))).obs


def test_observation_mirror_map(humanoid):
    rng = np.random.default_rng(6)
    N = 100
    s = random_state(humanoid, rng, N)
    S = len(humanoid.arrays.sphere_link)
    force = rng.uniform(0, 30, (N, S, 3))
    fr = frame_of(humanoid, s, force)
    mfr = frame_of(humanoid, mirror_state(humanoid, s), force[:, humanoid.arrays.sphere_perm] * [1.0, -1.0, 1.0])
    sym = humanoid.symmetry
    from kptrack.model import mirror_joint_vector, mirror_keypoints

    act = rng.standard_normal((N, 12))
    goal = rng.standard_normal((N, 11, 3))
    params = sample_randomization(DomainRandConfig(), rng, humanoid, N)
    a = humanoid.arrays
    mparams = RandomizedParams(params.friction, params.com_offset * [1.0, -1.0, 1.0], params.mass_scale[:, a.link_perm],
                               params.kp_scale[:, a.joint_perm], params.kd_scale[:, a.joint_perm],
                               params.motor_strength[:, a.joint_perm], params.delay, params.goal_offset)
    obs = build_teacher_obs(humanoid, fr, act, goal, params)
    mobs = build_teacher_obs(humanoid, mfr, mirror_joint_vector(sym, act), mirror_keypoints(sym, goal), mparams)
    perm, sign = mirror_map(humanoid, teacher_layout(humanoid))
    # quaternions are only defined up to sign; compare the rest exactly and quaternion blocks up to sign
    sl = teacher_layout(humanoid).slices()["global_quat"]
    mapped = sign * obs[:, perm]
    mask = np.ones(obs.shape[1], dtype=bool)
    mask[sl] = False
    assert np.max(np.abs(mapped[:, mask] - mobs[:, mask])) < 1e-9
    qa = mapped[:, sl].reshape(N, 11, 4)
    qb = mobs[:, sl].reshape(N, 11, 4)
    assert np.max(np.abs(rot.canonical(qa) - rot.canonical(qb))) < 1e-9
    assert np.array_equal(perm[perm], np.arange(len(perm)))


def test_student_history_padding_and_future(humanoid):
    clip = generate("wave", humanoid, {"duration": 1.0})
    cfg = quiet_config(random_start=False, resample_on_motion_end=False)
    env = TrackingEnv(humanoid, [clip], cfg, num_envs=2)
    obs = env.reset()
    P = env.proprio_size
    hist = obs["student"][:, :10 * P].reshape(2, 10, P)
    assert np.all(hist == hist[:, :1])
    assert np.array_equal(hist[:, 0], proprio_obs(env.frame, env.prev_action))
    # near the end, future goals repeat the last frame
    for _ in range(clip.num_frames - 4):
        obs = env.step(np.zeros((2, 12))).obs
    goal = obs["student"][:, 10 * P:].reshape(2, 10, 11, 3)
    assert np.all(goal[:, 3:] == goal[:, 2:3])


# ---------------------------------------------------------------------------
# stepping


def test_stand_clip_no_termination(humanoid):
    clip = generate("stand", humanoid, {"duration": 4.0})
    cfg = quiet_config(random_start=False)
    env = TrackingEnv(humanoid, [clip], cfg, num_envs=2)
    env.reset()
    for _ in range(clip.num_frames - 1):
        res = env.step(np.zeros((2, 12)))
        assert not res.terminated.any()
        assert np.all(res.terms["alive"] == 1.0)


def test_push_schedule(humanoid):
    clip = generate("stand", humanoid, {"duration": 8.0})
    rc = replace(DomainRandConfig.disabled(), push_interval=5.0, push_range=(-1.0, 1.0))
    env = TrackingEnv(humanoid, [clip], EnvConfig(randomization=rc, random_start=False), num_envs=3)
    env.reset()
    for t in range(1, 252):
        res = env.step(np.zeros((3, 12)))
        if t == 251:
            assert res.info["push_applied"].all()
            p = res.info["push"]
            assert np.all(np.abs(p[:, :2]) <= 1.0) and np.all(p[:, 2] == 0.0)
        else:
            assert not res.info["push_applied"].any()


def test_motion_end_resamples_without_reset(humanoid):
    clip = generate("stand", humanoid, {"duration": 0.5})
    env = TrackingEnv(humanoid, [clip], quiet_config(random_start=False), num_envs=2)
    env.reset()
    for t in range(clip.num_frames - 1):
        res = env.step(np.zeros((2, 12)))
    assert res.info["motion_resampled"].all()
    assert not res.terminated.any() and not res.truncated.any()
    assert np.all(res.info["episode_step"] == clip.num_frames - 1)
    res = env.step(np.zeros((2, 12)))
    assert np.all(res.info["episode_step"] == clip.num_frames)


def test_randomization_sampling(humanoid):
    rng = np.random.default_rng(7)
    p = sample_randomization(DomainRandConfig(), rng, humanoid, 1000)
    assert np.all((p.friction >= 0.4) & (p.friction <= 1.25))
    assert set(np.unique(p.delay)) <= {0, 1, 2, 3}
    assert np.all((p.motor_strength >= 0.5) & (p.motor_strength <= 1.5))
    fixed = DomainRandConfig(friction_range=(0.7, 0.7), com_range=(0.0, 0.0), mass_range=(1.1, 1.1),
                             kp_range=(0.9, 0.9), kd_range=(1.2, 1.2), motor_strength_range=(1.0, 1.0),
                             delay_choices=(2,), goal_offset_range=(0.01, 0.01))
    a = sample_randomization(fixed, np.random.default_rng(0), humanoid, 4)
    b = sample_randomization(fixed, np.random.default_rng(1), humanoid, 4)
    for k, v in a.to_dict().items():
        assert v == b.to_dict()[k]
    assert np.all(a.friction == 0.7) and np.all(a.delay == 2)
    with pytest.raises(ConfigError):
        DomainRandConfig(friction_range=(1.0, 0.5))


def test_env_deterministic(humanoid):
    clips = [generate("wave", humanoid), generate("squat", humanoid)]
    rng = np.random.default_rng(8)
    acts = rng.standard_normal((30, 4, 12)) * 0.3
    runs = []
    for _ in range(2):
        env = TrackingEnv(humanoid, clips, EnvConfig(), num_envs=4, seed=3)
        obs = [env.reset()["teacher"]]
        for a in acts:
            obs.append(env.step(a).obs["teacher"])
        runs.append(np.stack(obs))
    assert np.array_equal(runs[0], runs[1])


def test_env_config_validation():
    with pytest.raises(ConfigError):
        EnvConfig(history_length=0)
    with pytest.raises(ConfigError):
        EnvConfig(termination_distance=0.0)
    with pytest.raises(ConfigError):
        RewardConfig(sigma_bp=0.0)
    with pytest.raises(ConfigError):
        RewardConfig(weights={"bogus": 1.0})
