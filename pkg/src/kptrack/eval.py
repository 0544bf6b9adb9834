"""Rollouts and tracking metrics: success rate, MPKPE, LMPKPE and their
no-termination variants, with deterministic report emission.

Errors are reported in centimetres. Spreads across motions use the population
standard deviation.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from kptrack import rotations as rot
from kptrack.config import ConfigError, to_dict
from kptrack.env import DomainRandConfig, EnvConfig, TrackingEnv
from kptrack.model import RobotModel, keypoints_local

REPORT_SCHEMA = "kptrack-eval-report"
REPORT_VERSION = 1
METRICS = ("sr", "mpkpe", "lmpkpe", "mpkpe_nt", "lmpkpe_nt")


@dataclass
class EvalConfig:
    rollouts_per_motion: int = 16
    termination_enabled: bool = True
    deviation_threshold: float = 0.5  # m
    seed: int = 0
    randomization: bool = False
    obs_key: str = "teacher"

    def __post_init__(self):
        if self.rollouts_per_motion < 1:
            raise ConfigError("rollouts_per_motion must be at least 1")
        if not self.deviation_threshold > 0:
            raise ConfigError("deviation_threshold must be positive")


@dataclass
class RolloutRecord:
    keypoints: np.ndarray  # (T, K, 3) world
    goal_keypoints: np.ndarray  # (T, K, 3)
    base_pos: np.ndarray  # (T, 3) robot pelvis
    base_quat: np.ndarray  # (T, 4)
    goal_base_pos: np.ndarray  # (T, 3)
    goal_base_quat: np.ndarray  # (T, 4)
    termination_frame: int | None = None  # number of frames kept before termination
    terminated: bool = False

    @property
    def num_frames(self) -> int:
        return len(self.keypoints)

    def prefix(self) -> slice:
        return slice(0, self.termination_frame if self.termination_frame is not None else self.num_frames)


def _check(record: RolloutRecord):
    if record.num_frames == 0:
        raise ValueError("empty rollout record")


def _mpkpe(kp, goal):
    return float(np.mean(np.linalg.norm(kp - goal, axis=-1)) * 100.0)


def _local(kp, pos, quat):
    return keypoints_local(kp, (pos, quat))


def mpkpe(record: RolloutRecord) -> float:
    """Global mean per-keypoint position error (cm) over frames before termination."""
    _check(record)
    s = record.prefix()
    return _mpkpe(record.keypoints[s], record.goal_keypoints[s])


def lmpkpe(record: RolloutRecord) -> float:
    """Error (cm) with robot and goal keypoints each in their own pelvis heading frame."""
    _check(record)
    s = record.prefix()
    robot = _local(record.keypoints[s], record.base_pos[s], record.base_quat[s])
    goal = _local(record.goal_keypoints[s], record.goal_base_pos[s], record.goal_base_quat[s])
    return _mpkpe(robot, goal)


def mpkpe_nt(record: RolloutRecord) -> float:
    """Global error over every frame of a termination-free rollout."""
    _check(record)
    return _mpkpe(record.keypoints, record.goal_keypoints)


def lmpkpe_nt(record: RolloutRecord) -> float:
    _check(record)
    robot = _local(record.keypoints, record.base_pos, record.base_quat)
    goal = _local(record.goal_keypoints, record.goal_base_pos, record.goal_base_quat)
    return _mpkpe(robot, goal)


def success_rate(records) -> float:
    """Percentage of rollouts that ran the whole motion without termination."""
    records = list(records)
    if not records:
        raise ValueError("no records")
    return 100.0 * sum(not r.terminated for r in records) / len(records)


# ---------------------------------------------------------------------------
# rollouts


Policy = Callable[[dict], np.ndarray]


def rollout_batch(policy: Policy, env: TrackingEnv, clip_index: int, terminate: bool):
    """Run every env of ``env`` through clip ``clip_index`` once from its first frame.

    Without termination all rollouts last the whole clip, falls included.
    """
    cfg = env.config
    if cfg.resample_on_motion_end or cfg.random_start or cfg.max_episode_steps is not None:
        raise ConfigError("evaluation envs need resample_on_motion_end, random_start and max_episode_steps off")
    if cfg.termination_enabled != terminate:
        raise ConfigError("env termination flag does not match the requested rollout mode")
    N = env.num_envs
    obs = env.reset(clip_index=clip_index)
    T = int(env._lengths[clip_index])
    rows = env._starts[clip_index] + np.arange(1, T)
    kp, goal, bpos, bquat = [], [], [], []
    alive = np.ones(N, dtype=bool)
    term_frame = np.full(N, -1)
    # frame 0 is the reset pose; every step then lands on the next goal frame
    for t in range(T - 1):
        res = env.step(policy(obs))
        kp.append(res.info["keypoints"])
        goal.append(res.info["goal_keypoints"])
        bpos.append(res.info["base_pos"])
        bquat.append(res.info["base_quat"])
        newly = alive & res.terminated
        term_frame[newly] = t + 1
        alive &= ~res.terminated
        obs = res.obs
        if terminate and not alive.any():
            break
    kp, goal, bpos, bquat = map(np.stack, (kp, goal, bpos, bquat))
    gpos, gquat = env._root_pos[rows], env._root_quat[rows]
    records = []
    for e in range(N):
        stop = term_frame[e] if term_frame[e] >= 0 else None
        if terminate and stop is not None:
            sl = slice(0, stop)
        else:
            sl = slice(0, len(kp))
        n_frames = sl.stop
        records.append(RolloutRecord(kp[sl, e], goal[sl, e], bpos[sl, e], bquat[sl, e], gpos[:n_frames],
                                     gquat[:n_frames], stop, stop is not None))
    return records


def make_eval_env(model: RobotModel, clips, env_config: EnvConfig | None, eval_config: EvalConfig,
                  num_envs: int | None = None, terminate: bool = True) -> TrackingEnv:
    base = env_config or EnvConfig()
    cfg = replace(base, resample_on_motion_end=False, random_start=False, max_episode_steps=None,
                  termination_enabled=terminate, termination_distance=eval_config.deviation_threshold,
                  randomization=base.randomization if eval_config.randomization else DomainRandConfig.disabled())
    return TrackingEnv(model, clips, cfg, num_envs or eval_config.rollouts_per_motion, seed=eval_config.seed)


def evaluate(policy: Policy, model: RobotModel, clips, eval_config: EvalConfig | None = None,
             env_config: EnvConfig | None = None, names=None) -> dict:
    """Per-motion metrics: SR and errors from terminating rollouts, NT errors from free-running ones."""
    ec = eval_config or EvalConfig()
    if not clips:
        raise ValueError("no motions to evaluate")
    names = list(names or [c.name for c in clips])
    env_t = make_eval_env(model, clips, env_config, ec, terminate=True)
    env_nt = make_eval_env(model, clips, env_config, ec, terminate=False)
    per_motion = {}
    for i, name in enumerate(names):
        rec_t = rollout_batch(policy, env_t, i, terminate=True)
        rec_nt = rollout_batch(policy, env_nt, i, terminate=False)
        per_motion[name] = {
            "sr": success_rate(rec_t),
            "mpkpe": float(np.mean([mpkpe(r) for r in rec_t])),
            "lmpkpe": float(np.mean([lmpkpe(r) for r in rec_t])),
            "mpkpe_nt": float(np.mean([mpkpe_nt(r) for r in rec_nt])),
            "lmpkpe_nt": float(np.mean([lmpkpe_nt(r) for r in rec_nt])),
        }
    return per_motion


# ---------------------------------------------------------------------------
# aggregation and emission


@dataclass
class EvalReport:
    per_motion: dict
    aggregate: dict
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "version": REPORT_VERSION, "meta": self.meta,
                "aggregate": self.aggregate, "per_motion": self.per_motion}


def config_hash(doc) -> str:
    return hashlib.sha256(json.dumps(to_dict(doc), sort_keys=True).encode()).hexdigest()[:16]


def aggregate(per_motion: dict, meta: dict | None = None) -> EvalReport:
    """Mean and population std of every metric across motions."""
    if not per_motion:
        raise ValueError("no motions to aggregate")
    keys = sorted(per_motion)
    agg = {}
    for m in METRICS:
        vals = np.array([per_motion[k][m] for k in keys], dtype=float)
        agg[m] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return EvalReport({k: dict(per_motion[k]) for k in keys}, agg, dict(meta or {}))


def validate_report(doc: dict) -> None:
    if doc.get("schema") != REPORT_SCHEMA or doc.get("version") != REPORT_VERSION:
        raise ValueError("not an evaluation report of a supported version")
    for m in METRICS:
        entry = doc["aggregate"][m]
        if set(entry) != {"mean", "std"}:
            raise ValueError(f"aggregate entry {m} is malformed")
    for name, row in doc["per_motion"].items():
        if set(row) != set(METRICS):
            raise ValueError(f"motion {name} lacks metrics")
        if not 0.0 <= row["sr"] <= 100.0:
            raise ValueError(f"motion {name} has SR outside [0, 100]")


def render(report: EvalReport, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("motion",) + METRICS)
        for name in sorted(report.per_motion):
            w.writerow((name,) + tuple(repr(float(report.per_motion[name][m])) for m in METRICS))
        return buf.getvalue()
    if fmt == "plot-data":
        names = sorted(report.per_motion)
        doc = {"motions": names, "series": {m: [report.per_motion[n][m] for n in names] for m in METRICS}}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def emit(report: EvalReport, path, fmt: str = "json") -> None:
    Path(path).write_text(render(report, fmt))


def summary_table(report: EvalReport) -> str:
    """Human-readable one-line summary in the usual results-table order."""
    a = report.aggregate
    return (f"SR {a['sr']['mean']:.1f}%  MPKPE {a['mpkpe']['mean']:.2f} ± {a['mpkpe']['std']:.2f}  "
            f"LMPKPE {a['lmpkpe']['mean']:.2f} ± {a['lmpkpe']['std']:.2f}  "
            f"MPKPE-NT {a['mpkpe_nt']['mean']:.2f} ± {a['mpkpe_nt']['std']:.2f}  "
            f"LMPKPE-NT {a['lmpkpe_nt']['mean']:.2f} ± {a['lmpkpe_nt']['std']:.2f}")


def playback_record(model: RobotModel, env: TrackingEnv, clip_index: int) -> RolloutRecord:
    """Kinematic playback: the robot follows the goal exactly (zero-error reference)."""
    T = int(env._lengths[clip_index])
    rows = env._starts[clip_index] + np.arange(1, T)
    kp = env._kp[rows]
    return RolloutRecord(kp.copy(), kp.copy(), env._root_pos[rows].copy(), env._root_quat[rows].copy(),
                         env._root_pos[rows].copy(), env._root_quat[rows].copy())
