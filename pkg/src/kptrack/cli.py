"""``kptrack`` command line: model validation, motion generation and corruption,
teacher training, student distillation, evaluation and single rollouts.

Progress goes to stderr, artifacts only to files under ``--out``. Every command
that writes artifacts also writes ``run_config.<command>.json`` with the fully
resolved configuration. Exit codes: 0 success, 2 configuration error, 3 data
error, 4 simulation instability.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_UNSTABLE = 0, 2, 3, 4
MOTION_SUFFIX = ".motion.json"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")

log = logging.getLogger("kptrack")


class DataError(Exception):
    """Missing, empty or malformed input artifact."""


class Unstable(Exception):
    """The simulation produced a non-finite state."""


# ---------------------------------------------------------------------------
# run configurations


def _run_configs():
    # imported lazily so thread settings land before numpy and numba load
    from kptrack.runs import RUN_CONFIGS

    return RUN_CONFIGS


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(doc: dict, assignment: str):
    from kptrack.config import ConfigError

    key, sep, value = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    node = doc
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = _parse_value(value)


def _read_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"{what} {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"cannot parse {what} {path}: {exc}") from exc


def resolve_config(kind: str, config_path=None, overrides=(), base: dict | None = None):
    """Config file < ``base`` defaults < ``--set`` overrides, validated into the run dataclass."""
    from kptrack.config import ConfigError, from_dict

    doc = json.loads(json.dumps(base or {}))
    if config_path is not None:
        file_doc = _read_json(config_path, "config file")
        if not isinstance(file_doc, dict):
            raise ConfigError(f"config file {config_path} must hold an object")
        doc = _merge(doc, file_doc)
    for assignment in overrides:
        _apply_override(doc, assignment)
    return from_dict(_run_configs()[kind], doc)


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _write_snapshot(out: Path, command: str, resolved, extra: dict) -> None:
    from kptrack.config import to_dict

    doc = {"command": command, **extra, "config": to_dict(resolved) if resolved is not None else None}
    (out / f"run_config.{command}.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeded(resolved, seed):
    """Apply the global ``--seed`` to every seed field of the run config."""
    if seed is None:
        return resolved
    for f in dataclasses.fields(resolved):
        sub = getattr(resolved, f.name)
        if dataclasses.is_dataclass(sub) and hasattr(sub, "seed"):
            sub.seed = seed
    return resolved


# ---------------------------------------------------------------------------
# data helpers


def _load_model(name):
    from kptrack.model import ModelError, load_model

    try:
        return load_model(name)
    except FileNotFoundError as exc:
        raise DataError(f"model {name} not found") from exc
    except ModelError as exc:
        raise DataError(str(exc)) from exc


def motion_files(paths) -> list[Path]:
    """Expand files and directories (``*.motion.json`` inside) into a sorted file list."""
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(p.glob(f"*{MOTION_SUFFIX}")))
        elif p.is_file():
            files.append(p)
        else:
            raise DataError(f"motion input {p} does not exist")
    return files


def load_motions(paths):
    from kptrack.motion import MotionError, load_clip

    files = motion_files(paths)
    if not files:
        raise DataError("no motions found in " + ", ".join(map(str, paths)))
    clips = []
    for f in files:
        try:
            clips.append(load_clip(f))
        except MotionError as exc:
            raise DataError(f"{f}: {exc}") from exc
    return files, clips


def _clip_stem(path: Path) -> str:
    name = path.name
    return name[: -len(MOTION_SUFFIX)] if name.endswith(MOTION_SUFFIX) else path.stem


def _digest(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


def _load_checkpoint(path):
    from kptrack.net import load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint {path} does not exist") from exc
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _check_clips(model, clips):
    names = tuple(j.name for j in model.joints)
    for c in clips:
        if c.num_joints != model.num_joints or (c.joints and tuple(c.joints) != names):
            raise DataError(f"motion {c.name!r} does not match the joints of model {model.name!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_model_validate(args) -> int:
    from kptrack.model import standing_height

    model = _load_model(args.path)
    a = model.arrays
    lines = [
        f"model {model.name}: valid",
        f"  links {len(model.links)}  joints {model.num_joints}  keypoints {len(model.keypoints)}",
        f"  base {'fixed' if model.fixed_base else 'floating'}  feet {len(a.foot_link)}  contact spheres {len(a.sphere_link)}",
        f"  total mass {sum(l.mass for l in model.links):.3f} kg",
    ]
    if not model.fixed_base:
        lines.append(f"  standing height {standing_height(model):.4f} m")
    print("\n".join(lines))
    return EXIT_OK


def cmd_motion_gen(args) -> int:
    from kptrack.motion import MotionError, generate, save_clip

    model = _load_model(args.model)
    params = {}
    if args.params:
        params.update(_parse_params_json(args.params))
    for assignment in args.param or ():
        k, sep, v = assignment.partition("=")
        if not sep:
            from kptrack.config import ConfigError

            raise ConfigError(f"--param {assignment!r} is not key=value")
        params[k] = _parse_value(v)
    if args.duration is not None:
        params["duration"] = args.duration
    if args.name:
        params["name"] = args.name
    try:
        clip = generate(args.kind, model, params, fps=args.fps)
    except MotionError as exc:
        from kptrack.config import ConfigError

        raise ConfigError(str(exc)) from exc
    out = _out_dir(args)
    path = out / f"{clip.name}{MOTION_SUFFIX}"
    save_clip(clip, path)
    _write_snapshot(out, "motion-gen", None, {"kind": args.kind, "model": args.model, "params": params,
                                              "fps": args.fps, "output": path.name})
    log.info("wrote %s (%d frames)", path, clip.num_frames)
    return EXIT_OK


def _parse_params_json(text):
    from kptrack.config import ConfigError

    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--params is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("--params must be a JSON object")
    return doc


def cmd_motion_corrupt(args) -> int:
    from kptrack.config import ConfigError
    from kptrack.motion import MotionError, NoiseSpec, corrupt, save_clip

    doc = {}
    if args.noise_spec:
        doc = _read_json(args.noise_spec, "noise spec")
    for assignment in args.set or ():
        _apply_override(doc, assignment)
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = NoiseSpec.from_dict(doc)
    except (MotionError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    model = _load_model(args.model)
    files, clips = load_motions(args.inputs)
    _check_clips(model, clips)
    out = _out_dir(args)
    logs = {}
    for i, (f, clip) in enumerate(zip(files, clips)):
        # each clip gets its own stream so results do not depend on the file set
        clip_spec = dataclasses.replace(spec, seed=spec.seed + i)
        bad, events = corrupt(clip, clip_spec, model)
        save_clip(bad, out / f"{_clip_stem(f)}{MOTION_SUFFIX}")
        logs[_clip_stem(f)] = events
        log.info("corrupted %s", f)
    _write_snapshot(out, "motion-corrupt", spec, {"model": args.model, "inputs": [str(f) for f in files],
                                                   "events": logs})
    return EXIT_OK


def cmd_motion_info(args) -> int:
    from collections import Counter

    files, clips = load_motions(args.inputs)
    for f, c in zip(files, clips):
        kinds = Counter(e.get("type", "?") if isinstance(e, dict) else str(e) for e in c.corruptions)
        print(f"{f}: {c.name}  frames {c.num_frames}  fps {c.fps:g}  duration {c.duration:.3f} s  "
              f"joints {c.num_joints}  source {c.source}"
              + (f"  corruptions {','.join(f'{k}x{n}' for k, n in sorted(kinds.items()))}" if kinds else ""))
    return EXIT_OK


def _env_meta(resolved) -> dict:
    from kptrack.config import to_dict

    return {"env": to_dict(resolved.env), "model_ref": resolved.model}


def cmd_train_teacher(args) -> int:
    from kptrack.env import TrackingEnv
    from kptrack.train import jsonl_logger, train_teacher

    overrides = list(args.set or ())
    if args.total_samples is not None:
        overrides.append(f"ppo.total_samples={args.total_samples}")
    if args.num_envs is not None:
        overrides.append(f"ppo.num_envs={args.num_envs}")
    resolved = _seeded(resolve_config("train", args.config, overrides), args.seed)
    model = _load_model(resolved.model)
    files, clips = load_motions(args.data)
    _check_clips(model, clips)
    out = _out_dir(args)
    _write_snapshot(out, "train-teacher", resolved, {"data": [str(f) for f in files], "dataset": _digest(files)})
    env = TrackingEnv(model, clips, resolved.env, resolved.ppo.num_envs, seed=resolved.ppo.seed)
    logfile = out / "train_log.jsonl"
    logfile.write_text("")
    logger = jsonl_logger(logfile)

    def progress(record):
        logger(record)
        log.info("iter %d  reward %.2f  tracking %.2f  lr %.2g", record["iteration"], record["reward"],
                 record["tracking_reward"], record["lr"])

    train_teacher(env, resolved.ppo, progress, out / "teacher.ckpt.json", meta=_env_meta(resolved))
    logger.close()
    return EXIT_OK


def cmd_distill_student(args) -> int:
    from kptrack.env import TrackingEnv
    from kptrack.train import distill_student, jsonl_logger

    teacher = _load_checkpoint(args.teacher)
    base = {}
    if "env" in teacher.meta:
        base["env"] = teacher.meta["env"]
    if "model_ref" in teacher.meta:
        base["model"] = teacher.meta["model_ref"]
    overrides = list(args.set or ())
    if args.total_samples is not None:
        overrides.append(f"dagger.total_samples={args.total_samples}")
    if args.num_envs is not None:
        overrides.append(f"dagger.num_envs={args.num_envs}")
    resolved = _seeded(resolve_config("distill", args.config, overrides, base), args.seed)
    model = _load_model(resolved.model)
    files, clips = load_motions(args.data)
    _check_clips(model, clips)
    env = TrackingEnv(model, clips, resolved.env, resolved.dagger.num_envs, seed=resolved.dagger.seed)
    if teacher.policy.spec.input_dim != env.observation_sizes[resolved.dagger.teacher_obs_key]:
        raise DataError("teacher checkpoint does not match the environment's teacher observation")
    out = _out_dir(args)
    _write_snapshot(out, "distill-student", resolved,
                    {"teacher": str(args.teacher), "data": [str(f) for f in files], "dataset": _digest(files)})
    logfile = out / "distill_log.jsonl"
    logfile.write_text("")
    logger = jsonl_logger(logfile)

    def progress(record):
        logger(record)
        log.info("iter %d  loss %.4g  reward %.2f", record["iteration"], record["loss"], record["reward"])

    distill_student(teacher, env, resolved.dagger, progress, out / "student.ckpt.json", meta=_env_meta(resolved))
    logger.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    from kptrack.eval import aggregate, config_hash, evaluate, render, summary_table

    ckpt = _load_checkpoint(args.policy)
    base = {}
    if "env" in ckpt.meta:
        base["env"] = ckpt.meta["env"]
    if "model_ref" in ckpt.meta:
        base["model"] = ckpt.meta["model_ref"]
    if "obs_key" in ckpt.meta:
        base["eval"] = {"obs_key": ckpt.meta["obs_key"]}
    overrides = list(args.set or ())
    if args.rollouts is not None:
        overrides.append(f"eval.rollouts_per_motion={args.rollouts}")
    resolved = _seeded(resolve_config("eval", args.config, overrides, base), args.seed)
    model = _load_model(resolved.model)
    files, clips = load_motions(args.data)
    _check_clips(model, clips)
    names = [_clip_stem(f) for f in files]
    key = resolved.eval.obs_key
    policy = lambda obs: ckpt.act(obs[key])  # noqa: E731
    per_motion = evaluate(policy, model, clips, resolved.eval, resolved.env, names)
    meta = {
        "policy_id": _digest([args.policy]),
        "dataset_id": _digest(files),
        "seed": resolved.eval.seed,
        "config_hash": config_hash(resolved),
        "rollouts_per_motion": resolved.eval.rollouts_per_motion,
        "obs_key": key,
    }
    report = aggregate(per_motion, meta)
    out = _out_dir(args)
    _write_snapshot(out, "eval", resolved, {"policy": str(args.policy), "data": [str(f) for f in files]})
    suffix = {"json": "report.json", "csv": "report.csv", "plot-data": "report.plot.json"}
    for fmt in args.format:
        (out / suffix[fmt]).write_text(render(report, fmt))
    print(summary_table(report))
    return EXIT_OK


def cmd_sim_rollout(args) -> int:
    import numpy as np

    from kptrack.env import DomainRandConfig, TrackingEnv
    from kptrack.sim import dump_trajectory

    ckpt = None
    base = {}
    if args.policy != "playback":
        ckpt = _load_checkpoint(args.policy)
        if "env" in ckpt.meta:
            base["env"] = ckpt.meta["env"]
        if "model_ref" in ckpt.meta:
            base["model"] = ckpt.meta["model_ref"]
    overrides = list(args.set or ())
    if args.steps is not None:
        overrides.append(f"max_steps={args.steps}")
    resolved = resolve_config("rollout", args.config, overrides, base)
    model = _load_model(resolved.model)
    files, clips = load_motions([args.motion])
    _check_clips(model, clips)
    env_cfg = dataclasses.replace(
        resolved.env, resample_on_motion_end=False, random_start=False, max_episode_steps=None,
        termination_enabled=False,
        randomization=resolved.env.randomization if resolved.randomization else DomainRandConfig.disabled())
    seed = 0 if args.seed is None else args.seed
    env = TrackingEnv(model, clips[:1], env_cfg, 1, seed=seed)
    obs = env.reset(clip_index=0)
    key = ckpt.meta.get("obs_key", "teacher") if ckpt is not None else None
    steps = env._lengths[0] - 1
    if resolved.max_steps is not None:
        steps = min(steps, resolved.max_steps)
    default = model.arrays.default_pose
    records = [_rollout_record(env, None)]
    for _ in range(int(steps)):
        if ckpt is None:
            action = (env.goal_frame(1).q - default) / env_cfg.sim.action_scale
        else:
            action = ckpt.act(obs[key])
        res = env.step(action)
        if res.info["unstable"].any():
            raise Unstable(f"simulation became unstable at step {int(res.info['episode_step'][0])}")
        records.append(_rollout_record(env, res.info))
        obs = res.obs
        if res.truncated.any():
            break
    out = _out_dir(args)
    dump_trajectory(records, out / "trajectory.jsonl")
    _write_snapshot(out, "sim-rollout", resolved, {"policy": str(args.policy), "motion": str(files[0]),
                                                   "seed": seed})
    err = np.mean([np.linalg.norm(np.subtract(r["keypoints"], r["goal_keypoints"]), axis=-1).mean()
                   for r in records[1:]]) * 100 if len(records) > 1 else 0.0
    log.info("rollout of %d steps, mean keypoint error %.2f cm", len(records) - 1, err)
    return EXIT_OK


def _rollout_record(env, info) -> dict:
    f = env.frame
    rec = {
        "step": int(env.episode_step[0]),
        "time": float(env.episode_step[0] * env.config.dt),
        "base_position": f.base_pos[0].tolist(),
        "base_orientation": f.base_quat[0].tolist(),
        "q": env.state.joint_positions[0].tolist(),
        "qd": env.state.joint_velocities[0].tolist(),
    }
    if info is not None:
        rec.update(keypoints=info["keypoints"][0].tolist(), goal_keypoints=info["goal_keypoints"][0].tolist(),
                   torques=info["torques"][0].tolist(), foot_forces=info["foot_forces"][0].tolist())
    return rec


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed, overrides config seeds")
    common.add_argument("--threads", type=int, default=None, help="worker threads (env KPTRACK_THREADS)")
    common.add_argument("--log-level", default=None, help="logging level (env KPTRACK_LOG_LEVEL)")

    def outputs(p, default="."):
        p.add_argument("--out", default=default, help="output directory")

    def configured(p):
        p.add_argument("--config", default=None, help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (JSON value)")

    parser = argparse.ArgumentParser(prog="kptrack", description=__doc__.split("\n\n")[0])
    groups = parser.add_subparsers(dest="group", required=True)

    model = groups.add_parser("model", help="robot model tools").add_subparsers(dest="command", required=True)
    p = model.add_parser("validate", parents=[common], help="load and validate a model document")
    p.add_argument("path", help="model JSON file or built-in model name")
    p.set_defaults(func=cmd_model_validate)

    motion = groups.add_parser("motion", help="motion clip tools").add_subparsers(dest="command", required=True)
    p = motion.add_parser("gen", parents=[common], help="generate a procedural clip")
    p.add_argument("kind")
    p.add_argument("--model", default="mini-humanoid")
    p.add_argument("--duration", type=float, default=None, help="seconds")
    p.add_argument("--fps", type=float, default=50.0)
    p.add_argument("--name", default=None)
    p.add_argument("--param", action="append", metavar="KEY=VALUE")
    p.add_argument("--params", default=None, help="JSON object of generator parameters")
    outputs(p)
    p.set_defaults(func=cmd_motion_gen)

    p = motion.add_parser("corrupt", parents=[common], help="apply seeded corruption to clips")
    p.add_argument("inputs", nargs="+", help="clip files or directories")
    p.add_argument("--model", default="mini-humanoid")
    p.add_argument("--noise-spec", default=None, help="JSON noise specification")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    outputs(p)
    p.set_defaults(func=cmd_motion_corrupt)

    p = motion.add_parser("info", parents=[common], help="describe clips")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_motion_info)

    train = groups.add_parser("train", help="policy training").add_subparsers(dest="command", required=True)
    p = train.add_parser("teacher", parents=[common], help="train the privileged teacher with PPO")
    p.add_argument("--data", nargs="+", required=True, help="clip files or directories")
    p.add_argument("--total-samples", type=int, default=None)
    p.add_argument("--num-envs", type=int, default=None)
    configured(p)
    outputs(p)
    p.set_defaults(func=cmd_train_teacher)

    distill = groups.add_parser("distill", help="student distillation").add_subparsers(dest="command", required=True)
    p = distill.add_parser("student", parents=[common], help="distill the student with DAgger")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--total-samples", type=int, default=None)
    p.add_argument("--num-envs", type=int, default=None)
    configured(p)
    outputs(p)
    p.set_defaults(func=cmd_distill_student)

    p = groups.add_parser("eval", parents=[common], help="evaluate a policy on a dataset")
    p.add_argument("--policy", required=True, help="policy checkpoint")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--rollouts", type=int, default=None, help="rollouts per motion")
    p.add_argument("--format", nargs="+", choices=("json", "csv", "plot-data"), default=["json", "csv", "plot-data"])
    configured(p)
    outputs(p)
    p.set_defaults(func=cmd_eval)

    sim = groups.add_parser("sim", help="simulation tools").add_subparsers(dest="command", required=True)
    p = sim.add_parser("rollout", parents=[common], help="roll out one motion and dump the trajectory")
    p.add_argument("--policy", required=True, help='policy checkpoint or "playback"')
    p.add_argument("--motion", required=True)
    p.add_argument("--steps", type=int, default=None)
    configured(p)
    outputs(p)
    p.set_defaults(func=cmd_sim_rollout)
    return parser


def _configure_runtime(args):
    threads = args.threads if args.threads is not None else os.environ.get("KPTRACK_THREADS")
    if threads is not None:
        threads = int(threads)
        if threads < 1:
            raise ValueError("--threads must be at least 1")
        for var in THREAD_VARS:
            os.environ[var] = str(threads)
        if "numba" in sys.modules:
            import numba

            numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
    level = args.log_level or os.environ.get("KPTRACK_LOG_LEVEL", "INFO")
    logging.basicConfig(level=level.upper(), stream=sys.stderr, format="%(levelname)s %(message)s", force=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _configure_runtime(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from kptrack.config import ConfigError
    from kptrack.model import ModelError
    from kptrack.motion import MotionError
    from kptrack.sim import SimulationError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ModelError, MotionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (Unstable, SimulationError) as exc:
        print(f"simulation unstable: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE


if __name__ == "__main__":
    sys.exit(main())
