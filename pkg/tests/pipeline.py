"""The gen, corrupt, train, distill and eval chain driven through the command line."""

from pathlib import Path

from kptrack.cli import main

TINY_PPO = ["--num-envs", "4", "--total-samples", "64", "--set", "ppo.steps_per_env=8",
            "--set", "ppo.actor_hidden=[32,16]", "--set", "ppo.critic_hidden=[32,16]"]
TINY_DAGGER = ["--num-envs", "4", "--total-samples", "64", "--set", "dagger.steps_per_env=8",
               "--set", "dagger.hidden=[32,16]"]
REPORTS = ("report.json", "report.csv", "report.plot.json")


def run(*argv) -> None:
    code = main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"kptrack {' '.join(map(str, argv))} exited with {code}")


def run_pipeline(root: Path, seed: int = 0) -> dict:
    """Run the whole chain under ``root``; returns the report bytes for teacher and student."""
    root = Path(root)
    clean, bad = root / "clean", root / "bad"
    run("motion", "gen", "stand", "--duration", 2, "--out", clean, "--log-level", "WARNING")
    run("motion", "gen", "wave", "--duration", 2, "--param", "amplitude=0.3", "--out", clean, "--log-level", "WARNING")
    run("motion", "corrupt", clean, "--set", "keypoint_noise_std=0.02", "--set", "lr_swap_prob=0.5",
        "--seed", seed, "--out", bad, "--log-level", "WARNING")
    run("train", "teacher", "--data", clean, *TINY_PPO, "--seed", seed, "--out", root / "teacher",
        "--log-level", "WARNING")
    run("distill", "student", "--teacher", root / "teacher" / "teacher.ckpt.json", "--data", clean, *TINY_DAGGER,
        "--seed", seed, "--out", root / "student", "--log-level", "WARNING")
    out = {}
    for who in ("teacher", "student"):
        ev = root / f"eval_{who}"
        run("eval", "--policy", root / who / f"{who}.ckpt.json", "--data", bad, "--rollouts", 2, "--seed", seed,
            "--out", ev, "--log-level", "WARNING")
        out[who] = {name: (ev / name).read_bytes() for name in REPORTS}
    return out
