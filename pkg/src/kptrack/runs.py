"""Per-command run configurations for the command line; each nests the module configs."""

from __future__ import annotations

from dataclasses import dataclass, field

from kptrack.env import EnvConfig
from kptrack.eval import EvalConfig
from kptrack.train import DaggerConfig, PpoConfig


@dataclass
class TrainRun:
    model: str = "mini-humanoid"
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)


@dataclass
class DistillRun:
    model: str = "mini-humanoid"
    env: EnvConfig = field(default_factory=EnvConfig)
    dagger: DaggerConfig = field(default_factory=DaggerConfig)


@dataclass
class EvalRun:
    model: str = "mini-humanoid"
    env: EnvConfig = field(default_factory=EnvConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


@dataclass
class RolloutRun:
    model: str = "mini-humanoid"
    env: EnvConfig = field(default_factory=EnvConfig)
    randomization: bool = False
    max_steps: int | None = None


RUN_CONFIGS = {"train": TrainRun, "distill": DistillRun, "eval": EvalRun, "rollout": RolloutRun}
