"""Keypoint-goal humanoid motion tracking: articulated simulator, tracking
environment, PPO teacher training with a symmetry surrogate, DAgger student
distillation and evaluation metrics."""

__version__ = "0.1.0"
