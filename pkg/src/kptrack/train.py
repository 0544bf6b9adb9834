"""PPO with GAE, adaptive learning rate and the mirror-ratio symmetry surrogate,
plus DAgger distillation of the student policy."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from kptrack.config import ConfigError, to_dict
from kptrack.env import TERM_NAMES, TRACKING_TERMS, TrackingEnv, action_mirror_map, mirror_map
from kptrack.net import (
    Adam,
    AdamConfig,
    Checkpoint,
    GaussianPolicy,
    Mlp,
    MlpSpec,
    RunningNorm,
    clip_grad_norm,
    gaussian_log_prob,
    gaussian_log_prob_grads,
    log_std_clamp_mask,
    save_checkpoint,
)


@dataclass
class PpoConfig:
    num_envs: int = 64
    steps_per_env: int = 24
    learning_epochs: int = 5
    minibatch_size: int | None = None  # default: a quarter of the batch
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.005
    value_coef: float = 1.0
    desired_kl: float = 0.01
    lr: float = 1e-3
    adaptive_lr: bool = True
    lr_min: float = 1e-5
    lr_max: float = 1e-2
    lambda_sym: float = 0.5
    max_grad_norm: float = 1.0
    total_samples: int = 2_000_000
    reward_scale: float = 0.02  # per-step rewards are multiplied by the control period
    init_log_std: float = 0.0
    actor_hidden: tuple = (256, 128, 64)
    critic_hidden: tuple = (256, 128, 64)
    activation: str = "elu"
    normalize_obs: bool = True
    obs_key: str = "teacher"
    critic_key: str = "critic"
    seed: int = 0
    checkpoint_every: int = 0  # iterations; 0 keeps only the final checkpoint

    def __post_init__(self):
        self.actor_hidden = tuple(self.actor_hidden)
        self.critic_hidden = tuple(self.critic_hidden)
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ConfigError("gamma and lam must lie in (0, 1]")
        if not self.clip > 0:
            raise ConfigError("clip must be positive")
        if self.num_envs < 1 or self.steps_per_env < 1 or self.learning_epochs < 1:
            raise ConfigError("num_envs, steps_per_env and learning_epochs must be positive")
        if self.minibatch_size is not None and (self.minibatch_size < 1 or self.batch_size % self.minibatch_size):
            raise ConfigError("minibatch_size must divide num_envs * steps_per_env")
        if self.total_samples < 0 or self.lambda_sym < 0:
            raise ConfigError("total_samples and lambda_sym must be non-negative")

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.steps_per_env

    @property
    def minibatch(self) -> int:
        return self.minibatch_size or max(1, self.batch_size // 4)

    @property
    def iterations(self) -> int:
        return self.total_samples // self.batch_size


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (T, N, D)
    critic_obs: np.ndarray
    actions: np.ndarray  # (T, N, A)
    log_probs: np.ndarray  # (T, N)
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray  # episode ended after this step (termination or truncation)
    last_values: np.ndarray  # (N,)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @classmethod
    def empty(cls, T, N, obs_dim, critic_dim, action_dim) -> "RolloutBuffer":
        return cls(np.zeros((T, N, obs_dim)), np.zeros((T, N, critic_dim)), np.zeros((T, N, action_dim)),
                   np.zeros((T, N)), np.zeros((T, N)), np.zeros((T, N)), np.zeros((T, N), dtype=bool), np.zeros(N))


def compute_gae(rewards, values, dones, last_values, gamma, lam):
    """Generalized advantage estimates and returns; ``dones`` cut bootstrapping."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    gae = np.zeros_like(rewards[0])
    next_value = np.asarray(last_values, dtype=float)
    for t in reversed(range(T)):
        keep = 1.0 - np.asarray(dones[t], dtype=float)
        delta = rewards[t] + gamma * next_value * keep - values[t]
        gae = delta + gamma * lam * keep * gae
        adv[t] = gae
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=float)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_surrogate(log_probs, old_log_probs, advantages, clip):
    """Clipped surrogate loss, its gradient w.r.t. ``log_probs`` and the clip fraction."""
    ratio = np.exp(np.asarray(log_probs) - np.asarray(old_log_probs))
    adv = np.asarray(advantages)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    B = len(adv)
    loss = -np.mean(np.minimum(unclipped, clipped))
    active = unclipped <= clipped
    grad = np.where(active, -unclipped / B, 0.0)
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > clip))
    return float(loss), grad, clip_frac


def gaussian_kl(mu_old, log_std_old, mu_new, log_std_new):
    """Mean analytic KL(old || new) between diagonal Gaussians."""
    var_old = np.exp(2.0 * log_std_old)
    var_new = np.exp(2.0 * log_std_new)
    kl = np.sum(log_std_new - log_std_old + (var_old + (mu_old - mu_new) ** 2) / (2.0 * var_new) - 0.5, axis=-1)
    return float(np.mean(kl))


def adapt_lr(lr, kl, config: PpoConfig):
    if kl > 2.0 * config.desired_kl:
        lr = lr / 1.5
    elif kl < 0.5 * config.desired_kl:
        lr = lr * 1.5
    return float(np.clip(lr, config.lr_min, config.lr_max))


def mirrored(x, perm_sign):
    perm, sign = perm_sign
    return np.asarray(x)[..., perm] * sign


class PpoTrainer:
    """Actor, critic, normalizers and a single Adam over all parameters."""

    def __init__(self, obs_dim: int, critic_dim: int, action_dim: int, config: PpoConfig | None = None,
                 obs_mirror=None, action_mirror=None):
        c = self.config = config or PpoConfig()
        self.policy = GaussianPolicy(
            MlpSpec(obs_dim, action_dim, c.actor_hidden, c.activation, c.seed, output_gain=0.01),
            log_std=np.full(action_dim, c.init_log_std))
        self.value = Mlp(MlpSpec(critic_dim, 1, c.critic_hidden, c.activation, c.seed + 1))
        self.obs_norm = RunningNorm(obs_dim) if c.normalize_obs else None
        self.critic_norm = RunningNorm(critic_dim) if c.normalize_obs else None
        self.optimizer = Adam(self.params, AdamConfig(lr=c.lr))
        self.rng = np.random.default_rng(c.seed + 2)
        self.obs_mirror = obs_mirror
        self.action_mirror = action_mirror
        self.iteration = 0

    @property
    def params(self):
        return self.policy.params + self.value.params

    def _norm(self, obs):
        return self.obs_norm(obs) if self.obs_norm is not None else np.asarray(obs, dtype=float)

    def _cnorm(self, obs):
        return self.critic_norm(obs) if self.critic_norm is not None else np.asarray(obs, dtype=float)

    def act(self, obs):
        return self.policy.sample(self._norm(obs), self.rng)

    def act_mean(self, obs):
        return self.policy.mean(self._norm(obs))

    def values_of(self, critic_obs):
        return self.value(self._cnorm(critic_obs))[..., 0]

    # -- losses ------------------------------------------------------------

    def minibatch_loss(self, obs, critic_obs, actions, old_logp, old_mu, old_log_std, adv, returns, lambda_sym):
        """Loss terms and parameter gradients for one minibatch (inputs normalized except mirroring)."""
        c = self.config
        pol = self.policy
        log_std = pol.clamped_log_std()
        mask = log_std_clamp_mask(pol.log_std)
        x = self._norm(obs)
        mu, cache = pol.mean_net.forward(x)
        logp = gaussian_log_prob(actions, mu, log_std)
        surrogate, dlogp, clip_frac = ppo_surrogate(logp, old_logp, adv, c.clip)
        g_mu_lp, g_ls_lp = gaussian_log_prob_grads(actions, mu, log_std)
        grad_mu = dlogp[:, None] * g_mu_lp
        grad_log_std = np.sum(dlogp[:, None] * g_ls_lp, axis=0)
        entropy = pol.entropy()
        grad_log_std = grad_log_std - c.entropy_coef * np.ones_like(log_std)
        mean_grads, _ = pol.mean_net.backward(cache, grad_mu)

        sym_loss = 0.0
        if self.obs_mirror is not None and self.action_mirror is not None:
            xm = self._norm(mirrored(obs, self.obs_mirror))
            am = mirrored(actions, self.action_mirror)
            mu_m, cache_m = pol.mean_net.forward(xm)
            logp_m = gaussian_log_prob(am, mu_m, log_std)
            sym_loss, dlogp_m, _ = ppo_surrogate(logp_m, old_logp, adv, c.clip)
            g_mu_m, g_ls_m = gaussian_log_prob_grads(am, mu_m, log_std)
            sym_grads, _ = pol.mean_net.backward(cache_m, dlogp_m[:, None] * g_mu_m)
            mean_grads = [g + lambda_sym * gs for g, gs in zip(mean_grads, sym_grads)]
            grad_log_std = grad_log_std + lambda_sym * np.sum(dlogp_m[:, None] * g_ls_m, axis=0)
        grad_log_std = grad_log_std * mask

        xc = self._cnorm(critic_obs)
        v, vcache = self.value.forward(xc)
        err = v[:, 0] - returns
        value_loss = float(np.mean(err * err))
        value_grads, _ = self.value.backward(vcache, (c.value_coef * 2.0 * err / len(err))[:, None])

        total = surrogate + c.value_coef * value_loss - c.entropy_coef * entropy + lambda_sym * sym_loss
        kl = gaussian_kl(old_mu, old_log_std, mu, log_std)
        stats = {"loss": total, "surrogate": surrogate, "symmetry": sym_loss, "value_loss": value_loss,
                 "entropy": entropy, "kl": kl, "clip_fraction": clip_frac}
        return stats, mean_grads + [grad_log_std] + value_grads

    def update(self, buffer: RolloutBuffer) -> dict:
        c = self.config
        T, N = buffer.rewards.shape
        B = T * N
        obs = buffer.obs.reshape(B, -1)
        critic_obs = buffer.critic_obs.reshape(B, -1)
        actions = buffer.actions.reshape(B, -1)
        if self.obs_norm is not None:
            self.obs_norm.update(obs)
            self.critic_norm.update(critic_obs)
        adv, returns = compute_gae(buffer.rewards, buffer.values, buffer.dones, buffer.last_values, c.gamma, c.lam)
        buffer.advantages, buffer.returns = adv, returns
        adv = normalize_advantages(adv.reshape(B))
        returns = returns.reshape(B)
        # old policy evaluated with the refreshed normalizer so the first ratio is exactly 1
        old_log_std = self.policy.clamped_log_std().copy()
        old_mu = self.policy.mean(self._norm(obs))
        old_logp = gaussian_log_prob(actions, old_mu, old_log_std)

        mb = min(c.minibatch, B)
        history = []
        for _ in range(c.learning_epochs):
            order = self.rng.permutation(B)
            for start in range(0, B - mb + 1, mb):
                i = order[start:start + mb]
                stats, grads = self.minibatch_loss(obs[i], critic_obs[i], actions[i], old_logp[i], old_mu[i],
                                                   old_log_std, adv[i], returns[i], c.lambda_sym)
                if c.adaptive_lr and c.desired_kl > 0:
                    self.optimizer.lr = adapt_lr(self.optimizer.lr, stats["kl"], c)
                stats["grad_norm"] = clip_grad_norm(grads, c.max_grad_norm)
                self.optimizer.step(self.params, grads)
                stats["lr"] = self.optimizer.lr
                history.append(stats)
        self.iteration += 1
        out = {k: float(np.mean([h[k] for h in history])) for k in history[0]}
        out["lr"] = self.optimizer.lr
        out["minibatch_losses"] = [h["loss"] for h in history]
        return out

    # -- persistence -------------------------------------------------------

    def checkpoint(self, meta=None) -> Checkpoint:
        return Checkpoint(self.policy.copy(), self.obs_norm.copy() if self.obs_norm else None, self.value.copy(),
                          self.critic_norm.copy() if self.critic_norm else None, self.optimizer.state_dict(),
                          dict(meta or {}, iteration=self.iteration))

    def load(self, ckpt: Checkpoint):
        self.policy = ckpt.policy.copy()
        if ckpt.value is not None:
            self.value = ckpt.value.copy()
        if ckpt.normalizer is not None:
            self.obs_norm = ckpt.normalizer.copy()
        if ckpt.value_normalizer is not None:
            self.critic_norm = ckpt.value_normalizer.copy()
        self.optimizer = Adam(self.params, self.optimizer.config)
        if ckpt.optimizer:
            self.optimizer.load_state(ckpt.optimizer)
        self.iteration = int(ckpt.meta.get("iteration", 0))


# ---------------------------------------------------------------------------
# collection and the training loop


def collect_rollout(env: TrackingEnv, trainer: PpoTrainer, obs: dict, steps: int):
    """Run ``steps`` control steps; returns ``(buffer, next_obs, episode stats)``."""
    c = trainer.config
    N = env.num_envs
    buf = RolloutBuffer.empty(steps, N, env.observation_sizes[c.obs_key], env.observation_sizes[c.critic_key],
                              env.num_actions)
    term_sums = {k: 0.0 for k in TERM_NAMES}
    weighted = {k: 0.0 for k in TERM_NAMES}
    weights = env.config.reward.weights
    terminations = 0
    for t in range(steps):
        action, logp = trainer.act(obs[c.obs_key])
        value = trainer.values_of(obs[c.critic_key])
        buf.obs[t], buf.critic_obs[t] = obs[c.obs_key], obs[c.critic_key]
        res = env.step(action)
        reward = res.reward * c.reward_scale
        # time-outs are not failures: bootstrap with the current value estimate
        reward = reward + c.gamma * value * res.truncated
        buf.actions[t], buf.log_probs[t], buf.values[t] = action, logp, value
        buf.rewards[t] = reward
        buf.dones[t] = res.terminated | res.truncated
        for k in TERM_NAMES:
            term_sums[k] += float(res.terms[k].mean())
            weighted[k] += float(weights[k] * res.terms[k].mean())
        terminations += int(res.terminated.sum())
        obs = res.obs
    buf.last_values = trainer.values_of(obs[c.critic_key])
    stats = {
        "terms": {k: v / steps for k, v in term_sums.items()},
        "weighted_terms": {k: v / steps for k, v in weighted.items()},
        "reward": sum(weighted.values()) / steps,
        "tracking_reward": sum(weighted[k] for k in TRACKING_TERMS) / steps,
        "terminations": terminations,
    }
    return buf, obs, stats


def trainer_for_env(env: TrackingEnv, config: PpoConfig, symmetry: bool = True) -> PpoTrainer:
    layout = env.teacher_layout if config.obs_key == "teacher" else env.student_layout
    obs_map = mirror_map(env.model, layout) if symmetry else None
    act_map = action_mirror_map(env.model) if symmetry else None
    return PpoTrainer(env.observation_sizes[config.obs_key], env.observation_sizes[config.critic_key],
                      env.num_actions, config, obs_map, act_map)


def train_teacher(env: TrackingEnv, config: PpoConfig, log: Callable[[dict], None] | None = None,
                  checkpoint_path=None, trainer: PpoTrainer | None = None, obs=None, iterations: int | None = None,
                  probe: Callable[[PpoTrainer], dict] | None = None, probe_every: int = 0, meta: dict | None = None):
    """Collect, estimate advantages and update until the sample budget is spent.

    ``trainer``/``obs`` resume a previous call; returns ``(trainer, obs)``.
    """
    if env.num_envs != config.num_envs:
        raise ConfigError(f"environment has {env.num_envs} envs but the config asks for {config.num_envs}")
    trainer = trainer or trainer_for_env(env, config)
    if obs is None:
        obs = env.reset()
    total = config.iterations if iterations is None else iterations
    meta = {"kind": "teacher", "obs_key": config.obs_key, "model": env.model.name, "config": to_dict(config),
            **(meta or {})}
    for it in range(total):
        t0 = time.perf_counter()
        buf, obs, ep = collect_rollout(env, trainer, obs, config.steps_per_env)
        stats = trainer.update(buf)
        stats.pop("minibatch_losses")
        record = {"iteration": trainer.iteration, "samples": trainer.iteration * config.batch_size, **stats,
                  "reward": ep["reward"], "tracking_reward": ep["tracking_reward"],
                  "terminations": ep["terminations"], "terms": ep["weighted_terms"],
                  "seconds": time.perf_counter() - t0}
        if probe is not None and probe_every and (it + 1) % probe_every == 0:
            record["probe"] = probe(trainer)
        if log is not None:
            log(record)
        if checkpoint_path and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(trainer.checkpoint(meta), checkpoint_path)
    if checkpoint_path:
        save_checkpoint(trainer.checkpoint(meta), checkpoint_path)
    return trainer, obs


def jsonl_logger(path):
    fh = open(path, "a")

    def log(record):
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()

    log.close = fh.close
    return log


# ---------------------------------------------------------------------------
# symmetry diagnostics


def asymmetry(policy: GaussianPolicy, normalizer: RunningNorm | None, obs, obs_map, action_map) -> float:
    """Mean of ``|T_a(mu(s)) - mu(T_s(s))|`` over raw observations ``obs``."""
    norm = normalizer if normalizer is not None else (lambda x: x)
    mu = policy.mean(norm(obs))
    mu_m = policy.mean(norm(mirrored(obs, obs_map)))
    return float(np.mean(np.linalg.norm(mirrored(mu, action_map) - mu_m, axis=-1)))


# ---------------------------------------------------------------------------
# distillation


@dataclass
class DaggerConfig:
    num_envs: int = 32
    steps_per_env: int = 24
    learning_epochs: int = 5
    num_minibatches: int = 4
    lr: float = 1e-3
    total_samples: int = 200_000
    hidden: tuple = (256, 128, 64)
    activation: str = "elu"
    symmetry_augmentation: bool = True
    obs_key: str = "student"
    teacher_obs_key: str = "teacher"
    max_grad_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.num_envs < 1 or self.steps_per_env < 1 or self.learning_epochs < 1 or self.num_minibatches < 1:
            raise ConfigError("DAgger sizes must be positive")

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.steps_per_env

    @property
    def iterations(self) -> int:
        return self.total_samples // self.batch_size


class Distiller:
    """Student regression onto teacher actions at student-visited states."""

    def __init__(self, teacher: Checkpoint, obs_dim: int, action_dim: int, config: DaggerConfig | None = None,
                 obs_mirror=None, action_mirror=None):
        c = self.config = config or DaggerConfig()
        self.teacher = teacher
        self.student = GaussianPolicy(MlpSpec(obs_dim, action_dim, c.hidden, c.activation, c.seed, output_gain=0.01),
                                      log_std=teacher.policy.log_std.copy())
        self.norm = RunningNorm(obs_dim)
        self.optimizer = Adam(self.student.mean_net.params, AdamConfig(lr=c.lr))
        self.rng = np.random.default_rng(c.seed + 2)
        self.obs_mirror = obs_mirror
        self.action_mirror = action_mirror
        self.iteration = 0

    def act(self, obs):
        return self.student.mean(self.norm(obs))

    def augment(self, obs, labels):
        """Append mirrored (observation, teacher action) pairs; doubles the batch."""
        if not (self.config.symmetry_augmentation and self.obs_mirror is not None):
            return obs, labels
        return (np.concatenate([obs, mirrored(obs, self.obs_mirror)]),
                np.concatenate([labels, mirrored(labels, self.action_mirror)]))

    def update(self, obs, labels) -> dict:
        c = self.config
        self.norm.update(obs)
        if c.symmetry_augmentation and self.obs_mirror is not None:
            self.norm.update(mirrored(obs, self.obs_mirror))
        obs, labels = self.augment(obs, labels)
        B = len(obs)
        mb = max(1, B // c.num_minibatches)
        losses = []
        net = self.student.mean_net
        for _ in range(c.learning_epochs):
            order = self.rng.permutation(B)
            for start in range(0, B - mb + 1, mb):
                i = order[start:start + mb]
                pred, cache = net.forward(self.norm(obs[i]))
                err = pred - labels[i]
                losses.append(float(np.mean(err * err)))
                grads, _ = net.backward(cache, 2.0 * err / err.size)
                clip_grad_norm(grads, c.max_grad_norm)
                self.optimizer.step(net.params, grads)
        self.iteration += 1
        return {"loss": float(np.mean(losses)), "final_loss": losses[-1], "batch": B}

    def checkpoint(self, meta=None) -> Checkpoint:
        return Checkpoint(self.student.copy(), self.norm.copy(), meta=dict(meta or {}, iteration=self.iteration))


def distill_student(teacher: Checkpoint, env: TrackingEnv, config: DaggerConfig,
                    log: Callable[[dict], None] | None = None, checkpoint_path=None, iterations: int | None = None,
                    meta: dict | None = None):
    """DAgger: the student drives, the teacher labels every visited state."""
    if env.num_envs != config.num_envs:
        raise ConfigError(f"environment has {env.num_envs} envs but the config asks for {config.num_envs}")
    layout = env.student_layout if config.obs_key == "student" else env.teacher_layout
    distiller = Distiller(teacher, env.observation_sizes[config.obs_key], env.num_actions, config,
                          mirror_map(env.model, layout), action_mirror_map(env.model))
    obs = env.reset()
    total = config.iterations if iterations is None else iterations
    meta = {"kind": "student", "obs_key": config.obs_key, "model": env.model.name, "config": to_dict(config),
            **(meta or {})}
    for _ in range(total):
        xs, ys = [], []
        reward = 0.0
        for _ in range(config.steps_per_env):
            xs.append(obs[config.obs_key])
            ys.append(teacher.act(obs[config.teacher_obs_key]))
            res = env.step(distiller.act(obs[config.obs_key]))
            reward += float(res.reward.mean())
            obs = res.obs
        stats = distiller.update(np.concatenate(xs), np.concatenate(ys))
        stats.update(iteration=distiller.iteration, reward=reward / config.steps_per_env)
        if log is not None:
            log(stats)
    ckpt = distiller.checkpoint(meta)
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return distiller
