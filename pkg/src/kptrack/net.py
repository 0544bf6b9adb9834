"""MLPs with hand-written backward passes, a diagonal Gaussian policy head,
running input normalization, Adam, and JSON checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kptrack.config import ConfigError

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
CHECKPOINT_FORMAT = "kptrack-checkpoint"
CHECKPOINT_VERSION = 1
_LOG_2PI = np.log(2.0 * np.pi)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x, y):
    return np.where(x > 0, 1.0, y + 1.0)


ACTIVATIONS = {
    "elu": (_elu, _elu_grad),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(float)),
    "identity": (lambda x: x, lambda x, y: np.ones_like(x)),
}


@dataclass
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden: tuple = (256, 128, 64)
    activation: str = "elu"
    seed: int = 0
    output_gain: float = 1.0  # scales the initial last-layer weights

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("all layer dimensions must be at least 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


class Mlp:
    """Fully connected network; ``params`` alternates weight (in, out) and bias (out,)."""

    def __init__(self, spec: MlpSpec, params=None):
        self.spec = spec
        dims = (spec.input_dim,) + spec.hidden + (spec.output_dim,)
        if params is None:
            rng = np.random.default_rng(spec.seed)
            params = []
            for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
                bound = 1.0 / np.sqrt(d_in)
                w = rng.uniform(-bound, bound, size=(d_in, d_out))
                if i == len(dims) - 2:
                    w = w * spec.output_gain
                params += [w, np.zeros(d_out)]
        self.params = [np.array(p, dtype=float) for p in params]
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            if self.params[2 * i].shape != (d_in, d_out) or self.params[2 * i + 1].shape != (d_out,):
                raise ValueError(f"layer {i} parameters do not match the MlpSpec shapes")

    @property
    def num_layers(self) -> int:
        return len(self.params) // 2

    def forward(self, x):
        """Output and the cache needed by ``backward``."""
        act, _ = ACTIVATIONS[self.spec.activation]
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.spec.input_dim:
            raise ValueError(f"expected input dim {self.spec.input_dim}, got {x.shape[-1]}")
        cache = [x]
        h = x
        for i in range(self.num_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < self.num_layers - 1:
                h = act(z)
                cache += [z, h]
            else:
                h = z
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Parameter gradients (same order as ``params``) and the input gradient."""
        _, dact = ACTIVATIONS[self.spec.activation]
        g = np.asarray(grad_out, dtype=float)
        grads = [None] * len(self.params)
        for i in reversed(range(self.num_layers)):
            h_in = cache[0] if i == 0 else cache[2 * i]
            h2 = h_in.reshape(-1, h_in.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            grads[2 * i] = h2.T @ g2
            grads[2 * i + 1] = g2.sum(axis=0)
            g = g @ self.params[2 * i].T
            if i > 0:
                z, h = cache[2 * i - 1], cache[2 * i]
                g = g * dact(z, h)
        return grads, g

    def copy(self) -> "Mlp":
        return Mlp(self.spec, [p.copy() for p in self.params])

    def state_dict(self) -> dict:
        return {"spec": _spec_dict(self.spec), "params": [p.tolist() for p in self.params]}

    @classmethod
    def from_state(cls, doc) -> "Mlp":
        return cls(MlpSpec(**doc["spec"]), [np.array(p, dtype=float) for p in doc["params"]])


def _spec_dict(spec: MlpSpec) -> dict:
    return {"input_dim": spec.input_dim, "output_dim": spec.output_dim, "hidden": list(spec.hidden),
            "activation": spec.activation, "seed": spec.seed, "output_gain": spec.output_gain}


class GaussianPolicy:
    """Diagonal Gaussian with an MLP mean and a state-independent log-std."""

    def __init__(self, spec: MlpSpec, log_std=None, mean: Mlp | None = None):
        self.mean_net = mean or Mlp(spec)
        self.log_std = np.zeros(spec.output_dim) if log_std is None else np.array(log_std, dtype=float)

    @property
    def spec(self) -> MlpSpec:
        return self.mean_net.spec

    @property
    def action_dim(self) -> int:
        return self.spec.output_dim

    @property
    def params(self):
        return self.mean_net.params + [self.log_std]

    def clamped_log_std(self):
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, obs):
        return self.mean_net(obs)

    def sample(self, obs, rng):
        mu = self.mean_net(obs)
        std = np.exp(self.clamped_log_std())
        action = mu + std * rng.standard_normal(mu.shape)
        return action, gaussian_log_prob(action, mu, self.clamped_log_std())

    def log_prob(self, obs, action):
        return gaussian_log_prob(action, self.mean_net(obs), self.clamped_log_std())

    def entropy(self):
        return float(np.sum(self.clamped_log_std() + 0.5 * (1.0 + _LOG_2PI)))

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.spec, self.log_std.copy(), self.mean_net.copy())

    def state_dict(self) -> dict:
        return {"mean": self.mean_net.state_dict(), "log_std": self.log_std.tolist()}

    @classmethod
    def from_state(cls, doc) -> "GaussianPolicy":
        mean = Mlp.from_state(doc["mean"])
        return cls(mean.spec, doc["log_std"], mean)


def gaussian_log_prob(action, mean, log_std):
    z = (np.asarray(action) - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * _LOG_2PI


def gaussian_log_prob_grads(action, mean, log_std):
    """Gradients of the per-sample log density w.r.t. mean (N, d) and log-std (N, d)."""
    inv_var = np.exp(-2.0 * log_std)
    diff = np.asarray(action) - mean
    return diff * inv_var, diff * diff * inv_var - 1.0


def log_std_clamp_mask(log_std):
    """1 where the clamp is inactive (gradient passes), else 0."""
    return ((log_std >= LOG_STD_MIN) & (log_std <= LOG_STD_MAX)).astype(float)


class RunningNorm:
    """Per-dimension running mean/variance (parallel Welford) with clipping."""

    def __init__(self, dim: int, epsilon: float = 1e-8, clip: float = 10.0):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 0.0
        self.epsilon = epsilon
        self.clip = clip

    def update(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.mean.shape[0])
        n = x.shape[0]
        if n == 0:
            return
        b_mean = x.mean(axis=0)
        b_var = x.var(axis=0)
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, float(n)
            return
        total = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta**2 * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.var = m2 / total
        self.count = total

    def __call__(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.mean) / np.sqrt(self.var + self.epsilon), -self.clip, self.clip)

    def copy(self) -> "RunningNorm":
        out = RunningNorm(len(self.mean), self.epsilon, self.clip)
        out.mean, out.var, out.count = self.mean.copy(), self.var.copy(), self.count
        return out

    def state_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": self.count,
                "epsilon": self.epsilon, "clip": self.clip}

    @classmethod
    def from_state(cls, doc) -> "RunningNorm":
        out = cls(len(doc["mean"]), doc["epsilon"], doc["clip"])
        out.mean = np.array(doc["mean"], dtype=float)
        out.var = np.array(doc["var"], dtype=float)
        out.count = float(doc["count"])
        return out


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, params, config: AdamConfig | None = None):
        self.config = config or AdamConfig()
        self.lr = self.config.lr
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """Update ``params`` in place."""
        c = self.config
        self.t += 1
        b1t = 1.0 - c.beta1**self.t
        b2t = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "t": self.t, "m": [x.tolist() for x in self.m], "v": [x.tolist() for x in self.v],
                "config": {"lr": self.config.lr, "beta1": self.config.beta1, "beta2": self.config.beta2,
                           "eps": self.config.eps}}

    def load_state(self, doc):
        self.lr = float(doc["lr"])
        self.t = int(doc["t"])
        self.m = [np.array(x, dtype=float) for x in doc["m"]]
        self.v = [np.array(x, dtype=float) for x in doc["v"]]


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global norm is at most ``max_norm``; returns the original norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Policy (plus optional value net and normalizer) with free-form metadata."""

    policy: GaussianPolicy
    normalizer: RunningNorm | None = None
    value: Mlp | None = None
    value_normalizer: RunningNorm | None = None
    optimizer: dict | None = None
    meta: dict = field(default_factory=dict)

    def act(self, obs):
        """Deterministic action (policy mean) for raw observations."""
        x = self.normalizer(obs) if self.normalizer is not None else obs
        return self.policy.mean(x)


def checkpoint_to_dict(ckpt: Checkpoint) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": ckpt.meta,
        "policy": ckpt.policy.state_dict(),
        "normalizer": ckpt.normalizer.state_dict() if ckpt.normalizer is not None else None,
        "value": ckpt.value.state_dict() if ckpt.value is not None else None,
        "value_normalizer": ckpt.value_normalizer.state_dict() if ckpt.value_normalizer is not None else None,
        "optimizer": ckpt.optimizer,
    }


def checkpoint_from_dict(doc: dict) -> Checkpoint:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a policy checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    return Checkpoint(
        policy=GaussianPolicy.from_state(doc["policy"]),
        normalizer=RunningNorm.from_state(doc["normalizer"]) if doc.get("normalizer") else None,
        value=Mlp.from_state(doc["value"]) if doc.get("value") else None,
        value_normalizer=RunningNorm.from_state(doc["value_normalizer"]) if doc.get("value_normalizer") else None,
        optimizer=doc.get("optimizer"),
        meta=doc.get("meta", {}),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_to_dict(ckpt)))


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"cannot parse checkpoint {path}: {exc}") from exc
    return checkpoint_from_dict(doc)
