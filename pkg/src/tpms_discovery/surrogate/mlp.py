"""Dual-head MLP in plain numpy: forward, backprop, Adam training with early stopping.

One head reads the eight design weights, the other reads ``(strain, phase)``
with phase 0 for loading and 1 for unloading.  Their features are
concatenated and passed through a trunk that outputs a scalar (standardized)
stress.  Each hidden layer is Dense -> BatchNorm -> ReLU -> Dropout.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PARAM_INPUTS = 8
STRAIN_INPUTS = 2
BN_EPS = 1e-5


class TrainingDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    param_widths: tuple = (128, 128)
    strain_widths: tuple = (64, 64)
    trunk_widths: tuple = (128, 128)
    dropout: float = 0.1
    batch_norm: bool = True
    activation: str = "relu"
    output_width: int = 1

    def __post_init__(self):
        for name in ("param_widths", "strain_widths", "trunk_widths"):
            widths = tuple(int(w) for w in getattr(self, name))
            if any(w < 1 for w in widths):
                raise ValueError(f"{name} must be positive, got {widths}")
            object.__setattr__(self, name, widths)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.output_width != 1:
            raise ValueError("the network predicts a scalar stress; output_width must be 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def layers(self):
        """``(name, fan_in, fan_out, hidden)`` for every dense layer, in order."""
        out = []
        for head, n_in, widths in (("param", PARAM_INPUTS, self.param_widths),
                                   ("strain", STRAIN_INPUTS, self.strain_widths)):
            for i, w in enumerate(widths):
                out.append((f"{head}.{i}", n_in, w, True))
                n_in = w
        n_in = (self.param_widths[-1] if self.param_widths else PARAM_INPUTS) + \
               (self.strain_widths[-1] if self.strain_widths else STRAIN_INPUTS)
        for i, w in enumerate(self.trunk_widths):
            out.append((f"trunk.{i}", n_in, w, True))
            n_in = w
        out.append(("out", n_in, 1, False))
        return out


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 2000
    patience: int = 100
    batch_size: int = 256
    val_fraction: float = 0.1
    bn_momentum: float = 0.1

    def to_dict(self):
        return asdict(self)


def init_params(spec: MlpSpec, rng) -> tuple[dict, dict]:
    """He-initialized weights plus batch-norm running statistics."""
    params, buffers = {}, {}
    for name, n_in, n_out, hidden in spec.layers():
        params[f"{name}.W"] = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        params[f"{name}.b"] = np.zeros(n_out)
        if hidden and spec.batch_norm:
            params[f"{name}.gamma"] = np.ones(n_out)
            params[f"{name}.beta"] = np.zeros(n_out)
            buffers[f"{name}.mean"] = np.zeros(n_out)
            buffers[f"{name}.var"] = np.ones(n_out)
    return params, buffers


def _hidden_forward(name, x, params, buffers, spec, train, rng, momentum, update_stats):
    z = x @ params[f"{name}.W"] + params[f"{name}.b"]
    cache = {"x": x}
    if spec.batch_norm:
        if train:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            if update_stats:
                n = len(z)
                unbiased = var * n / (n - 1) if n > 1 else var
                buffers[f"{name}.mean"] = (1 - momentum) * buffers[f"{name}.mean"] + momentum * mu
                buffers[f"{name}.var"] = (1 - momentum) * buffers[f"{name}.var"] + momentum * unbiased
        else:
            mu, var = buffers[f"{name}.mean"], buffers[f"{name}.var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - mu) * inv_std
        y = params[f"{name}.gamma"] * xhat + params[f"{name}.beta"]
        cache.update(xhat=xhat, inv_std=inv_std)
    else:
        y = z
    a = np.maximum(y, 0.0)
    cache["active"] = y > 0
    if train and spec.dropout > 0 and rng is not None:
        mask = (rng.random(a.shape) >= spec.dropout) / (1.0 - spec.dropout)
        a = a * mask
        cache["mask"] = mask
    return a, cache


def _hidden_backward(name, da, cache, params, spec, train, grads):
    if "mask" in cache:
        da = da * cache["mask"]
    dy = da * cache["active"]
    if spec.batch_norm:
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        grads[f"{name}.gamma"] = np.sum(dy * xhat, axis=0)
        grads[f"{name}.beta"] = np.sum(dy, axis=0)
        dxhat = dy * params[f"{name}.gamma"]
        if train:
            n = len(dxhat)
            dz = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        else:
            dz = dxhat * inv_std
    else:
        dz = dy
    grads[f"{name}.W"] = cache["x"].T @ dz
    grads[f"{name}.b"] = dz.sum(axis=0)
    return dz @ params[f"{name}.W"].T


def forward(spec, params, buffers, x_param, x_strain, train=False, rng=None,
            momentum=0.1, update_stats=True):
    """Row-wise forward pass; returns ``(prediction[n], caches)``."""
    caches = []
    hp = np.asarray(x_param, dtype=float)
    for i in range(len(spec.param_widths)):
        hp, c = _hidden_forward(f"param.{i}", hp, params, buffers, spec, train, rng, momentum, update_stats)
        caches.append(c)
    hs = np.asarray(x_strain, dtype=float)
    for i in range(len(spec.strain_widths)):
        hs, c = _hidden_forward(f"strain.{i}", hs, params, buffers, spec, train, rng, momentum, update_stats)
        caches.append(c)
    h = np.concatenate([hp, hs], axis=1)
    for i in range(len(spec.trunk_widths)):
        h, c = _hidden_forward(f"trunk.{i}", h, params, buffers, spec, train, rng, momentum, update_stats)
        caches.append(c)
    caches.append({"x": h})
    out = h @ params["out.W"] + params["out.b"]
    return out[:, 0], caches


def backward(spec, params, caches, dout, train=False):
    """Parameter gradients given ``dL/dprediction`` of shape ``(n,)``."""
    grads = {}
    dout = np.asarray(dout, dtype=float)[:, None]
    grads["out.W"] = caches[-1]["x"].T @ dout
    grads["out.b"] = dout.sum(axis=0)
    dh = dout @ params["out.W"].T
    n_p, n_s, n_t = len(spec.param_widths), len(spec.strain_widths), len(spec.trunk_widths)
    for i in reversed(range(n_t)):
        dh = _hidden_backward(f"trunk.{i}", dh, caches[n_p + n_s + i], params, spec, train, grads)
    width_p = spec.param_widths[-1] if n_p else PARAM_INPUTS
    dhp, dhs = dh[:, :width_p], dh[:, width_p:]
    for i in reversed(range(n_s)):
        dhs = _hidden_backward(f"strain.{i}", dhs, caches[n_p + i], params, spec, train, grads)
    for i in reversed(range(n_p)):
        dhp = _hidden_backward(f"param.{i}", dhp, caches[i], params, spec, train, grads)
    return grads


def mse_loss_and_grad(spec, params, buffers, x_param, x_strain, y, train=False, rng=None,
                      momentum=0.1, update_stats=True):
    pred, caches = forward(spec, params, buffers, x_param, x_strain, train, rng, momentum, update_stats)
    resid = pred - y
    loss = float(np.mean(resid ** 2))
    grads = backward(spec, params, caches, 2.0 * resid / len(y), train)
    return loss, grads


def backprop_gradient_check(spec: MlpSpec, x_param, x_strain, y, seed=0, h=1e-5,
                            mode="inference", floor=1e-6, params=None, buffers=None):
    """Worst relative error between backprop and central-difference gradients.

    Dropout is disabled.  ``mode="inference"`` uses batch-norm running
    statistics (randomized so they are non-trivial); ``mode="train"`` uses
    batch statistics without updating the buffers.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    spec = MlpSpec(**{**spec.to_dict(), "dropout": 0.0})
    rng = np.random.default_rng(seed)
    if params is None:
        params, buffers = init_params(spec, rng)
        for k in buffers:
            if k.endswith(".mean"):
                buffers[k] = rng.normal(0, 0.3, size=buffers[k].shape)
            else:
                buffers[k] = rng.uniform(0.5, 2.0, size=buffers[k].shape)
        for k in params:
            if k.endswith(".gamma") or k.endswith(".beta") or k.endswith(".b"):
                params[k] = params[k] + rng.normal(0, 0.1, size=params[k].shape)
    train = mode == "train"
    x_param = np.atleast_2d(np.asarray(x_param, dtype=float))
    x_strain = np.atleast_2d(np.asarray(x_strain, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))

    def loss_only():
        pred, _ = forward(spec, params, buffers, x_param, x_strain, train, None, update_stats=False)
        return float(np.mean((pred - y) ** 2))

    _, grads = mse_loss_and_grad(spec, params, buffers, x_param, x_strain, y, train, None, update_stats=False)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = loss_only()
            flat[j] = old - h
            down = loss_only()
            flat[j] = old
            numeric = (up - down) / (2 * h)
            err = abs(g[j] - numeric) / max(abs(g[j]), abs(numeric), floor)
            worst = max(worst, err)
    return worst


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainedMember:
    params: dict
    buffers: dict
    seed: int
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    history: list = field(default_factory=list, repr=False)

    def flat_parameters(self):
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])


def train_network(spec: MlpSpec, x_param, x_strain, y, seed: int, config: TrainConfig = TrainConfig()):
    """Train one network on standardized targets with a seed-specific validation split.

    Early stopping watches the held-out loss and restores the best epoch's
    parameters and batch-norm statistics.
    """
    x_param = np.asarray(x_param, dtype=float)
    x_strain = np.asarray(x_strain, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    init_ss, split_ss, shuffle_ss, drop_ss = np.random.SeedSequence(seed).spawn(4)
    params, buffers = init_params(spec, np.random.default_rng(init_ss))
    order = np.random.default_rng(split_ss).permutation(n)
    n_val = int(round(config.val_fraction * n)) if n >= 10 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    n_batches = max(1, int(np.ceil(len(train_idx) / config.batch_size)))

    best = (np.inf, copy.deepcopy(params), copy.deepcopy(buffers), 0)
    history = []
    stale = 0
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        perm = shuffle_rng.permutation(train_idx)
        total = 0.0
        for batch in np.array_split(perm, n_batches):
            loss, grads = mse_loss_and_grad(spec, params, buffers, x_param[batch], x_strain[batch], y[batch],
                                            train=True, rng=drop_rng, momentum=config.bn_momentum)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite training loss at epoch {epoch} (seed {seed})")
            opt.step(params, grads)
            total += loss * len(batch)
        train_loss = total / len(train_idx)
        if n_val:
            pred, _ = forward(spec, params, buffers, x_param[val_idx], x_strain[val_idx])
            monitor = float(np.mean((pred - y[val_idx]) ** 2))
        else:
            monitor = train_loss
        if not np.isfinite(monitor):
            raise TrainingDivergenceError(f"non-finite validation loss at epoch {epoch} (seed {seed})")
        history.append((train_loss, monitor))
        if monitor < best[0]:
            best = (monitor, copy.deepcopy(params), copy.deepcopy(buffers), epoch)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    best_loss, best_params, best_buffers, best_epoch = best
    log.debug("seed %s: %d epochs, best %d (val %.4g)", seed, epoch, best_epoch, best_loss)
    return TrainedMember(best_params, best_buffers, int(seed), epoch, best_epoch, float(best_loss), history)
