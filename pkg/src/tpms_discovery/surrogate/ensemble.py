"""Deep ensemble of dual-head MLPs: training, stress and dissipation statistics, checkpoints."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..curve_lab import MPA_TO_KJ_PER_M3, CanonicalCurve, canonical_grid, trapezoid_weights
from ..tpms_field import check_weights
from .mlp import BN_EPS, MlpSpec, TrainConfig, TrainedMember, forward, train_network

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tpms-ensemble"
CHECKPOINT_VERSION = 1
LOAD, UNLOAD = 0.0, 1.0
_PHASES = {"load": LOAD, "unload": UNLOAD, LOAD: LOAD, UNLOAD: UNLOAD}


@dataclass
class TrainingSet:
    weights: list
    curves: list

    def __post_init__(self):
        if len(self.weights) != len(self.curves) or not self.curves:
            raise ValueError("training set needs >= 1 (weights, curve) record")
        self.weights = [check_weights(w) for w in self.weights]
        for c in self.curves:
            if not isinstance(c, CanonicalCurve):
                raise TypeError("training curves must be canonical")

    def __len__(self):
        return len(self.curves)

    def rows(self, stride: int = 1):
        """Flatten to ``(x_param, x_strain, stress)`` rows, both phases per design.

        ``stride`` keeps every k-th grid point (always including the last).
        """
        xp, xs, y = [], [], []
        for w, c in zip(self.weights, self.curves):
            idx = np.arange(0, len(c.strain), stride)
            if idx[-1] != len(c.strain) - 1:
                idx = np.append(idx, len(c.strain) - 1)
            for phase, stress in ((LOAD, c.loading), (UNLOAD, c.unloading)):
                xp.append(np.repeat(w[None, :], len(idx), axis=0))
                xs.append(np.column_stack([c.strain[idx], np.full(len(idx), phase)]))
                y.append(stress[idx])
        return np.concatenate(xp), np.concatenate(xs), np.concatenate(y)


def _sample_var(values, axis=0):
    # shift by the first member so identical members give exactly zero spread
    n = values.shape[axis]
    ref = np.take(values, [0], axis=axis)
    dev = values - ref
    dmean = dev.mean(axis=axis, keepdims=True)
    var = np.sum((dev - dmean) ** 2, axis=axis) / (n - 1)
    return np.squeeze(ref + dmean, axis=axis), var


@dataclass(eq=False)
class EnsembleModel:
    spec: MlpSpec
    members: list  # TrainedMember
    stress_mean: float
    stress_std: float
    inference_eps_max: float = 0.6
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least two members for a variance")
        if not self.stress_std > 0:
            raise ValueError("stress_std must be positive")

    def __len__(self):
        return len(self.members)

    @property
    def default_grid(self):
        return canonical_grid(self.inference_eps_max)

    # ---- member evaluation -------------------------------------------------

    def member_rows(self, x_param, x_strain):
        """Per-row evaluation, shape ``(N, rows)``, in MPa."""
        out = [forward(self.spec, m.params, m.buffers, x_param, x_strain)[0] for m in self.members]
        return self.stress_mean + self.stress_std * np.asarray(out)

    def _head(self, member, prefix, widths, x):
        p, b = member.params, member.buffers
        for i in range(len(widths)):
            x = self._dense_bn_relu(p, b, f"{prefix}.{i}", x)
        return x

    def _dense_bn_relu(self, p, b, name, x):
        z = x @ p[f"{name}.W"] + p[f"{name}.b"]
        if self.spec.batch_norm:
            scale = p[f"{name}.gamma"] / np.sqrt(b[f"{name}.var"] + BN_EPS)
            z = (z - b[f"{name}.mean"]) * scale + p[f"{name}.beta"]
        return np.maximum(z, 0.0)

    def _member_grid(self, member, W, strain_inputs, chunk_elems=200_000):
        """Standardized outputs ``(m, k)`` for every design x strain-input pair.

        Heads run once per design and once per strain input; only the trunk
        sees the ``m * k`` pairs.
        """
        spec = self.spec
        hp = self._head(member, "param", spec.param_widths, W)
        hs = self._head(member, "strain", spec.strain_widths, strain_inputs)
        m, k = len(hp), len(hs)
        first = "trunk.0" if spec.trunk_widths else "out"
        W1 = member.params[f"{first}.W"]
        split = hp.shape[1]
        a = hp @ W1[:split]
        b = hs @ W1[split:] + member.params[f"{first}.b"]
        p, bf = member.params, member.buffers
        if spec.trunk_widths and spec.batch_norm:
            # fold the first trunk normalization into the two halves
            scale = p["trunk.0.gamma"] / np.sqrt(bf["trunk.0.var"] + BN_EPS)
            a = a * scale
            b = (b - bf["trunk.0.mean"]) * scale + p["trunk.0.beta"]
        out = np.empty((m, k))
        width = W1.shape[1]
        rows_per_chunk = max(1, chunk_elems // max(1, k * width))
        for start in range(0, m, rows_per_chunk):
            stop = min(start + rows_per_chunk, m)
            z = a[start:stop, None, :] + b[None, :, :]
            if spec.trunk_widths:
                h = np.maximum(z, 0.0, out=z).reshape(-1, width)
                for i in range(1, len(spec.trunk_widths)):
                    h = self._dense_bn_relu(p, bf, f"trunk.{i}", h)
                z = h @ p["out.W"] + p["out.b"]
            out[start:stop] = z.reshape(stop - start, k)
        return out

    def member_curves(self, W, strains, phase="load"):
        """Stress predictions ``(N, m, k)`` in MPa for designs ``W`` at ``strains``."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        strains = np.asarray(strains, dtype=float)
        inputs = np.column_stack([strains, np.full(len(strains), _PHASES[phase])])
        out = np.stack([self._member_grid(mem, W, inputs) for mem in self.members])
        return self.stress_mean + self.stress_std * out

    def member_dissipations(self, W, grid=None):
        """Per-member dissipation ``(N, m)`` in kJ/m^3 on a shared strain grid."""
        grid = self.default_grid if grid is None else np.asarray(grid, dtype=float)
        W = np.atleast_2d(np.asarray(W, dtype=float))
        k = len(grid)
        inputs = np.vstack([np.column_stack([grid, np.full(k, LOAD)]),
                            np.column_stack([grid, np.full(k, UNLOAD)])])
        q = trapezoid_weights(grid)
        signed = np.concatenate([q, -q])
        # the stress offset cancels between branches
        scale = self.stress_std * MPA_TO_KJ_PER_M3
        return np.stack([scale * (self._member_grid(mem, W, inputs) @ signed) for mem in self.members])

    # ---- statistics ----------------------------------------------------------

    def predict_stress(self, w, strains, phase="load"):
        """Ensemble mean and sample variance of the stress curve for one design."""
        curves = self.member_curves(check_weights(w), strains, phase)[:, 0, :]
        return _sample_var(curves)

    def predict_dissipation(self, w, grid=None):
        mu, var = self.dissipation_stats(check_weights(w)[None, :], grid)
        return float(mu[0]), float(var[0])

    def dissipation_stats(self, W, grid=None):
        """Mean and sample variance across members of per-member dissipation."""
        return _sample_var(self.member_dissipations(W, grid))

    # ---- persistence -------------------------------------------------------

    def save(self, path) -> Path:
        """Write an ``.npz`` checkpoint; arrays are stored little-endian float64."""
        path = Path(path)
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "spec": self.spec.to_dict(),
            "stress_mean": self.stress_mean,
            "stress_std": self.stress_std,
            "inference_eps_max": self.inference_eps_max,
            "metadata": self.metadata,
            "members": [
                {"seed": m.seed, "epochs_run": m.epochs_run, "best_epoch": m.best_epoch,
                 "best_val_loss": m.best_val_loss}
                for m in self.members
            ],
        }
        arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
        for i, m in enumerate(self.members):
            for k, v in m.params.items():
                arrays[f"m{i}/p/{k}"] = np.ascontiguousarray(v, dtype="<f8")
            for k, v in m.buffers.items():
                arrays[f"m{i}/b/{k}"] = np.ascontiguousarray(v, dtype="<f8")
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        return path

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: not an ensemble checkpoint")
            if meta["version"] > CHECKPOINT_VERSION:
                raise ValueError(f"{path}: checkpoint version {meta['version']} is newer than supported "
                                 f"({CHECKPOINT_VERSION})")
            members = []
            for i, info in enumerate(meta["members"]):
                params, buffers = {}, {}
                for key in data.files:
                    if key.startswith(f"m{i}/p/"):
                        params[key[len(f"m{i}/p/"):]] = data[key].astype(float)
                    elif key.startswith(f"m{i}/b/"):
                        buffers[key[len(f"m{i}/b/"):]] = data[key].astype(float)
                members.append(TrainedMember(params, buffers, info["seed"], info["epochs_run"],
                                             info["best_epoch"], info["best_val_loss"]))
        return cls(MlpSpec.from_dict(meta["spec"]), members, meta["stress_mean"], meta["stress_std"],
                   meta["inference_eps_max"], meta["metadata"])


def member_seeds(seed: int, n: int):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def train_member(spec: MlpSpec, data: TrainingSet, seed: int, config: TrainConfig = TrainConfig(),
                 stride: int = 1, normalization=None):
    """Train one member on ``data``; targets standardized by ``normalization`` (mean, std)."""
    xp, xs, y = data.rows(stride)
    mean, std = normalization if normalization is not None else _stress_normalization(data)
    return train_network(spec, xp, xs, (y - mean) / std, seed, config)


def _stress_normalization(data: TrainingSet):
    _, _, y = data.rows()
    std = float(y.std())
    return float(y.mean()), std if std > 0 else 1.0


def train_ensemble(data: TrainingSet, n_members: int = 30, spec: MlpSpec = MlpSpec(),
                   config: TrainConfig = TrainConfig(), seed: int = 0, stride: int = 1,
                   n_jobs: int = 1, inference_eps_max=None) -> EnsembleModel:
    """Independently train ``n_members`` networks with seed-derived random streams."""
    normalization = _stress_normalization(data)
    seeds = member_seeds(seed, n_members)
    if n_jobs == 1:
        members = [train_member(spec, data, s, config, stride, normalization) for s in seeds]
    else:
        from joblib import Parallel, delayed
        members = Parallel(n_jobs=n_jobs)(
            delayed(train_member)(spec, data, s, config, stride, normalization) for s in seeds)
    if inference_eps_max is None:
        inference_eps_max = float(np.median([c.eps_max for c in data.curves]))
    meta = {"seed": int(seed), "n_designs": len(data), "stride": int(stride), "train": config.to_dict()}
    return EnsembleModel(spec, members, normalization[0], normalization[1], inference_eps_max, meta)


def predict_stress(model: EnsembleModel, w, strains, phase="load"):
    return model.predict_stress(w, strains, phase)


def predict_dissipation(model: EnsembleModel, w, grid=None):
    return model.predict_dissipation(w, grid)
