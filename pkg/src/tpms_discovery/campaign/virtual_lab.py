"""Synthetic stand-in for fabrication plus compression testing.

The hidden ground truth maps a weight vector to a cubic-hardening loading
branch ``a*eps + b*eps**3`` and a proportional unloading branch
``gamma * loading``.  ``log a``, ``log b`` and ``logit gamma`` are smooth
functions of the weights built from three parts:

* a concentration term: designs far from the even blend (1/8 each) are
  stiffer, with a smooth step in ``rho = |w - 1/8|`` so mixed designs are
  soft and anything dominated by one or two primitives is stiff;
* a random linear preference over the eight primitives;
* a few random Fourier features for local texture.

Every quantity is a pure function of the seed.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from ..curve_lab import MPA_TO_KJ_PER_M3, StressStrainCurve
from ..tpms_field import N_PRIMITIVES, check_weights

GAMMA_BOUNDS = (0.05, 0.95)


@dataclass(eq=False)
class VirtualLab:
    seed: int = 0
    noise: float = 0.02  # relative std of multiplicative stress noise
    replicates: int = 2
    n_points: int = 150  # samples per branch
    eps_range: tuple = (0.53, 0.60)
    a0: float = 0.02  # MPa
    b0: float = 0.2  # MPa
    stiffening: float = 40.0  # concentrated designs are up to 1 + stiffening times stiffer
    rho_step: float = 0.42  # centre of the step in |w - 1/8|
    rho_width: float = 0.03
    contrast: float = 0.7  # spread of the linear primitive preference in log a, log b
    n_features: int = 16
    bump: float = 0.3
    _coef: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.replicates < 1 or self.n_points < 3:
            raise ValueError("need >= 1 replicate and >= 3 points per branch")
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), 0x7A11]))
        z = rng.normal(size=N_PRIMITIVES)
        trend = self.contrast * (z - z.mean()) / (z.max() - z.mean())
        self._coef = {
            "trend": trend,
            "omega": rng.normal(0.0, 3.0, (self.n_features, N_PRIMITIVES)),
            "phase": rng.uniform(0.0, 2 * np.pi, self.n_features),
            "amp": rng.normal(0.0, 1.0, (3, self.n_features)) * self.bump * np.sqrt(2.0 / self.n_features),
        }

    def _latent(self, W):
        c = self._coef
        W = np.atleast_2d(W)
        features = np.cos(W @ c["omega"].T + c["phase"])  # (n, F)
        bumps = features @ c["amp"].T  # (n, 3)
        rho = np.linalg.norm(W - 1.0 / N_PRIMITIVES, axis=1)
        step = 0.5 * (1 + np.tanh((rho - self.rho_step) / (2 * self.rho_width)))  # logistic, overflow-free
        stiff = np.log1p(self.stiffening * step) + W @ c["trend"]
        return stiff + bumps[:, 0], stiff + bumps[:, 1], bumps[:, 2]

    def parameters(self, W):
        """Ground-truth ``(a, b, gamma)`` arrays for the rows of ``W``."""
        g_a, g_b, g_c = self._latent(np.asarray(W, dtype=float))
        gamma = np.clip(1.0 / (1.0 + np.exp(-g_c)), *GAMMA_BOUNDS)
        return self.a0 * np.exp(g_a), self.b0 * np.exp(g_b), gamma

    def true_dissipation(self, W, eps_max: float = 0.6):
        """Noise-free hysteresis area in kJ/m^3, integrated in closed form."""
        a, b, gamma = self.parameters(W)
        return (1 - gamma) * (a * eps_max**2 / 2 + b * eps_max**4 / 4) * MPA_TO_KJ_PER_M3

    def true_curve(self, w, eps_max: float, n=None) -> StressStrainCurve:
        a, b, gamma = (float(v[0]) for v in self.parameters(check_weights(w)))
        s = np.linspace(0.0, eps_max, n or self.n_points)
        load = a * s + b * s**3
        return StressStrainCurve.from_branches(s, load, s[::-1], gamma * load[::-1])

    def _stream(self, design_id: str, rep: int):
        key = zlib.crc32(design_id.encode())
        return np.random.default_rng(np.random.SeedSequence([int(self.seed), key, rep]))

    def measure(self, design_id: str, w) -> list:
        """Noisy replicate curves for one design, reproducible per (seed, id)."""
        out = []
        for rep in range(1, self.replicates + 1):
            rng = self._stream(design_id, rep)
            eps_max = rng.uniform(*self.eps_range)
            clean = self.true_curve(w, eps_max)
            noisy = clean.stress * (1 + self.noise * rng.standard_normal(clean.stress.size))
            out.append(StressStrainCurve(clean.strain, noisy, clean.split))
        return out
