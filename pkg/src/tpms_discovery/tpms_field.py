"""Implicit TPMS primitives, their barycentric blend, and the sheet-solid predicate.

Points are arrays of shape ``(..., 3)`` in implicit units, where one unit cell
spans ``2*pi`` along each axis.  All functions broadcast over leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

N_PRIMITIVES = 8

# Fixed 1-based index order, also used in every file format.
PRIMITIVE_NAMES = {
    1: "Schwarz P",
    2: "Schoen Gyroid",
    3: "Schwarz Diamond",
    4: "Schoen I-WP",
    5: "Neovius",
    6: "Fischer-Koch S",
    7: "Lidinoid",
    8: "Split-P",
}

THICKNESS_MODES = ("normalized", "literal", "constant")


class _Trig:
    """Cached sin/cos of x, y, z and their doubles."""

    def __init__(self, p):
        p = np.asarray(p, dtype=float)
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        self.sx, self.sy, self.sz = np.sin(x), np.sin(y), np.sin(z)
        self.cx, self.cy, self.cz = np.cos(x), np.cos(y), np.cos(z)
        self.s2x, self.s2y, self.s2z = np.sin(2 * x), np.sin(2 * y), np.sin(2 * z)
        self.c2x, self.c2y, self.c2z = np.cos(2 * x), np.cos(2 * y), np.cos(2 * z)


def _schwarz_p(t):
    value = t.cx + t.cy + t.cz
    grad = (-t.sx, -t.sy, -t.sz)
    return value, grad


def _gyroid(t):
    value = t.sx * t.cy + t.sy * t.cz + t.sz * t.cx
    grad = (
        t.cx * t.cy - t.sz * t.sx,
        -t.sx * t.sy + t.cy * t.cz,
        -t.sy * t.sz + t.cz * t.cx,
    )
    return value, grad


def _diamond(t):
    value = (t.sx * t.sy * t.sz + t.sx * t.cy * t.cz
             + t.cx * t.sy * t.cz + t.cx * t.cy * t.sz)
    grad = (
        t.cx * t.sy * t.sz + t.cx * t.cy * t.cz - t.sx * t.sy * t.cz - t.sx * t.cy * t.sz,
        t.sx * t.cy * t.sz - t.sx * t.sy * t.cz + t.cx * t.cy * t.cz - t.cx * t.sy * t.sz,
        t.sx * t.sy * t.cz - t.sx * t.cy * t.sz - t.cx * t.sy * t.sz + t.cx * t.cy * t.cz,
    )
    return value, grad


def _iwp(t):
    value = 2 * (t.cx * t.cy + t.cy * t.cz + t.cz * t.cx) - (t.c2x + t.c2y + t.c2z)
    grad = (
        -2 * t.sx * (t.cy + t.cz) + 2 * t.s2x,
        -2 * t.sy * (t.cx + t.cz) + 2 * t.s2y,
        -2 * t.sz * (t.cx + t.cy) + 2 * t.s2z,
    )
    return value, grad


def _neovius(t):
    value = 3 * (t.cx + t.cy + t.cz) + 4 * t.cx * t.cy * t.cz
    grad = (
        -3 * t.sx - 4 * t.sx * t.cy * t.cz,
        -3 * t.sy - 4 * t.cx * t.sy * t.cz,
        -3 * t.sz - 4 * t.cx * t.cy * t.sz,
    )
    return value, grad


def _fischer_koch_s(t):
    value = t.c2x * t.sy * t.cz + t.cx * t.c2y * t.sz + t.sx * t.cy * t.c2z
    grad = (
        -2 * t.s2x * t.sy * t.cz - t.sx * t.c2y * t.sz + t.cx * t.cy * t.c2z,
        t.c2x * t.cy * t.cz - 2 * t.cx * t.s2y * t.sz - t.sx * t.sy * t.c2z,
        -t.c2x * t.sy * t.sz + t.cx * t.c2y * t.cz - 2 * t.sx * t.cy * t.s2z,
    )
    return value, grad


def _lidinoid(t):
    value = (0.5 * (t.s2x * t.cy * t.sz + t.sx * t.s2y * t.cz + t.cx * t.sy * t.s2z)
             - 0.5 * (t.c2x * t.c2y + t.c2y * t.c2z + t.c2z * t.c2x) + 0.15)
    grad = (
        0.5 * (2 * t.c2x * t.cy * t.sz + t.cx * t.s2y * t.cz - t.sx * t.sy * t.s2z)
        + t.s2x * (t.c2y + t.c2z),
        0.5 * (-t.s2x * t.sy * t.sz + 2 * t.sx * t.c2y * t.cz + t.cx * t.cy * t.s2z)
        + t.s2y * (t.c2x + t.c2z),
        0.5 * (t.s2x * t.cy * t.cz - t.sx * t.s2y * t.sz + 2 * t.cx * t.sy * t.c2z)
        + t.s2z * (t.c2x + t.c2y),
    )
    return value, grad


def _split_p(t):
    value = (1.1 * (t.s2x * t.sz * t.cy + t.s2y * t.sx * t.cz + t.s2z * t.sy * t.cx)
             - 0.2 * (t.c2x * t.c2y + t.c2y * t.c2z + t.c2z * t.c2x)
             - 0.4 * (t.c2x + t.c2y + t.c2z))
    grad = (
        1.1 * (2 * t.c2x * t.sz * t.cy + t.s2y * t.cx * t.cz - t.s2z * t.sy * t.sx)
        + 0.4 * t.s2x * (t.c2y + t.c2z) + 0.8 * t.s2x,
        1.1 * (-t.s2x * t.sz * t.sy + 2 * t.c2y * t.sx * t.cz + t.s2z * t.cy * t.cx)
        + 0.4 * t.s2y * (t.c2x + t.c2z) + 0.8 * t.s2y,
        1.1 * (t.s2x * t.cz * t.cy - t.s2y * t.sx * t.sz + 2 * t.c2z * t.sy * t.cx)
        + 0.4 * t.s2z * (t.c2x + t.c2y) + 0.8 * t.s2z,
    )
    return value, grad


_PRIMITIVES: dict[int, Callable] = {
    1: _schwarz_p,
    2: _gyroid,
    3: _diamond,
    4: _iwp,
    5: _neovius,
    6: _fischer_koch_s,
    7: _lidinoid,
    8: _split_p,
}


def _check_id(primitive: int) -> int:
    if isinstance(primitive, (bool, np.bool_)) or int(primitive) != primitive \
            or primitive not in _PRIMITIVES:
        raise ValueError(f"primitive index must be an integer in 1..8, got {primitive!r}")
    return int(primitive)


def check_weights(w, atol: float = 1e-9) -> np.ndarray:
    """Validate a barycentric weight vector and return it as a float array."""
    w = np.asarray(w, dtype=float)
    if w.shape != (N_PRIMITIVES,):
        raise ValueError(f"weight vector must have {N_PRIMITIVES} entries, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weight vector has non-finite entries")
    if np.any(w < 0):
        raise ValueError(f"weights must be nonnegative: {w}")
    if abs(w.sum() - 1.0) > atol:
        raise ValueError(f"weights must sum to 1 (got {w.sum():.12g})")
    return w


def unit_weights(primitive: int) -> np.ndarray:
    w = np.zeros(N_PRIMITIVES)
    w[_check_id(primitive) - 1] = 1.0
    return w


def format_weights(w) -> str:
    """Canonical text form: eight comma-separated decimals, round-trip exact."""
    return ",".join(repr(float(v)) for v in check_weights(w))


def parse_weights(text: str) -> np.ndarray:
    parts = [s.strip() for s in text.strip().split(",")]
    return check_weights([float(s) for s in parts])


def dominant_primitive(w) -> int:
    """1-based index of the largest weight (lowest index on ties)."""
    return int(np.argmax(np.asarray(w))) + 1


def eval_primitive(primitive: int, p) -> np.ndarray:
    value, _ = _PRIMITIVES[_check_id(primitive)](_Trig(p))
    return value


def primitive_gradient(primitive: int, p) -> np.ndarray:
    _, grad = _PRIMITIVES[_check_id(primitive)](_Trig(p))
    return np.stack(grad, axis=-1)


@dataclass(frozen=True, eq=False)
class TpmsField:
    """Blended implicit field ``F = sum_i w_i f_i`` thickened into a sheet.

    ``mode`` selects the wall rule:

    * ``"normalized"`` -- ``|F| <= (t/2) |grad F|``, i.e. ``|F|/|grad F| <= t/2``.
      First-order distance to the mid-surface, so walls are ``t`` thick everywhere.
    * ``"literal"`` -- ``|F| |grad F| <= t/2``, the offset ``t/(2|grad F|)``
      applied to ``F`` directly; thickness varies as ``t/|grad F|^2``.
    * ``"constant"`` -- ``|F| <= t/2``; thickness varies as ``t/|grad F|``.
    """

    weights: np.ndarray
    thickness: float = 0.5
    mode: str = "normalized"
    _active: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = check_weights(self.weights).copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if not self.thickness > 0:
            raise ValueError(f"thickness must be positive, got {self.thickness}")
        if self.mode not in THICKNESS_MODES:
            raise ValueError(f"unknown thickness mode {self.mode!r}; expected one of {THICKNESS_MODES}")
        active = tuple((i, float(w[i - 1])) for i in range(1, N_PRIMITIVES + 1) if w[i - 1] != 0.0)
        object.__setattr__(self, "_active", active)

    @classmethod
    def primitive(cls, primitive: int, thickness: float = 0.5, mode: str = "normalized"):
        return cls(unit_weights(primitive), thickness, mode)

    def value_and_gradient(self, p):
        trig = _Trig(p)
        shape = np.shape(p)[:-1]
        value = np.zeros(shape)
        grad = np.zeros(shape + (3,))
        for i, wi in self._active:
            v, g = _PRIMITIVES[i](trig)
            value += wi * v
            for k in range(3):
                grad[..., k] += wi * g[k]
        return value, grad

    def value(self, p):
        trig = _Trig(p)
        value = np.zeros(np.shape(p)[:-1])
        for i, wi in self._active:
            value += wi * _PRIMITIVES[i](trig)[0]
        return value

    def gradient(self, p):
        return self.value_and_gradient(p)[1]

    def margin(self, p):
        """Signed slack of the wall predicate; solid where ``margin >= 0``."""
        value, grad = self.value_and_gradient(p)
        gnorm = np.linalg.norm(grad, axis=-1)
        half = 0.5 * self.thickness
        if self.mode == "normalized":
            return half * gnorm - np.abs(value)
        if self.mode == "literal":
            return half - np.abs(value) * gnorm
        return half - np.abs(value)

    def is_solid(self, p):
        return self.margin(p) >= 0


def eval_field(field_: TpmsField, p):
    return field_.value(p)


def eval_gradient(field_: TpmsField, p):
    return field_.gradient(p)


def is_solid(field_: TpmsField, p):
    return field_.is_solid(p)


def surface_points(field_: TpmsField, n: int, seed=None, max_iter: int = 50):
    """Project random points onto the mid-surface ``F = 0`` by Newton steps.

    Points that land on near-critical spots (``|grad F| < 1e-3``) or fail to
    converge are replaced by fresh draws until ``n`` points are collected.
    """
    rng = np.random.default_rng(seed)
    found = []
    total = 0
    while total < n:
        p = rng.uniform(0, 2 * np.pi, size=(4 * n, 3))
        for _ in range(max_iter):
            value, grad = field_.value_and_gradient(p)
            g2 = np.sum(grad * grad, axis=-1)
            p = p - (value / np.maximum(g2, 1e-12))[:, None] * grad
        value, grad = field_.value_and_gradient(p)
        ok = (np.abs(value) < 1e-10) & (np.linalg.norm(grad, axis=-1) > 1e-3)
        found.append(p[ok])
        total += int(ok.sum())
    return np.concatenate(found)[:n]


def wall_thickness(field_: TpmsField, points, step: float = 1e-3, reach: float = np.pi):
    """Wall width through each mid-surface point, measured along the unit normal.

    Marches outward in both normal directions until the solid predicate first
    fails, then refines the exit by bisection.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    grad = field_.gradient(points)
    normals = grad / np.linalg.norm(grad, axis=-1, keepdims=True)
    widths = np.zeros(len(points))
    s_grid = np.arange(step, reach + step, step)
    for sign in (1.0, -1.0):
        d = sign * normals
        ray = points[:, None, :] + s_grid[None, :, None] * d[:, None, :]
        solid = field_.is_solid(ray)
        exited = ~solid
        first = np.where(exited.any(axis=1), exited.argmax(axis=1), len(s_grid) - 1)
        hi = s_grid[first]
        lo = np.where(first > 0, s_grid[np.maximum(first - 1, 0)], 0.0)
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            inside = field_.is_solid(points + mid[:, None] * d)
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        widths += 0.5 * (lo + hi)
    return widths
