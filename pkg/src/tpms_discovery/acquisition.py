"""Candidate sampling on the weight simplex, UCB scoring, and greedy batch selection."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tpms_field import N_PRIMITIVES

log = logging.getLogger(__name__)

DEFAULT_POOL_SIZE = 1_000_000
FAST_POOL_SIZE = 100_000
DEFAULT_RADIUS = 0.2
DEFAULT_BATCH_SIZE = 40

# batch index -> kappa; batch 1 is uniform sampling without acquisition
KAPPA_SCHEDULE = {2: 2.0, 3: 2.0, 4: 1.0, 5: 0.75, 6: 0.5}


class PartialBatchWarning(UserWarning):
    pass


def kappa_for_batch(index: int):
    """Exploration weight for batch ``index``; None for the uniform first batch."""
    if index < 1:
        raise ValueError(f"batch indices start at 1, got {index}")
    if index == 1:
        return None
    return KAPPA_SCHEDULE.get(index, 0.0)


@dataclass(eq=False)
class CandidatePool:
    candidates: np.ndarray  # (n, 8)
    seed: int | None = None

    def __len__(self):
        return len(self.candidates)


def sample_candidates(n: int, seed=None, chunk: int = 250_000) -> CandidatePool:
    """``n`` uniform draws on the 8-simplex (Dirichlet with all alphas 1).

    Each draw normalizes eight standard exponential variates.
    """
    if n < 1:
        raise ValueError(f"pool size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    out = np.empty((n, N_PRIMITIVES))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        e = rng.standard_exponential((stop - start, N_PRIMITIVES))
        out[start:stop] = e / e.sum(axis=1, keepdims=True)
    return CandidatePool(out, seed)


def ucb(mu, var, kappa: float, use_std: bool = True):
    """``mu + kappa * sigma`` where sigma is the standard deviation (or the variance)."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    spread = np.sqrt(np.maximum(var, 0.0)) if use_std else var
    if kappa == 0:
        return np.asarray(mu, dtype=float) + 0.0
    return mu + kappa * spread


def ucb_score(model, w, kappa: float, use_std: bool = True, grid=None) -> float:
    mu, var = model.dissipation_stats(np.atleast_2d(w), grid)
    return float(ucb(mu, var, kappa, use_std)[0])


@dataclass
class AcquisitionConfig:
    kappa: float = 2.0
    radius: float = DEFAULT_RADIUS
    batch_size: int = DEFAULT_BATCH_SIZE
    exclusion: np.ndarray = field(default_factory=lambda: np.empty((0, N_PRIMITIVES)))
    use_std: bool = True

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        self.exclusion = np.asarray(self.exclusion, dtype=float).reshape(-1, N_PRIMITIVES)


@dataclass(eq=False)
class BatchSelection:
    indices: np.ndarray  # into the pool, priority order
    weights: np.ndarray
    scores: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    partial: bool = False
    rejected: list = field(default_factory=list)  # pool indices that failed `accept`

    def __len__(self):
        return len(self.indices)


def greedy_select(candidates, scores, radius, batch_size, exclusion=None, accept=None):
    """Pick highest scores first, skipping anything within ``radius`` of a prior pick.

    Distances are Euclidean on the weight vectors.  Ties go to the lower pool
    index.  ``accept(i)`` may veto a candidate that passed the distance test.
    Returns ``(picked_indices, rejected_indices)``.
    """
    candidates = np.asarray(candidates, dtype=float)
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    blocked = np.zeros(len(candidates), dtype=bool)
    r2 = radius * radius

    def block_around(points):
        for p in np.atleast_2d(points):
            d2 = np.sum((candidates - p) ** 2, axis=1)
            blocked[d2 < r2] = True

    if exclusion is not None and len(exclusion):
        block_around(exclusion)
    picked, rejected = [], []
    pos = 0
    while len(picked) < batch_size:
        free = np.flatnonzero(~blocked[order[pos:]])
        if not len(free):
            break
        pos += int(free[0])
        i = int(order[pos])
        pos += 1
        if accept is not None and not accept(i):
            rejected.append(i)
            blocked[i] = True
            continue
        picked.append(i)
        block_around(candidates[i])
    return np.array(picked, dtype=np.int64), rejected


def select_batch(pool: CandidatePool, model, config: AcquisitionConfig, accept=None, grid=None,
                 scores=None) -> BatchSelection:
    """Greedy UCB batch under the min-distance constraint.

    ``model`` needs ``dissipation_stats(W, grid) -> (mu, var)``.  Precomputed
    ``scores=(mu, var)`` skip the model call.
    """
    if len(pool) == 0:
        raise ValueError("candidate pool is empty")
    mu, var = scores if scores is not None else model.dissipation_stats(pool.candidates, grid)
    score = ucb(mu, var, config.kappa, config.use_std)
    picked, rejected = greedy_select(pool.candidates, score, config.radius, config.batch_size,
                                     config.exclusion, accept)
    partial = len(picked) < config.batch_size
    if partial:
        warnings.warn(f"pool exhausted: selected {len(picked)} of {config.batch_size}", PartialBatchWarning)
    return BatchSelection(picked, pool.candidates[picked], score[picked], mu[picked], var[picked],
                          partial, rejected)


PROPOSAL_HEADER = ["rank", "design_id"] + [f"w{i}" for i in range(1, N_PRIMITIVES + 1)] + \
                  ["mu_d", "sigma2_d", "ucb"]


def write_proposal_csv(path, design_ids, selection: BatchSelection) -> Path:
    """Ranked proposal records: rank, design id, 8 weights, mu_D, variance of D, UCB."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PROPOSAL_HEADER)
        for rank, (did, w, mu, var, s) in enumerate(
                zip(design_ids, selection.weights, selection.mu, selection.var, selection.scores), start=1):
            writer.writerow([rank, did, *(repr(float(x)) for x in w), repr(float(mu)), repr(float(var)),
                             repr(float(s))])
    return path


def read_proposal_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {"rank": int(r["rank"]), "design_id": r["design_id"],
         "weights": np.array([float(r[f"w{i}"]) for i in range(1, N_PRIMITIVES + 1)]),
         "mu_d": float(r["mu_d"]), "sigma2_d": float(r["sigma2_d"]), "ucb": float(r["ucb"])}
        for r in rows
    ]
