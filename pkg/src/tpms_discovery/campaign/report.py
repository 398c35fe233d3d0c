"""Per-batch dissipation statistics, PCA of measured designs, and curve data files."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..tpms_field import dominant_primitive
from .state import CampaignState

TABLE_HEADER = ["batch", "n", "min", "max", "mean", "median"]


@dataclass(frozen=True)
class BatchStats:
    label: str  # "primitives" or the batch index
    n: int
    min: float
    max: float
    mean: float
    median: float

    @classmethod
    def of(cls, label, values):
        v = np.asarray(values, dtype=float)
        return cls(str(label), len(v), float(v.min()), float(v.max()), float(v.mean()), float(np.median(v)))

    def row(self):
        return [self.label, self.n, self.min, self.max, self.mean, self.median]


@dataclass
class Projection:
    design_ids: list
    batches: list
    coords: np.ndarray  # (n, 2)
    components: np.ndarray  # (2, 8), rows are unit eigenvectors
    explained: np.ndarray  # (2,) eigenvalues
    dissipation: np.ndarray
    labels: np.ndarray  # dominant primitive 1..8


@dataclass
class CampaignReport:
    table: list  # BatchStats
    projection: Projection | None
    files: list = field(default_factory=list)

    def row(self, label):
        for r in self.table:
            if r.label == str(label):
                return r
        raise KeyError(label)

    def to_dict(self):
        return {"table": [r.row() for r in self.table],
                "pca": None if self.projection is None else {
                    "coords": self.projection.coords.tolist(),
                    "components": self.projection.components.tolist()}}


def dissipation_table(state: CampaignState) -> list:
    rows = []
    if state.measured(0):
        rows.append(BatchStats.of("primitives", state.batch_dissipations(0)))
    for b in state.batches:
        values = state.batch_dissipations(b.index)
        if len(values):
            rows.append(BatchStats.of(b.index, values))
    return rows


def principal_components(X, k: int = 2):
    """Top-``k`` PCA via eigendecomposition of the sample covariance.

    Eigenvector signs are fixed so the largest-magnitude entry is positive.
    Zero-variance data gives zero coordinates instead of failing.
    Returns ``(coords, components, eigenvalues)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    centred = X - X.mean(axis=0)
    cov = centred.T @ centred / max(n - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1][:k]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order].T
    for v in vecs:
        j = np.argmax(np.abs(v))
        if v[j] < 0:
            v *= -1
    coords = centred @ vecs.T
    return coords, vecs, vals


def project_designs(state: CampaignState) -> Projection | None:
    measured = state.measured()
    if not measured:
        return None
    W = np.array([d.weights for d in measured])
    coords, comps, vals = principal_components(W)
    return Projection([d.design_id for d in measured], [d.batch for d in measured], coords, comps, vals,
                      np.array([state.measurements[d.design_id].dissipation for d in measured]),
                      np.array([dominant_primitive(w) for w in W]))


def build_report(state: CampaignState) -> CampaignReport:
    return CampaignReport(dissipation_table(state), project_designs(state))


def write_report(state: CampaignState, directory) -> CampaignReport:
    """Write ``dissipation_by_batch.csv``, ``pca.csv`` and ``curves/<id>.csv``."""
    directory = Path(directory)
    (directory / "curves").mkdir(parents=True, exist_ok=True)
    report = build_report(state)
    table = directory / "dissipation_by_batch.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        for r in report.table:
            w.writerow([r.label, r.n] + [f"{x:.2f}" for x in (r.min, r.max, r.mean, r.median)])
    report.files.append(table)
    p = report.projection
    if p is not None:
        pca = directory / "pca.csv"
        with open(pca, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["design_id", "batch", "pc1", "pc2", "dissipation", "dominant_primitive"])
            for did, b, (x, y), dval, lab in zip(p.design_ids, p.batches, p.coords, p.dissipation, p.labels):
                w.writerow([did, b, repr(float(x)), repr(float(y)), repr(float(dval)), int(lab)])
        report.files.append(pca)
    for did in sorted(state.measurements):
        c = state.measurements[did].curve
        path = directory / "curves" / f"{did}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["strain", "loading_mpa", "unloading_mpa"])
            w.writerows(zip(map(repr, map(float, c.strain)), map(repr, map(float, c.loading)),
                            map(repr, map(float, c.unloading))))
        report.files.append(path)
    return report


def format_table(report: CampaignReport) -> str:
    lines = [f"{'batch':>10} {'n':>4} {'min':>9} {'max':>9} {'mean':>9} {'median':>9}"]
    for r in report.table:
        lines.append(f"{r.label:>10} {r.n:>4} {r.min:9.2f} {r.max:9.2f} {r.mean:9.2f} {r.median:9.2f}")
    return "\n".join(lines)
