"""Campaign configuration and persistent state (JSON with a schema version)."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..acquisition import DEFAULT_BATCH_SIZE, DEFAULT_POOL_SIZE, DEFAULT_RADIUS, FAST_POOL_SIZE
from ..curve_lab import CanonicalCurve
from ..lattice_geometry import LatticeSpec
from ..surrogate import MlpSpec, TrainConfig
from ..tpms_field import N_PRIMITIVES, check_weights

SCHEMA_VERSION = 1
STATE_FILE = "state.json"


class CampaignError(RuntimeError):
    pass


class SchemaVersionError(CampaignError):
    pass


@dataclass(frozen=True)
class CampaignConfig:
    initial_batch_size: int = 23
    proposal_size: int = DEFAULT_BATCH_SIZE
    fabricate_size: int = 25
    n_batches: int = 10
    pool_size: int = DEFAULT_POOL_SIZE
    radius: float = DEFAULT_RADIUS
    use_std: bool = True
    exclusion: str = "measured"  # or "proposed": which earlier designs block new picks
    n_members: int = 30
    mlp: MlpSpec = MlpSpec()
    train: TrainConfig = TrainConfig()
    stride: int = 1  # keep every k-th canonical strain point when training
    dissipation_points: int = 120  # strain grid used to score candidates
    thickness: float = 0.5
    wall_mode: str = "normalized"
    validity_tiling: tuple = (2, 2, 2)
    validity_resolution: int = 48
    include_primitives: bool = True  # virtual runs also measure the 8 primitives
    lab_noise: float = 0.02
    lab_replicates: int = 2
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("initial_batch_size", "proposal_size", "fabricate_size", "n_batches", "pool_size",
                     "stride", "dissipation_points"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.exclusion not in ("measured", "proposed"):
            raise ValueError(f"exclusion must be 'measured' or 'proposed', got {self.exclusion!r}")
        if self.n_members < 2:
            raise ValueError("the ensemble needs >= 2 members")
        object.__setattr__(self, "validity_tiling", tuple(int(t) for t in self.validity_tiling))

    @classmethod
    def fast(cls, **overrides):
        """Reduced settings that keep a ten-batch virtual run to a few minutes on one core."""
        base = dict(
            pool_size=FAST_POOL_SIZE,
            n_members=10,
            mlp=MlpSpec((32, 32), (16, 16), (32,), dropout=0.1),
            train=TrainConfig(max_epochs=60, patience=10, batch_size=512),
            stride=12,
            dissipation_points=24,
            validity_resolution=32,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def validity_spec(self) -> LatticeSpec:
        return LatticeSpec(self.validity_tiling, resolution=self.validity_resolution)

    def to_dict(self):
        d = asdict(self)
        d["mlp"] = self.mlp.to_dict()
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["mlp"] = MlpSpec.from_dict(d["mlp"])
        d["train"] = TrainConfig(**d["train"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise CampaignError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **changes):
        return replace(self, **changes)


def _floats(a):
    return [float(x) for x in np.asarray(a, dtype=float).ravel()]


def _opt(x):
    return None if x is None else float(x)


@dataclass(eq=False)
class Design:
    design_id: str
    weights: np.ndarray
    batch: int  # 0 for external designs
    rank: int | None = None
    mu_d: float | None = None
    sigma2_d: float | None = None
    ucb: float | None = None
    external: bool = False

    def __post_init__(self):
        self.weights = check_weights(self.weights)

    def to_dict(self):
        return {"design_id": self.design_id, "weights": _floats(self.weights), "batch": self.batch,
                "rank": self.rank, "mu_d": _opt(self.mu_d), "sigma2_d": _opt(self.sigma2_d),
                "ucb": _opt(self.ucb), "external": self.external}

    @classmethod
    def from_dict(cls, d):
        return cls(d["design_id"], np.array(d["weights"]), d["batch"], d["rank"], d["mu_d"], d["sigma2_d"],
                   d["ucb"], d["external"])

    def __eq__(self, other):
        return isinstance(other, Design) and self.to_dict() == other.to_dict()


@dataclass(eq=False)
class Measurement:
    design_id: str
    curve: CanonicalCurve
    dissipation: float  # kJ/m^3
    n_replicates: int
    sources: list = field(default_factory=list)

    @property
    def single_replicate(self) -> bool:
        return self.n_replicates < 2

    def to_dict(self):
        c = self.curve
        return {"design_id": self.design_id, "dissipation": float(self.dissipation),
                "n_replicates": self.n_replicates, "sources": list(self.sources),
                "strain": _floats(c.strain), "loading": _floats(c.loading), "unloading": _floats(c.unloading)}

    @classmethod
    def from_dict(cls, d):
        curve = CanonicalCurve(np.array(d["strain"]), np.array(d["loading"]), np.array(d["unloading"]))
        return cls(d["design_id"], curve, d["dissipation"], d["n_replicates"], list(d["sources"]))

    def __eq__(self, other):
        return isinstance(other, Measurement) and self.to_dict() == other.to_dict()


@dataclass(eq=False)
class Batch:
    index: int
    kappa: float | None  # None for the uniform first batch
    designs: list = field(default_factory=list)
    pool_seed: int | None = None
    model: str | None = None  # checkpoint used to rank this batch, relative to the state directory
    partial: bool = False

    def to_dict(self):
        return {"index": self.index, "kappa": _opt(self.kappa), "designs": [d.to_dict() for d in self.designs],
                "pool_seed": self.pool_seed, "model": self.model, "partial": self.partial}

    @classmethod
    def from_dict(cls, d):
        return cls(d["index"], d["kappa"], [Design.from_dict(x) for x in d["designs"]], d["pool_seed"],
                   d["model"], d["partial"])

    def __eq__(self, other):
        return isinstance(other, Batch) and self.to_dict() == other.to_dict()


@dataclass(eq=False)
class CampaignState:
    config: CampaignConfig
    seed: int
    batches: list = field(default_factory=list)
    externals: list = field(default_factory=list)
    measurements: dict = field(default_factory=dict)  # design_id -> Measurement
    version: int = 0
    schema_version: int = SCHEMA_VERSION

    # ---- queries -------------------------------------------------------------

    @property
    def next_index(self) -> int:
        return len(self.batches) + 1

    def batch(self, index: int) -> Batch:
        if not 1 <= index <= len(self.batches):
            raise CampaignError(f"no batch {index}; the campaign has {len(self.batches)}")
        return self.batches[index - 1]

    def all_designs(self):
        out = list(self.externals)
        for b in self.batches:
            out.extend(b.designs)
        return out

    def design(self, design_id: str) -> Design:
        for d in self.all_designs():
            if d.design_id == design_id:
                return d
        raise CampaignError(f"unknown design id {design_id!r}")

    def measured(self, batch=None):
        """Measured designs, optionally restricted to one batch index (0 = external)."""
        return [d for d in self.all_designs()
                if d.design_id in self.measurements and (batch is None or d.batch == batch)]

    def batch_dissipations(self, index: int) -> np.ndarray:
        return np.array([self.measurements[d.design_id].dissipation for d in self.measured(index)])

    def history_weights(self, which: str = "measured") -> np.ndarray:
        """Weights of earlier batch designs that block new picks.

        ``"measured"`` keeps designs proposed in a batch and then measured;
        ``"proposed"`` keeps every proposed design.  External designs never block.
        """
        if which not in ("measured", "proposed"):
            raise ValueError(f"unknown exclusion set {which!r}")
        designs = [d for b in self.batches for d in b.designs
                   if which == "proposed" or d.design_id in self.measurements]
        if not designs:
            return np.empty((0, N_PRIMITIVES))
        return np.array([d.weights for d in designs])

    def check(self):
        for i, b in enumerate(self.batches, start=1):
            if b.index != i:
                raise CampaignError(f"batch indices must be contiguous from 1; found {b.index} at position {i}")
        ids = [d.design_id for d in self.all_designs()]
        if len(ids) != len(set(ids)):
            raise CampaignError("duplicate design ids")
        for e in self.externals:
            if not e.external or e.batch != 0:
                raise CampaignError(f"external design {e.design_id} must be flagged external with batch 0")
        missing = set(self.measurements) - set(ids)
        if missing:
            raise CampaignError(f"measurements without a design: {sorted(missing)}")

    # ---- persistence ---------------------------------------------------------

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "version": self.version,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "externals": [d.to_dict() for d in self.externals],
            "batches": [b.to_dict() for b in self.batches],
            "measurements": [self.measurements[k].to_dict() for k in sorted(self.measurements)],
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("schema_version")
        if not isinstance(version, int):
            raise SchemaVersionError("state file has no schema_version")
        if version > SCHEMA_VERSION:
            raise SchemaVersionError(f"state schema {version} is newer than supported ({SCHEMA_VERSION}); "
                                     "upgrade the package")
        state = cls(CampaignConfig.from_dict(d["config"]), d["seed"],
                    [Batch.from_dict(b) for b in d["batches"]],
                    [Design.from_dict(e) for e in d["externals"]],
                    {m["design_id"]: Measurement.from_dict(m) for m in d["measurements"]},
                    d["version"], version)
        state.check()
        return state

    def __eq__(self, other):
        return isinstance(other, CampaignState) and self.to_dict() == other.to_dict()

    def save(self, path) -> Path:
        """Atomically write the state as JSON; a directory gets ``state.json`` inside it."""
        path = state_path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path):
        path = state_path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise CampaignError(f"no campaign state at {path}; run `init` first") from None
        except json.JSONDecodeError as exc:
            raise CampaignError(f"{path}: corrupt state file ({exc})") from exc
        return cls.from_dict(data)


def state_path(path) -> Path:
    path = Path(path)
    if path.suffix != ".json":
        path = path / STATE_FILE
    return path
