"""Campaign operations: initial batch, ingestion, retrain-and-propose, meshes, virtual runs."""
from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..acquisition import AcquisitionConfig, kappa_for_batch, sample_candidates, select_batch, write_proposal_csv
from ..curve_lab import (
    canonical_grid,
    parse_replicate_name,
    process_replicates,
    read_curve_csv,
    replicate_file_name,
    write_curve_csv,
)
from ..lattice_geometry import (
    LatticeSpec,
    extract_surface,
    filter_components,
    grid_validity,
    voxelize,
    write_stl,
)
from ..surrogate import EnsembleModel, TrainingSet, train_ensemble
from ..tpms_field import N_PRIMITIVES, TpmsField, unit_weights
from .state import Batch, CampaignConfig, CampaignError, CampaignState, Design, Measurement
from .virtual_lab import VirtualLab

log = logging.getLogger(__name__)


class SingleReplicateWarning(UserWarning):
    pass


def design_id(batch: int, k: int) -> str:
    return f"b{batch:02d}-{k:03d}"


def primitive_id(k: int) -> str:
    return f"prim-{k}"


def _derived_seed(seed: int, *keys) -> int:
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


def field_for(config: CampaignConfig, w) -> TpmsField:
    return TpmsField(w, config.thickness, config.wall_mode)


def design_validity(config: CampaignConfig, w, spec: LatticeSpec | None = None):
    """``(valid, reason)`` for one weight vector under the campaign's printability check."""
    spec = spec or config.validity_spec
    grid = voxelize(field_for(config, w), spec)
    valid, report = grid_validity(grid)
    if valid:
        return True, ""
    if report.empty:
        return False, "empty structure"
    if report.cavities:
        return False, f"{report.cavities} enclosed cavities"
    return False, f"only {report.retained_fraction:.1%} of the solid is connected"


# ---- batch 1 and external designs ------------------------------------------

def init_campaign(config: CampaignConfig = CampaignConfig(), seed: int = 0) -> CampaignState:
    """Campaign whose first batch is Dirichlet-uniform valid designs (no primitives)."""
    state = CampaignState(config, int(seed))
    rng_seed = _derived_seed(seed, 1, 0)
    designs, draws = [], 0
    rng = np.random.default_rng(rng_seed)
    while len(designs) < config.initial_batch_size:
        e = rng.standard_exponential(N_PRIMITIVES)
        w = e / e.sum()
        draws += 1
        if draws > 50 * config.initial_batch_size:
            raise CampaignError("could not find enough valid designs for the initial batch")
        ok, reason = design_validity(config, w)
        if not ok:
            log.debug("initial draw %d rejected: %s", draws, reason)
            continue
        designs.append(Design(design_id(1, len(designs) + 1), w, 1, rank=len(designs) + 1))
    state.batches.append(Batch(1, None, designs, pool_seed=rng_seed))
    state.version += 1
    return state


def add_primitives(state: CampaignState) -> CampaignState:
    """Register the eight pure primitives as external (baseline) designs."""
    have = {d.design_id for d in state.externals}
    for k in range(1, N_PRIMITIVES + 1):
        if primitive_id(k) not in have:
            state.externals.append(Design(primitive_id(k), unit_weights(k), 0, external=True))
    state.version += 1
    return state


def record_batch(state: CampaignState, weights, kappa=None) -> Batch:
    """Append a batch of externally chosen designs (e.g. replaying a published campaign)."""
    index = state.next_index
    designs = [Design(design_id(index, k), w, index, rank=k) for k, w in enumerate(weights, start=1)]
    batch = Batch(index, kappa, designs)
    state.batches.append(batch)
    state.version += 1
    return batch


# ---- ingestion ---------------------------------------------------------------

def _store(state: CampaignState, did: str, curves, sources) -> bool:
    _, canonical, dissipation = process_replicates(curves)
    m = Measurement(did, canonical, float(dissipation), len(curves), sorted(sources))
    old = state.measurements.get(did)
    if old is not None:
        if old == m:
            return False
        raise CampaignError(f"{did} already has a different measurement; history is append-only")
    if m.single_replicate:
        warnings.warn(f"{did}: only one replicate; accepted and flagged", SingleReplicateWarning)
    state.measurements[did] = m
    return True


def ingest_curves(state: CampaignState, replicates: dict, sources=None) -> CampaignState:
    """Ingest ``{design_id: [StressStrainCurve, ...]}`` already in memory."""
    known = {d.design_id for d in state.all_designs()}
    unknown = sorted(set(replicates) - known)
    if unknown:
        raise CampaignError(f"unknown design ids: {unknown}")
    changed = False
    for did in sorted(replicates):
        names = (sources or {}).get(did) or [f"replicate {i}" for i in range(1, len(replicates[did]) + 1)]
        changed |= _store(state, did, replicates[did], names)
    if changed:
        state.version += 1
    return state


def ingest_results(state: CampaignState, files) -> CampaignState:
    """Read ``<design>_rep<k>.csv`` files, group by design, and store processed curves.

    Re-ingesting identical files leaves the state unchanged.
    """
    grouped, names = defaultdict(list), defaultdict(list)
    for path in sorted(Path(p) for p in files):
        did, rep = parse_replicate_name(path)
        grouped[did].append((rep, read_curve_csv(path)))
        names[did].append(path.name)
    replicates = {did: [c for _, c in sorted(items, key=lambda t: t[0])] for did, items in grouped.items()}
    return ingest_curves(state, replicates, names)


# ---- retrain and propose -----------------------------------------------------

def training_set(state: CampaignState) -> TrainingSet:
    measured = state.measured()
    if not measured:
        raise CampaignError("no measurements to train on; ingest results first")
    return TrainingSet([d.weights for d in measured], [state.measurements[d.design_id].curve for d in measured])


def fit_surrogate(state: CampaignState, seed: int) -> EnsembleModel:
    cfg = state.config
    data = training_set(state)
    try:
        return train_ensemble(data, cfg.n_members, cfg.mlp, cfg.train, seed=seed, stride=cfg.stride,
                              n_jobs=cfg.n_jobs)
    except Exception as exc:  # surface which data the failure came from
        raise CampaignError(f"ensemble training failed on {len(data)} designs (seed {seed}): {exc}") from exc


def propose_next_batch(state: CampaignState, workdir=None, seed=None, kappa_override=None, pool_size=None,
                       batch_size=None):
    """Retrain on all measurements and append a ranked, printable, spread-out batch.

    Returns ``(state, proposal_path)``; the path is None without a ``workdir``.
    """
    cfg = state.config
    if not state.measurements:
        raise CampaignError("propose needs at least one measured batch")
    index = state.next_index
    seed = state.seed if seed is None else int(seed)
    kappa = kappa_for_batch(index) if kappa_override is None else float(kappa_override)
    if kappa is None:
        kappa = 0.0
    model = fit_surrogate(state, _derived_seed(seed, index, 2))
    pool_seed = _derived_seed(seed, index, 1)
    pool = sample_candidates(int(pool_size or cfg.pool_size), pool_seed)
    grid = canonical_grid(model.inference_eps_max, cfg.dissipation_points)
    acq = AcquisitionConfig(kappa, cfg.radius, int(batch_size or cfg.proposal_size), state.history_weights(cfg.exclusion),
                            cfg.use_std)

    def accept(i):
        ok, reason = design_validity(cfg, pool.candidates[i])
        if not ok:
            log.info("candidate %d skipped: %s", i, reason)
        return ok

    selection = select_batch(pool, model, acq, accept=accept, grid=grid)
    designs = [Design(design_id(index, k), w, index, rank=k, mu_d=float(mu), sigma2_d=float(var), ucb=float(s))
               for k, (w, mu, var, s) in enumerate(zip(selection.weights, selection.mu, selection.var,
                                                        selection.scores), start=1)]
    batch = Batch(index, kappa, designs, pool_seed=pool_seed, partial=selection.partial)
    proposal = None
    if workdir is not None:
        workdir = Path(workdir)
        (workdir / "models").mkdir(parents=True, exist_ok=True)
        rel = f"models/model_b{index:02d}.npz"
        model.save(workdir / rel)
        batch.model = rel
        proposal = write_proposal_csv(workdir / f"proposal_b{index:02d}.csv", [d.design_id for d in designs],
                                      selection)
    state.batches.append(batch)
    state.version += 1
    log.info("batch %d: kappa=%g, %d designs, %d rejected as unprintable", index, kappa, len(designs),
             len(selection.rejected))
    return state, proposal


# ---- meshes ------------------------------------------------------------------

def export_batch_meshes(state: CampaignState, index: int, directory, spec: LatticeSpec = LatticeSpec()):
    """One binary STL per printable design of batch ``index``, named by design id.

    Returns ``(written_paths, skipped)`` with ``skipped`` a list of ``(design_id, reason)``.
    """
    batch = state.batch(index)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written, skipped = [], []
    for d in batch.designs:
        grid = voxelize(field_for(state.config, d.weights), spec)
        valid, report = grid_validity(grid)
        if not valid:
            reason = "empty" if report.empty else f"{report.cavities} cavities, " \
                                                  f"{report.retained_fraction:.1%} connected"
            log.warning("skipping %s: %s", d.design_id, reason)
            skipped.append((d.design_id, reason))
            continue
        filtered, _ = filter_components(grid)
        written.append(write_stl(extract_surface(filtered, spec), directory / f"{d.design_id}.stl"))
    return written, skipped


# ---- virtual campaigns ---------------------------------------------------------

def measure_virtually(state: CampaignState, lab: VirtualLab, designs, directory=None) -> CampaignState:
    """Run the virtual lab on ``designs``; replicate CSVs go to ``directory`` when given."""
    if directory is None:
        curves = {d.design_id: lab.measure(d.design_id, d.weights) for d in designs}
        names = {did: [replicate_file_name(did, rep) for rep in range(1, len(c) + 1)] for did, c in curves.items()}
        return ingest_curves(state, curves, sources=names)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for d in designs:
        for rep, curve in enumerate(lab.measure(d.design_id, d.weights), start=1):
            files.append(write_curve_csv(curve, directory / replicate_file_name(d.design_id, rep)))
    return ingest_results(state, files)


def run_virtual_campaign(config: CampaignConfig = CampaignConfig(), seed: int = 0, workdir=None,
                         lab: VirtualLab | None = None, progress=None):
    """Closed loop against a `VirtualLab`: init, then measure, ingest and propose until done.

    Each proposed batch is "fabricated" by measuring its top ``fabricate_size``
    designs.  Returns ``(state, report)``.
    """
    from .report import build_report

    lab = lab or VirtualLab(seed=seed, noise=config.lab_noise, replicates=config.lab_replicates)
    workdir = Path(workdir) if workdir is not None else None
    state = init_campaign(config, seed)
    if config.include_primitives:
        add_primitives(state)
        measure_virtually(state, lab, state.externals, workdir and workdir / "measurements" / "b00")
    for index in range(1, config.n_batches + 1):
        if index > 1:
            propose_next_batch(state, workdir)
        batch = state.batch(index)
        chosen = batch.designs if index == 1 else batch.designs[:config.fabricate_size]
        measure_virtually(state, lab, chosen, workdir and workdir / "measurements" / f"b{index:02d}")
        if workdir is not None:
            state.save(workdir)
        if progress is not None:
            progress(state, index)
    return state, build_report(state)
