import json

import numpy as np
import pytest

from tpms_discovery.acquisition import read_proposal_csv
from tpms_discovery.campaign import (
    CampaignConfig,
    CampaignError,
    CampaignState,
    SchemaVersionError,
    SingleReplicateWarning,
    VirtualLab,
    add_primitives,
    build_report,
    design_validity,
    export_batch_meshes,
    ingest_curves,
    ingest_results,
    init_campaign,
    measure_virtually,
    principal_components,
    propose_next_batch,
    record_batch,
    run_virtual_campaign,
    write_report,
)
from tpms_discovery.cli import ENV_STATE_DIR, main
from tpms_discovery.curve_lab import (
    CurveError,
    StressStrainCurve,
    energy_dissipation,
    process_replicates,
    replicate_file_name,
    write_curve_csv,
)
from tpms_discovery.lattice_geometry import LatticeSpec, extract_surface, write_stl
from tpms_discovery.surrogate import MlpSpec, TrainConfig
from tpms_discovery.tpms_field import TpmsField, unit_weights

TINY = CampaignConfig.fast(
    pool_size=3000, n_members=3, mlp=MlpSpec((8,), (8,), (8,)),
    train=TrainConfig(max_epochs=5, patience=3, batch_size=512),
    initial_batch_size=6, proposal_size=8, fabricate_size=5, n_batches=3,
)


def triangle_loop(n=201):
    load_s = np.linspace(0, 0.5, n)
    unload_s = np.linspace(0.5, 0.0, n)
    return StressStrainCurve.from_branches(load_s, 2 * load_s, unload_s, np.clip((unload_s - 0.25) * 4.0, 0, None))


@pytest.fixture(scope="module")
def measured_state():
    state = init_campaign(TINY, seed=3)
    measure_virtually(state, VirtualLab(seed=3), state.batch(1).designs)
    return state


def clone(state):
    return CampaignState.from_dict(json.loads(json.dumps(state.to_dict())))


# ---- virtual lab ---------------------------------------------------------------

def test_lab_ground_truth_invariants():
    lab = VirtualLab(seed=1)
    for w in np.random.default_rng(0).dirichlet(np.ones(8), 20):
        c = lab.true_curve(w, 0.58)
        s, load = c.loading
        assert np.all(load >= 0) and np.all(np.diff(load) >= 0)
        s_u, unload = c.unloading
        np.testing.assert_array_less(unload[::-1], load + 1e-15)
        np.testing.assert_array_equal(s_u[::-1], s)


def test_lab_closed_form_dissipation():
    lab = VirtualLab(seed=2)
    w = np.random.default_rng(1).dirichlet(np.ones(8))
    dense = energy_dissipation(lab.true_curve(w, 0.57, n=20001))
    assert dense == pytest.approx(lab.true_dissipation(w, 0.57)[0], rel=1e-6)


def test_lab_is_deterministic_per_seed():
    w = np.full(8, 1 / 8)
    a = VirtualLab(seed=4).measure("b01-001", w)
    b = VirtualLab(seed=4).measure("b01-001", w)
    c = VirtualLab(seed=5).measure("b01-001", w)
    d = VirtualLab(seed=4).measure("b01-002", w)
    assert a == b
    assert a != c and a != d
    assert len(a) == 2


def test_lab_landscape_rewards_concentrated_designs():
    lab = VirtualLab(seed=0)
    W = np.random.default_rng(2).dirichlet(np.ones(8), 5000)
    D = lab.true_dissipation(W)
    assert np.all(D > 0)
    assert lab.true_dissipation(np.eye(8)).mean() > 3 * D.mean()


# ---- config and state ----------------------------------------------------------

def test_config_roundtrip_and_validation():
    assert CampaignConfig.from_dict(TINY.to_dict()) == TINY
    assert CampaignConfig.from_dict(json.loads(json.dumps(CampaignConfig().to_dict()))) == CampaignConfig()
    with pytest.raises(ValueError):
        CampaignConfig(exclusion="nearby")
    with pytest.raises(ValueError):
        CampaignConfig(n_members=1)
    with pytest.raises(CampaignError):
        CampaignConfig.from_dict({**TINY.to_dict(), "mystery": 1})


def test_state_roundtrip(tmp_path, measured_state):
    path = measured_state.save(tmp_path)
    assert path.name == "state.json"
    back = CampaignState.load(tmp_path)
    assert back == measured_state
    assert back.seed == 3 and back.version == measured_state.version


def test_state_rejects_newer_schema(tmp_path, measured_state):
    d = measured_state.to_dict()
    d["schema_version"] = 99
    (tmp_path / "state.json").write_text(json.dumps(d))
    with pytest.raises(SchemaVersionError, match="newer"):
        CampaignState.load(tmp_path)


def test_state_errors(tmp_path, measured_state):
    with pytest.raises(CampaignError, match="init"):
        CampaignState.load(tmp_path / "missing")
    (tmp_path / "state.json").write_text("{not json")
    with pytest.raises(CampaignError, match="corrupt"):
        CampaignState.load(tmp_path)
    d = measured_state.to_dict()
    d["batches"][0]["index"] = 2
    with pytest.raises(CampaignError, match="contiguous"):
        CampaignState.from_dict(d)


# ---- initial batch ---------------------------------------------------------------

def test_default_initial_batch():
    state = init_campaign(CampaignConfig(), seed=0)
    designs = state.batch(1).designs
    assert len(designs) == 23 and not state.measurements
    assert state.batch(1).kappa is None
    assert [d.design_id for d in designs[:2]] == ["b01-001", "b01-002"]
    W = np.array([d.weights for d in designs])
    assert W.max() < 1.0  # no primitives
    assert all(design_validity(CampaignConfig(), w)[0] for w in W)


def test_initial_batch_deterministic_and_sized():
    a = init_campaign(TINY, seed=8)
    assert a == init_campaign(TINY, seed=8)
    assert a != init_campaign(TINY, seed=9)
    assert len(init_campaign(TINY.with_(initial_batch_size=5), seed=8).batch(1).designs) == 5


# ---- ingestion -------------------------------------------------------------------

def write_replicates(directory, did, curves):
    return [write_curve_csv(c, directory / replicate_file_name(did, k)) for k, c in enumerate(curves, start=1)]


def test_ingest_identical_replicates(tmp_path):
    state = init_campaign(TINY, seed=1)
    curve = VirtualLab(seed=1).measure("b01-001", state.batch(1).designs[0].weights)[0]
    files = write_replicates(tmp_path, "b01-001", [curve, curve])
    ingest_results(state, files)
    m = state.measurements["b01-001"]
    _, canon, d = process_replicates([curve])
    assert m.curve == canon and m.dissipation == d
    assert m.n_replicates == 2 and not m.single_replicate
    assert m.sources == ["b01-001_rep1.csv", "b01-001_rep2.csv"]


def test_ingest_triangle_loop(tmp_path):
    state = init_campaign(TINY, seed=1)
    ingest_results(state, write_replicates(tmp_path, "b01-002", [triangle_loop(), triangle_loop()]))
    assert state.measurements["b01-002"].dissipation == pytest.approx(125.0, rel=1e-3)


def test_reingest_is_idempotent(tmp_path):
    state = init_campaign(TINY, seed=1)
    lab = VirtualLab(seed=1)
    files = []
    for d in state.batch(1).designs[:3]:
        files += write_replicates(tmp_path, d.design_id, lab.measure(d.design_id, d.weights))
    ingest_results(state, files)
    snapshot = clone(state)
    ingest_results(state, files)
    assert state == snapshot


def test_ingest_errors(tmp_path):
    state = init_campaign(TINY, seed=1)
    with pytest.raises(CampaignError, match="unknown"):
        ingest_results(state, write_replicates(tmp_path, "b09-001", [triangle_loop()]))
    bad = tmp_path / "b01-001_rep1.csv"
    bad.write_text("strain,stress_mpa,phase\n0,zero,load\n")
    with pytest.raises(CurveError):
        ingest_results(state, [bad])
    ingest_results(state, write_replicates(tmp_path, "b01-003", [triangle_loop(), triangle_loop()]))
    other = triangle_loop(101)
    with pytest.raises(CampaignError, match="append-only"):
        ingest_curves(state, {"b01-003": [other, other]})


def test_single_replicate_is_flagged(tmp_path):
    state = init_campaign(TINY, seed=1)
    with pytest.warns(SingleReplicateWarning):
        ingest_results(state, write_replicates(tmp_path, "b01-004", [triangle_loop()]))
    assert state.measurements["b01-004"].single_replicate


def test_external_designs():
    state = add_primitives(init_campaign(TINY, seed=1))
    assert [d.design_id for d in state.externals] == [f"prim-{k}" for k in range(1, 9)]
    assert all(d.external and d.batch == 0 for d in state.externals)
    np.testing.assert_array_equal(state.design("prim-6").weights, unit_weights(6))


# ---- proposals -------------------------------------------------------------------

def test_propose_requires_measurements():
    with pytest.raises(CampaignError):
        propose_next_batch(init_campaign(TINY, seed=1))


def test_propose_batch(tmp_path, measured_state):
    state = clone(measured_state)
    before = [m.to_dict() for m in state.measurements.values()]
    state, path = propose_next_batch(state, tmp_path)
    b = state.batch(2)
    assert b.kappa == 2.0
    assert len(b.designs) == TINY.proposal_size
    assert [d.design_id for d in b.designs][:2] == ["b02-001", "b02-002"]
    assert (tmp_path / b.model).exists()
    rows = read_proposal_csv(path)
    assert [r["design_id"] for r in rows] == [d.design_id for d in b.designs]
    W = np.array([d.weights for d in b.designs])
    hist = state.history_weights("measured")
    assert np.sqrt(((W[:, None] - hist[None]) ** 2).sum(-1)).min() >= TINY.radius
    d = np.sqrt(((W[:, None] - W[None]) ** 2).sum(-1))
    assert d[np.triu_indices(len(W), 1)].min() >= TINY.radius
    assert all(design_validity(TINY, w)[0] for w in W)
    scores = [x.ucb for x in b.designs]
    assert scores == sorted(scores, reverse=True)
    assert [m.to_dict() for m in state.measurements.values()] == before


def test_propose_with_overrides(measured_state):
    state, path = propose_next_batch(clone(measured_state), kappa_override=0.25, batch_size=3, pool_size=500)
    assert path is None
    assert state.batch(2).kappa == 0.25 and len(state.batch(2).designs) == 3


def test_proposed_exclusion_blocks_unmeasured(measured_state):
    state = clone(measured_state)
    state.config = state.config.with_(exclusion="proposed")
    state, _ = propose_next_batch(state)
    state, _ = propose_next_batch(state)  # batch 2 unmeasured, still excluded
    W2 = np.array([d.weights for d in state.batch(2).designs])
    W3 = np.array([d.weights for d in state.batch(3).designs])
    assert np.sqrt(((W3[:, None] - W2[None]) ** 2).sum(-1)).min() >= TINY.radius
    assert state.batch(3).kappa == 2.0


def test_repropose_from_loaded_state_is_identical(tmp_path, measured_state):
    measured_state.save(tmp_path / "a")
    measured_state.save(tmp_path / "b")
    _, pa = propose_next_batch(CampaignState.load(tmp_path / "a"), tmp_path / "a")
    _, pb = propose_next_batch(CampaignState.load(tmp_path / "b"), tmp_path / "b")
    assert pa.read_bytes() == pb.read_bytes()


# ---- reports ---------------------------------------------------------------------

def test_report_table_and_files(tmp_path, measured_state):
    state = add_primitives(clone(measured_state))
    measure_virtually(state, VirtualLab(seed=3), state.externals)
    report = write_report(state, tmp_path)
    labels = [r.label for r in report.table]
    assert labels == ["primitives", "1"]
    for r in report.table:
        assert r.min <= r.median <= r.max
    assert report.row("primitives").n == 8
    assert (tmp_path / "dissipation_by_batch.csv").exists()
    assert (tmp_path / "curves" / "b01-001.csv").exists()
    pca = (tmp_path / "pca.csv").read_text().splitlines()
    assert len(pca) == 1 + len(state.measurements)
    p = report.projection
    np.testing.assert_allclose(p.components @ p.components.T, np.eye(2), atol=1e-12)


def test_pca_hand_computed():
    # three points on the line through (1,0,..) and (0,1,..): the first axis is (1,-1)/sqrt(2)
    X = np.zeros((3, 8))
    X[:, 0] = [1.0, 0.5, 0.0]
    X[:, 1] = [0.0, 0.5, 1.0]
    coords, comps, vals = principal_components(X)
    np.testing.assert_allclose(np.abs(comps[0]), np.r_[1, 1, 0, 0, 0, 0, 0, 0] / np.sqrt(2), atol=1e-12)
    assert vals[0] == pytest.approx(0.5)  # variance of x0 - x1 spread: 2 * 0.25
    assert vals[1] == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(np.abs(coords[:, 0]), [np.sqrt(0.5), 0.0, np.sqrt(0.5)], atol=1e-12)


def test_pca_degenerate_inputs():
    coords, comps, vals = principal_components(np.full((4, 8), 1 / 8))
    assert np.all(coords == 0) and np.all(vals == 0)
    coords, _, _ = principal_components(np.full((1, 8), 1 / 8))
    assert coords.shape == (1, 2)


# ---- meshes ----------------------------------------------------------------------

def find_invalid(spec, config):
    rng = np.random.default_rng(0)
    for _ in range(200):
        w = rng.dirichlet(np.ones(8))
        if not design_validity(config, w, spec)[0]:
            return w
    raise AssertionError("no invalid design found")


def test_export_batch_meshes(tmp_path):
    spec = LatticeSpec((1, 1, 1), resolution=24)
    state = init_campaign(TINY, seed=1)
    bad = find_invalid(spec, TINY)
    record_batch(state, [unit_weights(2), unit_weights(1), bad])
    written, skipped = export_batch_meshes(state, 2, tmp_path / "out", spec)
    assert [p.name for p in written] == ["b02-001.stl", "b02-002.stl"]
    assert [s[0] for s in skipped] == ["b02-003"]
    direct = write_stl(extract_surface(TpmsField(unit_weights(2)), spec), tmp_path / "direct.stl")
    assert written[0].read_bytes() == direct.read_bytes()
    with pytest.raises(CampaignError):
        export_batch_meshes(state, 7, tmp_path, spec)


# ---- closed loop -------------------------------------------------------------------

def test_virtual_campaign_small(tmp_path):
    state, report = run_virtual_campaign(TINY, seed=5, workdir=tmp_path)
    assert [r.label for r in report.table] == ["primitives", "1", "2", "3"]
    assert report.row(1).mean > 0
    assert report.row(1).n == TINY.initial_batch_size and report.row(3).n == TINY.fabricate_size
    for r in report.table:
        assert r.min <= r.median <= r.max
    assert [b.kappa for b in state.batches] == [None, 2.0, 2.0]
    assert CampaignState.load(tmp_path) == state
    again, report2 = run_virtual_campaign(TINY, seed=5)
    assert report2.to_dict() == report.to_dict()
    # only the checkpoint path depends on whether a workdir was given
    strip = lambda st: [{**b, "model": None} for b in st.to_dict()["batches"]]
    assert strip(again) == strip(state)
    assert {**again.to_dict(), "batches": None} == {**state.to_dict(), "batches": None}


# ---- CLI ---------------------------------------------------------------------------

def test_cli_round_trip(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(ENV_STATE_DIR, str(tmp_path / "camp"))
    assert main(["init", "--fast", "--seed", "2", "--initial-size", "5", "--pool-size", "2000"]) == 0
    state = CampaignState.load(tmp_path / "camp")
    assert len(state.batch(1).designs) == 5 and state.config.pool_size == 2000
    assert main(["init"]) == 1  # refuses to overwrite
    lab = VirtualLab(seed=2)
    files = []
    for d in state.batch(1).designs:
        files += write_replicates(tmp_path, d.design_id, lab.measure(d.design_id, d.weights))
    assert main(["ingest", *map(str, files)]) == 0
    assert main(["propose", "--kappa-override", "0.5", "--batch-size", "4"]) == 0
    state = CampaignState.load(tmp_path / "camp")
    assert state.batch(2).kappa == 0.5 and len(state.batch(2).designs) == 4
    assert (tmp_path / "camp" / "proposal_b02.csv").exists()
    assert main(["report"]) == 0
    assert "primitives" not in capsys.readouterr().out
    assert (tmp_path / "camp" / "report" / "pca.csv").exists()
    assert main(["export-meshes", "2", "--resolution", "12"]) == 0
    assert main(["propose", "--state", str(tmp_path / "nowhere")]) == 1
