import copy

import numpy as np
import pytest

from tpms_discovery.curve_lab import CanonicalCurve, canonical_grid, energy_dissipation
from tpms_discovery.surrogate import (
    EnsembleModel,
    MlpSpec,
    TrainConfig,
    TrainingDivergenceError,
    TrainingSet,
    backprop_gradient_check,
    predict_dissipation,
    predict_stress,
    train_ensemble,
    train_member,
)
from tpms_discovery.surrogate.ensemble import _sample_var
from tpms_discovery.surrogate.mlp import init_params, train_network

SMALL = MlpSpec((16, 16), (8, 8), (16,), dropout=0.1)
QUICK = TrainConfig(max_epochs=60, patience=10, batch_size=64)


def toy_data(n=12, seed=0, eps=0.55):
    rng = np.random.default_rng(seed)
    W = rng.dirichlet(np.ones(8), n)
    curves = []
    for w in W:
        g = canonical_grid(eps)
        load = (0.2 + 2 * w[5]) * g + 4 * w[7] * g**3
        curves.append(CanonicalCurve(g, load, (0.3 + 0.4 * w[0]) * load))
    return TrainingSet(list(W), curves)


def random_ensemble(n_members=4, spec=SMALL, seed=0):
    rng = np.random.default_rng(seed)
    members = []
    for _ in range(n_members):
        params, buffers = init_params(spec, rng)
        for k in buffers:
            buffers[k] = rng.uniform(0.5, 1.5, buffers[k].shape) if k.endswith(".var") \
                else rng.normal(0, 0.2, buffers[k].shape)
        members.append(_member(params, buffers))
    return EnsembleModel(spec, members, stress_mean=0.7, stress_std=1.3, inference_eps_max=0.58)


def _member(params, buffers):
    from tpms_discovery.surrogate.mlp import TrainedMember
    return TrainedMember(params, buffers, seed=0, epochs_run=0, best_epoch=0, best_val_loss=0.0)


def rows_for(W, strains, phase):
    xp = np.repeat(np.atleast_2d(W), len(strains), axis=0)
    xs = np.column_stack([np.tile(strains, len(np.atleast_2d(W))), np.full(xp.shape[0], phase)])
    return xp, xs


# ---- gradient checks -------------------------------------------------------

def batch(n=4, seed=0, zero=False):
    rng = np.random.default_rng(seed)
    if zero:
        return np.zeros((n, 8)), np.zeros((n, 2)), rng.normal(size=n)
    xp = rng.dirichlet(np.ones(8), n)
    xs = np.column_stack([rng.uniform(0, 0.6, n), rng.integers(0, 2, n)])
    return xp, xs, rng.normal(size=n)


def test_gradient_check_linear():
    linear = MlpSpec((), (), (), dropout=0.0, batch_norm=False)
    assert backprop_gradient_check(linear, *batch()) < 1e-8


@pytest.mark.parametrize("mode", ["inference", "train"])
def test_gradient_check_small_network(mode):
    assert backprop_gradient_check(SMALL, *batch(6, seed=1), mode=mode) < 1e-4


def test_gradient_check_zero_input():
    err = backprop_gradient_check(SMALL, *batch(zero=True))
    assert np.isfinite(err)


def test_gradient_check_without_batch_norm():
    spec = MlpSpec((8,), (8,), (8, 8), dropout=0.0, batch_norm=False)
    assert backprop_gradient_check(spec, *batch(5, seed=2)) < 1e-4


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec(dropout=1.0)
    with pytest.raises(ValueError):
        MlpSpec(activation="tanh")
    with pytest.raises(ValueError):
        MlpSpec(output_width=2)
    assert MlpSpec.from_dict(SMALL.to_dict()) == SMALL


# ---- training ------------------------------------------------------------

def test_constant_curve_is_learned():
    g = canonical_grid(0.55)
    data = TrainingSet([np.full(8, 1 / 8)], [CanonicalCurve(g, np.full(120, 2.0), np.full(120, 2.0))])
    model = train_ensemble(data, 2, SMALL, TrainConfig(max_epochs=400, patience=60, batch_size=64), seed=3)
    mu, _ = model.predict_stress(np.full(8, 1 / 8), g)
    np.testing.assert_allclose(mu, 2.0, rtol=0.05)


def test_training_recovers_signal():
    data = toy_data(20)
    member = train_member(SMALL, data, seed=1, config=TrainConfig(max_epochs=300, patience=30, batch_size=128))
    assert all(np.isfinite(t) and np.isfinite(v) for t, v in member.history)
    assert member.best_val_loss < 0.1  # standardized units


def test_different_seeds_differ_and_same_seed_repeats():
    data = toy_data(6)
    a = train_member(SMALL, data, seed=1, config=QUICK)
    b = train_member(SMALL, data, seed=2, config=QUICK)
    c = train_member(SMALL, data, seed=1, config=QUICK)
    assert not np.array_equal(a.flat_parameters(), b.flat_parameters())
    np.testing.assert_array_equal(a.flat_parameters(), c.flat_parameters())
    assert a.history == c.history


def test_early_stopping_restores_best():
    data = toy_data(6)
    m = train_member(SMALL, data, seed=4, config=TrainConfig(max_epochs=400, patience=5, batch_size=64))
    assert m.epochs_run < 400
    assert m.best_epoch == m.epochs_run - 5
    assert m.best_val_loss == min(v for _, v in m.history)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_with_seed():
    xp, xs, _ = batch(20)
    y = np.full(20, np.inf)
    with pytest.raises(TrainingDivergenceError, match="seed 11"):
        train_network(SMALL, xp, xs, y, seed=11, config=QUICK)


def test_training_set_validation():
    with pytest.raises(ValueError):
        TrainingSet([], [])
    with pytest.raises(TypeError):
        TrainingSet([np.full(8, 1 / 8)], ["not a curve"])


def test_rows_stride_keeps_endpoint():
    data = toy_data(2)
    xp, xs, y = data.rows(stride=7)
    per_branch = len(set(range(0, 120, 7)) | {119})
    assert len(y) == 2 * 2 * per_branch
    assert xs[per_branch - 1, 0] == data.curves[0].eps_max


# ---- ensemble statistics ---------------------------------------------------

def test_identical_members_have_zero_variance():
    base = random_ensemble(1 + 1).members[0]
    model = EnsembleModel(SMALL, [copy.deepcopy(base) for _ in range(5)], 0.0, 1.0)
    w = np.full(8, 1 / 8)
    _, var_s = model.predict_stress(w, canonical_grid(0.6))
    assert np.all(var_s == 0)
    mu_d, var_d = model.predict_dissipation(w)
    assert var_d == 0


def test_two_member_closed_form():
    model = random_ensemble(2)
    w = np.random.default_rng(0).dirichlet(np.ones(8))
    strains = np.linspace(0, 0.6, 17)
    a, b = model.member_curves(w, strains)[:, 0, :]
    mu, var = predict_stress(model, w, strains)
    np.testing.assert_allclose(mu, (a + b) / 2, rtol=1e-14)
    np.testing.assert_allclose(var, (a - b) ** 2 / 2, rtol=1e-12)


def test_sample_statistics_two_values():
    mu, var = _sample_var(np.array([[100.0], [200.0]]))
    assert mu[0] == 150.0 and var[0] == 5000.0


@pytest.mark.parametrize("phase", ["load", "unload"])
def test_fast_path_matches_per_row_forward(phase):
    model = random_ensemble(5, seed=3)
    rng = np.random.default_rng(4)
    W = rng.dirichlet(np.ones(8), 7)
    strains = np.linspace(0, 0.6, 13)
    fast = model.member_curves(W, strains, phase)
    xp, xs = rows_for(W, strains, 0.0 if phase == "load" else 1.0)
    brute = model.member_rows(xp, xs).reshape(5, 7, 13)
    np.testing.assert_allclose(fast, brute, rtol=1e-12, atol=1e-12)


def test_stress_statistics_match_brute_force():
    model = random_ensemble(6, seed=5)
    w = np.random.default_rng(6).dirichlet(np.ones(8))
    strains = np.linspace(0, 0.55, 120)
    xp, xs = rows_for(w, strains, 0.0)
    outs = model.member_rows(xp, xs)
    mu_ref = sum(outs) / len(outs)
    var_ref = sum((o - mu_ref) ** 2 for o in outs) / (len(outs) - 1)
    mu, var = model.predict_stress(w, strains)
    np.testing.assert_allclose(mu, mu_ref, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(var, var_ref, rtol=1e-10, atol=1e-12)


def test_dissipation_statistics_match_per_member_oracle():
    model = random_ensemble(6, seed=7)
    rng = np.random.default_rng(8)
    grid = canonical_grid(0.58)
    for w in rng.dirichlet(np.ones(8), 4):
        per_member = []
        for i in range(len(model)):
            load = model.member_rows(*rows_for(w, grid, 0.0))[i]
            unload = model.member_rows(*rows_for(w, grid, 1.0))[i]
            per_member.append(energy_dissipation(CanonicalCurve(grid, load, unload)))
        per_member = np.array(per_member)
        mu_ref = per_member.mean()
        var_ref = np.sum((per_member - mu_ref) ** 2) / (len(per_member) - 1)
        mu, var = predict_dissipation(model, w, grid)
        assert mu == pytest.approx(mu_ref, rel=1e-10, abs=1e-10)
        assert var == pytest.approx(var_ref, rel=1e-10, abs=1e-10)


def test_dissipation_spread_is_per_member():
    """Two members with crossing loops: the variance of D is not read off the stress spread."""
    model = random_ensemble(2, seed=9)
    w = np.full(8, 1 / 8)
    grid = model.default_grid
    D = model.member_dissipations(w, grid)[:, 0]
    mu_d, var_d = model.predict_dissipation(w, grid)
    assert var_d == pytest.approx((D[0] - D[1]) ** 2 / 2, rel=1e-12)
    # plugging the stress variance into the area functional gives a different number
    _, var_load = model.predict_stress(w, grid, "load")
    _, var_unload = model.predict_stress(w, grid, "unload")
    naive = energy_dissipation(CanonicalCurve(grid, var_load, var_unload))
    assert not np.isclose(naive, var_d, rtol=1e-3)
    # the area functional is linear, so the mean commutes with it
    mu_load, _ = model.predict_stress(w, grid, "load")
    mu_unload, _ = model.predict_stress(w, grid, "unload")
    assert mu_d == pytest.approx(energy_dissipation(CanonicalCurve(grid, mu_load, mu_unload)), rel=1e-10)


def test_variances_nonnegative_and_inference_deterministic():
    model = random_ensemble(4, seed=10)
    W = np.random.default_rng(1).dirichlet(np.ones(8), 50)
    mu1, var1 = model.dissipation_stats(W)
    mu2, var2 = model.dissipation_stats(W)
    assert np.all(var1 >= 0)
    np.testing.assert_array_equal(mu1, mu2)
    np.testing.assert_array_equal(var1, var2)
    _, vs = model.predict_stress(W[0], np.linspace(0, 0.6, 30))
    assert np.all(vs >= 0)


def test_ensemble_requires_two_members():
    with pytest.raises(ValueError):
        EnsembleModel(SMALL, random_ensemble(2).members[:1], 0.0, 1.0)


def test_checkpoint_roundtrip(tmp_path):
    model = random_ensemble(3, seed=11)
    model.metadata = {"note": "x"}
    path = model.save(tmp_path / "model.npz")
    back = EnsembleModel.load(path)
    W = np.random.default_rng(2).dirichlet(np.ones(8), 5)
    np.testing.assert_array_equal(back.member_dissipations(W), model.member_dissipations(W))
    assert back.spec == model.spec and back.metadata == {"note": "x"}


def test_checkpoint_rejects_newer_version(tmp_path):
    import json
    model = random_ensemble(2)
    path = model.save(tmp_path / "m.npz")
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(bytes(arrays["__meta__"]).decode())
    meta["version"] = 99
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    with pytest.raises(ValueError, match="newer"):
        EnsembleModel.load(path)


def test_uncertainty_grows_away_from_data():
    """Designs on the P-gyroid edge are seen in training; the far corners are not."""
    spec = MlpSpec((16, 16), (8,), (16,), dropout=0.1)
    config = TrainConfig(max_epochs=150, patience=20, batch_size=128)
    g = canonical_grid(0.55)
    wins = 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        t = rng.uniform(0, 1, 10)
        W = np.zeros((10, 8))
        W[:, 0], W[:, 1] = t, 1 - t
        curves = [CanonicalCurve(g, (0.5 + tt) * g + 2 * g**3, 0.5 * ((0.5 + tt) * g + 2 * g**3)) for tt in t]
        model = train_ensemble(TrainingSet(list(W), curves), 5, spec, config, seed=seed, stride=6)
        s = rng.uniform(0, 1, 30)
        near = np.zeros((30, 8))
        near[:, 0], near[:, 1] = s, 1 - s
        far = np.zeros((30, 8))
        far[:, 5], far[:, 7] = s, 1 - s
        _, var_near = model.dissipation_stats(near)
        _, var_far = model.dissipation_stats(far)
        wins += np.median(var_far) > np.median(var_near)
    assert wins == 5
