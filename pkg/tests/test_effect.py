import numpy as np
import pytest

from prevcare.effect import (CausalForest, CausalForestParams, EffectSpec, effect_at, estimate_cate,
                             fit_causal_forest, fit_causal_forest_arrays, perturb_effects)
from prevcare.learners.serialize import dump_model, load_model
from prevcare.cohort import GenConfig, generate_synthetic_cohort


def _data(n, tau, seed, p0=0.5, d=3):
    r = np.random.default_rng(seed)
    X = r.random((n, d))
    t = (r.random(n) < 0.5).astype(int)
    eff = tau(X) if callable(tau) else np.full(n, tau)
    p = p0 - t * eff
    y = (r.random(n) < p).astype(int)
    return X, t, y, eff


SMALL = CausalForestParams(n_estimators=20, max_features=None, max_depth=4, min_samples_leaf=100)


def test_constant_effect_recovered():
    X, t, y, _ = _data(20_000, 0.3, 0)
    f = fit_causal_forest_arrays(X, t, y, SMALL, seed=0)
    est = estimate_cate(f, X)
    assert abs(est.mean() - 0.3) < 0.03


def test_null_effect():
    X, t, y, _ = _data(20_000, 0.0, 1)
    raw = estimate_cate(fit_causal_forest_arrays(X, t, y, SMALL, seed=0), X, clip=False)
    assert abs(raw.mean()) < 0.03


def test_heterogeneous_groups_separate():
    X, t, y, _ = _data(20_000, lambda X: np.where(X[:, 0] > 0.5, 0.4, 0.1), 2)
    est = estimate_cate(fit_causal_forest_arrays(X, t, y, SMALL, seed=0), X)
    hi, lo = est[X[:, 0] > 0.5].mean(), est[X[:, 0] <= 0.5].mean()
    assert hi - lo > 0.15
    assert abs(hi - 0.4) < 0.08 and abs(lo - 0.1) < 0.08


def test_honest_leaf_values_use_estimation_sample_only():
    X, t, y, _ = _data(4000, 0.2, 3)
    p = CausalForestParams(n_estimators=1, max_features=None, max_depth=3, min_samples_leaf=100)
    f = fit_causal_forest_arrays(X, t, y, p, seed=5)
    s1, s2 = f.split_samples[0], f.estimation_samples[0]
    assert not set(s1) & set(s2)
    tree = f.trees[0]
    leaf = tree.apply(X[s2])
    for node in np.unique(leaf):
        m = leaf == node
        tt, yy = t[s2][m], y[s2][m]
        want = yy[tt == 0].mean() - yy[tt == 1].mean()
        assert tree.value[node] == pytest.approx(want, abs=1e-12)
        assert tt.sum() >= p.min_treated_per_leaf


def test_outcome_changes_outside_estimation_sample_do_not_move_leaves():
    X, t, y, _ = _data(3000, 0.2, 4)
    p = CausalForestParams(n_estimators=1, max_features=None, max_depth=1, min_samples_leaf=200)
    f = fit_causal_forest_arrays(X, t, y, p, seed=2)
    s2 = f.estimation_samples[0]
    unused = np.setdiff1d(np.arange(3000), np.r_[f.split_samples[0], s2])
    y2 = y.copy()
    y2[unused] = 1 - y2[unused]
    g = fit_causal_forest_arrays(X, t, y2, p, seed=2)
    assert np.array_equal(f.predict_raw(X), g.predict_raw(X))


def test_clipping():
    X, t, y, _ = _data(5000, -0.3, 5)  # treatment raises onset
    f = fit_causal_forest_arrays(X, t, y, SMALL, seed=0)
    raw = estimate_cate(f, X, clip=False)
    assert raw.mean() < -0.2
    assert np.all(estimate_cate(f, X) == 0.0)
    assert isinstance(estimate_cate(f, X[0]), float)


def test_rmse_shrinks_with_sample_size():
    tau = lambda X: 0.1 + 0.3 * X[:, 0]
    Xe = np.random.default_rng(99).random((2000, 3))
    errs = []
    for n in (2000, 40_000):
        X, t, y, _ = _data(n, tau, 6)
        p = CausalForestParams(n_estimators=20, max_features=None, max_depth=6,
                               min_samples_leaf=max(50, n // 200))
        est = estimate_cate(fit_causal_forest_arrays(X, t, y, p, seed=0), Xe, clip=False)
        errs.append(np.sqrt(np.mean((est - tau(Xe)) ** 2)))
    assert errs[1] < errs[0]


def test_permuted_treatment_destroys_effect():
    X, t, y, _ = _data(20_000, 0.3, 7)
    tp = np.random.default_rng(0).permutation(t)
    raw = estimate_cate(fit_causal_forest_arrays(X, tp, y, SMALL, seed=0), X, clip=False)
    assert abs(raw.mean()) < 0.04


def test_prediction_is_tree_average_in_any_order():
    X, t, y, _ = _data(3000, 0.2, 8)
    f = fit_causal_forest_arrays(X, t, y, SMALL, seed=3)
    g = CausalForest(f.trees[::-1], f.params, f.n_features)
    assert np.allclose(f.predict_raw(X), g.predict_raw(X), atol=1e-12)


def test_determinism_and_round_trip(tmp_path):
    X, t, y, _ = _data(3000, 0.2, 9)
    f = fit_causal_forest_arrays(X, t, y, SMALL, seed=11)
    g = fit_causal_forest_arrays(X, t, y, SMALL, seed=11)
    assert np.array_equal(f.predict_raw(X), g.predict_raw(X))
    path = tmp_path / "cf.json"
    dump_model(f, path)
    assert np.array_equal(load_model(path).predict_raw(X), f.predict_raw(X))


def test_input_errors():
    X, t, y, _ = _data(100, 0.2, 10)
    with pytest.raises(ValueError, match="known-effect"):
        fit_causal_forest_arrays(X, np.zeros(100), y)
    with pytest.raises(ValueError):
        fit_causal_forest_arrays(X, np.ones(100), y)
    with pytest.raises(ValueError):
        fit_causal_forest_arrays(X, t[:50], y)
    with pytest.raises(ValueError):
        CausalForestParams(subsample=0)


def test_panel_without_treatment_points_to_known_mode():
    p = generate_synthetic_cohort(GenConfig(n_patients=300, treated_fraction=0.0, horizon=2))
    with pytest.raises(ValueError, match="known-effect"):
        fit_causal_forest(p)


def test_effect_at_known_mode():
    spec = EffectSpec(mode="known")
    assert effect_at(spec, None, np.zeros(3)) == pytest.approx(0.58)
    decay = EffectSpec(mode="known", decay=True)
    assert effect_at(decay, None, np.zeros(3), 1) == pytest.approx(0.58 * np.exp(-1), abs=1e-5)
    assert effect_at(decay, None, np.zeros(3), 1) == pytest.approx(0.21337, abs=1e-5)
    assert effect_at(EffectSpec(mode="known", known_gamma=0.0), None, np.zeros(3)) == 0
    v = effect_at(spec, None, np.zeros((4, 3)))
    assert v.shape == (4,) and np.all(v == 0.58)
    with pytest.raises(ValueError):
        effect_at(spec, None, np.zeros(3), -1)
    with pytest.raises(ValueError):
        effect_at(EffectSpec(), None, np.zeros(3))
    with pytest.raises(ValueError):
        EffectSpec(known_gamma=1.5)


def test_perturb_effects():
    g = np.full(200_000, 0.5)
    assert np.array_equal(perturb_effects(g, 0.0), g)
    assert perturb_effects(g, 0.0) is not g
    out = perturb_effects(g, 0.1, seed=0)
    assert np.all((out >= 0) & (out <= 1))
    assert abs(out.mean() - 0.5) < 0.002
    assert np.all((perturb_effects(np.array([0.0, 1.0] * 500), 5.0, 1) >= 0))
    with pytest.raises(ValueError):
        perturb_effects(g, -0.1)
    assert np.array_equal(perturb_effects(g[:10], 0.3, 4), perturb_effects(g[:10], 0.3, 4))
