import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import expit

from prevcare.cohort import GenConfig, generate_synthetic_cohort
from prevcare.risk import (FRAMINGHAM_FEATURES, SearchConfig, SmoteConfig, calibration_curve,
                           calibration_table, fit_platt, fit_risk_arrays, panel_matrix, predict_risk,
                           roc_auc, smote_oversample, train_risk_model, training_rows)
from prevcare.simulation import ScenarioConfig
from prevcare.config import demo_document


def _on_segment(p, a, b, tol=1e-9):
    d = b - a
    if np.allclose(d, 0):
        return np.allclose(p, a, atol=tol)
    u = np.dot(p - a, d) / np.dot(d, d)
    return -tol <= u <= 1 + tol and np.allclose(a + u * d, p, atol=1e-7)


def _segment_checked(X, y, Xa, ya, k):
    Xm = X[y == 1]
    new = Xa[len(X):]
    assert np.all(ya[len(X):] == 1)
    d = ((Xm[:, None, :] - Xm[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1)[:, :k]
    for p in new:
        assert any(_on_segment(p, Xm[i], Xm[j]) for i in range(len(Xm)) for j in nn[i])


def test_smote_two_point_minority_is_convex():
    X = np.array([[0.0, 0.0], [1.0, 2.0]] + [[5.0, 5.0]] * 10)
    y = np.array([1, 1] + [0] * 10)
    Xa, ya = smote_oversample(X, y, k_neighbors=1, target_ratio=1.0, seed=0)
    new = Xa[12:]
    assert len(new) == 8
    u = new[:, 0]
    assert np.allclose(new, np.outer(u, [1.0, 2.0]))
    assert np.all((u >= 0) & (u <= 1))


def test_smote_noop_at_current_ratio(rng):
    X = rng.normal(size=(30, 2))
    y = np.r_[np.ones(10), np.zeros(20)].astype(int)
    Xa, ya = smote_oversample(X, y, 3, target_ratio=0.5, seed=0)
    assert len(Xa) == 30


def test_smote_count_arithmetic(rng):
    X = rng.normal(size=(1000, 3))
    y = np.r_[np.ones(50), np.zeros(950)].astype(int)
    _, ya = smote_oversample(X, y, 5, 0.5, seed=1)
    assert (ya == 1).sum() == 475  # ceil(0.5 * 950)


def test_smote_too_few_minority(rng):
    X = rng.normal(size=(20, 2))
    y = np.r_[np.ones(3), np.zeros(17)].astype(int)
    with pytest.raises(ValueError, match="minority"):
        smote_oversample(X, y, k_neighbors=5, target_ratio=0.5)


@given(st.integers(0, 5000), st.integers(1, 4))
def test_smote_segment_property(seed, k):
    r = np.random.default_rng(seed)
    X = r.normal(size=(40, 2))
    y = np.r_[np.ones(8), np.zeros(32)].astype(int)
    Xa, ya = smote_oversample(X, y, k, 0.75, seed)
    _segment_checked(X, y, Xa, ya, k)


def test_platt_recovers_identity_on_true_log_odds(rng):
    s = rng.normal(0, 2, 50_000)
    y = (rng.random(50_000) < expit(s)).astype(int)
    c = fit_platt(s, y)
    assert abs(c.a - 1) < 0.05 and abs(c.b) < 0.05


def test_platt_no_information(rng):
    s = rng.normal(size=20_000)
    y = (rng.random(20_000) < 0.3).astype(int)
    c = fit_platt(s, y)
    assert abs(c.a) < 0.05
    assert abs(c(s).mean() - y.mean()) < 1e-3


def test_platt_affine_invariance(rng):
    s = rng.normal(size=2000)
    y = (rng.random(2000) < expit(1.5 * s - 0.4)).astype(int)
    assert np.allclose(fit_platt(s, y)(s), fit_platt(2 * s + 3, y)(2 * s + 3), atol=1e-6)


def test_platt_single_class_rejected():
    with pytest.raises(ValueError):
        fit_platt([0.1, 0.2], [1, 1])


def _sharp_default(n, seed):
    # default features and weights; threshold at the latent mean and little noise so labels carry signal
    return generate_synthetic_cohort(GenConfig(n_patients=n, onset_threshold=0.616, noise_sd=0.002,
                                               seed=seed))


def test_heldout_auc():
    train, test = _sharp_default(5000, 0), _sharp_default(5000, 1)
    m = train_risk_model(train, "gbdt", seed=0)
    X = panel_matrix(test)
    auc = roc_auc(test.onset_next, m.predict(X))
    assert auc > 0.75
    assert roc_auc(test.onset_next, test.true_risk) >= auc - 0.02


def test_search_budget_and_determinism():
    p = _sharp_default(600, 2)
    cfg = SearchConfig(enabled=True, n_trials=1, n_folds=3)
    a = train_risk_model(p, "ridge", cfg, seed=4)
    b = train_risk_model(p, "ridge", cfg, seed=4)
    assert len(a.search_log) == 1
    assert a.search_log == b.search_log and a.hyperparameters == b.hyperparameters
    c = train_risk_model(p, "lasso", SearchConfig(True, 3, 3), seed=1)
    assert len(c.search_log) == 3


def _demo_panel(n=800):
    doc = demo_document()
    doc["cohort"]["n_patients"] = n
    cfg = ScenarioConfig.from_dict({**doc["scenario"], "cohort": doc["cohort"]})
    return generate_synthetic_cohort(cfg.cohort)


def test_framingham_view_dimension():
    p = _demo_panel()
    m = train_risk_model(p, "lasso", feature_view="framingham_only", seed=0)
    assert m.n_features == len(FRAMINGHAM_FEATURES) == 9
    assert m.input_names == FRAMINGHAM_FEATURES
    m2 = train_risk_model(p, "lasso", feature_view="framingham_plus_age_hba1c", seed=0)
    assert m2.n_features == 11


def test_training_excludes_treated_and_future():
    p = _demo_panel()
    rows = training_rows(p, before_year=3)
    assert not p.treated[rows].any()
    assert p.year[rows].max() < 3
    ever = set(p.patient_id[p.treated == 1])
    assert not ever & set(p.patient_id[rows])
    m = train_risk_model(p, "ridge", before_year=3, seed=0)
    assert m.diagnostics["max_train_year"] <= 2


def test_no_untreated_labels_is_an_error():
    p = _demo_panel(200)
    with pytest.raises(ValueError):
        train_risk_model(p.subset(p.treated == 1), "ridge")


def test_calibration_keeps_ranking_and_improves_brier():
    p = _demo_panel(2000)
    m = train_risk_model(p, "gbdt", seed=0, hyperparameters={"n_trees": 30, "n_leaves": 7},
                         calibration_folds=5)
    X = panel_matrix(p, training_rows(p))
    raw, cal = m.raw_score(X), m.predict(X)
    assert m.calibrator.a > 0
    o = np.argsort(raw, kind="stable")
    assert np.all(np.diff(cal[o]) >= 0)
    d = m.diagnostics
    assert np.mean(d["brier_calibrated_folds"]) <= np.mean(d["brier_uncalibrated_folds"])


def test_predict_risk_shapes():
    p = _sharp_default(400, 3)
    m = fit_risk_arrays(p.features, p.onset_next, "ridge", calibration_folds=3)
    assert isinstance(predict_risk(m, p.features[0]), float)
    assert predict_risk(m, p.features).shape == (400,)
    with pytest.raises(ValueError):
        predict_risk(m, np.zeros(5))


def test_calibration_curve_binomial_oracle(rng):
    p = rng.random(20_000)
    y = (rng.random(20_000) < p).astype(int)
    for mean_p, obs, n in calibration_table(p, y, 10):
        assert abs(obs - mean_p) <= 3 * np.sqrt(mean_p * (1 - mean_p) / n) + 0.05 / 10


def test_calibration_curve_constant_and_partition():
    tab = calibration_table(np.full(100, 0.5), np.r_[np.ones(50), np.zeros(50)], 10)
    assert len(tab) == 1 and tab[0][0] == 0.5 and abs(tab[0][1] - 0.5) < 1e-12
    tab = calibration_table(np.linspace(0, 1, 10), np.zeros(10), 10)
    assert len(tab) <= 10 and sum(t[2] for t in tab) == 10
    with pytest.raises(ValueError):
        calibration_table([0.5], [1], 1)


def test_calibration_curve_on_model():
    p = _sharp_default(800, 4)
    m = fit_risk_arrays(p.features, p.onset_next, "ridge", calibration_folds=3)
    tab = calibration_curve(m, (p.features, p.onset_next), 5)
    assert sum(t[2] for t in tab) == 800


def test_smote_applied_to_training_folds_only():
    p = _sharp_default(500, 5)
    m = train_risk_model(p, "ridge", seed=0, smote=SmoteConfig(True, 3, 1.0), calibration_folds=3)
    # calibration is fit on out-of-fold scores of the original rows only
    assert len(m.train_rows) == 500
