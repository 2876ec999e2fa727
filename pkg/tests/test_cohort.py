import numpy as np
import pytest
from scipy.stats import norm

from prevcare.cohort import (GenConfig, Panel, eligible_patients, generate_synthetic_cohort,
                             label_transition, load_panel, onset_probability, summary, write_panel)


def small_panel(**over):
    cols = dict(patient_id=["a", "a", "b"], year=[1, 2, 1], treated=[0, 0, 1], died=[0, 0, 0],
                onset_next=[0, np.nan, 1], fasting_glucose=[6.5, 6.6, 6.8],
                features=[[1.0, 2.0], [1.5, 2.5], [3.0, 4.0]])
    cols.update(over)
    return Panel(**cols)


def base_cohort(n=2000, **kw):
    return GenConfig(n_patients=n, **kw)


def test_defaults_match_three_feature_model():
    c = GenConfig()
    assert c.feature_mean == [50.0, 170.0, 27.0]
    assert c.feature_cov == [[20.0, 0.0, 5.0], [0.0, 50.0, 5.0], [5.0, 5.0, 5.0]]
    assert c.risk_weights == [0.5, 0.1, 0.2] and c.risk_scale == 100.0
    assert (c.onset_threshold, c.noise_sd, c.true_effect, c.n_patients) == (0.7, 1.0, 0.31, 100_000)


def test_default_panel_moments():
    p = generate_synthetic_cohort(base_cohort(20_000))
    assert np.allclose(p.features.mean(0), [50, 170, 27], atol=0.15)
    assert np.allclose(np.cov(p.features.T), GenConfig().feature_cov, atol=1.5)
    # latent risk is sigmoid(w.x/100); labels are Bernoulli(P(latent + eps >= 0.7))
    lat = 1 / (1 + np.exp(-(p.features @ [0.5, 0.1, 0.2]) / 100))
    assert np.allclose(p.true_risk, norm.sf((0.7 - lat) / 1.0))


def test_zero_weights_no_noise_gives_all_zero_labels():
    p = generate_synthetic_cohort(base_cohort(500, risk_weights=[0, 0, 0], noise_sd=0.0))
    assert np.all(p.onset_next == 0)
    assert np.allclose(p.true_risk, 0.0)


def test_generation_is_deterministic(tmp_path):
    a = generate_synthetic_cohort(base_cohort(300, horizon=3, treated_fraction=0.3, seed=5))
    b = generate_synthetic_cohort(base_cohort(300, horizon=3, treated_fraction=0.3, seed=5))
    write_panel(a, tmp_path / "a.csv")
    write_panel(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_invalid_covariance_rejected():
    with pytest.raises(ValueError, match="positive semidefinite"):
        generate_synthetic_cohort(base_cohort(10, feature_cov=[[1, 2, 0], [2, 1, 0], [0, 0, 1]]))
    with pytest.raises(ValueError, match="3x3|length"):
        generate_synthetic_cohort(base_cohort(10, risk_weights=[1, 2]))
    with pytest.raises(ValueError):
        generate_synthetic_cohort(base_cohort(10, feature_cov=[[1, 0], [0, 1]]))


@pytest.mark.parametrize("frac,seed", [(0.05, 0), (0.2, 1), (0.5, 2), (0.8, 3), (0.95, 4)])
def test_randomized_assignment_fraction(frac, seed):
    n = 4000
    p = generate_synthetic_cohort(base_cohort(n, treated_fraction=frac, seed=seed))
    got = p.treated_count / n
    assert abs(got - frac) <= 3 * np.sqrt(frac * (1 - frac) / n)


def test_untreated_onset_rate_matches_analytic():
    p = generate_synthetic_cohort(GenConfig(n_patients=100_000, seed=1))
    # analytic rate: average of P(latent + eps >= thr) over the feature law (quadrature oracle)
    z = np.random.default_rng(99).multivariate_normal([50, 170, 27], GenConfig().feature_cov, 400_000)
    analytic = onset_probability(1 / (1 + np.exp(-(z @ [0.5, 0.1, 0.2]) / 100)), 0.7, 1.0).mean()
    assert abs(p.onset_next.mean() - analytic) <= 0.01


def test_confounding_tilts_toward_high_risk():
    p = generate_synthetic_cohort(base_cohort(20_000, treated_fraction=0.3, confounding_strength=400.0,
                                     noise_sd=0.05, onset_threshold=0.62))
    t = p.treated == 1
    assert p.true_risk[t].mean() > p.true_risk[~t].mean()
    assert abs(t.mean() - 0.3) < 0.02


def test_treatment_lowers_onset_by_true_effect():
    p = generate_synthetic_cohort(base_cohort(60_000, treated_fraction=0.5, noise_sd=0.05, onset_threshold=0.61,
                                     true_effect=0.5))
    t = p.treated == 1
    ratio = p.onset_next[t].mean() / p.true_risk[t].mean()
    assert abs(ratio - 0.5) < 0.03


def test_load_three_rows(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("patient_id,year,treated,died,onset_next,fasting_glucose,f0\n"
                 "a,1,0,0,0,6.2,1.5\na,2,0,0,,6.3,1.6\nb,1,1,0,1,6.8,2\n")
    p = load_panel(f)
    assert len(p) == 3 and p.n_features == 1 and p.horizon == 2
    assert np.isnan(p.onset_next[1])


def test_load_duplicate_key_rejected(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("patient_id,year,treated,died,onset_next,fasting_glucose,f0\n"
                 "a,1,0,0,0,6.2,1\na,1,0,0,1,6.3,1\n")
    with pytest.raises(ValueError, match="duplicate"):
        load_panel(f)


def test_load_bad_cell_names_row_and_column(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("patient_id,year,treated,died,onset_next,fasting_glucose,f0\n"
                 "a,1,0,0,0,6.2,1\nb,x,0,0,1,6.3,1\n")
    with pytest.raises(ValueError, match=r"row 3.*'year'"):
        load_panel(f)


def test_absent_label_round_trip(tmp_path):
    p = small_panel()
    write_panel(p, tmp_path / "p.csv")
    back = load_panel(tmp_path / "p.csv")
    assert back.equals(p)
    assert np.isnan(back.onset_next[1])


def test_csv_round_trip_is_byte_stable(tmp_path):
    p = generate_synthetic_cohort(base_cohort(200, horizon=3, treated_fraction=0.2, death_rate=0.05,
                                     missed_followup_rate=0.1, seed=3))
    write_panel(p, tmp_path / "a.csv")
    write_panel(load_panel(tmp_path / "a.csv"), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_label_transition_examples():
    p = Panel(["a", "a", "b", "b", "c"], [1, 2, 1, 2, 1], [0] * 5, [0] * 5, [np.nan] * 5,
              [6.5, 7.2, 6.5, 6.5, 6.5], np.zeros((5, 1)))
    q = label_transition(p)
    assert q.onset_next[0] == 1
    assert q.onset_next[2] == 0
    assert np.isnan(q.onset_next[4])


def test_label_transition_idempotent():
    p = generate_synthetic_cohort(base_cohort(300, horizon=4, missed_followup_rate=0.2, seed=2))
    once = label_transition(p)
    assert label_transition(once).equals(once)


def test_eligibility_rules():
    p = Panel(["d", "d", "m", "m", "m", "t", "t", "t", "o", "o"], [1, 2, 1, 2, 3, 1, 2, 3, 1, 2],
              [0, 0, 0, 0, 0, 0, 1, 1, 0, 0], [0, 1, 0, 0, 0, 0, 0, 0, 0, 0],
              [0, np.nan, 0, np.nan, 0, 0, 0, 0, 1, 0], [6.5] * 10, np.zeros((10, 1)))
    got = eligible_patients(p, 3)
    assert "d" not in got  # died in year 2
    assert "m" in got  # missed follow-up in year 2
    assert "t" not in got and "o" not in got
    with pytest.raises(ValueError):
        eligible_patients(p, 4)
    empty = Panel([], [], [], [], [], [], np.zeros((0, 1)), ["x"])
    assert eligible_patients(empty, 1) == set()


def test_records_after_death_rejected():
    with pytest.raises(ValueError, match="after death"):
        small_panel(died=[1, 0, 0])


def test_summary_counts():
    p = small_panel()
    s = summary(p)
    assert s["n_patients"] == 2 and s["treated_fraction"] == 0.5 and s["onset_rate"] == 0.5
