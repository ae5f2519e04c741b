"""Metric formulas against explicit loop/normal-equations oracles."""

import numpy as np
import pytest

from relage import ingest, metrics


def loop_metrics(y, yhat):
    n = len(y)
    mae = sum(abs(b - a) for a, b in zip(y, yhat)) / n
    mse = sum((b - a) ** 2 for a, b in zip(y, yhat)) / n
    # slope of the least-squares line yhat = a + b*y via normal equations
    ym = sum(y) / n
    pm = sum(yhat) / n
    num = sum((yi - ym) * (pi - pm) for yi, pi in zip(y, yhat))
    den = sum((yi - ym) ** 2 for yi in y)
    return mae, mse, num / den


def test_regression_metrics_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        y = rng.normal(50.0, 20.0, size=n)
        yhat = rng.normal(50.0, 20.0, size=n)
        if np.var(y) == 0.0:
            continue
        rep = metrics.regression_metrics(y, yhat)
        mae, mse, frc = loop_metrics(y.tolist(), yhat.tolist())
        assert rep.mae == pytest.approx(mae, abs=1e-10)
        assert rep.mse == pytest.approx(mse, abs=1e-10)
        assert rep.frc == pytest.approx(frc, abs=1e-10)
        assert rep.n == n


def test_perfect_prediction_scores():
    y = np.array([10.0, 20.0, 30.0])
    rep = metrics.regression_metrics(y, y)
    assert (rep.mae, rep.mse, rep.frc) == (0.0, 0.0, 1.0)


def test_frc_none_for_constant_targets():
    rep = metrics.regression_metrics([5.0, 5.0, 5.0], [4.0, 5.0, 6.0])
    assert rep.frc is None


def test_frc_invariant_to_prediction_shift():
    rng = np.random.default_rng(1)
    y = rng.normal(size=30)
    yhat = rng.normal(size=30)
    a = metrics.regression_metrics(y, yhat).frc
    b = metrics.regression_metrics(y, yhat + 17.0).frc
    assert a == pytest.approx(b, abs=1e-12)


def test_regression_metrics_validation():
    with pytest.raises(metrics.MetricsError):
        metrics.regression_metrics([1.0], [1.0])
    with pytest.raises(metrics.MetricsError):
        metrics.regression_metrics([1.0, 2.0], [1.0, 2.0, 3.0])


def test_age_acceleration_sign():
    aa = metrics.age_acceleration([50.0, 60.0], [55.0, 58.0])
    np.testing.assert_allclose(aa, [5.0, -2.0])


def test_cohort_sensitivity_strict_positive():
    assert metrics.cohort_sensitivity([1.0, -1.0, 0.0, 2.0]) == 0.5
    with pytest.raises(metrics.MetricsError):
        metrics.cohort_sensitivity([])


def test_mixed_precision():
    assert metrics.mixed_precision([-1.0, 2.0], [3.0, -4.0]) == 0.5
    assert metrics.mixed_precision([-1.0], [-2.0]) is None
    with pytest.raises(metrics.MetricsError):
        metrics.mixed_precision([], [1.0])


def make_cohort(ages, disease):
    m = len(ages)
    return ingest.CohortTable(
        sample_ids=tuple(f"S{i}" for i in range(m)),
        ages=np.asarray(ages, dtype=np.float64),
        sex=("unknown",) * m,
        disease=tuple(disease),
        dataset_ids=("d",) * m,
        cpg_ids=("cg0",),
        beta=np.full((m, 1), 0.5),
    )


def test_stratified_aa_recombines_to_overall_mean():
    rng = np.random.default_rng(2)
    ages = rng.uniform(0, 95, size=60)
    disease = ["healthy" if i % 3 else "dz" for i in range(60)]
    cohort = make_cohort(ages, disease)
    aa = dict(zip(cohort.sample_ids, rng.normal(size=60)))
    rows = metrics.stratified_aa(cohort, aa)
    total, count = 0.0, 0
    for r in rows:
        if r["mean_aa"] is not None:
            total += r["mean_aa"] * r["n"]
            count += r["n"]
    assert count == 60
    assert total / count == pytest.approx(np.mean(list(aa.values())), abs=1e-12)


def test_stratified_aa_reports_empty_cells():
    cohort = make_cohort([10.0, 70.0], ["healthy", "healthy"])
    aa = {"S0": 1.0, "S1": -1.0}
    rows = metrics.stratified_aa(cohort, aa)
    assert {r["group"] for r in rows} == {"healthy"}
    empty = [r for r in rows if r["n"] == 0]
    assert empty and all(r["mean_aa"] is None for r in empty)


def test_stratified_aa_rejects_overlapping_bins():
    cohort = make_cohort([10.0], ["healthy"])
    with pytest.raises(metrics.MetricsError, match="overlap"):
        metrics.stratified_aa(cohort, {"S0": 1.0},
                              bins=[(0.0, 30.0), (20.0, 40.0)])
    with pytest.raises(metrics.MetricsError, match="bad bin"):
        metrics.stratified_aa(cohort, {"S0": 1.0}, bins=[(30.0, 30.0)])


def test_ablation_variant_table_layout():
    names = [name for name, _ in metrics.ABLATION_VARIANTS]
    assert len(names) == 7 and names[-1] == "full"
    masks = [mask for _, mask in metrics.ABLATION_VARIANTS]
    assert len(set(masks)) == 7
    assert all(sum(m) in (1, 2, 3) for m in masks)


def test_ablation_run_rejects_bad_subset():
    with pytest.raises(metrics.MetricsError):
        metrics.ablation_run(None, None, None, None, None, None, set())
    with pytest.raises(metrics.MetricsError, match="unknown"):
        metrics.ablation_run(None, None, None, None, None, None, {"G9"})
