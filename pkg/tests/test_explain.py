"""Attribution machinery: path-integrated gradients, branch occlusion, and
cohort aggregation."""

import json

import numpy as np
import pytest

from relage import autodiff as ad
from relage import explain, ingest, model
from test_model import random_bundle


@pytest.fixture(scope="module")
def toy():
    bundle = random_bundle(21, 12)
    params = model.init_params(n_nodes=12, seed=0)
    from dataclasses import replace
    params = replace(params, y_mean=50.0, y_std=10.0)
    x = np.random.default_rng(3).random((12, ingest.N_FEATURES))
    cache = model.ModelCache(bundle)
    return params, cache, x


def test_path_attributions_exact_on_linear_function():
    rng = np.random.default_rng(0)
    c = rng.normal(size=(6, 4))
    x = rng.normal(size=(6, 4))

    def f(t):
        s = ad.mean_all(ad.mul(t, ad.tensor(c)))
        return ad.mul(s, ad.tensor(float(c.size)))  # sum(c * x)

    ig, gap = explain.path_attributions(f, x, steps=8)
    np.testing.assert_allclose(ig, c * x, atol=1e-10)
    assert gap < 1e-10


def test_ig_zero_at_zero_input(toy):
    params, cache, x = toy
    ig, gap = explain.integrated_gradients(params, cache,
                                           np.zeros_like(x), steps=4)
    np.testing.assert_array_equal(ig, np.zeros_like(x))
    assert gap == pytest.approx(0.0, abs=1e-12)


def test_ig_completeness_gap_shrinks_with_steps(toy):
    params, cache, x = toy
    _, gap_coarse = explain.integrated_gradients(params, cache, x, steps=8)
    _, gap_fine = explain.integrated_gradients(params, cache, x, steps=256)
    assert gap_fine <= gap_coarse + 1e-12


def test_ig_rejects_bad_steps(toy):
    params, cache, x = toy
    with pytest.raises(explain.ExplainError):
        explain.integrated_gradients(params, cache, x, steps=0)


def test_node_feature_scores_shapes(toy):
    params, cache, x = toy
    ig, _ = explain.integrated_gradients(params, cache, x, steps=4)
    v, u = explain.node_feature_scores(ig)
    assert v.shape == (12,) and u.shape == (ingest.N_FEATURES,)
    assert np.all(v >= 0) and np.all(u >= 0)
    np.testing.assert_allclose(v, np.abs(ig).mean(axis=1), atol=1e-15)
    np.testing.assert_allclose(u, np.abs(ig).mean(axis=0), atol=1e-15)


def test_occlusion_scores_simplex(toy):
    params, cache, x = toy
    s, deltas = explain.branch_occlusion(params, cache, x)
    assert np.all(s >= 0)
    assert s.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(deltas >= 0)


def test_occlusion_matches_masked_forward_deltas(toy):
    params, cache, x = toy
    _, deltas = explain.branch_occlusion(params, cache, x)
    full = model.model_forward(params, cache.bundle, x)
    for b in range(3):
        mask = tuple(0 if i == b else 1 for i in range(3))
        muted = model.model_forward(params, cache.bundle, x, branch_mask=mask)
        assert deltas[b] == pytest.approx(abs(full - muted), abs=1e-12)


def test_explain_sample_report(toy):
    params, cache, x = toy
    rep = explain.explain_sample(params, cache, x, "S1", steps=4)
    assert rep.sample_id == "S1"
    assert rep.ig_matrix.shape == x.shape
    assert rep.graph_scores.shape == (3,)


def test_aggregate_explanations_slopes_and_topk():
    n = 5
    ages = np.array([20.0, 40.0, 60.0, 80.0])
    reports = []
    for age in ages:
        node_scores = np.zeros(n)
        node_scores[0] = 0.1 * age        # rises with age
        node_scores[1] = 10.0 - 0.1 * age  # falls with age
        node_scores[2] = 3.0
        reports.append(explain.ExplanationReport(
            f"S{age}", node_scores, np.ones(ingest.N_FEATURES),
            np.full(3, 1 / 3), np.ones(3), np.zeros((n, ingest.N_FEATURES)),
            0.0))
    agg = explain.aggregate_explanations(reports, ages, top_k=2)
    np.testing.assert_allclose(agg["node_age_slopes"][:3], [0.1, -0.1, 0.0],
                               atol=1e-12)
    assert agg["top_increasing_nodes"][0] == 0
    assert agg["top_decreasing_nodes"][0] == 1
    np.testing.assert_allclose(agg["mean_graph_scores"], np.full(3, 1 / 3))


def test_aggregate_explanations_validation():
    with pytest.raises(explain.ExplainError):
        explain.aggregate_explanations([], [])
    rep = explain.ExplanationReport("S", np.zeros(2), np.zeros(3),
                                    np.full(3, 1 / 3), np.ones(3),
                                    np.zeros((2, 3)), 0.0)
    with pytest.raises(explain.ExplainError):
        explain.aggregate_explanations([rep], [1.0, 2.0])


def test_report_and_table_writers(tmp_path, toy):
    params, cache, x = toy
    rep = explain.explain_sample(params, cache, x, "S9", steps=4)
    explain.write_sample_report_json(rep, tmp_path / "S9.json")
    data = json.loads((tmp_path / "S9.json").read_text())
    assert data["sample_id"] == "S9"
    assert len(data["node_scores"]) == 12

    agg = explain.aggregate_explanations([rep], [50.0], top_k=3)
    explain.write_cohort_tables(agg, cache.bundle.node_ids, tmp_path)
    feats = (tmp_path / "feature_importance.csv").read_text().splitlines()
    assert feats[0] == "feature,mean_importance"
    assert len(feats) == 1 + ingest.N_FEATURES
    nodes = (tmp_path / "node_trends.csv").read_text().splitlines()
    assert len(nodes) == 1 + 12
    rels = (tmp_path / "graph_importance.csv").read_text().splitlines()
    assert len(rels) == 4
