"""Post hoc attribution: integrated gradients over node features and branch
occlusion for per-graph importance, plus cohort-level aggregation by age.

Integrated gradients walk a straight path from the all-zero baseline to the
input features, averaging gradients with the trapezoidal rule; the product
with the input gives signed per-cell attributions whose row/column absolute
means are the node and feature scores.  Occlusion reruns the deployed
forward with one branch representation zeroed (the gate re-evaluates over
the zeroed concatenation) and scores each graph by its prediction shift.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graphs import RELATIONS, GraphBundle
from .ingest import FEATURE_NAMES
from .model import ModelCache, ModelParams, forward_batch, wrap_weights

OCCLUSION_EPS = 1e-12


class ExplainError(ValueError):
    pass


@dataclass(frozen=True)
class ExplanationReport:
    sample_id: str
    node_scores: np.ndarray      # (N,) >= 0, row means of |IG|
    feature_scores: np.ndarray   # (F,) >= 0, column means of |IG|
    graph_scores: np.ndarray     # (3,) >= 0, sums to 1
    graph_deltas: np.ndarray     # (3,) raw occlusion prediction shifts
    ig_matrix: np.ndarray        # (N, F) signed attributions
    completeness_gap: float


def _eval_scalar(w, params, cache: ModelCache, x: ad.Tensor) -> ad.Tensor:
    return forward_batch(w, params, cache.for_batch(1), x, 1, train=False)


def path_attributions(f, x: np.ndarray, steps: int) -> tuple[np.ndarray, float]:
    """Trapezoidal-rule path-integrated gradients from the zero baseline.

    ``f`` maps a Tensor with the shape of ``x`` to a scalar Tensor and must
    be deterministic.  Returns the attribution matrix x * avg_grad and the
    completeness gap |sum(attributions) - (f(x) - f(0))|.
    """
    if steps < 1:
        raise ExplainError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    grads = []
    f_at = {}
    for k in range(steps + 1):
        point = ad.tensor((k / steps) * x, requires_grad=True)
        out = f(point)
        grads.append(ad.grad(out, [point])[0])
        if k in (0, steps):
            f_at[k] = out.item()
    stacked = np.stack(grads)
    avg_grad = 0.5 * (stacked[:-1] + stacked[1:]).sum(axis=0) / steps
    ig = x * avg_grad
    gap = abs(float(ig.sum()) - (f_at[steps] - f_at[0]))
    return ig, gap


def integrated_gradients(params: ModelParams, cache_or_bundle, x: np.ndarray,
                         steps: int = 64) -> tuple[np.ndarray, float]:
    """Integrated gradients of the deployed model, in years.

    Returns the (N, F) attribution matrix and the completeness gap.
    Dropout is disabled throughout.
    """
    cache = cache_or_bundle if isinstance(cache_or_bundle, ModelCache) \
        else ModelCache(cache_or_bundle)
    w = wrap_weights(params)

    def f(point):
        out = _eval_scalar(w, params, cache, point)
        return ad.add(ad.mul(ad.tensor(params.y_std), out),
                      ad.tensor(params.y_mean))

    return path_attributions(f, x, steps)


def node_feature_scores(ig: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Node scores = row means of |IG|; feature scores = column means."""
    abs_ig = np.abs(np.asarray(ig, dtype=np.float64))
    return abs_ig.mean(axis=1), abs_ig.mean(axis=0)


def branch_occlusion(params: ModelParams, cache_or_bundle, x: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Per-graph importance by zeroing one branch at a time.

    Reuses the model's masked forward (the same code path ablation trains
    with), so the gate is re-evaluated over the zeroed concatenation.
    Returns (scores summing to 1, raw absolute prediction shifts).
    """
    cache = cache_or_bundle if isinstance(cache_or_bundle, ModelCache) \
        else ModelCache(cache_or_bundle)
    w = wrap_weights(params)
    xt = ad.tensor(np.asarray(x, dtype=np.float64))

    def predict(mask):
        out = forward_batch(w, params, cache.for_batch(1), xt, 1,
                            train=False, branch_mask=mask)
        return params.y_mean + params.y_std * out.item()

    y_full = predict((1, 1, 1))
    deltas = np.array([
        abs(y_full - predict(tuple(0 if i == b else 1 for i in range(3))))
        for b in range(3)
    ])
    scores = deltas / (deltas.sum() + OCCLUSION_EPS)
    return scores, deltas


def explain_sample(params: ModelParams, cache_or_bundle, x: np.ndarray,
                   sample_id: str = "", steps: int = 64) -> ExplanationReport:
    cache = cache_or_bundle if isinstance(cache_or_bundle, ModelCache) \
        else ModelCache(cache_or_bundle)
    ig, gap = integrated_gradients(params, cache, x, steps)
    v, u = node_feature_scores(ig)
    s, deltas = branch_occlusion(params, cache, x)
    return ExplanationReport(sample_id, v, u, s, deltas, ig, gap)


def _ols_slope(x: np.ndarray, y: np.ndarray) -> float:
    var = np.var(x)
    if var == 0.0:
        return 0.0
    return float(((x - x.mean()) * (y - y.mean())).mean() / var)


def aggregate_explanations(reports: list[ExplanationReport], ages,
                           top_k: int = 10) -> dict:
    """Cohort aggregates: mean feature/graph scores, per-node importance
    means, and the top-k nodes by rising/falling importance-vs-age slope."""
    if not reports:
        raise ExplainError("need at least one explanation report")
    ages = np.asarray(ages, dtype=np.float64)
    if ages.size != len(reports):
        raise ExplainError("one age per report required")
    node_mat = np.stack([r.node_scores for r in reports])     # (M, N)
    feat_mat = np.stack([r.feature_scores for r in reports])  # (M, F)
    graph_mat = np.stack([r.graph_scores for r in reports])   # (M, 3)

    slopes = np.array([_ols_slope(ages, node_mat[:, i])
                       for i in range(node_mat.shape[1])])
    order = np.argsort(-slopes, kind="stable")
    return {
        "mean_feature_scores": feat_mat.mean(axis=0),
        "mean_graph_scores": graph_mat.mean(axis=0),
        "mean_node_scores": node_mat.mean(axis=0),
        "node_age_slopes": slopes,
        "top_increasing_nodes": order[:top_k].tolist(),
        "top_decreasing_nodes": order[::-1][:top_k].tolist(),
    }


def write_sample_report_json(report: ExplanationReport, path) -> None:
    data = {
        "sample_id": report.sample_id,
        "node_scores": report.node_scores.tolist(),
        "feature_scores": report.feature_scores.tolist(),
        "graph_scores": report.graph_scores.tolist(),
        "graph_deltas": report.graph_deltas.tolist(),
        "completeness_gap": report.completeness_gap,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True)


def write_cohort_tables(agg: dict, node_ids, out_dir) -> None:
    """feature_importance.csv, node_trends.csv, graph_importance.csv."""
    with open(f"{out_dir}/feature_importance.csv", "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "mean_importance"])
        for name, score in zip(FEATURE_NAMES, agg["mean_feature_scores"]):
            w.writerow([name, repr(float(score))])
    with open(f"{out_dir}/node_trends.csv", "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "mean_importance", "age_slope"])
        for i, node in enumerate(node_ids):
            w.writerow([node, repr(float(agg["mean_node_scores"][i])),
                        repr(float(agg["node_age_slopes"][i]))])
    with open(f"{out_dir}/graph_importance.csv", "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["relation", "mean_score"])
        for rel, score in zip(RELATIONS, agg["mean_graph_scores"]):
            w.writerow([rel, repr(float(score))])
