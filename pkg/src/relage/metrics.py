"""Regression metrics, age-acceleration analytics, and ablation evaluation.

FRC (fitting regression coefficient) is the least-squares slope of the
predicted age regressed on the true age, cov(y, yhat) / var(y): the larger
deviation from 1, the stronger the systematic amplification or compression
of the predicted-age scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import GraphBundle
from .ingest import CohortTable, NodeFeatureTemplate
from .model import ModelParams
from .training import SplitPlan, TrainConfig, predict_batch, train

#: Default age-bin edges; the last bin is open-ended.
DEFAULT_AGE_BINS = [(0.0, 20.0), (20.0, 45.0), (45.0, 55.0), (55.0, 65.0),
                    (65.0, 80.0), (80.0, float("inf"))]

#: Row order of the ablation table: leave-one-out, single-graph, full model.
ABLATION_VARIANTS = [
    ("without_G1", (0, 1, 1)),
    ("without_G2", (1, 0, 1)),
    ("without_G3", (1, 1, 0)),
    ("only_G1", (1, 0, 0)),
    ("only_G2", (0, 1, 0)),
    ("only_G3", (0, 0, 1)),
    ("full", (1, 1, 1)),
]


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    mae: float
    mse: float
    frc: float | None  # None when var(y) = 0
    n: int

    def as_dict(self) -> dict:
        return {"mae": self.mae, "mse": self.mse, "frc": self.frc, "n": self.n}


def regression_metrics(y, yhat) -> MetricReport:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.size < 2:
        raise MetricsError("y and yhat must have equal length >= 2")
    err = yhat - y
    var = float(np.var(y))
    frc = None
    if var > 0.0:
        frc = float(((y - y.mean()) * (yhat - yhat.mean())).mean() / var)
    return MetricReport(mae=float(np.abs(err).mean()),
                        mse=float((err ** 2).mean()),
                        frc=frc, n=y.size)


def age_acceleration(y, yhat) -> np.ndarray:
    """Per-sample predicted minus chronological age."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise MetricsError("y and yhat must have equal length")
    return yhat - y


def cohort_sensitivity(disease_aa) -> float:
    """Fraction of disease samples with strictly positive acceleration."""
    aa = np.asarray(disease_aa, dtype=np.float64)
    if aa.size == 0:
        raise MetricsError("empty disease cohort")
    return float((aa > 0.0).mean())


def mixed_precision(healthy_aa, disease_aa) -> float | None:
    """Among pooled samples flagged AA > 0, the fraction that are disease.

    Returns None when nothing is flagged (absent is a valid outcome).
    """
    h = np.asarray(healthy_aa, dtype=np.float64)
    d = np.asarray(disease_aa, dtype=np.float64)
    if h.size == 0 or d.size == 0:
        raise MetricsError("both cohorts must be non-empty")
    flagged_h = int((h > 0.0).sum())
    flagged_d = int((d > 0.0).sum())
    total = flagged_h + flagged_d
    if total == 0:
        return None
    return flagged_d / total


def _validate_bins(bins) -> list[tuple[float, float]]:
    bins = [(float(lo), float(hi)) for lo, hi in bins]
    for lo, hi in bins:
        if not lo < hi:
            raise MetricsError(f"bad bin [{lo}, {hi})")
    ordered = sorted(bins)
    for (lo1, hi1), (lo2, _hi2) in zip(ordered, ordered[1:]):
        if lo2 < hi1:
            raise MetricsError(f"overlapping bins [{lo1},{hi1}) and [{lo2},...)")
    return bins


def stratified_aa(cohort: CohortTable, aa_by_id: dict[str, float],
                  bins=DEFAULT_AGE_BINS) -> list[dict]:
    """Mean AA per (age bin x group) with counts; empty cells report None.

    Groups are "healthy" plus each distinct disease label in the cohort.
    """
    bins = _validate_bins(bins)
    groups = sorted(set(cohort.disease), key=lambda g: (g != "healthy", g))
    rows = []
    for lo, hi in bins:
        for group in groups:
            vals = [aa_by_id[s] for i, s in enumerate(cohort.sample_ids)
                    if s in aa_by_id and cohort.disease[i] == group
                    and lo <= cohort.ages[i] < hi]
            rows.append({
                "bin_low": lo, "bin_high": hi, "group": group,
                "n": len(vals),
                "mean_aa": float(np.mean(vals)) if vals else None,
            })
    return rows


def ablation_run(params_init: ModelParams, bundle: GraphBundle,
                 cohort: CohortTable, template: NodeFeatureTemplate,
                 split: SplitPlan, config: TrainConfig,
                 subset: set[str]) -> MetricReport:
    """Train a variant with the excluded branches zeroed end to end and
    evaluate it on the shared test split."""
    if not subset:
        raise MetricsError("subset must be non-empty")
    unknown = subset - {"G1", "G2", "G3"}
    if unknown:
        raise MetricsError(f"unknown graphs in subset: {sorted(unknown)}")
    mask = tuple(int(f"G{k}" in subset) for k in (1, 2, 3))
    trained, _log = train(params_init, bundle, cohort, template, split, config,
                          branch_mask=mask)
    y = cohort.ages[[cohort.index_of(s) for s in split.test_ids]]
    yhat = _masked_predict(trained, bundle, cohort, template, split.test_ids, mask)
    return regression_metrics(y, yhat)


def _masked_predict(params, bundle, cohort, template, ids, mask) -> np.ndarray:
    from .model import ModelCache
    from .training import batch_predictions
    rows = np.array([cohort.index_of(s) for s in ids])
    return batch_predictions(params, ModelCache(bundle), cohort, template,
                             rows, branch_mask=mask)


def ablation_table(params_init: ModelParams, bundle: GraphBundle,
                   cohort: CohortTable, template: NodeFeatureTemplate,
                   split: SplitPlan, config: TrainConfig) -> list[dict]:
    """The seven-variant ablation table: 3 leave-one-out, 3 single, 1 full."""
    rows = []
    for name, mask in ABLATION_VARIANTS:
        subset = {f"G{k}" for k in (1, 2, 3) if mask[k - 1]}
        report = ablation_run(params_init, bundle, cohort, template, split,
                              config, subset)
        rows.append({"variant": name, **report.as_dict()})
    return rows
