"""Splitting, loss, the optimization loop, checkpointing, and batch prediction."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .graphs import GraphBundle, beta_hash
from .ingest import CohortTable, NodeFeatureTemplate
from .model import ModelCache, ModelParams, forward_batch, wrap_weights


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    """Healthy-sample partition: 20% test, then 80/20 train/val of the rest,
    stratified by age decile.  Disease samples never enter any partition."""

    test_ids: tuple[str, ...]
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    seed: int


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 300
    patience: int = 20
    dropout: float = 0.1
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.max_epochs, self.patience) <= 0:
            raise TrainingError("lr, batch size, epochs, and patience must be positive")
        if self.loss not in ("mse", "mae"):
            raise TrainingError(f"loss must be mse or mae, got {self.loss!r}")


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation summing to ``total`` with per-stratum counts as
    close to the real-valued quotas as possible."""
    base = np.floor(quotas).astype(int)
    short = total - base.sum()
    order = np.argsort(-(quotas - base), kind="stable")
    base[order[:short]] += 1
    return base


def make_split(cohort: CohortTable, seed: int) -> SplitPlan:
    """Deterministic stratified split of the healthy samples."""
    healthy = np.where(cohort.healthy_mask())[0]
    n = healthy.size
    if n < 10:
        raise TrainingError(f"need at least 10 healthy samples, have {n}")
    ages = cohort.ages[healthy]
    edges = np.quantile(ages, np.arange(1, 10) / 10.0)
    decile = np.searchsorted(edges, ages, side="right")

    rng = np.random.default_rng(seed)
    n_test = round(0.2 * n)
    strata = [healthy[decile == d] for d in range(10)]
    strata = [rng.permutation(s) for s in strata]
    sizes = np.array([s.size for s in strata], dtype=float)

    test_alloc = _largest_remainder(n_test * sizes / n, n_test)
    test, rest = [], []
    for s, t in zip(strata, test_alloc):
        test.extend(s[:t])
        rest.append(s[t:])
    n_rest = n - n_test
    n_val = round(0.2 * n_rest)
    rest_sizes = np.array([r.size for r in rest], dtype=float)
    val_alloc = _largest_remainder(n_val * rest_sizes / max(n_rest, 1), n_val)
    val, train = [], []
    for r, v in zip(rest, val_alloc):
        val.extend(r[:v])
        train.extend(r[v:])

    ids = cohort.sample_ids
    return SplitPlan(
        test_ids=tuple(ids[i] for i in sorted(test)),
        train_ids=tuple(ids[i] for i in sorted(train)),
        val_ids=tuple(ids[i] for i in sorted(val)),
        seed=seed,
    )


def _stacked_features(cohort: CohortTable, template: NodeFeatureTemplate,
                      rows: np.ndarray) -> np.ndarray:
    return np.concatenate([template.instantiate(cohort.beta[r]) for r in rows])


class Adam:
    """Adaptive moment estimation over a dict of parameter arrays."""

    def __init__(self, weights: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}
        self.t = 0

    def step(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g ** 2
            weights[k] -= self.lr * (self.m[k] / b1c) / (
                np.sqrt(self.v[k] / b2c) + self.eps)


def batch_predictions(params: ModelParams, cache: ModelCache,
                      cohort: CohortTable, template: NodeFeatureTemplate,
                      rows: np.ndarray, chunk: int = 32,
                      branch_mask: tuple[int, int, int] = (1, 1, 1)) -> np.ndarray:
    """Eval-mode predictions (years) for cohort rows, in the given order."""
    w = wrap_weights(params)
    out = np.empty(rows.size)
    for start in range(0, rows.size, chunk):
        part = rows[start:start + chunk]
        x = ad.tensor(_stacked_features(cohort, template, part))
        pred = forward_batch(w, params, cache.for_batch(part.size), x,
                             part.size, train=False, branch_mask=branch_mask)
        out[start:start + part.size] = pred.value[:, 0]
    return params.y_mean + params.y_std * out


def predict_batch(params: ModelParams, bundle: GraphBundle,
                  cohort: CohortTable, template: NodeFeatureTemplate,
                  ids) -> np.ndarray:
    """Predicted ages for the given sample ids; order-independent values."""
    rows = np.array([cohort.index_of(s) for s in ids])
    return batch_predictions(params, ModelCache(bundle), cohort, template, rows)


def _val_metrics(y: np.ndarray, yhat: np.ndarray) -> tuple[float, float, float]:
    err = yhat - y
    mae = float(np.abs(err).mean())
    mse = float((err ** 2).mean())
    var = float(np.var(y))
    frc = float(np.cov(y, yhat, bias=True)[0, 1] / var) if var > 0 else float("nan")
    return mae, mse, frc


def train(params_init: ModelParams, bundle: GraphBundle, cohort: CohortTable,
          template: NodeFeatureTemplate, split: SplitPlan, config: TrainConfig,
          branch_mask: tuple[int, int, int] = (1, 1, 1),
          ) -> tuple[ModelParams, list[dict]]:
    """Mini-batch adaptive-moment descent with early stopping on val MAE.

    A whole mini-batch runs as one forward over disjoint graph copies, which
    is numerically identical to per-sample gradient accumulation of the mean
    loss.  Returns the best-validation parameters and the per-epoch log.
    On divergence the last finite checkpoint is returned with the log noting
    the abort.
    """
    prov = bundle.provenance or {}
    if "train_beta_hash" in prov:
        train_rows_check = np.array([cohort.index_of(s) for s in split.train_ids])
        if prov["train_beta_hash"] != beta_hash(cohort.beta[train_rows_check]):
            raise TrainingError("graph bundle provenance does not match the "
                                "training partition (possible test leakage)")

    cache = ModelCache(bundle)
    train_rows = np.array([cohort.index_of(s) for s in split.train_ids])
    val_rows = np.array([cohort.index_of(s) for s in split.val_ids])

    y_train = cohort.ages[train_rows]
    y_mean = float(y_train.mean())
    y_std = float(y_train.std())
    if y_std == 0.0:
        y_std = 1.0
    params = replace(params_init, dropout=config.dropout,
                     y_mean=y_mean, y_std=y_std,
                     graph_hash=bundle.content_hash())
    weights = {k: v.copy() for k, v in params.weights.items()}
    params = replace(params, weights=weights)

    opt = Adam(weights, config.lr)
    shuffle_rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng(config.seed + 0x5eed)

    log: list[dict] = []
    best: ModelParams | None = None
    best_val = np.inf
    epochs_since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(train_rows)
        epoch_loss = 0.0
        n_batches = 0
        try:
            for start in range(0, order.size, config.batch_size):
                batch_rows = order[start:start + config.batch_size]
                b = batch_rows.size
                x = ad.tensor(_stacked_features(cohort, template, batch_rows))
                w = wrap_weights(params, requires_grad=True)
                pred = forward_batch(w, params, cache.for_batch(b), x, b,
                                     train=True, rng=drop_rng,
                                     branch_mask=branch_mask)
                target = ad.tensor(
                    ((cohort.ages[batch_rows] - y_mean) / y_std).reshape(-1, 1))
                diff = ad.sub(pred, target)
                if config.loss == "mse":
                    loss = ad.mean_all(ad.mul(diff, diff))
                else:
                    loss = ad.mean_all(ad.absval(diff))
                names = list(weights)
                grads = ad.grad(loss, [w[k] for k in names])
                opt.step(weights, dict(zip(names, grads)))
                epoch_loss += loss.item()
                n_batches += 1
        except ad.NonFiniteError:
            warnings.warn(f"training diverged at epoch {epoch}; returning the "
                          "last finite checkpoint")
            log.append({"epoch": epoch, "train_loss": float("nan"),
                        "val_mae": float("nan"), "val_mse": float("nan"),
                        "val_frc": float("nan"), "note": "diverged"})
            break

        scale = y_std ** 2 if config.loss == "mse" else y_std
        train_loss = scale * epoch_loss / max(n_batches, 1)
        val_pred = batch_predictions(params, cache, cohort, template, val_rows)
        val_mae, val_mse, val_frc = _val_metrics(cohort.ages[val_rows], val_pred)
        log.append({"epoch": epoch, "train_loss": train_loss,
                    "val_mae": val_mae, "val_mse": val_mse, "val_frc": val_frc})

        if val_mae < best_val:
            best_val = val_mae
            best = replace(params,
                           weights={k: v.copy() for k, v in weights.items()})
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break

    if best is None:
        best = params
    return best, log


def write_training_log(log: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_mae", "val_mse", "val_frc"])
        for rec in log:
            w.writerow([rec["epoch"], repr(rec["train_loss"]),
                        repr(rec["val_mae"]), repr(rec["val_mse"]),
                        repr(rec["val_frc"])])
