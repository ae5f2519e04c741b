"""Command-line entry point for the full pipeline.

Every command reads one JSON config (unknown keys rejected, scalar keys
overridable with ``--set key=value``), writes its artifacts under a
content-addressed output directory derived from the config hash, prints a
one-line JSON summary to stdout, and exits 0 on success.  Exit codes:
2 missing inputs, 3 validation failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff, explain, graphs, ingest, metrics, training
from . import model as model_mod

DEFAULT_CONFIG = {
    "paths": {
        "beta": "beta.csv",
        "metadata": "metadata.csv",
        "annotations": "annotations.csv",
        "graphs": "graphs.json.gz",
        "params": "params.json",
        "out_dir": "out",
    },
    "ingest": {"knn_k": 5},
    "graph": {"threshold": 0.8},
    "model": {"d_mid": 16, "dropout": 0.1},
    "train": {"lr": 1e-3, "batch_size": 16, "max_epochs": 300, "patience": 20,
              "seed": 0, "loss": "mse"},
    "explain": {"ig_steps": 64, "max_samples": 50, "top_k": 20},
    "synth": {"n_cpg": 300, "m_samples": 1000, "n_clock_sites": 60,
              "noise_sd": 0.03, "n_chromosomes": 15, "n_genes": 40,
              "disease_shift_years": 0.0, "disease_fraction": 0.0,
              "age_min": 0.0, "age_max": 90.0, "seed": 0},
    "age_bins": [list(b) for b in metrics.DEFAULT_AGE_BINS],
}


class ConfigError(ValueError):
    pass


def _merge_config(defaults: dict, given: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} must be an object")
            out[key] = _merge_config(defaults[key], value, f"{path}.")
        else:
            out[key] = value
    return out


def load_config(path, overrides=()) -> dict:
    with open(path, encoding="utf-8") as fh:
        given = json.load(fh)
    cfg = _merge_config(DEFAULT_CONFIG, given)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of the config contents, excluding the output root itself."""
    trimmed = copy.deepcopy(cfg)
    trimmed["paths"].pop("out_dir", None)
    return hashlib.sha256(
        json.dumps(trimmed, sort_keys=True).encode()).hexdigest()[:12]


class Workspace:
    """Resolves artifact paths inside the content-addressed output dir."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.root = Path(cfg["paths"]["out_dir"]) / config_hash(cfg)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        p = Path(self.cfg["paths"][key])
        return p if p.is_absolute() else self.root / p

    def require(self, key: str) -> Path:
        p = self.path(key)
        if not p.exists():
            raise FileNotFoundError(f"required input missing: {p}")
        return p


def _load_cohort(ws: Workspace) -> tuple[ingest.CohortTable,
                                         list[ingest.CpGAnnotation],
                                         ingest.NodeFeatureTemplate]:
    cohort = ingest.parse_cohort(ws.require("beta"), ws.require("metadata"))
    cohort = ingest.knn_impute(cohort, ws.cfg["ingest"]["knn_k"])
    annots = ingest.parse_annotations(ws.require("annotations"))
    if tuple(a.cpg_id for a in annots) != cohort.cpg_ids:
        raise ConfigError("annotation order does not match beta columns")
    return cohort, annots, ingest.build_node_features(annots)


def cmd_synth(ws: Workspace) -> dict:
    sc = dict(ws.cfg["synth"])
    seed = sc.pop("seed")
    cohort, annots, truth = ingest.synth_cohort(ingest.SynthConfig(**sc), seed)
    ingest.write_cohort_csv(cohort, ws.path("beta"), ws.path("metadata"))
    ingest.write_annotations_csv(annots, ws.path("annotations"))
    with open(ws.root / "synth_truth.json", "w", encoding="utf-8") as fh:
        json.dump({
            "clock_sites": truth.clock_sites.tolist(),
            "intercepts": truth.intercepts.tolist(),
            "slopes": truth.slopes.tolist(),
            "baselines": truth.baselines.tolist(),
            "noise_sd": truth.noise_sd,
            "disease_shift_years": truth.disease_shift_years,
        }, fh, sort_keys=True)
    return {"n_samples": cohort.n_samples, "n_cpgs": cohort.n_cpgs,
            "beta": str(ws.path("beta"))}


def cmd_build_graphs(ws: Workspace) -> dict:
    cohort, annots, _template = _load_cohort(ws)
    split = training.make_split(cohort, ws.cfg["train"]["seed"])
    train_rows = np.array([cohort.index_of(s) for s in split.train_ids])
    threshold = ws.cfg["graph"]["threshold"]
    g1 = graphs.build_comethylation_graph(cohort.beta[train_rows], threshold)
    g2 = graphs.build_chromosome_graph(annots)
    g3 = graphs.build_gene_graph(annots)
    bundle = graphs.GraphBundle(
        cohort.cpg_ids, (g1, g2, g3),
        {"threshold": threshold, "split_seed": split.seed,
         "train_beta_hash": graphs.beta_hash(cohort.beta[train_rows])})
    graphs.save_graphs(bundle, ws.path("graphs"))
    return {"graphs": str(ws.path("graphs")),
            "arcs": [g.n_arcs for g in bundle.graphs]}


def cmd_train(ws: Workspace) -> dict:
    cohort, _annots, template = _load_cohort(ws)
    bundle = graphs.load_graphs(ws.require("graphs"))
    split = training.make_split(cohort, ws.cfg["train"]["seed"])
    cfg_t = ws.cfg["train"]
    config = training.TrainConfig(
        lr=cfg_t["lr"], batch_size=cfg_t["batch_size"],
        max_epochs=cfg_t["max_epochs"], patience=cfg_t["patience"],
        dropout=ws.cfg["model"]["dropout"], seed=cfg_t["seed"],
        loss=cfg_t["loss"])
    init = model_mod.init_params(
        cohort.n_cpgs, d_mid=ws.cfg["model"]["d_mid"],
        dropout=ws.cfg["model"]["dropout"], seed=cfg_t["seed"])
    params, log = training.train(init, bundle, cohort, template, split, config)
    model_mod.save_params(params, ws.path("params"))
    training.write_training_log(log, ws.root / "training_log.csv")
    best = min((r["val_mae"] for r in log if np.isfinite(r["val_mae"])),
               default=float("nan"))
    return {"params": str(ws.path("params")), "epochs": len(log),
            "best_val_mae": best}


def cmd_evaluate(ws: Workspace) -> dict:
    cohort, _annots, template = _load_cohort(ws)
    bundle = graphs.load_graphs(ws.require("graphs"))
    params = model_mod.load_params(ws.require("params"), bundle)
    split = training.make_split(cohort, ws.cfg["train"]["seed"])
    y = cohort.ages[[cohort.index_of(s) for s in split.test_ids]]
    yhat = training.predict_batch(params, bundle, cohort, template,
                                  split.test_ids)
    report = metrics.regression_metrics(y, yhat)
    out = ws.root / "metrics.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, sort_keys=True)
    return {"metrics": str(out), **report.as_dict()}


def cmd_aa_report(ws: Workspace) -> dict:
    cohort, _annots, template = _load_cohort(ws)
    bundle = graphs.load_graphs(ws.require("graphs"))
    params = model_mod.load_params(ws.require("params"), bundle)
    split = training.make_split(cohort, ws.cfg["train"]["seed"])
    disease_ids = [s for i, s in enumerate(cohort.sample_ids)
                   if cohort.disease[i] != "healthy"]
    sample_ids = list(split.test_ids) + disease_ids
    yhat = training.predict_batch(params, bundle, cohort, template, sample_ids)
    y = cohort.ages[[cohort.index_of(s) for s in sample_ids]]
    aa = metrics.age_acceleration(y, yhat)
    aa_by_id = dict(zip(sample_ids, aa))
    n_test = len(split.test_ids)
    healthy_aa, disease_aa = aa[:n_test], aa[n_test:]

    with open(ws.root / "aa_samples.csv", "w", newline="",
              encoding="utf-8") as fh:
        import csv as _csv
        w = _csv.writer(fh)
        w.writerow(["sample_id", "age", "predicted_age", "aa", "group"])
        for sid, yi, pi, ai in zip(sample_ids, y, yhat, aa):
            w.writerow([sid, repr(float(yi)), repr(float(pi)), repr(float(ai)),
                        cohort.disease[cohort.index_of(sid)]])
    strat = metrics.stratified_aa(cohort, aa_by_id,
                                  [tuple(b) for b in ws.cfg["age_bins"]])
    summary = {
        "healthy_positive_fraction":
            float((healthy_aa > 0).mean()) if n_test else None,
        "cohort_sensitivity":
            metrics.cohort_sensitivity(disease_aa) if disease_ids else None,
        "mixed_precision":
            metrics.mixed_precision(healthy_aa, disease_aa)
            if disease_ids and n_test else None,
        "stratified": strat,
    }
    out = ws.root / "aa_report.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True)
    return {"aa_report": str(out),
            "cohort_sensitivity": summary["cohort_sensitivity"],
            "mixed_precision": summary["mixed_precision"]}


def cmd_explain(ws: Workspace) -> dict:
    cohort, _annots, template = _load_cohort(ws)
    bundle = graphs.load_graphs(ws.require("graphs"))
    params = model_mod.load_params(ws.require("params"), bundle)
    split = training.make_split(cohort, ws.cfg["train"]["seed"])
    cfg_e = ws.cfg["explain"]
    sample_ids = list(split.test_ids)[:cfg_e["max_samples"]]
    cache = model_mod.ModelCache(bundle)
    sample_dir = ws.root / "explanations"
    sample_dir.mkdir(exist_ok=True)
    reports = []
    for sid in sample_ids:
        x = template.instantiate(cohort.beta[cohort.index_of(sid)])
        rep = explain.explain_sample(params, cache, x, sid, cfg_e["ig_steps"])
        explain.write_sample_report_json(rep, sample_dir / f"{sid}.json")
        reports.append(rep)
    ages = [cohort.ages[cohort.index_of(s)] for s in sample_ids]
    agg = explain.aggregate_explanations(reports, ages, cfg_e["top_k"])
    explain.write_cohort_tables(agg, bundle.node_ids, ws.root)
    return {"n_explained": len(reports),
            "mean_graph_scores": agg["mean_graph_scores"].tolist(),
            "out_dir": str(ws.root)}


def cmd_ablate(ws: Workspace) -> dict:
    cohort, _annots, template = _load_cohort(ws)
    bundle = graphs.load_graphs(ws.require("graphs"))
    split = training.make_split(cohort, ws.cfg["train"]["seed"])
    cfg_t = ws.cfg["train"]
    config = training.TrainConfig(
        lr=cfg_t["lr"], batch_size=cfg_t["batch_size"],
        max_epochs=cfg_t["max_epochs"], patience=cfg_t["patience"],
        dropout=ws.cfg["model"]["dropout"], seed=cfg_t["seed"],
        loss=cfg_t["loss"])
    init = model_mod.init_params(
        cohort.n_cpgs, d_mid=ws.cfg["model"]["d_mid"],
        dropout=ws.cfg["model"]["dropout"], seed=cfg_t["seed"])
    rows = metrics.ablation_table(init, bundle, cohort, template, split, config)
    out = ws.root / "ablation.csv"
    with open(out, "w", newline="", encoding="utf-8") as fh:
        import csv as _csv
        w = _csv.writer(fh)
        w.writerow(["variant", "mae", "mse", "frc", "n"])
        for r in rows:
            w.writerow([r["variant"], repr(r["mae"]), repr(r["mse"]),
                        repr(r["frc"]) if r["frc"] is not None else "",
                        r["n"]])
    with open(ws.root / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(rows, fh, sort_keys=True)
    return {"ablation": str(out), "rows": len(rows)}


COMMANDS = {
    "synth": cmd_synth,
    "build-graphs": cmd_build_graphs,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "aa-report": cmd_aa_report,
    "explain": cmd_explain,
    "ablate": cmd_ablate,
}

EXIT_MISSING_INPUT = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="relage",
        description="Relational-graph aging clock pipeline")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("-c", "--config", required=True)
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override a scalar config key")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, args.overrides)
        ws = Workspace(cfg)
        summary = COMMANDS[args.command](ws)
    except FileNotFoundError as exc:
        print(json.dumps({"command": args.command, "error": str(exc)}))
        return EXIT_MISSING_INPUT
    except autodiff.NonFiniteError as exc:
        print(json.dumps({"command": args.command, "error": str(exc)}))
        return EXIT_NUMERICAL
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(json.dumps({"command": args.command, "error": str(exc)}))
        return EXIT_VALIDATION
    print(json.dumps({"command": args.command, "ok": True, **summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
