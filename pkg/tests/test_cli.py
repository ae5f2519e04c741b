"""End-to-end pipeline runs through the command-line interface."""

import json

import pytest

from relage import cli

SMALL_SYNTH = {
    "n_cpg": 24, "m_samples": 48, "n_clock_sites": 8, "noise_sd": 0.03,
    "n_chromosomes": 4, "n_genes": 6, "disease_shift_years": 5.0,
    "disease_fraction": 0.2, "age_min": 0.0, "age_max": 90.0, "seed": 11,
}


def write_config(tmp_path, **extra):
    cfg = {
        "paths": {"out_dir": str(tmp_path / "out")},
        "graph": {"threshold": 0.6},
        "train": {"lr": 3e-3, "batch_size": 8, "max_epochs": 2, "patience": 5,
                  "seed": 1},
        "explain": {"ig_steps": 4, "max_samples": 3, "top_k": 5},
        "synth": SMALL_SYNTH,
    }
    cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()[-1]
    return code, json.loads(out)


def out_root(cfg_path):
    cfg = cli.load_config(cfg_path)
    from pathlib import Path
    return Path(cfg["paths"]["out_dir"]) / cli.config_hash(cfg)


def test_full_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path)

    code, summary = run(capsys, "synth", "-c", str(cfg))
    assert code == 0 and summary["n_cpgs"] == 24

    code, summary = run(capsys, "build-graphs", "-c", str(cfg))
    assert code == 0 and len(summary["arcs"]) == 3

    code, summary = run(capsys, "train", "-c", str(cfg))
    assert code == 0 and summary["epochs"] == 2

    code, summary = run(capsys, "evaluate", "-c", str(cfg))
    assert code == 0 and summary["n"] > 0

    code, summary = run(capsys, "aa-report", "-c", str(cfg))
    assert code == 0
    assert 0.0 <= summary["cohort_sensitivity"] <= 1.0

    code, summary = run(capsys, "explain", "-c", str(cfg))
    assert code == 0 and summary["n_explained"] == 3

    root = out_root(str(cfg))
    for name in ("metrics.json", "aa_report.json", "aa_samples.csv",
                 "training_log.csv", "feature_importance.csv",
                 "node_trends.csv", "graph_importance.csv", "params.json"):
        assert (root / name).exists(), name
    assert len(list((root / "explanations").glob("*.json"))) == 3


def test_ablate_emits_seven_rows(tmp_path, capsys):
    cfg = write_config(tmp_path)
    for command in ("synth", "build-graphs"):
        assert run(capsys, command, "-c", str(cfg))[0] == 0
    code, summary = run(capsys, "ablate", "-c", str(cfg))
    assert code == 0 and summary["rows"] == 7
    lines = (out_root(str(cfg)) / "ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,mae,mse,frc,n"
    assert len(lines) == 8
    assert [ln.split(",")[0] for ln in lines[1:]] == [
        "without_G1", "without_G2", "without_G3",
        "only_G1", "only_G2", "only_G3", "full"]


def test_missing_input_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, summary = run(capsys, "evaluate", "-c", str(cfg))
    assert code == cli.EXIT_MISSING_INPUT
    assert "error" in summary


def test_unknown_config_key_exit_code(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"trian": {"lr": 0.1}}))
    code, summary = run(capsys, "synth", "-c", str(path))
    assert code == cli.EXIT_VALIDATION
    assert "unknown config key" in summary["error"]


def test_set_override_and_content_addressing(tmp_path):
    cfg_path = write_config(tmp_path)
    base = cli.load_config(str(cfg_path))
    tweaked = cli.load_config(str(cfg_path), ["train.lr=0.005"])
    assert tweaked["train"]["lr"] == 0.005
    assert cli.config_hash(base) != cli.config_hash(tweaked)
    # out_dir does not participate in the hash
    moved = dict(base, paths=dict(base["paths"], out_dir="elsewhere"))
    assert cli.config_hash(base) == cli.config_hash(moved)


def test_set_rejects_unknown_key(tmp_path):
    cfg_path = write_config(tmp_path)
    with pytest.raises(cli.ConfigError):
        cli.load_config(str(cfg_path), ["train.momentum=0.9"])
    with pytest.raises(cli.ConfigError):
        cli.load_config(str(cfg_path), ["no-equals-sign"])


def test_pipeline_reruns_are_byte_identical(tmp_path, capsys):
    cfg = write_config(tmp_path)
    root = out_root(str(cfg))

    def pipeline():
        for command in ("synth", "build-graphs", "train", "evaluate"):
            assert run(capsys, command, "-c", str(cfg))[0] == 0
        return ((root / "params.json").read_bytes(),
                (root / "metrics.json").read_bytes(),
                (root / "graphs.json.gz").read_bytes())

    first = pipeline()
    second = pipeline()
    assert first == second
