from __future__ import annotations

import io
from pathlib import Path

import pytest
from rich.console import Console

import aglp._command_line
from aglp._config import DatasetParams, ExperimentSpec, ModelConfig, TrainerConfig, render_spec
from aglp._data import load_manifest
from aglp._files import read_csv
from aglp.app import EXIT_ABORTED, EXIT_CONFIGURATION, EXIT_FAILURE, EXIT_OK, main

QUICK = ExperimentSpec(
    dataset=DatasetParams(n_source=40, n_target=40, n_test=20),
    model=ModelConfig(
        extractor_hidden=(8,), feature_dim=6, score_dim=4, gcn_hidden=5, gcn_out=3, dropout=0.0
    ),
    trainer=TrainerConfig(
        steps=12,
        warmup=6,
        update_interval=3,
        eval_every=6,
        checkpoint_every=6,
        batch_source=6,
        batch_labeled=6,
        batch_unlabeled=6,
        topk=3,
        eval_batch_size=32,
    ),
    repeat=1,
)


@pytest.fixture
def config_file(tmp_path) -> Path:
    path = tmp_path / "quick.yaml"
    path.write_text(render_spec(QUICK), encoding="utf-8")
    return path


def cli(*args) -> tuple[int, str]:
    console = Console(file=io.StringIO(), width=120)
    code = main([str(arg) for arg in args], console=console)
    return code, console.file.getvalue()


def test_generate_is_reproducible(config_file, tmp_path):
    for name in ("a", "b"):
        code, output = cli("generate", "--config", config_file, "--out", tmp_path / name)
        assert code == EXIT_OK
        assert "labeled" in output
    manifest = load_manifest(tmp_path / "a" / "dataset")
    assert manifest["counts"]["labeled"] == 12
    assert len(manifest["unlabeled_truth"]) == 28
    for file_name in ("dataset.csv", "manifest.yaml"):
        first = (tmp_path / "a" / "dataset" / file_name).read_bytes()
        assert first == (tmp_path / "b" / "dataset" / file_name).read_bytes()


def test_train_writes_logs_and_summary(config_file, tmp_path):
    for name in ("a", "b"):
        code, _ = cli(
            "train", "--config", config_file, "--preset", "full", "--out", tmp_path / name
        )
        assert code == EXIT_OK

    run_dir = tmp_path / "a" / "full" / "seed-0"
    header, rows = read_csv(run_dir / "train_log.csv")
    assert header[0] == "step" and len(rows) == 12
    _, evaluations = read_csv(run_dir / "eval_log.csv")
    assert [row[0] for row in evaluations] == ["6", "12"]
    assert (run_dir / "final" / "weights.csv").is_file()
    assert (tmp_path / "a" / "config.yaml").is_file()

    summary_header, summary = read_csv(tmp_path / "a" / "summary.csv")
    assert summary_header[:2] == ["configuration", "runs"]
    assert summary_header[3] == "std_target_accuracy"
    assert summary[0][:2] == ["full", "1"]
    assert float(summary[0][3]) == 0.0

    for file_name in ("train_log.csv", "eval_log.csv", "evaluation.csv"):
        other = tmp_path / "b" / "full" / "seed-0" / file_name
        assert (run_dir / file_name).read_bytes() == other.read_bytes()


def test_repeat_uses_consecutive_seeds(config_file, tmp_path):
    code, _ = cli(
        "train", "--config", config_file, "--repeat", "2", "--seed", "5", "--out", tmp_path
    )
    assert code == EXIT_OK
    _, runs = read_csv(tmp_path / "runs.csv")
    assert [(row[0], row[1]) for row in runs] == [("default", "5"), ("default", "6")]


def test_sweep_writes_one_row_per_preset(config_file, tmp_path):
    code, output = cli(
        "sweep", "--config", config_file, "--presets", "st,saa,ca,full", "--out", tmp_path
    )
    assert code == EXIT_OK
    _, summary = read_csv(tmp_path / "summary.csv")
    assert [row[0] for row in summary] == ["st", "saa", "ca", "full"]
    assert "Target accuracy" in output


def test_evaluate_and_dump_features(config_file, tmp_path):
    cli("train", "--config", config_file, "--out", tmp_path)
    checkpoint = tmp_path / "default" / "seed-0" / "final"

    code, output = cli(
        "evaluate", checkpoint, "--config", config_file, "--out", tmp_path / "eval.csv"
    )
    assert code == EXIT_OK
    assert "over 20 examples" in output
    _, rows = read_csv(tmp_path / "eval.csv")
    assert rows[-1][:2] == ["all", "20"]

    for name in ("one.csv", "two.csv"):
        code, _ = cli(
            "dump-features", checkpoint, "--config", config_file, "--out", tmp_path / name
        )
        assert code == EXIT_OK
    header, rows = read_csv(tmp_path / "one.csv")
    assert len(header) == 4 + 6 + 3
    assert len(rows) == 100
    assert {row[3] for row in rows if row[2] == "unlabeled"} == {"-1"}
    assert (tmp_path / "one.csv").read_bytes() == (tmp_path / "two.csv").read_bytes()

    code, output = cli("evaluate", checkpoint, "--config", config_file, "--set", "dataset.dim=3")
    assert code == EXIT_ABORTED


def test_resume_reproduces_the_log(config_file, tmp_path, monkeypatch):
    code, _ = cli("train", "--config", config_file, "--out", tmp_path / "whole")
    assert code == EXIT_OK

    real_save = aglp._command_line.save_state

    def save_then_stop(state, directory):
        real_save(state, directory)
        if state.step == 6:
            raise KeyboardInterrupt

    monkeypatch.setattr(aglp._command_line, "save_state", save_then_stop)
    code, output = cli("train", "--config", config_file, "--out", tmp_path / "cut")
    assert code == EXIT_FAILURE
    assert "--resume" in output
    _, partial = read_csv(tmp_path / "cut" / "default" / "seed-0" / "train_log.csv")
    assert len(partial) == 6

    monkeypatch.undo()
    code, _ = cli("train", "--config", config_file, "--out", tmp_path / "cut", "--resume")
    assert code == EXIT_OK
    for file_name in ("train_log.csv", "eval_log.csv"):
        whole = (tmp_path / "whole" / "default" / "seed-0" / file_name).read_bytes()
        assert (tmp_path / "cut" / "default" / "seed-0" / file_name).read_bytes() == whole


@pytest.mark.parametrize(
    "args",
    [
        ("frobnicate",),
        ("train", "--set", "trainer.nope=1"),
        ("train", "--set", "trainer.steps"),
        ("train", "--bogus"),
        ("train", "--preset", "everything"),
        ("train", "--set", "trainer.warmup=5000"),
    ],
)
def test_configuration_errors(args, tmp_path):
    code, _ = cli(*args, "--out", tmp_path)
    assert code == EXIT_CONFIGURATION


def test_topk_wider_than_features_fails_before_writing(config_file, tmp_path):
    out = tmp_path / "out"
    code, output = cli(
        "train", "--config", config_file, "--set", "model.feature_dim=2", "--out", out
    )
    assert code == EXIT_CONFIGURATION
    assert "topk" in output
    assert not (out / "config.yaml").exists()


def test_help(tmp_path):
    code, output = cli("help")
    assert code == EXIT_OK
    for name in ("generate", "train", "sweep", "evaluate", "dump-features"):
        assert name in output
    assert cli()[0] == EXIT_OK
