import json

import numpy as np
import pytest

from grpp.cli import main
from grpp.eventstore import load_sequences, read_matrix_csv
from grpp.model import GRPPModel

SMALL = ["--m", "4", "--d", "4", "--batch-size", "8"]


def simulate(out, dim=10, sequences=20, horizon=40.0, seed=7, extra=()):
    argv = ["simulate", "--dim", str(dim), "--sequences", str(sequences), "--horizon",
            str(horizon), "--seed", str(seed), "--out", str(out), "--base-scale", "200",
            "--excitation-scale", "100", *extra]
    assert main(argv) == 0
    return out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    return simulate(tmp_path_factory.mktemp("data"))


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--epochs", "1",
                 "--deterministic", *SMALL]) == 0
    return out


# ---------------------------------------------------------------- simulate


def test_simulate_outputs(data_dir):
    names = {p.name for p in data_dir.iterdir()}
    assert names == {"events.jsonl", "ground_truth_A.csv", "mu.csv", "meta.json",
                     "manifest.json"}
    meta = json.loads((data_dir / "meta.json").read_text())
    assert {"K", "omega", "seed", "rescale_factor"} <= set(meta)
    assert read_matrix_csv(data_dir / "ground_truth_A.csv").shape == (10, 10)
    assert read_matrix_csv(data_dir / "mu.csv").shape == (10, 1)
    assert len(load_sequences(data_dir / "events.jsonl", 10)) == 20


def test_simulate_paper_flags(tmp_path):
    argv = ["simulate", "--dim", "10", "--sequences", "100", "--horizon", "500", "--seed", "7",
            "--out", str(tmp_path)]
    assert main(argv) == 0
    assert len(load_sequences(tmp_path / "events.jsonl", 10)) == 100
    assert read_matrix_csv(tmp_path / "ground_truth_A.csv").shape == (10, 10)


def test_simulate_deterministic(tmp_path):
    a = simulate(tmp_path / "a")
    b = simulate(tmp_path / "b")
    assert (a / "events.jsonl").read_bytes() == (b / "events.jsonl").read_bytes()


def test_simulate_dim_100_rank(tmp_path):
    out = simulate(tmp_path, dim=100, sequences=2, horizon=5.0)
    A = read_matrix_csv(out / "ground_truth_A.csv")
    assert A.shape == (100, 100)
    sv = np.linalg.svd(A, compute_uv=False)
    # the CSV keeps 6 significant digits, so rounding noise sits near 1e-7
    assert (sv > 1e-5 * sv[0]).sum() <= 9


def test_simulate_bad_flags(tmp_path, capsys):
    assert main(["simulate", "--dim", "7", "--sequences", "2", "--horizon", "5", "--seed", "0",
                 "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--dim", "10", "--sequences", "0", "--horizon", "5", "--seed", "0",
                 "--out", str(tmp_path)]) == 2


# ---------------------------------------------------------------- train


def test_train_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"checkpoint.json", "report.csv", "report.json", "config.txt", "manifest.json",
            "connection_matrix.csv"} <= names
    lines = (trained / "report.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,valid_nll,valid_graph_loss,seconds"
    assert len(lines) == 3
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 0
    assert all(len(h) == 40 for h in manifest["inputs"].values())


def test_train_defaults_recorded(tmp_path, data_dir):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--epochs", "0",
                 "--deterministic"]) == 0
    cfg = json.loads((tmp_path / "manifest.json").read_text())["config"]
    assert (cfg["batch_size"], cfg["learning_rate"], cfg["dropout"]) == (256, 0.001, 0.2)
    assert (cfg["d"], cfg["m"], cfg["gamma"]) == (128, 128, 0.01)
    assert "batch_size = 256" in (tmp_path / "config.txt").read_text()


def test_train_ablation_tag(tmp_path, data_dir):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--epochs", "1",
                 "--ablate", "wogp", "--deterministic", *SMALL]) == 0
    assert json.loads((tmp_path / "report.json").read_text())["ablation"] == "woGP"
    assert GRPPModel.load(tmp_path / "checkpoint.json").ablation == "wogp"


def test_train_config_file_and_override(tmp_path, data_dir):
    cfg = tmp_path / "c.txt"
    cfg.write_text("epochs = 1\nm = 4\nd = 4\nbatch_size = 8\nlearning_rate = 0.01\n")
    out = tmp_path / "run"
    assert main(["train", "--data", str(data_dir), "--config", str(cfg), "--out", str(out),
                 "--learning-rate", "0.02", "--deterministic"]) == 0
    recorded = json.loads((out / "manifest.json").read_text())["config"]
    assert recorded["learning_rate"] == 0.02 and recorded["m"] == 4


def test_train_missing_data_dir(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_train_config_error_names_key(tmp_path, data_dir, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("epochs = 1\nbatch_sise = 4\n")
    assert main(["train", "--data", str(data_dir), "--config", str(cfg), "--out",
                 str(tmp_path / "o")]) == 2
    assert "batch_sise" in capsys.readouterr().err


def test_train_deterministic_report(tmp_path, data_dir):
    for name in ("a", "b"):
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / name),
                     "--epochs", "2", "--deterministic", *SMALL]) == 0
    assert (tmp_path / "a" / "report.csv").read_bytes() == \
        (tmp_path / "b" / "report.csv").read_bytes()


# ---------------------------------------------------------------- eval / recover


def test_eval_trained(tmp_path, trained, data_dir):
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.json"), "--data",
                 str(data_dir), "--out", str(tmp_path / "a")]) == 0
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.json"), "--data",
                 str(data_dir), "--out", str(tmp_path / "b")]) == 0
    m = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert np.isfinite(m["rmse"]) and 0 <= m["accuracy"] <= 1
    assert (tmp_path / "a" / "metrics.json").read_bytes() == \
        (tmp_path / "b" / "metrics.json").read_bytes()
    assert (tmp_path / "a" / "predictions.csv").is_file()


def test_eval_fresh_model(tmp_path, data_dir):
    model = GRPPModel.create(10, 4, 4, seed=1)
    model.save(tmp_path / "fresh.json")
    assert main(["eval", "--checkpoint", str(tmp_path / "fresh.json"), "--data", str(data_dir),
                 "--out", str(tmp_path / "o")]) == 0


def test_eval_version_mismatch(tmp_path, data_dir, capsys):
    obj = GRPPModel.create(10, 2, 2).to_json()
    obj["format_version"] = 0
    (tmp_path / "old.json").write_text(json.dumps(obj))
    assert main(["eval", "--checkpoint", str(tmp_path / "old.json"), "--data", str(data_dir),
                 "--out", str(tmp_path / "o")]) == 1
    assert "format_version" in capsys.readouterr().err


def test_recover_fresh(tmp_path):
    GRPPModel.create(10, 3, 5, seed=0).save(tmp_path / "c.json")
    assert main(["recover", "--checkpoint", str(tmp_path / "c.json"), "--out",
                 str(tmp_path / "A.csv")]) == 0
    assert read_matrix_csv(tmp_path / "A.csv").shape == (10, 10)


def test_recover_identity_fixture(tmp_path):
    model = GRPPModel.create(4, 2, 6, seed=0)
    Q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(6, 6)))
    model.params.set("H0", Q[:4])
    model.params.set("Omega", np.eye(6))
    model.save(tmp_path / "c.json")
    assert main(["recover", "--checkpoint", str(tmp_path / "c.json"), "--out",
                 str(tmp_path / "A.csv")]) == 0
    np.testing.assert_allclose(read_matrix_csv(tmp_path / "A.csv"), np.eye(4), atol=1e-6)


def test_recover_missing_checkpoint(tmp_path):
    assert main(["recover", "--checkpoint", str(tmp_path / "nope.json"), "--out",
                 str(tmp_path / "A.csv")]) == 2


def test_unknown_command():
    assert main(["frobnicate"]) == 2
