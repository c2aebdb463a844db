"""End-to-end command-line flows, exit codes, config precedence."""

import csv
import json

import pytest

from rec2pm.cli import main
from rec2pm.data import load_dataset
from rec2pm.memory import load_memory


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One shared tiny dataset + trained model for the whole module."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    assert main(["gen-data", "--out", str(data_dir), "--n-users", "8",
                 "--seq-len", "11", "--catalog-size", "20",
                 "--n-categories", "4", "--prefs-per-user", "2",
                 "--seed", "3"]) == 0
    data = data_dir / "dataset.jsonl"
    run_dir = root / "run"
    assert main(["train", "--data", str(data), "--out", str(run_dir),
                 "--trainer", "rec2pm", "--epochs", "1", "--l-seg", "4",
                 "--l-full", "8", "--c", "2", "--d", "8",
                 "--batch-size", "4", "--valid-user-cap", "2",
                 "--seed", "0"]) == 0
    full_dir = root / "full"
    assert main(["train", "--data", str(data), "--out", str(full_dir),
                 "--trainer", "plain-full", "--epochs", "0", "--l-seg", "4",
                 "--l-full", "8", "--c", "2", "--d", "8",
                 "--seed", "0"]) == 0
    return {"root": root, "data": data, "run": run_dir, "full": full_dir}


def test_verify_subcommand_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "all 9 checks passed" in out
    assert "FAIL" not in out


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["verify", "--frobnicate"]) == 1
    assert "usage error" in capsys.readouterr().err
    assert main(["deploy"]) == 1


def test_gen_data_artifacts(workspace):
    ds = load_dataset(workspace["data"])
    assert len(ds.users) == 8
    assert all(len(u.items) == 11 for u in ds.users)
    manifest = json.loads((workspace["data"].parent / "manifest.json")
                          .read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["artifacts"]["dataset"].endswith("dataset.jsonl")


def test_config_precedence_flag_beats_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_users": 5, "seq_len": 9,
                               "catalog_size": 15, "n_categories": 3,
                               "prefs_per_user": 2, "seed": 1}))
    a = tmp_path / "a"
    assert main(["gen-data", "--config", str(cfg), "--out", str(a)]) == 0
    ds = load_dataset(a / "dataset.jsonl")
    assert len(ds.users) == 5 and len(ds.users[0].items) == 9

    b = tmp_path / "b"
    assert main(["gen-data", "--config", str(cfg), "--out", str(b),
                 "--seq-len", "7"]) == 0
    ds = load_dataset(b / "dataset.jsonl")
    assert len(ds.users) == 5 and len(ds.users[0].items) == 7


def test_config_error_exit_codes(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path)]) == 2
    assert "cannot read config" in capsys.readouterr().err

    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert main(["gen-data", "--config", str(bad),
                 "--out", str(tmp_path)]) == 2
    assert "cannot parse config" in capsys.readouterr().err

    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"learning_rate": 0.1}))
    assert main(["gen-data", "--config", str(unknown),
                 "--out", str(tmp_path)]) == 2
    assert "unknown config keys" in capsys.readouterr().err

    typed = tmp_path / "typed.json"
    typed.write_text(json.dumps({"lr": "fast"}))
    assert main(["gen-data", "--config", str(typed),
                 "--out", str(tmp_path)]) == 2
    assert "must be a number" in capsys.readouterr().err


def test_train_artifacts(workspace):
    run = workspace["run"]
    assert (run / "params.r2pw").exists()
    metrics = (run / "metrics.jsonl").read_text().strip().split("\n")
    assert len(metrics) == 1
    entry = json.loads(metrics[0])
    assert "loss_total" in entry and "valid_h10" in entry
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["arch"]["kind"] == "mem"
    assert manifest["config"]["trainer"] == "rec2pm"
    assert manifest["artifacts"]["params"].endswith("params.r2pw")


def test_evaluate_reproducible(workspace, tmp_path, capsys):
    args = ["evaluate", "--data", str(workspace["data"]),
            "--params", str(workspace["run"] / "params.r2pw"),
            "--protocol", "mem-iterative", "--seed", "0"]
    assert main(args + ["--out", str(tmp_path / "e1")]) == 0
    first = capsys.readouterr().out
    assert main(args + ["--out", str(tmp_path / "e2")]) == 0
    second = capsys.readouterr().out
    assert first == second
    r1 = (tmp_path / "e1" / "report.json").read_bytes()
    r2 = (tmp_path / "e2" / "report.json").read_bytes()
    assert r1 == r2
    report = json.loads(r1)
    assert report["protocol"] == "mem-iterative"
    assert set(report["metrics"]) == {"H@1", "H@10", "H@50", "N@10", "N@50"}


def test_evaluate_protocol_mismatch_is_runtime_error(workspace, tmp_path,
                                                     capsys):
    code = main(["evaluate", "--data", str(workspace["data"]),
                 "--params", str(workspace["full"] / "params.r2pw"),
                 "--protocol", "mem-iterative",
                 "--out", str(tmp_path)])
    assert code == 2
    assert "needs a memory model" in capsys.readouterr().err


def test_infer_prints_ranking_and_saves_memory(workspace, tmp_path, capsys):
    mem_path = tmp_path / "user.r2pm"
    code = main(["infer", "--params", str(workspace["run"] / "params.r2pw"),
                 "--items", "1,2,3,4,5", "--top-k", "4",
                 "--save-memory", str(mem_path), "--out", str(tmp_path)])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["ranking"]) == 4
    assert len(set(out["ranking"])) == 4
    state = load_memory(mem_path)
    assert state.segments_absorbed == 1

    # resume from the saved memory without re-ingesting anything
    code = main(["infer", "--params", str(workspace["run"] / "params.r2pw"),
                 "--memory", str(mem_path), "--out", str(tmp_path)])
    assert code == 0
    resumed = json.loads(capsys.readouterr().out)
    assert len(resumed["ranking"]) == 10


def test_export_attention_cli(workspace, tmp_path, capsys):
    code = main(["export-attention",
                 "--params", str(workspace["run"] / "params.r2pw"),
                 "--items", "1,2,3,4,5,6,7,8", "--out", str(tmp_path)])
    assert code == 0
    with open(tmp_path / "attention.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["slot", "target", "weight", "kind"]
    assert len(rows) > 1


def test_bench_cli(workspace, tmp_path, capsys):
    code = main(["bench", "--data", str(workspace["data"]),
                 "--params", str(workspace["run"] / "params.r2pw"),
                 "--full-params", str(workspace["full"] / "params.r2pw"),
                 "--reps", "1", "--user-cap", "2", "--out", str(tmp_path)])
    assert code == 0
    line = capsys.readouterr().out.strip()
    report = json.loads(line)
    assert report["reps"] == 1
    assert "mem" in report["protocols"] and "full" in report["protocols"]
    disk = json.loads((tmp_path / "bench.jsonl").read_text())
    assert disk == report


def test_ablate_cli(workspace, tmp_path, capsys):
    code = main(["ablate", "--data", str(workspace["data"]),
                 "--out", str(tmp_path), "--epochs", "1", "--l-seg", "4",
                 "--l-full", "8", "--c", "2", "--d", "8",
                 "--batch-size", "4", "--valid-user-cap", "2",
                 "--slot-counts", "2", "--seed", "0"])
    assert code == 0
    table = json.loads((tmp_path / "ablation.json").read_text())
    assert {"lambda1", "lambda0", "slots2", "recon", "overlap"} <= set(table)
    assert table["slots2"]["metrics"] == table["lambda1"]["metrics"]
    out = capsys.readouterr().out
    assert "lambda0: H@10" in out


def test_missing_manifest_is_config_error(workspace, tmp_path, capsys):
    orphan = tmp_path / "w.r2pw"
    orphan.write_bytes((workspace["run"] / "params.r2pw").read_bytes())
    code = main(["infer", "--params", str(orphan), "--items", "1,2",
                 "--out", str(tmp_path)])
    assert code == 2
    assert "manifest" in capsys.readouterr().err
