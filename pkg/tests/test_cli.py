import json

import pytest

from chunkflow.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_OK, main, read_csv

SMALL = {"seed": 3, "duration": 150, "ablation": {"pairs": 4, "duration": 150},
         "mpg": {"train_steps": 200, "train_batch": 32}, "train": {"steps": 200, "batch": 64, "n_eval": 100}}


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def run(args, capsys=None):
    code = main([str(a) for a in args])
    return code


def stamp_ok(path, seed):
    text = path.read_text()
    if path.suffix == ".json":
        obj = json.loads(text)
        return "config_hash" in obj and obj["seed"] == seed
    if path.suffix == ".csv":
        return text.startswith("# config_hash=") and f"# seed={seed}\n" in text
    return json.loads(text.splitlines()[0])["meta"]["seed"] == seed


def test_schema_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 1, "chunk": {"T": -1}}))
    assert run(["session", "--config", bad, "--out", tmp_path / "o"]) == EXIT_CONFIG
    assert "/chunk/T" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run(["session", "--config", tmp_path / "nope.json"]) == EXIT_CONFIG


def test_divergence_exit_code(tmp_path):
    cfg = tmp_path / "div.json"
    cfg.write_text(json.dumps({"seed": 0, "train": {"lr": 1e4, "steps": 50}}))
    assert run(["train-toy", "--toy", "bimodal", "--config", cfg, "--out", tmp_path / "o"]) == EXIT_ABORT


def test_starvation_exit_code(tmp_path):
    cfg = tmp_path / "starve.json"
    cfg.write_text(json.dumps({"seed": 0, "duration": 500, "runtime": {"starvation_limit": 20},
                               "latency": {"kind": "constant", "value": 100.0, "relative": False}}))
    assert run(["session", "--config", cfg, "--out", tmp_path / "o"]) == EXIT_ABORT


def test_session_seed_seven_is_byte_identical(tmp_path, small):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["session", "--config", small, "--seed", 7, "--out", out]) == EXIT_OK
    names = sorted(p.name for p in a.iterdir())
    assert "session_arm_gripper_20hz.jsonl" in names
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n
        assert stamp_ok(a / n, 7), n


def test_session_no_uac_and_embodiment_filter(tmp_path, small):
    out = tmp_path / "o"
    assert run(["session", "--config", small, "--no-uac", "--embodiment", "lowcost_arm_10hz", "--out", out]) == 0
    rows = read_csv(out / "session_metrics.csv")
    assert [r["embodiment"] for r in rows] == ["lowcost_arm_10hz"] and rows[0]["d"] == "0"


def test_gated_reach_session(tmp_path):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({**SMALL, "policy": {"kind": "gated_reach", "suffix_noise": 0.5}}))
    assert run(["session", "--config", cfg, "--out", tmp_path / "o"]) == EXIT_OK
    assert run(["session", "--config", cfg, "--no-mpg", "--out", tmp_path / "p"]) == EXIT_OK
    assert list((tmp_path / "o").glob("session_*.jsonl"))


@pytest.mark.parametrize("toy,files", [
    ("bimodal", ["bimodal_field.bin", "bimodal_loss.csv", "bimodal_metrics.json"]),
    ("reach", ["reach_field.bin", "reach_mpg.bin", "reach_loss.csv"]),
    ("mof", ["mof_stack.bin", "mof_loss.csv", "mof_params.json"]),
])
def test_train_toy(tmp_path, small, toy, files):
    out = tmp_path / "o"
    assert run(["train-toy", "--toy", toy, "--config", small, "--out", out]) == EXIT_OK
    for f in files:
        assert (out / f).exists()
        if f.endswith((".csv", ".json")):
            assert stamp_ok(out / f, 3)


def test_bench(tmp_path, small, capsys):
    out = tmp_path / "o"
    assert run(["bench", "--config", small, "--out", out]) == EXIT_OK
    rows = read_csv(out / "bench.csv")
    assert len(rows) == 3 and all(float(r["latency_p50"]) <= float(r["latency_p99"]) for r in rows)
    assert "p95_ms" in capsys.readouterr().out


def test_verify_subset(tmp_path):
    out = tmp_path / "o"
    assert run(["verify", "--criteria", "1,4,13", "--out", out]) == EXIT_OK
    report = json.loads((out / "acceptance_report.json").read_text())
    assert report["passed"] and [c["id"] for c in report["criteria"]] == [1, 4, 13]


def test_ablate_mpg_small(tmp_path, small):
    out = tmp_path / "o"
    assert run(["ablate-mpg", "--config", small, "--out", out]) == EXIT_OK
    assert len(read_csv(out / "ablate_mpg.csv")) == 4
    assert stamp_ok(out / "ablate_mpg_summary.json", 3)


@pytest.mark.slow
def test_ablate_uac_fifty_seeds(tmp_path):
    out = tmp_path / "o"
    assert run(["ablate-uac", "--out", out]) == EXIT_OK
    rows = read_csv(out / "ablate_uac.csv")
    assert len(rows) == 50
    wins = sum(float(r["max_step_jump_no_uac"]) >= float(r["max_step_jump_uac"]) for r in rows)
    assert wins >= 45
