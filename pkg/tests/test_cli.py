"""CLI contracts: exit codes, document formats, determinism, joins."""

import json

import pytest

from multiprompt.cli import main
from multiprompt.report import body_bytes, load_json


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out


def test_cost_multiwoz_includes_ratio(capsys):
    code, out = run_cli(capsys, "cost", "--preset", "multiwoz", "--json")
    assert code == 0
    doc = json.loads(out[out.index("{") :])
    ratio = doc["body"]["flop_ratio"]
    assert 0.05 <= ratio <= 0.2


def test_cost_trivial_shape_rows_identical(capsys):
    code, out = run_cli(
        capsys, "cost", "--shape", "U=1,b=1,n_s=16,n_t=4,n_p=0,d=16,h=2", "--json"
    )
    assert code == 0
    doc = json.loads(out[out.index("{") :])
    bd = doc["body"]["breakdowns"]
    assert bd["pie"]["table1"]["components"] == bd["pid"]["table1"]["components"]


def test_unknown_preset_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["cost", "--preset", "definitely-not-a-preset"])
    assert exc.value.code == 2


def test_malformed_shape_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["cost", "--shape", "U=two"])
    assert exc.value.code == 2


def test_bench_requires_three_repetitions():
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--preset", "toy", "--reps", "2"])
    assert exc.value.code == 2


def test_bench_refuses_parallel():
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--preset", "toy", "--parallel"])
    assert exc.value.code == 2


def test_bench_resource_guard_exit_code():
    assert main(["bench", "--preset", "toy", "--mem-cap", "512"]) == 3


def test_bench_tokens_deterministic_across_runs(capsys, tmp_path):
    argv = [
        "bench", "--shape", "U=2,b=1,n_s=16,n_t=3,n_p=0,d=64,h=4", "--model", "toy",
        "--reps", "3", "--warmup", "0", "--batch-sizes", "1", "--seed", "5", "--json",
    ]
    code1, out1 = run_cli(capsys, *argv)
    code2, out2 = run_cli(capsys, *argv)
    assert code1 == code2 == 0
    doc1 = json.loads(out1[out1.index("{") :])
    doc2 = json.loads(out2[out2.index("{") :])
    sums1 = {e: t["token_checksum"] for e, t in doc1["body"]["engines"].items()}
    sums2 = {e: t["token_checksum"] for e, t in doc2["body"]["engines"].items()}
    assert sums1 == sums2


def test_verify_subset_deterministic_json(capsys):
    argv = [
        "verify", "--checks", "counter_additivity,intensity_formulas,flop_ratio_presets",
        "--seed", "3", "--json",
    ]
    code1, out1 = run_cli(capsys, *argv)
    code2, out2 = run_cli(capsys, *argv)
    assert code1 == code2 == 0
    doc1 = json.loads(out1[out1.index("{") :])
    doc2 = json.loads(out2[out2.index("{") :])
    assert body_bytes(doc1) == body_bytes(doc2)


def test_verify_fault_injection_fails_broadcast_check(capsys):
    code, out = run_cli(
        capsys, "verify", "--checks", "broadcast_equivalence",
        "--inject-fault", "corrupt-shared-kv",
    )
    assert code == 1
    assert "FAIL  broadcast_equivalence" in out


def test_verify_exit_zero_on_pass(capsys):
    code, out = run_cli(capsys, "verify", "--checks", "counter_additivity")
    assert code == 0
    assert "PASS  counter_additivity" in out


def test_report_join_and_duplicate_error(capsys, tmp_path):
    cost_path = tmp_path / "cost.json"
    verify_path = tmp_path / "verify.json"
    code, _ = run_cli(
        capsys, "cost", "--preset", "toy", "--seed", "9", "--out", str(cost_path)
    )
    assert code == 0
    code, _ = run_cli(
        capsys, "verify", "--checks", "counter_additivity", "--seed", "9",
        "--out", str(verify_path),
    )
    assert code == 0
    merged_csv = tmp_path / "merged.csv"
    code, out = run_cli(
        capsys, "report", str(cost_path), str(verify_path), "--out-csv", str(merged_csv)
    )
    assert code == 0
    lines = merged_csv.read_text().splitlines()
    assert lines[0].startswith("run_id,preset,shape,seed,cost_flop_ratio")
    assert len(lines) == 3  # header plus two disjoint run ids
    with pytest.raises(SystemExit) as exc:
        main(["report", str(cost_path), str(cost_path)])
    assert exc.value.code == 2


def test_out_dir_environment_variable(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("MULTIPROMPT_OUT_DIR", str(tmp_path))
    code, _ = run_cli(capsys, "cost", "--preset", "toy", "--out", "sub/cost.json")
    assert code == 0
    doc = load_json(tmp_path / "sub" / "cost.json")
    assert doc["meta"]["kind"] == "cost"
    assert doc["meta"]["version"]
    assert doc["config"]["hw_profile"] == "a100-as-printed"


def test_bench_rejects_model_shape_mismatch():
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--shape", "U=2,b=1,n_s=16,n_t=3,n_p=0,d=16,h=2", "--model", "toy"])
    assert exc.value.code == 2
