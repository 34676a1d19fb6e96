from __future__ import annotations

import json
import subprocess
import sys

import pytest

from certrank import cli as cli_mod

from pipeline import SUBCOMMANDS, cli, ctx_flags, run_all, tree


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    return (a, run_all(a)), (b, run_all(b))


def test_every_subcommand_succeeds(runs):
    (_, res), _ = runs
    assert set(res) == set(SUBCOMMANDS)
    assert {k: v[0] for k, v in res.items()} == {k: 0 for k in SUBCOMMANDS}


def test_runs_are_byte_identical(runs):
    (a, ra), (b, rb) = runs
    ta, tb = tree(a), tree(b)
    assert ta.keys() == tb.keys()
    assert [k for k in ta if ta[k] != tb[k]] == []
    assert {k: v[1] for k, v in ra.items()} == {k: v[1] for k, v in rb.items()}
    sidecars = [k for k in ta if k.endswith(".meta.json")]
    assert len(sidecars) >= len(SUBCOMMANDS)


def test_rebuilt_windows_match_generated(runs):
    (a, _), _ = runs
    for name in ("window_input.jsonl", "traj_pred.jsonl", "window_label.jsonl"):
        assert (a / "rebuilt" / name).read_bytes() == (a / "corpus" / name).read_bytes()


def test_evaluate_summary_and_sidecar(runs):
    (a, res), _ = runs
    head, row = res["evaluate"][1].splitlines()
    summary = dict(zip(head.split("\t"), row.split("\t")))
    assert summary["n_windows"] == "16" and float(summary["feasible_rate"]) == 1.0
    assert float(summary["cert_ndcg"]) <= float(summary["ndcg"])
    assert (a / "eval.jsonl.summary.tsv").read_text() == res["evaluate"][1]
    meta = json.loads((a / "eval.jsonl.meta.json").read_text())
    assert meta["command"] == "evaluate"
    assert meta["inputs"]["outputs"]["name"] == "rm.jsonl"
    assert meta["config"]["verifier"]["margin"] == 0.1


def test_validate_and_reward_reports(runs):
    (a, res), _ = runs
    assert res["validate"][1].startswith("feasible_rate\t1.000000\tn_windows\t16")
    rows = [json.loads(x) for x in (a / "reward.jsonl").read_text().splitlines()]
    for r in rows:
        assert r["totals"][1] == pytest.approx(-2.0 - 2.0 * 6 - 0.05 * 0.3)
        assert abs(sum(r["advantages"])) < 1e-9


def test_parallel_jobs_match_serial(runs, tmp_path):
    (a, _), _ = runs
    c = a / "corpus"
    for cmd, extra in (("align", []), ("verify", ["--outputs", a / "rm.jsonl"]),
                       ("validate", ["--outputs", a / "rm.jsonl"])):
        out = tmp_path / f"{cmd}.jsonl"
        code, _ = cli(cmd, *ctx_flags(c), *extra, "--jobs", 2, "--report", out)
        assert code == 0
        assert out.read_bytes() == (a / f"{cmd}.jsonl").read_bytes()


def test_config_file_precedence(runs, tmp_path):
    (a, _), _ = runs
    c = a / "corpus"
    conf = tmp_path / "cfg.json"
    conf.write_text(json.dumps({"k": 3, "verifier": {"margin": 0.3}}))
    rep = tmp_path / "v.jsonl"
    assert cli("verify", *ctx_flags(c), "--outputs", a / "rm.jsonl", "--config", conf,
               "--k", 2, "--report", rep)[0] == 0
    meta = json.loads((tmp_path / "v.jsonl.meta.json").read_text())
    assert meta["config"]["k"] == 2 and meta["config"]["verifier"]["margin"] == 0.3
    conf.write_text(json.dumps({"bogus": 1}))
    assert cli("verify", *ctx_flags(c), "--outputs", a / "rm.jsonl", "--config", conf,
               "--report", rep)[0] == 1


def test_input_errors_exit_one(runs, tmp_path):
    (a, _), _ = runs
    c = a / "corpus"
    assert cli("align", "--bogus-flag")[0] == 1
    assert cli("align", *ctx_flags(c))[0] == 1  # missing --report
    assert cli("align", "--windows", tmp_path / "missing.jsonl", "--trajs", c / "traj_pred.jsonl",
               "--skeletons", c / "skeleton.jsonl", "--docs", c / "doc_meta.jsonl",
               "--report", tmp_path / "r.jsonl")[0] == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"window_id": "w", "intent_id": "i"}\n')
    assert cli("align", "--windows", bad, "--trajs", c / "traj_pred.jsonl",
               "--skeletons", c / "skeleton.jsonl", "--docs", c / "doc_meta.jsonl",
               "--report", tmp_path / "r.jsonl")[0] == 1
    assert cli("gen", "--out", tmp_path / "g", "--roster-size", 1, "--positives", 3)[0] == 1


def test_internal_error_exits_two(monkeypatch, tmp_path):
    def boom(args, cfg):
        raise RuntimeError("invariant broken")
    monkeypatch.setitem(cli_mod.COMMANDS, "gen", boom)
    assert cli("gen", "--out", tmp_path / "g")[0] == 2


def test_module_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "certrank", "--help"], capture_output=True,
                          text=True, check=False)
    assert proc.returncode == 0 and "evaluate" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "certrank", "frobnicate"], capture_output=True,
                          text=True, check=False)
    assert proc.returncode == 1
