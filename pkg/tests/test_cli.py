import json
import subprocess
import sys

import pytest

from fedsa import cli
from fedsa import experiments as X

CHEAP = ["--n-train", "20", "--n-test", "20", "--pretrain-epochs", "2", "--floor", "0", "--rounds", "2",
         "--selective-gap", "1", "--local-epochs", "1", "--adapt-epochs", "2", "--label-fraction", "0.25"]


def run(capsys, *args):
    code = cli.main(list(args))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def out(tmp_path):
    return tmp_path / "out"


def test_pretrain_creates_dir_then_reports_cached(capsys, out):
    code, stdout, err = run(capsys, "pretrain", *CHEAP, "--out-dir", str(out / "new" / "dir"))
    assert code == 0 and "wrote" in err
    tdir = stdout.strip()
    assert sorted(p.name for p in (out / "new" / "dir").glob("teachers/*/*")) == \
        ["config.txt"] + [f"node{i}.fsa" for i in range(6)]
    code, stdout2, err = run(capsys, "pretrain", *CHEAP, "--out-dir", str(out / "new" / "dir"))
    assert code == 0 and err.count("cached") == 6 and stdout2.strip() == tdir


def test_pretrain_is_byte_identical(capsys, out):
    a, b = out / "a", out / "b"
    for d in (a, b):
        assert run(capsys, "pretrain", *CHEAP, "--seed", "7", "--out-dir", str(d))[0] == 0
    fa = sorted(a.rglob("*.fsa"))
    fb = sorted(b.rglob("*.fsa"))
    assert len(fa) == 6
    assert [p.read_bytes() for p in fa] == [p.read_bytes() for p in fb]


def test_env_var_sets_output_root(capsys, out, monkeypatch):
    monkeypatch.setenv(X.OUTPUT_ROOT_ENV, str(out / "env"))
    assert run(capsys, "pretrain", *CHEAP)[0] == 0
    assert len(list((out / "env" / "teachers").rglob("*.fsa"))) == 6


@pytest.mark.parametrize("args", [["run", "--rounds", "0"], ["run", "--k", "x"], ["run", "--bogus"],
                                  ["run", "--set", "nope=1"], ["run", "--strategy", "fixed", "--fixed-ids", "9"],
                                  ["run", "--config", "/nonexistent.cfg"], []])
def test_config_errors_exit_1(capsys, args):
    assert run(capsys, *args)[0] == 1


def test_missing_teachers_exit_2(capsys, out):
    code, _, err = run(capsys, "run", *CHEAP, "--out-dir", str(out))
    assert code == 2 and "pretrain" in err


def test_run_writes_outputs_and_eval_agrees(capsys, out):
    run(capsys, "pretrain", *CHEAP, "--out-dir", str(out))
    code, stdout, _ = run(capsys, "run", *CHEAP, "--out-dir", str(out), "--name", "r1")
    assert code == 0
    rdir = out / "runs" / "r1"
    lines = (rdir / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert list(rec)[:6] == ["round", "selected", "probs", "kd_loss_per_node", "test_acc", "wall_ms"]
    assert rec["wall_ms"] is None
    summary = json.loads((rdir / "summary.json").read_text())
    assert json.loads(stdout)["final_test_acc"] == summary["final_test_acc"]
    code, stdout, _ = run(capsys, "eval", *CHEAP, "--out-dir", str(out), str(rdir / "target.fsa"))
    assert code == 0 and json.loads(stdout)["test_acc"] == summary["final_test_acc"]
    # the echo reproduces the configuration
    echo = X.parse_config_text((rdir / "config.txt").read_text())
    assert X.ExperimentConfig.from_mapping(echo).to_text() == (rdir / "config.txt").read_text()
    assert summary["config"]["federation.rounds"] == "2"
    assert echo["data.n_train"] == 20 and echo["output.name"] == "r1"


def test_fixed_ids_show_in_metrics(capsys, out):
    run(capsys, "pretrain", *CHEAP, "--out-dir", str(out))
    code, _, _ = run(capsys, "run", *CHEAP, "--out-dir", str(out), "--name", "fx", "--strategy", "fixed",
                     "--fixed-ids", "0,1,2", "--k", "3")
    assert code == 0
    recs = [json.loads(s) for s in (out / "runs" / "fx" / "metrics.jsonl").read_text().splitlines()]
    assert all(r["selected"] == [0, 1, 2] for r in recs)


def test_config_file_and_flag_precedence(capsys, out, tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# comment\nfederation.rounds = 3  # inline\nseed = 4\n\ndata.noise=0.2\n")
    parsed = X.parse_config_text(cfg.read_text())
    assert parsed == {"federation.rounds": 3, "seed": 4, "data.noise": 0.2}
    args = cli.build_parser().parse_args(["run", "--config", str(cfg), "--seed", "9", "--set", "federation.k=3"])
    resolved = cli.resolve_config(args)
    assert resolved["seed"] == 9 and resolved["federation.rounds"] == 3 and resolved["federation.k"] == 3
    again = X.ExperimentConfig.from_mapping(X.parse_config_text(resolved.to_text()))
    assert again.values == resolved.values


def test_config_file_errors_name_the_line(tmp_path):
    with pytest.raises(X.F.ConfigError, match="exp.cfg:2"):
        X.parse_config_text("seed = 1\nfederation.rounds 3\n", "exp.cfg")


def test_ablate_grid_records_and_sorted_table(capsys, out):
    code, stdout, _ = run(capsys, "ablate", *CHEAP, "--rounds", "1", "--out-dir", str(out),
                          "--strategies", "fedsa,topk", "--aggregations", "unweighted", "--seeds", "0,1,2")
    assert code == 0
    adir = next((out / "ablations").iterdir())
    records = [json.loads(s) for s in (adir / "runs.jsonl").read_text().splitlines()]
    assert len(records) == 6
    rows = X.ablation_table(records)
    means = [r["mean"] for r in rows]
    assert means == sorted(means, reverse=True)
    assert stdout.strip() == (adir / "table.txt").read_text().strip()
    code, stdout2, _ = run(capsys, "ablate", *CHEAP, "--rounds", "1", "--out-dir", str(out),
                           "--strategies", "fedsa,topk", "--aggregations", "unweighted", "--seeds", "0,1,2")
    assert stdout2 == stdout


def test_saliency_report_single_teacher_is_undefined():
    assert X.rank_correlation([0.5], [0.9]) is None
    assert X.rank_correlation([0.5, 0.5], [0.1, 0.9]) is None
    assert X.min_max([0.2, 0.6, 1.0]) == pytest.approx([0.0, 0.5, 1.0])
    assert X.rank_correlation([1, 2, 3], [2, 4, 9]) == pytest.approx(1.0)


def test_saliency_report_cli(capsys, out):
    code, stdout, _ = run(capsys, "saliency-report", *CHEAP, "--out-dir", str(out))
    assert code == 0
    lines = stdout.strip().splitlines()
    assert len(lines) == 8 and lines[-1].startswith("spearman rho: ")


def test_saliency_report_teacher_equal_to_target(out):
    cfg = X.ExperimentConfig.from_mapping({"data.n_train": 20, "data.n_test": 20, "pretrain.epochs": 2,
                                           "pretrain.floor": 0.0, "output.dir": str(out)})
    nodes = X.ensure_teachers(cfg)
    rep = X.saliency_report(cfg, nodes, target_params=nodes[2].params)
    assert rep.normalized[2] == 1.0 and rep.similarity[2] == pytest.approx(1.0)


def test_module_entry_point(out):
    proc = subprocess.run([sys.executable, "-m", "fedsa.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "fedsa" in proc.stdout
