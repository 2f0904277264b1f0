import csv
import json

import numpy as np
import pytest

from teamform import checks, env, harness
from teamform import diffcore as dc
from teamform.errors import ConfigError
from teamform.nets import ModelConfig, init_params


@pytest.fixture(scope="module")
def untrained(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "untrained.tfrm"
    store = init_params(ModelConfig(), np.random.default_rng(0)).astype(np.float32)
    dc.save_checkpoint(store, str(path))
    return path, store


def record_file(tmp_path, prefs):
    path = tmp_path / "prefs.json"
    path.write_text(json.dumps(prefs.to_record()))
    return str(path)


def test_match_command_on_fixture(tmp_path, capsys):
    prefs, _ = checks.oom_fixture()
    assert harness.cli(["match", record_file(tmp_path, prefs), "--certify"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["teams"] == [{"leader": 0, "followers": [3, 4]}, {"leader": 1, "followers": [2]}]
    assert out["blocking_pairs"] == []


def test_match_command_reports_som_blocking_pair(tmp_path, capsys):
    prefs, _ = checks.som_fixture()
    assert harness.cli(["match", record_file(tmp_path, prefs), "--algo", "som", "--certify"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["blocking_pairs"] == [[0, 3]]


@pytest.mark.parametrize("argv", [[], ["fly"], ["match"], ["eval"], ["describe", "/no/such/file"],
                                  ["eval", "--baseline", "--agents", "5"],
                                  ["check", "--only", "nothing"]])
def test_usage_errors_exit_2(argv, capsys):
    assert harness.cli(argv) == 2
    assert capsys.readouterr().err


def test_bad_record_exits_2(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"agents": 3, "leaders": 1, "scores": [0.0] * 4}))
    assert harness.cli(["match", str(path)]) == 2
    path.write_text("{not json")
    assert harness.cli(["match", str(path)]) == 2


def test_check_command(capsys):
    assert harness.cli(["check", "--only", "oom_fixture", "--only", "loss_arithmetic"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("PASS") and lines[-1] == "2/2 checks passed"


def test_describe_command(untrained, capsys):
    path, store = untrained
    assert harness.cli(["describe", str(path)]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in store)


def test_eval_and_replay_commands(untrained, tmp_path, capsys):
    path, _ = untrained
    out = tmp_path / "eval"
    trace = tmp_path / "trace.jsonl"
    argv = ["eval", "--oom", str(path), "--som", str(path), "--agents", "6", "--leaders", "2",
            "--episodes", "4", "--seeds", "2", "--baseline", "--trace", str(trace), "--out", str(out)]
    assert harness.cli(argv) == 0
    rows = list(csv.reader(open(out / "eval.csv")))
    assert rows[0] == harness.EVAL_CSV_HEADER
    assert [r[0] for r in rows[1:]] == ["oom", "som", "random"]
    assert float(rows[1][6]) == 0.0
    assert "p=" in capsys.readouterr().out
    assert (out / "table.txt").read_text().startswith("algo")
    assert len(json.loads((out / "summary.json").read_text())) == 3
    assert harness.cli(["replay", str(trace), "--episode", "0"]) == 0
    assert capsys.readouterr().out.startswith("episode 0 t=1")


def test_composition_validation():
    with pytest.raises(ConfigError):
        harness.EvalComposition(agents=5, leaders=3)
    harness.EvalComposition(agents=6, leaders=3)


def report(algo, agents, leaders, means, blocking=0.0):
    means = np.asarray(means, dtype=float)
    return harness.EvalReport(algo, agents, leaders, list(means), float(means.mean()),
                              float(means.std(ddof=1)), 0.0, blocking, 1.0, 10)


def test_composition_table_layout():
    reports = [report("oom", 6, 2, [-0.4, -0.5]), report("oom", 8, 4, [-0.3, -0.3]),
               report("som", 6, 2, [-0.45, -0.5], blocking=0.2)]
    lines = harness.composition_table(reports, training={"oom": -0.25}).splitlines()
    assert lines[0].split()[:2] == ["algo", "leaders"]
    assert lines[1].startswith("oom (bp=0)") and "-0.250" in lines[1]
    assert "-0.450 +- 0.071" in lines[1] and lines[1].rstrip().endswith("-")
    assert lines[3].startswith("som ") and "bp" not in lines[3]
    assert harness.composition_table([]).split() == lines[0].split()


def test_seed_mean_pvalue():
    a, b = report("oom", 6, 2, [1.0, 1.0]), report("random", 6, 2, [1.0, 1.0])
    assert harness.seed_mean_pvalue(a, b) == 1.0
    assert harness.seed_mean_pvalue(a, report("random", 6, 2, [0.0, 0.0])) == 0.0
    p = harness.seed_mean_pvalue(report("oom", 6, 2, [0.0, 0.1, 0.2]),
                                 report("random", 6, 2, [5.0, 5.1, 5.3]))
    assert p < 1e-3


def test_evaluation_is_reproducible(untrained):
    _, store = untrained
    comp = harness.EvalComposition(6, 3, episodes=6)
    a = harness.evaluate_cell(store, comp, env.WorldConfig(), seeds=3, base_seed=4)
    b = harness.evaluate_cell(store, comp, env.WorldConfig(), seeds=3, base_seed=4)
    assert a == b and len(a.seed_means) == 3


@pytest.fixture(scope="module")
def untrained_grid(untrained):
    _, store = untrained
    return harness.evaluate({"oom": store}, episodes=200, seeds=5, baseline=True)


def test_untrained_greedy_policy_sits_at_the_timeout_floor(untrained_grid):
    floor = -env.WorldConfig().step_penalty * env.WorldConfig().max_steps
    net = [r for r in untrained_grid if r.algo == "oom"]
    assert len(net) == len(harness.EVAL_CELLS)
    assert all(r.blocking_pair_rate == 0 for r in net)
    for r in net:
        assert r.mean_return == pytest.approx(floor) and r.capture_rate == 0


@pytest.mark.xfail(strict=True, reason="a fixed greedy policy never captures, so it scores below "
                   "chance in some cells; see the decisions ledger")
def test_untrained_network_is_indistinguishable_from_random(untrained_grid):
    pvalues = harness.baseline_pvalues(untrained_grid)
    assert min(pvalues.values()) > 0.01, pvalues
