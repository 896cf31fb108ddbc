import json
import math
import os
from types import SimpleNamespace

import numpy as np
import pytest

import analyze_results as ar
import baselines
import discorl
import run_pipeline
from analyze_results import git_blob_sha1
from config import parse_override, resolve_config
from errors import ConfigError, DivergenceError, DomainError
from experiment_runner import write_manifest

TINY = ["--override", "train.iterations=1", "--override", "train.ppo_epochs=1",
        "--override", "train.episodes_per_task=2", "--override", "train.eval_every=0",
        "--override", "train.minibatch=32", "--override", "train.policy_hidden=[8]",
        "--override", "train.disc_hidden=[8]", "--override", "task_set.horizon=5",
        "--override", "task_set.d=6", "--b", "2"]


def read(path):
    with open(path, "rb") as f:
        return f.read()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("runs") / "discosyn")
    assert run_pipeline.main(["train-discosyn", "-o", out] + TINY) == 0
    return out


class TestConfig:
    def test_unknown_override_key_exits_with_config_error(self, tmp_path, capsys):
        code = run_pipeline.main(["train-discosyn", "-o", str(tmp_path), "--override", "train.alpha4=1.0"])
        assert code == 2
        assert "alpha4" in capsys.readouterr().err

    def test_unknown_key_in_file_reports_its_line(self, tmp_path, capsys):
        path = tmp_path / "exp.json"
        path.write_text('{\n  "train": {\n    "alpha4": 1.0\n  }\n}\n')
        assert run_pipeline.main(["train-discosyn", "-c", str(path), "-o", str(tmp_path / "out")]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_repeated_leaf_name_reports_the_offending_section(self):
        text = '{\n  "train": {\n    "b": 4\n  },\n  "baseline": {\n    "b": "four"\n  }\n}\n'
        with pytest.raises(ConfigError, match="line 6") as info:
            resolve_config(json.loads(text), text)
        assert info.value.line == 6

    def test_unknown_task_set_points_at_its_id(self):
        text = '{\n  "command": "train-discosyn",\n  "task_set": {\n    "id": "C"\n  }\n}\n'
        with pytest.raises(ConfigError, match="line 4"):
            resolve_config(json.loads(text), text)

    def test_wrong_type(self):
        with pytest.raises(ConfigError, match="train.gamma"):
            resolve_config({"train": {"gamma": "high"}})

    def test_invalid_value_caught_before_running(self, tmp_path):
        assert run_pipeline.main(["train-discosyn", "-o", str(tmp_path), "--override", "train.gamma=0"]) == 2
        assert not os.path.exists(tmp_path / "config.resolved.json")

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"train": }')
        assert run_pipeline.main(["train-discosyn", "-c", str(path), "-o", str(tmp_path / "out")]) == 2

    @pytest.mark.parametrize("item,expected", [
        ("train.alpha1=0.05", {"train": {"alpha1": 0.05}}),
        ("task_set.id=B", {"task_set": {"id": "B"}}),
        ("train.policy_hidden=[8, 8]", {"train": {"policy_hidden": [8, 8]}}),
        ("seed=3", {"seed": 3}),
    ])
    def test_parse_override(self, item, expected):
        assert parse_override(item) == expected

    def test_override_without_value(self):
        with pytest.raises(ConfigError):
            parse_override("train.alpha1")

    def test_defaults_are_materialized(self):
        resolved = resolve_config({}, overrides=["train.b=3"])
        assert resolved["train"]["b"] == 3
        assert resolved["train"]["gamma"] == 0.99
        assert resolved["task_set"]["id"] == "A"

    def test_reference_returns_accept_any_task_name(self):
        resolved = resolve_config({"train": {"reference_returns": {"valve0": 4.5}}})
        assert resolved["train"]["reference_returns"] == {"valve0": 4.5}

    def test_runs_only_for_report_analyze_eval(self, tmp_path):
        assert run_pipeline.main(["train-discosyn", "somewhere", "-o", str(tmp_path)]) == 2

    def test_transfer_needs_a_checkpoint(self, tmp_path):
        assert run_pipeline.main(["transfer", "-o", str(tmp_path)]) == 2


class TestPrincipalAngles:
    def test_same_basis(self):
        U = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 2)))[0]
        np.testing.assert_allclose(ar.principal_angles(U, U), [0.0, 0.0], atol=1e-7)

    def test_orthogonal_axes(self):
        e = np.eye(3)
        assert ar.principal_angles(e[:, :1], e[:, 1:2])[0] == pytest.approx(math.pi / 2)

    def test_diagonal(self):
        e = np.eye(2)
        diag = ((e[:, 0] + e[:, 1]) / math.sqrt(2))[:, None]
        assert ar.principal_angles(e[:, :1], diag)[0] == pytest.approx(math.pi / 4)

    def test_angles_are_sorted_and_bounded(self):
        rng = np.random.default_rng(1)
        U = np.linalg.qr(rng.normal(size=(6, 3)))[0]
        V = np.linalg.qr(rng.normal(size=(6, 2)))[0]
        angles = ar.principal_angles(U, V)
        assert len(angles) == 2
        assert np.all(np.diff(angles) >= 0) and np.all((angles >= 0) & (angles <= math.pi / 2))

    def test_non_orthonormal_input(self):
        with pytest.raises(DomainError):
            ar.principal_angles(np.array([[2.0], [0.0]]), np.eye(2)[:, :1])


class TestExports:
    def test_git_blob_hash(self):
        assert git_blob_sha1(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
        assert git_blob_sha1(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"

    def test_csv_cells(self, tmp_path):
        path = tmp_path / "t.csv"
        ar.write_csv(path, ["a", "b", "c", "d"], [[None, 0.1, np.int64(3), True]])
        assert path.read_text() == "a,b,c,d\n,0.1,3,true\n"

    def test_json_turns_nan_into_null(self, tmp_path):
        path = tmp_path / "t.json"
        ar.write_json(path, {"b": float("nan"), "a": np.array([1.0, 2.0])})
        assert json.loads(path.read_text()) == {"a": [1.0, 2.0], "b": None}
        assert path.read_text().startswith('{\n  "a"')


def write_run(run_dir, method, tasks, task_set=None, references=None, manifest=True):
    os.makedirs(run_dir, exist_ok=True)
    identity = task_set or {"set_id": "A", "d": 20, "seed": 0}
    ar.write_json(os.path.join(run_dir, "results.json"), {
        "method": method, "task_set": identity, "explained_variance": 0.9,
        "tasks": [{"name": n, "eval_return": r, "reference_return": ref} for n, r, ref in tasks]})
    if references is not None:
        ar.write_json(os.path.join(run_dir, "references.json"), {"task_set": identity, "returns": references})
    if manifest:
        write_manifest(run_dir)


class TestReport:
    def test_empty_report(self, tmp_path):
        table = ar.report([], str(tmp_path))
        assert table.rows == []
        assert (tmp_path / "success_table.csv").read_text() == "method,task_set,explained_variance\n"
        assert "No runs." in (tmp_path / "report.md").read_text()

    def test_missing_reference_is_marked(self, tmp_path):
        write_run(str(tmp_path / "r1"), "DiscoSyn4-L", [("valve0", 3.0, None)])
        table = ar.report([str(tmp_path / "r1")], str(tmp_path))
        assert table.rows[0].cells["valve0"].status == "no-ref"
        assert "no-ref" in (tmp_path / "success_table.csv").read_text()

    def test_references_shared_across_runs_of_one_set(self, tmp_path):
        write_run(str(tmp_path / "base"), "PCA4", [("valve0", 9.5, 10.0)], references={"valve0": 10.0})
        write_run(str(tmp_path / "disco"), "DiscoSyn4-L", [("valve0", 8.0, None)])
        table = ar.report([str(tmp_path / "base"), str(tmp_path / "disco")], str(tmp_path))
        assert [row.cells["valve0"].status for row in table.rows] == ["pass", "fail"]
        assert table.rows[1].cells["valve0"].reference_return == 10.0
        assert "✓" in (tmp_path / "report.md").read_text()

    def test_other_task_set_gets_no_reference(self, tmp_path):
        write_run(str(tmp_path / "base"), "PCA4", [("valve0", 9.5, 10.0)], references={"valve0": 10.0})
        write_run(str(tmp_path / "other"), "DiscoSyn4-L", [("valve0", 8.0, None)],
                  task_set={"set_id": "A", "d": 20, "seed": 1})
        table = ar.report([str(tmp_path / "base"), str(tmp_path / "other")], str(tmp_path))
        assert table.rows[1].cells["valve0"].status == "no-ref"

    def test_unreadable_run_is_listed(self, tmp_path):
        table = ar.report([str(tmp_path / "missing")], str(tmp_path))
        assert len(table.failures) == 1
        assert "Unreadable" in (tmp_path / "report.md").read_text()

    def test_rerun_gives_identical_bytes(self, tmp_path):
        write_run(str(tmp_path / "r"), "AE4", [("valve0", 1.0, 2.0), ("valve1", -1.0, -1.0)])
        for name in ("one", "two"):
            os.makedirs(tmp_path / name)
            ar.report([str(tmp_path / "r")], str(tmp_path / name))
        for name in ("success_table.csv", "report.md"):
            assert read(tmp_path / "one" / name) == read(tmp_path / "two" / name)

    def test_run_without_manifest_is_unreadable(self, tmp_path):
        write_run(str(tmp_path / "bare"), "PCA4", [("valve0", 9.5, 10.0)], manifest=False)
        table = ar.report([str(tmp_path / "bare")], str(tmp_path))
        assert table.rows == []
        assert "manifest.json" in table.failures[0]["error"]

    def test_edited_results_do_not_match_the_manifest(self, tmp_path):
        run_dir = str(tmp_path / "edited")
        write_run(run_dir, "PCA4", [("valve0", 9.5, 10.0)])
        write_run(run_dir, "PCA4", [("valve0", 99.0, 10.0)], manifest=False)
        table = ar.report([run_dir], str(tmp_path))
        assert table.rows == [] and "manifest hash" in table.failures[0]["error"]

    def test_published_figures_are_quoted_separately(self, tmp_path):
        write_run(str(tmp_path / "r"), "PCA4", [("valve0", 9.5, 10.0)])
        ar.report([str(tmp_path / "r")], str(tmp_path))
        text = (tmp_path / "report.md").read_text()
        assert "## Published reference figures (not reproduced)" in text
        for figure in ("62.8%", "50.8%", "41.5%", "100%"):
            assert figure in text
        assert "62.8" not in (tmp_path / "success_table.csv").read_text()


class TestCommands:
    def test_train_writes_outputs_and_manifest(self, tiny_run):
        for name in ("config.resolved.json", "task_set.json", "policy.json", "synergy.json", "disc.json",
                     "curves.csv", "z_samples.csv", "results.json", "manifest.json", "run.log"):
            assert os.path.exists(os.path.join(tiny_run, name)), name
        manifest = ar.read_json(os.path.join(tiny_run, "manifest.json"))["files"]
        assert "run.log" not in manifest and "manifest.json" not in manifest
        assert manifest["synergy.json"] == git_blob_sha1(read(os.path.join(tiny_run, "synergy.json")))
        results = ar.read_json(os.path.join(tiny_run, "results.json"))
        assert results["method"] == "DiscoSyn2-L"
        assert [t["name"] for t in results["tasks"]] == ["valve0", "valve1", "valve2", "valve3"]

    def test_same_seed_same_manifest(self, tiny_run, tmp_path):
        again = str(tmp_path / "again")
        assert run_pipeline.main(["train-discosyn", "-o", again] + TINY) == 0
        assert read(os.path.join(again, "manifest.json")) == read(os.path.join(tiny_run, "manifest.json"))

    def test_eval_and_analyze_read_a_run(self, tiny_run, tmp_path):
        assert run_pipeline.main(["eval", tiny_run, "-o", str(tmp_path / "eval")]) == 0
        lines = (tmp_path / "eval" / "eval.csv").read_text().splitlines()
        assert lines[0] == "task,eval_return" and len(lines) == 5
        assert run_pipeline.main(["analyze", tiny_run, "-o", str(tmp_path / "analysis")]) == 0
        analysis = ar.read_json(str(tmp_path / "analysis" / "analysis.json"))
        assert analysis["oracle_dim"] == 4 and len(analysis["principal_angles"]) == 2

    def test_report_over_a_run(self, tiny_run, tmp_path):
        assert run_pipeline.main(["report", tiny_run, "-o", str(tmp_path)]) == 0
        assert (tmp_path / "success_table.csv").read_text().startswith("method,task_set,valve0_status")

    def test_runtime_failure_exits_with_one(self, tmp_path, monkeypatch, capsys):
        def fail(*args, **kwargs):
            raise DivergenceError("Non-finite PPO loss", dump_path="state_dump.json")
        monkeypatch.setattr(discorl, "train", fail)
        assert run_pipeline.main(["train-discosyn", "-o", str(tmp_path)] + TINY) == 1
        assert "State dump: state_dump.json" in capsys.readouterr().err

    def test_transfer_on_a_trained_synergy(self, tiny_run, tmp_path):
        out = str(tmp_path / "transfer")
        args = ["transfer", "--synergy", os.path.join(tiny_run, "synergy.json"), "--task", "cw-valve",
                "--override", "transfer.iterations=1", "--override", "train.reference_returns={\"cw_valve\": 1.0}",
                "-o", out] + TINY
        assert run_pipeline.main(args) == 0
        header = (tmp_path / "transfer" / "first_reward.csv").read_text().splitlines()[0]
        assert header == "arm,seed,first_reward_step"
        results = ar.read_json(os.path.join(out, "results.json"))
        assert results["decoder_digest"]
        assert results["tasks"][0]["reference_return"] == 1.0

    def test_train_baseline_reports_on_its_own_hashed_results(self, tmp_path):
        out = str(tmp_path / "baseline")
        args = ["train-baseline", "--method", "pca", "--override", "baseline.episodes_per_task=2",
                "-o", out] + TINY
        assert run_pipeline.main(args) == 0
        table = ar.build_success_table([out])
        assert table.failures == [] and table.rows[0].method == "PCA2"
        manifest = ar.read_json(os.path.join(out, "manifest.json"))["files"]
        assert manifest["report.md"] == git_blob_sha1(read(os.path.join(out, "report.md")))
        assert "Unreadable" not in (tmp_path / "baseline" / "report.md").read_text()

    def test_transfer_reference_uses_the_transfer_budget(self, tiny_run, tmp_path, monkeypatch):
        seen = []

        def fake_reference(task, cfg, out_dir=None):
            seen.append((task.name, cfg.iterations))
            return SimpleNamespace(reference_return=1.0)
        monkeypatch.setattr(baselines, "train_independent", fake_reference)
        args = ["transfer", "--synergy", os.path.join(tiny_run, "synergy.json"), "--task", "cw-valve",
                "-o", str(tmp_path / "transfer")] + TINY + \
               ["--override", "train.iterations=7", "--override", "transfer.iterations=2"]
        assert run_pipeline.main(args) == 0
        assert seen == [("cw_valve", 2)]
