import io
import json

import numpy as np
import pytest

from attenmixer import cli, data, synthetic
from attenmixer.checkpoint import load_checkpoint, save_checkpoint
from attenmixer.sparsity import DensityReport

FAST = ["--set", "model.d=8", "--set", "model.L=2", "--set", "model.H=2", "--set", "train.max_epochs=2",
        "--set", "train.lr=0.01", "--set", "data.min_item_freq=1"]


def planted_events(path, n=600, seed=0, n_rows=3, n_cols=5):
    ds = synthetic.planted_pairs(n_rows=n_rows, n_cols=n_cols, n_train=n, n_valid=0, n_test=0, seed=seed)
    sessions = [[f"i{x}" for x in e.prefix + (e.target,)] for e in ds.train]
    return synthetic.write_events_csv(sessions, path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    events = planted_events(root / "events.csv")
    out = root / "out"
    assert cli.main(["--out", str(out), *FAST, "prep", "--input", str(events)]) == 0
    assert cli.main(["--out", str(out), *FAST, "train"]) == 0
    return root, out


def run(out, *args):
    return cli.main(["--out", str(out), *FAST, *args])


class TestPrep:
    def test_outputs(self, workspace):
        _, out = workspace
        summary = json.loads((out / "dataset_summary.json").read_text())
        assert summary["train"] > 0 and summary["test"] > 0
        assert summary["stats"]["sessions"] > 0
        assert data.load_dataset(out / "dataset.json").n_items == summary["stats"]["items"]

    def test_byte_identical_rerun(self, workspace, tmp_path):
        root, out = workspace
        assert run(tmp_path, "prep", "--input", str(root / "events.csv")) == 0
        assert (tmp_path / "dataset.json").read_bytes() == (out / "dataset.json").read_bytes()

    def test_missing_input(self, tmp_path, capsys):
        assert run(tmp_path, "prep", "--input", str(tmp_path / "nope.csv")) == 1
        assert "not found" in capsys.readouterr().err

    def test_malformed_input(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("session_id,item_id,timestamp\ns,a,1\ns,b\n")
        assert run(tmp_path, "prep", "--input", str(bad)) == 1
        assert "line 3" in capsys.readouterr().err


class TestTrainEval:
    def test_log_and_checkpoint(self, workspace):
        _, out = workspace
        lines = [json.loads(x) for x in (out / "train_log.jsonl").read_text().splitlines()]
        assert lines[0]["type"] == "config"
        assert [r["epoch"] for r in lines[1:]] == [1, 2]
        assert set(lines[1]) >= {"loss", "HR@20", "MRR@20", "train_seconds", "eval_seconds"}
        assert load_checkpoint(out / "checkpoint.amx").hyper.d == 8

    def test_retrain_is_bitwise_reproducible(self, workspace, tmp_path):
        _, out = workspace
        assert run(tmp_path, "train", "--cache", str(out / "dataset.json")) == 0
        assert (tmp_path / "checkpoint.amx").read_bytes() == (out / "checkpoint.amx").read_bytes()

    def test_eval_report(self, workspace, tmp_path):
        _, out = workspace
        assert run(tmp_path, "eval", "--checkpoint", str(out / "checkpoint.amx"),
                   "--cache", str(out / "dataset.json"), "--cutoffs", "1,20") == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert set(report["metrics"]) == {"HR@1", "HR@20", "MRR@1", "MRR@20"}
        assert report["split"] == "test"
        assert (tmp_path / "buckets.tsv").read_text().startswith("bucket\tcount")

    def test_variant_flag(self, workspace, tmp_path):
        _, out = workspace
        assert run(tmp_path, "train", "--cache", str(out / "dataset.json"), "--variant", "M") == 0
        ckpt = load_checkpoint(tmp_path / "checkpoint.amx")
        assert ckpt.hyper.variant == "M"
        assert "query_2" not in ckpt.params

    def test_unknown_config_key(self, workspace, tmp_path):
        assert run(tmp_path, "--set", "model.depth=3", "train") == 1


class TestRecommend:
    def test_top_k_lines(self, workspace, capsys, monkeypatch):
        _, out = workspace
        monkeypatch.setattr("sys.stdin", io.StringIO("i1 i4\ni2,i5,i3\n"))
        assert run(out, "recommend", "--topk", "5") == 0
        rows = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
        assert len(rows) == 2
        assert len(rows[0]["items"]) == 5
        assert rows[0]["scores"] == sorted(rows[0]["scores"], reverse=True)

    def test_unknown_item(self, workspace, capsys):
        _, out = workspace
        assert run(out, "recommend", "--session", "i1 nonexistent") == 1
        assert "nonexistent" in capsys.readouterr().err

    def test_vocabulary_mismatch(self, workspace, tmp_path, capsys):
        root, out = workspace
        ckpt = load_checkpoint(out / "checkpoint.amx")
        ckpt.vocab_digest = "0" * 64
        save_checkpoint(ckpt, tmp_path / "other.amx")
        assert run(out, "recommend", "--checkpoint", str(tmp_path / "other.amx"), "--session", "i1") == 1
        assert "vocabulary" in capsys.readouterr().err


class TestRecommendOverfit:
    def test_pattern_successor_and_full_permutation(self, tmp_path, capsys):
        sessions = [["a", "b"]] * 30 + [["c", "d"]] * 30
        events = synthetic.write_events_csv(sessions, tmp_path / "ab.csv")
        args = ["--out", str(tmp_path), "--set", "model.d=8", "--set", "model.L=1", "--set", "model.H=1",
                "--set", "train.lr=0.05", "--set", "train.max_epochs=20", "--set", "train.patience=20",
                "--set", "data.min_item_freq=1"]
        assert cli.main([*args, "prep", "--input", str(events)]) == 0
        assert cli.main([*args, "train"]) == 0
        capsys.readouterr()
        assert cli.main([*args, "recommend", "--topk", "1", "--session", "a"]) == 0
        assert json.loads(capsys.readouterr().out)["items"] == ["b"]
        assert cli.main([*args, "recommend", "--topk", "4", "--session", "c"]) == 0
        assert sorted(json.loads(capsys.readouterr().out)["items"]) == ["a", "b", "c", "d"]


class TestSweep:
    def test_grid_and_plot_data(self, workspace, tmp_path):
        _, out = workspace
        cache = str(out / "dataset.json")
        assert run(tmp_path, "sweep", "--cache", cache, "--L", "1,2", "--H", "1") == 0
        results = (tmp_path / "sweep" / "results.tsv").read_text().splitlines()
        assert results[0].startswith("# config")
        assert len(results) == 2 + 2
        plot = tmp_path / "plot"
        assert run(tmp_path, "eval", "--checkpoint", str(tmp_path / "sweep"), "--cache", cache,
                   "--emit-plot-data", str(plot)) == 0
        assert (plot / "hr20_vs_L.tsv").read_text().splitlines()[0] == "x\ty"
        assert (plot / "series_L2.tsv").exists()

    def test_failing_point_is_marked(self, workspace, tmp_path):
        _, out = workspace
        assert run(tmp_path, "--set", "sweep.lr=[-1.0, 0.01]", "sweep", "--cache", str(out / "dataset.json"),
                   "--L", "1", "--H", "1") == 3
        rows = (tmp_path / "sweep" / "results.tsv").read_text().splitlines()[2:]
        assert rows[0].split("\t")[-1].startswith("failed")
        assert rows[1].split("\t")[-1] == "ok"
        assert (tmp_path / "sweep" / "L1_H1_lr0.01" / "checkpoint.amx").exists()


class TestProbeCommand:
    def test_tsv(self, workspace, tmp_path):
        _, out = workspace
        assert run(tmp_path, "--set", "probe.epochs=2", "--set", "probe.lam=1.0", "probe",
                   "--cache", str(out / "dataset.json")) == 0
        report = DensityReport.read(tmp_path / "probe.tsv")
        assert sorted({r["name"] for r in report.records}) == ["head_key", "head_query", "merge"]
        assert [r["epoch"] for r in report.records if r["name"] == "merge"] == [0, 1, 2]
        assert all(0.0 <= r["rho"] <= 1.0 for r in report.records)


def test_planted_pairs_favour_two_levels(tmp_path):
    # the target depends on the unordered last pair, which a level-2 query sees directly
    events = planted_events(tmp_path / "events.csv", n=2000, seed=1, n_rows=4, n_cols=12)
    args = ["--out", str(tmp_path), "--set", "model.d=16", "--set", "model.H=1", "--set", "train.lr=0.01",
            "--set", "train.max_epochs=12", "--set", "train.patience=12", "--set", "data.min_item_freq=1"]
    assert cli.main([*args, "prep", "--input", str(events)]) == 0
    assert cli.main([*args, "sweep", "--L", "1,2", "--H", "1"]) == 0
    rows = (tmp_path / "sweep" / "results.tsv").read_text().splitlines()[2:]
    hr = {int(r.split("\t")[0]): float(r.split("\t")[3]) for r in rows}
    assert hr[1] < 0.99
    assert hr[2] >= hr[1]
