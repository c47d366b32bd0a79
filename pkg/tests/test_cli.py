import json

import numpy as np
import pytest

from pointshell import cli, data as dio
from pointshell.geometry import PointCloud, knn_query, partition_shells_fixed


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A dataset plus a short training run shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    ds_dir = root / "ds"
    run_dir = root / "run"
    assert cli.main([
        "gen-data", "--kind", "shapes", "--out", str(ds_dir),
        "--points", "48", "--num-per-class", "3", "--train-per-class", "2",
        "--seed", "5",
    ]) == 0
    assert cli.main([
        "train", "--data", str(ds_dir), "--out", str(run_dir),
        "--epochs", "2", "--seed", "3",
        "--set", "network.layers=[[16,2,8],[8,1,16]]",
        "--set", "network.shell_size=4",
        "--set", "network.head_widths=[16]",
        "--set", "train.batch_size=8",
        "--set", "train.eval_every=2",
    ]) == 0
    return {"ds": ds_dir, "run": run_dir, "root": root}


class TestGenData:
    def test_manifest_and_files(self, workspace):
        ds = dio.load_dataset(workspace["ds"])
        assert len(ds.clouds) == 24
        assert len(ds.train_indices) == 16

    def test_parts_kind(self, tmp_path):
        out = tmp_path / "parts"
        assert cli.main([
            "gen-data", "--kind", "parts", "--out", str(out),
            "--points", "32", "--num-objects", "5", "--seed", "1",
        ]) == 0
        ds = dio.load_dataset(out)
        assert ds.kind == "parts"


class TestTrain:
    def test_artifacts_written(self, workspace):
        assert (workspace["run"] / "checkpoint.ckpt").exists()
        lines = (workspace["run"] / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2
        record = json.loads(lines[-1])
        assert record["test"] is not None

    def test_echoes_resolved_config(self, workspace, capsys, tmp_path):
        cli.main([
            "train", "--data", str(workspace["ds"]), "--out", str(tmp_path / "r"),
            "--epochs", "1",
            "--set", "network.layers=[[16,2,8],[8,1,16]]",
            "--set", "network.shell_size=4",
            "--set", "train.batch_size=8",
        ])
        out = capsys.readouterr().out
        assert "resolved config:" in out
        assert '"shell_size": 4' in out

    def test_unknown_key_rejected(self, workspace, tmp_path):
        code = cli.main([
            "train", "--data", str(workspace["ds"]), "--out", str(tmp_path / "r"),
            "--set", "network.bogus=1",
        ])
        assert code == 2

    def test_missing_dataset(self, tmp_path):
        code = cli.main([
            "train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r"),
        ])
        assert code == 3

    def test_preset_applies(self, workspace, capsys, tmp_path):
        cli.main([
            "train", "--data", str(workspace["ds"]), "--out", str(tmp_path / "r"),
            "--epochs", "1", "--preset", "B",
            "--set", "network.layers=[[16,2,8],[8,1,16]]",
            "--set", "network.shell_size=4",
            "--set", "train.batch_size=8",
        ])
        out = capsys.readouterr().out
        assert '"sampling": "farthest"' in out

    def test_config_file_with_override(self, workspace, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "network": {"layers": [[16, 2, 8], [8, 1, 16]], "shell_size": 4},
            "train": {"batch_size": 8, "epochs": 5},
        }))
        code = cli.main([
            "train", "--data", str(workspace["ds"]), "--out", str(tmp_path / "r"),
            "--config", str(cfg_path), "--set", "train.epochs=1",
        ])
        assert code == 0
        assert '"epochs": 1' in capsys.readouterr().out


class TestEvalInfer:
    def test_eval_record(self, workspace, capsys):
        code = cli.main([
            "eval", "--checkpoint", str(workspace["run"] / "checkpoint.ckpt"),
            "--data", str(workspace["ds"]),
        ])
        assert code == 0
        record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert 0.0 <= record["overall_accuracy"] <= 1.0
        assert len(record["per_class_accuracy"]) == 8

    def test_infer_writes_labeled_cloud(self, workspace, tmp_path):
        src = next(iter((workspace["ds"]).glob("cloud_*.pcld")))
        out = tmp_path / "labeled.pcld"
        code = cli.main([
            "infer", "--checkpoint", str(workspace["run"] / "checkpoint.ckpt"),
            "--input", str(src), "--out", str(out),
        ])
        assert code == 0
        cloud = dio.read_cloud(out)
        assert isinstance(cloud.labels, int)
        np.testing.assert_array_equal(cloud.points, dio.read_cloud(src).points)

    def test_infer_does_not_mutate_input(self, workspace, tmp_path):
        src = next(iter((workspace["ds"]).glob("cloud_*.pcld")))
        before = src.read_bytes()
        cli.main([
            "infer", "--checkpoint", str(workspace["run"] / "checkpoint.ckpt"),
            "--input", str(src), "--out", str(tmp_path / "o.pcld"),
        ])
        assert src.read_bytes() == before


class TestInspect:
    def test_fixture_matches_partition_oracle(self, tmp_path, capsys):
        rng = np.random.default_rng(2)
        cloud = PointCloud(rng.uniform(-1, 1, (9, 3)).astype(np.float32))
        path = tmp_path / "fix.pcld"
        dio.write_cloud(cloud, path)
        csv_path = tmp_path / "shells.csv"
        code = cli.main([
            "inspect", "--input", str(path), "--center", "0",
            "--shell-size", "4", "--num-shells", "2", "--csv", str(csv_path),
        ])
        assert code == 0
        ns = knn_query(cloud, 0, 8)
        part = partition_shells_fixed(ns, 4, 2)
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "center,shell,member,distance,shell_radius"
        rows = [line.split(",") for line in lines[1:]]
        assert len(rows) == 8
        for shell_id, shell in enumerate(part.shells):
            members = [int(r[2]) for r in rows if int(r[1]) == shell_id]
            assert members == shell.tolist()
        out = capsys.readouterr().out
        assert "shell 0" in out and "shell 1" in out

    def test_resume_flag(self, workspace, tmp_path, capsys):
        code = cli.main([
            "train", "--data", str(workspace["ds"]), "--out", str(tmp_path / "r2"),
            "--resume", str(workspace["run"] / "checkpoint.ckpt"),
            "--epochs", "3",
        ])
        assert code == 0
        assert "epoch 2" in capsys.readouterr().out


class TestGradcheckCommand:
    def test_passes(self, capsys):
        code = cli.main(["gradcheck", "--seeds", "2"])
        assert code == 0
        out = capsys.readouterr().out
        assert "shell_conv" in out and "FAIL" not in out


class TestBenchCommand:
    def test_reports_parameters_and_reference(self, capsys):
        code = cli.main(["bench", "--input-size", "256", "--batch", "2"])
        assert code == 0
        out = capsys.readouterr().out
        assert "471,912" in out
        assert "0.48M" in out
        assert "convention" in out
