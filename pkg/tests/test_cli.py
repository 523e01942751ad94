"""End-to-end tests of the command-line client (in-process service)."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from hiocc.cli import main
from hiocc.kitti_io import write_label_volume

DIMS_FLAG = "8,8,4"


@pytest.fixture()
def runner():
    return CliRunner()


def write_scene(path, rng):
    labels = np.zeros((8, 8, 4), dtype=np.uint16)
    labels[rng.random((8, 8, 4)) < 0.4] = 10  # car
    labels[:, :, 0] = 40  # road
    write_label_volume(path, labels)
    return labels


class TestStats:
    def test_csv_to_stdout(self, runner, tmp_path, rng):
        write_scene(tmp_path / "000000.label", rng)
        r = runner.invoke(
            main,
            ["stats", "--data-dir", str(tmp_path), "--dims", DIMS_FLAG, "--level", "1"],
        )
        assert r.exit_code == 0, r.output
        lines = r.stdout.strip().splitlines()
        assert lines[0].startswith("frame,level,dims")
        assert any(line.startswith("ALL,") for line in lines)

    def test_out_file(self, runner, tmp_path, rng):
        write_scene(tmp_path / "000000.label", rng)
        out = tmp_path / "stats.csv"
        r = runner.invoke(
            main,
            [
                "stats",
                "--data-dir",
                str(tmp_path),
                "--dims",
                DIMS_FLAG,
                "--out",
                str(out),
            ],
        )
        assert r.exit_code == 0
        assert out.read_text().startswith("frame,level,dims")

    def test_partial_failure_exit_1(self, runner, tmp_path, rng):
        write_scene(tmp_path / "000000.label", rng)
        (tmp_path / "000001.label").write_bytes(b"bad")
        r = runner.invoke(
            main, ["stats", "--data-dir", str(tmp_path), "--dims", DIMS_FLAG]
        )
        assert r.exit_code == 1
        assert "failed: 000001" in r.stderr

    def test_missing_dir_exit_2(self, runner, tmp_path):
        r = runner.invoke(
            main, ["stats", "--data-dir", str(tmp_path / "nope"), "--dims", DIMS_FLAG]
        )
        assert r.exit_code == 2
        assert "not a directory" in r.stderr

    def test_bad_dims_exit_2(self, runner, tmp_path):
        r = runner.invoke(
            main, ["stats", "--data-dir", str(tmp_path), "--dims", "8,8"]
        )
        assert r.exit_code == 2


class TestEval:
    def test_perfect_prediction(self, runner, tmp_path, rng):
        gt_dir = tmp_path / "gt"
        pred_dir = tmp_path / "pred"
        gt_dir.mkdir()
        pred_dir.mkdir()
        labels = write_scene(gt_dir / "000000.label", rng)
        write_label_volume(pred_dir / "000000.label", labels)
        out = tmp_path / "report.json"
        r = runner.invoke(
            main,
            [
                "eval",
                "--pred-dir",
                str(pred_dir),
                "--gt-dir",
                str(gt_dir),
                "--dims",
                DIMS_FLAG,
                "--out",
                str(out),
            ],
        )
        assert r.exit_code == 0, r.output
        assert "occupancy IoU" in r.stdout
        report = json.loads(out.read_text())
        assert report["metrics"]["miou"] == 1.0
        assert report["frames_evaluated"] == ["000000"]

    def test_skipped_frame_exit_1(self, runner, tmp_path, rng):
        gt_dir = tmp_path / "gt"
        pred_dir = tmp_path / "pred"
        gt_dir.mkdir()
        pred_dir.mkdir()
        labels = write_scene(gt_dir / "000000.label", rng)
        write_label_volume(pred_dir / "000000.label", labels)
        write_scene(gt_dir / "000001.label", rng)
        r = runner.invoke(
            main,
            [
                "eval",
                "--pred-dir",
                str(pred_dir),
                "--gt-dir",
                str(gt_dir),
                "--dims",
                DIMS_FLAG,
            ],
        )
        assert r.exit_code == 1
        assert "skipped: 000001" in r.stderr


class TestGradcheck:
    def test_pass_table(self, runner):
        r = runner.invoke(main, ["gradcheck", "--trials", "2", "--seed", "0"])
        assert r.exit_code == 0, r.output
        assert "multiclass_scal_geo" in r.stdout
        assert "FAIL" not in r.stdout
        assert r.stdout.count("pass") == 11

    def test_corrupt_negative_control(self, runner):
        r = runner.invoke(
            main,
            ["gradcheck", "--trials", "2", "--corrupt", "smooth_l1"],
        )
        assert r.exit_code == 1
        assert "FAIL" in r.stdout

    def test_out_json(self, runner, tmp_path):
        out = tmp_path / "grad.json"
        r = runner.invoke(
            main, ["gradcheck", "--trials", "1", "--out", str(out)]
        )
        assert r.exit_code == 0
        rows = json.loads(out.read_text())
        assert len(rows) == 11 and all(row["passed"] for row in rows)


class TestDemo:
    def test_writes_artifacts(self, runner, tmp_path):
        out = tmp_path / "demo"
        r = runner.invoke(
            main, ["demo", "--seed", "2", "--k", "8", "--out", str(out)]
        )
        assert r.exit_code == 0, r.output
        summary = json.loads(r.stdout)
        assert summary["k_effective"] == 8
        assert summary["rule"] == "learned"
        for name in ("pred.label", "gt.label", "selection.json", "summary.json"):
            assert (out / name).exists()

    def test_deterministic_per_seed(self, runner, tmp_path):
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            r = runner.invoke(
                main, ["demo", "--seed", "5", "--k", "4", "--out", str(out)]
            )
            assert r.exit_code == 0
            outs.append((out / "pred.label").read_bytes())
        assert outs[0] == outs[1]

    def test_entropy_rule(self, runner, tmp_path):
        out = tmp_path / "demo"
        r = runner.invoke(
            main,
            ["demo", "--seed", "2", "--k", "8", "--rule", "entropy", "--out", str(out)],
        )
        assert r.exit_code == 0, r.output
        assert json.loads(r.stdout)["rule"] == "entropy"

    def test_eval_consumes_demo_output(self, runner, tmp_path):
        # The demo's training-id volumes evaluate through `eval --config`.
        out = tmp_path / "demo"
        r = runner.invoke(
            main, ["demo", "--seed", "3", "--k", "16", "--out", str(out)]
        )
        assert r.exit_code == 0, r.output
        gt_dir = tmp_path / "gt"
        pred_dir = tmp_path / "pred"
        gt_dir.mkdir()
        pred_dir.mkdir()
        (gt_dir / "000000.label").write_bytes((out / "gt.label").read_bytes())
        (pred_dir / "000000.label").write_bytes((out / "pred.label").read_bytes())
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text("{}")  # defaults match the demo defaults
        r2 = runner.invoke(
            main,
            [
                "eval",
                "--pred-dir",
                str(pred_dir),
                "--gt-dir",
                str(gt_dir),
                "--config",
                str(cfg_path),
            ],
        )
        assert r2.exit_code == 0, r2.output
        assert "occupancy IoU" in r2.stdout


class TestBench:
    def test_reference_ratio(self, runner):
        r = runner.invoke(main, ["bench", "--k", "15000"])
        assert r.exit_code == 0
        report = json.loads(r.stdout)
        assert report["memory_touch_ratio"] == pytest.approx(0.182220458984375)

    def test_k_zero_exact(self, runner, tmp_path):
        out = tmp_path / "bench.json"
        r = runner.invoke(main, ["bench", "--k", "0", "--out", str(out)])
        assert r.exit_code == 0
        assert json.loads(out.read_text())["memory_touch_ratio"] == 0.125


class TestServerFlag:
    def test_unreachable_server_exit_2(self, runner):
        r = runner.invoke(
            main, ["--server", "http://127.0.0.1:9", "bench", "--k", "0"]
        )
        assert r.exit_code == 2
        assert "cannot reach service" in r.stderr
