"""CLI smoke tests using Typer's CliRunner."""

import hashlib
from unittest.mock import patch

import numpy as np
import yaml
from typer.testing import CliRunner

from adls.cli import app
from adls.imaging import load_depth_png, read_manifest
from adls.metrics import POOLED_ID, read_rows

runner = CliRunner()

SMALL_SYNTH = ["--scenes", "4", "--width", "24", "--height", "16", "--objects", "2", "--scenes-per-drive", "2"]
SMALL_FORESTS = ["--trees", "3", "--trees-final", "4", "--subsample", "100"]


def _digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


def _synth(tmp_path, *extra):
    out = tmp_path / "data"
    result = runner.invoke(app, ["synth", "--out", str(out), *SMALL_SYNTH, "--seed", "7", *extra])
    assert result.exit_code == 0, result.output
    return out


class TestSynthCommand:
    def test_writes_scenes_and_manifest(self, tmp_path):
        out = _synth(tmp_path)
        entries = read_manifest(out / "manifest.tsv")
        assert len(entries) == 4
        assert all(e.depth.exists() and e.rgb.exists() for e in entries)

    def test_rerun_is_byte_identical(self, tmp_path):
        first = _digest(_synth(tmp_path / "a"))
        second = _digest(_synth(tmp_path / "b"))
        assert first == second

    def test_full_density(self, tmp_path):
        out = _synth(tmp_path, "--gt-density", "1.0")
        for entry in read_manifest(out / "manifest.tsv"):
            assert np.all(load_depth_png(entry.depth).valid)

    def test_no_rgb(self, tmp_path):
        out = _synth(tmp_path, "--no-rgb")
        assert all(e.rgb is None for e in read_manifest(out / "manifest.tsv"))

    def test_invalid_spec(self, tmp_path):
        result = runner.invoke(app, ["synth", "--out", str(tmp_path), "--gt-density", "0"])
        assert result.exit_code == 1
        assert "Error" in result.output


class TestTrainCompleteEval:
    def _train(self, tmp_path, data, *extra):
        model = tmp_path / "model"
        result = runner.invoke(app, [
            "train", str(data / "manifest.tsv"), "--out", str(model),
            "--sampler", "pm", "--budget", "12", "--phases", "3", *SMALL_FORESTS, "--quiet", *extra,
        ])
        assert result.exit_code == 0, result.output
        return model, result

    def test_train_writes_forests(self, tmp_path):
        model, result = self._train(tmp_path, _synth(tmp_path))
        assert "[3/3]" in result.output
        assert sorted(p.name for p in model.glob("*.adls")) == [
            "final.adls", "phase_01.adls", "phase_02.adls", "phase_03.adls",
        ]
        record = yaml.safe_load((model / "pipeline.yaml").read_text())
        assert record["plan"]["phases"] == 3
        assert record["config"]["trees_final"] == 4

    def test_train_rerun_is_byte_identical(self, tmp_path):
        data = _synth(tmp_path)
        digests = []
        for name in ("a", "b"):
            model = tmp_path / name
            result = runner.invoke(app, [
                "train", str(data / "manifest.tsv"), "--out", str(model),
                "--budget", "12", "--phases", "3", *SMALL_FORESTS, "--seed", "4", "--quiet",
            ])
            assert result.exit_code == 0, result.output
            digests.append(_digest(model))
        assert digests[0] == digests[1]

    def test_depth_only_pipeline(self, tmp_path):
        model, _ = self._train(tmp_path, _synth(tmp_path, "--no-rgb"), "--scenario", "d")
        record = yaml.safe_load((model / "pipeline.yaml").read_text())
        assert record["config"]["scenario"] == "d"

    def test_rgbd_without_rgb_fails(self, tmp_path):
        data = _synth(tmp_path, "--no-rgb")
        result = runner.invoke(app, [
            "train", str(data / "manifest.tsv"), "--out", str(tmp_path / "m"), "--budget", "8", "--phases", "2",
            *SMALL_FORESTS,
        ])
        assert result.exit_code == 1
        assert "Error" in result.output

    def test_complete_and_eval(self, tmp_path):
        data = _synth(tmp_path)
        model, _ = self._train(tmp_path, data)
        preds = tmp_path / "preds"
        args = ["complete", str(data / "manifest.tsv"), "--model", str(model), "--out", str(preds), "--seed", "3"]
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.output

        for entry in read_manifest(data / "manifest.tsv"):
            assert np.all(load_depth_png(preds / f"{entry.id}_pred.png").valid)
            assert np.count_nonzero(load_depth_png(preds / f"{entry.id}_mask.png").valid) == 12
        record = yaml.safe_load((preds / "completion.yaml").read_text())
        assert (record["sampler"], record["budget"], record["phases"], record["seed"]) == ("pm", 12, 3, 3)

        first = _digest(preds)
        assert runner.invoke(app, args).exit_code == 0
        assert _digest(preds) == first

        metrics = tmp_path / "metrics.csv"
        result = runner.invoke(app, ["eval", str(preds), str(data / "manifest.tsv"), "--out", str(metrics)])
        assert result.exit_code == 0, result.output
        rows = read_rows(metrics)
        assert len(rows) == 5
        assert rows[-1]["scene_id"] == POOLED_ID
        assert all(r["sampler"] == "pm" and r["budget"] == "12" for r in rows)
        assert all(0.0 <= float(r["delta1"]) <= 1.0 for r in rows)

    def test_eval_perfect_predictions(self, tmp_path):
        data = _synth(tmp_path, "--gt-density", "1.0")
        preds = tmp_path / "preds"
        preds.mkdir()
        for entry in read_manifest(data / "manifest.tsv"):
            (preds / f"{entry.id}_pred.png").write_bytes(entry.depth.read_bytes())
        metrics = tmp_path / "metrics.csv"
        result = runner.invoke(app, ["eval", str(preds), str(data / "manifest.tsv"), "--out", str(metrics)])
        assert result.exit_code == 0, result.output
        pooled = read_rows(metrics)[-1]
        assert float(pooled["rmse_mm"]) == 0.0
        assert pooled["sampler"] == "-"

    def test_eval_missing_prediction(self, tmp_path):
        data = _synth(tmp_path)
        result = runner.invoke(app, ["eval", str(tmp_path), str(data / "manifest.tsv"), "--out", str(tmp_path / "m.csv")])
        assert result.exit_code == 1
        assert "missing prediction" in result.output

    def test_complete_missing_model(self, tmp_path):
        data = _synth(tmp_path)
        result = runner.invoke(app, [
            "complete", str(data / "manifest.tsv"), "--model", str(tmp_path / "nope"), "--out", str(tmp_path / "p"),
        ])
        assert result.exit_code == 1


class TestBenchCommand:
    def test_small_matrix(self, tmp_path):
        out = tmp_path / "bench.csv"
        result = runner.invoke(app, [
            "bench", "--out", str(out), "--samplers", "pm,random", "--budgets", "10,20", "--phases", "2",
            "--seeds", "0", "--scenes", "10", "--width", "24", "--height", "16",
            "--trees", "3", "--trees-final", "4", "--target-rmse", "500", "--quiet",
        ])
        assert result.exit_code == 0, result.output
        pooled = [r for r in read_rows(out) if r["scene_id"] == POOLED_ID]
        assert len(pooled) == 4
        assert (tmp_path / "bench.correlation.csv").exists()
        assert (tmp_path / "bench.budget.csv").exists()

    def test_bad_sampler(self, tmp_path):
        result = runner.invoke(app, ["bench", "--out", str(tmp_path / "b.csv"), "--samplers", "pm,best"])
        assert result.exit_code != 0


class TestConfigCommand:
    def test_creates_and_shows_config(self, tmp_path):
        cfg_file = tmp_path / "adls.yaml"
        result = runner.invoke(app, ["config", "--path", str(cfg_file)])
        assert result.exit_code == 0
        assert cfg_file.exists()
        assert "trees_final: 500" in result.output

    def test_shows_existing(self, tmp_path):
        cfg_file = tmp_path / "adls.yaml"
        with patch("adls.cli.init_config", return_value=cfg_file):
            cfg_file.write_text("trees_final: 77\n")
            result = runner.invoke(app, ["config"])
        assert result.exit_code == 0
        assert "trees_final: 77" in result.output


class TestHelp:
    def test_no_args_shows_help(self):
        result = runner.invoke(app, [])
        assert "Usage" in result.output
