"""Tests for report tables, field-consistency scoring, and the vector-field
dump."""

import json
import math

import numpy as np
import pytest
import torch

from noisygrasp.errors import IncompleteGridError, InvalidInputError
from noisygrasp.model import ModelConfig, save_checkpoint
from noisygrasp.reporting import (
    collect_eval_results,
    emit_noise_field_plot,
    field_consistency,
    report_tables,
)
from noisygrasp.simworld import WorldConfig
from noisygrasp.training import TrainConfig, build_model


def write_cell(metrics_dir, model, train_set, test_set, accuracy):
    metrics_dir.mkdir(parents=True, exist_ok=True)
    name = f"eval_{model}_{train_set}_{test_set}.json"
    (metrics_dir / name).write_text(json.dumps({
        "model": model, "train_set": train_set,
        "test_set": test_set, "accuracy": accuracy,
    }))


class TestReportTables:
    def fill_grid(self, d):
        for model in ("patch", "robust"):
            for train in ("simA",):
                for test, acc in (("heldA", 0.7), ("heldB", 0.65)):
                    write_cell(d, model, train, test, acc + (0.03 if model == "robust" else 0))

    def test_renders_complete_grid(self, tmp_path):
        self.fill_grid(tmp_path)
        text = report_tables(tmp_path)
        lines = text.splitlines()
        assert lines[0].split() == ["model", "train-set", "heldA", "heldB"]
        assert any(line.startswith("patch") for line in lines)
        assert any(line.startswith("robust") for line in lines)
        assert "0.7300" in text and "0.7000" in text
        assert "not reproducible" in text

    def test_identical_bytes_across_calls(self, tmp_path):
        self.fill_grid(tmp_path)
        assert report_tables(tmp_path) == report_tables(tmp_path)

    def test_out_path_written(self, tmp_path):
        self.fill_grid(tmp_path)
        out = tmp_path / "table.txt"
        text = report_tables(tmp_path, out_path=out)
        assert out.read_text() == text

    def test_reference_numbers_are_comments(self, tmp_path):
        self.fill_grid(tmp_path)
        for line in report_tables(tmp_path).splitlines():
            if "62.08" in line or "77.50" in line or "76.9" in line:
                assert line.startswith("# ")

    def test_missing_cell_names_the_pair(self, tmp_path):
        self.fill_grid(tmp_path)
        write_cell(tmp_path, "robust", "simB", "heldA", 0.71)
        with pytest.raises(IncompleteGridError) as excinfo:
            report_tables(tmp_path)
        missing = excinfo.value.missing
        assert ("robust", "train=simB test=heldB") in missing

    def test_empty_directory_is_an_error(self, tmp_path):
        with pytest.raises(IncompleteGridError):
            report_tables(tmp_path)

    def test_malformed_cell_rejected(self, tmp_path):
        tmp_path.mkdir(exist_ok=True)
        (tmp_path / "eval_bad.json").write_text(json.dumps({"model": "m"}))
        with pytest.raises(InvalidInputError, match="missing"):
            collect_eval_results(tmp_path)


class TestFieldConsistency:
    def test_perfectly_aligned(self):
        pairs = [((1.0, 0.0), (2.0, 0.0)), ((0.0, 1.0), (0.0, 5.0))]
        out = field_consistency(pairs)
        assert out["frac_aligned"] == 1.0
        assert out["frac_anti"] == 0.0
        assert out["consistency"] == 1.0
        assert out["orientation"] == "aligned"

    def test_perfectly_anti_aligned(self):
        pairs = [((1.0, 0.0), (-3.0, 0.0)), ((0.0, -2.0), (0.0, 4.0))]
        out = field_consistency(pairs)
        assert out["frac_anti"] == 1.0
        assert out["consistency"] == 1.0
        assert out["orientation"] == "anti-aligned"

    def test_quarter_plane_boundary(self):
        # exactly 45 degrees counts as aligned, beyond it does not
        on_edge = [((1.0, 1.0), (1.0, 0.0))]
        assert field_consistency(on_edge)["frac_aligned"] == 1.0
        beyond = [((1.0, 1.2), (1.0, 0.0))]
        out = field_consistency(beyond)
        assert out["frac_aligned"] == 0.0
        assert out["frac_anti"] == 0.0

    def test_zero_vectors_count_in_denominator_only(self):
        pairs = [((0.0, 0.0), (1.0, 0.0)), ((1.0, 0.0), (0.0, 0.0)),
                 ((1.0, 0.0), (1.0, 0.0))]
        out = field_consistency(pairs)
        assert out["n"] == 3
        assert out["frac_aligned"] == pytest.approx(1.0 / 3.0)
        assert out["consistency"] == pytest.approx(1.0 / 3.0)

    def test_dominant_direction_is_unit_mean(self):
        pairs = [((2.0, 0.0), (1.0, 0.0)), ((0.0, 2.0), (0.0, 1.0))]
        out = field_consistency(pairs)
        dx, dy = out["dominant_direction"]
        assert math.hypot(dx, dy) == pytest.approx(1.0)
        assert dx == pytest.approx(math.sqrt(0.5))
        assert dy == pytest.approx(math.sqrt(0.5))

    def test_mixed_majority_wins(self):
        pairs = [((1.0, 0.0), (1.0, 0.0))] * 3 + [((1.0, 0.0), (-1.0, 0.0))] * 7
        out = field_consistency(pairs)
        assert out["orientation"] == "anti-aligned"
        assert out["consistency"] == pytest.approx(0.7)

    def test_empty_probe_set_rejected(self):
        with pytest.raises(InvalidInputError):
            field_consistency([])


class TestNoiseFieldPlot:
    def checkpoint(self, tmp_path):
        wcfg = WorldConfig(scene_size=96, patch_size=32, patch_d=8.0,
                           n_robots=2, max_noise=6.0, noise_seed=5, seed=3)
        mcfg = ModelConfig(n_bins=9, patch_size=32, patch_d=8.0, n_robots=2,
                           feature_dim=16, scene_size=96, nmn_input_size=32,
                           nmn_hidden=16, conv_channels=(4, 8, 8), pool_grid=2)
        model = build_model(mcfg, TrainConfig(seed=0), "robust")
        path = tmp_path / "ckpt.pt"
        save_checkpoint(model, path, extra={
            "robot_ids": [0, 1],
            "world_config": wcfg.to_dict(),
        })
        return path

    def test_plot_rows_and_header(self, tmp_path):
        ckpt = self.checkpoint(tmp_path)
        out = tmp_path / "field.txt"
        summary = emit_noise_field_plot(ckpt, robot_id=0, grid=4, out_path=out)
        lines = out.read_text().splitlines()
        comments = [l for l in lines if l.startswith("#")]
        rows = [l for l in lines if not l.startswith("#")]
        assert len(comments) == 3
        assert "consistency" in comments[2]
        assert len(rows) == 16
        for row in rows:
            vals = [float(v) for v in row.split()]
            assert len(vals) == 6
        assert 0.0 <= summary["consistency"] <= 1.0

    def test_unknown_robot_rejected(self, tmp_path):
        ckpt = self.checkpoint(tmp_path)
        with pytest.raises(InvalidInputError, match="robot"):
            emit_noise_field_plot(ckpt, robot_id=7, grid=4,
                                  out_path=tmp_path / "x.txt")

    def test_true_field_columns_match_world_noise(self, tmp_path):
        from noisygrasp.simworld import make_world

        ckpt = self.checkpoint(tmp_path)
        out = tmp_path / "field.txt"
        emit_noise_field_plot(ckpt, robot_id=1, grid=3, out_path=out)
        wcfg = WorldConfig(scene_size=96, patch_size=32, patch_d=8.0,
                           n_robots=2, max_noise=6.0, noise_seed=5, seed=3)
        noise = make_world(wcfg, 0).noise[1]
        for line in out.read_text().splitlines():
            if line.startswith("#"):
                continue
            x, y, dx, dy, gx, gy = (float(v) for v in line.split())
            tx, ty = noise.displacement(x, y)
            assert gx == pytest.approx(tx, abs=5e-5)
            assert gy == pytest.approx(ty, abs=5e-5)

    def test_deterministic_bytes(self, tmp_path):
        ckpt = self.checkpoint(tmp_path)
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        emit_noise_field_plot(ckpt, robot_id=0, grid=4, out_path=a)
        emit_noise_field_plot(ckpt, robot_id=0, grid=4, out_path=b)
        assert a.read_bytes() == b.read_bytes()
