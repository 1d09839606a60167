"""Command-line interface: every verb end to end, plus figure rendering."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from crackseq.cli import main
from crackseq.data import load_dataset
from crackseq.head import Detection, HeadOutput
from crackseq.metrics import validate_report
from crackseq.pipeline import detections_to_coco
from crackseq.plots import (confidence_map, heatmap_overlay, plot_loss_curves,
                            plot_pr_curve)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

TINY_OVERRIDES = [
    "--set", "t_window=3", "--set", "channels=8", "--set", "wavelet_levels=1",
    "--set", "window_size=2", "--set", "heads=2", "--set", "refine_blocks=1",
]


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """One synth + train round through the CLI, shared by the verb tests."""
    root = tmp_path_factory.mktemp("cliroot")
    data_dir = root / "data"
    assert main(["synth", "--out", str(data_dir), "--seed", "5",
                 "--frames", "8", "--cracks", "2", "--width", "64",
                 "--height", "64"]) == 0
    annotations = data_dir / "annotations.json"
    assert annotations.is_file()

    config_path = root / "run.toml"
    config_path.write_text(
        f'train_annotations = "{annotations}"\n'
        "t_window = 3\nchannels = 8\nwavelet_levels = 1\nwindow_size = 2\n"
        "heads = 2\nrefine_blocks = 1\nepochs = 1\nbatch_size = 4\n"
        "learning_rate = 0.02\nseed = 3\nscore_threshold = 0.01\n"
    )
    run_dir = root / "run"
    assert main(["train", "--config", str(config_path),
                 "--run-dir", str(run_dir), "--plot-loss"]) == 0
    return {"root": root, "annotations": annotations, "config": config_path,
            "run_dir": run_dir, "images": data_dir / "images"}


class TestTrainVerb:
    def test_artifacts(self, cli_run):
        run_dir = cli_run["run_dir"]
        for name in ("model.pt", "train_log.csv", "manifest.json",
                     "eval_report.json", "loss_curves.png"):
            assert (run_dir / name).is_file(), name
        assert (run_dir / "loss_curves.png").read_bytes()[:8] == PNG_MAGIC

    def test_invalid_override_fails_cleanly(self, cli_run, tmp_path, capsys):
        rc = main(["train", "--config", str(cli_run["config"]),
                   "--set", "epochs=0", "--run-dir", str(tmp_path / "x")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_key_fails_cleanly(self, cli_run, tmp_path, capsys):
        rc = main(["train", "--config", str(cli_run["config"]),
                   "--set", "chanels=8", "--run-dir", str(tmp_path / "x")])
        assert rc == 1
        assert "unknown config keys" in capsys.readouterr().err


class TestEvalVerb:
    def test_checkpoint_eval_writes_report_csv_plot(self, cli_run, tmp_path):
        out = tmp_path / "eval"
        rc = main(["eval", "--config", str(cli_run["config"]),
                   "--checkpoint", str(cli_run["run_dir"] / "model.pt"),
                   "--split", "train", "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "eval_report.json").read_text())
        validate_report(report)
        assert report["extra"]["split"] == "train"
        with open(out / "pr_points.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["recall", "precision"]
        assert len(rows) - 1 == len(report["pr_points"])
        assert (out / "pr_curve.png").read_bytes()[:8] == PNG_MAGIC

    def test_results_eval_on_echoed_ground_truth(self, cli_run, tmp_path):
        dataset = load_dataset(cli_run["annotations"])
        ann = json.loads(Path(cli_run["annotations"]).read_text())
        per_record = [
            [Detection(box=b.as_xyxy(), objectness=0.9, class_score=1.0)
             for b in record.boxes]
            for record in dataset.records
        ]
        rows = detections_to_coco(per_record,
                                  [img["id"] for img in ann["images"]])
        results_path = tmp_path / "results.json"
        results_path.write_text(json.dumps(rows))
        out = tmp_path / "eval"
        rc = main(["eval", "--config", str(cli_run["config"]),
                   "--results", str(results_path), "--split", "train",
                   "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "eval_report.json").read_text())
        assert report["ap50"] == pytest.approx(1.0)
        assert report["extra"]["detections_from"] == str(results_path)

    def test_missing_split_annotations(self, cli_run, tmp_path, capsys):
        rc = main(["eval", "--config", str(cli_run["config"]),
                   "--checkpoint", str(cli_run["run_dir"] / "model.pt"),
                   "--split", "val", "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "no annotation file configured" in capsys.readouterr().err

    def test_checkpoint_or_results_required(self, cli_run, tmp_path, capsys):
        rc = main(["eval", "--config", str(cli_run["config"]),
                   "--split", "train", "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "--checkpoint or --results" in capsys.readouterr().err

    def test_missing_checkpoint_file(self, cli_run, tmp_path, capsys):
        rc = main(["eval", "--config", str(cli_run["config"]),
                   "--checkpoint", str(tmp_path / "nope.pt"),
                   "--split", "train", "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestInferVerb:
    def test_detections_and_heatmaps(self, cli_run, tmp_path):
        out = tmp_path / "inference"
        rc = main(["infer", "--config", str(cli_run["config"]),
                   "--checkpoint", str(cli_run["run_dir"] / "model.pt"),
                   "--frames", str(cli_run["images"]),
                   "--out", str(out), "--heatmaps"])
        assert rc == 0
        payload = json.loads((out / "detections.json").read_text())
        assert [e["frame_index"] for e in payload] == list(range(8))
        assert len(list(out.glob("heatmap_*.png"))) == 8


class TestSynthVerb:
    def test_invalid_dimensions_fail_cleanly(self, tmp_path, capsys):
        rc = main(["synth", "--out", str(tmp_path / "d"), "--frames", "0"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestPlotPrVerb:
    def test_from_report_and_from_csv(self, cli_run, tmp_path):
        out = tmp_path / "eval"
        assert main(["eval", "--config", str(cli_run["config"]),
                     "--checkpoint", str(cli_run["run_dir"] / "model.pt"),
                     "--split", "train", "--out", str(out)]) == 0
        png_a = tmp_path / "from_report.png"
        assert main(["plot-pr", "--report", str(out / "eval_report.json"),
                     "--out", str(png_a)]) == 0
        assert png_a.read_bytes()[:8] == PNG_MAGIC
        png_b = tmp_path / "from_csv.png"
        assert main(["plot-pr", "--csv", str(out / "pr_points.csv"),
                     "--out", str(png_b)]) == 0
        assert png_b.read_bytes()[:8] == PNG_MAGIC

    def test_source_flags_are_exclusive(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["plot-pr", "--report", "a.json", "--csv", "b.csv",
                  "--out", str(tmp_path / "x.png")])


class TestCostVerb:
    def test_summary_json(self, tmp_path, capsys):
        json_path = tmp_path / "cost.json"
        rc = main(["cost", *TINY_OVERRIDES, "--fps-iterations", "2",
                   "--json", str(json_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "parameters:" in out and "windows per second" in out
        payload = json.loads(json_path.read_text())
        assert payload["parameters"] > 0
        assert payload["multiply_adds"] > 0
        assert payload["fps"] > 0
        per_layer = payload["per_layer_multiply_adds"]
        assert sum(per_layer.values()) == payload["multiply_adds"]
        assert all(v > 0 for v in per_layer.values())


class TestParser:
    def test_command_required(self):
        with pytest.raises(SystemExit):
            main([])

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["--version"])
        assert excinfo.value.code == 0


class TestFigureHelpers:
    def _head_output(self):
        reg = torch.zeros(4, 2, 2)
        obj = torch.full((1, 2, 2), -2.0)
        obj[0, 0, 1] = 3.0
        cls = torch.zeros(1, 2, 2)
        return HeadOutput(reg=reg, obj=obj, cls=cls, stride=16)

    def test_confidence_map(self):
        conf = confidence_map(self._head_output())
        assert conf.shape == (2, 2)
        assert float(conf.min()) >= 0.0 and float(conf.max()) <= 1.0
        assert conf.argmax().item() == 1  # the boosted cell

    def test_confidence_map_rejects_batched(self):
        out = HeadOutput(reg=torch.zeros(2, 4, 2, 2),
                         obj=torch.zeros(2, 1, 2, 2),
                         cls=torch.zeros(2, 1, 2, 2), stride=16)
        with pytest.raises(ValueError, match="single sample"):
            confidence_map(out)

    def test_heatmap_overlay(self):
        image = np.random.default_rng(0).uniform(size=(3, 32, 32)).astype(
            np.float32)
        blended = heatmap_overlay(self._head_output(), image)
        assert blended.shape == (32, 32, 3)
        assert blended.dtype == np.uint8
        with pytest.raises(ValueError, match=r"\(3, H, W\)"):
            heatmap_overlay(self._head_output(), image.transpose(1, 2, 0))

    def test_plot_files_written(self, tmp_path):
        pr_path = plot_pr_curve([(0.0, 1.0), (0.5, 0.8), (1.0, 0.5)],
                                tmp_path / "pr.png")
        assert pr_path.read_bytes()[:8] == PNG_MAGIC
        rows = [{"step": "0", "total": "1.5", "reg": "0.5", "cls": "0.5",
                 "obj": "0.5"},
                {"step": "1", "total": "1.0", "reg": "0.3", "cls": "0.4",
                 "obj": "0.3"}]
        loss_path = plot_loss_curves(rows, tmp_path / "loss.png")
        assert loss_path.read_bytes()[:8] == PNG_MAGIC
