"""End-to-end command line behavior at desk scale."""

import json
import subprocess
import sys

import numpy as np
import pytest

from bvqa.backbone import load_features
from bvqa.cli import main
from bvqa.trainer import load_checkpoint, load_pretrain_checkpoint

MODEL_ARGS = ["--spatial-kind", "mean", "--spatial-fc", "4",
              "--temporal-kind", "mean"]
SMALL_RNN_ARGS = ["--spatial-kind", "bilstm", "--spatial-hidden", "2",
                  "--spatial-fc", "3", "--temporal-kind", "bilstm",
                  "--temporal-hidden", "2", "--temporal-fc", "2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth dataset with extracted features shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    feats = root / "feats"
    assert main(["synth", "--out", str(data), "--videos", "4", "--frames", "2",
                 "--height", "64", "--width", "64", "--seed", "1"]) == 0
    assert main(["extract", "--manifest", str(data / "manifest.tsv"),
                 "--out", str(feats), "--dim", "8", "--patch", "32",
                 "--stride", "28"]) == 0
    return root


def manifest_of(workspace):
    return str(workspace / "data" / "manifest.tsv")


def features_of(workspace):
    return str(workspace / "feats")


class TestParsing:
    def test_no_command_is_usage_error(self):
        assert main([]) == 1

    def test_unknown_command_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_bad_flag_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--no-such-flag"])
        assert exc.value.code == 1

    def test_console_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "bvqa.cli", "gradcheck",
                               "--quick"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "all 4 cases passed" in proc.stdout


class TestSynth:
    def test_layout_and_run_config(self, tmp_path):
        out = tmp_path / "d"
        assert main(["synth", "--out", str(out), "--videos", "2", "--frames", "2",
                     "--height", "32", "--width", "32"]) == 0
        assert (out / "manifest.tsv").exists()
        assert (out / "synth000" / "000000.png").exists()
        cfg = json.loads((out / "run_config.json").read_text())
        assert cfg["command"] == "synth" and cfg["videos"] == 2

    def test_deterministic_frames(self, tmp_path):
        for name in ("a", "b"):
            main(["synth", "--out", str(tmp_path / name), "--videos", "1",
                  "--frames", "1", "--height", "32", "--width", "32",
                  "--seed", "7"])
        a = (tmp_path / "a" / "synth000" / "000000.png").read_bytes()
        b = (tmp_path / "b" / "synth000" / "000000.png").read_bytes()
        assert a == b


class TestExtract:
    def test_feature_files_written(self, workspace):
        feats = workspace / "feats"
        names = sorted(p.name for p in feats.iterdir())
        assert names == ["run_config.json", "synth000.bvqf", "synth001.bvqf",
                         "synth002.bvqf", "synth003.bvqf"]
        tensor = load_features(feats / "synth000.bvqf")
        assert tensor.data.shape == (2, 9, 8)

    def test_refuses_overwrite_then_allows(self, workspace):
        args = ["extract", "--manifest", manifest_of(workspace),
                "--out", features_of(workspace), "--dim", "8",
                "--patch", "32", "--stride", "28"]
        assert main(args) == 2
        assert main(args + ["--overwrite"]) == 0

    def test_thread_count_does_not_change_bytes(self, workspace, tmp_path,
                                                monkeypatch):
        outs = {}
        for threads in ("1", "3"):
            out = tmp_path / f"t{threads}"
            monkeypatch.setenv("BVQA_THREADS", threads)
            assert main(["extract", "--manifest", manifest_of(workspace),
                         "--out", str(out), "--dim", "8", "--patch", "32",
                         "--stride", "28"]) == 0
            outs[threads] = (out / "synth002.bvqf").read_bytes()
        assert outs["1"] == outs["3"]

    def test_bad_thread_env(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("BVQA_THREADS", "zero")
        assert main(["extract", "--manifest", manifest_of(workspace),
                     "--out", str(tmp_path / "x"), "--dim", "8"]) == 1

    def test_one_corrupt_video_does_not_sink_the_rest(self, tmp_path, capsys):
        data = tmp_path / "d"
        main(["synth", "--out", str(data), "--videos", "3", "--frames", "1",
              "--height", "32", "--width", "32"])
        (data / "synth001" / "000000.png").write_bytes(b"junk")
        out = tmp_path / "f"
        code = main(["extract", "--manifest", str(data / "manifest.tsv"),
                     "--out", str(out), "--dim", "4", "--patch", "32",
                     "--stride", "28"])
        assert code == 2
        captured = capsys.readouterr()
        assert "synth001\tFAILED" in captured.err
        assert (out / "synth000.bvqf").exists()
        assert (out / "synth002.bvqf").exists()
        assert not (out / "synth001.bvqf").exists()


class TestTrainCommands:
    def test_pretrain_finetune_predict(self, workspace, tmp_path, capsys):
        pre = tmp_path / "pre.npz"
        model = tmp_path / "model.npz"
        common = ["--manifest", manifest_of(workspace),
                  "--features", features_of(workspace)]
        assert main(["pretrain", *common, "--out", str(pre), *SMALL_RNN_ARGS,
                     "--epochs", "2", "--lr", "1e-3"]) == 0
        assert load_pretrain_checkpoint(pre).d == 8
        assert (tmp_path / "pre.npz.train_log.jsonl").exists()

        assert main(["finetune", *common, "--out", str(model),
                     "--pretrained", str(pre), *SMALL_RNN_ARGS,
                     "--epochs", "2", "--lr", "1e-3"]) == 0
        assert load_checkpoint(model).meta["kind"] == "finetune"
        capsys.readouterr()

        assert main(["predict", "--model", str(model), *common]) == 0
        out = capsys.readouterr().out.strip().split("\n")
        assert len(out) == 4 and out[0].startswith("synth000\t")

        csv_path = tmp_path / "preds.csv"
        assert main(["predict", "--model", str(model), *common,
                     "--out", str(csv_path)]) == 0
        lines = csv_path.read_text().strip().split("\n")
        assert lines[0] == "id,pred" and len(lines) == 5

    def test_pretrained_config_mismatch(self, workspace, tmp_path):
        pre = tmp_path / "pre.npz"
        common = ["--manifest", manifest_of(workspace),
                  "--features", features_of(workspace)]
        assert main(["pretrain", *common, "--out", str(pre), *SMALL_RNN_ARGS,
                     "--epochs", "0"]) == 0
        code = main(["finetune", *common, "--out", str(tmp_path / "m.npz"),
                     "--pretrained", str(pre), *MODEL_ARGS, "--epochs", "0"])
        assert code == 1

    def test_missing_feature_file(self, workspace, tmp_path):
        assert main(["pretrain", "--manifest", manifest_of(workspace),
                     "--features", str(tmp_path / "empty"),
                     "--out", str(tmp_path / "p.npz"), "--epochs", "1"]) == 2


class TestEvaluate:
    def run_eval(self, workspace, out, extra=()):
        return main(["evaluate", "--manifest", manifest_of(workspace),
                     "--features", features_of(workspace), "--out", str(out),
                     "--folds", "2", "--train-frac", "0.5", *MODEL_ARGS,
                     "--epochs", "2", "--lr", "1e-2", *extra])

    def test_reports_written(self, workspace, tmp_path):
        out = tmp_path / "eval"
        assert self.run_eval(workspace, out) == 0
        report = json.loads((out / "report.json").read_text())
        assert len(report["folds"]) == 2
        assert set(report["medians"]) == {"srocc", "plcc", "krcc", "rmse"}
        csv = (out / "report.csv").read_text().strip().split("\n")
        assert csv[0] == "fold,n,srocc,plcc,krcc,rmse,note"
        assert len(csv) == 4  # header, two folds, median row
        scatter = (out / "scatter_fold0.csv").read_text().strip().split("\n")
        assert scatter[0] == "id,mos,pred" and len(scatter) == 3

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        out = tmp_path / "eval"
        assert self.run_eval(workspace, out) == 0
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        assert self.run_eval(workspace, out) == 0
        second = {p.name: p.read_bytes() for p in out.iterdir()}
        assert first == second

    def test_cross_dataset_mode(self, workspace, tmp_path):
        out = tmp_path / "cross"
        code = main(["evaluate",
                     "--train-manifest", manifest_of(workspace),
                     "--test-manifest", manifest_of(workspace),
                     "--features", features_of(workspace), "--out", str(out),
                     *MODEL_ARGS, "--epochs", "2", "--lr", "1e-2"])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["meta"]["mode"] == "cross"
        assert report["folds"][0]["n"] == 4

    def test_forced_calibration_rejects_unknown_tag(self, workspace, tmp_path):
        assert self.run_eval(workspace, tmp_path / "x",
                             extra=["--calibrate", "on"]) == 2

    def test_auto_calibration_skips_unknown_tag(self, workspace, tmp_path):
        assert self.run_eval(workspace, tmp_path / "y",
                             extra=["--calibrate", "auto"]) == 0

    def test_mode_flags_are_exclusive(self, workspace, tmp_path):
        assert main(["evaluate", "--out", str(tmp_path / "z")]) == 1
        assert main(["evaluate", "--manifest", manifest_of(workspace),
                     "--test-manifest", manifest_of(workspace),
                     "--features", features_of(workspace),
                     "--out", str(tmp_path / "z")]) == 1


class TestAblate:
    def test_grid_rows_and_cache(self, workspace, tmp_path):
        out = tmp_path / "abl"
        code = main(["ablate", "--manifest", manifest_of(workspace),
                     "--features", features_of(workspace), "--out", str(out),
                     "--spatial", "mean", "--temporal", "mean", "harmonic",
                     "--pretraining", "both", "--train-frac", "0.5",
                     "--spatial-fc", "4", "--epochs", "1", "--lr", "1e-2"])
        assert code == 0
        lines = (out / "grid.csv").read_text().strip().split("\n")
        assert lines[0].startswith("spatial,temporal,pretrained,n_params")
        assert len(lines) == 5  # 1 spatial x 2 temporal x 2 pretraining arms
        caches = [p.name for p in out.iterdir() if p.name.startswith("cache_pretrain")]
        assert len(caches) == 1  # one spatial config -> one cached pretrain


class TestGradcheckCommand:
    def test_quick_passes(self, capsys):
        assert main(["gradcheck", "--quick"]) == 0
        assert "all 4 cases passed" in capsys.readouterr().out

    def test_injected_bug_is_caught_and_named(self, capsys):
        assert main(["gradcheck", "--quick", "--inject-bug"]) == 3
        out = capsys.readouterr().out
        assert "FAIL worst=head.W" in out


class TestBenchmark:
    def test_stage_breakdown(self, capsys):
        assert main(["benchmark", "--videos", "1", "--frames", "2",
                     "--height", "64", "--width", "64", "--dim", "4"]) == 0
        doc = json.loads(capsys.readouterr().out)
        stages = [doc["synth_s"], doc["extract_s"], doc["train_epoch_s"],
                  doc["predict_s"]]
        assert all(s >= 0.0 for s in stages)
        assert doc["total_s"] >= max(stages)

    def test_zero_videos_is_usage_error(self):
        assert main(["benchmark", "--videos", "0"]) == 1
