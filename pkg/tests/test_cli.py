"""Command-line interface: workflows and the exit-code contract."""

import hashlib
import json

import pytest

from slidegeom.cli import main

TINY = ["--classes", "3", "--slides-per-class", "4", "--d", "8",
        "--set", "gcn_hidden=6", "--set", "heads=2", "--set", "mil_hidden=6",
        "--set", "token_hidden=4", "--set", "patch_lo=2", "--set", "patch_hi=4",
        "--set", "nuclei_lo=6", "--set", "nuclei_hi=12",
        "--lr", "1e-3", "--epochs", "2", "--folds", "2", "--batch-size", "4", "--seed", "21"]


@pytest.fixture(scope="module")
def cohort_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "cohort.argc"
    assert main(["synth", "--out", str(path)] + TINY) == 0
    return path


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, cohort_path):
    out = tmp_path_factory.mktemp("cli-train") / "run"
    code = main(["train", "--cohort", str(cohort_path), "--out-dir", str(out)] + TINY)
    assert code == 0
    return out


class TestSynth:
    def test_deterministic_output(self, tmp_path, cohort_path):
        again = tmp_path / "again.argc"
        assert main(["synth", "--out", str(again)] + TINY) == 0
        assert hashlib.sha256(again.read_bytes()).digest() == \
            hashlib.sha256(cohort_path.read_bytes()).digest()

    def test_validation_exit_2(self, tmp_path):
        code = main(["synth", "--out", str(tmp_path / "x.argc"),
                     "--slides-per-class", "0"])
        assert code == 2
        assert not (tmp_path / "x.argc").exists()  # no partial output

    def test_io_failure_exit_3(self):
        assert main(["synth", "--out", "/nonexistent-dir/x.argc"] + TINY) == 3

    def test_manifest_written(self, cohort_path):
        with open(str(cohort_path) + ".manifest.json") as fh:
            manifest = json.load(fh)
        assert manifest["class_counts"] == {"0": 4, "1": 4, "2": 4}


class TestTrain:
    def test_report_files(self, trained_dir):
        report = json.loads((trained_dir / "report.json").read_text())
        assert len(report["folds"]) == 2
        assert report["flags"]["use_gpgf"] is True

    def test_invalid_ablation_exit_2(self, cohort_path, tmp_path):
        code = main(["train", "--cohort", str(cohort_path), "--out-dir", str(tmp_path / "r"),
                     "--ablation", "use_gpgf_without_geometry"] + TINY)
        assert code == 2

    def test_corrupt_cohort_exit_4(self, cohort_path, tmp_path):
        data = bytearray(cohort_path.read_bytes())
        data[40] ^= 0xFF
        bad = tmp_path / "bad.argc"
        bad.write_bytes(bytes(data))
        code = main(["train", "--cohort", str(bad), "--out-dir", str(tmp_path / "r")] + TINY)
        assert code == 4

    def test_missing_cohort_exit_3(self, tmp_path):
        code = main(["train", "--cohort", str(tmp_path / "absent.argc"),
                     "--out-dir", str(tmp_path / "r")] + TINY)
        assert code == 3


class TestEval:
    def test_eval_ok(self, cohort_path, trained_dir, tmp_path):
        out = tmp_path / "eval.json"
        code = main(["eval", "--cohort", str(cohort_path),
                     "--checkpoint", str(trained_dir / "checkpoints" / "fold0.argw"),
                     "--out", str(out)] + TINY)
        assert code == 0
        report = json.loads(out.read_text())
        assert len(report["folds"]) == 1

    def test_wrong_ablation_exit_5(self, cohort_path, trained_dir, tmp_path):
        code = main(["eval", "--cohort", str(cohort_path),
                     "--checkpoint", str(trained_dir / "checkpoints" / "fold0.argw"),
                     "--ablation", "A"] + TINY)
        assert code == 5


class TestHeatmap:
    def test_heatmap_outputs(self, cohort_path, trained_dir, tmp_path, capsys):
        out = tmp_path / "hm"
        code = main(["heatmap", "--cohort", str(cohort_path),
                     "--checkpoint", str(trained_dir / "checkpoints" / "fold0.argw"),
                     "--slide-id", "1", "--out-dir", str(out)] + TINY)
        assert code == 0
        assert (out / "slide1.pgm").exists()
        assert (out / "slide1.csv").exists()
        assert (out / "slide1.png").exists()
        printed = capsys.readouterr().out
        assert "top-decile patches:" in printed
        # recount from the CSV: list length must be ceil(0.10 * N)
        rows = (out / "slide1.csv").read_text().strip().splitlines()[1:]
        n = len(rows)
        listed = printed.split("top-decile patches:")[1].split()
        import math
        assert len(listed) == math.ceil(0.10 * n)

    def test_missing_slide_exit_2(self, cohort_path, trained_dir, tmp_path):
        code = main(["heatmap", "--cohort", str(cohort_path),
                     "--checkpoint", str(trained_dir / "checkpoints" / "fold0.argw"),
                     "--slide-id", "999", "--out-dir", str(tmp_path / "hm")] + TINY)
        assert code == 2

    def test_checkpoint_mismatch_exit_5(self, cohort_path, trained_dir, tmp_path):
        code = main(["heatmap", "--cohort", str(cohort_path),
                     "--checkpoint", str(trained_dir / "checkpoints" / "fold0.argw"),
                     "--slide-id", "1", "--out-dir", str(tmp_path / "hm"),
                     "--ablation", "D"] + TINY)
        assert code == 5


class TestUsage:
    def test_no_command_exit_2(self):
        assert main([]) == 2

    def test_unknown_flag_exit_2(self):
        assert main(["synth", "--out", "/tmp/x.argc", "--frobnicate"]) == 2
