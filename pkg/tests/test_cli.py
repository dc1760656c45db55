"""CLI surface: subcommands, exit codes, artifact outputs."""

import json

import pytest

from vimshuffle.cli import main

TINY_OVERRIDES = [
    "--set", "epochs=1", "--set", "batch_size=16", "--set", "train_samples=48",
    "--set", "eval_samples=16", "--set", "model.depth=2", "--set", "model.width=16",
    "--set", "model.state_size=2", "--set", "model.patch_size=8", "--set", "model.expand=1",
]


class TestSynthData:
    def test_exact_byte_count(self, tmp_path):
        out = tmp_path / "d.bin"
        assert main(["synth-data", "--n", "128", "--out", str(out)]) == 0
        assert out.stat().st_size == 128 * 3073

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        main(["synth-data", "--n", "16", "--out", str(a), "--seed", "5"])
        main(["synth-data", "--n", "16", "--out", str(b), "--seed", "5"])
        assert a.read_bytes() == b.read_bytes()


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["train", "--bogus"]) == 1

    def test_unknown_subcommand(self):
        assert main(["transmogrify"]) == 1

    def test_bad_override_key(self, tmp_path):
        code = main(["train", "--out", str(tmp_path), "--set", "no_such_key=1"])
        assert code == 1

    def test_bad_config_file(self, tmp_path):
        bad = tmp_path / "cfg.json"
        bad.write_text("{not json")
        assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 1

    def test_unknown_config_key_rejected(self, tmp_path):
        bad = tmp_path / "cfg.json"
        bad.write_text(json.dumps({"epochs": 1, "mystery": 2}))
        assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_abort_is_runtime_failure(self, tmp_path):
        code = main(["train", "--out", str(tmp_path), "--set", "base_lr=1e18",
                     *TINY_OVERRIDES[2:]])
        assert code == 2

    def test_missing_checkpoint_is_runtime_failure(self, tmp_path):
        code = main(["eval", "--ckpt", str(tmp_path / "nope.ckpt"),
                     "--out", str(tmp_path), *TINY_OVERRIDES])
        assert code == 2


class TestTrainEvalFlow:
    def test_train_then_eval(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--out", str(out), *TINY_OVERRIDES]) == 0
        assert (out / "metrics.csv").exists()
        assert (out / "model.ckpt").exists()
        capsys.readouterr()
        code = main(["eval", "--ckpt", str(out / "model.ckpt"),
                     "--out", str(tmp_path / "eval"), *TINY_OVERRIDES])
        assert code == 0
        assert "top1" in capsys.readouterr().out

    def test_config_file_plus_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "epochs": 1, "batch_size": 16, "train_samples": 32, "eval_samples": 16,
            "model": {"depth": 1, "width": 8, "state_size": 2, "patch_size": 8,
                      "expand": 1},
        }))
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out),
                     "--set", "slws.p_l=0.25", "--seed", "7"]) == 0
        assert (out / "metrics.csv").exists()

    def test_seed_flag_changes_results(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        main(["train", "--out", str(out_a), "--seed", "1", *TINY_OVERRIDES])
        main(["train", "--out", str(out_b), "--seed", "2", *TINY_OVERRIDES])
        assert (out_a / "metrics.csv").read_text() != (out_b / "metrics.csv").read_text()

    def test_serial_rerun_bitwise(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        main(["train", "--serial", "--out", str(out_a), *TINY_OVERRIDES])
        main(["train", "--serial", "--out", str(out_b), *TINY_OVERRIDES])
        assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()


class TestPretrainFlow:
    def test_pretrain_writes_metrics(self, tmp_path):
        out = tmp_path / "pre"
        code = main(["pretrain", "--out", str(out), *TINY_OVERRIDES,
                     "--set", "model.cls_token=false",
                     "--set", "mfd.decoder_blocks=1", "--set", "mfd.decoder_width=16",
                     "--set", "mfd.teacher_depth=1", "--set", "mfd.teacher_width=8"])
        assert code == 0
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 2  # header + 1 epoch
        assert (out / "teacher.ckpt").exists()


class TestAbExperimentFlow:
    def test_report_has_two_rows_per_seed(self, tmp_path):
        out = tmp_path / "ab"
        code = main(["ab-experiment", "--seeds", "2", "--out", str(out),
                     "--set", "epochs=1", "--set", "batch_size=16",
                     "--set", "train_samples=32", "--set", "eval_samples=16",
                     "--set", "model.depth=1", "--set", "model.width=8",
                     "--set", "model.state_size=2", "--set", "model.patch_size=8"])
        assert code == 0
        lines = (out / "ab_report.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 4


class TestBenchFlow:
    def test_bench_writes_csv(self, tmp_path, capsys):
        out = tmp_path / "bench"
        code = main(["bench", "--out", str(out), "--batch", "4", "--iters", "20",
                     "--seq-lens", "16", "--no-worst-case",
                     "--set", "model.depth=1", "--set", "model.width=8",
                     "--set", "model.state_size=2"])
        assert code == 0
        assert (out / "bench.csv").exists()


@pytest.mark.slow
class TestGradcheckFlow:
    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "selective_scan" in out
