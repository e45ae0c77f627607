import json
import re

import pytest

import slimdet_cli
from slimdet.checkpoint import load_checkpoint, save_checkpoint
from slimdet.config import ArchConfig, RunConfig, TrainConfig, config_to_dict
from slimdet.errors import NumericalError
from slimdet.slimming import count_params

ERROR_LINE = re.compile(r'^error kind=(\w+) code=(\d) message=".*"$')
QUIET = ["--log-level", "ERROR"]


def run_cli(capsys, *argv):
    code = slimdet_cli.run(list(argv) + QUIET if argv and argv[0] in slimdet_cli.COMMANDS else list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    lines = [line for line in err.splitlines() if line.startswith("error kind=")]
    assert len(lines) == 1
    match = ERROR_LINE.match(lines[0])
    assert match
    return match.group(1), int(match.group(2))


@pytest.fixture
def tiny_config_file(tmp_path):
    run = RunConfig(arch=ArchConfig.tiny(),
                    train=TrainConfig(epochs=1, batch_size=4, warmup_epochs=0, lr_step_epochs=[], seed=1),
                    log_level="ERROR")
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(config_to_dict(run)), encoding="utf-8")
    return str(path)


@pytest.fixture
def tiny_checkpoint(tmp_path, tiny_model):
    path = tmp_path / "base"
    save_checkpoint(str(path), *tiny_model, metadata={"stage": "train"})
    return str(path)


class TestErrors:

    def test_unknown_command(self, capsys):
        code, _, err = run_cli(capsys, "compress")
        assert code == 1
        assert error_line(err) == ("UsageError", 1)

    def test_missing_subcommand(self, capsys):
        code, _, err = run_cli(capsys)
        assert code == 1
        assert error_line(err) == ("UsageError", 1)

    def test_missing_required_flag(self, capsys):
        code, _, err = run_cli(capsys, "prune", "--ckpt", "x")
        assert code == 1

    def test_missing_checkpoint(self, capsys, tmp_path):
        code, out, err = run_cli(capsys, "info", "--ckpt", str(tmp_path / "absent"))
        assert code == 2
        assert out == ""
        assert error_line(err) == ("FormatError", 2)

    def test_bad_config(self, capsys, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"train": {"bogus": 1}}), encoding="utf-8")
        code, _, err = run_cli(capsys, "train", "--data", str(tmp_path), "--config", str(config),
                               "--out", str(tmp_path / "out"))
        assert code == 1
        assert error_line(err) == ("ConfigError", 1)
        assert "train.bogus" in err

    def test_non_positive_lambda(self, capsys, tmp_path, tiny_config_file):
        code, _, err = run_cli(capsys, "sparsify", "--data", str(tmp_path), "--config", tiny_config_file,
                               "--out", str(tmp_path / "out"), "--lambda", "0")
        assert code == 1
        assert error_line(err) == ("UsageError", 1)

    def test_numerical_failure(self, capsys, monkeypatch, tiny_checkpoint):
        def diverge(args):
            raise NumericalError("training loss diverged (nan)", step=4)

        monkeypatch.setitem(slimdet_cli.COMMANDS, "info", diverge)
        code, _, err = run_cli(capsys, "info", "--ckpt", tiny_checkpoint)
        assert code == 3
        assert error_line(err) == ("NumericalError", 3)
        assert "step 4" in err

    def test_resolution_mismatch(self, capsys, tmp_path, tiny_checkpoint):
        data = str(tmp_path / "data")
        assert run_cli(capsys, "gen-data", "--n", "2", "--out", data, "--image-size", "64",
                       "--small-fraction", "1.0")[0] == 0
        code, _, err = run_cli(capsys, "eval", "--ckpt", tiny_checkpoint, "--data", data)
        assert code == 1
        assert error_line(err) == ("ConfigError", 1)


class TestCommands:

    def test_gen_data(self, capsys, tmp_path):
        out_dir = str(tmp_path / "data")
        code, out, _ = run_cli(capsys, "gen-data", "--seed", "1", "--n", "4", "--out", out_dir,
                               "--image-size", "32", "--small-fraction", "1.0")
        assert code == 0
        document = json.loads(out)
        assert document["count"] == 4
        assert document["small_share"] == 1.0
        assert (tmp_path / "data" / "images.bin").stat().st_size == 4 * 3 * 32 * 32

    def test_info(self, capsys, tiny_checkpoint, tiny_model):
        code, out, _ = run_cli(capsys, "info", "--ckpt", tiny_checkpoint)
        assert code == 0
        document = json.loads(out)
        report = count_params(*tiny_model)
        assert document["trainable"] == report.trainable
        assert document["byte_size"] == report.byte_size
        assert document["stage"] == "train"

    def test_prune_then_info(self, capsys, tmp_path, tiny_checkpoint):
        pruned = str(tmp_path / "pruned")
        code, out, _ = run_cli(capsys, "prune", "--ckpt", tiny_checkpoint, "--ratio", "0.3", "--out", pruned)
        assert code == 0
        report = json.loads(out)
        assert report["realized_ratio"] == pytest.approx(0.3, abs=0.05)
        assert json.loads((tmp_path / "pruned" / "prune_report.json").read_text(encoding="utf-8")) == report

        code, out, _ = run_cli(capsys, "info", "--ckpt", pruned, "--baseline", tiny_checkpoint)
        assert code == 0
        info = json.loads(out)
        assert info["param_reduction_pct"] == pytest.approx(report["param_reduction_pct"])
        assert info["trainable"] == report["after"]["trainable"]
        assert load_checkpoint(pruned).metadata["stage"] == "prune"

    def test_prune_to_target_reduction(self, capsys, tmp_path, tiny_checkpoint):
        pruned = tmp_path / "pruned"
        code, out, _ = run_cli(capsys, "prune", "--ckpt", tiny_checkpoint, "--target-reduction", "30",
                               "--out", str(pruned))
        assert code == 0
        report = json.loads(out)
        assert report["param_reduction_pct"] >= 30.0
        assert report["target_reduction_pct"] == 30.0
        assert load_checkpoint(str(pruned)).metadata["prune"]["target_reduction_pct"] == 30.0

    def test_ratio_and_target_are_exclusive(self, capsys, tmp_path, tiny_checkpoint):
        code, _, err = run_cli(capsys, "prune", "--ckpt", tiny_checkpoint, "--ratio", "0.3",
                               "--target-reduction", "30", "--out", str(tmp_path / "pruned"))
        assert code == 1
        assert error_line(err) == ("UsageError", 1)

    def test_iterative_prune(self, capsys, tmp_path, tiny_checkpoint):
        code, out, _ = run_cli(capsys, "prune", "--ckpt", tiny_checkpoint, "--ratio", "0.5",
                               "--iterations", "2", "--out", str(tmp_path / "pruned"))
        assert code == 0
        report = json.loads(out)
        assert len(report["passes"]) == 2
        assert report["iterations"] == 2

    def test_full_procedure(self, capsys, tmp_path, tiny_config_file):
        data = str(tmp_path / "data")
        base, sparse, pruned, tuned = (str(tmp_path / name) for name in ("base", "sparse", "pruned", "tuned"))
        common = ["--data", data, "--config", tiny_config_file]

        assert run_cli(capsys, "gen-data", "--seed", "2", "--n", "8", "--out", data,
                       "--image-size", "32", "--small-fraction", "1.0")[0] == 0
        assert run_cli(capsys, "train", *common, "--out", base)[0] == 0
        code, out, _ = run_cli(capsys, "sparsify", *common, "--ckpt", base, "--lambda", "1e-3", "--out", sparse)
        assert code == 0
        assert json.loads(out)["stage"] == "sparsify"
        assert (tmp_path / "sparse" / "train_log.jsonl").exists()
        assert run_cli(capsys, "prune", "--ckpt", sparse, "--ratio", "0.3", "--out", pruned)[0] == 0
        assert run_cli(capsys, "finetune", *common, "--ckpt", pruned, "--out", tuned)[0] == 0

        report_file = str(tmp_path / "eval.json")
        code, out, _ = run_cli(capsys, "eval", "--ckpt", tuned, "--data", data, "--output-file", report_file)
        assert code == 0
        summary = json.loads(out)
        assert 0.0 <= summary["map"] <= 1.0
        assert {"ap50", "ap75", "ap_small", "per_class"} <= set(summary)
        assert json.loads((tmp_path / "eval.json").read_text(encoding="utf-8")) == summary

        tuned_ckpt = load_checkpoint(tuned)
        assert tuned_ckpt.metadata["stage"] == "finetune"
        assert tuned_ckpt.graph.canonical_json() == load_checkpoint(pruned).graph.canonical_json()
