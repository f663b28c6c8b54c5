import subprocess
import sys

import pytest

from xpruner.cli import (
    EXIT_CONFIG,
    EXIT_DEGENERATE,
    EXIT_IO,
    EXIT_NONCONVERGENCE,
    EXIT_OK,
    EXIT_ORDER,
    build_parser,
    main,
)

SMALL = ["--image-size", "16", "--embed-dim", "16", "--num-heads", "2", "--samples-per-class", "6",
         "--test-samples-per-class", "3", "--batch-size", "9"]


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("XPRUNER_OUT", str(tmp_path))
    return tmp_path


def test_full_pipeline_and_exit_codes(out, capsys):
    assert main(["train-baseline", *SMALL, "--baseline-epochs", "1"]) == EXIT_OK
    assert (out / "baseline.ckpt").exists()
    assert main(["train-masks", *SMALL, "--mask-epochs", "1"]) == EXIT_OK
    assert main(["prune", *SMALL, "--alpha", "0.999"]) == EXIT_DEGENERATE
    assert main(["prune", *SMALL, "--prune-steps", "2", "--prune-min-steps", "5"]) == EXIT_NONCONVERGENCE
    assert main(["finetune", *SMALL, "--checkpoint", str(out / "masks.ckpt")]) == EXIT_ORDER
    assert main(["prune", *SMALL, "--prune-min-steps", "2"]) == EXIT_OK
    assert main(["finetune", *SMALL, "--finetune-epochs", "1"]) == EXIT_OK
    capsys.readouterr()
    assert main(["report", *SMALL, str(out / "pruned.ckpt"), str(out / "baseline.ckpt")]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and "alpha=0.0" in lines[0] and "alpha=0.5" in lines[1]


def test_config_errors_exit_2(out, capsys):
    assert main(["train-baseline", "--alpha", "1.5"]) == EXIT_CONFIG
    assert "[alpha]" in capsys.readouterr().err
    assert main(["train-baseline", "--dataset", "idx"]) == EXIT_CONFIG
    assert main(["train-baseline", "--config", str(out / "missing.cfg")]) == EXIT_CONFIG


def test_io_errors_exit_3(out):
    (out / "bad.ckpt").write_bytes(b"garbage")
    assert main(["finetune", *SMALL, "--checkpoint", str(out / "bad.ckpt")]) == EXIT_IO
    assert main(["report", str(out / "absent.ckpt")]) == EXIT_IO


def test_config_file_and_flag_precedence(out):
    cfg = out / "run.cfg"
    cfg.write_text("# tiny\nimage_size = 16\nembed-dim = 16\nnum_heads = 2\nsamples_per_class = 4\n"
                   "test_samples_per_class = 2\nbaseline_epochs = 3\n")
    assert main(["train-baseline", "--config", str(cfg), "--baseline-epochs", "1"]) == EXIT_OK
    rows = (out / "baseline_metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 3  # header + epochs 0 and 1


def test_parser_uses_kebab_case_flags():
    help_text = build_parser()._subparsers._group_actions[0].choices["prune"].format_help()
    assert "--lambda-sm" in help_text and "--gate-variant" in help_text and "default: 0.02" in help_text


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "xpruner", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "train-baseline" in proc.stdout
