"""Front-end behavior: exit codes, echo round-trips, artifact layout."""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from wrf import cli
from wrf.errors import ConfigError

SMALL_CFG = """\
# desk-size smoke configuration
d_ref=8
d_mod=4
n_mods=3
n_train=40
n_val=30
gallery_size=120
noise_sigma=0.05
subset_size=4
hidden=16
d_out=8
total_epochs=4
warmup_epochs=1
batch_size=16
eval_every=2
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "base.cfg"
    path.write_text(SMALL_CFG + f"out_dir={tmp_path / 'out'}\n", encoding="utf-8")
    return path


def metrics_without_seconds(run_dir: Path) -> list[str]:
    out = []
    for line in (run_dir / "metrics.csv").read_text().strip().split("\n"):
        cells = line.split(",")
        cells[11] = ""
        out.append(",".join(cells))
    return out


def test_train_run_layout(cfg_file, tmp_path, capsys):
    code = cli.main(["train", "--config", str(cfg_file), "--set", "run_name=a"])
    assert code == 0
    run_dir = tmp_path / "out" / "a"
    for name in ("config.echo", "metrics.csv", "best.ckpt", "epoch_4.ckpt"):
        assert (run_dir / name).exists(), name
    header = (run_dir / "metrics.csv").read_text().split("\n")[0]
    assert header == (
        "epoch,split,loss,r_at_1,r_at_5,r_at_10,r_at_50,rmean,rsubset_at_1,"
        "gap,lr,seconds,adv_steps,rand_steps"
    )
    assert "best val rmean" in capsys.readouterr().out


def test_config_echo_round_trip(cfg_file, tmp_path):
    cli.main(["train", "--config", str(cfg_file), "--set", "run_name=a",
              "--set", "gamma=0.002"])
    echo_path = tmp_path / "out" / "a" / "config.echo"
    config = cli.load_config_echo(echo_path)
    assert config.gamma == 0.002
    assert config.run_name == "a"
    # the echo of the parsed echo is byte-identical, hash line included
    assert cli.config_echo_text(config) == echo_path.read_text()
    last = echo_path.read_text().strip().split("\n")[-1]
    assert last == f"config_hash={cli.config_hash(config)}"


def test_rerun_is_deterministic(cfg_file, tmp_path):
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(cfg_file),
                         "--set", f"run_name={name}"]) == 0
    out = tmp_path / "out"
    assert metrics_without_seconds(out / "a") == metrics_without_seconds(out / "b")
    ckpt_a = (out / "a" / "best.ckpt").read_bytes()
    ckpt_b = (out / "b" / "best.ckpt").read_bytes()
    assert ckpt_a == ckpt_b


def test_missing_config_is_exit_2(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2
    assert "not found" in capsys.readouterr().err


def test_invalid_values_are_exit_2(cfg_file, capsys):
    assert cli.main(["train", "--config", str(cfg_file), "--set", "gamma=-1"]) == 2
    assert cli.main(["train", "--config", str(cfg_file), "--set", "nonsense=3"]) == 2
    assert cli.main(["train", "--config", str(cfg_file), "--set", "batch_size=lots"]) == 2
    assert cli.main(["train", "--config", str(cfg_file), "--set", "oops"]) == 2
    capsys.readouterr()


def test_malformed_config_line_is_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("gamma 0.001\n", encoding="utf-8")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "expected key=value" in capsys.readouterr().err


def test_sweep_summary_schema(cfg_file, tmp_path, capsys):
    code = cli.main([
        "sweep", "--config", str(cfg_file), "--param", "fraction",
        "--values", "1.0,0.5", "--seeds", "1,0",
    ])
    assert code == 0
    lines = (tmp_path / "out" / "sweep_summary.csv").read_text().strip().split("\n")
    assert lines[0] == cli.SWEEP_HEADER
    keys = [tuple(l.split(",")[:3]) for l in lines[1:]]
    # sorted by value then seed regardless of argument order
    assert keys == [
        ("fraction", "0.5", "0"), ("fraction", "0.5", "1"),
        ("fraction", "1.0", "0"), ("fraction", "1.0", "1"),
    ]
    for line in lines[1:]:
        cells = line.split(",")
        assert len(cells) == 8
        float(cells[3]), float(cells[7])  # numeric summary fields
    assert (tmp_path / "out" / "fraction_0.5_seed1" / "config.echo").exists()
    capsys.readouterr()


def test_sweep_continues_past_failing_run(cfg_file, tmp_path, capsys):
    # rank 13 exceeds the first fusion layer's min dimension (12): that
    # run fails at model build time, the others must still complete.
    code = cli.main([
        "sweep", "--config", str(cfg_file), "--param", "lora_rank",
        "--values", "2,13", "--seeds", "0",
    ])
    assert code == 4
    lines = (tmp_path / "out" / "sweep_summary.csv").read_text().strip().split("\n")
    assert len(lines) == 2  # header plus the surviving run
    assert lines[1].startswith("lora_rank,2,0,")
    assert "failed" in capsys.readouterr().err


def test_sweep_bad_values_are_exit_2(cfg_file, capsys):
    assert cli.main([
        "sweep", "--config", str(cfg_file), "--param", "rho",
        "--values", "0.5,2.0", "--seeds", "0",
    ]) == 2
    capsys.readouterr()


def test_lora_rank_zero_means_full_mode(cfg_file, tmp_path, capsys):
    code = cli.main([
        "sweep", "--config", str(cfg_file), "--param", "lora_rank",
        "--values", "0", "--seeds", "0",
    ])
    assert code == 0
    echo = cli.load_config_echo(tmp_path / "out" / "lora_rank_0_seed0" / "config.echo")
    assert echo.finetune_mode == "full"
    capsys.readouterr()


def test_landscape_csv(cfg_file, tmp_path, capsys):
    cli.main(["train", "--config", str(cfg_file), "--set", "run_name=a"])
    ckpt = tmp_path / "out" / "a" / "best.ckpt"
    code = cli.main([
        "landscape", "--checkpoint", str(ckpt),
        "--directions", "3", "--alpha-steps", "2",
    ])
    assert code == 0
    lines = (tmp_path / "out" / "a" / "landscape.csv").read_text().strip().split("\n")
    assert lines[0] == "direction_id,alpha,loss"
    assert len(lines) == 1 + 3 * 5
    base_losses = {l.split(",")[2] for l in lines[1:] if float(l.split(",")[1]) == 0.0}
    assert len(base_losses) == 1  # alpha=0 rows share the exact base loss
    capsys.readouterr()


def test_landscape_corrupt_checkpoint_is_exit_2(cfg_file, tmp_path, capsys):
    cli.main(["train", "--config", str(cfg_file), "--set", "run_name=a"])
    bad = tmp_path / "out" / "a" / "best.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert cli.main(["landscape", "--checkpoint", str(bad)]) == 2
    assert cli.main(["landscape", "--checkpoint", str(tmp_path / "ghost.ckpt")]) == 2
    capsys.readouterr()


def test_selfcheck_passes_clean_and_fails_injected(capsys):
    assert cli.main(["selfcheck"]) == 0
    out = capsys.readouterr().out
    assert "gradient-oracle" in out and "selfcheck passed" in out
    assert cli.main(["selfcheck", "--inject", "grad-sign"]) == 1
    captured = capsys.readouterr()
    assert "gradient-oracle" in captured.err  # failing property named


def test_value_parsing_round_trip():
    config = cli.build_config({"hidden": "32,16", "gamma": "0.002", "seed": "3"})
    assert config.hidden == (32, 16)
    assert config.gamma == 0.002
    rebuilt = cli.build_config(
        cli.parse_config_lines(cli.config_echo_text(config).splitlines())
    )
    assert rebuilt == config
    with pytest.raises(ConfigError):
        cli.build_config({"fraction": "0"})
    with pytest.raises(ConfigError):
        cli.build_config({"run_name": "a/b"})


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "wrf.cli", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    for name in ("train", "sweep", "landscape", "selfcheck"):
        assert name in proc.stdout
