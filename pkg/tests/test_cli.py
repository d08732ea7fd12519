from __future__ import annotations

import re

import pytest

from diffplan.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "c.yaml").write_text(
        "net:\n  hidden: [16, 16]\n"
        "pretrain:\n  steps: 20\n  batch_size: 16\n  log_interval: 10\n"
        "finetune:\n  env_steps: 3000\n  n_init: 2\n  p_step: 2\n  batch_size: 16\n  episodes_per_round: 2\n"
    )
    assert main(["gen-data", "--episodes-per-task", "3", "--seed", "1", "--out", str(d / "d.bin")]) == 0
    args = ["pretrain", "--config", str(d / "c.yaml"), "--data", str(d / "d.bin"), "--out", str(d / "p.ckpt")]
    assert main(args + ["--metrics", str(d / "p.csv")]) == 0
    return d


def test_missing_ckpt_names_flag(capsys):
    assert main(["eval", "--task", "reach"]) != 0
    assert "--ckpt" in capsys.readouterr().err


def test_unknown_subcommand_usage(capsys):
    assert main(["fly"]) == 1
    assert "usage" in capsys.readouterr().err


def test_eval_prints_success_rate(workdir, capsys):
    code = main(["eval", "--ckpt", str(workdir / "p.ckpt"), "--task", "reach", "--episodes", "3", "--seed", "0"])
    assert code == 0
    m = re.search(r"success_rate=([0-9.]+)", capsys.readouterr().out)
    assert m and 0.0 <= float(m.group(1)) <= 1.0


def test_bad_config_key_names_key(workdir, capsys):
    args = ["pretrain", "--data", str(workdir / "d.bin"), "--out", str(workdir / "x.ckpt"), "--set", "net.depth=3"]
    assert main(args) == 2
    assert "net.depth" in capsys.readouterr().err


def test_bad_config_value(workdir, capsys):
    args = ["finetune", "--ckpt", str(workdir / "p.ckpt"), "--task", "reach", "--out", str(workdir / "x.ckpt")]
    assert main(args + ["--set", "finetune.regularizer=l2"]) == 2
    assert "finetune.regularizer" in capsys.readouterr().err


def test_unknown_task(workdir):
    assert main(["eval", "--ckpt", str(workdir / "p.ckpt"), "--task", "fly"]) == 2


def test_missing_file_is_runtime_failure(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--task", "reach"]) == 3


def test_finetune_eval_chain_reproducible(workdir, capsys):
    base = ["finetune", "--config", str(workdir / "c.yaml"), "--ckpt", str(workdir / "p.ckpt"), "--task", "reach"]
    for tag in ("a", "b"):
        args = base + ["--out", str(workdir / f"f{tag}.ckpt"), "--metrics", str(workdir / f"bc_{tag}.csv"), "--seed", "4"]
        assert main(args) == 0
    assert (workdir / "bc_a.csv").read_bytes() == (workdir / "bc_b.csv").read_bytes()
    assert (workdir / "fa.ckpt").read_bytes() == (workdir / "fb.ckpt").read_bytes()
    assert main(["eval", "--ckpt", str(workdir / "fa.ckpt"), "--task", "reach", "--episodes", "2"]) == 0
    out = workdir / "t.csv"
    assert main(["export-traj", "--ckpt", str(workdir / "fa.ckpt"), "--task", "reach", "-n", "2", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 1 + 2 * 50
    capsys.readouterr()
    assert main(["report", "--in", str(workdir / "bc_a.csv"), "--out", str(workdir / "r.txt")]) == 0
    assert capsys.readouterr().out.splitlines()[1].startswith("bc_a")


def test_export_zero_is_header_only(workdir):
    out = workdir / "empty.csv"
    assert main(["export-traj", "--ckpt", str(workdir / "p.ckpt"), "--task", "push", "-n", "0", "--out", str(out)]) == 0
    assert out.read_text().splitlines() == ["episode,t,s0,s1,s2,s3,a0,a1,reward,success"]
