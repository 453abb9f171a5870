import csv

import pytest

from bifp.cli import main

TINY_CFG = """\
backbone.family = tiny3d
backbone.feature_dim = 16
backbone.proj_hidden = 16
backbone.proj_dim = 16
backbone.width = 4
augment.crop_size = 28
partition.max_stride = 1
train.batch_size = 8
train.epochs = 1
finetune.batch_size = 8
finetune.stride = 1
finetune.epochs = 1
probe.batch_size = 8
probe.epochs = 1
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CFG)
    return str(p)


def test_unknown_key_fails_with_one_line(cfg, drift_data, tmp_path, capsys):
    code = main(["pretrain", "--config", cfg, "--data", str(drift_data), "--run-dir", str(tmp_path / "r"),
                 "--set", "loss.bogus=1"])
    err = capsys.readouterr().err.strip()
    assert code != 0
    assert err.splitlines() == [err] and err.startswith("ConfigError:") and "loss.bogus" in err


def test_missing_dataset(cfg, tmp_path, capsys):
    assert main(["pretrain", "--config", cfg, "--data", str(tmp_path / "nope"), "--run-dir", str(tmp_path)]) != 0
    assert capsys.readouterr().err.startswith("DatasetError:")


def test_pipeline_and_snapshot(cfg, drift_data, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("BIFP_RUN_ROOT", str(tmp_path / "root"))
    assert main(["pretrain", "--config", cfg, "--data", str(drift_data), "--seed", "2"]) == 0
    (run,) = (tmp_path / "root").iterdir()
    assert run.name.startswith("pretrain-")
    snapshot = (run / "config.resolved").read_text()
    assert "train.seed = 2" in snapshot
    ckpt = run / "checkpoint.bfpc"

    # re-running from the snapshot reproduces the checkpoint
    again = tmp_path / "again"
    assert main(["pretrain", "--config", str(run / "config.resolved"), "--data", str(drift_data),
                 "--run-dir", str(again)]) == 0
    assert (again / "checkpoint.bfpc").read_bytes() == ckpt.read_bytes()

    assert main(["probe", "--config", cfg, "--data", str(drift_data), "--checkpoint", str(ckpt),
                 "--freeze", "res_1", "--run-dir", str(tmp_path / "probe")]) == 0
    rows = list(csv.reader(open(tmp_path / "probe" / "probe.csv")))
    assert rows[0] == ["model", "conv_1", "res_1", "res_2", "res_3", "res_4", "agg"]
    assert rows[1][2] != "" and rows[1][1] == ""

    assert main(["finetune", "--config", cfg, "--data", str(drift_data), "--checkpoint", str(ckpt),
                 "--run-dir", str(tmp_path / "ft")]) == 0
    assert main(["infer", "--data", str(drift_data), "--checkpoint", str(tmp_path / "ft" / "classifier.bfpc"),
                 "--run-dir", str(tmp_path / "inf")]) == 0
    assert (tmp_path / "inf" / "eval-report.json").exists()
    capsys.readouterr()
    assert main(["infer", "--data", str(drift_data), "--checkpoint", str(ckpt), "--run-dir", str(tmp_path / "x")]) != 0
    assert capsys.readouterr().err.startswith("CheckpointError:")


def test_gen_and_inspect_pairs(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "d"), "--n-clips", "4", "--run-dir", str(tmp_path / "g")]) == 0
    assert len((tmp_path / "d" / "clips.tsv").read_text().splitlines()) == 5
    capsys.readouterr()
    assert main(["inspect-pairs", "--videos", "2", "--run-dir", str(tmp_path / "i")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "positive\tslot\tcandidate\ttag\tsim"
    # 2 videos x 4 positives x 13 candidates
    assert len(lines) == 1 + 8 * 13
