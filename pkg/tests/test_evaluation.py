import csv
import json

import numpy as np
import pytest
import torch
import torch.nn as nn

from bifp import checkpoint as ckpt
from bifp.dataio import ClipRecord, write_clip, write_index
from bifp.encoders import BackboneConfig
from bifp.errors import HeadShapeMismatch, TooFewBlocks, UnknownFreezePoint
from bifp.evaluation import (
    PROBE_COLUMNS,
    Classifier,
    build_classifier,
    finetune_param_groups,
    frozen_modules,
    finetune,
    freeze_points,
    infer_video,
    layerwise_probe,
    window_starts,
    write_probe_csv,
)
from bifp.training import pretrain

from conftest import tiny_config


@pytest.fixture(scope="module")
def pretrained(drift_data, tmp_path_factory):
    return pretrain(tiny_config(train__epochs=1), drift_data, tmp_path_factory.mktemp("pre")).checkpoint


@pytest.fixture(scope="module")
def separable(tmp_path_factory):
    """Two classes that differ in overall brightness: linearly separable by construction."""
    root = tmp_path_factory.mktemp("sep")
    rng = np.random.default_rng(0)
    recs = []
    for i in range(24):
        label = i % 2
        frames = np.clip(0.2 + 0.6 * label + rng.normal(0, 0.05, (40, 32, 32, 3)), 0, 1)
        (root / f"c{i}").mkdir()
        write_clip(root / f"c{i}" / "clip.bfp", frames)
        recs.append(ClipRecord(f"c{i}", f"c{i}/clip.bfp", 40, label))
    write_index(root, recs)
    return root


def test_window_enumeration():
    assert window_starts(16, 8) == [0, 4, 8]
    assert window_starts(8, 8) == [0]
    assert window_starts(10, 7) == [0, 3]
    assert window_starts(3, 1) == [0, 1, 2]
    with pytest.raises(TooFewBlocks):
        window_starts(3, 4)


class Constant(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = torch.tensor(logits)

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1)


def test_uniform_logits_give_uniform_probs():
    probs = infer_video(Constant([0.3, 0.3, 0.3, 0.3]), np.zeros((40, 8, 8, 3), np.float32), seq_len=4)
    np.testing.assert_allclose(probs, 0.25, atol=1e-12)


def test_single_window_equals_its_softmax():
    model = Classifier(BackboneConfig(family="tiny3d", feature_dim=8, width=4), 3).eval()
    frames = np.random.default_rng(0).random((20, 16, 16, 3), dtype=np.float32)
    probs = infer_video(model, frames, seq_len=4)
    x = torch.from_numpy(frames.reshape(1, 4, 5, 16, 16, 3)).permute(0, 1, 5, 2, 3, 4)
    with torch.no_grad():
        direct = torch.softmax(model(x).double(), -1)[0].numpy()
    np.testing.assert_allclose(probs, direct, atol=1e-6)
    assert abs(probs.sum() - 1) < 1e-6 and (probs >= 0).all()
    with pytest.raises(TooFewBlocks):
        infer_video(model, frames[:15], seq_len=4)


def test_freeze_points():
    assert freeze_points("resnet18_2d3d") == list(PROBE_COLUMNS)
    assert freeze_points("tiny3d") == ["conv_1", "res_1", "res_2", "agg"]


def test_finetune_transfer_surface_and_groups(pretrained, drift_data, tmp_path):
    res = finetune(pretrained, drift_data, tiny_config(), tmp_path)
    assert res.loaded_keys and all(k.startswith(("backbone.", "present_agg.")) for k in res.loaded_keys)
    arrays, _ = ckpt.load(pretrained)
    pretrained_keys = {k[len("model."):] for k in arrays if k.startswith("model.")}
    assert any(k.startswith("pf_agg.") for k in pretrained_keys) and any(k.startswith("head.") for k in pretrained_keys)
    assert not any(k.startswith(("pf_agg.", "head.", "pf_backbone.")) for k in res.loaded_keys)
    params = {k for k in pretrained_keys if k.startswith(("backbone.", "present_agg.")) and "running" not in k
              and "num_batches" not in k}
    groups = res.param_groups
    assert set(groups["pretrained"]) == params
    assert set(groups["head"]) == {"fc.weight", "fc.bias"}
    assert not set(groups["pretrained"]) & set(groups["head"])
    report = json.loads((tmp_path / "eval-report.json").read_text())
    assert report["checkpoint_sha256"] == ckpt.file_digest(pretrained)
    assert {"top1", "per_video", "config"} <= report.keys()
    for row in report["per_video"]:
        assert abs(sum(row["probs"]) - 1) < 1e-6


def test_finetune_learning_rates(pretrained, drift_data):
    cfg = tiny_config()
    model = build_classifier(cfg.backbone, 2, 0)
    lrs = {g["name"]: g["lr"] for g in finetune_param_groups(model, True, cfg.finetune)}
    assert lrs == {"pretrained": 1e-4, "head": 1e-3}


def test_random_init_control_and_separable_data(separable):
    res = finetune(None, separable, tiny_config(finetune__epochs=8), eval_data=separable)
    assert res.loaded_keys == []
    assert res.accuracy >= 0.9


def test_head_shape_mismatch(pretrained, drift_data):
    with pytest.raises(HeadShapeMismatch):
        finetune(pretrained, drift_data, tiny_config(finetune__num_classes=1), epochs=0)


@pytest.mark.parametrize("freeze", ["conv_1", "res_1", "res_2", "agg"])
def test_probe_freeze_integrity(pretrained, drift_data, freeze):
    res = layerwise_probe(pretrained, drift_data, freeze, tiny_config(), epochs=2)
    assert res.frozen_digest_before == res.frozen_digest_after
    assert 0.0 <= res.accuracy <= 1.0


def test_probe_agg_trains_only_the_classifier(pretrained, drift_data):
    model = build_classifier(tiny_config().backbone, 2, 0)
    frozen = frozen_modules(model, "agg")
    frozen_params = {id(p) for m in frozen for p in m.parameters()}
    free = [n for n, p in model.named_parameters() if id(p) not in frozen_params]
    assert free == ["fc.weight", "fc.bias"]


def test_unknown_freeze_point(pretrained, drift_data):
    with pytest.raises(UnknownFreezePoint):
        layerwise_probe(pretrained, drift_data, "res_4", tiny_config(), epochs=1)


def test_probe_csv(tmp_path):
    path = write_probe_csv(tmp_path / "p.csv", {"ours": {"res_1": 0.5, "agg": 0.25}})
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["model", "conv_1", "res_1", "res_2", "res_3", "res_4", "agg"]
    assert rows[1] == ["ours", "", "50.0", "", "", "", "25.0"]
