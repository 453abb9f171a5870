"""Transfer evaluation: finetuning, layer-wise frozen probes and video inference."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .augmentation import AugmentPolicy, augment_partition, eval_transform
from .config import RunConfig
from .dataio import ClipDataset
from .encoders import Backbone, BackboneConfig, ConvGRU, pool, stage_names
from .errors import HeadShapeMismatch, TooFewBlocks, UnknownFreezePoint
from .partitioning import PartitionSpec, partition_clip, split_blocks
from .training import Plateau, sample_rng, set_determinism, split_by_hash, to_tensor

log = logging.getLogger(__name__)

PROBE_COLUMNS = ("conv_1", "res_1", "res_2", "res_3", "res_4", "agg")
TRANSFER_PREFIXES = ("backbone.", "present_agg.")


def freeze_points(family: str) -> List[str]:
    return stage_names(family) + ["agg"]


class Classifier(nn.Module):
    """Backbone + present aggregator + linear layer over the pooled feature."""

    def __init__(self, cfg: BackboneConfig, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.present_agg = ConvGRU(cfg.feature_dim, cfg.feature_dim)
        self.fc = nn.Linear(cfg.feature_dim, num_classes)

    @property
    def num_classes(self) -> int:
        return self.fc.out_features

    def features(self, blocks: torch.Tensor) -> torch.Tensor:
        b, n = blocks.shape[:2]
        f = self.backbone(blocks.reshape((b * n,) + blocks.shape[2:]))
        f = f.reshape((b, n) + f.shape[1:])
        return pool(self.present_agg(f))

    def forward(self, blocks: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(blocks))

    def pretrained_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith(TRANSFER_PREFIXES)]

    def head_parameters(self):
        return list(self.fc.parameters())


def build_classifier(cfg: BackboneConfig, num_classes: int, seed: int) -> Classifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Classifier(cfg, num_classes)


def backbone_config_from(checkpoint, fallback: BackboneConfig) -> BackboneConfig:
    if checkpoint is None:
        return fallback
    _, meta = ckpt.load(checkpoint)
    echo = meta.get("backbone")
    return BackboneConfig(**echo) if echo else fallback


def transferred_state(arrays: Dict[str, np.ndarray]) -> Dict[str, torch.Tensor]:
    """Pretrained tensors that move to a downstream model (backbone, present aggregator)."""
    state = ckpt.extract_state(arrays, "model.")
    return {k: v for k, v in state.items() if k.startswith(TRANSFER_PREFIXES)}


def load_pretrained(model: Classifier, checkpoint) -> List[str]:
    """Copy backbone and present-aggregator weights into ``model``; returns the loaded keys."""
    arrays, meta = ckpt.load(checkpoint)
    state = transferred_state(arrays)
    if meta.get("kind") == "classifier":
        heads = ckpt.extract_state(arrays, "model.")
        w = heads.get("fc.weight")
        if w is not None and w.shape[0] != model.num_classes:
            raise HeadShapeMismatch(f"checkpoint head has {w.shape[0]} classes, model has {model.num_classes}")
    missing, unexpected = model.load_state_dict(state, strict=False)
    bad = [k for k in missing if k.startswith(TRANSFER_PREFIXES)]
    if bad or unexpected:
        raise HeadShapeMismatch(f"checkpoint does not match model: missing {bad}, unexpected {unexpected}")
    return sorted(state)


# -- inference ---------------------------------------------------------------

def window_starts(n_blocks: int, seq_len: int) -> List[int]:
    """Start blocks of half-overlapping windows (stride ``seq_len // 2``, at least 1)."""
    if n_blocks < seq_len:
        raise TooFewBlocks(f"{n_blocks} blocks, need {seq_len}")
    step = max(1, seq_len // 2)
    return list(range(0, n_blocks - seq_len + 1, step))


@torch.no_grad()
def infer_video(
    model: nn.Module,
    frames: np.ndarray,
    seq_len: int,
    frames_per_block: int = 5,
    stride: int = 1,
    crop_size: Optional[int] = None,
) -> np.ndarray:
    """Average softmax over half-overlapping block windows of a whole video."""
    blocks = [eval_transform(b, crop_size) for b in split_blocks(frames, frames_per_block, stride)]
    if len(blocks) < seq_len and stride > 1:
        blocks = [eval_transform(b, crop_size) for b in split_blocks(frames, frames_per_block, 1)]
    starts = window_starts(len(blocks), seq_len)
    model.eval()
    batch = to_tensor([blocks[s:s + seq_len] for s in starts])
    probs = F.softmax(model(batch).double(), dim=-1)
    return probs.mean(dim=0).numpy()


@dataclass
class EvalReport:
    top1: float
    per_video: List[dict]
    config: Dict[str, object] = field(default_factory=dict)
    checkpoint_sha256: Optional[str] = None

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str))
        return path


def evaluate(model: Classifier, dataset: ClipDataset, config: RunConfig, stride: int) -> EvalReport:
    rows, correct = [], 0
    for i, rec in enumerate(dataset.records):
        probs = infer_video(
            model, dataset.frames(i), config.partition.n_present,
            config.partition.frames_per_block, stride, config.augment.crop_size,
        )
        pred = int(np.argmax(probs))
        correct += int(pred == rec.label)
        rows.append({"clip_id": rec.clip_id, "label": rec.label, "pred": pred,
                     "probs": [round(float(p), 8) for p in probs]})
    return EvalReport(top1=correct / len(rows), per_video=rows, config={k: str(v) for k, v in config.to_flat().items()})


# -- shared classifier training loop ---------------------------------------------

def _train_policy(config: RunConfig, ops: Sequence[str]) -> AugmentPolicy:
    a = config.augment
    return AugmentPolicy(
        mode="consistent", ops=tuple(o for o in ops if o in ("crop", "hflip", "color_jitter")),
        crop_size=a.crop_size, brightness=a.brightness, contrast=a.contrast,
        saturation=a.saturation, hue=a.hue, per_frame_jitter=False,
    )


def _present_spec(config: RunConfig) -> PartitionSpec:
    p = config.partition
    return PartitionSpec(0, p.n_present, 0, p.frames_per_block, max_stride=1)


def _labelled_batch(dataset, idx, spec, policy, stride, rng):
    groups, labels = [], []
    for i in idx:
        part = partition_clip(dataset.frames(int(i)), spec, rng, stride=stride)
        part = augment_partition(part, policy, rng)
        groups.append(part.present_blocks)
        labels.append(dataset.label(int(i)))
    return to_tensor(groups), torch.tensor(labels, dtype=torch.long)


def _run_epochs(model, optimizer, dataset, train_idx, config, policy, stride, batch_size, epochs,
                seed, stream, on_epoch=None, frozen: Sequence[nn.Module] = ()):
    spec = _present_spec(config)
    history = []
    for epoch in range(epochs):
        order = sample_rng(seed, stream, epoch).permutation(train_idx)
        model.train()
        for m in frozen:
            m.eval()
        losses = []
        for step, b in enumerate(range(0, len(order), batch_size)):
            rng = sample_rng(seed, stream + 1, epoch, step)
            x, y = _labelled_batch(dataset, order[b:b + batch_size], spec, policy, stride, rng)
            loss = F.cross_entropy(model(x), y)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if on_epoch is not None:
            on_epoch(row)
        history.append(row)
    return history


@torch.no_grad()
def _val_loss(model, dataset, idx, config, stride, seed) -> float:
    spec = _present_spec(config)
    model.eval()
    total = 0.0
    for j, i in enumerate(idx):
        part = partition_clip(dataset.frames(int(i)), spec, sample_rng(seed, 9, j), stride=stride,
                              start=0)
        blocks = [eval_transform(b, config.augment.crop_size) for b in part.present_blocks]
        x = to_tensor([blocks])
        total += F.cross_entropy(model(x), torch.tensor([dataset.label(int(i))])).item()
    return total / max(1, len(idx))


def _split(dataset: ClipDataset, eval_data, fraction):
    if eval_data is not None:
        return list(range(len(dataset))), (eval_data if isinstance(eval_data, ClipDataset) else ClipDataset(eval_data))
    tr, va = split_by_hash([r.clip_id for r in dataset.records], fraction)
    if not va:
        va = tr
    return tr, dataset.subset(va)


def _num_classes(config_value: int, *datasets) -> int:
    labels = np.concatenate([d.labels for d in datasets])
    if (labels < 0).any():
        raise HeadShapeMismatch("dataset contains unlabelled clips (label -1)")
    needed = int(labels.max()) + 1
    if config_value and config_value < needed:
        raise HeadShapeMismatch(f"num_classes={config_value} but labels go up to {needed - 1}")
    return config_value or needed


def _save_classifier(path, model: Classifier, config: RunConfig, extra: dict) -> Path:
    arrays = ckpt.state_arrays("model.", model.state_dict())
    meta = {"kind": "classifier", "num_classes": model.num_classes,
            "backbone": dataclasses.asdict(model.cfg), "config": config.dumps(), **extra}
    return ckpt.save(path, arrays, meta)


# -- finetuning ------------------------------------------------------------

@dataclass
class FinetuneResult:
    accuracy: float
    checkpoint: Optional[Path]
    report: EvalReport
    loaded_keys: List[str]
    history: List[dict]
    param_groups: Dict[str, List[str]]


def finetune_param_groups(model: Classifier, pretrained: bool, ft) -> List[dict]:
    body = model.pretrained_parameters()
    head = model.head_parameters()
    body_lr = ft.backbone_lr if pretrained else ft.head_lr
    return [
        {"name": "pretrained", "params": body, "lr": body_lr},
        {"name": "head", "params": head, "lr": ft.head_lr},
    ]


def finetune(checkpoint, dataset, config: RunConfig, run_dir=None, eval_data=None,
             epochs: Optional[int] = None) -> FinetuneResult:
    """Finetune backbone + present aggregator with a fresh linear head.

    ``checkpoint=None`` gives the random-initialisation control.
    """
    dataset = dataset if isinstance(dataset, ClipDataset) else ClipDataset(dataset)
    ft = config.finetune
    set_determinism(config.train.deterministic)
    train_idx, val_data = _split(dataset, eval_data, ft.val_fraction)
    n_cls = _num_classes(ft.num_classes, dataset, val_data)
    cfg = backbone_config_from(checkpoint, config.backbone)
    model = build_classifier(cfg, n_cls, config.train.seed)
    loaded = load_pretrained(model, checkpoint) if checkpoint is not None else []
    groups = finetune_param_groups(model, checkpoint is not None, ft)
    names = {id(p): n for n, p in model.named_parameters()}
    group_names = {g["name"]: [names[id(p)] for p in g["params"]] for g in groups}
    optimizer = torch.optim.Adam(groups, weight_decay=ft.weight_decay)
    plateau = Plateau(ft.plateau_patience, config.train.plateau_threshold)
    seed = config.train.seed
    val_idx = list(range(len(val_data)))

    def on_epoch(row):
        row["val_loss"] = _val_loss(model, val_data, val_idx, config, ft.stride, seed)
        if plateau.step(row["val_loss"]):
            for g in optimizer.param_groups:
                g["lr"] *= plateau.factor

    history = _run_epochs(
        model, optimizer, dataset, train_idx, config, _train_policy(config, ft.ops), ft.stride,
        ft.batch_size, ft.epochs if epochs is None else epochs, seed, 100, on_epoch,
    )
    report = evaluate(model, val_data, config, ft.stride)
    out = None
    if checkpoint is not None:
        report.checkpoint_sha256 = ckpt.file_digest(checkpoint)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        out = _save_classifier(run_dir / "classifier.bfpc", model, config,
                               {"top1": report.top1, "source": report.checkpoint_sha256})
        report.write(run_dir / "eval-report.json")
    return FinetuneResult(report.top1, out, report, loaded, history, group_names)


# -- layer-wise probes ---------------------------------------------------------

@dataclass
class ProbeResult:
    freeze: str
    accuracy: float
    frozen: List[str]
    frozen_digest_before: str
    frozen_digest_after: str
    report: EvalReport
    checkpoint: Optional[Path] = None


def frozen_modules(model: Classifier, freeze: str) -> List[nn.Module]:
    points = freeze_points(model.cfg.family)
    if freeze not in points:
        raise UnknownFreezePoint(f"{freeze!r} is not one of {points}")
    stages = list(model.backbone.stages.items())
    if freeze == "agg":
        return [m for _, m in stages] + [model.present_agg]
    k = [n for n, _ in stages].index(freeze)
    return [m for _, m in stages[:k + 1]]


def tensor_digest(modules: Sequence[nn.Module]) -> str:
    h = hashlib.sha256()
    for m in modules:
        for k, v in m.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def layerwise_probe(checkpoint, dataset, freeze: str, config: RunConfig, run_dir=None,
                    eval_data=None, epochs: Optional[int] = None) -> ProbeResult:
    """Freeze the network up to ``freeze`` and train the rest from scratch."""
    dataset = dataset if isinstance(dataset, ClipDataset) else ClipDataset(dataset)
    pc = config.probe
    set_determinism(config.train.deterministic)
    train_idx, val_data = _split(dataset, eval_data, config.finetune.val_fraction)
    n_cls = _num_classes(config.finetune.num_classes, dataset, val_data)
    cfg = backbone_config_from(checkpoint, config.backbone)
    seed = config.train.seed
    model = build_classifier(cfg, n_cls, seed)
    if checkpoint is not None:
        load_pretrained(model, checkpoint)
    frozen = frozen_modules(model, freeze)
    # unfrozen parts restart from the initialiser used for fresh training
    fresh = build_classifier(cfg, n_cls, seed + 1)
    frozen_ids = {id(m) for m in frozen}
    for (name, mod), (_, new) in zip(model.backbone.stages.items(), fresh.backbone.stages.items()):
        if id(mod) not in frozen_ids:
            mod.load_state_dict(new.state_dict())
    if id(model.present_agg) not in frozen_ids:
        model.present_agg.load_state_dict(fresh.present_agg.state_dict())
    model.fc.load_state_dict(fresh.fc.state_dict())
    for m in frozen:
        for p in m.parameters():
            p.requires_grad_(False)
    names = [n for n, m in model.named_modules() if id(m) in frozen_ids]
    before = tensor_digest(frozen)

    n_epochs = pc.epochs if epochs is None else epochs
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(trainable, lr=pc.lr, momentum=pc.momentum, weight_decay=pc.weight_decay)
    milestones = sorted({max(1, int(round(f * n_epochs))) for f in pc.milestones})
    sched = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones, gamma=0.1)
    _run_epochs(
        model, optimizer, dataset, train_idx, config, _train_policy(config, pc.ops), config.finetune.stride,
        pc.batch_size, n_epochs, seed, 200, lambda row: sched.step(), frozen=frozen,
    )
    after = tensor_digest(frozen)
    report = evaluate(model, val_data, config, config.finetune.stride)
    if checkpoint is not None:
        report.checkpoint_sha256 = ckpt.file_digest(checkpoint)
    out = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        out = _save_classifier(run_dir / f"probe-{freeze}.bfpc", model, config, {"freeze": freeze, "top1": report.top1})
        report.write(run_dir / f"eval-report-{freeze}.json")
    return ProbeResult(freeze, report.top1, names, before, after, report, out)


def write_probe_csv(path, rows: Dict[str, Dict[str, float]]) -> Path:
    """One row per model, columns laid out like the layer-wise table."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model",) + PROBE_COLUMNS)
        for name, accs in rows.items():
            w.writerow((name,) + tuple("" if c not in accs else f"{100 * accs[c]:.1f}" for c in PROBE_COLUMNS))
    return path
