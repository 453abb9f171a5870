"""Self-supervised pretraining loop."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt
from .augmentation import augment_partition
from .config import RunConfig
from .contrastive import contrastive_loss, format_pair_table
from .dataio import ClipDataset
from .encoders import BidirectionalEncoder, BackboneConfig
from .errors import DatasetEmpty, NonFiniteLoss
from .partitioning import BlockPartition, partition_clip

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "split", "loss", "lr", "wall_s")
METRICS_NAME = "metrics.csv"
VAL_METRICS_NAME = "metrics_val.csv"
CHECKPOINT_NAME = "checkpoint.bfpc"


def to_tensor(groups: Sequence[Sequence[np.ndarray]]) -> torch.Tensor:
    """Batch of block lists (each block ``T x H x W x C``) -> ``(B, N, C, T, H, W)``."""
    arr = np.stack([np.stack(list(g)) for g in groups]).astype(np.float32, copy=False)
    return torch.from_numpy(arr).permute(0, 1, 5, 2, 3, 4).contiguous()


def sample_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def split_by_hash(clip_ids: Sequence[str], val_fraction: float) -> Tuple[List[int], List[int]]:
    """Stable train/validation split from a hash of each clip id."""
    train, val = [], []
    for i, cid in enumerate(clip_ids):
        h = int(hashlib.sha1(cid.encode()).hexdigest()[:8], 16) / 0xFFFFFFFF
        (val if h < val_fraction else train).append(i)
    return train, val


class Plateau:
    """Multiply the lr by ``factor`` once ``patience`` evaluations pass without
    a relative improvement larger than ``threshold``."""

    def __init__(self, patience: int = 10, threshold: float = 1e-3, factor: float = 0.1):
        self.patience = patience
        self.threshold = threshold
        self.factor = factor
        self.best = float("inf")
        self.bad = 0

    def step(self, value: float) -> bool:
        if not np.isfinite(self.best) or value < self.best - self.threshold * abs(self.best):
            self.best = value
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            return True
        return False

    def state_dict(self) -> dict:
        return {"best": self.best, "bad": self.bad}

    def load_state_dict(self, state: dict) -> None:
        self.best = float(state["best"])
        self.bad = int(state["bad"])


def set_determinism(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled, warn_only=True)


def build_model(cfg: BackboneConfig, seed: int) -> BidirectionalEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return BidirectionalEncoder(cfg)


@dataclass
class PretrainResult:
    checkpoint: Path
    metrics: Path
    history: List[dict] = field(default_factory=list)


class Pretrainer:
    """Owns the model, optimizer and sampling cursor of one pretraining run.

    All sampling randomness is derived from ``(seed, epoch, step)``, so a
    run restored from a checkpoint continues exactly where it stopped.
    """

    def __init__(self, config: RunConfig, dataset: ClipDataset, run_dir=None):
        self.config = config
        self.dataset = dataset
        self.run_dir = Path(run_dir) if run_dir is not None else None
        tc = config.train
        set_determinism(tc.deterministic)
        self.model = build_model(config.backbone, tc.seed)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
        self.plateau = Plateau(tc.plateau_patience, tc.plateau_threshold)
        ids = [r.clip_id for r in dataset.records]
        self.train_idx, self.val_idx = split_by_hash(ids, tc.val_fraction)
        if not self.train_idx:
            raise DatasetEmpty("no clips left for training after the validation split")
        self.epoch = 0
        self.step = 0  # next step within self.epoch
        self.history: List[dict] = []

    # -- data ------------------------------------------------------------

    def epoch_batches(self, epoch: int) -> List[np.ndarray]:
        order = sample_rng(self.config.train.seed, 0, epoch).permutation(self.train_idx)
        bs = self.config.train.batch_size
        return [order[i:i + bs] for i in range(0, len(order), bs)]

    def make_partition(self, i: int, rng: np.random.Generator) -> BlockPartition:
        part = partition_clip(self.dataset.frames(i), self.config.partition, rng)
        return augment_partition(part, self.config.augment, rng, self.config.loss.use_spatial_negatives)

    def make_batch(self, indices: Iterable[int], rng: np.random.Generator):
        parts = [self.make_partition(int(i), rng) for i in indices]
        cat = lambda name: to_tensor([getattr(p, name) for p in parts]) if getattr(parts[0], name) else None
        return cat("past_blocks"), cat("present_blocks"), cat("future_blocks")

    def batch_loss(self, batch):
        past, present, future = batch
        singles = self.config.loss.kind != "bidirectional"
        bundle = self.model(past, present, future, pairs=not singles, singles=singles)
        return contrastive_loss(bundle, self.config.loss)

    # -- optimisation ----------------------------------------------------

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def train_step(self) -> float:
        """Run the step under the cursor and advance it."""
        batches = self.epoch_batches(self.epoch)
        idx = batches[self.step]
        rng = sample_rng(self.config.train.seed, 1, self.epoch, self.step)
        self.model.train()
        loss, pairs = self.batch_loss(self.make_batch(idx, rng))
        if not torch.isfinite(loss):
            self._dump_nonfinite(pairs, idx)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        if self.step >= len(batches):
            self.epoch += 1
            self.step = 0
        return loss.item()

    def _dump_nonfinite(self, pairs, idx) -> None:
        where = ""
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            path = self.run_dir / "nonfinite_batch.tsv"
            with open(path, "w") as fh:
                fh.write(f"# epoch {self.epoch} step {self.step} clips {list(map(int, idx))}\n")
                for p in pairs:
                    fh.write(format_pair_table(p))
            where = f"; pair table written to {path}"
        raise NonFiniteLoss(f"non-finite loss at epoch {self.epoch} step {self.step}{where}")

    @torch.no_grad()
    def validation_loss(self) -> Optional[float]:
        if not self.val_idx:
            return None
        self.model.eval()
        total, count = 0.0, 0
        bs = self.config.train.batch_size
        for b in range(0, len(self.val_idx), bs):
            idx = self.val_idx[b:b + bs]
            rng = sample_rng(self.config.train.seed, 2, b)
            loss, _ = self.batch_loss(self.make_batch(idx, rng))
            total += loss.item() * len(idx)
            count += len(idx)
        return total / count

    def run_epoch(self) -> dict:
        start_epoch = self.epoch
        t0 = time.perf_counter()
        losses = []
        while self.epoch == start_epoch:
            losses.append(self.train_step())
        row = {"epoch": start_epoch, "train_loss": float(np.mean(losses)), "lr": self.lr}
        val = self.validation_loss()
        row["val_loss"] = val
        if self.plateau.step(val if val is not None else row["train_loss"]):
            for g in self.optimizer.param_groups:
                g["lr"] *= self.plateau.factor
            log.info("plateau at epoch %d: lr -> %g", start_epoch, self.lr)
        row["wall_s"] = time.perf_counter() - t0
        self.history.append(row)
        return row

    # -- persistence -----------------------------------------------------

    def state(self) -> Tuple[dict, dict]:
        arrays = ckpt.state_arrays("model.", self.model.state_dict())
        opt = self.optimizer.state_dict()
        for pid, st in opt["state"].items():
            for k, v in st.items():
                arrays[f"optim.{pid}.{k}"] = v if torch.is_tensor(v) else torch.tensor(v)
        arrays["rng.torch"] = torch.get_rng_state()
        meta = {
            "kind": "pretrain",
            "config": self.config.dumps(),
            "backbone": dataclasses.asdict(self.config.backbone),
            "epoch": self.epoch,
            "step": self.step,
            "param_groups": [{k: v for k, v in g.items() if k != "params"} for g in opt["param_groups"]],
            "plateau": self.plateau.state_dict(),
            # wall-clock times stay out so checkpoints are reproducible
            "history": [{k: v for k, v in r.items() if k != "wall_s"} for r in self.history],
        }
        return arrays, meta

    def save(self, path) -> Path:
        arrays, meta = self.state()
        return ckpt.save(path, arrays, meta)

    def load(self, path) -> None:
        arrays, meta = ckpt.load(path)
        self.model.load_state_dict(ckpt.extract_state(arrays, "model."))
        opt = self.optimizer.state_dict()
        state = {}
        for key, value in arrays.items():
            if key.startswith("optim."):
                _, pid, name = key.split(".", 2)
                state.setdefault(int(pid), {})[name] = torch.from_numpy(np.array(value))
        groups = opt["param_groups"]
        for g, saved in zip(groups, meta["param_groups"]):
            g.update({k: (tuple(v) if isinstance(v, list) else v) for k, v in saved.items()})
        self.optimizer.load_state_dict({"state": state, "param_groups": groups})
        torch.set_rng_state(torch.from_numpy(np.array(arrays["rng.torch"])))
        self.plateau.load_state_dict(meta["plateau"])
        self.epoch, self.step = int(meta["epoch"]), int(meta["step"])
        self.history = [dict(r, wall_s=0.0) for r in meta.get("history", [])]


def write_metrics(path: Path, history: Sequence[dict], split: str = "train") -> Path:
    """One row per epoch for ``split`` (``train`` or ``val``); epochs without that loss are skipped."""
    key = f"{split}_loss"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in history:
            if row.get(key) is not None:
                w.writerow((row["epoch"], split, f"{row[key]:.6f}", f"{row['lr']:.6g}", f"{row['wall_s']:.3f}"))
    return path


def write_all_metrics(run_dir: Path, history: Sequence[dict]) -> Path:
    if any(r.get("val_loss") is not None for r in history):
        write_metrics(run_dir / VAL_METRICS_NAME, history, "val")
    return write_metrics(run_dir / METRICS_NAME, history)


def pretrain(config: RunConfig, dataset, run_dir, resume=None, epochs: Optional[int] = None) -> PretrainResult:
    """Train for ``config.train.epochs`` epochs (or ``epochs``), checkpointing every epoch."""
    if not isinstance(dataset, ClipDataset):
        dataset = ClipDataset(dataset)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    trainer = Pretrainer(config, dataset, run_dir)
    if resume is not None:
        trainer.load(resume)
    target = config.train.epochs if epochs is None else epochs
    ckpt_path = run_dir / CHECKPOINT_NAME
    while trainer.epoch < target:
        row = trainer.run_epoch()
        log.info("epoch %d train %.4f val %s lr %g", row["epoch"], row["train_loss"], row["val_loss"], row["lr"])
        write_all_metrics(run_dir, trainer.history)
        trainer.save(ckpt_path)
    if not ckpt_path.exists():
        trainer.save(ckpt_path)
    metrics_path = write_all_metrics(run_dir, trainer.history)
    return PretrainResult(ckpt_path, metrics_path, trainer.history)
