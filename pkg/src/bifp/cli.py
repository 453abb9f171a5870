"""Command-line entry points.

Every verb shares ``--config``, ``--set key=value``, ``--run-dir``, ``--seed``
and ``--deterministic``. Without ``--run-dir`` the output goes to
``$BIFP_RUN_ROOT/<verb>-<config hash>`` (``./runs`` when the variable is unset).
Failures print a single ``ErrorClass: message`` line to stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from . import checkpoint as ckpt
from .config import RunConfig, parse_overrides, parse_text
from .contrastive import build_pairs, format_pair_table, score_pairs
from .dataio import ClipDataset
from .encoders import BackboneConfig
from .errors import BifpError, CheckpointError, ConfigError, DatasetError
from .evaluation import Classifier, evaluate, finetune, layerwise_probe, write_probe_csv
from .synthetic import MOTIFS, SyntheticSpec, generate
from .training import pretrain

log = logging.getLogger("bifp")

RUN_ROOT_ENV = "BIFP_RUN_ROOT"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable, applied after --config)")
    p.add_argument("--run-dir", help="output directory")
    p.add_argument("--seed", type=int, help="shortcut for --set train.seed=N")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="shortcut for train.deterministic")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bifp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("finetune", help="supervised finetuning (no --checkpoint: random init)")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--eval-data", help="held-out dataset; default is a hash split of --data")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("probe", help="layer-wise frozen probe")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--freeze", help="conv_1, res_1 ... or agg (default: probe.freeze)")
    p.add_argument("--eval-data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--model-name", default=None, help="row label in probe.csv")

    p = sub.add_parser("infer", help="evaluate a classifier checkpoint on whole videos")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-clips", type=int, default=32)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--motif", default="drift", help=f"one of {MOTIFS}, comma-separated for a mix")
    p.add_argument("--class-rule", default="direction")
    p.add_argument("--velocity", type=float, default=2.0)
    p.add_argument("--growth", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--background", default="flat")

    p = sub.add_parser("inspect-pairs", help="print the candidate table for a toy batch")
    _common(p)
    p.add_argument("--videos", type=int, default=2)
    p.add_argument("--blocks", type=int, default=None, help="past/future blocks per video (default: partition)")
    return parser


def resolve_config(args, base_text: Optional[str] = None) -> RunConfig:
    values = parse_text(base_text) if base_text else {}
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        values.update(parse_text(p.read_text()))
    values.update(parse_overrides(args.overrides))
    if args.seed is not None:
        values["train.seed"] = str(args.seed)
    if args.deterministic is not None:
        values["train.deterministic"] = "true" if args.deterministic else "false"
    return RunConfig.from_flat(values)


def run_dir_for(args, config: RunConfig) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        path = root / f"{args.verb}-{config.digest()[:12]}"
    path.mkdir(parents=True, exist_ok=True)
    config.save(path / "config.resolved")
    return path


def _dataset(path) -> ClipDataset:
    if not Path(path).is_dir():
        raise DatasetError(f"dataset directory {path} not found")
    return ClipDataset(path)


def _checkpoint_config(path) -> str:
    _, meta = ckpt.load(path)
    return meta.get("config", "")


# -- verbs -------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    config = resolve_config(args)
    out = run_dir_for(args, config)
    res = pretrain(config, _dataset(args.data), out, resume=args.resume, epochs=args.epochs)
    print(res.checkpoint)
    return 0


def cmd_finetune(args) -> int:
    config = resolve_config(args)
    out = run_dir_for(args, config)
    eval_data = _dataset(args.eval_data) if args.eval_data else None
    res = finetune(args.checkpoint, _dataset(args.data), config, out, eval_data=eval_data, epochs=args.epochs)
    print(f"top1 {res.accuracy:.4f}")
    return 0


def cmd_probe(args) -> int:
    config = resolve_config(args)
    freeze = args.freeze or config.probe.freeze
    out = run_dir_for(args, config)
    eval_data = _dataset(args.eval_data) if args.eval_data else None
    res = layerwise_probe(args.checkpoint, _dataset(args.data), freeze, config, out,
                          eval_data=eval_data, epochs=args.epochs)
    name = args.model_name or ("pretrained" if args.checkpoint else "random")
    write_probe_csv(out / "probe.csv", {name: {freeze: res.accuracy}})
    print(f"{freeze} top1 {res.accuracy:.4f}")
    return 0


def cmd_infer(args) -> int:
    config = resolve_config(args, _checkpoint_config(args.checkpoint))
    arrays, meta = ckpt.load(args.checkpoint)
    if meta.get("kind") != "classifier":
        raise CheckpointError(f"{args.checkpoint} is not a classifier checkpoint")
    model = Classifier(BackboneConfig(**meta["backbone"]), int(meta["num_classes"]))
    model.load_state_dict(ckpt.extract_state(arrays, "model."))
    out = run_dir_for(args, config)
    report = evaluate(model, _dataset(args.data), config, config.finetune.stride)
    report.checkpoint_sha256 = ckpt.file_digest(args.checkpoint)
    report.write(out / "eval-report.json")
    print(f"top1 {report.top1:.4f}")
    return 0


def cmd_gen(args) -> int:
    config = resolve_config(args)
    motif = tuple(args.motif.split(",")) if "," in args.motif else args.motif
    spec = SyntheticSpec(
        n_clips=args.n_clips, frames=args.frames, size=args.size, motif=motif,
        class_rule=args.class_rule, velocity=args.velocity, growth=args.growth,
        noise_sigma=args.noise, background=args.background,
        frames_per_block=config.partition.frames_per_block,
    )
    print(generate(spec, args.out, seed=config.train.seed))
    return 0


def cmd_inspect_pairs(args) -> int:
    config = resolve_config(args)
    m = args.blocks or min(config.partition.n_past, config.partition.n_future)
    grid = config.backbone.grid if config.loss.use_spatial_negatives else 1
    pairs = build_pairs(args.videos, m, m, grid=grid, spatial_negatives=config.loss.use_spatial_negatives,
                        temporal_negatives=config.loss.temporal_negatives)
    rng = np.random.default_rng(config.train.seed)
    d = 8
    anchors = torch.from_numpy(rng.standard_normal((args.videos * grid * grid, d)))
    table = torch.from_numpy(rng.standard_normal((len(pairs.table), d)))
    sys.stdout.write(format_pair_table(score_pairs(pairs, anchors, table, config.loss.temperature)))
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "infer": cmd_infer,
    "gen": cmd_gen,
    "inspect-pairs": cmd_inspect_pairs,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except BifpError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
