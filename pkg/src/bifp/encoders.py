"""Block backbones, recurrent aggregators and the projection head.

Feature layout is channels-last throughout: a pooled block feature is
``(..., d)`` and a grid feature is ``(..., g, g, d)``. The aggregators are
kernel-size-1 ConvGRUs, which act independently on every grid cell, so they
are implemented with linear maps over the channel axis and work for both
layouts.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptySequence, ShapeMismatch

FAMILIES = ("resnet18_2d3d", "tiny3d")
SPATIAL_MAPS = ("pooled", "grid4x4")


@dataclass(frozen=True)
class BackboneConfig:
    family: str = "resnet18_2d3d"
    feature_dim: int = 256
    spatial_map: str = "pooled"
    in_channels: int = 3
    width: int = 16  # base channel count of tiny3d
    share_backbone: bool = True
    share_aggregator: bool = False
    proj_hidden: int = 256
    proj_dim: int = 256

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown backbone family {self.family!r}")
        if self.spatial_map not in SPATIAL_MAPS:
            raise ValueError(f"unknown spatial_map {self.spatial_map!r}")

    @property
    def grid(self) -> int:
        return 4 if self.spatial_map == "grid4x4" else 1


def stage_names(family: str) -> List[str]:
    if family == "tiny3d":
        return ["conv_1", "res_1", "res_2"]
    return ["conv_1", "res_1", "res_2", "res_3", "res_4"]


# -- backbones ---------------------------------------------------------------

def _conv_bn(cin, cout, kernel, stride, padding):
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel, stride=stride, padding=padding, bias=False),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock3d(nn.Module):
    """ResNet basic block; ``temporal=False`` keeps it per-frame (1x3x3 kernels)."""

    def __init__(self, cin, cout, stride=1, temporal=False):
        super().__init__()
        k = (3, 3, 3) if temporal else (1, 3, 3)
        p = (1, 1, 1) if temporal else (0, 1, 1)
        s = (1, stride, stride)
        self.conv1 = nn.Conv3d(cin, cout, k, stride=s, padding=p, bias=False)
        self.bn1 = nn.BatchNorm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, k, padding=p, bias=False)
        self.bn2 = nn.BatchNorm3d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(
                nn.Conv3d(cin, cout, 1, stride=s, bias=False), nn.BatchNorm3d(cout)
            )

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


def _resnet18_2d3d(cfg: BackboneConfig) -> "OrderedDict[str, nn.Module]":
    d = cfg.feature_dim
    return OrderedDict(
        conv_1=nn.Sequential(
            nn.Conv3d(cfg.in_channels, 64, (1, 7, 7), stride=(1, 2, 2), padding=(0, 3, 3), bias=False),
            nn.BatchNorm3d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool3d((1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)),
        ),
        res_1=nn.Sequential(BasicBlock3d(64, 64), BasicBlock3d(64, 64)),
        res_2=nn.Sequential(BasicBlock3d(64, 128, 2), BasicBlock3d(128, 128)),
        res_3=nn.Sequential(BasicBlock3d(128, 256, 2, True), BasicBlock3d(256, 256, temporal=True)),
        res_4=nn.Sequential(BasicBlock3d(256, d, 2, True), BasicBlock3d(d, d, temporal=True)),
    )


def _tiny3d(cfg: BackboneConfig) -> "OrderedDict[str, nn.Module]":
    w = cfg.width
    return OrderedDict(
        conv_1=_conv_bn(cfg.in_channels, w, (1, 3, 3), (1, 2, 2), (0, 1, 1)),
        res_1=_conv_bn(w, 2 * w, (1, 3, 3), (1, 2, 2), (0, 1, 1)),
        res_2=nn.Sequential(
            _conv_bn(2 * w, 3 * w, (3, 3, 3), (1, 2, 2), (1, 1, 1)),
            nn.Conv3d(3 * w, cfg.feature_dim, 1),
        ),
    )


class Backbone(nn.Module):
    """Per-block feature extractor.

    Input ``(B, C, T, H, W)``; output ``(B, d)`` or ``(B, 4, 4, d)``.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        build = _tiny3d if cfg.family == "tiny3d" else _resnet18_2d3d
        self.stages = nn.ModuleDict(build(cfg))
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm3d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.stages.values():
            x = stage(x)
        x = x.mean(dim=2)  # temporal pooling
        if self.cfg.grid == 1:
            return x.mean(dim=(2, 3))
        x = F.adaptive_avg_pool2d(x, self.cfg.grid)
        return x.permute(0, 2, 3, 1).contiguous()


# -- aggregation -------------------------------------------------------------

class ConvGRU(nn.Module):
    """One-layer ConvGRU with 1x1 kernels, channels-last."""

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.gates = nn.Linear(input_dim + hidden_dim, 2 * hidden_dim)
        self.candidate = nn.Linear(input_dim + hidden_dim, hidden_dim)
        for lin in (self.gates, self.candidate):
            nn.init.orthogonal_(lin.weight)
            nn.init.zeros_(lin.bias)

    def cell(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        r, z = torch.sigmoid(self.gates(torch.cat([x, h], dim=-1))).chunk(2, dim=-1)
        n = torch.tanh(self.candidate(torch.cat([x, r * h], dim=-1)))
        return (1 - z) * n + z * h

    def forward(self, seq: torch.Tensor, h: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``seq`` is ``(B, N, ..., d)``; returns the final hidden state ``(B, ..., hidden)``."""
        if seq.shape[1] == 0:
            raise EmptySequence("cannot aggregate an empty block sequence")
        if h is None:
            h = seq.new_zeros(seq.shape[:1] + seq.shape[2:-1] + (self.hidden_dim,))
        for t in range(seq.shape[1]):
            h = self.cell(seq[:, t], h)
        return h


class ProjectionHead(nn.Module):
    """Linear -> ReLU -> Linear over the channel axis."""

    def __init__(self, in_dim: int, hidden: int = 256, out_dim: int = 256):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(z)))


# -- full model ----------------------------------------------------------------

@dataclass
class FeatureBundle:
    """Features of a batch.

    Shapes (``S`` is empty when pooled, ``(g, g)`` for grids):
    ``z_v (n, *S, d)``, ``z_pf``/``z_fp (n, m_p, m_f, *S, d)`` with
    ``z_fp[i, p, f]`` the aggregate of (future f, past p), and the
    single-block ``z_past (n, m_p, *S, d)``, ``z_future (n, m_f, *S, d)``.
    ``f_*`` are projections of the matching ``z_*``.
    """

    z_v: torch.Tensor
    z_pf: Optional[torch.Tensor] = None
    z_fp: Optional[torch.Tensor] = None
    z_past: Optional[torch.Tensor] = None
    z_future: Optional[torch.Tensor] = None
    f_v: Optional[torch.Tensor] = None
    f_pf: Optional[torch.Tensor] = None
    f_fp: Optional[torch.Tensor] = None
    f_past: Optional[torch.Tensor] = None
    f_future: Optional[torch.Tensor] = None
    grid: int = 1

    @property
    def n(self) -> int:
        return self.z_v.shape[0]

    def projected(self) -> Dict[str, torch.Tensor]:
        names = ("f_v", "f_pf", "f_fp", "f_past", "f_future")
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}


class BidirectionalEncoder(nn.Module):
    """Backbone, present aggregator, past/future aggregator and projection head.

    ``share_backbone`` / ``share_aggregator`` select which weights the
    past/future path reuses from the present path.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.feature_dim
        self.backbone = Backbone(cfg)
        self.present_agg = ConvGRU(d, d)
        self.pf_backbone = None if cfg.share_backbone else Backbone(cfg)
        self.pf_agg = None if cfg.share_aggregator else ConvGRU(d, d)
        self.head = ProjectionHead(d, cfg.proj_hidden, cfg.proj_dim)

    # modules used on the past/future path
    @property
    def pf_backbone_module(self) -> Backbone:
        return self.backbone if self.pf_backbone is None else self.pf_backbone

    @property
    def pf_agg_module(self) -> ConvGRU:
        return self.present_agg if self.pf_agg is None else self.pf_agg

    def encode_blocks(self, blocks: torch.Tensor, pf: bool = False) -> torch.Tensor:
        """``(B, N, C, T, H, W)`` -> ``(B, N, *S, d)``."""
        if blocks.dim() != 6:
            raise ShapeMismatch(f"expected (B, N, C, T, H, W) blocks, got {tuple(blocks.shape)}")
        b, n = blocks.shape[:2]
        net = self.pf_backbone_module if pf else self.backbone
        out = net(blocks.reshape((b * n,) + blocks.shape[2:]))
        return out.reshape((b, n) + out.shape[1:])

    def aggregate_present(self, feats: torch.Tensor) -> torch.Tensor:
        return self.present_agg(feats)

    def aggregate_pf(self, past: torch.Tensor, future: torch.Tensor, swap: bool = False) -> torch.Tensor:
        if past.shape != future.shape:
            raise ShapeMismatch(f"past {tuple(past.shape)} vs future {tuple(future.shape)}")
        seq = (future, past) if swap else (past, future)
        return self.pf_agg_module(torch.stack(seq, dim=1))

    def aggregate_single(self, feats: torch.Tensor) -> torch.Tensor:
        """Past/future aggregator over a one-block sequence (unidirectional baselines)."""
        return self.pf_agg_module(feats.unsqueeze(1))

    def project(self, z: torch.Tensor) -> torch.Tensor:
        return self.head(z)

    def present_features(self, present: torch.Tensor) -> torch.Tensor:
        """Transferable representation: pooled ``z_v`` of shape ``(B, d)``."""
        z = self.aggregate_present(self.encode_blocks(present))
        return pool(z)

    def forward(
        self,
        past: Optional[torch.Tensor],
        present: torch.Tensor,
        future: Optional[torch.Tensor],
        pairs: bool = True,
        singles: bool = False,
    ) -> FeatureBundle:
        z_v = self.aggregate_present(self.encode_blocks(present))
        bundle = FeatureBundle(z_v=z_v, f_v=self.project(z_v), grid=self.cfg.grid)
        fp = fpast = None
        if past is not None and past.shape[1]:
            fpast = self.encode_blocks(past, pf=True)
        if future is not None and future.shape[1]:
            fp = self.encode_blocks(future, pf=True)
        if pairs and fpast is not None and fp is not None:
            n, mp, mf = fpast.shape[0], fpast.shape[1], fp.shape[1]
            rest = fpast.shape[2:]
            p = fpast.unsqueeze(2).expand((n, mp, mf) + rest).reshape((-1,) + rest)
            f = fp.unsqueeze(1).expand((n, mp, mf) + rest).reshape((-1,) + rest)
            z_pf = self.aggregate_pf(p, f).reshape((n, mp, mf) + rest)
            z_fp = self.aggregate_pf(p, f, swap=True).reshape((n, mp, mf) + rest)
            bundle.z_pf, bundle.z_fp = z_pf, z_fp
            bundle.f_pf, bundle.f_fp = self.project(z_pf), self.project(z_fp)
        if singles:
            for name, feats in (("past", fpast), ("future", fp)):
                if feats is None:
                    continue
                n, k = feats.shape[:2]
                z = self.aggregate_single(feats.reshape((n * k,) + feats.shape[2:]))
                z = z.reshape((n, k) + z.shape[1:])
                setattr(bundle, f"z_{name}", z)
                setattr(bundle, f"f_{name}", self.project(z))
        return bundle

    def transfer_state(self) -> Dict[str, torch.Tensor]:
        """Weights carried to downstream tasks: backbone and present aggregator only."""
        sd = self.state_dict()
        return OrderedDict(
            (k, v) for k, v in sd.items() if k.startswith(("backbone.", "present_agg."))
        )


def pool(z: torch.Tensor) -> torch.Tensor:
    """Spatially average a grid feature ``(B, g, g, d)``; pooled input passes through."""
    return z.mean(dim=(1, 2)) if z.dim() == 4 else z


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
