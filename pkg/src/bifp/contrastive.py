"""Candidate-set construction and the InfoNCE objectives.

For every positive past/future pair ``(P, F)`` of video ``i`` the candidate
set holds, in this order:

1. the positive ``pf(i, P, F)`` itself,
2. spatial negatives (grid mode with spatial negatives only): the other
   cells of the positive pair,
3. easy negatives: every ``pf`` and every ``fp`` combination of every other
   video in the batch, ``2 m^2 (n - 1)`` of them,
4. temporal hard negatives: all ``m^2`` swapped ``fp`` pairs of video ``i``.

Logits are cosine similarities divided by the temperature. In grid mode
every cell of a negative pair is a candidate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import FeatureBundle
from .errors import (
    BatchTooSmall,
    MissingPositive,
    ModeMismatch,
    VariantRequiresBlocks,
    ZeroVector,
)

KINDS = ("bidirectional", "future_only", "past_only", "disjoint", "past_as_negatives")
TAGS = ("positive", "easy", "temporal_hard", "spatial")
POSITIVE, EASY, TEMPORAL_HARD, SPATIAL = range(4)


@dataclass(frozen=True)
class LossVariant:
    kind: str = "bidirectional"
    temperature: float = 0.07
    use_spatial_negatives: bool = False
    temporal_negatives: bool = True
    reduction: str = "mean"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


def cosine_sim(u, v, temperature: float = 1.0) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return float(u @ v / (nu * nv) / temperature)


def similarity_matrix(a: torch.Tensor, b: torch.Tensor, temperature: float) -> torch.Tensor:
    """Pairwise cosine similarity over the last axis, scaled by ``1/temperature``."""
    return F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).T / temperature


# -- pair sets -----------------------------------------------------------------

Key = Tuple[str, int, int, int, int]  # (kind, video, past idx, future idx, cell)


@dataclass
class PairSet:
    """Positives and their candidate sets over a flat feature table.

    ``cand_index[r, c]`` indexes ``table`` (the keys of the candidate rows),
    ``cand_tag[r, c]`` is the role of that candidate, and the anchor of row
    ``r`` is anchor-table row ``anchor_index[r]``. Column 0 is the positive.
    ``sim`` is filled by :func:`score_pairs`.
    """

    positives: List[Key]
    anchors: List[Tuple[int, int]]  # (video, cell)
    table: List[Key]
    anchor_index: np.ndarray
    cand_index: np.ndarray
    cand_tag: np.ndarray
    sim: Optional[torch.Tensor] = None

    @property
    def n_candidates(self) -> int:
        return self.cand_index.shape[1]

    def count(self, tag: int) -> np.ndarray:
        """Per-positive number of candidates carrying ``tag``."""
        return (self.cand_tag == tag).sum(axis=1)

    def candidates(self, r: int) -> List[Tuple[Key, str]]:
        return [(self.table[j], TAGS[t]) for j, t in zip(self.cand_index[r], self.cand_tag[r])]


def _pf_key(kind, v, k, mf, cell):
    return (kind, v, k // mf, k % mf, cell)


def build_pairs(
    n: int,
    m_past: int,
    m_future: Optional[int] = None,
    grid: int = 1,
    spatial_negatives: bool = False,
    temporal_negatives: bool = True,
    require_easy: bool = False,
) -> PairSet:
    """Index every positive of the bidirectional objective with its candidates.

    The feature table is ``pf`` rows then ``fp`` rows, each ordered by
    ``(video, past idx, future idx, cell)``; anchors are ``(video, cell)``.
    Without spatial negatives a grid is treated as ``grid**2`` independent
    cell problems sharing nothing (each cell only sees its own location).
    """
    m_future = m_past if m_future is None else m_future
    if n < 1 or m_past < 1 or m_future < 1:
        raise VariantRequiresBlocks("need n >= 1 and at least one past and one future block")
    if n == 1 and require_easy:
        raise BatchTooSmall("a batch of one video has no easy negatives")
    M = m_past * m_future
    G = grid * grid

    def row(kind, v, k, s):
        return (kind * n * M + v * M + k) * G + s

    table = [
        _pf_key(kind, v, k, m_future, s)
        for kind in ("pf", "fp")
        for v in range(n)
        for k in range(M)
        for s in range(G)
    ]
    anchors = [(v, s) for v in range(n) for s in range(G)]

    positives, a_idx, c_idx, c_tag = [], [], [], []
    videos = np.arange(n)
    ks = np.arange(M)
    cells = np.arange(G)
    for v in range(n):
        others = videos[videos != v]
        for k in range(M):
            for s in range(G):
                positives.append(_pf_key("pf", v, k, m_future, s))
                a_idx.append(v * G + s)
                idx = [np.array([row(0, v, k, s)])]
                tag = [np.array([POSITIVE])]
                if spatial_negatives and G > 1:
                    sp = row(0, v, k, cells[cells != s])
                    idx.append(sp)
                    tag.append(np.full(len(sp), SPATIAL))
                loc = cells if spatial_negatives else np.array([s])
                for kind in (0, 1):
                    e = row(kind, others[:, None, None], ks[None, :, None], loc[None, None, :]).ravel()
                    idx.append(e)
                    tag.append(np.full(len(e), EASY))
                if temporal_negatives:
                    t = row(1, v, ks[:, None], loc[None, :]).ravel()
                    idx.append(t)
                    tag.append(np.full(len(t), TEMPORAL_HARD))
                c_idx.append(np.concatenate(idx))
                c_tag.append(np.concatenate(tag))
    return PairSet(
        positives=positives,
        anchors=anchors,
        table=table,
        anchor_index=np.asarray(a_idx, dtype=np.int64),
        cand_index=np.stack(c_idx).astype(np.int64),
        cand_tag=np.stack(c_tag).astype(np.int8),
    )


def build_unidirectional_pairs(
    n: int,
    m_target: int,
    m_negative: int = 0,
    grid: int = 1,
    spatial_negatives: bool = False,
) -> PairSet:
    """Pairs for the single-direction baselines.

    The table holds the target-side single-block features (``"tgt"`` keys)
    followed by same-video opposite-side features (``"neg"`` keys). Each
    target block is a positive; candidates are itself, all target blocks of
    other videos and, when ``m_negative > 0``, the ``m_negative``
    opposite-side blocks of its own video (tagged temporal_hard).
    """
    if n < 1 or m_target < 1:
        raise VariantRequiresBlocks("need at least one target block per video")
    G = grid * grid
    base = n * m_target * G

    def tgt(v, k, s):
        return (v * m_target + k) * G + s

    def neg(v, k, s):
        return base + (v * m_negative + k) * G + s

    table = [("tgt", v, k, -1, s) for v in range(n) for k in range(m_target) for s in range(G)]
    table += [("neg", v, k, -1, s) for v in range(n) for k in range(m_negative) for s in range(G)]
    videos, cells = np.arange(n), np.arange(G)
    positives, a_idx, c_idx, c_tag = [], [], [], []
    for v in range(n):
        others = videos[videos != v]
        for k in range(m_target):
            for s in range(G):
                positives.append(("tgt", v, k, -1, s))
                a_idx.append(v * G + s)
                idx = [np.array([tgt(v, k, s)])]
                tag = [np.array([POSITIVE])]
                if spatial_negatives and G > 1:
                    sp = tgt(v, k, cells[cells != s])
                    idx.append(sp)
                    tag.append(np.full(len(sp), SPATIAL))
                loc = cells if spatial_negatives else np.array([s])
                e = tgt(others[:, None, None], np.arange(m_target)[None, :, None], loc[None, None, :]).ravel()
                idx.append(e)
                tag.append(np.full(len(e), EASY))
                if m_negative:
                    t = neg(v, np.arange(m_negative)[:, None], loc[None, :]).ravel()
                    idx.append(t)
                    tag.append(np.full(len(t), TEMPORAL_HARD))
                c_idx.append(np.concatenate(idx))
                c_tag.append(np.concatenate(tag))
    return PairSet(
        positives=positives,
        anchors=[(v, s) for v in range(n) for s in range(G)],
        table=table,
        anchor_index=np.asarray(a_idx, dtype=np.int64),
        cand_index=np.stack(c_idx).astype(np.int64),
        cand_tag=np.stack(c_tag).astype(np.int8),
    )


def score_pairs(pairs: PairSet, anchors: torch.Tensor, table: torch.Tensor, temperature: float) -> PairSet:
    """Fill ``pairs.sim`` from anchor features ``(A, d)`` and table features ``(R, d)``."""
    full = similarity_matrix(anchors, table, temperature)
    ai = torch.as_tensor(pairs.anchor_index, device=full.device)
    ci = torch.as_tensor(pairs.cand_index, device=full.device)
    pairs.sim = full[ai[:, None], ci]
    return pairs


# -- loss ------------------------------------------------------------------

def info_nce(pairs, reduction: str = "mean") -> torch.Tensor:
    """InfoNCE over candidate rows whose first column is the positive.

    Accepts a :class:`PairSet` with ``sim`` filled, or a raw logits matrix
    ``(positives, candidates)``.
    """
    if isinstance(pairs, PairSet):
        if pairs.sim is None:
            raise MissingPositive("pair set has no similarities; call score_pairs first")
        if pairs.cand_tag.size and not np.all(pairs.cand_tag[:, 0] == POSITIVE):
            raise MissingPositive("first candidate of every row must be the positive")
        logits = pairs.sim
    else:
        logits = torch.as_tensor(pairs, dtype=torch.float64) if not torch.is_tensor(pairs) else pairs
    if logits.dim() != 2 or logits.shape[1] < 1:
        raise MissingPositive("every candidate set needs at least its positive")
    mx = logits.max(dim=1, keepdim=True).values
    lse = mx.squeeze(1) + torch.log(torch.exp(logits - mx).sum(dim=1))
    per_row = lse - logits[:, 0]
    if reduction == "none":
        return per_row
    return per_row.sum() if reduction == "sum" else per_row.mean()


def _cells(x: torch.Tensor) -> torch.Tensor:
    """Flatten ``(..., [g, g,] d)`` to ``(rows, d)`` with the cell index fastest."""
    return x.reshape(-1, x.shape[-1])


def bidirectional_pairs(bundle: FeatureBundle, variant: LossVariant) -> PairSet:
    if variant.use_spatial_negatives and bundle.f_v.dim() == 2:
        raise ModeMismatch("spatial negatives need grid features, got pooled")
    if bundle.f_pf is None or bundle.f_fp is None:
        raise VariantRequiresBlocks("bidirectional loss needs past and future blocks")
    spatial = variant.use_spatial_negatives
    n, mp, mf = bundle.f_pf.shape[:3]
    pairs = build_pairs(
        n, mp, mf, grid=bundle.grid, spatial_negatives=spatial,
        temporal_negatives=variant.temporal_negatives,
    )
    table = torch.cat([_cells(bundle.f_pf), _cells(bundle.f_fp)])
    return score_pairs(pairs, _cells(bundle.f_v), table, variant.temperature)


def _unidirectional(bundle: FeatureBundle, variant: LossVariant, target: str, negatives: Optional[str]) -> PairSet:
    tgt = getattr(bundle, f"f_{target}")
    if tgt is None:
        raise VariantRequiresBlocks(f"{variant.kind} needs {target} blocks")
    n, m = tgt.shape[:2]
    feats = [_cells(tgt)]
    m_neg = 0
    if negatives is not None:
        neg = getattr(bundle, f"f_{negatives}")
        if neg is None:
            raise VariantRequiresBlocks(f"{variant.kind} needs {negatives} blocks")
        m_neg = neg.shape[1]
        feats.append(_cells(neg))
    pairs = build_unidirectional_pairs(
        n, m, m_neg, grid=bundle.grid, spatial_negatives=variant.use_spatial_negatives
    )
    return score_pairs(pairs, _cells(bundle.f_v), torch.cat(feats), variant.temperature)


def variant_pairs(bundle: FeatureBundle, variant: LossVariant) -> List[PairSet]:
    """Scored pair sets whose InfoNCE terms add up to the variant's loss."""
    kind = variant.kind
    if variant.use_spatial_negatives and bundle.f_v.dim() == 2:
        raise ModeMismatch("spatial negatives need grid features, got pooled")
    if kind == "bidirectional":
        return [bidirectional_pairs(bundle, variant)]
    if kind == "future_only":
        return [_unidirectional(bundle, variant, "future", None)]
    if kind == "past_only":
        return [_unidirectional(bundle, variant, "past", None)]
    if kind == "disjoint":
        return [_unidirectional(bundle, variant, "future", None), _unidirectional(bundle, variant, "past", None)]
    if kind == "past_as_negatives":
        return [_unidirectional(bundle, variant, "future", "past")]
    raise ValueError(kind)


def contrastive_loss(bundle: FeatureBundle, variant: LossVariant) -> Tuple[torch.Tensor, List[PairSet]]:
    sets = variant_pairs(bundle, variant)
    loss = sum(info_nce(p, variant.reduction) for p in sets)
    return loss, sets


def baseline_loss(bundle: FeatureBundle, variant: LossVariant) -> torch.Tensor:
    if variant.kind == "bidirectional":
        raise ValueError("baseline_loss handles the single-direction variants only")
    return contrastive_loss(bundle, variant)[0]


def spatial_candidates(bundle: FeatureBundle, variant: LossVariant) -> PairSet:
    """Bidirectional pairs with every grid cell as its own anchor."""
    if bundle.f_v.dim() == 2:
        raise ModeMismatch("spatial candidates need grid features, got pooled")
    v = LossVariant(variant.kind, variant.temperature, True, variant.temporal_negatives, variant.reduction)
    return bidirectional_pairs(bundle, v)


# -- debug dump ------------------------------------------------------------

def _fmt_key(key: Key) -> str:
    kind, v, a, b, s = key
    out = f"{kind}:v{v}:{a}" + (f":{b}" if b >= 0 else "")
    return out + (f":c{s}" if s else "")


def format_pair_table(pairs: PairSet, digits: int = 6) -> str:
    """Tab-separated ``positive slot candidate tag sim`` rows."""
    lines = ["positive\tslot\tcandidate\ttag\tsim"]
    sim = None if pairs.sim is None else pairs.sim.detach().cpu().double().numpy()
    for r, pos in enumerate(pairs.positives):
        for c, (j, t) in enumerate(zip(pairs.cand_index[r], pairs.cand_tag[r])):
            value = "nan" if sim is None else f"{sim[r, c]:.{digits}f}"
            lines.append(f"{_fmt_key(pos)}\t{c}\t{_fmt_key(pairs.table[j])}\t{TAGS[t]}\t{value}")
    return "\n".join(lines) + "\n"
