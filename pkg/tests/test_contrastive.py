import math
from collections import Counter

import numpy as np
import pytest
import torch

from bifp.contrastive import (
    EASY,
    POSITIVE,
    SPATIAL,
    TEMPORAL_HARD,
    LossVariant,
    baseline_loss,
    build_pairs,
    contrastive_loss,
    cosine_sim,
    format_pair_table,
    info_nce,
    score_pairs,
    spatial_candidates,
    variant_pairs,
)
from bifp.encoders import BackboneConfig, BidirectionalEncoder
from bifp.errors import BatchTooSmall, MissingPositive, ModeMismatch, VariantRequiresBlocks, ZeroVector
from bifp.partitioning import PartitionSpec, partition_clip
from bifp.training import to_tensor

from oracles import enumerate_candidates, finite_difference

TINY = dict(family="tiny3d", feature_dim=8, width=4, proj_hidden=8, proj_dim=6)


def as_counter(pairs, r):
    return Counter(pairs.candidates(r))


# -- cosine ----------------------------------------------------------------

def test_cosine_examples():
    u = np.array([0.3, -1.2, 2.0])
    assert cosine_sim(u, u) == pytest.approx(1.0)
    assert cosine_sim(u, -u, 0.5) == pytest.approx(-2.0)
    assert cosine_sim([1, 0], [1, 1]) == pytest.approx(0.70711, abs=1e-5)
    with pytest.raises(ZeroVector):
        cosine_sim([0, 0], [1, 1])


# -- counting ----------------------------------------------------------------

@pytest.mark.parametrize("m", [1, 2, 3])
@pytest.mark.parametrize("n", [1, 2, 4])
def test_candidates_match_enumeration(m, n):
    pairs = build_pairs(n, m)
    oracle = enumerate_candidates(n, m, m)
    assert len(pairs.positives) == n * m * m
    for r, pos in enumerate(pairs.positives):
        assert as_counter(pairs, r) == oracle[pos]
        assert pairs.cand_tag[r, 0] == POSITIVE


def test_full_scale_counts():
    pairs = build_pairs(64, 2)
    assert len(pairs.positives) == 64 * 4
    assert set(pairs.count(EASY)) == {504}
    assert set(pairs.count(TEMPORAL_HARD)) == {4}


def test_minimal_batch():
    pairs = build_pairs(1, 1)
    assert pairs.n_candidates == 2
    assert pairs.count(EASY)[0] == 0 and pairs.count(TEMPORAL_HARD)[0] == 1
    with pytest.raises(BatchTooSmall):
        build_pairs(1, 1, require_easy=True)


def test_two_by_two_has_thirteen_candidates():
    assert build_pairs(2, 2).n_candidates == 13


def test_no_temporal_negatives_variant():
    pairs = build_pairs(3, 2, temporal_negatives=False)
    assert set(pairs.count(TEMPORAL_HARD)) == {0}
    oracle = enumerate_candidates(3, 2, 2, temporal=False)
    for r, pos in enumerate(pairs.positives):
        assert as_counter(pairs, r) == oracle[pos]


def test_unequal_past_future_counts():
    pairs = build_pairs(2, 3, 1)
    oracle = enumerate_candidates(2, 3, 1)
    for r, pos in enumerate(pairs.positives):
        assert as_counter(pairs, r) == oracle[pos]


def test_spatial_counts():
    pairs = build_pairs(1, 1, grid=4, spatial_negatives=True)
    assert len(pairs.positives) == 16
    assert set(pairs.count(SPATIAL)) == {15}
    assert set(pairs.count(TEMPORAL_HARD)) == {16}
    oracle = enumerate_candidates(2, 2, 2, grid=4, spatial=True)
    big = build_pairs(2, 2, grid=4, spatial_negatives=True)
    for r, pos in enumerate(big.positives):
        assert as_counter(big, r) == oracle[pos]
    # sixteen anchors where the pooled problem has one
    assert len(big.positives) == 16 * len(build_pairs(2, 2).positives)


def test_one_cell_grid_degenerates_to_pooled():
    a, b = build_pairs(2, 2, grid=1, spatial_negatives=True), build_pairs(2, 2)
    assert np.array_equal(a.cand_index, b.cand_index) and set(a.count(SPATIAL)) == {0}


def test_bad_block_counts():
    with pytest.raises(VariantRequiresBlocks):
        build_pairs(2, 0)


# -- InfoNCE ----------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 2, 13, 505])
def test_uniform_logits_give_log_k(k):
    assert info_nce(torch.full((3, k), 0.37, dtype=torch.float64)).item() == pytest.approx(math.log(k), abs=1e-12)


def test_hand_case():
    loss = info_nce(torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)).item()
    assert loss == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)
    assert loss == pytest.approx(0.55144, abs=1e-5)


def test_saturation_and_stability():
    assert info_nce(torch.tensor([[20.0, 0.0, 0.0]], dtype=torch.float64)).item() < 1e-8
    huge = info_nce(torch.tensor([[1e4, 1e4 - 1, 0.0]], dtype=torch.float64)).item()
    assert math.isfinite(huge) and huge == pytest.approx(math.log1p(math.exp(-1)), rel=1e-12)


def test_reductions():
    logits = torch.randn(5, 4, dtype=torch.float64)
    rows = info_nce(logits, "none")
    assert (rows >= 0).all()
    assert info_nce(logits, "sum").item() == pytest.approx(rows.sum().item())
    assert info_nce(logits).item() == pytest.approx(rows.mean().item())


def test_missing_positive():
    pairs = build_pairs(2, 1)
    with pytest.raises(MissingPositive):
        info_nce(pairs)
    with pytest.raises(MissingPositive):
        info_nce(torch.zeros(3, 0))


def test_negative_permutation_invariance():
    rng = np.random.default_rng(0)
    logits = torch.from_numpy(rng.normal(size=(6, 20)) * 5)
    perm = torch.cat([torch.zeros(1, dtype=torch.long), 1 + torch.from_numpy(rng.permutation(19))])
    assert abs(info_nce(logits).item() - info_nce(logits[:, perm]).item()) < 1e-7


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    pairs = build_pairs(2, 2)
    for _ in range(3):
        a = rng.normal(size=(2, 5))
        t = rng.normal(size=(len(pairs.table), 5))

        def loss_of(flat):
            aa = torch.from_numpy(flat[: a.size].reshape(a.shape))
            tt = torch.from_numpy(flat[a.size:].reshape(t.shape))
            return info_nce(score_pairs(pairs, aa, tt, 0.2)).item()

        x = np.concatenate([a.ravel(), t.ravel()])
        xt = torch.from_numpy(x.copy()).requires_grad_(True)
        info_nce(score_pairs(pairs, xt[: a.size].reshape(a.shape), xt[a.size:].reshape(t.shape), 0.2)).backward()
        fd = finite_difference(loss_of, x)
        assert np.linalg.norm(xt.grad.numpy() - fd) / np.linalg.norm(fd) < 1e-4


# -- full model ----------------------------------------------------------------

def model_and_batch(n=3, m=2, present=2, grid=False, seed=0):
    torch.manual_seed(seed)
    cfg = BackboneConfig(**TINY, spatial_map="grid4x4" if grid else "pooled")
    model = BidirectionalEncoder(cfg).double()
    g = torch.Generator().manual_seed(seed)
    mk = lambda k: torch.rand((n, k, 3, 5, 16, 16), generator=g, dtype=torch.float64)
    return model, (mk(m), mk(present), mk(m))


def test_temporal_hard_logits_differ_from_positive():
    model, batch = model_and_batch()
    _, (pairs,) = contrastive_loss(model(*batch), LossVariant())
    pos = pairs.sim[:, 0:1]
    hard = pairs.sim[torch.from_numpy(pairs.cand_tag == TEMPORAL_HARD)].reshape(len(pos), -1)
    assert (hard - pos).abs().min() > 0


def test_disjoint_is_sum_of_directions():
    model, batch = model_and_batch()
    bundle = model(*batch, pairs=False, singles=True)
    fut = baseline_loss(bundle, LossVariant(kind="future_only"))
    past = baseline_loss(bundle, LossVariant(kind="past_only"))
    both = baseline_loss(bundle, LossVariant(kind="disjoint"))
    assert abs(both.item() - (fut.item() + past.item())) < 1e-7


def test_past_as_negatives_adds_m_candidates():
    model, batch = model_and_batch(m=2)
    bundle = model(*batch, pairs=False, singles=True)
    (fut,) = variant_pairs(bundle, LossVariant(kind="future_only"))
    (pan,) = variant_pairs(bundle, LossVariant(kind="past_as_negatives"))
    assert pan.n_candidates == fut.n_candidates + 2
    assert set(pan.count(TEMPORAL_HARD)) == {2}


def test_baselines_need_blocks():
    model, batch = model_and_batch()
    bundle = model(batch[0], batch[1], None, pairs=False, singles=True)
    with pytest.raises(VariantRequiresBlocks):
        baseline_loss(bundle, LossVariant(kind="future_only"))
    with pytest.raises(VariantRequiresBlocks):
        contrastive_loss(bundle, LossVariant())


def test_reversal_oracle():
    # palindromic blocks: reversing the clip swaps past and future and leaves every block unchanged
    rng = np.random.default_rng(0)
    clips = []
    for _ in range(3):
        half = rng.random((3, 3, 16, 16, 3), dtype=np.float32)
        blocks = np.concatenate([half, half[:, 1::-1]], axis=1)  # frames a, b, c, b, a
        clips.append(blocks.reshape(15, 16, 16, 3))
    spec = PartitionSpec(1, 1, 1)
    fwd = [partition_clip(c, spec, rng, stride=1) for c in clips]
    rev = [partition_clip(c[::-1].copy(), spec, rng, stride=1) for c in clips]
    torch.manual_seed(0)
    model = BidirectionalEncoder(BackboneConfig(**TINY)).double().eval()

    def bundle(parts):
        t = lambda name: to_tensor([getattr(p, name) for p in parts]).double()
        return model(t("past_blocks"), t("present_blocks"), t("future_blocks"), pairs=False, singles=True)

    a = baseline_loss(bundle(fwd), LossVariant(kind="future_only")).item()
    b = baseline_loss(bundle(rev), LossVariant(kind="past_only")).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_spatial_candidates_grid_and_pooled():
    model, batch = model_and_batch(n=1, m=1, present=1, grid=True)
    pairs = spatial_candidates(model(*batch), LossVariant(use_spatial_negatives=True))
    assert len(pairs.positives) == 16 and set(pairs.count(SPATIAL)) == {15}
    pooled, batch = model_and_batch(n=1, m=1, present=1)
    with pytest.raises(ModeMismatch):
        spatial_candidates(pooled(*batch), LossVariant(use_spatial_negatives=True))


def test_grid_without_spatial_negatives_keeps_cells_apart():
    model, batch = model_and_batch(n=2, m=1, present=1, grid=True)
    (pairs,) = variant_pairs(model(*batch), LossVariant())
    assert set(pairs.count(SPATIAL)) == {0}
    assert pairs.n_candidates == 1 + 2 * 1 * 1 + 1


@pytest.mark.parametrize("kind", ["bidirectional", "future_only", "past_only", "disjoint", "past_as_negatives"])
def test_every_variant_is_finite_and_differentiable(kind):
    model, batch = model_and_batch()
    bundle = model(*batch, pairs=kind == "bidirectional", singles=kind != "bidirectional")
    loss, _ = contrastive_loss(bundle, LossVariant(kind=kind, temperature=0.1))
    assert torch.isfinite(loss)
    loss.backward()
    assert model.present_agg.gates.weight.grad is not None


def test_pair_table_dump_is_stable():
    pairs = score_pairs(build_pairs(2, 1), torch.eye(2, 3, dtype=torch.float64),
                        torch.eye(4, 3, dtype=torch.float64), 1.0)
    lines = format_pair_table(pairs).splitlines()
    assert lines[0] == "positive\tslot\tcandidate\ttag\tsim"
    assert lines[1:5] == [
        "pf:v0:0:0\t0\tpf:v0:0:0\tpositive\t1.000000",
        "pf:v0:0:0\t1\tpf:v1:0:0\teasy\t0.000000",
        "pf:v0:0:0\t2\tfp:v1:0:0\teasy\t0.000000",
        "pf:v0:0:0\t3\tfp:v0:0:0\ttemporal_hard\t0.000000",
    ]
