"""Scalar-oracle and property tests for every training objective."""
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from unireid.config import LossWeights
from unireid.errors import ConfigError, DataError
from unireid.losses import (
    BatchViews,
    StageOneParts,
    StageTwoParts,
    cic_loss,
    cmpr_loss,
    id_loss,
    ilpa_loss,
    inversion_consistency,
    prompt_contrastive,
    sdm_loss,
    stage1_objective,
    stage2_objective,
    triplet_loss,
)

D = 8


def views_of(labels, t2i_mask):
    labels = torch.as_tensor(labels)
    return BatchViews(
        labels=labels,
        cameras=torch.zeros_like(labels),
        t2i_mask=torch.as_tensor(t2i_mask, dtype=torch.bool),
    )


def rand(rng, *shape):
    return torch.tensor(rng.standard_normal(shape))


# ---------------------------------------------------------------- sdm


def test_sdm_matching_distributions_give_zero():
    # one identity, identical embeddings: similarity rows and the label-match
    # target are both uniform, so both KL directions vanish
    img = torch.ones(4, D, dtype=torch.float64)
    txt = torch.ones(4, D, dtype=torch.float64)
    labels = torch.zeros(4, dtype=torch.long)
    assert float(sdm_loss(img, txt, labels, temperature=0.07)) == pytest.approx(0.0, abs=1e-9)


def test_sdm_nonnegative_on_random_batches():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        img, txt = rand(rng, n, D), rand(rng, n, D)
        labels = torch.tensor(rng.integers(0, 3, size=n))
        assert float(sdm_loss(img, txt, labels, temperature=0.07)) >= -1e-9


def test_sdm_matches_hand_rolled_value():
    rng = np.random.default_rng(1)
    img, txt = rand(rng, 2, D), rand(rng, 2, D)
    labels = torch.tensor([0, 1])
    expected = oracles.sdm(img.numpy(), txt.numpy(), labels.numpy(), 0.07)
    assert float(sdm_loss(img, txt, labels, temperature=0.07)) == pytest.approx(expected, abs=1e-9)


def test_sdm_matches_oracle_with_duplicate_identities():
    rng = np.random.default_rng(2)
    img, txt = rand(rng, 6, D), rand(rng, 6, D)
    labels = torch.tensor([0, 0, 1, 2, 2, 2])
    expected = oracles.sdm(img.numpy(), txt.numpy(), labels.numpy(), 0.2)
    assert float(sdm_loss(img, txt, labels, temperature=0.2)) == pytest.approx(expected, abs=1e-9)


def test_sdm_rejects_tiny_and_mismatched_batches():
    one = torch.ones(1, D)
    with pytest.raises(DataError):
        sdm_loss(one, one, torch.zeros(1, dtype=torch.long), temperature=0.07)
    with pytest.raises(ConfigError):
        sdm_loss(torch.ones(2, D), torch.ones(2, D + 1), torch.zeros(2, dtype=torch.long),
                 temperature=0.07)


@settings(max_examples=30, derandomize=True)
@given(st.integers(0, 10_000))
def test_sdm_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    img, txt = rand(rng, 5, D), rand(rng, 5, D)
    labels = torch.tensor(rng.integers(0, 3, size=5))
    perm = torch.tensor(rng.permutation(5))
    base = float(sdm_loss(img, txt, labels, temperature=0.07))
    shuffled = float(sdm_loss(img[perm], txt[perm], labels[perm], temperature=0.07))
    assert shuffled == pytest.approx(base, abs=1e-6)


# ---------------------------------------------------------------- id


def test_id_uniform_logits_give_log_n():
    logits = torch.zeros(3, 8, dtype=torch.float64)
    labels = torch.tensor([0, 3, 7])
    assert float(id_loss(logits, labels)) == pytest.approx(math.log(8), abs=1e-6)


def test_id_confident_logits_vanish():
    logits = 50.0 * torch.eye(4, dtype=torch.float64)
    assert float(id_loss(logits, torch.arange(4))) == pytest.approx(0.0, abs=1e-6)


def test_id_matches_hand_rolled_cross_entropy():
    rng = np.random.default_rng(3)
    logits = rand(rng, 5, 7)
    labels = torch.tensor(rng.integers(0, 7, size=5))
    expected = oracles.cross_entropy(logits.numpy(), labels.numpy())
    assert float(id_loss(logits, labels)) == pytest.approx(expected, abs=1e-9)


def test_id_rejects_out_of_range_labels():
    with pytest.raises(DataError):
        id_loss(torch.zeros(2, 4), torch.tensor([0, 4]))
    with pytest.raises(DataError):
        id_loss(torch.zeros(2, 4), torch.tensor([-1, 0]))


# ---------------------------------------------------------------- triplet


def test_triplet_satisfied_margin_gives_zero():
    # both instances of each identity coincide; the two identities sit at
    # opposite poles, distance 2 after normalization, far beyond the margin
    e1 = torch.zeros(D, dtype=torch.float64)
    e1[0] = 1.0
    features = torch.stack([e1, e1, -e1, -e1])
    labels = torch.tensor([0, 0, 1, 1])
    assert float(triplet_loss(features, labels, margin=0.3)) == pytest.approx(0.0, abs=1e-9)


def test_triplet_equidistant_batch_equals_margin():
    # regular tetrahedron: every pairwise distance is equal, so the hardest
    # positive and hardest negative cancel and the margin is all that remains
    verts = torch.tensor(
        [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]],
        dtype=torch.float64,
    )
    labels = torch.tensor([0, 0, 1, 1])
    assert float(triplet_loss(verts, labels, margin=0.3)) == pytest.approx(0.3, abs=1e-6)


def test_triplet_matches_exhaustive_mining():
    rng = np.random.default_rng(4)
    features = rand(rng, 16, D)
    labels = torch.tensor(sum(([i] * 4 for i in range(4)), []))
    expected = oracles.triplet_exhaustive(features.numpy(), labels.numpy(), 0.3)
    assert float(triplet_loss(features, labels, margin=0.3)) == pytest.approx(expected, abs=1e-9)


def test_triplet_rejects_degenerate_structure():
    with pytest.raises(DataError):  # no negatives anywhere
        triplet_loss(torch.randn(4, D), torch.zeros(4, dtype=torch.long))
    with pytest.raises(DataError):  # anchor without a positive
        triplet_loss(torch.randn(3, D), torch.tensor([0, 0, 1]))


@settings(max_examples=30, derandomize=True)
@given(st.integers(0, 10_000))
def test_triplet_nonnegative_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    features = rand(rng, 8, D)
    labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
    base = float(triplet_loss(features, labels))
    assert base >= 0.0
    perm = torch.tensor(rng.permutation(8))
    assert float(triplet_loss(features[perm], labels[perm])) == pytest.approx(base, abs=1e-6)


# ---------------------------------------------------------------- prompt contrastive


def test_prompt_contrastive_uniform_similarities_give_log_b():
    img = torch.ones(4, D, dtype=torch.float64)
    prompts = torch.ones(4, D, dtype=torch.float64)
    l_t2i, l_i2t = prompt_contrastive(img, prompts, temperature=0.07)
    assert float(l_t2i) == pytest.approx(math.log(4), abs=1e-6)
    assert float(l_i2t) == pytest.approx(math.log(4), abs=1e-6)


def test_prompt_contrastive_dominant_diagonal_vanishes():
    img = torch.eye(4, D, dtype=torch.float64)
    l_t2i, l_i2t = prompt_contrastive(img, img.clone(), temperature=1e-3)
    assert float(l_t2i) == pytest.approx(0.0, abs=1e-6)
    assert float(l_i2t) == pytest.approx(0.0, abs=1e-6)


def test_prompt_contrastive_matches_oracle():
    rng = np.random.default_rng(5)
    img, prompts = rand(rng, 3, D), rand(rng, 3, D)
    e_t2i, e_i2t = oracles.prompt_contrastive(img.numpy(), prompts.numpy(), 0.07)
    l_t2i, l_i2t = prompt_contrastive(img, prompts, temperature=0.07)
    assert float(l_t2i) == pytest.approx(e_t2i, abs=1e-9)
    assert float(l_i2t) == pytest.approx(e_i2t, abs=1e-9)


def test_prompt_contrastive_rejects_shape_mismatch():
    with pytest.raises(ConfigError):
        prompt_contrastive(torch.ones(3, D), torch.ones(4, D))


# ---------------------------------------------------------------- inversion consistency


def test_inversion_consistency_perfect_alignment_gives_zero():
    rng = np.random.default_rng(6)
    emb = rand(rng, 4, D)
    views = views_of([0, 1, 2, 3], [True, True, False, False])
    loss = inversion_consistency(emb, emb.clone(), emb[:2], emb[:2].clone(), views)
    assert float(loss) == 0.0


def test_inversion_consistency_unit_distances_sum_to_two():
    z = torch.zeros(1, D, dtype=torch.float64)
    e = torch.zeros(1, D, dtype=torch.float64)
    e[0, 0] = 1.0
    views = views_of([0], [True])
    assert float(inversion_consistency(z, e, z, e, views)) == pytest.approx(2.0, abs=1e-12)


def test_inversion_consistency_two_denominators_match_oracle():
    rng = np.random.default_rng(7)
    mask = [True, False, True, False]
    vis, cls = rand(rng, 4, D), rand(rng, 4, D)
    txt, eos = rand(rng, 2, D), rand(rng, 2, D)
    views = views_of([0, 1, 2, 3], mask)
    expected = oracles.inversion_consistency(vis.numpy(), cls.numpy(),
                                             txt.numpy(), eos.numpy(), mask)
    assert float(inversion_consistency(vis, cls, txt, eos, views)) == pytest.approx(
        expected, abs=1e-9)


def test_inversion_consistency_image_only_batch_drops_text_term():
    rng = np.random.default_rng(8)
    vis, cls = rand(rng, 3, D), rand(rng, 3, D)
    views = views_of([0, 1, 2], [False, False, False])
    empty = torch.zeros(0, D, dtype=torch.float64)
    expected = float((vis - cls).pow(2).sum(dim=1).mean())
    assert float(inversion_consistency(vis, cls, empty, empty, views)) == pytest.approx(
        expected, abs=1e-9)


def test_inversion_consistency_rejects_wrong_coverage():
    views = views_of([0, 1], [True, False])
    with pytest.raises(ConfigError):
        inversion_consistency(torch.ones(1, D), torch.ones(1, D),
                              torch.ones(1, D), torch.ones(1, D), views)
    with pytest.raises(ConfigError):
        inversion_consistency(torch.ones(2, D), torch.ones(2, D),
                              torch.ones(2, D), torch.ones(2, D), views)


# ---------------------------------------------------------------- ilpa


def test_ilpa_perfect_alignment_gives_zero():
    rng = np.random.default_rng(9)
    full = rand(rng, 4, D)
    mask = [True, True, False, False]
    views = views_of([0, 1, 2, 3], mask)
    loss = ilpa_loss(full[:2], full, full, full[:2], views)
    assert float(loss) == 0.0


def test_ilpa_unit_distance_pairs_sum_to_two():
    z = torch.zeros(1, D, dtype=torch.float64)
    e = torch.zeros(1, D, dtype=torch.float64)
    e[0, 0] = 1.0
    views = views_of([0], [True])
    assert float(ilpa_loss(z, e, z, e, views)) == pytest.approx(2.0, abs=1e-12)


def test_ilpa_matches_oracle_on_mixed_batch():
    rng = np.random.default_rng(10)
    mask = [False, True, True, False, True]
    txt, eos = rand(rng, 3, D), rand(rng, 3, D)
    cls, vis = rand(rng, 5, D), rand(rng, 5, D)
    views = views_of([0, 1, 2, 3, 4], mask)
    expected = oracles.ilpa(txt.numpy(), cls.numpy(), vis.numpy(), eos.numpy(), mask)
    assert float(ilpa_loss(txt, cls, vis, eos, views)) == pytest.approx(expected, abs=1e-9)


def test_ilpa_empty_subset_is_exactly_zero():
    rng = np.random.default_rng(11)
    vis, cls = rand(rng, 3, D), rand(rng, 3, D)
    empty = torch.zeros(0, D, dtype=torch.float64)
    views = views_of([0, 1, 2], [False, False, False])
    assert float(ilpa_loss(empty, cls, vis, empty, views)) == 0.0


def test_ilpa_rejects_wrong_coverage():
    views = views_of([0, 1], [True, False])
    with pytest.raises(ConfigError):
        ilpa_loss(torch.ones(1, D), torch.ones(1, D), torch.ones(1, D),
                  torch.ones(1, D), views)
    with pytest.raises(ConfigError):
        ilpa_loss(torch.ones(2, D), torch.ones(2, D), torch.ones(2, D),
                  torch.ones(2, D), views)


# ---------------------------------------------------------------- cic


def test_cic_uniform_similarities_give_log_n():
    feats = torch.randn(3, D, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    prompts = torch.ones(10, D, dtype=torch.float64)  # identical rows, constant logits
    labels = torch.tensor([0, 4, 9])
    assert float(cic_loss(feats, prompts, labels, temperature=0.07)) == pytest.approx(
        math.log(10), abs=1e-6)


def test_cic_own_prompt_dominance_vanishes():
    prompts = torch.eye(5, D, dtype=torch.float64)
    feats = prompts.clone()
    labels = torch.arange(5)
    assert float(cic_loss(feats, prompts, labels, temperature=1e-3)) == pytest.approx(
        0.0, abs=1e-6)


def test_cic_matches_oracle():
    rng = np.random.default_rng(12)
    feats, prompts = rand(rng, 4, D), rand(rng, 5, D)
    labels = torch.tensor(rng.integers(0, 5, size=4))
    expected = oracles.cic(feats.numpy(), prompts.numpy(), labels.numpy(), 0.07)
    assert float(cic_loss(feats, prompts, labels, temperature=0.07)) == pytest.approx(
        expected, abs=1e-9)


def test_cic_denominator_covers_absent_identities():
    # adding an identity that never appears in the batch must still change the
    # loss: the normalizer runs over the full identity set
    rng = np.random.default_rng(13)
    feats, prompts = rand(rng, 3, D), rand(rng, 4, D)
    labels = torch.tensor([0, 1, 2])
    narrow = float(cic_loss(feats, prompts[:3], labels, temperature=0.07))
    wide = float(cic_loss(feats, prompts, labels, temperature=0.07))
    assert wide != pytest.approx(narrow, abs=1e-9)


def test_cic_rejects_labels_beyond_bank():
    with pytest.raises(ConfigError):
        cic_loss(torch.ones(2, D), torch.ones(3, D), torch.tensor([0, 3]))


# ---------------------------------------------------------------- cmpr


def test_cmpr_equal_token_matrices_give_zero():
    rng = np.random.default_rng(14)
    p_v = rand(rng, 3, 2, 4)
    views = views_of([0, 1, 2], [True, False, True])
    p_t = p_v[[0, 2]].clone()
    assert float(cmpr_loss(p_t, p_v, views)) == 0.0


def test_cmpr_all_ones_difference_gives_six():
    views = views_of([0], [True])
    p_v = torch.zeros(1, 2, 3, dtype=torch.float64)
    p_t = torch.ones(1, 2, 3, dtype=torch.float64)
    assert float(cmpr_loss(p_t, p_v, views)) == pytest.approx(6.0, abs=1e-12)


def test_cmpr_matches_oracle():
    rng = np.random.default_rng(15)
    mask = [True, False, True, True]
    p_v = rand(rng, 4, 4, D)
    p_t = rand(rng, 3, 4, D)
    views = views_of([0, 1, 2, 3], mask)
    expected = oracles.cmpr(p_t.numpy(), p_v.numpy(), mask)
    assert float(cmpr_loss(p_t, p_v, views)) == pytest.approx(expected, abs=1e-9)


def test_cmpr_empty_subset_is_exactly_zero():
    views = views_of([0, 1], [False, False])
    p_v = torch.randn(2, 2, 4)
    assert float(cmpr_loss(torch.zeros(0, 2, 4), p_v, views)) == 0.0


def test_cmpr_rejects_shape_mismatch():
    views = views_of([0, 1], [True, False])
    with pytest.raises(ConfigError):
        cmpr_loss(torch.ones(1, 2, 4), torch.ones(2, 3, 4), views)
    with pytest.raises(ConfigError):
        cmpr_loss(torch.ones(2, 2, 4), torch.ones(2, 2, 4), views)


# ---------------------------------------------------------------- subset discipline


def test_losses_ignore_unpaired_sample_features():
    """Perturbing an image-only row must leave the paired-subset losses bitwise equal."""
    rng = np.random.default_rng(16)
    mask = [True, True, False, False]
    views = views_of([0, 1, 0, 1], mask)
    cls = rand(rng, 4, D)
    vis = rand(rng, 4, D)
    txt, eos = rand(rng, 2, D), rand(rng, 2, D)
    p_v, p_t = rand(rng, 4, 2, D), rand(rng, 2, 2, D)

    base_ilpa = float(ilpa_loss(txt, cls, vis, eos, views))
    base_cmpr = float(cmpr_loss(p_t, p_v, views))
    for row in (2, 3):
        cls2, vis2, p_v2 = cls.clone(), vis.clone(), p_v.clone()
        cls2[row] += 10.0
        vis2[row] -= 5.0
        p_v2[row] += 3.0
        assert float(ilpa_loss(txt, cls2, vis2, eos, views)) == base_ilpa
        assert float(cmpr_loss(p_t, p_v2, views)) == base_cmpr


# ---------------------------------------------------------------- stage aggregates


def s(x):
    return torch.tensor(float(x), dtype=torch.float64)


def test_stage1_objective_sums_parts():
    assert float(stage1_objective(StageOneParts(s(0), s(0), s(0)))) == 0.0
    assert float(stage1_objective(StageOneParts(s(1), s(2), s(3)))) == pytest.approx(6.0)


def test_stage2_objective_weights_parts():
    parts = StageTwoParts(s(1), s(2), s(3), s(4), s(5), s(6), s(7))
    w0 = LossWeights(lambda1=0.0, lambda2=0.0)
    assert float(stage2_objective(parts, w0)) == pytest.approx(1 + 2 + 3 + 4 + 5)
    w = LossWeights(lambda1=0.4, lambda2=0.06)
    expected = (1 + 2 + 3 + 4) + 5 + 0.4 * 6 + 0.06 * 7
    assert float(stage2_objective(parts, w)) == pytest.approx(expected, abs=1e-9)


# ---------------------------------------------------------------- shared properties


@settings(max_examples=25, derandomize=True)
@given(st.integers(0, 10_000))
def test_distance_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    mask = [True, True, False]
    views = views_of([0, 1, 2], mask)
    vis, cls = rand(rng, 3, D), rand(rng, 3, D)
    txt, eos = rand(rng, 2, D), rand(rng, 2, D)
    p_v, p_t = rand(rng, 3, 2, D), rand(rng, 2, 2, D)
    assert float(inversion_consistency(vis, cls, txt, eos, views)) >= 0.0
    assert float(ilpa_loss(txt, cls, vis, eos, views)) >= 0.0
    assert float(cmpr_loss(p_t, p_v, views)) >= 0.0


@settings(max_examples=25, derandomize=True)
@given(st.integers(0, 10_000))
def test_classification_losses_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    logits = rand(rng, 6, 5)
    labels = torch.tensor(rng.integers(0, 5, size=6))
    perm = torch.tensor(rng.permutation(6))
    assert float(id_loss(logits[perm], labels[perm])) == pytest.approx(
        float(id_loss(logits, labels)), abs=1e-6)
    prompts = rand(rng, 5, D)
    feats = rand(rng, 6, D)
    assert float(cic_loss(feats[perm], prompts, labels[perm], 0.07)) == pytest.approx(
        float(cic_loss(feats, prompts, labels, 0.07)), abs=1e-6)
