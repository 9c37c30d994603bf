"""Triplet ranking loss, BatchHard mining and the semantic-consistency objective."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scan_embed import numerics as nx
from scan_embed.dataset import collate
from scan_embed.encoders import embed_batch
from scan_embed.losses import (LabelError, LossConfig, MiningError, TripletMarginConfig, batch_hard_mine,
                               class_probabilities, combine, hinge_terms, cosine_embedding_loss, cross_entropy,
                               kl_divergence, pairwise_distance_matrix, semantic_consistency_loss,
                               total_loss, triplet_loss)
from scan_embed.numerics import Tensor

from conftest import toy_model, toy_records


def probs_from_logits(logits):
    logits = np.asarray(logits, dtype=float)
    return class_probabilities(np.zeros(1), Tensor(np.zeros((1, logits.shape[-1]))), Tensor(logits))


def probs_batch(logits):
    logits = np.asarray(logits, dtype=float)
    B, N = logits.shape
    return class_probabilities(np.eye(B), Tensor(logits), Tensor(np.zeros(N)))


# -- brute-force oracles ----------------------------------------------------
def mine_oracle(D, keys):
    B = len(D)
    out = {"img_pos": [], "img_neg": [], "rec_pos": [], "rec_neg": []}
    for view, tag in ((D, "img"), (D.T, "rec")):
        for a in range(B):
            best_p = best_n = None
            for c in range(B):
                if keys[c] == keys[a]:
                    if best_p is None or view[a, c] > view[a, best_p]:
                        best_p = c
                elif best_n is None or view[a, c] < view[a, best_n]:
                    best_n = c
            out[f"{tag}_pos"].append(best_p)
            out[f"{tag}_neg"].append(best_n)
    return out


def triplet_oracle(I, R, keys, margin):
    D = np.array([[np.sqrt(np.sum((i - r) ** 2)) for r in R] for i in I])
    m = mine_oracle(D, keys)
    terms = [max(0.0, D[a, m["img_pos"][a]] - D[a, m["img_neg"][a]] + margin) for a in range(len(D))]
    terms += [max(0.0, D[m["rec_pos"][a], a] - D[m["rec_neg"][a], a] + margin) for a in range(len(D))]
    return float(np.mean(terms))


# -- distances and mining ---------------------------------------------------
def test_distance_matrix_orthonormal():
    E = np.eye(4)
    D = pairwise_distance_matrix(E, E).data
    np.testing.assert_allclose(D, np.sqrt(2) * (1 - np.eye(4)), atol=1e-15)


def test_distance_matrix_single_pair_and_nonnegative(rng):
    a, b = rng.standard_normal((1, 5)), rng.standard_normal((1, 5))
    assert pairwise_distance_matrix(a, b).data[0, 0] == pytest.approx(np.linalg.norm(a - b), abs=1e-15)
    assert np.all(pairwise_distance_matrix(rng.standard_normal((7, 3)), rng.standard_normal((7, 3))).data >= 0)


def test_mining_hand_example():
    D = np.array([[0.2, 0.5, 0.9], [0.4, 0.1, 0.3], [0.8, 0.7, 0.2]])
    m = batch_hard_mine(D)
    assert (m.img_pos[0], m.img_neg[0]) == (0, 1)
    assert m.img_neg.tolist() == [1, 2, 1]
    assert m.rec_neg.tolist() == [1, 0, 1]


def test_mining_two_samples_forces_other(rng):
    m = batch_hard_mine(rng.random((2, 2)))
    assert m.img_neg.tolist() == [1, 0] and m.rec_neg.tolist() == [1, 0]


def test_mining_errors():
    with pytest.raises(MiningError):
        batch_hard_mine(np.zeros((1, 1)))
    with pytest.raises(MiningError):
        batch_hard_mine(np.zeros((3, 3)), labels=[0, 0, 0], cfg=TripletMarginConfig(positive_mode="same-class"))


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**31 - 1), st.booleans(), st.booleans())
def test_mining_matches_oracle(B, seed, same_class, quantize):
    r = np.random.default_rng(seed)
    D = r.random((B, B))
    if quantize:
        D = np.round(D * 4) / 4   # force ties
    labels = r.integers(0, max(2, B // 3), B)
    if same_class and len(set(labels.tolist())) < 2:
        labels[0] = labels[0] + 1
    cfg = TripletMarginConfig(positive_mode="same-class" if same_class else "paired")
    m = batch_hard_mine(D, np.arange(B), labels, cfg)
    o = mine_oracle(D, labels if same_class else np.arange(B))
    for k in o:
        assert getattr(m, k).tolist() == o[k]


# -- triplet loss -----------------------------------------------------------
def test_hinge_examples():
    # one image anchor, distances to its positive / negative given directly
    D = Tensor(np.array([[0.2, 1.0], [1.0, 0.2]]))
    m = batch_hard_mine(D)
    img, _ = hinge_terms(D, m, 0.3)
    assert nx.hinge(img).data.tolist() == [0.0, 0.0]
    D = Tensor(np.array([[0.8, 0.5], [0.5, 0.8]]))
    img, rec = hinge_terms(D, batch_hard_mine(D), 0.3)
    np.testing.assert_allclose(nx.hinge(img).data, [0.6, 0.6], atol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_triplet_matches_oracle(seed):
    r = np.random.default_rng(seed)
    B = int(r.integers(2, 17))
    I, R = r.standard_normal((B, 5)), r.standard_normal((B, 5))
    got = triplet_loss(Tensor(I), Tensor(R)).item()
    assert got == pytest.approx(triplet_oracle(I, R, np.arange(B), 0.3), abs=1e-12)


def test_triplet_sum_reduction(rng):
    I, R = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    mean = triplet_loss(I, R).item()
    total = triplet_loss(I, R, TripletMarginConfig(reduction="sum")).item()
    assert total == pytest.approx(12 * mean, rel=1e-13)


def test_triplet_positive_under_huge_margin(rng):
    I, R = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    assert triplet_loss(I, R, TripletMarginConfig(margin=1e3)).item() > 0


@pytest.mark.parametrize("seed", range(10))
def test_triplet_rotation_invariance(seed):
    r = np.random.default_rng(seed)
    I, R = r.standard_normal((8, 6)), r.standard_normal((8, 6))
    Q, _ = np.linalg.qr(r.standard_normal((6, 6)))
    assert triplet_loss(I @ Q, R @ Q).item() == pytest.approx(triplet_loss(I, R).item(), abs=1e-9)


def test_cosine_loss_perfect_pairs():
    E = np.eye(4)
    assert cosine_embedding_loss(E, E).item() == pytest.approx(0.0, abs=1e-10)


# -- classification and KL --------------------------------------------------
def test_class_probability_examples(rng):
    p = class_probabilities(rng.standard_normal(4), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))
    np.testing.assert_allclose(p.probs.data, np.full(5, 0.2), atol=1e-15)
    np.testing.assert_allclose(probs_from_logits([0, np.log(3)]).probs.data, [0.25, 0.75], atol=1e-15)
    q = class_probabilities(rng.standard_normal((6, 4)), Tensor(rng.standard_normal((4, 7))),
                            Tensor(rng.standard_normal(7)))
    np.testing.assert_allclose(q.probs.data.sum(axis=1), 1.0, atol=1e-14)


def test_cross_entropy_examples():
    assert cross_entropy(probs_from_logits([0, np.log(3)]), 1).item() == pytest.approx(0.2877, abs=5e-5)
    assert cross_entropy(probs_from_logits([0, 60, 0]), 1).item() < 1e-20
    assert cross_entropy(probs_from_logits(np.zeros(7)), 4).item() == pytest.approx(np.log(7), abs=1e-15)
    with pytest.raises(LabelError):
        cross_entropy(probs_from_logits([0, 0]), 2)


def test_kl_examples():
    half = probs_from_logits([0, 0])
    quarter = probs_from_logits([0, np.log(3)])
    assert kl_divergence(half, half).item() == 0.0
    fwd = kl_divergence(half, quarter).item()
    rev = kl_divergence(quarter, half).item()
    assert fwd == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(2 / 3), abs=1e-15)
    assert fwd == pytest.approx(0.1438, abs=5e-5)
    assert rev == pytest.approx(0.1308, abs=5e-5)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**31 - 1))
def test_kl_nonnegative_and_zero_on_self(N, seed):
    r = np.random.default_rng(seed)
    p, q = probs_from_logits(r.standard_normal(N) * 3), probs_from_logits(r.standard_normal(N) * 3)
    assert kl_divergence(p, q).item() >= 0
    assert abs(kl_divergence(p, p).item()) <= 1e-12


def test_sc_hand_case():
    img, rec = probs_batch([[0.0, 0.0]]), probs_batch([[0.0, np.log(3)]])
    t = semantic_consistency_loss(img, rec, [1], [1])
    ce_img, ce_rec = np.log(2), -np.log(0.75)
    kl_ir = 0.5 * np.log(2) + 0.5 * np.log(2 / 3)
    kl_ri = 0.25 * np.log(0.5) + 0.75 * np.log(1.5)
    expect = ((ce_img + kl_ri) + (ce_rec + kl_ir)) / 2
    assert t.sc.item() == pytest.approx(expect, abs=1e-15)


def test_sc_equal_distributions_reduce_to_cross_entropy(rng):
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, 5)
    t = semantic_consistency_loss(probs_batch(logits), probs_batch(logits), labels, labels)
    ce = cross_entropy(probs_batch(logits), labels).data.mean()
    assert t.sc.item() == pytest.approx(ce, abs=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_sc_equals_regrouped_form(seed):
    r = np.random.default_rng(seed)
    B, N = int(r.integers(1, 9)), int(r.integers(2, 8))
    li, lr_ = r.standard_normal((B, N)) * 2, r.standard_normal((B, N)) * 2
    c = r.integers(0, N, B)
    t = semantic_consistency_loss(probs_batch(li), probs_batch(lr_), c, c)
    regrouped = (t.cls_img.item() + t.cls_rec.item()) / 2 + (t.kl_rec_img.item() + t.kl_img_rec.item()) / 2
    assert abs(t.sc.item() - regrouped) <= 1e-12


# -- total loss -------------------------------------------------------------
def test_combine_is_linear():
    assert combine(Tensor(1.0), Tensor(2.0), 0.05).item() == pytest.approx(1.1, abs=1e-15)
    assert combine(Tensor(1.0), Tensor(2.0), 0.0).item() == 1.0


def test_reference_lambda():
    assert LossConfig().lam == 0.05


def test_lambda_zero_total_equals_retrieval(toy_batch):
    _, bd = total_loss(toy_batch, toy_model(), 0.0)
    assert bd.total == bd.retrieval


def test_lambda_zero_gradient_equals_triplet_gradient(rng):
    batch = collate(toy_records(rng, 8))
    p = toy_model()
    loss, _ = total_loss(batch, p, 0.0)
    loss.backward()
    g_total = {k: (t.grad.copy() if t.grad is not None else np.zeros(t.shape)) for k, t in p.items()}
    nx.zero_grad(p.values())
    I, R = embed_batch(batch, p)
    triplet_loss(I, R, pair_ids=batch.pair_ids).backward()
    for k, t in p.items():
        g = t.grad if t.grad is not None else np.zeros(t.shape)
        np.testing.assert_allclose(g_total[k], g, atol=1e-12, rtol=0, err_msg=k)


def test_none_mode_forces_zero_weight(toy_batch):
    _, bd = total_loss(toy_batch, toy_model(), LossConfig(lam=0.5, sc_mode="none"))
    assert bd.lam == 0.0 and bd.total == bd.retrieval
