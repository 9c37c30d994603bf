"""Recipe and image encoders."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scan_embed import numerics as nx
from scan_embed.dataset import FoodPairRecord, collate
from scan_embed.encoders import (EmptySequenceError, ModelConfig, VocabularyError, attend_and_normalize,
                                 attention_weights, embed_batch, embed_ingredients, encode_image,
                                 encode_instructions, encode_recipe, encode_recipe_batch, init_params,
                                 pool_sequence, run_birnn, self_attention)
from scan_embed.losses import total_loss
from scan_embed.numerics import DimensionError, Tensor

from conftest import toy_model, toy_records


def set_params(params, **arrays):
    for k, v in arrays.items():
        params[k].data = np.asarray(v, dtype=float)


def attention_oracle(H):
    S = H @ H.T / np.sqrt(H.shape[1])
    E = np.exp(S - S.max(axis=1, keepdims=True))
    return (E / E.sum(axis=1, keepdims=True)) @ H


def ln_oracle(X, eps=1e-5):
    mu = X.mean(axis=-1, keepdims=True)
    return (X - mu) / np.sqrt(X.var(axis=-1, keepdims=True) + eps)


# -- embedding lookup -------------------------------------------------------
def test_embedding_rows():
    p = toy_model()
    table = p["word_embedding"]
    assert np.array_equal(embed_ingredients([3], table).data, table.data[3:4])
    assert np.all(embed_ingredients([0], table).data == 0)
    two = embed_ingredients([3, 3], table).data
    assert np.array_equal(two[0], two[1])


def test_embedding_rejects_bad_ids():
    table = toy_model()["word_embedding"]
    with pytest.raises(VocabularyError):
        embed_ingredients([1, 12], table)
    with pytest.raises(EmptySequenceError):
        embed_ingredients([], table)


# -- recurrence ---------------------------------------------------------------
def tanh_model(**kw):
    return toy_model(cell="tanh", **kw)


def test_single_step_zero_weights_gives_zero():
    p = tanh_model()
    for d in ("fwd", "bwd"):
        set_params(p, **{f"ingr_{d}_W": np.zeros((4, 3)), f"ingr_{d}_b": np.zeros(3)})
    H = run_birnn(Tensor(np.ones((1, 4))), p, "ingr")
    assert np.all(H.data == 0)


def test_single_step_directions_agree_with_shared_weights(rng):
    p = tanh_model()
    for name in ("W", "U", "b"):
        p[f"ingr_bwd_{name}"].data = p[f"ingr_fwd_{name}"].data
    H = run_birnn(Tensor(rng.standard_normal((1, 4))), p, "ingr").data
    np.testing.assert_array_equal(H[0, :3], H[0, 3:])


def test_three_step_hand_unroll():
    # scalar hidden state: h_t = tanh(w x_t + u h_{t-1} + b)
    p = init_params(ModelConfig(vocab_size=5, num_classes=2, word_dim=1, hidden_dim=2, sentence_dim=1,
                                image_dim=1, joint_dim=2, cell="tanh"))
    set_params(p, ingr_fwd_W=[[0.5]], ingr_fwd_U=[[-0.4]], ingr_fwd_b=[0.1],
               ingr_bwd_W=[[1.5]], ingr_bwd_U=[[0.3]], ingr_bwd_b=[-0.2])
    x = [1.0, -2.0, 0.5]
    f1 = np.tanh(0.5 * 1.0 + 0.1)
    f2 = np.tanh(0.5 * -2.0 - 0.4 * f1 + 0.1)
    f3 = np.tanh(0.5 * 0.5 - 0.4 * f2 + 0.1)
    b3 = np.tanh(1.5 * 0.5 - 0.2)
    b2 = np.tanh(1.5 * -2.0 + 0.3 * b3 - 0.2)
    b1 = np.tanh(1.5 * 1.0 + 0.3 * b2 - 0.2)
    H = run_birnn(Tensor(np.array(x)[:, None]), p, "ingr").data
    np.testing.assert_allclose(H, [[f1, b1], [f2, b2], [f3, b3]], atol=1e-15)


def test_lstm_single_step_hand_value(rng):
    p = toy_model()
    x = rng.standard_normal(4)
    W, U, b = (p[f"ingr_fwd_{k}"].data for k in "WUb")
    pre = x @ W + b
    sig = lambda z: 1 / (1 + np.exp(-z))
    i, f, g, o = sig(pre[:3]), sig(pre[3:6]), np.tanh(pre[6:9]), sig(pre[9:])
    h = o * np.tanh(i * g)
    np.testing.assert_allclose(run_birnn(Tensor(x[None]), p, "ingr").data[0, :3], h, atol=1e-15)


def test_padding_does_not_change_valid_outputs(rng):
    p = toy_model()
    Z = rng.standard_normal((3, 4))
    plain = run_birnn(Tensor(Z), p, "ingr").data
    padded = np.vstack([Z, rng.standard_normal((2, 4))])[None]
    out = run_birnn(Tensor(padded), p, "ingr", mask=np.array([[1, 1, 1, 0, 0]])).data[0]
    np.testing.assert_allclose(out[:3], plain, atol=1e-15)


# -- attention ----------------------------------------------------------------
def test_attention_single_row_is_identity(rng):
    H = rng.standard_normal((1, 5))
    np.testing.assert_allclose(self_attention(Tensor(H)).data, H, atol=1e-15)


def test_attention_identical_rows(rng):
    row = rng.standard_normal(4)
    out = self_attention(Tensor(np.vstack([row, row, rng.standard_normal(4)]))).data
    np.testing.assert_array_equal(out[0], out[1])


def test_attention_matches_direct_evaluation(rng):
    H = rng.standard_normal((3, 4))
    np.testing.assert_allclose(self_attention(Tensor(H)).data, attention_oracle(H), atol=1e-14)


def test_attend_and_normalize_matches_composition(rng):
    H = rng.standard_normal((5, 6))
    np.testing.assert_allclose(attend_and_normalize(Tensor(H)).data, ln_oracle(attention_oracle(H) + H),
                               atol=1e-12)


def test_attend_and_normalize_single_row(rng):
    H = rng.standard_normal((1, 6))
    a = attend_and_normalize(Tensor(H), eps=1e-300).data
    np.testing.assert_allclose(a, attend_and_normalize(Tensor(2 * H), eps=1e-300).data, atol=1e-8)
    np.testing.assert_allclose(a, nx.layer_normalize(Tensor(H), 1e-300).data, atol=1e-8)


def test_attend_and_normalize_constant_rows():
    out = attend_and_normalize(Tensor(np.full((3, 4), 2.5))).data
    assert np.abs(out).max() < 1e-6


def test_padded_keys_get_no_weight(rng):
    H = rng.standard_normal((1, 4, 3))
    A = attention_weights(Tensor(H), np.array([[1, 1, 0, 0]])).data[0]
    assert np.all(A[:, 2:] == 0)
    np.testing.assert_allclose(A[:2, :2], nx.softmax_rows(Tensor(H[0, :2] @ H[0, :2].T / np.sqrt(3))).data,
                               atol=1e-15)


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_attention_row_stochastic_and_equivariant(n, d, seed):
    r = np.random.default_rng(seed)
    H = r.standard_normal((n, d)) * r.uniform(0.1, 5)
    A = attention_weights(Tensor(H)).data
    assert np.all(A >= 0)
    assert np.abs(A.sum(axis=1) - 1).max() <= 1e-12
    P = r.permutation(n)
    np.testing.assert_allclose(self_attention(Tensor(H[P])).data, self_attention(Tensor(H)).data[P],
                               rtol=1e-12, atol=1e-12)


# -- pooling and instruction encoder ----------------------------------------
def test_pool_examples(rng):
    row = rng.standard_normal((1, 3))
    np.testing.assert_array_equal(pool_sequence(Tensor(row)).data, row[0])
    assert pool_sequence(Tensor([[1, 1], [3, 3]])).data.tolist() == [2, 2]
    F = rng.standard_normal((5, 3))
    np.testing.assert_allclose(pool_sequence(Tensor(F[::-1])).data, pool_sequence(Tensor(F)).data, atol=1e-15)


def test_pool_masked_ignores_padding():
    F = Tensor(np.array([[[1.0, 1], [3, 3], [100, 100]]]))
    assert pool_sequence(F, np.array([[1, 1, 0]])).data.tolist() == [[2, 2]]
    with pytest.raises(EmptySequenceError):
        pool_sequence(F, np.array([[0, 0, 0]]))


def test_instructions_zero_input_zero_cell():
    p = tanh_model(attention=False)
    for d in ("fwd", "bwd"):
        set_params(p, **{f"instr_{d}_b": np.zeros(3)})
    out = encode_instructions(Tensor(np.zeros((1, 5))), p).data
    assert np.abs(out).max() < 1e-12


def test_instructions_match_pipeline_oracle(rng):
    p = tanh_model()
    S = rng.standard_normal((4, 5))

    def direction(d, order):
        W, U, b = (p[f"instr_{d}_{k}"].data for k in "WUb")
        h, out = np.zeros(3), {}
        for t in order:
            h = np.tanh(S[t] @ W + h @ U + b)
            out[t] = h
        return np.array([out[t] for t in range(len(S))])

    H = np.hstack([direction("fwd", range(4)), direction("bwd", range(3, -1, -1))])
    expect = ln_oracle(attention_oracle(H) + H).mean(axis=0)
    np.testing.assert_allclose(encode_instructions(Tensor(S), p).data, expect, atol=1e-12)


def test_instructions_order_sensitive(rng):
    p = toy_model()
    S = rng.standard_normal((3, 5))
    a = encode_instructions(Tensor(S), p).data
    b = encode_instructions(Tensor(S[[2, 0, 1]]), p).data
    assert not np.allclose(a, b)


def test_instruction_dim_checked(rng):
    with pytest.raises(DimensionError):
        encode_instructions(Tensor(rng.standard_normal((2, 4))), toy_model())


# -- full recipe and image encoders -----------------------------------------
def test_reference_joint_dim_is_1024():
    assert ModelConfig(vocab_size=10, num_classes=3).joint_dim == 1024


def test_recipe_zero_fusion_gives_tanh_bias(rng):
    p = toy_model()
    set_params(p, fusion_W=np.zeros((12, 8)))
    recs = toy_records(rng, 2)
    for r in recs:
        np.testing.assert_array_equal(encode_recipe(r, p).data, np.tanh(p["fusion_b"].data))


def test_recipe_deterministic(rng):
    p = toy_model()
    r = toy_records(rng, 1)[0]
    assert encode_recipe(r, p).data.tobytes() == encode_recipe(r, p).data.tobytes()


def test_batched_recipe_matches_single(rng):
    p = toy_model()
    recs = toy_records(rng, 5)
    batched = encode_recipe_batch(collate(recs), p).data
    single = np.array([encode_recipe(r, p).data for r in recs])
    np.testing.assert_allclose(batched, single, atol=1e-14)


def test_image_zero_weights_and_linearity(rng):
    p = toy_model()
    x = rng.standard_normal(6)
    b = p["image_b"].data
    set_params(p, image_W=np.zeros((6, 8)))
    np.testing.assert_array_equal(encode_image(x, p).data, np.tanh(b))
    p = toy_model()
    set_params(p, image_b=np.zeros(8))
    y = rng.standard_normal(6)
    pre = lambda v: np.arctanh(encode_image(v, p).data)
    np.testing.assert_allclose(pre(x + y), pre(x) + pre(y), atol=1e-9)


def test_image_hand_computation():
    p = init_params(ModelConfig(vocab_size=5, num_classes=2, word_dim=1, hidden_dim=2, sentence_dim=1,
                                image_dim=2, joint_dim=3))
    set_params(p, image_W=[[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]], image_b=[0.0, 0.1, 0.2])
    np.testing.assert_allclose(encode_image([2.0, -1.0], p).data,
                               np.tanh([2.0 - 0.5, -2.0 + 0.1, -2.0 + 0.2]), atol=1e-15)


@pytest.mark.parametrize("cell", ["lstm", "tanh"])
@pytest.mark.parametrize("attention", [True, False])
def test_outputs_have_joint_dim_and_are_finite(rng, cell, attention):
    p = toy_model(cell=cell, attention=attention)
    I, R = embed_batch(collate(toy_records(rng, 4)), p)
    assert I.shape == R.shape == (4, 8)
    assert np.all(np.isfinite(I.data)) and np.all(np.isfinite(R.data))


@pytest.mark.parametrize("seed", range(5))
def test_gradient_reaches_every_parameter(seed):
    r = np.random.default_rng(seed)
    p = toy_model(seed)
    batch = collate(toy_records(r, 8))
    loss, _ = total_loss(batch, p, 0.05)
    loss.backward()
    for name, t in p.items():
        g = t.grad.copy()
        if name == "word_embedding":
            g[0] = 0
        assert np.any(g != 0), name
