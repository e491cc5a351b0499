import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synemb import SynEmbError
from synemb import model as M
from synemb import nncore as nn
from synemb.bpe import learn_bpe
from synemb.corpus import EOS_ID, TAG_TO_ID

from conftest import randomize, tiny_config

TOL = 1e-4


def param_gradcheck(params, loss_fn, names=None):
    """Compare accumulated grads in ``params`` to central differences of ``loss_fn``."""
    worst = 0.0
    for name in names or sorted(params):
        p = params[name]
        num = nn.numerical_gradient(loss_fn, p.value, 1e-5)
        err = nn.relative_error(p.grad, num)
        worst = max(worst, err)
        assert err < TOL, (name, err)
    return worst


def toy_batch(rng, config, B=3, tags=("PRON", "VERB", "NOUN", "PUNCT")):
    items = []
    for b in range(B):
        n = int(rng.integers(1, 5))
        ids = rng.integers(4, config.bpe_vocab_size, n).tolist()
        k = int(rng.integers(1, len(tags) + 1))
        items.append((ids, b % config.num_langs, list(tags[:k])))
    return M.make_batch(items)


def test_default_config_shapes_match_table():
    c = M.ModelConfig()
    assert (c.bpe_vocab_size, c.bpe_emb_dim, c.upos_emb_dim, c.lang_emb_dim) == (40000, 100, 100, 20)
    assert (c.enc_layers, c.enc_fwd_hidden, c.enc_bwd_hidden, c.dec_layers, c.dec_hidden) == (2, 128, 128, 1, 512)
    assert c.dropout == 0.2 and c.upos_tagset_size == 20
    s = M.param_shapes(c)
    assert s["src_emb"] == (40000, 100)
    assert s["encoder.layer0.fwd.W_ih"] == (100, 512)
    assert s["encoder.layer1.bwd.W_ih"] == (256, 512)
    assert s["init.W_h"] == s["init.W_c"] == (512, 512)
    assert s["decoder.W_ih"] == (376, 2048)
    assert s["out.W"] == (512, 20)
    assert s["lang_emb"] == (c.num_langs, 20) and s["upos_emb"] == (20, 100)


def test_default_parameter_count():
    c = M.ModelConfig()
    shapes = M.param_shapes(c)
    n = sum(int(np.prod(s)) for k, s in shapes.items() if k not in ("src_emb", "lang_emb"))
    # (100+128+1)*512*2 + (256+128+1)*512*2 + 2*(512*512+512) + 20*100 + (376+512+1)*2048 + 512*20+20
    assert n == 2_986_980


def test_config_validation():
    with pytest.raises(SynEmbError):
        M.ModelConfig(dec_layers=2)
    with pytest.raises(SynEmbError):
        M.ModelConfig(enc_fwd_hidden=0)
    with pytest.raises(SynEmbError):
        M.ModelConfig(dropout=1.0)
    c = M.toy_config()
    assert M.ModelConfig.from_dict(c.to_dict()) == c


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(1, 6), st.integers(1, 4),
       st.integers(1, 6), st.integers(1, 4), st.integers(1, 3))
def test_shape_soundness(E, U, Ld, Hf, Hb, D, B, layers):
    c = tiny_config(bpe_emb_dim=E, upos_emb_dim=U, lang_emb_dim=Ld, enc_fwd_hidden=Hf,
                    enc_bwd_hidden=Hb, dec_hidden=D, enc_layers=layers)
    params = M.init_params(c, 0)
    M.check_params(params, c)
    rng = np.random.default_rng(B)
    batch = toy_batch(rng, c, B)
    enc, pooled, h, cc = M.encode_batch(params, c, batch.src_ids, batch.lengths)
    assert enc.shape == (batch.src_ids.shape[0], B, Hf + Hb)
    assert pooled.shape == (B, Hf + Hb) and h.shape == cc.shape == (B, D)
    logits, h2, c2 = M.decode_step(params, c, 17, batch.tgt_lang, pooled, h, cc)
    assert logits.shape == (B, 20) and h2.shape == c2.shape == (B, D)


def test_full_model_gradient_check_with_dropout():
    c = tiny_config(dropout=0.3)
    params = randomize(M.init_params(c, 0), 1)
    batch = toy_batch(np.random.default_rng(2), c, 3)
    f = lambda: M.forward_loss(params, c, batch, True, np.random.default_rng(7))[0]
    params.zero_grad()
    M.forward_backward(params, c, batch, True, np.random.default_rng(7))
    param_gradcheck(params, f)


def test_one_decode_step_gradient_check():
    # empty tag list: decoder sees BOS only and must emit EOS, so exactly one decode step
    c = tiny_config()
    params = randomize(M.init_params(c, 0), 3)
    batch = M.make_batch([([5, 6], 0, []), ([7], 1, [])])
    assert batch.dec_in.shape == (1, 2)
    f = lambda: M.forward_loss(params, c, batch)[0]
    params.zero_grad()
    M.forward_backward(params, c, batch)
    param_gradcheck(params, f)


def test_encode_gradient_check_three_tokens():
    c = tiny_config(enc_fwd_hidden=4, enc_bwd_hidden=4, dec_hidden=4)
    params = randomize(M.init_params(c, 0), 4)
    ids, lengths = M.pad_ids([[4, 9, 11], [12, 5]])
    r = np.random.default_rng(5)
    Rp, Rh, Rc = r.normal(size=(2, 8)), r.normal(size=(2, 4)), r.normal(size=(2, 4))

    def f():
        _, pooled, h, cc = M.encode_batch(params, c, ids, lengths)
        return float((pooled * Rp).sum() + (h * Rh).sum() + (cc * Rc).sum())

    params.zero_grad()
    _, cache = M._encode_forward(params, c, ids, lengths, False, None)
    M._encode_backward(params, c, Rp, Rh, Rc, cache)
    encoder_side = [n for n in params if n.startswith(("src_emb", "encoder", "init"))]
    param_gradcheck(params, f, encoder_side)


def test_single_token_pools_to_top_output():
    c = tiny_config()
    params = randomize(M.init_params(c, 0), 0)
    enc, pooled, _, _ = M.encode_batch(params, c, np.array([[5]]), [1])
    np.testing.assert_array_equal(pooled[0], enc[0, 0])


def test_twins_and_batch_invariance():
    c = tiny_config()
    params = randomize(M.init_params(c, 0), 6)
    rng = np.random.default_rng(0)
    seqs = [rng.integers(4, 30, int(rng.integers(1, 7))).tolist() for _ in range(8)]
    seqs[3] = list(seqs[1])
    batch8 = M.embed_ids(params, c, seqs, batch_size=8)
    np.testing.assert_array_equal(batch8[1], batch8[3])
    for i, s in enumerate(seqs):
        single = M.embed_ids(params, c, [s], batch_size=1)[0]
        # BLAS may pick a different kernel for one row, so allow last-ulp drift
        np.testing.assert_allclose(single, batch8[i], rtol=1e-12, atol=1e-15)


def test_language_label_does_not_reach_encoder(small_bpe):
    c = tiny_config(bpe_vocab_size=small_bpe.vocab_size)
    params = randomize(M.init_params(c, 0), 2)
    texts = ["bako dimu lasa .", "tipe kelo ."]
    a = M.embed_sentences(params, c, small_bpe, [(t, "en") for t in texts])
    b = M.embed_sentences(params, c, small_bpe, [(t, "de") for t in texts])
    for x, y in zip(a, b):
        assert x.vector.tobytes() == y.vector.tobytes()
    assert a[1].lang == "en" and b[1].lang == "de" and a[0].text == texts[0]


def test_embed_sentences_errors(small_bpe):
    c = tiny_config(bpe_vocab_size=small_bpe.vocab_size)
    params = M.init_params(c, 0)
    with pytest.raises(SynEmbError, match="no BPE pieces"):
        M.embed_sentences(params, c, small_bpe, [("   ", "en")])
    with pytest.raises(SynEmbError, match="symbols"):
        M.embed_sentences(params, tiny_config(), small_bpe, [("a", "en")])


def test_zero_weight_model_embeds_to_zero():
    c = tiny_config()
    params = M.init_params(c, 0)
    for p in params.values():
        p.value[...] = 0.0
    out = M.embed_ids(params, c, [[4, 5, 6], [7]])
    assert not out.any()


def test_default_embedding_dimension():
    c = M.ModelConfig(bpe_vocab_size=50, num_langs=2)
    params = M.init_params(c, 0)
    assert M.embed_ids(params, c, [[4, 5]]).shape == (1, 256)


def test_decode_step_determinism_and_language_sensitivity():
    c = tiny_config()
    params = randomize(M.init_params(c, 0), 8)
    _, pooled, h, cc = M.encode_batch(params, c, np.array([[5], [6]]), [2])
    a = M.decode_step(params, c, 17, [0], pooled, h, cc)[0]
    b = M.decode_step(params, c, 17, [0], pooled, h, cc)[0]
    d = M.decode_step(params, c, 17, [1], pooled, h, cc)[0]
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, d)
    with pytest.raises(SynEmbError, match="unknown language"):
        M.decode_step(params, c, 17, [2], pooled, h, cc)


def test_initial_loss_near_uniform():
    c = M.toy_config(num_langs=2)
    params = M.init_params(c, 0)
    rng = np.random.default_rng(0)
    tags = ["DET", "NOUN", "VERB", "ADJ", "PRON", "PUNCT"]
    items = [(rng.integers(4, 200, int(rng.integers(2, 9))).tolist(), int(rng.integers(2)),
              list(rng.choice(tags, int(rng.integers(2, 7))))) for _ in range(64)]
    loss, acc = M.forward_loss(params, c, M.make_batch(items))
    assert abs(loss - np.log(20)) < 0.3
    assert 0 <= acc <= 1


def test_duplicated_batch_has_same_loss():
    c = tiny_config()
    params = randomize(M.init_params(c, 0), 9, 0.3)
    rng = np.random.default_rng(1)
    items = [(rng.integers(4, 30, 3).tolist(), 0, ["NOUN", "VERB"]), ([5], 1, ["X", "X", "PUNCT"])]
    a = M.forward_loss(params, c, M.make_batch(items))
    b = M.forward_loss(params, c, M.make_batch(items + items))
    assert a[0] == pytest.approx(b[0], rel=1e-13)
    assert a[1] == b[1]


def test_greedy_decode_after_overfitting_one_pair():
    c = tiny_config(dec_hidden=8)
    params = M.init_params(c, 0)
    target = ["DET", "NOUN", "VERB", "PUNCT"]
    batch = M.make_batch([([4, 9, 12], 1, target)])
    cfg = nn.AdamConfig(lr=0.05)
    for _ in range(150):
        M.forward_backward(params, c, batch)
        nn.clip_grad_norm(params, 5.0)
        nn.adam_step(params, cfg)
    assert M.greedy_decode(params, c, [4, 9, 12], 1) == target
    assert M.greedy_decode(params, c, [4, 9, 12], 1) == M.greedy_decode(params, c, [4, 9, 12], 1)


def test_greedy_decode_max_len_one_with_eos():
    c = tiny_config()
    params = M.init_params(c, 0)
    params["out.b"].value[EOS_ID] = 100.0
    assert M.greedy_decode(params, c, [5], 0, max_len=1) == []
    params["out.b"].value[EOS_ID] = 0.0
    params["out.b"].value[TAG_TO_ID["NOUN"]] = 100.0
    assert M.greedy_decode(params, c, [5], 0, max_len=1) == ["NOUN"]
    with pytest.raises(SynEmbError):
        M.greedy_decode(params, c, [5], 0, max_len=0)


def test_encode_errors():
    c = tiny_config()
    params = M.init_params(c, 0)
    with pytest.raises(SynEmbError, match="zero-length"):
        M.encode_batch(params, c, np.array([[5, 0]]), [1, 0])
    with pytest.raises(SynEmbError):
        M.encode_batch(params, c, np.array([[99]]), [1])
    with pytest.raises(SynEmbError):
        M.pad_ids([[1], []])


def test_grow_languages_keeps_rows():
    c = tiny_config()
    params = randomize(M.init_params(c, 0), 1)
    old = params.v("lang_emb").copy()
    c2 = M.grow_languages(params, c, 4)
    assert c2.num_langs == 4
    np.testing.assert_array_equal(params.v("lang_emb")[:2], old)
    M.check_params(params, c2)
    with pytest.raises(SynEmbError):
        M.grow_languages(params, c2, 3)


def test_learned_bpe_feeds_model():
    bpe = learn_bpe(["to be or not to be ."] * 3, 30)
    c = tiny_config(bpe_vocab_size=bpe.vocab_size)
    out = M.embed_sentences(M.init_params(c, 0), c, bpe, [("to be .", "en")])
    assert out[0].vector.shape == (8,)
