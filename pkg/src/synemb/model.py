"""BiLSTM encoder and language-conditioned LSTM decoder over UPOS tags.

Shapes under the default configuration::

    BPE ids [T, B] -> embeddings [T, B, 100] -> 2 x BiLSTM(128 + 128) -> [T, B, 256]
    pooled = masked max over time                                        -> [B, 256]
    [h_fwd; h_bwd; c_fwd; c_bwd] of the top layer -> W_h, W_c            -> [B, 512] each
    decoder input = [upos_emb(prev) 100; lang_emb(tgt) 20; pooled 256]  -> LSTM(512) -> 20 logits
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from synemb import SynEmbError
from synemb.corpus import BOS_ID, EOS_ID, PAD_ID, SPECIAL_TAGS, TAG_TO_ID, TAGSET
from synemb import nncore as nn
from synemb.nncore import LSTMGrads, LSTMWeights, ParamSet


@dataclass(frozen=True)
class ModelConfig:
    bpe_vocab_size: int = 40000
    bpe_emb_dim: int = 100
    upos_emb_dim: int = 100
    lang_emb_dim: int = 20
    enc_layers: int = 2
    enc_fwd_hidden: int = 128
    enc_bwd_hidden: int = 128
    dec_layers: int = 1
    dec_hidden: int = 512
    num_langs: int = 6
    upos_tagset_size: int = len(TAGSET)
    dropout: float = 0.2

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "dropout":
                if not 0.0 <= value < 1.0:
                    raise SynEmbError(f"dropout must be in [0, 1), got {value}")
            elif not (isinstance(value, int) and value > 0):
                raise SynEmbError(f"model config {name} must be a positive integer, got {value!r}")
        if self.dec_layers != 1:
            raise SynEmbError(f"only a single decoder layer is supported, got dec_layers={self.dec_layers}")
        if self.upos_tagset_size != len(TAGSET):
            raise SynEmbError(f"upos_tagset_size must be {len(TAGSET)}, got {self.upos_tagset_size}")

    @property
    def enc_out_dim(self) -> int:
        return self.enc_fwd_hidden + self.enc_bwd_hidden

    @property
    def init_in_dim(self) -> int:
        return 2 * self.enc_out_dim

    @property
    def dec_in_dim(self) -> int:
        return self.upos_emb_dim + self.lang_emb_dim + self.enc_out_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)

    def replace(self, **changes) -> ModelConfig:
        return ModelConfig(**{**asdict(self), **changes})


def toy_config(**overrides) -> ModelConfig:
    """Small dimensions for tests and synthetic experiments."""
    base = dict(
        bpe_vocab_size=200, bpe_emb_dim=16, upos_emb_dim=16, lang_emb_dim=4,
        enc_fwd_hidden=16, enc_bwd_hidden=16, dec_hidden=32, num_langs=3, dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config
    shapes = {"src_emb": (c.bpe_vocab_size, c.bpe_emb_dim)}
    in_dim = c.bpe_emb_dim
    for layer in range(c.enc_layers):
        for direction, H in (("fwd", c.enc_fwd_hidden), ("bwd", c.enc_bwd_hidden)):
            prefix = f"encoder.layer{layer}.{direction}"
            shapes[f"{prefix}.W_ih"] = (in_dim, 4 * H)
            shapes[f"{prefix}.W_hh"] = (H, 4 * H)
            shapes[f"{prefix}.b"] = (4 * H,)
        in_dim = c.enc_out_dim
    shapes["init.W_h"] = (c.init_in_dim, c.dec_hidden)
    shapes["init.b_h"] = (c.dec_hidden,)
    shapes["init.W_c"] = (c.init_in_dim, c.dec_hidden)
    shapes["init.b_c"] = (c.dec_hidden,)
    shapes["lang_emb"] = (c.num_langs, c.lang_emb_dim)
    shapes["upos_emb"] = (c.upos_tagset_size, c.upos_emb_dim)
    shapes["decoder.W_ih"] = (c.dec_in_dim, 4 * c.dec_hidden)
    shapes["decoder.W_hh"] = (c.dec_hidden, 4 * c.dec_hidden)
    shapes["decoder.b"] = (4 * c.dec_hidden,)
    shapes["out.W"] = (c.dec_hidden, c.upos_tagset_size)
    shapes["out.b"] = (c.upos_tagset_size,)
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> ParamSet:
    """LSTMs ~ U(+-1/sqrt(H)) with forget bias 1; linear maps ~ U(+-1/sqrt(fan_in)); embeddings ~ N(0, 0.1)."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(config)
    params = ParamSet()
    for name, shape in shapes.items():
        if name.endswith("emb"):
            value = rng.normal(0.0, 0.1, size=shape)
        elif name.startswith(("encoder", "decoder")):
            hidden = shape[-1] // 4
            if name.endswith(".b"):
                value = np.zeros(shape)
                value[hidden:2 * hidden] = 1.0
            else:
                bound = 1.0 / np.sqrt(hidden)
                value = rng.uniform(-bound, bound, size=shape)
        elif name in ("init.b_h", "init.b_c", "out.b"):
            value = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        params.add(name, value)
    return params


def grow_languages(params: ParamSet, config: ModelConfig, num_langs: int, seed: int = 0) -> ModelConfig:
    """Append language-embedding rows so the table has ``num_langs`` rows."""
    extra = num_langs - config.num_langs
    if extra < 0:
        raise SynEmbError(f"cannot shrink the language table from {config.num_langs} to {num_langs}")
    if extra == 0:
        return config
    rng = np.random.default_rng([seed, num_langs])
    old = params["lang_emb"]
    rows = rng.normal(0.0, 0.1, size=(extra, config.lang_emb_dim))
    params["lang_emb"] = nn.Param(
        "lang_emb",
        np.vstack([old.value, rows]),
        np.vstack([old.grad, np.zeros_like(rows)]),
        np.vstack([old.adam_m, np.zeros_like(rows)]),
        np.vstack([old.adam_v, np.zeros_like(rows)]),
    )
    return config.replace(num_langs=num_langs)


def check_params(params: ParamSet, config: ModelConfig) -> None:
    expected = param_shapes(config)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise SynEmbError(f"parameter names do not match config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise SynEmbError(f"parameter {name} has shape {params[name].shape}, config implies {shape}")


def _lstm(params: ParamSet, prefix: str) -> LSTMWeights:
    return LSTMWeights(params.v(f"{prefix}.W_ih"), params.v(f"{prefix}.W_hh"), params.v(f"{prefix}.b"))


def _add_lstm_grads(params: ParamSet, prefix: str, g: LSTMGrads) -> None:
    params[f"{prefix}.W_ih"].grad += g.W_ih
    params[f"{prefix}.W_hh"].grad += g.W_hh
    params[f"{prefix}.b"].grad += g.b


# ---------------------------------------------------------------- batches

class Batch(NamedTuple):
    src_ids: np.ndarray  # [T, B] int, right-padded with 0
    lengths: np.ndarray  # [B]
    tgt_lang: np.ndarray  # [B]
    dec_in: np.ndarray  # [K + 1, B]: BOS, tags..., PAD
    dec_out: np.ndarray  # [K + 1, B]: tags..., EOS, PAD

    @property
    def size(self) -> int:
        return self.src_ids.shape[1]


def pad_ids(seqs) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.size and lengths.min() < 1:
        bad = int(np.argmin(lengths))
        raise SynEmbError(f"zero-length source sequence at batch position {bad}")
    T = int(lengths.max()) if lengths.size else 0
    ids = np.zeros((T, len(seqs)), dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[: len(s), b] = s
    return ids, lengths


def make_batch(items) -> Batch:
    """``items``: iterable of ``(bpe_ids, tgt_lang_index, upos tags or tag ids)``."""
    items = list(items)
    if not items:
        raise SynEmbError("empty batch")
    src_ids, lengths = pad_ids([it[0] for it in items])
    tag_ids = [[TAG_TO_ID[t] if isinstance(t, str) else int(t) for t in it[2]] for it in items]
    K = max(len(t) for t in tag_ids)
    dec_in = np.full((K + 1, len(items)), PAD_ID, dtype=np.int64)
    dec_out = np.full((K + 1, len(items)), PAD_ID, dtype=np.int64)
    for b, tags in enumerate(tag_ids):
        dec_in[0, b] = BOS_ID
        dec_in[1: len(tags) + 1, b] = tags
        dec_out[: len(tags), b] = tags
        dec_out[len(tags), b] = EOS_ID
    tgt_lang = np.array([int(it[1]) for it in items], dtype=np.int64)
    return Batch(src_ids, lengths, tgt_lang, dec_in, dec_out)


# ---------------------------------------------------------------- encoder

def _encode_forward(params, config, src_ids, lengths, training, rng):
    if src_ids.size and src_ids.max() >= config.bpe_vocab_size:
        raise SynEmbError(f"BPE id {int(src_ids.max())} >= vocab size {config.bpe_vocab_size}")
    nn.length_mask(lengths, src_ids.shape[0])
    x, _ = nn.embedding_forward(params.v("src_emb"), src_ids)
    x, emb_mask = nn.dropout_forward(x, config.dropout, training, rng)
    layer_caches = []
    finals = None
    for layer in range(config.enc_layers):
        if layer > 0:
            x, drop_mask = nn.dropout_forward(x, config.dropout, training, rng)
        else:
            drop_mask = None
        w_f = _lstm(params, f"encoder.layer{layer}.fwd")
        w_b = _lstm(params, f"encoder.layer{layer}.bwd")
        x, finals, cache = nn.bilstm_layer_forward(x, lengths, w_f, w_b)
        layer_caches.append((drop_mask, cache))
    pooled, pool_cache = nn.masked_temporal_max_pool(x, lengths)
    h_f, c_f, h_b, c_b = finals
    state = np.concatenate([h_f, h_b, c_f, c_b], axis=1)
    init_h = state @ params.v("init.W_h") + params.v("init.b_h")
    init_c = state @ params.v("init.W_c") + params.v("init.b_c")
    cache = (src_ids, emb_mask, layer_caches, pool_cache, state)
    return (x, pooled, init_h, init_c), cache


def _encode_backward(params, config, dpooled, dinit_h, dinit_c, cache):
    src_ids, emb_mask, layer_caches, pool_cache, state = cache
    params["init.W_h"].grad += state.T @ dinit_h
    params["init.b_h"].grad += dinit_h.sum(axis=0)
    params["init.W_c"].grad += state.T @ dinit_c
    params["init.b_c"].grad += dinit_c.sum(axis=0)
    dstate = dinit_h @ params.v("init.W_h").T + dinit_c @ params.v("init.W_c").T
    Hf, Hb = config.enc_fwd_hidden, config.enc_bwd_hidden
    dh_f = dstate[:, :Hf]
    dh_b = dstate[:, Hf:Hf + Hb]
    dc_f = dstate[:, Hf + Hb:2 * Hf + Hb]
    dc_b = dstate[:, 2 * Hf + Hb:]
    dx = nn.masked_temporal_max_pool_backward(dpooled, pool_cache)
    dfinals = (dh_f, dc_f, dh_b, dc_b)
    for layer in reversed(range(config.enc_layers)):
        drop_mask, lcache = layer_caches[layer]
        dx, g_f, g_b = nn.bilstm_layer_backward(dx, dfinals, lcache)
        _add_lstm_grads(params, f"encoder.layer{layer}.fwd", g_f)
        _add_lstm_grads(params, f"encoder.layer{layer}.bwd", g_b)
        if drop_mask is not None:
            dx = nn.dropout_backward(dx, drop_mask)
        dfinals = None
    dx = nn.dropout_backward(dx, emb_mask)
    np.add.at(params["src_emb"].grad, src_ids.reshape(-1), dx.reshape(-1, dx.shape[-1]))


def encode_batch(params, config, bpe_ids, lengths, training: bool = False, rng=None):
    """Returns ``(enc_outputs[T, B, 2H], pooled[B, 2H], init_h[B, D], init_c[B, D])``."""
    if training and rng is None:
        raise SynEmbError("training mode needs an rng for dropout")
    out, _ = _encode_forward(params, config, np.asarray(bpe_ids), np.asarray(lengths), training, rng)
    return out


# ---------------------------------------------------------------- decoder

def _check_langs(config, tgt_lang):
    tgt_lang = np.asarray(tgt_lang, dtype=np.int64)
    if tgt_lang.size and (tgt_lang.min() < 0 or tgt_lang.max() >= config.num_langs):
        raise SynEmbError(f"unknown language index in {tgt_lang.tolist()} (table has {config.num_langs} rows)")
    return tgt_lang


def decode_step(params, config, prev_tag, tgt_lang, pooled, h, c):
    """One decoder step. Returns ``(logits[B, 20], h', c')``."""
    B = pooled.shape[0]
    tgt_lang = np.broadcast_to(_check_langs(config, tgt_lang), (B,))
    prev_tag = np.broadcast_to(np.asarray(prev_tag, dtype=np.int64), (B,))
    x = np.concatenate([params.v("upos_emb")[prev_tag], params.v("lang_emb")[tgt_lang], pooled], axis=1)
    h, c, _ = nn.lstm_cell_forward(x, h, c, _lstm(params, "decoder"))
    logits = h @ params.v("out.W") + params.v("out.b")
    return logits, h, c


def _forward(params, config, batch: Batch, training, rng, backward: bool):
    tgt_lang = _check_langs(config, batch.tgt_lang)
    (enc_out, pooled, init_h, init_c), enc_cache = _encode_forward(
        params, config, batch.src_ids, batch.lengths, training, rng
    )
    K1, B = batch.dec_in.shape
    upos = params.v("upos_emb")[batch.dec_in]  # [K1, B, U]
    lang = np.broadcast_to(params.v("lang_emb")[tgt_lang], (K1, B, config.lang_emb_dim))
    pool = np.broadcast_to(pooled, (K1, B, pooled.shape[1]))
    x = np.concatenate([upos, lang, pool], axis=2)
    dec_out, _, dec_cache = nn.lstm_forward(x, _lstm(params, "decoder"), init_h, init_c)
    flat = dec_out.reshape(K1 * B, -1)
    logits = flat @ params.v("out.W") + params.v("out.b")
    targets = batch.dec_out.reshape(-1)
    loss, dlogits = nn.softmax_cross_entropy(logits, targets, PAD_ID)
    keep = targets != PAD_ID
    acc = float(np.mean(np.argmax(logits[keep], axis=1) == targets[keep]))
    if not backward:
        return loss, acc

    params["out.W"].grad += flat.T @ dlogits
    params["out.b"].grad += dlogits.sum(axis=0)
    ddec = (dlogits @ params.v("out.W").T).reshape(K1, B, -1)
    dx, dh0, dc0, g = nn.lstm_backward(ddec, None, None, dec_cache)
    _add_lstm_grads(params, "decoder", g)
    U, L = config.upos_emb_dim, config.lang_emb_dim
    np.add.at(params["upos_emb"].grad, batch.dec_in.reshape(-1), dx[:, :, :U].reshape(-1, U))
    np.add.at(params["lang_emb"].grad, tgt_lang, dx[:, :, U:U + L].sum(axis=0))
    dpooled = dx[:, :, U + L:].sum(axis=0)
    _encode_backward(params, config, dpooled, dh0, dc0, enc_cache)
    return loss, acc


def forward_loss(params, config, batch: Batch, training: bool = False, rng=None) -> tuple[float, float]:
    """Teacher-forced mean cross-entropy over non-PAD targets and per-tag argmax accuracy."""
    if training and rng is None:
        raise SynEmbError("training mode needs an rng for dropout")
    return _forward(params, config, batch, training, rng, backward=False)


def forward_backward(params, config, batch: Batch, training: bool = False, rng=None) -> tuple[float, float]:
    """Like :func:`forward_loss` but also accumulates gradients into ``params``."""
    if training and rng is None:
        raise SynEmbError("training mode needs an rng for dropout")
    return _forward(params, config, batch, training, rng, backward=True)


# ---------------------------------------------------------------- inference

def greedy_decode(params, config, bpe_ids, tgt_lang: int, max_len: int = 64) -> list[str]:
    if max_len < 1:
        raise SynEmbError(f"max_len must be >= 1, got {max_len}")
    ids, lengths = pad_ids([list(bpe_ids)])
    _, pooled, h, c = encode_batch(params, config, ids, lengths)
    prev = BOS_ID
    tags = []
    for _ in range(max_len):
        logits, h, c = decode_step(params, config, [prev], [tgt_lang], pooled, h, c)
        prev = int(np.argmax(logits[0]))
        if prev == EOS_ID:
            break
        tags.append(TAGSET[prev])
    return [t for t in tags if t not in SPECIAL_TAGS]


@dataclass
class SentenceEmbedding:
    vector: np.ndarray
    lang: str
    text: str


def embed_ids(params, config, id_seqs, batch_size: int = 64) -> np.ndarray:
    """Pooled encoder outputs for pre-encoded sentences, as an ``[n, 2H]`` array."""
    out = np.zeros((len(id_seqs), config.enc_out_dim))
    order = sorted(range(len(id_seqs)), key=lambda i: len(id_seqs[i]))
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        ids, lengths = pad_ids([id_seqs[i] for i in chunk])
        _, pooled, _, _ = encode_batch(params, config, ids, lengths)
        out[chunk] = pooled
    return out


def embed_sentences(params, config, bpe_model, sentences, batch_size: int = 64) -> list[SentenceEmbedding]:
    """Embed ``(text, lang)`` pairs. The language is carried along but never reaches the encoder."""
    if bpe_model.vocab_size != config.bpe_vocab_size:
        raise SynEmbError(
            f"BPE model has {bpe_model.vocab_size} symbols but the model expects {config.bpe_vocab_size}"
        )
    sentences = list(sentences)
    id_seqs = [bpe_model.encode(text) for text, _ in sentences]
    empty = [text for (text, _), ids in zip(sentences, id_seqs) if not ids]
    if empty:
        raise SynEmbError(f"sentences with no BPE pieces: {empty[:5]}")
    vectors = embed_ids(params, config, id_seqs, batch_size)
    return [SentenceEmbedding(vectors[i], lang, text) for i, (text, lang) in enumerate(sentences)]
