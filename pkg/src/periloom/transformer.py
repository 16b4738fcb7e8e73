"""A small pre-LN transformer (encoder and decoder variants) in plain numpy,
with exact hand-derived gradients for every parameter tensor.

The encoder trains on masked-token prediction (plus an optional
next-sentence head); the decoder on next-token prediction under a strict
causal mask. The LM output projection is weight-tied to the token
embedding table, so its gradient is the sum of both roles' contributions.

Shapes: B batch, T sequence, d model width, h heads, dh = d/h, F feed-forward
width, V vocabulary. Parameters live in a flat name -> array dict; training
runs in f32, while gradient-check mode rebuilds everything in f64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import text as T
from .util import STREAM_DROPOUT, STREAM_INIT, rng_stream

ENCODER = "encoder"
DECODER = "decoder"

_INIT_SCALE = 0.02
_LN_EPS = 1e-5


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    variant: str
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 32
    vocab_size: int = 0
    dropout: float = 0.1
    nsp_head: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in (ENCODER, DECODER):
            raise ModelError(f"variant must be encoder or decoder, got {self.variant!r}")
        if self.n_layers < 1:
            raise ModelError("n_layers must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ModelError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_len < 3:
            raise ModelError("max_len must be >= 3")
        if self.vocab_size < T.N_SPECIALS + 1:
            raise ModelError("vocab_size must cover the special tokens")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")
        if self.nsp_head and self.variant != ENCODER:
            raise ModelError("NSP head only applies to the encoder variant")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "n_layers": self.n_layers, "d_model": self.d_model,
            "n_heads": self.n_heads, "d_ff": self.d_ff, "max_len": self.max_len,
            "vocab_size": self.vocab_size, "dropout": self.dropout,
            "nsp_head": self.nsp_head, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


@dataclass
class ModelParams:
    """All learnable tensors plus the architecture they belong to."""

    config: ArchConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()},
                           dict(self.meta))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config,
                           {k: v.astype(dtype) for k, v in self.tensors.items()},
                           dict(self.meta))

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(config: ArchConfig, dtype=np.float32) -> ModelParams:
    """Gaussian(0, 0.02) weights, zero biases, unit layer-norm scales."""
    config.validate()
    rng = rng_stream(config.seed, STREAM_INIT)
    d, F, V = config.d_model, config.d_ff, config.vocab_size

    def w(*shape):
        return rng.normal(0.0, _INIT_SCALE, size=shape).astype(dtype)

    def z(*shape):
        return np.zeros(shape, dtype=dtype)

    t: dict[str, np.ndarray] = {}
    t["tok_emb"] = w(V, d)
    t["pos_emb"] = w(config.max_len, d)
    for i in range(config.n_layers):
        p = f"l{i}."
        t[p + "ln1.g"] = np.ones(d, dtype=dtype)
        t[p + "ln1.b"] = z(d)
        for name in ("wq", "wk", "wv", "wo"):
            t[p + "attn." + name] = w(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            t[p + "attn." + name] = z(d)
        t[p + "ln2.g"] = np.ones(d, dtype=dtype)
        t[p + "ln2.b"] = z(d)
        t[p + "ffn.w1"] = w(d, F)
        t[p + "ffn.b1"] = z(F)
        t[p + "ffn.w2"] = w(F, d)
        t[p + "ffn.b2"] = z(d)
    t["ln_f.g"] = np.ones(d, dtype=dtype)
    t["ln_f.b"] = z(d)
    if config.nsp_head:
        t["nsp.w"] = w(d, 2)
        t["nsp.b"] = z(2)
    return ModelParams(config, t)


# ----------------------------------------------------------------- primitives

def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def _gelu(x):
    """tanh-approximation GELU; smooth, so finite differences stay clean."""
    th = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + th), th


def _gelu_backward(dy, x, th):
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _attn_bias(config: ArchConfig, attn_mask: np.ndarray, dtype) -> np.ndarray:
    """Additive score bias: -inf at disallowed keys, 0 elsewhere.

    Encoder masks PAD keys (bidirectional otherwise); decoder masks strictly
    future keys. PAD is always a suffix, so causal masking alone keeps real
    decoder positions blind to padding.
    """
    B, S = attn_mask.shape
    if config.variant == ENCODER:
        bias = np.where(attn_mask[:, None, None, :] == 1, 0.0, -np.inf)
    else:
        future = np.triu(np.ones((S, S), dtype=bool), k=1)
        bias = np.where(future, -np.inf, 0.0)[None, None, :, :]
        bias = np.broadcast_to(bias, (B, 1, S, S))
    return bias.astype(dtype, copy=False)


def _dropout_mask(rng, shape, rate, dtype):
    return (rng.random(shape) >= rate).astype(dtype) / (1.0 - rate)


def forward_hidden(params: ModelParams, ids: np.ndarray, attn_mask: np.ndarray,
                   *, train: bool = False, dropout_rng=None):
    """Run the body; returns final hidden states (B,T,d) and a backward cache."""
    cfg = params.config
    t = params.tensors
    B, S = ids.shape
    if S > cfg.max_len:
        raise ModelError(f"sequence length {S} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ModelError("token id out of vocabulary range")
    dtype = params.dtype
    use_dropout = train and cfg.dropout > 0.0
    if use_dropout and dropout_rng is None:
        raise ModelError("training forward needs a dropout generator")

    h = cfg.n_heads
    dh = cfg.d_model // h
    scale = 1.0 / np.sqrt(dh)

    x = t["tok_emb"][ids] + t["pos_emb"][:S]
    emb_drop = None
    if use_dropout:
        emb_drop = _dropout_mask(dropout_rng, x.shape, cfg.dropout, dtype)
        x = x * emb_drop
    bias = _attn_bias(cfg, attn_mask, dtype)

    layers = []
    for i in range(cfg.n_layers):
        p = f"l{i}."
        a_in, ln1c = _layernorm(x, t[p + "ln1.g"], t[p + "ln1.b"])
        q = (a_in @ t[p + "attn.wq"] + t[p + "attn.bq"])
        k = (a_in @ t[p + "attn.wk"] + t[p + "attn.bk"])
        v = (a_in @ t[p + "attn.wv"] + t[p + "attn.bv"])
        qh = q.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) * scale + bias
        probs = _softmax(scores)
        ctx = (probs @ vh).transpose(0, 2, 1, 3).reshape(B, S, cfg.d_model)
        u = ctx @ t[p + "attn.wo"] + t[p + "attn.bo"]
        attn_drop = None
        if use_dropout:
            attn_drop = _dropout_mask(dropout_rng, u.shape, cfg.dropout, dtype)
            u = u * attn_drop
        x1 = x + u
        f_in, ln2c = _layernorm(x1, t[p + "ln2.g"], t[p + "ln2.b"])
        hpre = f_in @ t[p + "ffn.w1"] + t[p + "ffn.b1"]
        hact, gelu_th = _gelu(hpre)
        uf = hact @ t[p + "ffn.w2"] + t[p + "ffn.b2"]
        ffn_drop = None
        if use_dropout:
            ffn_drop = _dropout_mask(dropout_rng, uf.shape, cfg.dropout, dtype)
            uf = uf * ffn_drop
        x2 = x1 + uf
        layers.append({
            "x": x, "a_in": a_in, "ln1c": ln1c, "qh": qh, "kh": kh, "vh": vh,
            "probs": probs, "ctx": ctx, "attn_drop": attn_drop, "x1": x1,
            "f_in": f_in, "ln2c": ln2c, "hpre": hpre, "gelu_th": gelu_th, "hact": hact,
            "ffn_drop": ffn_drop,
        })
        x = x2
    hidden, lnfc = _layernorm(x, t["ln_f.g"], t["ln_f.b"])
    cache = {"ids": ids, "emb_drop": emb_drop, "layers": layers,
             "x_final": x, "lnfc": lnfc, "seq_len": S}
    return hidden, cache


def backward_hidden(params: ModelParams, cache, d_hidden: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of every body tensor given d(loss)/d(hidden)."""
    cfg = params.config
    t = params.tensors
    B, S = cache["ids"].shape
    h = cfg.n_heads
    dh = cfg.d_model // h
    scale = 1.0 / np.sqrt(dh)
    grads = {name: np.zeros_like(arr) for name, arr in t.items()}

    dx, dgf, dbf = _layernorm_backward(d_hidden, cache["lnfc"], t["ln_f.g"])
    grads["ln_f.g"] += dgf
    grads["ln_f.b"] += dbf

    for i in reversed(range(cfg.n_layers)):
        p = f"l{i}."
        c = cache["layers"][i]
        # FFN sublayer (weight grads via flattened matmuls: BLAS, not einsum)
        duf = dx if c["ffn_drop"] is None else dx * c["ffn_drop"]
        duf2 = duf.reshape(-1, duf.shape[-1])
        grads[p + "ffn.w2"] += c["hact"].reshape(-1, c["hact"].shape[-1]).T @ duf2
        grads[p + "ffn.b2"] += duf2.sum(axis=0)
        dhact = duf @ t[p + "ffn.w2"].T
        dhpre = _gelu_backward(dhact, c["hpre"], c["gelu_th"])
        dhpre2 = dhpre.reshape(-1, dhpre.shape[-1])
        grads[p + "ffn.w1"] += c["f_in"].reshape(-1, c["f_in"].shape[-1]).T @ dhpre2
        grads[p + "ffn.b1"] += dhpre2.sum(axis=0)
        df_in = dhpre @ t[p + "ffn.w1"].T
        dx1, dg2, db2 = _layernorm_backward(df_in, c["ln2c"], t[p + "ln2.g"])
        grads[p + "ln2.g"] += dg2
        grads[p + "ln2.b"] += db2
        dx1 = dx1 + dx  # residual
        # Attention sublayer
        du = dx1 if c["attn_drop"] is None else dx1 * c["attn_drop"]
        du2 = du.reshape(-1, du.shape[-1])
        grads[p + "attn.wo"] += c["ctx"].reshape(-1, du.shape[-1]).T @ du2
        grads[p + "attn.bo"] += du2.sum(axis=0)
        dctx = (du @ t[p + "attn.wo"].T).reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        dprobs = dctx @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["probs"].transpose(0, 1, 3, 2) @ dctx
        inner = (dprobs * c["probs"]).sum(axis=-1, keepdims=True)
        dscores = c["probs"] * (dprobs - inner)
        dqh = dscores @ c["kh"] * scale
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"] * scale
        dq = dqh.transpose(0, 2, 1, 3).reshape(B, S, cfg.d_model)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, S, cfg.d_model)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, S, cfg.d_model)
        a_in2 = c["a_in"].reshape(-1, cfg.d_model)
        for name, darr in (("q", dq), ("k", dk), ("v", dv)):
            d2 = darr.reshape(-1, cfg.d_model)
            grads[p + "attn.w" + name] += a_in2.T @ d2
            grads[p + "attn.b" + name] += d2.sum(axis=0)
        da_in = dq @ t[p + "attn.wq"].T + dk @ t[p + "attn.wk"].T + dv @ t[p + "attn.wv"].T
        dxa, dg1, db1 = _layernorm_backward(da_in, c["ln1c"], t[p + "ln1.g"])
        grads[p + "ln1.g"] += dg1
        grads[p + "ln1.b"] += db1
        dx = dxa + dx1  # residual

    if cache["emb_drop"] is not None:
        dx = dx * cache["emb_drop"]
    np.add.at(grads["tok_emb"], cache["ids"], dx)
    grads["pos_emb"][:S] += dx.sum(axis=0)
    return grads


# ------------------------------------------------------------------- pooling

def pool_hidden(hidden: np.ndarray, attn_mask: np.ndarray, variant: str) -> np.ndarray:
    """Encoder: mean over non-PAD positions. Decoder: last non-PAD position."""
    if variant == ENCODER:
        m = attn_mask.astype(hidden.dtype)
        return (hidden * m[:, :, None]).sum(axis=1) / m.sum(axis=1, keepdims=True)
    last = attn_mask.sum(axis=1) - 1
    return hidden[np.arange(hidden.shape[0]), last]


def pool_backward(d_pooled: np.ndarray, hidden_shape, attn_mask: np.ndarray,
                  variant: str) -> np.ndarray:
    d_hidden = np.zeros(hidden_shape, dtype=d_pooled.dtype)
    if variant == ENCODER:
        m = attn_mask.astype(d_pooled.dtype)
        d_hidden += (d_pooled / m.sum(axis=1, keepdims=True))[:, None, :] * m[:, :, None]
    else:
        last = attn_mask.sum(axis=1) - 1
        d_hidden[np.arange(hidden_shape[0]), last] = d_pooled
    return d_hidden


# ----------------------------------------------------------- language losses

def cross_entropy_rows(logits: np.ndarray, targets: np.ndarray):
    """Mean CE over rows plus d(loss)/d(logits); softmax is log-sum-exp stable."""
    n = logits.shape[0]
    if n == 0:
        raise ModelError("cross entropy over zero target positions")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    logp = shifted[np.arange(n), targets] - logz
    loss = -logp.mean()
    dlogits = _softmax(logits)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return loss, dlogits


def mlm_loss_grads(params: ModelParams, hidden: np.ndarray, target_ids: np.ndarray,
                   flags: np.ndarray):
    """Masked-token CE at flagged positions through the tied output projection.

    Returns (loss, d_hidden, d_tok_emb_head): the embedding-table gradient
    from its output-projection role, to be added to the lookup-role gradient.
    """
    E = params.tensors["tok_emb"]
    if not flags.any():
        raise ModelError("MLM batch has no flagged positions")
    hs = hidden[flags]
    logits = hs @ E.T
    loss, dlogits = cross_entropy_rows(logits, target_ids[flags])
    d_hidden = np.zeros_like(hidden)
    d_hidden[flags] = dlogits @ E
    d_emb_head = dlogits.T @ hs
    return loss, d_hidden, d_emb_head


def causal_targets(ids: np.ndarray, attn_mask: np.ndarray):
    """Boolean (B,T) of prediction positions t whose next token t+1 is real."""
    sel = np.zeros_like(attn_mask, dtype=bool)
    sel[:, :-1] = attn_mask[:, 1:] == 1
    return sel


def causal_loss_grads(params: ModelParams, hidden: np.ndarray, ids: np.ndarray,
                      attn_mask: np.ndarray):
    """Next-token CE over all real-token targets (PAD excluded)."""
    E = params.tensors["tok_emb"]
    sel = causal_targets(ids, attn_mask)
    if not sel.any():
        raise ModelError("causal batch needs at least one next-token target")
    hs = hidden[sel]
    shifted_targets = np.roll(ids, -1, axis=1)[sel]
    logits = hs @ E.T
    loss, dlogits = cross_entropy_rows(logits, shifted_targets)
    d_hidden = np.zeros_like(hidden)
    d_hidden[sel] = dlogits @ E
    d_emb_head = dlogits.T @ hs
    return loss, d_hidden, d_emb_head


def nsp_loss_grads(params: ModelParams, hidden: np.ndarray, labels: np.ndarray):
    """Binary next-sentence CE from the CLS position's final hidden state."""
    if "nsp.w" not in params.tensors:
        raise ModelError("model has no NSP head")
    w, b = params.tensors["nsp.w"], params.tensors["nsp.b"]
    cls = hidden[:, 0]
    logits = cls @ w + b
    loss, dlogits = cross_entropy_rows(logits, labels)
    d_hidden = np.zeros_like(hidden)
    d_hidden[:, 0] = dlogits @ w.T
    dw = cls.T @ dlogits
    db = dlogits.sum(axis=0)
    return loss, d_hidden, {"nsp.w": dw, "nsp.b": db}


def lm_logits(params: ModelParams, hidden: np.ndarray) -> np.ndarray:
    return hidden @ params.tensors["tok_emb"].T


# --------------------------------------------------------------- convenience

def loss_self(params: ModelParams, ids: np.ndarray, attn_mask: np.ndarray,
              target_ids: np.ndarray | None = None,
              flags: np.ndarray | None = None) -> float:
    """Evaluation-mode self-supervised loss: MLM when flags given, else causal."""
    hidden, _ = forward_hidden(params, ids, attn_mask, train=False)
    if params.config.variant == ENCODER:
        if flags is None or target_ids is None:
            raise ModelError("encoder loss needs MLM targets and flags")
        loss, _, _ = mlm_loss_grads(params, hidden, target_ids, flags)
    else:
        loss, _, _ = causal_loss_grads(params, hidden, ids, attn_mask)
    return float(loss)


def extract_embedding(params: ModelParams, vocab: T.Vocabulary, text: str) -> np.ndarray:
    """Pooled document vector (mean-pool encoder, last-token decoder)."""
    return embed_texts(params, vocab, [text])[0]


def embed_texts(params: ModelParams, vocab: T.Vocabulary, texts: Sequence[str],
                batch_size: int = 128) -> np.ndarray:
    cfg = params.config
    style = T.ENCODER if cfg.variant == ENCODER else T.DECODER
    out = np.empty((len(texts), cfg.d_model), dtype=params.dtype)
    for start in range(0, len(texts), batch_size):
        chunk = texts[start:start + batch_size]
        ids, mask = T.encode_batch(chunk, vocab, cfg.max_len, style)
        hidden, _ = forward_hidden(params, ids, mask, train=False)
        out[start:start + len(chunk)] = pool_hidden(hidden, mask, cfg.variant)
    return out


def dropout_rng(seed: int, *indices: int):
    return rng_stream(seed, STREAM_DROPOUT, *indices)
