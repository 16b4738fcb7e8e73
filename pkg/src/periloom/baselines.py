"""Classic word/document embeddings used as the comparison floor:
CBOW word2vec, GloVe, fastText, and PV-DM doc2vec, all trained with plain
(decayed) SGD and negative sampling where applicable.

Document vectors are unweighted means of token vectors for the word-level
models; doc2vec embeds documents by gradient inference against frozen
word/output tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Dataset
from .text import N_SPECIALS, UNK, Vocabulary, build_vocab, tokenize
from .util import STREAM_INFER, STREAM_INIT, STREAM_NEG, STREAM_SHUFFLE, \
    rng_stream, stable_text_key

CBOW = "cbow"
GLOVE = "glove"
FASTTEXT = "fasttext"
DOC2VEC = "doc2vec"


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineHyperparams:
    dim: int = 64
    window: int = 4
    epochs: int = 15
    lr: float = 0.05
    negatives: int = 5
    glove_x_max: float = 100.0
    glove_alpha: float = 0.75
    ngram_min: int = 3
    ngram_max: int = 5
    buckets: int = 2048
    batch_pairs: int = 512
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 1:
            raise BaselineError("dim must be >= 1")
        if self.window < 1:
            raise BaselineError("window must be >= 1")
        if not 0.0 < self.glove_alpha <= 1.0:
            raise BaselineError("glove_alpha must be in (0, 1]")
        if self.ngram_min > self.ngram_max:
            raise BaselineError("ngram_min must be <= ngram_max")
        if self.epochs < 0 or self.negatives < 1:
            raise BaselineError("epochs must be >= 0 and negatives >= 1")


@dataclass
class EmbeddingMatrix:
    """Per-token vectors plus whatever extra state the family needs."""

    kind: str
    vocab: Vocabulary
    vectors: np.ndarray                # (V, d) token table
    hp: BaselineHyperparams
    ngram_buckets: np.ndarray | None = None   # fastText (buckets, d)
    out_vectors: np.ndarray | None = None     # doc2vec inference needs these
    noise: np.ndarray | None = None           # doc2vec negative-sampling dist
    doc_vectors: np.ndarray | None = None     # doc2vec training-doc table
    loss_trace: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


# ------------------------------------------------------------------ utilities

def _doc_ids(dataset: Dataset, vocab: Vocabulary) -> list[np.ndarray]:
    return [np.array([vocab.lookup(t) for t in tokenize(n.text)], dtype=np.int64)
            for n in dataset]


def _check_window(docs: list[np.ndarray], window: int) -> None:
    max_len = max((len(d) for d in docs), default=0)
    if window > max_len:
        raise BaselineError(
            f"window {window} is larger than every document (max length {max_len})")


def _context_pairs(docs: list[np.ndarray], window: int):
    """(contexts padded with -1, context counts, centers, doc index) arrays."""
    ctx_rows, centers, doc_idx = [], [], []
    width = 2 * window
    for di, ids in enumerate(docs):
        n = len(ids)
        if n < 2:
            continue
        for i in range(n):
            lo, hi = max(0, i - window), min(n, i + window + 1)
            ctx = np.concatenate([ids[lo:i], ids[i + 1:hi]])
            row = np.full(width, -1, dtype=np.int64)
            row[: len(ctx)] = ctx
            ctx_rows.append(row)
            centers.append(ids[i])
            doc_idx.append(di)
    if not ctx_rows:
        raise BaselineError("no training pairs: corpus has no multi-token documents")
    return (np.stack(ctx_rows), np.array(centers, dtype=np.int64),
            np.array(doc_idx, dtype=np.int64))


def _noise_distribution(docs: list[np.ndarray], vocab_size: int) -> np.ndarray:
    counts = np.zeros(vocab_size)
    for ids in docs:
        np.add.at(counts, ids, 1.0)
    probs = counts ** 0.75
    total = probs.sum()
    if total == 0:
        raise BaselineError("empty corpus")
    return probs / total


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30.0, 30.0)))


def _mean_context(table: np.ndarray, contexts: np.ndarray):
    """Mean of table rows per context row, ignoring -1 padding."""
    safe = np.maximum(contexts, 0)
    gathered = table[safe]
    valid = (contexts >= 0)[:, :, None]
    counts = valid.sum(axis=1)
    return (gathered * valid).sum(axis=1) / counts, counts[:, 0]


def _ns_step(h, centers, negatives, out, lr):
    """One negative-sampling step; returns (d_h, loss_sum) and updates `out`."""
    targets = np.concatenate([centers[:, None], negatives], axis=1)  # (P, 1+k)
    tvecs = out[targets]                                             # (P,1+k,d)
    scores = _sigmoid(np.einsum("pd,pkd->pk", h, tvecs))
    labels = np.zeros_like(scores)
    labels[:, 0] = 1.0
    err = scores - labels
    loss = -(np.log(np.maximum(scores[:, 0], 1e-12)).sum()
             + np.log(np.maximum(1.0 - scores[:, 1:], 1e-12)).sum())
    d_h = np.einsum("pk,pkd->pd", err, tvecs)
    d_t = err[:, :, None] * h[:, None, :]
    np.add.at(out, targets, -lr * d_t)
    return d_h, loss


# ----------------------------------------------------------------------- CBOW

def train_cbow(dataset: Dataset, hp: BaselineHyperparams,
               vocab: Vocabulary | None = None) -> EmbeddingMatrix:
    """Context-average predicts the center token via negative sampling."""
    hp.validate()
    if len(dataset) == 0:
        raise BaselineError("empty corpus")
    if vocab is None:
        vocab = build_vocab(dataset, min_count=1)
    docs = _doc_ids(dataset, vocab)
    _check_window(docs, hp.window)
    V = len(vocab)
    rng = rng_stream(hp.seed, STREAM_INIT)
    vectors = (rng.random((V, hp.dim)) - 0.5) / hp.dim
    out = np.zeros((V, hp.dim))
    emb = EmbeddingMatrix(CBOW, vocab, vectors, hp, out_vectors=out)
    if hp.epochs == 0:
        return emb
    contexts, centers, _ = _context_pairs(docs, hp.window)
    noise = _noise_distribution(docs, V)
    n_pairs = len(centers)
    total_steps = hp.epochs * ((n_pairs + hp.batch_pairs - 1) // hp.batch_pairs)
    step = 0
    for epoch in range(hp.epochs):
        order = rng_stream(hp.seed, STREAM_SHUFFLE, epoch).permutation(n_pairs)
        neg_rng = rng_stream(hp.seed, STREAM_NEG, epoch)
        epoch_loss = 0.0
        for start in range(0, n_pairs, hp.batch_pairs):
            rows = order[start:start + hp.batch_pairs]
            lr = hp.lr * max(1e-4, 1.0 - step / total_steps)
            step += 1
            ctx = contexts[rows]
            h, counts = _mean_context(vectors, ctx)
            negatives = neg_rng.choice(V, size=(len(rows), hp.negatives), p=noise)
            d_h, loss = _ns_step(h, centers[rows], negatives, out, lr)
            epoch_loss += loss
            spread = -lr * d_h / counts[:, None]
            valid = ctx >= 0
            np.add.at(vectors, np.maximum(ctx, 0),
                      spread[:, None, :] * valid[:, :, None])
        emb.loss_trace.append(epoch_loss / n_pairs)
    return emb


# ---------------------------------------------------------------------- GloVe

def _cooccurrence(docs: list[np.ndarray], window: int, vocab_size: int):
    """Symmetric co-occurrence with 1/distance weighting."""
    acc: dict[tuple[int, int], float] = {}
    for ids in docs:
        n = len(ids)
        for i in range(n):
            for j in range(i + 1, min(n, i + window + 1)):
                w = 1.0 / (j - i)
                a, b = int(ids[i]), int(ids[j])
                acc[(a, b)] = acc.get((a, b), 0.0) + w
                acc[(b, a)] = acc.get((b, a), 0.0) + w
    if not acc:
        raise BaselineError("co-occurrence matrix is empty")
    keys = np.array(sorted(acc), dtype=np.int64)
    vals = np.array([acc[tuple(k)] for k in keys])
    return keys[:, 0], keys[:, 1], vals


def glove_weight(x: np.ndarray | float, x_max: float, alpha: float):
    """f(x) = (x / x_max)^alpha for x < x_max, else 1."""
    return np.minimum(np.asarray(x, dtype=float) / x_max, 1.0) ** alpha


def glove_objective(w, wt, b, bt, rows, cols, vals, x_max, alpha) -> float:
    resid = (w[rows] * wt[cols]).sum(axis=1) + b[rows] + bt[cols] - np.log(vals)
    return float((glove_weight(vals, x_max, alpha) * resid ** 2).sum())


def train_glove(dataset: Dataset, hp: BaselineHyperparams,
                vocab: Vocabulary | None = None) -> EmbeddingMatrix:
    """Weighted least squares on log co-occurrence, plain decayed SGD.

    Final token vector is w + w-tilde.
    """
    hp.validate()
    if len(dataset) == 0:
        raise BaselineError("empty corpus")
    if vocab is None:
        vocab = build_vocab(dataset, min_count=1)
    docs = _doc_ids(dataset, vocab)
    rows, cols, vals = _cooccurrence(docs, hp.window, len(vocab))
    V = len(vocab)
    rng = rng_stream(hp.seed, STREAM_INIT)
    w = (rng.random((V, hp.dim)) - 0.5) / hp.dim
    wt = (rng.random((V, hp.dim)) - 0.5) / hp.dim
    b = np.zeros(V)
    bt = np.zeros(V)
    fw = glove_weight(vals, hp.glove_x_max, hp.glove_alpha)
    logx = np.log(vals)
    n = len(vals)
    emb = EmbeddingMatrix(GLOVE, vocab, w + wt, hp)
    for epoch in range(hp.epochs):
        order = rng_stream(hp.seed, STREAM_SHUFFLE, epoch).permutation(n)
        lr = hp.lr / (1.0 + 0.1 * epoch)
        for start in range(0, n, hp.batch_pairs):
            sel = order[start:start + hp.batch_pairs]
            r, c = rows[sel], cols[sel]
            resid = (w[r] * wt[c]).sum(axis=1) + b[r] + bt[c] - logx[sel]
            g = 2.0 * fw[sel] * resid
            dw = g[:, None] * wt[c]
            dwt = g[:, None] * w[r]
            np.add.at(w, r, -lr * dw)
            np.add.at(wt, c, -lr * dwt)
            np.add.at(b, r, -lr * g)
            np.add.at(bt, c, -lr * g)
        emb.loss_trace.append(
            glove_objective(w, wt, b, bt, rows, cols, vals,
                            hp.glove_x_max, hp.glove_alpha))
    emb.vectors = w + wt
    return emb


# ------------------------------------------------------------------- fastText

def char_ngrams(token: str, n_min: int, n_max: int) -> list[str]:
    """Raw character n-grams; tokens shorter than n_min contribute none."""
    grams = []
    for n in range(n_min, n_max + 1):
        for i in range(len(token) - n + 1):
            grams.append(token[i:i + n])
    return grams


def _fnv1a(s: str) -> int:
    h = 0xcbf29ce484222325
    for byte in s.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001b3) & 0xFFFFFFFFFFFFFFFF
    return h


def bucket_of(gram: str, buckets: int) -> int:
    return _fnv1a(gram) % buckets


def _ngram_index(vocab: Vocabulary, hp: BaselineHyperparams):
    """Padded (V, max_n) bucket-id matrix; -1 padding, plus per-token counts."""
    per_token = []
    for idx in range(len(vocab)):
        tok = vocab.token(idx)
        grams = [] if idx < N_SPECIALS else char_ngrams(tok, hp.ngram_min, hp.ngram_max)
        per_token.append([bucket_of(g, hp.buckets) for g in grams])
    width = max(1, max(len(g) for g in per_token))
    mat = np.full((len(vocab), width), -1, dtype=np.int64)
    for i, grams in enumerate(per_token):
        mat[i, : len(grams)] = grams
    return mat, (mat >= 0).sum(axis=1)


def _fasttext_token_table(vectors, buckets_table, ngram_mat, ngram_counts):
    """rep(token) = word vector + mean of its n-gram bucket vectors."""
    gathered = buckets_table[np.maximum(ngram_mat, 0)]
    valid = (ngram_mat >= 0)[:, :, None]
    sums = (gathered * valid).sum(axis=1)
    denom = np.maximum(ngram_counts, 1)[:, None]
    return vectors + sums / denom


def train_fasttext(dataset: Dataset, hp: BaselineHyperparams,
                   vocab: Vocabulary | None = None) -> EmbeddingMatrix:
    """CBOW objective where each token's input vector is composed from its
    whole-word vector plus the mean of its character-n-gram bucket vectors."""
    hp.validate()
    if hp.buckets < 1:
        raise BaselineError("buckets must be >= 1")
    if len(dataset) == 0:
        raise BaselineError("empty corpus")
    if vocab is None:
        vocab = build_vocab(dataset, min_count=1)
    docs = _doc_ids(dataset, vocab)
    _check_window(docs, hp.window)
    V = len(vocab)
    rng = rng_stream(hp.seed, STREAM_INIT)
    vectors = (rng.random((V, hp.dim)) - 0.5) / hp.dim
    buckets = (rng.random((hp.buckets, hp.dim)) - 0.5) / hp.dim
    out = np.zeros((V, hp.dim))
    ngram_mat, ngram_counts = _ngram_index(vocab, hp)
    emb = EmbeddingMatrix(FASTTEXT, vocab, vectors, hp, ngram_buckets=buckets,
                          out_vectors=out)
    if hp.epochs == 0:
        return emb
    contexts, centers, _ = _context_pairs(docs, hp.window)
    noise = _noise_distribution(docs, V)
    n_pairs = len(centers)
    total_steps = hp.epochs * ((n_pairs + hp.batch_pairs - 1) // hp.batch_pairs)
    step = 0
    for epoch in range(hp.epochs):
        order = rng_stream(hp.seed, STREAM_SHUFFLE, epoch).permutation(n_pairs)
        neg_rng = rng_stream(hp.seed, STREAM_NEG, epoch)
        epoch_loss = 0.0
        for start in range(0, n_pairs, hp.batch_pairs):
            rows = order[start:start + hp.batch_pairs]
            lr = hp.lr * max(1e-4, 1.0 - step / total_steps)
            step += 1
            rep = _fasttext_token_table(vectors, buckets, ngram_mat, ngram_counts)
            ctx = contexts[rows]
            h, counts = _mean_context(rep, ctx)
            negatives = neg_rng.choice(V, size=(len(rows), hp.negatives), p=noise)
            d_h, loss = _ns_step(h, centers[rows], negatives, out, lr)
            epoch_loss += loss
            spread = -lr * d_h / counts[:, None]           # grad wrt token rep
            valid = ctx >= 0
            contrib = spread[:, None, :] * valid[:, :, None]
            safe_ctx = np.maximum(ctx, 0)
            np.add.at(vectors, safe_ctx, contrib)
            # n-gram share: each bucket of a token gets grad / n_grams(token)
            tok_counts = np.maximum(ngram_counts[safe_ctx], 1)[:, :, None]
            gram_ids = ngram_mat[safe_ctx]                 # (P, C, width)
            gram_valid = (gram_ids >= 0)[:, :, :, None] & valid[:, :, None, None]
            gram_contrib = (contrib / tok_counts)[:, :, None, :] * gram_valid
            np.add.at(buckets, np.maximum(gram_ids, 0), gram_contrib)
        emb.loss_trace.append(epoch_loss / n_pairs)
    return emb


# -------------------------------------------------------------------- doc2vec

def train_doc2vec(dataset: Dataset, hp: BaselineHyperparams,
                  vocab: Vocabulary | None = None) -> EmbeddingMatrix:
    """PV-DM with the document vector averaged into the context."""
    hp.validate()
    if len(dataset) == 0:
        raise BaselineError("empty corpus")
    if vocab is None:
        vocab = build_vocab(dataset, min_count=1)
    docs = _doc_ids(dataset, vocab)
    _check_window(docs, hp.window)
    V = len(vocab)
    rng = rng_stream(hp.seed, STREAM_INIT)
    vectors = (rng.random((V, hp.dim)) - 0.5) / hp.dim
    dvecs = (rng.random((len(docs), hp.dim)) - 0.5) / hp.dim
    out = np.zeros((V, hp.dim))
    emb = EmbeddingMatrix(DOC2VEC, vocab, vectors, hp, out_vectors=out,
                          doc_vectors=dvecs)
    emb.noise = _noise_distribution(docs, V)
    if hp.epochs == 0:
        return emb
    contexts, centers, doc_idx = _context_pairs(docs, hp.window)
    noise = emb.noise
    n_pairs = len(centers)
    total_steps = hp.epochs * ((n_pairs + hp.batch_pairs - 1) // hp.batch_pairs)
    step = 0
    for epoch in range(hp.epochs):
        order = rng_stream(hp.seed, STREAM_SHUFFLE, epoch).permutation(n_pairs)
        neg_rng = rng_stream(hp.seed, STREAM_NEG, epoch)
        epoch_loss = 0.0
        for start in range(0, n_pairs, hp.batch_pairs):
            rows = order[start:start + hp.batch_pairs]
            lr = hp.lr * max(1e-4, 1.0 - step / total_steps)
            step += 1
            ctx = contexts[rows]
            di = doc_idx[rows]
            safe = np.maximum(ctx, 0)
            valid = (ctx >= 0)[:, :, None]
            counts = valid.sum(axis=1)[:, 0] + 1           # +1 for the doc vector
            h = ((vectors[safe] * valid).sum(axis=1) + dvecs[di]) / counts[:, None]
            negatives = neg_rng.choice(V, size=(len(rows), hp.negatives), p=noise)
            d_h, loss = _ns_step(h, centers[rows], negatives, out, lr)
            epoch_loss += loss
            spread = -lr * d_h / counts[:, None]
            np.add.at(vectors, safe, spread[:, None, :] * valid)
            np.add.at(dvecs, di, spread)
        emb.loss_trace.append(epoch_loss / n_pairs)
    return emb


def infer_doc2vec(emb: EmbeddingMatrix, text: str) -> np.ndarray:
    """Embed a document by gradient steps on a fresh doc vector with the word
    and output tables frozen; deterministic given (hp.seed, text)."""
    if emb.kind != DOC2VEC:
        raise BaselineError("inference requires a doc2vec model")
    ids = np.array([emb.vocab.lookup(t) for t in tokenize(text)], dtype=np.int64)
    if len(ids) == 0:
        raise BaselineError("cannot infer a vector for an empty document")
    hp = emb.hp
    rng = rng_stream(hp.seed, STREAM_INFER, stable_text_key(text))
    dvec = (rng.random(hp.dim) - 0.5) / hp.dim
    if hp.epochs == 0 or len(ids) < 2:
        return dvec
    contexts, centers, _ = _context_pairs([ids], hp.window)
    out = emb.out_vectors
    vectors = emb.vectors
    n_pairs = len(centers)
    total_steps = hp.epochs * n_pairs
    step = 0
    for epoch in range(hp.epochs):
        for p in range(n_pairs):
            lr = hp.lr * max(1e-4, 1.0 - step / total_steps)
            step += 1
            ctx = contexts[p]
            valid = ctx >= 0
            count = valid.sum() + 1
            h = (vectors[ctx[valid]].sum(axis=0) + dvec) / count
            targets = np.concatenate([[centers[p]],
                                      rng.choice(len(emb.vocab), size=hp.negatives,
                                                 p=emb.noise)])
            tvecs = out[targets]
            scores = _sigmoid(tvecs @ h)
            labels = np.zeros(len(targets))
            labels[0] = 1.0
            d_h = (scores - labels) @ tvecs
            dvec -= lr * d_h / count
    return dvec


# ------------------------------------------------------------------ embedding

def embed_document(emb: EmbeddingMatrix, text: str) -> np.ndarray:
    """Document vector: unweighted mean of token vectors (order-invariant)
    for word-level models, gradient inference for doc2vec."""
    if emb.kind == DOC2VEC:
        return infer_doc2vec(emb, text)
    tokens = tokenize(text)
    if not tokens:
        return np.zeros(emb.dim)
    ids = np.array([emb.vocab.lookup(t) for t in tokens], dtype=np.int64)
    if emb.kind == FASTTEXT:
        vecs = []
        for tok, idx in zip(tokens, ids):
            grams = char_ngrams(tok, emb.hp.ngram_min, emb.hp.ngram_max)
            base = emb.vectors[idx] if idx != UNK else np.zeros(emb.dim)
            if grams:
                bucket_ids = [bucket_of(g, emb.hp.buckets) for g in grams]
                base = base + emb.ngram_buckets[bucket_ids].mean(axis=0)
            vecs.append(base)
        return np.mean(vecs, axis=0)
    return emb.vectors[ids].mean(axis=0)


def embed_documents(emb: EmbeddingMatrix, texts: Sequence[str]) -> np.ndarray:
    return np.stack([embed_document(emb, t) for t in texts])


TRAINERS = {CBOW: train_cbow, GLOVE: train_glove, FASTTEXT: train_fasttext,
            DOC2VEC: train_doc2vec}
