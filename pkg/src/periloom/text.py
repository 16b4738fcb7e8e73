"""Tokenization, vocabulary, id encoding, and MLM mask corruption.

Tokenization is lowercased whitespace splitting: the corpus is synthetic
with a closed vocabulary, so subword machinery would only add noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Dataset
from .util import STREAM_MLM, atomic_write_text, config_hash, rng_stream

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BOS]", "[EOS]")
PAD, UNK, CLS, SEP, MASK, BOS, EOS = range(len(SPECIALS))
N_SPECIALS = len(SPECIALS)

ENCODER = "encoder"
DECODER = "decoder"


class TextError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Dense token<->id maps; specials occupy the lowest ids in fixed order."""

    id_to_token: tuple[str, ...]
    min_count: int

    def __post_init__(self):
        object.__setattr__(self, "_token_to_id",
                           {t: i for i, t in enumerate(self.id_to_token)})
        lowered = {s.lower(): i for i, s in enumerate(SPECIALS)}
        object.__setattr__(self, "_special_lookup", lowered)

    def __len__(self):
        return len(self.id_to_token)

    @property
    def n_regular(self) -> int:
        return len(self.id_to_token) - N_SPECIALS

    def lookup(self, token: str) -> int:
        tok = token.lower()
        special = self._special_lookup.get(tok)
        if special is not None:
            return special
        return self._token_to_id.get(tok, UNK)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    def hash(self) -> str:
        return config_hash({"tokens": list(self.id_to_token), "min_count": self.min_count})

    def save(self, path) -> None:
        payload = {"specials": list(SPECIALS),
                   "tokens": list(self.id_to_token[N_SPECIALS:]),
                   "min_count": self.min_count}
        atomic_write_text(path, json.dumps(payload, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if tuple(payload.get("specials", ())) != SPECIALS:
            raise TextError(f"vocabulary file {path}: special tokens do not match this build")
        return cls(SPECIALS + tuple(payload["tokens"]), int(payload["min_count"]))


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(dataset: Dataset, min_count: int = 1) -> Vocabulary:
    """Frequency-filtered vocabulary, ordered by (frequency desc, token asc)."""
    if min_count < 1:
        raise TextError("min_count must be >= 1")
    if len(dataset) == 0:
        raise TextError("cannot build a vocabulary from an empty dataset")
    counts: dict[str, int] = {}
    for note in dataset:
        for tok in tokenize(note.text):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(SPECIALS + tuple(kept), min_count)


@dataclass(frozen=True)
class TokenSeq:
    """Fixed-length id sequence; positions >= length are PAD with mask 0."""

    ids: np.ndarray        # (max_len,) int64
    attention_mask: np.ndarray  # (max_len,) int64 of 0/1
    length: int


def encode(text: str, vocab: Vocabulary, max_len: int, style: str = ENCODER) -> TokenSeq:
    """Wrap as CLS..SEP (encoder) or BOS..EOS (decoder); truncation keeps the prefix."""
    if max_len < 3:
        raise TextError("max_len must be >= 3")
    if style not in (ENCODER, DECODER):
        raise TextError(f"unknown style {style!r}")
    open_id, close_id = (CLS, SEP) if style == ENCODER else (BOS, EOS)
    body = [vocab.lookup(t) for t in tokenize(text)][: max_len - 2]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[0] = open_id
    ids[1:1 + len(body)] = body
    ids[1 + len(body)] = close_id
    length = len(body) + 2
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:length] = 1
    return TokenSeq(ids, mask, length)


def decode(ids: Sequence[int] | np.ndarray, vocab: Vocabulary) -> str:
    """Inverse of encode up to lowercasing/truncation: drops special tokens."""
    return " ".join(vocab.token(int(i)) for i in ids if int(i) >= N_SPECIALS)


@dataclass(frozen=True)
class MaskedSeq:
    """MLM-corrupted sequence: targets are defined exactly at flagged positions."""

    ids: np.ndarray       # (max_len,) post-corruption
    target_ids: np.ndarray  # (max_len,) pre-corruption ids; PAD where unflagged
    flags: np.ndarray     # (max_len,) bool
    attention_mask: np.ndarray
    length: int


def apply_mlm_mask(seq: TokenSeq, vocab: Vocabulary, rate: float,
                   seed: int, *indices: int) -> MaskedSeq:
    """BERT-style corruption: select eligible positions iid at `rate`, then
    replace 80% with [MASK], 10% with a random regular token, 10% unchanged.

    Only regular tokens are eligible (never PAD/CLS/SEP/BOS/EOS/UNK). When
    rate > 0 and at least one position is eligible, selection is resampled
    until it is non-empty.
    """
    if not 0.0 <= rate <= 1.0:
        raise TextError("rate must be in [0, 1]")
    rng = rng_stream(seed, STREAM_MLM, *indices)
    eligible = seq.ids >= N_SPECIALS
    ids = seq.ids.copy()
    flags = np.zeros_like(eligible)
    if rate > 0.0 and eligible.any():
        while not flags.any():
            flags = eligible & (rng.random(len(ids)) < rate)
        u = rng.random(len(ids))
        mask_it = flags & (u < 0.8)
        randomize = flags & (u >= 0.8) & (u < 0.9)
        ids[mask_it] = MASK
        n_rand = int(randomize.sum())
        if n_rand and vocab.n_regular > 0:
            ids[randomize] = rng.integers(N_SPECIALS, len(vocab), size=n_rand)
    targets = np.where(flags, seq.ids, PAD)
    return MaskedSeq(ids, targets, flags, seq.attention_mask.copy(), seq.length)


def encode_batch(texts: Sequence[str], vocab: Vocabulary, max_len: int,
                 style: str = ENCODER) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (ids, attention_mask) matrices for a list of documents."""
    seqs = [encode(t, vocab, max_len, style) for t in texts]
    return (np.stack([s.ids for s in seqs]),
            np.stack([s.attention_mask for s in seqs]))
