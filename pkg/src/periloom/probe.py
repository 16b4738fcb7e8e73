"""Qualitative probes: single-token fill-mask for encoder models and greedy
sentence completion for decoder models. Deterministic by construction
(argmax decoding, ties broken by token id)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import text as T
from . import transformer as TF
from .finetune import FineTunedModel


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeResult:
    prompt: str
    candidates: tuple[tuple[str, float], ...] = ()   # fill-mask: (token, prob) desc
    continuation: str = ""                           # completion text
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"prompt": self.prompt,
                "candidates": [[t, p] for t, p in self.candidates],
                "continuation": self.continuation,
                "provenance": dict(self.provenance)}


def _params_of(model) -> TF.ModelParams:
    return model.params if isinstance(model, FineTunedModel) else model


def _provenance(params: TF.ModelParams) -> dict:
    return {"variant": params.config.variant,
            "vocab_hash": params.meta.get("vocab_hash", "")}


def fill_mask(model, vocab: T.Vocabulary, prompt: str, k: int = 5) -> ProbeResult:
    """Top-k tokens for the single [MASK] slot, by softmax probability at the
    mask position; ties broken by token id."""
    params = _params_of(model)
    if params.config.variant != TF.ENCODER:
        raise ProbeError("fill-mask needs an encoder model")
    if k < 1:
        raise ProbeError("k must be >= 1")
    tokens = T.tokenize(prompt)
    n_masks = sum(1 for t in tokens if vocab.lookup(t) == T.MASK)
    if n_masks != 1:
        raise ProbeError(f"prompt must contain exactly one [MASK], found {n_masks}")
    seq = T.encode(prompt, vocab, params.config.max_len, T.ENCODER)
    mask_positions = np.nonzero(seq.ids == T.MASK)[0]
    if len(mask_positions) != 1:
        raise ProbeError("the [MASK] token was truncated away by max_len")
    pos = int(mask_positions[0])
    hidden, _ = TF.forward_hidden(params, seq.ids[None, :],
                                  seq.attention_mask[None, :])
    logits = TF.lm_logits(params, hidden)[0, pos]
    shifted = logits - logits.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    k = min(k, len(vocab))
    order = np.lexsort((np.arange(len(probs)), -probs))[:k]
    candidates = tuple((vocab.token(int(i)), float(probs[i])) for i in order)
    return ProbeResult(prompt, candidates=candidates, provenance=_provenance(params))


def complete(model, vocab: T.Vocabulary, prompt: str,
             max_new_tokens: int = 16) -> ProbeResult:
    """Greedy argmax continuation; stops at EOS, the token budget, or the
    model's maximum sequence length."""
    params = _params_of(model)
    if params.config.variant != TF.DECODER:
        raise ProbeError("completion needs a decoder model")
    if max_new_tokens < 1:
        raise ProbeError("max_new_tokens must be >= 1")
    tokens = T.tokenize(prompt)
    if not tokens:
        raise ProbeError("prompt must be non-empty")
    ids = [T.BOS] + [vocab.lookup(t) for t in tokens]
    max_len = params.config.max_len
    if len(ids) > max_len:
        raise ProbeError(f"prompt length {len(ids)} exceeds max_len {max_len}")
    generated: list[int] = []
    while len(generated) < max_new_tokens and len(ids) < max_len:
        arr = np.array(ids, dtype=np.int64)[None, :]
        mask = np.ones_like(arr)
        hidden, _ = TF.forward_hidden(params, arr, mask)
        logits = TF.lm_logits(params, hidden)[0, -1]
        nxt = int(np.argmax(logits))  # first occurrence wins ties: lowest id
        if nxt == T.EOS:
            break
        ids.append(nxt)
        generated.append(nxt)
    return ProbeResult(prompt, continuation=T.decode(generated, vocab),
                       provenance=_provenance(params))
