import numpy as np
import pytest

import gradtools as G
from periloom import finetune as FT
from periloom import probe as PR
from periloom import text as T
from periloom import transformer as TF
from periloom.corpus import ClinicalNote, Dataset, TaskSpec


def encoder_model(seed=0):
    vocab = G.tiny_vocab()
    arch = TF.ArchConfig(TF.ENCODER, n_layers=1, d_model=16, n_heads=2, d_ff=24,
                         max_len=12, vocab_size=len(vocab), seed=seed)
    return TF.init_params(arch), vocab


def decoder_model(seed=0, max_len=12):
    vocab = G.tiny_vocab()
    arch = TF.ArchConfig(TF.DECODER, n_layers=1, d_model=16, n_heads=2, d_ff=24,
                         max_len=max_len, vocab_size=len(vocab), seed=seed)
    return TF.init_params(arch), vocab


# ------------------------------------------------------------------ fill-mask

def test_fill_mask_returns_ranked_candidates():
    params, vocab = encoder_model()
    res = PR.fill_mask(params, vocab, "[MASK] w1 w2 w3", k=4)
    assert len(res.candidates) == 4
    probs = [p for _, p in res.candidates]
    assert probs == sorted(probs, reverse=True)
    assert sum(probs) <= 1.0 + 1e-9


def test_fill_mask_full_vocab_probabilities_sum_to_one():
    params, vocab = encoder_model()
    res = PR.fill_mask(params, vocab, "w1 [MASK] w2", k=len(vocab))
    assert abs(sum(p for _, p in res.candidates) - 1.0) < 1e-6


def test_fill_mask_errors_without_exactly_one_mask():
    params, vocab = encoder_model()
    with pytest.raises(PR.ProbeError, match="exactly one"):
        PR.fill_mask(params, vocab, "w1 w2")
    with pytest.raises(PR.ProbeError, match="exactly one"):
        PR.fill_mask(params, vocab, "[MASK] w1 [MASK]")


def test_fill_mask_top1_matches_forward_argmax():
    params, vocab = encoder_model()
    prompt = "w3 [MASK] w5"
    seq = T.encode(prompt, vocab, 12, T.ENCODER)
    hidden, _ = TF.forward_hidden(params, seq.ids[None, :],
                                  seq.attention_mask[None, :])
    pos = int(np.nonzero(seq.ids == T.MASK)[0][0])
    expected = int(np.argmax(TF.lm_logits(params, hidden)[0, pos]))
    res = PR.fill_mask(params, vocab, prompt, k=1)
    assert res.candidates[0][0] == vocab.token(expected)


def test_fill_mask_rejects_decoder():
    params, vocab = decoder_model()
    with pytest.raises(PR.ProbeError, match="encoder"):
        PR.fill_mask(params, vocab, "[MASK] w1")


def test_fill_mask_accepts_finetuned_model():
    params, vocab = encoder_model()
    model = FT.FineTunedModel(params, {}, {})
    res = PR.fill_mask(model, vocab, "[MASK] w1", k=2)
    assert len(res.candidates) == 2


def test_surgical_prompt_format():
    # the canonical fill-in-the-blank format: "<mask> underwent surgery ..."
    notes = [ClinicalNote(f"d{i}", "patient underwent surgery to remove tumor",
                          {"t": 0}) for i in range(8)]
    ds = Dataset(notes, (TaskSpec("t"),))
    vocab = T.build_vocab(ds)
    arch = TF.ArchConfig(TF.ENCODER, n_layers=1, d_model=16, n_heads=2, d_ff=24,
                         max_len=12, vocab_size=len(vocab), seed=0)
    params = TF.init_params(arch)
    res = PR.fill_mask(params, vocab, "[MASK] underwent surgery to remove tumor.", k=3)
    assert len(res.candidates) == 3


# ----------------------------------------------------------------- completion

def test_complete_deterministic():
    params, vocab = decoder_model()
    a = PR.complete(params, vocab, "w1 w2", max_new_tokens=5)
    b = PR.complete(params, vocab, "w1 w2", max_new_tokens=5)
    assert a.continuation == b.continuation


def test_complete_budget_one_appends_one_token():
    params, vocab = decoder_model()
    res = PR.complete(params, vocab, "w1 w2", max_new_tokens=1)
    assert len(res.continuation.split()) <= 1


def test_complete_prefix_monotone_in_budget():
    params, vocab = decoder_model()
    prev = ""
    for budget in range(1, 7):
        out = PR.complete(params, vocab, "w1", max_new_tokens=budget).continuation
        assert out.startswith(prev)
        prev = out


def test_complete_prompt_at_max_len_minus_one():
    params, vocab = decoder_model(max_len=6)
    res = PR.complete(params, vocab, "w1 w2 w3 w4 w5", max_new_tokens=9)
    assert len(res.continuation.split()) <= 1


def test_complete_prompt_exceeding_max_len_errors():
    params, vocab = decoder_model(max_len=4)
    with pytest.raises(PR.ProbeError, match="max_len"):
        PR.complete(params, vocab, "w1 w2 w3 w4 w5", max_new_tokens=1)


def test_complete_rejects_encoder_and_empty_prompt():
    enc, vocab = encoder_model()
    with pytest.raises(PR.ProbeError, match="decoder"):
        PR.complete(enc, vocab, "w1")
    dec, vocab = decoder_model()
    with pytest.raises(PR.ProbeError, match="non-empty"):
        PR.complete(dec, vocab, "   ")


def test_complete_stops_at_eos_on_memorized_corpus():
    # One-token documents: the decoder learns BOS -> x -> EOS, so greedy
    # completion of "x" terminates well before the budget.
    notes = [ClinicalNote(f"d{i}", "stent", {"t": 0}) for i in range(30)]
    ds = Dataset(notes, (TaskSpec("t"),))
    vocab = T.build_vocab(ds)
    arch = TF.ArchConfig(TF.DECODER, n_layers=1, d_model=32, n_heads=2, d_ff=48,
                         max_len=8, vocab_size=len(vocab), dropout=0.0, seed=1)
    trained = FT.pretrain(arch, ds, FT.FineTuneConfig(epochs=25, lr=3e-3,
                                                      batch_size=8, seed=0), vocab)
    res = PR.complete(trained, vocab, "stent", max_new_tokens=5)
    assert len(res.continuation.split()) < 5
