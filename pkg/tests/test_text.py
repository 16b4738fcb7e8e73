import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from periloom.corpus import ClinicalNote, Dataset, TaskSpec
from periloom.text import (BOS, CLS, EOS, MASK, N_SPECIALS, PAD, SEP, SPECIALS, UNK,
                           DECODER, ENCODER, MaskedSeq, TextError, TokenSeq,
                           Vocabulary, apply_mlm_mask, build_vocab, decode, encode)


def dataset_of(*texts):
    notes = [ClinicalNote(f"d{i}", t, {"t": 0 if i else 1}) for i, t in enumerate(texts)]
    return Dataset(notes, (TaskSpec("t"),))


# ----------------------------------------------------------------- vocabulary

def test_min_count_filters_to_unk():
    vocab = build_vocab(dataset_of("a a b"), min_count=2)
    assert len(vocab) == N_SPECIALS + 1
    assert vocab.lookup("a") == N_SPECIALS
    assert vocab.lookup("b") == UNK


def test_min_count_one_single_token():
    vocab = build_vocab(dataset_of("x"), min_count=1)
    assert len(vocab) == N_SPECIALS + 1


def test_frequency_then_lexicographic_order():
    vocab = build_vocab(dataset_of("b b c a a z"), min_count=1)
    # a and b tie at 2 -> lexicographic; c and z tie at 1 -> lexicographic
    assert vocab.id_to_token[N_SPECIALS:] == ("a", "b", "c", "z")


def test_specials_occupy_lowest_ids():
    vocab = build_vocab(dataset_of("q"), min_count=1)
    assert vocab.id_to_token[:N_SPECIALS] == SPECIALS
    assert (PAD, UNK, CLS, SEP, MASK, BOS, EOS) == tuple(range(7))


def test_lookup_inverse_round_trip():
    vocab = build_vocab(dataset_of("alpha beta gamma"), min_count=1)
    for idx in range(len(vocab)):
        assert vocab.lookup(vocab.token(idx)) == idx


def test_empty_dataset_errors():
    with pytest.raises(TextError):
        build_vocab(Dataset([], (TaskSpec("t"),)), min_count=1)


def test_vocab_json_round_trip(tmp_path):
    vocab = build_vocab(dataset_of("knee hip knee"), min_count=1)
    path = tmp_path / "vocab.json"
    vocab.save(path)
    loaded = Vocabulary.load(path)
    assert loaded.id_to_token == vocab.id_to_token
    assert loaded.min_count == vocab.min_count
    assert loaded.hash() == vocab.hash()


# ------------------------------------------------------------------- encoding

def test_encoder_wrapping_example():
    vocab = build_vocab(dataset_of("knee arthroplasty"), min_count=1)
    seq = encode("knee arthroplasty", vocab, max_len=8, style=ENCODER)
    knee, arthro = vocab.lookup("knee"), vocab.lookup("arthroplasty")
    assert seq.ids.tolist() == [CLS, knee, arthro, SEP, PAD, PAD, PAD, PAD]
    assert seq.attention_mask.tolist() == [1, 1, 1, 1, 0, 0, 0, 0]
    assert seq.length == 4


def test_decoder_wrapping():
    vocab = build_vocab(dataset_of("knee"), min_count=1)
    seq = encode("knee", vocab, max_len=4, style=DECODER)
    assert seq.ids.tolist() == [BOS, vocab.lookup("knee"), EOS, PAD]


def test_truncation_keeps_prefix_and_ends_with_close_token():
    vocab = build_vocab(dataset_of("a b c d e f g h"), min_count=1)
    for style, close in ((ENCODER, SEP), (DECODER, EOS)):
        seq = encode("a b c d e f g h", vocab, max_len=5, style=style)
        assert len(seq.ids) == 5
        assert seq.ids[-1] == close
        assert decode(seq.ids, vocab) == "a b c"


def test_oov_becomes_unk():
    vocab = build_vocab(dataset_of("hip"), min_count=1)
    seq = encode("hip unicorn", vocab, max_len=6)
    assert seq.ids[2] == UNK


def test_lowercasing():
    vocab = build_vocab(dataset_of("knee"), min_count=1)
    assert encode("KNEE", vocab, 5).ids[1] == vocab.lookup("knee")


def test_empty_text_yields_specials_only():
    vocab = build_vocab(dataset_of("x"), min_count=1)
    seq = encode("", vocab, 4)
    assert seq.ids.tolist() == [CLS, SEP, PAD, PAD]


def test_max_len_too_small_errors():
    vocab = build_vocab(dataset_of("x"), min_count=1)
    with pytest.raises(TextError):
        encode("x", vocab, 2)


@given(st.lists(st.sampled_from(["knee", "hip", "graft", "repair"]),
                min_size=0, max_size=12))
@settings(max_examples=60, deadline=None)
def test_decode_recovers_truncated_lowercase_text(tokens):
    vocab = build_vocab(dataset_of("knee hip graft repair"), min_count=1)
    text = " ".join(tokens)
    seq = encode(text, vocab, max_len=8)
    assert decode(seq.ids, vocab) == " ".join(tokens[:6])


# -------------------------------------------------------------------- masking

def make_seq(vocab, text, max_len=12):
    return encode(text, vocab, max_len)


def test_rate_zero_no_flags():
    vocab = build_vocab(dataset_of("a b c"), min_count=1)
    seq = make_seq(vocab, "a b c")
    ms = apply_mlm_mask(seq, vocab, 0.0, seed=1)
    assert not ms.flags.any()
    assert ms.ids.tolist() == seq.ids.tolist()


def test_specials_never_flagged_and_targets_match():
    vocab = build_vocab(dataset_of("a b c d e"), min_count=1)
    seq = make_seq(vocab, "a b c d e")
    ms = apply_mlm_mask(seq, vocab, 1.0, seed=2)
    assert ms.flags[seq.ids == CLS].sum() == 0
    assert ms.flags[seq.ids == SEP].sum() == 0
    assert ms.flags[seq.ids == PAD].sum() == 0
    assert (ms.flags == (seq.ids >= N_SPECIALS)).all()
    assert (ms.target_ids[ms.flags] == seq.ids[ms.flags]).all()
    assert (ms.target_ids[~ms.flags] == PAD).all()


def test_at_least_one_position_selected():
    vocab = build_vocab(dataset_of("a"), min_count=1)
    seq = make_seq(vocab, "a", max_len=4)
    for seed in range(40):
        ms = apply_mlm_mask(seq, vocab, 0.01, seed=seed)
        assert ms.flags.sum() >= 1


def test_masking_bit_reproducible():
    vocab = build_vocab(dataset_of("a b c d e f"), min_count=1)
    seq = make_seq(vocab, "a b c d e f")
    a = apply_mlm_mask(seq, vocab, 0.4, seed=9, )
    b = apply_mlm_mask(seq, vocab, 0.4, seed=9)
    assert a.ids.tobytes() == b.ids.tobytes()
    assert a.flags.tobytes() == b.flags.tobytes()
    c = apply_mlm_mask(seq, vocab, 0.4, seed=10)
    assert a.ids.tobytes() != c.ids.tobytes() or a.flags.tobytes() != c.flags.tobytes()


def test_corruption_split_80_10_10():
    # Over ~10,000 eligible positions the realized corruption mix must sit
    # within two points of 80/10/10 (counting oracle).
    vocab = build_vocab(dataset_of(" ".join(f"t{i}" for i in range(30))), min_count=1)
    text = " ".join(f"t{i % 30}" for i in range(28))
    seq = encode(text, vocab, max_len=30)
    n_mask = n_rand = n_keep = n_total = 0
    for trial in range(360):
        ms = apply_mlm_mask(seq, vocab, 1.0, seed=trial)
        flagged = np.where(ms.flags)[0]
        n_total += len(flagged)
        for pos in flagged:
            if ms.ids[pos] == MASK:
                n_mask += 1
            elif ms.ids[pos] == seq.ids[pos]:
                n_keep += 1
            else:
                n_rand += 1
    assert n_total >= 10_000
    assert abs(n_mask / n_total - 0.80) <= 0.02
    # random replacement can coincide with the original token, so a sliver
    # of the 10% random mass shows up as "kept"
    assert abs(n_rand / n_total - 0.10) <= 0.02
    assert abs(n_keep / n_total - 0.10) <= 0.02


def test_invalid_rate_errors():
    vocab = build_vocab(dataset_of("a"), min_count=1)
    with pytest.raises(TextError):
        apply_mlm_mask(make_seq(vocab, "a"), vocab, 1.5, seed=0)
