"""Finite-difference oracle used by the transformer and acceptance tests.

Central differences with eps=1e-4 in f64. The analytic gradients are exact,
so the only error sources are FD truncation and roundoff; relative error is
measured per coordinate with a small floor so structurally-zero gradients
(e.g. positions past the batch's sequence length) compare as zero.
"""

import numpy as np

from periloom import corpus as C
from periloom import finetune as FT
from periloom import text as T
from periloom import transformer as TF

EPS = 1e-4
# Central-difference truncation is O(eps^2 * f''') ~ 2e-8 absolute here, so
# comparing at rel <= 1e-5 needs a denominator floor: gradients above the
# floor are compared relatively, tiny ones absolutely at floor * 1e-5.
REL_FLOOR = 5e-2


def tiny_vocab(n_regular=12):
    tokens = tuple(f"w{i}" for i in range(n_regular))
    return T.Vocabulary(T.SPECIALS + tokens, min_count=1)


def tiny_setup(variant, *, nsp=False, n_layers=2, seed=0):
    """f64 model + combined-loss batch: self objective plus two task heads
    (binary and 3-class), with one task observed on only a subset of rows."""
    vocab = tiny_vocab()
    arch = TF.ArchConfig(variant, n_layers=n_layers, d_model=16, n_heads=2,
                         d_ff=24, max_len=10, vocab_size=len(vocab),
                         dropout=0.0, nsp_head=nsp, seed=seed)
    params = TF.init_params(arch, dtype=np.float64)

    rng = np.random.default_rng(seed + 100)
    texts = [" ".join(rng.choice([f"w{i}" for i in range(12)], size=n))
             for n in (7, 5, 8)]
    style = T.ENCODER if variant == TF.ENCODER else T.DECODER
    ids, mask = T.encode_batch(texts, vocab, arch.max_len, style)

    if variant == TF.ENCODER:
        corrupt = np.empty_like(ids)
        targets = np.empty_like(ids)
        flags = np.zeros(ids.shape, dtype=bool)
        for j in range(len(texts)):
            seq = T.TokenSeq(ids[j], mask[j], int(mask[j].sum()))
            ms = T.apply_mlm_mask(seq, vocab, 0.3, seed, j)
            corrupt[j], targets[j], flags[j] = ms.ids, ms.target_ids, ms.flags
        self_batch = ("mlm", corrupt, mask, targets, flags)
        if nsp:
            self_batch = self_batch + (np.array([0, 1, 1]),)
    else:
        self_batch = ("causal", ids, mask)

    heads = {
        "t1": FT.init_head(arch.d_model, C.BINARY, seed, 0, dtype=np.float64),
        "t2": FT.init_head(arch.d_model, C.MULTICLASS, seed, 1, dtype=np.float64,
                           n_classes=3),
    }
    # Push ReLU pre-activations away from zero so the finite-difference
    # oracle never straddles the kink; half the units stay firmly dead.
    for head in heads.values():
        k = head.tensors["b1"].shape[0]
        head.tensors["b1"] += np.where(np.arange(k) % 2 == 0, 0.3, -0.3)

    terms = [
        ("t1", ids[:2], mask[:2], np.array([1.0, 0.0]), 0.7),   # row 2 missing
        ("t2", ids, mask, np.array([0.0, 2.0, 1.0]), 1.3),
    ]
    return params, heads, self_batch, terms, vocab


def flatten_tensors(params, heads):
    out = dict(params.tensors)
    for task, head in heads.items():
        for name, arr in head.tensors.items():
            out[f"head.{task}.{name}"] = arr
    return out


def check_gradients(params, heads, self_batch, terms, *, coords_per_tensor=200,
                    seed=0):
    """Max relative error between analytic and central-difference gradients,
    sampled over up to `coords_per_tensor` coordinates of every tensor."""
    _, _, analytic = FT.step_loss_and_grads(params, heads, self_batch, terms,
                                            dropout_seed=None)

    def total_loss():
        total, _, _ = FT.step_loss_and_grads(params, heads, self_batch, terms,
                                             dropout_seed=None)
        return total

    tensors = flatten_tensors(params, heads)
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_name = None
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if n <= coords_per_tensor else rng.choice(
            n, size=coords_per_tensor, replace=False)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + EPS
            up = total_loss()
            flat[idx] = orig - EPS
            down = total_loss()
            flat[idx] = orig
            numeric = (up - down) / (2 * EPS)
            a = analytic[name].reshape(-1)[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            if rel > worst:
                worst, worst_name = rel, (name, int(idx), float(a), float(numeric))
    return worst, worst_name
