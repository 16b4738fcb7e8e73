"""The four tuning strategies over a pretrained body, plus their shared
training core: pretrained-only, self-supervised continuation, semi-supervised
with a single lambda-weighted task head, and foundation multi-task tuning
with per-task lambda weights pooled into one loss.

Per-step total loss:  [L_self if enabled] + sum_i lambda_i * L_i,
where each task loss averages only over batch rows whose label for that task
is observed. Each task term runs its own forward/backward over exactly the
gathered observed rows, so rows that are missing for a task cannot perturb
that task's gradients even at the bit level.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import corpus as C
from . import text as T
from . import transformer as TF
from .checkpoint import load_container, save_container
from .util import STREAM_HEAD, STREAM_SHUFFLE, rng_stream

PRETRAINED_ONLY = "pretrained_only"
SELF_SUPERVISED = "self_supervised"
SEMI_SUPERVISED = "semi_supervised"
FOUNDATION = "foundation"
STRATEGIES = (PRETRAINED_ONLY, SELF_SUPERVISED, SEMI_SUPERVISED, FOUNDATION)

MODEL_FORMAT = "finetuned-model"


class FineTuneError(ValueError):
    pass


# ------------------------------------------------------------------ task heads

@dataclass
class TaskHead:
    """Feed-forward head on the pooled hidden state: one ReLU hidden layer of
    width d, identity output (1 unit for binary/regression, C for multiclass)."""

    kind: str
    tensors: dict[str, np.ndarray]  # w1 (d,d), b1 (d,), w2 (d,out), b2 (out,)

    @property
    def out_dim(self) -> int:
        return self.tensors["w2"].shape[1]

    def copy(self) -> "TaskHead":
        return TaskHead(self.kind, {k: v.copy() for k, v in self.tensors.items()})


def init_head(d_model: int, kind: str, seed: int, index: int, dtype=np.float32,
              n_classes: int = 2) -> TaskHead:
    rng = rng_stream(seed, STREAM_HEAD, index)
    out = n_classes if kind == C.MULTICLASS else 1
    t = {
        "w1": rng.normal(0.0, 0.02, size=(d_model, d_model)).astype(dtype),
        "b1": np.zeros(d_model, dtype=dtype),
        "w2": rng.normal(0.0, 0.02, size=(d_model, out)).astype(dtype),
        "b2": np.zeros(out, dtype=dtype),
    }
    return TaskHead(kind, t)


def head_logits(head: TaskHead, x: np.ndarray):
    h_pre = x @ head.tensors["w1"] + head.tensors["b1"]
    h = np.maximum(h_pre, 0.0)
    z = h @ head.tensors["w2"] + head.tensors["b2"]
    return z, (h_pre, h)


def head_loss_grads(head: TaskHead, x: np.ndarray, y: np.ndarray):
    """Mean BCE/CE/MSE over the rows given; returns (loss, dx, head grads)."""
    n = x.shape[0]
    if n == 0:
        raise FineTuneError("task loss over zero observed rows")
    z, (h_pre, h) = head_logits(head, x)
    if head.kind == C.BINARY:
        zf = z[:, 0]
        loss = float(np.mean(np.logaddexp(0.0, -zf) + (1.0 - y) * zf))
        dz = ((1.0 / (1.0 + np.exp(-zf)) - y) / n)[:, None]
    elif head.kind == C.MULTICLASS:
        loss_v, dz = TF.cross_entropy_rows(z, y.astype(np.int64))
        loss = float(loss_v)
    elif head.kind == C.REGRESSION:
        resid = z[:, 0] - y
        loss = float(np.mean(resid ** 2))
        dz = (2.0 * resid / n)[:, None]
    else:
        raise FineTuneError(f"unknown task kind {head.kind!r}")
    dz = dz.astype(x.dtype, copy=False)
    grads = {
        "w2": h.T @ dz,
        "b2": dz.sum(axis=0),
    }
    dh = dz @ head.tensors["w2"].T
    dh_pre = dh * (h_pre > 0.0)
    grads["w1"] = x.T @ dh_pre
    grads["b1"] = dh_pre.sum(axis=0)
    dx = dh_pre @ head.tensors["w1"].T
    return loss, dx, grads


def head_scores(head: TaskHead, x: np.ndarray) -> np.ndarray:
    """Probability scores: sigmoid for binary, softmax max-class prob rows for
    multiclass (full matrix returned), raw output for regression."""
    z, _ = head_logits(head, x)
    if head.kind == C.BINARY:
        return 1.0 / (1.0 + np.exp(-z[:, 0]))
    if head.kind == C.MULTICLASS:
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    return z[:, 0]


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class FineTuneConfig:
    strategy: str = SELF_SUPERVISED
    tasks: tuple[str, ...] = ()
    lam: float = 1.0
    lam_vec: tuple[float, ...] | None = None  # defaults to 1/m per task
    include_self_loss: bool = True
    epochs: int = 3
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_frac: float = 0.05
    mlm_rate: float = 0.15
    objective: str = "auto"  # "mlm" | "causal" | "auto"
    seed: int = 0

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise FineTuneError(f"unknown strategy {self.strategy!r}")
        if self.lam < 0:
            raise FineTuneError("lam must be >= 0")
        if self.lam_vec is not None and any(l < 0 for l in self.lam_vec):
            raise FineTuneError("lam_vec entries must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise FineTuneError("epochs must be >= 0 and batch_size >= 1")
        if self.objective not in ("auto", "mlm", "causal"):
            raise FineTuneError(f"unknown objective {self.objective!r}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["tasks"] = list(self.tasks)
        d["lam_vec"] = list(self.lam_vec) if self.lam_vec is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FineTuneConfig":
        d = dict(d)
        if "tasks" in d:
            d["tasks"] = tuple(d["tasks"])
        if d.get("lam_vec") is not None:
            d["lam_vec"] = tuple(d["lam_vec"])
        return cls(**d)


@dataclass
class FineTunedModel:
    params: TF.ModelParams
    heads: dict[str, TaskHead]
    provenance: dict = field(default_factory=dict)

    def embed(self, vocab: T.Vocabulary, texts: Sequence[str]) -> np.ndarray:
        return TF.embed_texts(self.params, vocab, texts)


def combined_loss(l_self: float, l_vec: Sequence[float], lam_vec: Sequence[float],
                  include_self: bool) -> float:
    """Total objective: [l_self if included] + sum_i lam_i * l_i."""
    if len(l_vec) != len(lam_vec):
        raise FineTuneError(
            f"loss vector length {len(l_vec)} != lambda vector length {len(lam_vec)}")
    values = list(l_vec) + ([l_self] if include_self else [])
    if not all(np.isfinite(v) for v in values + list(lam_vec)):
        raise FineTuneError("non-finite loss or lambda")
    total = sum(lam * l for lam, l in zip(lam_vec, l_vec))
    return float(l_self + total) if include_self else float(total)


# -------------------------------------------------------------------- optimizer

_adam_decay = lambda name, arr: arr.ndim >= 2  # decoupled wd on matrices only


class Adam:
    """Adam with decoupled weight decay and linear warmup to a flat rate."""

    def __init__(self, tensors: Mapping[str, np.ndarray], cfg: FineTuneConfig,
                 total_steps: int):
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0
        self.cfg = cfg
        self.warmup = max(1, int(round(cfg.warmup_frac * total_steps)))

    def step(self, tensors: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]):
        cfg = self.cfg
        self.t += 1
        lr = cfg.lr * min(1.0, self.t / self.warmup)
        b1c = 1.0 - cfg.beta1 ** self.t
        b2c = 1.0 - cfg.beta2 ** self.t
        for k, theta in tensors.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + cfg.adam_eps)
            if cfg.weight_decay and _adam_decay(k, theta):
                update = update + cfg.weight_decay * theta
            theta -= lr * update


# ----------------------------------------------------------------- step program

def _objective_for(params: TF.ModelParams, cfg: FineTuneConfig) -> str:
    implied = "mlm" if params.config.variant == TF.ENCODER else "causal"
    if cfg.objective != "auto" and cfg.objective != implied:
        raise FineTuneError(
            f"objective {cfg.objective!r} requested for a {params.config.variant} model")
    return implied


def step_loss_and_grads(params: TF.ModelParams, heads: Mapping[str, TaskHead],
                        self_batch, task_terms, *, dropout_seed=None):
    """Loss and exact gradients for one combined step.

    self_batch: None, ("mlm", ids, mask, targets, flags) or ("causal", ids, mask),
                optionally extended with ("nsp", labels) appended for NSP pairs.
    task_terms: [(task, ids, mask, y, lam)] with rows already gathered down to
                the observed-label subset for that task.
    dropout_seed: (seed, epoch, step) to enable training dropout, None for eval.

    Returns (total_loss, parts dict, grads dict) where grads covers every body
    tensor and "head.<task>.<name>" entries; zero-weight terms are skipped
    entirely so they cannot perturb the remaining gradients.
    """
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    for task, head in heads.items():
        for name, arr in head.tensors.items():
            grads[f"head.{task}.{name}"] = np.zeros_like(arr)
    parts: dict[str, float] = {}

    def drop_rng(pass_idx):
        if dropout_seed is None:
            return None, False
        s, epoch, step = dropout_seed
        return TF.dropout_rng(s, epoch, step, pass_idx), True

    l_self = 0.0
    if self_batch is not None:
        kind = self_batch[0]
        rng, train = drop_rng(0)
        if kind == "mlm":
            _, ids, mask, targets, flags = self_batch[:5]
            hidden, cache = TF.forward_hidden(params, ids, mask, train=train,
                                              dropout_rng=rng)
            loss, d_hidden, d_emb = TF.mlm_loss_grads(params, hidden, targets, flags)
            if len(self_batch) > 5 and self_batch[5] is not None:
                nsp_loss, d_h2, nsp_grads = TF.nsp_loss_grads(params, hidden, self_batch[5])
                loss = loss + nsp_loss
                d_hidden = d_hidden + d_h2
                for k, g in nsp_grads.items():
                    grads[k] += g
        elif kind == "causal":
            _, ids, mask = self_batch
            hidden, cache = TF.forward_hidden(params, ids, mask, train=train,
                                              dropout_rng=rng)
            loss, d_hidden, d_emb = TF.causal_loss_grads(params, hidden, ids, mask)
        else:
            raise FineTuneError(f"unknown self batch kind {kind!r}")
        body = TF.backward_hidden(params, cache, d_hidden)
        for k, g in body.items():
            grads[k] += g
        grads["tok_emb"] += d_emb
        l_self = float(loss)
        parts["self"] = l_self

    l_vec = []
    lam_vec = []
    for pass_idx, (task, ids, mask, y, lam) in enumerate(task_terms, start=1):
        lam_vec.append(lam)
        if lam == 0.0 or ids.shape[0] == 0:
            l_vec.append(0.0)
            continue
        head = heads[task]
        rng, train = drop_rng(pass_idx)
        hidden, cache = TF.forward_hidden(params, ids, mask, train=train, dropout_rng=rng)
        pooled = TF.pool_hidden(hidden, mask, params.config.variant)
        loss, d_pooled, hgrads = head_loss_grads(head, pooled, y)
        d_hidden = TF.pool_backward(d_pooled, hidden.shape, mask, params.config.variant)
        body = TF.backward_hidden(params, cache, d_hidden)
        for k, g in body.items():
            grads[k] += lam * g
        for name, g in hgrads.items():
            grads[f"head.{task}.{name}"] += lam * g
        l_vec.append(float(loss))
        parts[f"task:{task}"] = float(loss)

    total = combined_loss(l_self, l_vec, lam_vec, self_batch is not None)
    return total, parts, grads


# -------------------------------------------------------------- training driver

def _prepare_rows(dataset: C.Dataset, vocab: T.Vocabulary, cfg_arch: TF.ArchConfig):
    style = T.ENCODER if cfg_arch.variant == TF.ENCODER else T.DECODER
    ids, mask = T.encode_batch(dataset.texts(), vocab, cfg_arch.max_len, style)
    return ids, mask


def _mlm_corrupt(ids_rows, mask_rows, row_indices, vocab, rate, seed, epoch):
    corrupt = np.empty_like(ids_rows)
    targets = np.empty_like(ids_rows)
    flags = np.zeros(ids_rows.shape, dtype=bool)
    for j, global_row in enumerate(row_indices):
        seq = T.TokenSeq(ids_rows[j], mask_rows[j], int(mask_rows[j].sum()))
        ms = T.apply_mlm_mask(seq, vocab, rate, seed, epoch, int(global_row))
        corrupt[j] = ms.ids
        targets[j] = ms.target_ids
        flags[j] = ms.flags
    return corrupt, targets, flags


def _train(params: TF.ModelParams, dataset: C.Dataset, vocab: T.Vocabulary,
           cfg: FineTuneConfig, tasks: Sequence[str], lam_vec: Sequence[float],
           include_self: bool):
    """Shared loop for strategies B, C, D (and pretraining via tasks=[])."""
    cfg.validate()
    objective = _objective_for(params, cfg)
    params = params.copy()
    if len(dataset) == 0:
        raise FineTuneError("training corpus is empty")
    ids, mask = _prepare_rows(dataset, vocab, params.config)
    labels = {}
    for task in tasks:
        spec = dataset.task(task)
        y, observed = dataset.labels(task)
        if not observed.any():
            raise FineTuneError(f"task {task!r}: every label is missing")
        labels[task] = (y, observed, spec.kind)

    heads = {
        task: init_head(params.config.d_model, labels[task][2], cfg.seed, idx,
                        dtype=params.dtype,
                        n_classes=dataset.task(task).n_classes)
        for idx, task in enumerate(tasks)
    }
    all_tensors = dict(params.tensors)
    for task, head in heads.items():
        for name, arr in head.tensors.items():
            all_tensors[f"head.{task}.{name}"] = arr

    n = len(dataset)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    adam = Adam(all_tensors, cfg, total_steps=max(1, steps_per_epoch * cfg.epochs))
    trace = []
    for epoch in range(cfg.epochs):
        perm = rng_stream(cfg.seed, STREAM_SHUFFLE, epoch).permutation(n)
        epoch_losses = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            rows = perm[start:start + cfg.batch_size]
            self_batch = None
            if include_self:
                b_ids, b_mask = ids[rows], mask[rows]
                if objective == "mlm":
                    corrupt, targets, flags = _mlm_corrupt(
                        b_ids, b_mask, rows, vocab, cfg.mlm_rate, cfg.seed, epoch)
                    self_batch = ("mlm", corrupt, b_mask, targets, flags)
                else:
                    self_batch = ("causal", b_ids, b_mask)
            terms = []
            for task, lam in zip(tasks, lam_vec):
                y, observed, _ = labels[task]
                sub = rows[observed[rows]]
                terms.append((task, ids[sub], mask[sub],
                              y[sub].astype(params.dtype), lam))
            total, _, grads = step_loss_and_grads(
                params, heads, self_batch, terms,
                dropout_seed=(cfg.seed, epoch, step))
            adam.step(all_tensors, grads)
            epoch_losses.append(total)
        trace.append(float(np.mean(epoch_losses)))
    params.meta["loss_trace"] = trace
    return params, heads, trace


def _provenance(base: TF.ModelParams, dataset: C.Dataset, cfg: FineTuneConfig) -> dict:
    return {
        "base_checkpoint": base.meta.get("checkpoint_id", ""),
        "config": cfg.to_dict(),
        "corpus_hash": dataset.content_hash(),
    }


# ----------------------------------------------------------------- strategies

def pretrain(arch: TF.ArchConfig, dataset: C.Dataset, cfg: FineTuneConfig,
             vocab: T.Vocabulary | None = None, dtype=np.float32) -> TF.ModelParams:
    """Train the self-supervised objective from scratch on a pretraining corpus.

    The corpus here should come from a different generator spec than any
    downstream target corpus, mirroring the source/target split of real
    pretrained checkpoints.
    """
    if len(dataset) == 0:
        raise FineTuneError("pretraining corpus is empty")
    if vocab is None:
        vocab = T.build_vocab(dataset, min_count=1)
    if arch.vocab_size == 0:
        arch = replace(arch, vocab_size=len(vocab))
    if arch.vocab_size != len(vocab):
        raise FineTuneError(
            f"arch.vocab_size {arch.vocab_size} != vocabulary size {len(vocab)}")
    params = TF.init_params(arch, dtype=dtype)
    params, _, trace = _train(params, dataset, vocab, cfg, tasks=(), lam_vec=(),
                              include_self=True)
    params.meta["vocab_hash"] = vocab.hash()
    params.meta["loss_trace"] = trace
    return params


def finetune_self_supervised(params: TF.ModelParams, dataset: C.Dataset,
                             cfg: FineTuneConfig, vocab: T.Vocabulary) -> FineTunedModel:
    """Continue the body's own objective on the target corpus; no heads."""
    tuned, _, _ = _train(params, dataset, vocab, cfg, tasks=(), lam_vec=(),
                         include_self=True)
    return FineTunedModel(tuned, {}, _provenance(params, dataset, cfg))


def finetune_semi_supervised(params: TF.ModelParams, dataset: C.Dataset, task: str,
                             cfg: FineTuneConfig, vocab: T.Vocabulary) -> FineTunedModel:
    """Joint objective L_self + lam * L_task through one auxiliary head."""
    tuned, heads, _ = _train(params, dataset, vocab, cfg, tasks=(task,),
                             lam_vec=(cfg.lam,), include_self=True)
    return FineTunedModel(tuned, heads, _provenance(params, dataset, cfg))


def finetune_foundation(params: TF.ModelParams, dataset: C.Dataset,
                        tasks: Sequence[str], cfg: FineTuneConfig,
                        vocab: T.Vocabulary) -> FineTunedModel:
    """Multi-task tuning: one shared body, m heads, losses pooled by lambda_i."""
    if len(tasks) < 1:
        raise FineTuneError("foundation tuning needs at least one task")
    lam_vec = cfg.lam_vec if cfg.lam_vec is not None else tuple([1.0 / len(tasks)] * len(tasks))
    if len(lam_vec) != len(tasks):
        raise FineTuneError(
            f"lam_vec length {len(lam_vec)} != number of tasks {len(tasks)}")
    tuned, heads, _ = _train(params, dataset, vocab, cfg, tasks=tuple(tasks),
                             lam_vec=lam_vec, include_self=cfg.include_self_loss)
    return FineTunedModel(tuned, heads, _provenance(params, dataset, cfg))


# --------------------------------------------------------------- serialization

def save_model(path, model: FineTunedModel) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in model.params.tensors.items():
        tensors[f"body.{name}"] = arr
    head_meta = {}
    for task, head in sorted(model.heads.items()):
        head_meta[task] = {"kind": head.kind}
        for name, arr in head.tensors.items():
            tensors[f"head.{task}.{name}"] = arr
    meta = {
        "format": MODEL_FORMAT,
        "arch": model.params.config.to_dict(),
        "heads": head_meta,
        "model_meta": {k: v for k, v in model.params.meta.items()
                       if isinstance(v, (str, int, float, list))},
    }
    save_container(path, tensors, meta=meta, provenance=model.provenance)


def load_model(path) -> FineTunedModel:
    tensors, meta, provenance = load_container(path)
    if meta.get("format") != MODEL_FORMAT:
        raise FineTuneError(f"{path}: not a fine-tuned model container")
    arch = TF.ArchConfig.from_dict(meta["arch"])
    body = {}
    heads: dict[str, TaskHead] = {}
    for name, arr in tensors.items():
        if name.startswith("body."):
            body[name[len("body."):]] = arr
        elif name.startswith("head."):
            _, task, pname = name.split(".", 2)
            heads.setdefault(task, TaskHead(meta["heads"][task]["kind"], {}))
            heads[task].tensors[pname] = arr
        else:
            raise FineTuneError(f"{path}: unexpected tensor {name!r}")
    params = TF.ModelParams(arch, body, dict(meta.get("model_meta", {})))
    expected = set(TF.init_params(arch, dtype=params.dtype).tensors)
    if set(body) != expected:
        raise FineTuneError(f"{path}: body tensors do not match the declared arch")
    return FineTunedModel(params, heads, provenance)
