"""Downstream predictors over document embeddings.

The boosted-tree model follows the second-order recipe: per round, fit a
depth-limited tree on gradients g = p - y and hessians h = p(1 - p) with
exact greedy splits over sorted feature values,

    gain = 1/2 [ G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda) ] - gamma
    leaf weight = -G / (H + lambda)

Logistic regression is L2-regularized maximum likelihood by plain gradient
descent with a Lipschitz step size; the forest is bagged CART with Gini
splits and per-node feature subsampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import load_container, save_container
from .finetune import TaskHead, head_scores
from .util import STREAM_TREE, rng_stream


class PredictError(ValueError):
    pass


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise PredictError("X must be (n, d) with matching y")
    if not np.isfinite(X).all():
        raise PredictError("features contain NaN/Inf")
    classes = np.unique(y)
    if not set(classes).issubset({0.0, 1.0}) or len(classes) < 2:
        raise PredictError("labels must contain both classes 0 and 1")
    return X, y


# ------------------------------------------------------------------------ GBT

@dataclass(frozen=True)
class GBTHyperparams:
    rounds: int = 100
    max_depth: int = 3
    eta: float = 0.1
    reg_lambda: float = 1.0
    gamma: float = 0.0
    seed: int = 0


@dataclass
class GBTModel:
    trees: list
    base_score: float
    hp: GBTHyperparams
    n_features: int
    loss_trace: list = field(default_factory=list)


def _leaf(g_sum, h_sum, lam):
    return {"leaf": -g_sum / (h_sum + lam)}


def _best_split(X, order, rows_mask, g, h, lam, gamma):
    """Exact greedy scan over every feature's sorted values for one node."""
    G = g[rows_mask].sum()
    H = h[rows_mask].sum()
    parent = G * G / (H + lam)
    best = None  # (gain, feature, threshold, left_rows_sorted)
    for f in range(X.shape[1]):
        rs = order[f][rows_mask[order[f]]]  # node rows in ascending feature order
        xs = X[rs, f]
        if len(rs) < 2 or xs[0] == xs[-1]:
            continue
        cg = np.cumsum(g[rs])
        ch = np.cumsum(h[rs])
        boundary = np.nonzero(xs[:-1] != xs[1:])[0]
        GL, HL = cg[boundary], ch[boundary]
        GR, HR = G - GL, H - HL
        gains = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent) - gamma
        k = int(np.argmax(gains))
        if best is None or gains[k] > best[0]:
            i = boundary[k]
            thr = 0.5 * (xs[i] + xs[i + 1])
            best = (float(gains[k]), f, thr, rs[: i + 1])
    if best is None or best[0] <= 0.0:
        return None
    return best


def _grow_tree(X, order, rows_mask, g, h, hp: GBTHyperparams, depth):
    G = g[rows_mask].sum()
    H = h[rows_mask].sum()
    if depth >= hp.max_depth:
        return _leaf(G, H, hp.reg_lambda)
    split = _best_split(X, order, rows_mask, g, h, hp.reg_lambda, hp.gamma)
    if split is None:
        return _leaf(G, H, hp.reg_lambda)
    gain, f, thr, left_rows = split
    left_mask = np.zeros_like(rows_mask)
    left_mask[left_rows] = True
    right_mask = rows_mask & ~left_mask
    return {
        "feature": int(f), "threshold": float(thr), "gain": gain,
        "left": _grow_tree(X, order, left_mask, g, h, hp, depth + 1),
        "right": _grow_tree(X, order, right_mask, g, h, hp, depth + 1),
    }


def _tree_predict(tree, X):
    out = np.empty(len(X))
    idx = np.arange(len(X))

    def walk(node, sel):
        if "leaf" in node:
            out[sel] = node["leaf"]
            return
        go_left = X[sel, node["feature"]] < node["threshold"]
        walk(node["left"], sel[go_left])
        walk(node["right"], sel[~go_left])

    walk(tree, idx)
    return out


def logistic_loss(raw, y):
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


def train_gbt(X, y, hp: GBTHyperparams = GBTHyperparams()) -> GBTModel:
    """Second-order boosting with a logistic objective; base score is the
    logit of the class prior, trees are scaled by eta."""
    X, y = _check_xy(X, y)
    prior = float(np.clip(y.mean(), 1e-9, 1 - 1e-9))
    base = math.log(prior / (1.0 - prior))
    order = [np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])]
    raw = np.full(len(y), base)
    model = GBTModel([], base, hp, X.shape[1])
    model.loss_trace.append(logistic_loss(raw, y))
    all_rows = np.ones(len(y), dtype=bool)
    for _ in range(hp.rounds):
        p = _sigmoid(raw)
        g = p - y
        h = p * (1.0 - p)
        tree = _grow_tree(X, order, all_rows, g, h, hp, 0)
        model.trees.append(tree)
        raw = raw + hp.eta * _tree_predict(tree, X)
        model.loss_trace.append(logistic_loss(raw, y))
    return model


# -------------------------------------------------------- logistic regression

@dataclass(frozen=True)
class LogRegHyperparams:
    l2: float = 1.0
    tol: float = 1e-8
    max_iter: int = 20000


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    hp: LogRegHyperparams
    n_features: int


def train_logreg(X, y, hp: LogRegHyperparams = LogRegHyperparams()) -> LinearModel:
    """Gradient descent with step 1/L (L from a power-iteration bound on
    X^T X), run to a gradient-norm tolerance: deterministic, no line search."""
    X, y = _check_xy(X, y)
    n, d = X.shape
    v = np.ones(d) / math.sqrt(d)
    for _ in range(60):
        v = X.T @ (X @ v)
        norm = np.linalg.norm(v)
        if norm == 0:
            break
        v /= norm
    sigma_sq = float(v @ (X.T @ (X @ v))) if norm else 0.0
    L = sigma_sq / (4.0 * n) + hp.l2 + 0.25  # +1/4 covers the bias coordinate
    step = 1.0 / L
    w = np.zeros(d)
    b = 0.0
    for _ in range(hp.max_iter):
        p = _sigmoid(X @ w + b)
        grad_w = X.T @ (p - y) / n + hp.l2 * w
        grad_b = float(np.mean(p - y))
        gnorm = max(np.abs(grad_w).max(), abs(grad_b))
        if gnorm <= hp.tol:
            break
        w -= step * grad_w
        b -= step * grad_b
    return LinearModel(w, b, hp, d)


# -------------------------------------------------------------- random forest

@dataclass(frozen=True)
class RFHyperparams:
    n_trees: int = 100
    max_depth: int | None = None
    bootstrap: bool = True
    feature_frac: float | str = "sqrt"  # "sqrt", 1.0, or a fraction
    seed: int = 0


@dataclass
class ForestModel:
    trees: list
    hp: RFHyperparams
    n_features: int


def _gini(counts):
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return 1.0 - (p * p).sum()


def _grow_cart(X, y, rows, rng, hp: RFHyperparams, n_feat_choices, depth):
    ys = y[rows]
    pos = ys.sum()
    if pos == 0 or pos == len(ys) or (hp.max_depth is not None and depth >= hp.max_depth):
        return {"leaf": pos / len(ys)}
    feats = np.sort(rng.choice(X.shape[1], size=n_feat_choices, replace=False))
    parent_gini = _gini(np.array([len(ys) - pos, pos]))
    best = None  # (decrease, feature, threshold, left_rows)
    for f in feats:
        xs = X[rows, f]
        srt = np.argsort(xs, kind="stable")
        xs_s, ys_s = xs[srt], ys[srt]
        boundary = np.nonzero(xs_s[:-1] != xs_s[1:])[0]
        if len(boundary) == 0:
            continue
        cpos = np.cumsum(ys_s)
        n = len(ys_s)
        nl = boundary + 1
        pl = cpos[boundary]
        nr = n - nl
        pr = pos - pl
        gini_l = 1.0 - ((pl / nl) ** 2 + ((nl - pl) / nl) ** 2)
        gini_r = 1.0 - ((pr / nr) ** 2 + ((nr - pr) / nr) ** 2)
        dec = parent_gini - (nl * gini_l + nr * gini_r) / n
        k = int(np.argmax(dec))
        if dec[k] > 1e-15 and (best is None or dec[k] > best[0]):
            i = boundary[k]
            thr = 0.5 * (xs_s[i] + xs_s[i + 1])
            # keep both partitions: bootstrap rows may repeat, so the right
            # side cannot be recovered by set difference
            best = (float(dec[k]), int(f), thr, rows[srt[: i + 1]], rows[srt[i + 1:]])
    if best is None:
        return {"leaf": pos / len(ys)}
    _, f, thr, left_rows, right_rows = best
    return {
        "feature": f, "threshold": thr,
        "left": _grow_cart(X, y, left_rows, rng, hp, n_feat_choices, depth + 1),
        "right": _grow_cart(X, y, right_rows, rng, hp, n_feat_choices, depth + 1),
    }


def train_rf(X, y, hp: RFHyperparams = RFHyperparams()) -> ForestModel:
    """Bagged CART with Gini splits; prediction averages per-tree leaf
    class-1 frequencies."""
    X, y = _check_xy(X, y)
    n, d = X.shape
    if hp.feature_frac == "sqrt":
        n_feat = max(1, int(round(math.sqrt(d))))
    else:
        n_feat = max(1, min(d, int(round(float(hp.feature_frac) * d))))
    trees = []
    for t in range(hp.n_trees):
        rng = rng_stream(hp.seed, STREAM_TREE, t)
        rows = (rng.integers(0, n, size=n) if hp.bootstrap else np.arange(n))
        trees.append(_grow_cart(X, y, np.asarray(rows), rng, hp, n_feat, 0))
    return ForestModel(trees, hp, d)


# ------------------------------------------------------------------- scoring

@dataclass
class HeadPredictor:
    """Fine-tuned task head applied to embedding rows: sigmoid(head(x))."""

    head: TaskHead
    n_features: int


def predict_proba(model, X) -> np.ndarray:
    """Positive-class scores in [0, 1] for any trained predictor."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise PredictError("X must be 2-D")
    expected = model.n_features
    if X.shape[1] != expected:
        raise PredictError(
            f"feature dim {X.shape[1]} does not match training dim {expected}")
    if isinstance(model, GBTModel):
        raw = np.full(len(X), model.base_score)
        for tree in model.trees:
            raw += model.hp.eta * _tree_predict(tree, X)
        return _sigmoid(raw)
    if isinstance(model, LinearModel):
        return _sigmoid(X @ model.weights + model.bias)
    if isinstance(model, ForestModel):
        votes = np.zeros(len(X))
        for tree in model.trees:
            votes += _tree_predict(tree, X)
        return votes / len(model.trees)
    if isinstance(model, HeadPredictor):
        return head_scores(model.head, X)
    raise PredictError(f"unknown model type {type(model).__name__}")


# -------------------------------------------------------------- serialization

def save_predictor(path, model, provenance: dict | None = None) -> None:
    if isinstance(model, GBTModel):
        meta = {"format": "predictor", "family": "gbt",
                "hp": model.hp.__dict__, "trees": model.trees,
                "base_score": model.base_score, "n_features": model.n_features}
        save_container(path, {}, meta=meta, provenance=provenance or {})
    elif isinstance(model, ForestModel):
        hp = dict(model.hp.__dict__)
        meta = {"format": "predictor", "family": "rf", "hp": hp,
                "trees": model.trees, "n_features": model.n_features}
        save_container(path, {}, meta=meta, provenance=provenance or {})
    elif isinstance(model, LinearModel):
        meta = {"format": "predictor", "family": "logreg",
                "hp": model.hp.__dict__, "bias": model.bias,
                "n_features": model.n_features}
        save_container(path, {"weights": model.weights.astype(np.float64)},
                       meta=meta, provenance=provenance or {})
    elif isinstance(model, HeadPredictor):
        meta = {"format": "predictor", "family": "head",
                "kind": model.head.kind, "n_features": model.n_features}
        tensors = {f"head.{k}": v for k, v in model.head.tensors.items()}
        save_container(path, tensors, meta=meta, provenance=provenance or {})
    else:
        raise PredictError(f"cannot serialize {type(model).__name__}")


def load_predictor(path):
    tensors, meta, _ = load_container(path)
    if meta.get("format") != "predictor":
        raise PredictError(f"{path}: not a predictor container")
    family = meta["family"]
    if family == "gbt":
        return GBTModel(meta["trees"], meta["base_score"],
                        GBTHyperparams(**meta["hp"]), meta["n_features"])
    if family == "rf":
        return ForestModel(meta["trees"], RFHyperparams(**meta["hp"]),
                           meta["n_features"])
    if family == "logreg":
        return LinearModel(tensors["weights"], meta["bias"],
                           LogRegHyperparams(**meta["hp"]), meta["n_features"])
    if family == "head":
        head = TaskHead(meta["kind"],
                        {k[len("head."):]: v for k, v in tensors.items()})
        return HeadPredictor(head, meta["n_features"])
    raise PredictError(f"unknown predictor family {family!r}")
