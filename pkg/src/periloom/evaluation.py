"""Rare-event metrics and the stratified nested cross-validation harness.

AUROC is the Mann-Whitney statistic computed by average ranks; AUPRC is
step-wise average precision with tied scores grouped into a single PR point.
Nested CV: outer folds give the unbiased estimate, inner folds pick
hyperparameters by mean AUROC. All embedding and fine-tuning inside a fold
fits on outer-training rows only; per-fold work is a pure function of
(train rows, test rows, seeds) so leakage is excluded by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import baselines as B
from . import corpus as C
from . import finetune as FT
from . import predict as P
from . import transformer as TF
from .text import Vocabulary
from .util import rng_stream

STREAM_FOLD = 11


class EvalError(ValueError):
    pass


# -------------------------------------------------------------------- metrics

def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise EvalError("scores and labels must be equal-length vectors")
    return scores, labels


def auroc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(tie), via average ranks in O(n log n)."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvalError("AUROC undefined: needs both classes present")
    uniq, inv = np.unique(scores, return_inverse=True)
    counts = np.bincount(inv)
    cum = np.cumsum(counts)
    avg_rank = (cum - counts + 1 + cum) / 2.0  # 1-based mean rank per tie group
    ranks = avg_rank[inv]
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum (R_i - R_{i-1}) P_i over descending unique
    score thresholds, ties grouped into one PR point."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise EvalError("AUPRC undefined: no positive labels")
    uniq, inv = np.unique(scores, return_inverse=True)
    pos_per = np.bincount(inv, weights=(labels == 1).astype(float))
    tot_per = np.bincount(inv)
    # descending threshold order
    tp = np.cumsum(pos_per[::-1])
    n_at = np.cumsum(tot_per[::-1])
    recall = tp / n_pos
    precision = tp / n_at
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


@dataclass(frozen=True)
class MetricSet:
    """Per-fold metrics; None marks an undefined value (never silently 0)."""

    auroc: float | None = None
    auprc: float | None = None
    accuracy: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    precision: float | None = None
    f1: float | None = None
    mse: float | None = None
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


METRIC_NAMES = ("auroc", "auprc", "accuracy", "sensitivity", "specificity",
                "precision", "f1", "mse")


def threshold_metrics(scores, labels, tau: float = 0.5) -> MetricSet:
    """Confusion-matrix metrics at `tau` (positive iff score >= tau).
    Ratios with zero denominators are reported as None."""
    if not 0.0 <= tau <= 1.0:
        raise EvalError("threshold must be in [0, 1]")
    scores, labels = _check_binary(scores, labels)
    pred = scores >= tau
    tp = int((pred & (labels == 1)).sum())
    tn = int((~pred & (labels == 0)).sum())
    fp = int((pred & (labels == 0)).sum())
    fn = int((~pred & (labels == 1)).sum())
    n = tp + tn + fp + fn

    def ratio(num, den):
        return num / den if den > 0 else None

    precision = ratio(tp, tp + fp)
    sensitivity = ratio(tp, tp + fn)
    f1 = None
    if precision is not None and sensitivity is not None:
        f1 = 0.0 if precision + sensitivity == 0 else \
            2 * precision * sensitivity / (precision + sensitivity)
    return MetricSet(
        accuracy=ratio(tp + tn, n),
        sensitivity=sensitivity,
        specificity=ratio(tn, tn + fp),
        precision=precision,
        f1=f1,
        threshold=tau,
    )


def mse(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.size == 0:
        raise EvalError("predictions and targets must match and be non-empty")
    return float(np.mean((preds - targets) ** 2))


def fold_metrics(scores, labels, tau: float = 0.5) -> MetricSet:
    """All classification metrics for one fold; AUROC/AUPRC fall back to None
    on degenerate folds instead of raising."""
    base = threshold_metrics(scores, labels, tau)
    try:
        a = auroc(scores, labels)
    except EvalError:
        a = None
    try:
        p = auprc(scores, labels)
    except EvalError:
        p = None
    return replace(base, auroc=a, auprc=p)


# ------------------------------------------------------------------ pipelines

@dataclass
class FittedEmbedder:
    embed: Callable[[Sequence[str]], np.ndarray]
    heads: dict[str, FT.TaskHead] = field(default_factory=dict)


class BaselinePipeline:
    """Classic embedding trained per fold on the outer-training rows."""

    def __init__(self, kind: str, hp: B.BaselineHyperparams | None = None):
        if kind not in B.TRAINERS:
            raise EvalError(f"unknown baseline kind {kind!r}")
        self.kind = kind
        self.hp = hp or B.BaselineHyperparams()
        self.name = kind

    def fit_embedder(self, train_ds: C.Dataset, task: str, seed: int,
                     overrides: Mapping | None = None) -> FittedEmbedder:
        hp = replace(self.hp, seed=seed, **dict(overrides or {}))
        emb = B.TRAINERS[self.kind](train_ds, hp)
        return FittedEmbedder(lambda texts: B.embed_documents(emb, texts))


class StrategyPipeline:
    """Transformer embedding under one of the four tuning strategies.

    The pretrained body and its vocabulary are fixed inputs (they come from
    a separate pretraining corpus); fine-tuning runs per fold on the
    outer-training rows only.
    """

    def __init__(self, strategy: str, base: TF.ModelParams, vocab: Vocabulary,
                 ft_cfg: FT.FineTuneConfig | None = None,
                 foundation_tasks: Sequence[str] = ()):
        if strategy not in FT.STRATEGIES:
            raise EvalError(f"unknown strategy {strategy!r}")
        self.strategy = strategy
        self.base = base
        self.vocab = vocab
        self.ft_cfg = ft_cfg or FT.FineTuneConfig()
        self.foundation_tasks = tuple(foundation_tasks)
        self.name = strategy

    def fit_embedder(self, train_ds: C.Dataset, task: str, seed: int,
                     overrides: Mapping | None = None) -> FittedEmbedder:
        cfg = replace(self.ft_cfg, seed=seed, **dict(overrides or {}))
        if self.strategy == FT.PRETRAINED_ONLY:
            model = FT.FineTunedModel(self.base, {}, {})
        elif self.strategy == FT.SELF_SUPERVISED:
            model = FT.finetune_self_supervised(self.base, train_ds, cfg, self.vocab)
        elif self.strategy == FT.SEMI_SUPERVISED:
            model = FT.finetune_semi_supervised(self.base, train_ds, task, cfg,
                                                self.vocab)
        else:
            tasks = self.foundation_tasks or tuple(t.name for t in train_ds.tasks)
            model = FT.finetune_foundation(self.base, train_ds, tasks, cfg,
                                           self.vocab)
        vocab = self.vocab
        return FittedEmbedder(lambda texts: model.embed(vocab, texts), model.heads)


_PREDICTOR_FKEY = {"gbt": P.GBTHyperparams, "logreg": P.LogRegHyperparams,
                   "rf": P.RFHyperparams}


def fit_predictor(family: str, X: np.ndarray, y: np.ndarray, hp: Mapping,
                  seed: int, fitted: FittedEmbedder | None = None,
                  task: str | None = None):
    if family == "head":
        if fitted is None or task not in fitted.heads:
            raise EvalError("head predictor needs a fine-tuned head for the task")
        return P.HeadPredictor(fitted.heads[task], X.shape[1])
    if family not in _PREDICTOR_FKEY:
        raise EvalError(f"unknown predictor family {family!r}")
    kwargs = dict(hp)
    if family in ("gbt", "rf"):
        kwargs.setdefault("seed", seed)
    if family == "gbt":
        return P.train_gbt(X, y, P.GBTHyperparams(**kwargs))
    if family == "rf":
        return P.train_rf(X, y, P.RFHyperparams(**kwargs))
    return P.train_logreg(X, y, P.LogRegHyperparams(**kwargs))


# ------------------------------------------------------------------ nested CV

def fold_seed(seed: int, fold: int, role: int = 0) -> int:
    return int(rng_stream(seed, STREAM_FOLD, fold, role).integers(2 ** 31))


def _observed_subset(dataset: C.Dataset, task: str) -> C.Dataset:
    _, mask = dataset.labels(task)
    ids = [n.id for n, m in zip(dataset.notes, mask) if m]
    return dataset.subset(ids)


def _score_with(fitted: FittedEmbedder, family, hp, train_ds, test_ds, task, seed):
    """Embed train/test, fit the predictor on observed train rows, score test."""
    obs_train = _observed_subset(train_ds, task)
    y_tr, _ = obs_train.labels(task)
    X_tr = fitted.embed(obs_train.texts())
    model = fit_predictor(family, X_tr, y_tr, hp, seed, fitted, task)
    X_te = fitted.embed(test_ds.texts())
    return P.predict_proba(model, X_te)


def evaluate_fold(pipeline, train_ds: C.Dataset, test_ds: C.Dataset, task: str,
                  predictor_family: str, predictor_grid: Sequence[Mapping],
                  k_inner: int, seed: int, tune: str = "predictor_only",
                  pipeline_grid: Sequence[Mapping] | None = None):
    """One outer fold: inner grid search on train rows only, refit, score test.

    Pure function of its arguments; test rows never reach a fitting path.
    With tune="predictor_only" the embedder fits once on the outer-training
    set and only the predictor grid is searched; "full_pipeline" refits the
    embedder inside every inner fold for every pipeline grid point.
    Returns (test scores, chosen hp dict).
    """
    if tune not in ("predictor_only", "full_pipeline"):
        raise EvalError(f"unknown tuning scope {tune!r}")
    if not predictor_grid:
        raise EvalError("hyperparameter grid is empty")
    pipeline_grid = list(pipeline_grid or [{}])
    grid = [(pg, pr) for pg in pipeline_grid for pr in predictor_grid]

    fitted_outer = None
    if tune == "predictor_only":
        fitted_outer = pipeline.fit_embedder(train_ds, task,
                                             fold_seed(seed, 0, 0), None)

    if len(grid) > 1:
        obs = _observed_subset(train_ds, task)
        inner = C.stratified_split(obs, k_inner, task, fold_seed(seed, 0, 1))
        inner_folds = []
        for fi in range(k_inner):
            val_ids, _ = inner.test_train_ids(fi)
            val_set = set(val_ids)
            inner_train = train_ds.subset(
                [n.id for n in train_ds.notes if n.id not in val_set])
            inner_val = obs.subset(val_ids)
            inner_folds.append((inner_train, inner_val))
        inner_scores = []
        if tune == "predictor_only":
            # one embedding pass per inner fold, shared by the whole grid
            folds_xy = []
            for inner_train, inner_val in inner_folds:
                obs_tr = _observed_subset(inner_train, task)
                x_tr = fitted_outer.embed(obs_tr.texts())
                y_tr, _ = obs_tr.labels(task)
                x_val = fitted_outer.embed(inner_val.texts())
                y_val, _ = inner_val.labels(task)
                folds_xy.append((x_tr, y_tr, x_val, y_val))
            for _, pr in grid:
                vals = []
                for fi, (x_tr, y_tr, x_val, y_val) in enumerate(folds_xy):
                    try:
                        model = fit_predictor(predictor_family, x_tr, y_tr, pr,
                                              fold_seed(seed, fi, 3),
                                              fitted_outer, task)
                        vals.append(auroc(P.predict_proba(model, x_val), y_val))
                    except (EvalError, P.PredictError):
                        continue
                inner_scores.append(np.mean(vals) if vals else -np.inf)
        else:
            for pg, pr in grid:
                vals = []
                for fi, (inner_train, inner_val) in enumerate(inner_folds):
                    fitted = pipeline.fit_embedder(
                        inner_train, task, fold_seed(seed, fi, 2), pg)
                    try:
                        scores = _score_with(fitted, predictor_family, pr,
                                             inner_train, inner_val, task,
                                             fold_seed(seed, fi, 3))
                        y_val, _ = inner_val.labels(task)
                        vals.append(auroc(scores, y_val))
                    except (EvalError, P.PredictError):
                        continue
                inner_scores.append(np.mean(vals) if vals else -np.inf)
        best = int(np.argmax(inner_scores))
    else:
        best = 0
    chosen_pg, chosen_pr = grid[best]

    if fitted_outer is None:
        fitted_outer = pipeline.fit_embedder(train_ds, task,
                                             fold_seed(seed, 0, 0), chosen_pg)
    scores = _score_with(fitted_outer, predictor_family, chosen_pr, train_ds,
                         test_ds, task, fold_seed(seed, 0, 4))
    chosen = {"pipeline": dict(chosen_pg), "predictor": dict(chosen_pr)}
    return scores, chosen


@dataclass
class RunResult:
    task: str
    strategy: str
    predictor: str
    folds: list[MetricSet]
    details: list[dict] = field(default_factory=list)


def nested_cv(dataset: C.Dataset, task: str, pipeline, predictor_family: str,
              predictor_grid: Sequence[Mapping] | None = None,
              k_outer: int = 5, k_inner: int = 3, seed: int = 0,
              tune: str = "predictor_only",
              pipeline_grid: Sequence[Mapping] | None = None,
              folds: C.FoldAssignment | None = None,
              threshold: float = 0.5) -> RunResult:
    """Stratified nested cross-validation of one (pipeline, predictor) pair."""
    predictor_grid = [{}] if predictor_grid is None else list(predictor_grid)
    if not predictor_grid:
        raise EvalError("hyperparameter grid is empty")
    if folds is None:
        folds = C.stratified_split(dataset, k_outer, task, seed)
    result = RunResult(task, getattr(pipeline, "name", "pipeline"),
                       predictor_family, [], [])
    for fold in range(folds.k):
        test_ids, train_ids = folds.test_train_ids(fold)
        train_ds = dataset.subset(train_ids)
        test_ds = dataset.subset(test_ids)
        scores, chosen = evaluate_fold(
            pipeline, train_ds, test_ds, task, predictor_family, predictor_grid,
            k_inner, fold_seed(seed, fold, 5), tune, pipeline_grid)
        y_te, obs_te = test_ds.labels(task)
        ms = fold_metrics(scores[obs_te], y_te[obs_te], threshold)
        result.folds.append(ms)
        result.details.append({
            "fold": fold,
            "test_ids": list(test_ids),
            "scores": [float(s) for s in scores],
            "chosen": chosen,
        })
    return result


def rarest_task(dataset: C.Dataset, tasks: Sequence[str] | None = None) -> str:
    """Task with the fewest observed positives (ties by name): the default
    stratification target for shared-fold multi-task evaluation."""
    names = list(tasks) if tasks else [t.name for t in dataset.tasks]
    counts = []
    for name in names:
        vals, mask = dataset.labels(name)
        counts.append((int(vals[mask].sum()), name))
    return min(counts)[1]


def nested_cv_multitask(dataset: C.Dataset, tasks: Sequence[str], pipeline,
                        predictor_family: str,
                        predictor_grid: Sequence[Mapping] | None = None,
                        k_outer: int = 5, k_inner: int = 3, seed: int = 0,
                        folds: C.FoldAssignment | None = None,
                        threshold: float = 0.5,
                        stratify: str | None = None) -> list[RunResult]:
    """Shared-fold evaluation for task-independent or multi-task embedders:
    one embedder fit per outer fold serves every task (folds stratified by
    the rarest task). Predictor selection stays per task. Equivalent in
    hygiene to nested_cv with tune="predictor_only"."""
    predictor_grid = [{}] if predictor_grid is None else list(predictor_grid)
    if not predictor_grid:
        raise EvalError("hyperparameter grid is empty")
    tasks = list(tasks)
    if not tasks:
        raise EvalError("no tasks to evaluate")
    stratify = stratify or rarest_task(dataset, tasks)
    if folds is None:
        folds = C.stratified_split(dataset, k_outer, stratify, seed)
    results = {t: RunResult(t, getattr(pipeline, "name", "pipeline"),
                            predictor_family, [], []) for t in tasks}
    for fold in range(folds.k):
        test_ids, train_ids = folds.test_train_ids(fold)
        train_ds = dataset.subset(train_ids)
        test_ds = dataset.subset(test_ids)
        fseed = fold_seed(seed, fold, 5)
        fitted = pipeline.fit_embedder(train_ds, stratify, fold_seed(fseed, 0, 0),
                                       None)
        test_X = fitted.embed(test_ds.texts())
        for task in tasks:
            try:
                obs_tr = _observed_subset(train_ds, task)
                y_tr, _ = obs_tr.labels(task)
                X_tr = fitted.embed(obs_tr.texts())
                if len(predictor_grid) > 1:
                    inner = C.stratified_split(obs_tr, k_inner, task,
                                               fold_seed(fseed, 0, 1))
                    inner_scores = []
                    for pr in predictor_grid:
                        vals = []
                        for fi in range(k_inner):
                            val_ids, tr_ids = inner.test_train_ids(fi)
                            sel_tr = [i for i, n in enumerate(obs_tr.notes)
                                      if n.id not in set(val_ids)]
                            sel_val = [i for i, n in enumerate(obs_tr.notes)
                                       if n.id in set(val_ids)]
                            try:
                                model = fit_predictor(
                                    predictor_family, X_tr[sel_tr], y_tr[sel_tr],
                                    pr, fold_seed(fseed, fi, 3), fitted, task)
                                vals.append(auroc(
                                    P.predict_proba(model, X_tr[sel_val]),
                                    y_tr[sel_val]))
                            except (EvalError, P.PredictError):
                                continue
                        inner_scores.append(np.mean(vals) if vals else -np.inf)
                    chosen = predictor_grid[int(np.argmax(inner_scores))]
                else:
                    chosen = predictor_grid[0]
                model = fit_predictor(predictor_family, X_tr, y_tr, chosen,
                                      fold_seed(fseed, 0, 4), fitted, task)
                scores = P.predict_proba(model, test_X)
            except (EvalError, P.PredictError) as exc:
                results[task].folds.append(MetricSet())
                results[task].details.append({"fold": fold, "error": str(exc)})
                continue
            y_te, obs_te = test_ds.labels(task)
            ms = fold_metrics(scores[obs_te], y_te[obs_te], threshold)
            results[task].folds.append(ms)
            results[task].details.append({
                "fold": fold, "test_ids": list(test_ids),
                "scores": [float(s) for s in scores],
                "chosen": {"pipeline": {}, "predictor": dict(chosen)},
            })
    return [results[t] for t in tasks]


# --------------------------------------------------------------------- report

def aggregate(values: Sequence[float | None]) -> dict:
    """Mean, standard error, and 95% CI (mean +/- 1.96 SE) over defined folds."""
    defined = [v for v in values if v is not None]
    n = len(defined)
    if n == 0:
        return {"mean": None, "se": None, "ci_lo": None, "ci_hi": None, "n": 0}
    mean = float(np.mean(defined))
    se = float(np.std(defined, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return {"mean": mean, "se": se, "ci_lo": mean - 1.96 * se,
            "ci_hi": mean + 1.96 * se, "n": n}


@dataclass
class EvalReport:
    results: list[RunResult]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "runs": [{
                "task": r.task, "strategy": r.strategy, "predictor": r.predictor,
                "folds": [m.to_dict() for m in r.folds],
                "details": r.details,
            } for r in self.results],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        results = []
        for run in d["runs"]:
            folds = [MetricSet(**{k: v for k, v in m.items()})
                     for m in run["folds"]]
            results.append(RunResult(run["task"], run["strategy"],
                                     run["predictor"], folds,
                                     run.get("details", [])))
        return cls(results, d.get("meta", {}))


def summarize(report: EvalReport) -> dict:
    records = []
    for r in report.results:
        for metric in METRIC_NAMES:
            agg = aggregate([getattr(m, metric) for m in r.folds])
            if agg["n"] == 0:
                continue
            records.append({"task": r.task, "strategy": r.strategy,
                            "predictor": r.predictor, "metric": metric, **agg})
    return {"meta": report.meta, "records": records}


def report_csv(report: EvalReport) -> str:
    header = ["task", "strategy", "predictor", "fold", *METRIC_NAMES, "threshold"]
    lines = [",".join(header)]
    for r in report.results:
        for i, m in enumerate(r.folds):
            row = [r.task, r.strategy, r.predictor, str(i)]
            for name in METRIC_NAMES:
                v = getattr(m, name)
                row.append("" if v is None else f"{v:.10g}")
            row.append(f"{m.threshold:.10g}")
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"
