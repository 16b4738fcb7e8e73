import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from periloom import evaluation as E
from periloom.corpus import (ClinicalNote, CorpusSpec, Dataset, TaskGenSpec,
                             TaskSpec, generate_corpus, stratified_split)

# ------------------------------------------------------------ metric oracles


def auroc_pairwise(scores, labels):
    """O(n^2) oracle: mean over positive/negative pairs of win + half-tie."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                total += 1.0
            elif sp == sn:
                total += 0.5
    return total / (len(pos) * len(neg))


def auprc_curve_enum(scores, labels):
    """Exhaustive PR-curve enumeration over descending unique thresholds."""
    n_pos = sum(1 for y in labels if y == 1)
    thresholds = sorted(set(scores), reverse=True)
    ap = 0.0
    prev_recall = 0.0
    for tau in thresholds:
        tp = sum(1 for s, y in zip(scores, labels) if s >= tau and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= tau and y == 0)
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def test_worked_auroc_example():
    assert E.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_worked_auprc_example():
    assert abs(E.auprc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) - 5 / 6) < 1e-12


def test_perfect_separation():
    assert E.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert E.auprc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_all_ties():
    assert E.auroc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5
    assert abs(E.auprc([0.5] * 6, [0, 1, 0, 1, 0, 1]) - 0.5) < 1e-12


def test_single_class_errors():
    with pytest.raises(E.EvalError):
        E.auroc([0.1, 0.2], [1, 1])
    with pytest.raises(E.EvalError):
        E.auprc([0.1, 0.2], [0, 0])


def test_oracle_equivalence_small_n():
    # Every labelled dataset with n <= 6 over the 5-value score grid
    # (score multisets cover all datasets up to permutation; permutation
    # invariance is asserted separately by hypothesis).
    grid = [0.0, 0.25, 0.5, 0.75, 1.0]
    for n in range(1, 7):
        for scores in itertools.combinations_with_replacement(grid, n):
            scores = list(scores)
            for mask in range(2 ** n):
                labels = [(mask >> i) & 1 for i in range(n)]
                n_pos = sum(labels)
                if 0 < n_pos < n:
                    assert abs(E.auroc(scores, labels)
                               - auroc_pairwise(scores, labels)) < 1e-12
                if n_pos > 0:
                    assert abs(E.auprc(scores, labels)
                               - auprc_curve_enum(scores, labels)) < 1e-12


@given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]),
                          st.sampled_from([0, 1])), min_size=2, max_size=30))
@settings(max_examples=150, deadline=None)
def test_auroc_permutation_and_monotone_invariance(pairs):
    scores = np.array([p[0] for p in pairs])
    labels = np.array([p[1] for p in pairs])
    if labels.min() == labels.max():
        return
    base = E.auroc(scores, labels)
    perm = np.random.default_rng(0).permutation(len(scores))
    assert abs(E.auroc(scores[perm], labels[perm]) - base) < 1e-12
    assert abs(E.auroc(np.exp(scores), labels) - base) < 1e-12
    assert abs(E.auroc(3.0 * scores + 2.0, labels) - base) < 1e-12


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=20),
       st.data())
@settings(max_examples=100, deadline=None)
def test_auroc_score_negation_complement(scores, data):
    scores = np.array(scores)
    if len(set(scores.tolist())) != len(scores):
        return  # ties break the exact complement identity
    labels = np.array(data.draw(st.lists(st.sampled_from([0, 1]),
                                         min_size=len(scores),
                                         max_size=len(scores))))
    if labels.min() == labels.max():
        return
    assert abs(E.auroc(scores, labels) + E.auroc(-scores, labels) - 1.0) < 1e-12


def test_auprc_all_tied_equals_prevalence():
    labels = [1, 0, 0, 0, 1, 0, 0, 0, 0, 0]
    assert abs(E.auprc([0.3] * 10, labels) - 0.2) < 1e-12


def test_auprc_positive_first_at_least_prevalence():
    rng = np.random.default_rng(1)
    for _ in range(40):
        n = rng.integers(3, 12)
        labels = rng.integers(0, 2, size=n)
        if labels.max() == 0:
            labels[0] = 1
        scores = rng.choice([0.0, 0.25, 0.5, 0.75], size=n)
        scores[np.argmax(labels == 1)] = 1.0  # a positive outranks everything
        prevalence = labels.mean()
        assert E.auprc(scores, labels) >= prevalence - 1e-12


# ------------------------------------------------------------------ threshold

def test_threshold_zero_sensitivity_one_specificity_zero():
    m = E.threshold_metrics([0.2, 0.7, 0.4], [1, 0, 1], tau=0.0)
    assert m.sensitivity == 1.0 and m.specificity == 0.0


def test_threshold_perfect_metrics():
    m = E.threshold_metrics([0.9, 0.2], [1, 0], tau=0.5)
    assert m.accuracy == 1.0 and m.precision == 1.0 and m.f1 == 1.0


def test_no_predicted_positives_precision_absent():
    m = E.threshold_metrics([0.1, 0.2], [1, 0], tau=0.9)
    assert m.precision is None
    assert m.f1 is None
    assert m.sensitivity == 0.0


def test_mse_examples():
    assert E.mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert E.mse([0.0, 0.0], [1.0, 3.0]) == 5.0
    targets = np.array([1.0, 2.0, 6.0])
    best = min(E.mse(np.full(3, c), targets) for c in np.linspace(0, 8, 1601))
    assert abs(E.mse(np.full(3, targets.mean()), targets) - best) < 1e-9


# ----------------------------------------------------------------- aggregation

def test_aggregate_hand_fixture():
    vals = [0.7, 0.8, 0.9]
    agg = E.aggregate(vals)
    se = np.std(vals, ddof=1) / np.sqrt(3)
    assert abs(agg["mean"] - 0.8) < 1e-12
    assert abs(agg["se"] - se) < 1e-12
    assert abs(agg["ci_lo"] - (0.8 - 1.96 * se)) < 1e-12
    assert abs(agg["ci_hi"] - (0.8 + 1.96 * se)) < 1e-12


def test_aggregate_skips_undefined():
    agg = E.aggregate([0.5, None, 0.7])
    assert agg["n"] == 2 and abs(agg["mean"] - 0.6) < 1e-12
    assert E.aggregate([None])["mean"] is None


# ------------------------------------------------------------------ nested CV

class CountsPipeline:
    """Cheap embedder for harness tests: per-fold vocabulary hashed counts."""

    name = "counts"

    def __init__(self, dim=24):
        self.dim = dim

    def fit_embedder(self, train_ds, task, seed, overrides=None):
        vocab = sorted({t for n in train_ds.notes for t in n.text.lower().split()})
        index = {t: hash(t) % self.dim for t in vocab}
        dim = self.dim

        def embed(texts):
            X = np.zeros((len(texts), dim))
            for i, text in enumerate(texts):
                for tok in text.lower().split():
                    if tok in index:
                        X[i, index[tok]] += 1.0
            return X

        return E.FittedEmbedder(embed)


def signal_dataset(n=300, rate=0.3, signal=0.9, seed=0):
    spec = CorpusSpec(n_docs=n, vocab_size=80, length_mean=6, length_sd=2,
                      tasks={"t": TaskGenSpec(event_rate=rate,
                                              signal_strength=signal)},
                      seed=seed)
    return generate_corpus(spec)


def test_nested_cv_learns_planted_signal():
    ds = signal_dataset()
    res = E.nested_cv(ds, "t", CountsPipeline(dim=60), "logreg",
                      predictor_grid=[{"l2": 0.1}], k_outer=3, k_inner=2, seed=1)
    mean_auroc = E.aggregate([m.auroc for m in res.folds])["mean"]
    assert mean_auroc > 0.8


def test_grid_of_one_equals_plain_kfold():
    ds = signal_dataset(n=200)
    folds = stratified_split(ds, 3, "t", seed=2)
    res = E.nested_cv(ds, "t", CountsPipeline(), "logreg",
                      predictor_grid=[{"l2": 1.0}], k_outer=3, seed=2,
                      folds=folds)
    # manual plain k-fold with the same hp
    for fold in range(3):
        test_ids, train_ids = folds.test_train_ids(fold)
        train_ds, test_ds = ds.subset(train_ids), ds.subset(test_ids)
        scores, _ = E.evaluate_fold(
            CountsPipeline(), train_ds, test_ds, "t", "logreg", [{"l2": 1.0}],
            2, E.fold_seed(2, fold, 5))
        y, obs = test_ds.labels("t")
        assert abs(E.auroc(scores[obs], y[obs]) - res.folds[fold].auroc) < 1e-12


def test_permuted_labels_null_auroc():
    ds = signal_dataset(n=2000, rate=0.3, signal=0.9, seed=3)
    rng = np.random.default_rng(7)
    perm = rng.permutation(len(ds))
    labels = [ds.notes[i].labels["t"] for i in perm]
    shuffled = Dataset(
        [ClinicalNote(n.id, n.text, {"t": labels[i]})
         for i, n in enumerate(ds.notes)], (TaskSpec("t"),))
    res = E.nested_cv(shuffled, "t", CountsPipeline(), "logreg",
                      predictor_grid=[{"l2": 1.0}], k_outer=3, k_inner=2, seed=4)
    mean_auroc = E.aggregate([m.auroc for m in res.folds])["mean"]
    assert abs(mean_auroc - 0.5) <= 0.06


def test_inner_grid_prefers_better_hyperparameter():
    ds = signal_dataset(n=240)
    res = E.nested_cv(ds, "t", CountsPipeline(), "gbt",
                      predictor_grid=[{"rounds": 0}, {"rounds": 40}],
                      k_outer=3, k_inner=2, seed=5)
    for detail in res.details:
        assert detail["chosen"]["predictor"] == {"rounds": 40}


def test_no_leakage_refit_bitwise_both_scopes():
    # Deleting outer-test rows from every fitting path must leave test
    # scores bit-identical: per-fold work is a pure function of train rows.
    ds = signal_dataset(n=160)
    folds = stratified_split(ds, 4, "t", seed=6)
    for tune in ("predictor_only", "full_pipeline"):
        res = E.nested_cv(ds, "t", CountsPipeline(), "logreg",
                          predictor_grid=[{"l2": 1.0}, {"l2": 4.0}],
                          k_outer=4, k_inner=2, seed=6, tune=tune, folds=folds)
        for fold in range(2):
            test_ids, train_ids = folds.test_train_ids(fold)
            train_only = ds.subset(train_ids)     # test rows deleted outright
            test_ds = ds.subset(test_ids)
            scores, _ = E.evaluate_fold(
                CountsPipeline(), train_only, test_ds, "t", "logreg",
                [{"l2": 1.0}, {"l2": 4.0}], 2, E.fold_seed(6, fold, 5), tune)
            assert [float(s) for s in scores] == res.details[fold]["scores"]


def test_nested_cv_deterministic():
    ds = signal_dataset(n=150)
    a = E.nested_cv(ds, "t", CountsPipeline(), "logreg", [{"l2": 1.0}],
                    k_outer=3, seed=8)
    b = E.nested_cv(ds, "t", CountsPipeline(), "logreg", [{"l2": 1.0}],
                    k_outer=3, seed=8)
    assert [m.to_dict() for m in a.folds] == [m.to_dict() for m in b.folds]
    assert [d["scores"] for d in a.details] == [d["scores"] for d in b.details]


def test_injected_folds_reproduce_exactly():
    ds = signal_dataset(n=150)
    folds = stratified_split(ds, 3, "t", seed=9)
    a = E.nested_cv(ds, "t", CountsPipeline(), "logreg", [{"l2": 1.0}],
                    seed=9, folds=folds)
    b = E.nested_cv(ds, "t", CountsPipeline(), "logreg", [{"l2": 1.0}],
                    seed=9, folds=folds)
    assert [d["scores"] for d in a.details] == [d["scores"] for d in b.details]


def test_empty_grid_errors():
    ds = signal_dataset(n=100)
    with pytest.raises(E.EvalError, match="grid"):
        E.nested_cv(ds, "t", CountsPipeline(), "logreg", predictor_grid=[],
                    k_outer=3, seed=0)


# --------------------------------------------------------------------- report

def test_report_round_trip_and_csv():
    ms = E.MetricSet(auroc=0.8, auprc=0.4, accuracy=0.9, sensitivity=0.5,
                     specificity=0.95, precision=None, f1=None, threshold=0.5)
    run = E.RunResult("aki", "foundation", "gbt", [ms, ms])
    report = E.EvalReport([run], {"seed": 1})
    d = report.to_dict()
    back = E.EvalReport.from_dict(d)
    assert back.results[0].folds[0] == ms
    csv = E.report_csv(report)
    lines = csv.strip().split("\n")
    assert len(lines) == 3  # header + 2 folds
    assert lines[1].startswith("aki,foundation,gbt,0,0.8,0.4")
    # undefined metrics serialize as empty cells
    assert ",," in lines[1]


def test_summary_matches_hand_computed_ci():
    folds = [E.MetricSet(auroc=v) for v in (0.7, 0.75, 0.8)]
    report = E.EvalReport([E.RunResult("t", "s", "p", folds)])
    rec = [r for r in E.summarize(report)["records"] if r["metric"] == "auroc"][0]
    se = np.std([0.7, 0.75, 0.8], ddof=1) / np.sqrt(3)
    assert abs(rec["mean"] - 0.75) < 1e-9
    assert abs(rec["ci_lo"] - (0.75 - 1.96 * se)) < 1e-9
    assert abs(rec["ci_hi"] - (0.75 + 1.96 * se)) < 1e-9
