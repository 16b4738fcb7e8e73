"""Dataset schema, synthetic procedure-note generation, and stratified folds.

Notes are single-sentence procedure descriptions. Labels are per-task and
ternary: positive, negative, or missing (a screening that never happened).
The generator composes notes from a fixed template grammar and plants a
per-task token signal into positives, so downstream separability is known
by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .util import STREAM_DATA, STREAM_SPLIT, canonical_json, rng_stream, sha256_hex

BINARY = "binary"
MULTICLASS = "multiclass"
REGRESSION = "regression"

POSITIVE = 1
NEGATIVE = 0
# Missing labels are represented as None in memory and null in JSONL.


class CorpusError(ValueError):
    """Invalid corpus spec, dataset file, or split request."""


@dataclass(frozen=True)
class TaskSpec:
    """One prediction target: name plus label kind (drives the loss)."""

    name: str
    kind: str = BINARY
    n_classes: int = 2

    def __post_init__(self):
        if self.kind not in (BINARY, MULTICLASS, REGRESSION):
            raise CorpusError(f"task {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == MULTICLASS and self.n_classes < 2:
            raise CorpusError(f"task {self.name!r}: multiclass needs n_classes >= 2")


DEFAULT_TASKS: tuple[TaskSpec, ...] = (
    TaskSpec("death30"),
    TaskSpec("dvt"),
    TaskSpec("pe"),
    TaskSpec("pneumonia"),
    TaskSpec("aki"),
    TaskSpec("delirium"),
)


@dataclass(frozen=True)
class ClinicalNote:
    """One de-identified note: id, text, and a label slot for every task."""

    id: str
    text: str
    labels: Mapping[str, int | float | None]


class Dataset:
    """Immutable collection of notes plus the task registry they label."""

    def __init__(self, notes: Iterable[ClinicalNote], tasks: Sequence[TaskSpec] = DEFAULT_TASKS):
        self.tasks = tuple(tasks)
        task_names = [t.name for t in self.tasks]
        if len(set(task_names)) != len(task_names):
            raise CorpusError("duplicate task names in registry")
        normalized = []
        for note in notes:
            labels = dict(note.labels)
            unknown = set(labels) - set(task_names)
            if unknown:
                raise CorpusError(
                    f"note {note.id!r}: unknown task keys {sorted(unknown)}; "
                    f"registry is {task_names}")
            for name in task_names:
                labels.setdefault(name, None)
            if not note.text.split():
                raise CorpusError(f"note {note.id!r}: empty text after tokenization")
            normalized.append(ClinicalNote(note.id, note.text, labels))
        self.notes = tuple(normalized)
        self._by_id = {n.id: n for n in self.notes}
        if len(self._by_id) != len(self.notes):
            raise CorpusError("duplicate note ids")

    def __len__(self):
        return len(self.notes)

    def __iter__(self):
        return iter(self.notes)

    def __getitem__(self, i):
        return self.notes[i]

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise CorpusError(f"unknown task {name!r}; registry is {[t.name for t in self.tasks]}")

    def texts(self) -> list[str]:
        return [n.text for n in self.notes]

    def labels(self, task: str) -> tuple[np.ndarray, np.ndarray]:
        """(values, observed_mask) for a task; values are 0 where missing."""
        self.task(task)
        raw = [n.labels[task] for n in self.notes]
        mask = np.array([v is not None for v in raw], dtype=bool)
        vals = np.array([0.0 if v is None else float(v) for v in raw])
        return vals, mask

    def subset(self, ids: Iterable[str]) -> "Dataset":
        return Dataset([self._by_id[i] for i in ids], self.tasks)

    def content_hash(self) -> str:
        return sha256_hex(serialize_jsonl(self).encode("utf-8"))


# ---------------------------------------------------------------- generation

# Word stock for the template grammar. Procedure cores are stem+suffix
# products; modifiers and connectors pad notes out to the target length.
_ANATOMY = [
    "gastr", "hepat", "nephr", "arthr", "col", "cholecyst", "append", "hyster",
    "thyroid", "mastoid", "lamin", "crani", "rhin", "septo", "tympan", "angi",
    "valvul", "carot", "femor", "tibi", "humer", "vertebr", "disc", "menisc",
    "retin", "corne", "lens", "prostat", "ureter", "cyst", "bronch", "lob",
    "pleur", "hernio", "spleno", "pancreat", "duoden", "ile", "jejun", "rect",
    "an", "esophag", "laryng", "trache", "parotid", "submandibul", "orbit",
    "maxill", "mandibul", "clavicul", "scapul", "radi", "uln", "carp", "tars",
    "patell", "acetabul", "sacr", "cocc", "stern",
]
_PROC_SUFFIX = [
    "ectomy", "oscopy", "otomy", "oplasty", "ostomy", "odesis", "opexy",
    "orrhaphy", "olysis", "ocentesis", "ography", "otripsy",
]
_MOD_STEM = [
    "proximal", "distal", "anterior", "posterior", "medial", "lateral",
    "superior", "inferior", "partial", "total", "subtotal", "radical",
    "open", "closed", "percutaneous", "endoscopic", "laparoscopic", "robotic",
    "diagnostic", "therapeutic", "primary", "secondary", "staged", "elective",
    "urgent", "complex", "simple", "extended", "limited", "wide",
    "superficial", "deep", "guided", "assisted", "combined", "isolated",
]
_MOD_SUFFIX = ["", "ly"]
_LATERALITY = ["left", "right", "bilateral"]
_CONNECTORS = ["with", "and", "of", "for", "plus", "under", "via", "including"]
_EXTRAS = [
    "repair", "removal", "excision", "biopsy", "placement", "revision",
    "exchange", "insertion", "drainage", "exploration", "reconstruction",
    "debridement", "fixation", "release", "fusion", "graft", "stent",
    "catheter", "implant", "mesh", "screw", "plate", "pin", "anchor",
    "anesthesia", "sedation", "block", "monitoring", "possible", "planned",
]
# Curated per-task risk-marker pool; synthetic markers extend it when a spec
# declares more tasks than the pool covers.
_SIGNAL_POOL = [
    "hospice", "metastatic", "anticoagulated", "thrombophilic", "embolic",
    "hypoxic", "aspirating", "ventilated", "oliguric", "dialysis",
    "disoriented", "sundowning", "septic", "cachectic", "moribund",
    "infarcted", "ischemic", "azotemic", "febrile", "obtunded",
    "coagulopathic", "hemorrhagic", "uremic", "delirious",
]

_MIN_CORE = 8
_MIN_MODIFIERS = 4


@dataclass(frozen=True)
class TaskGenSpec:
    """Generator knobs for one task's label channel."""

    event_rate: float
    screening_rate: float = 1.0
    signal_strength: float = 1.0  # P(positive note carries a signal token)
    signal_tokens: int = 2


# Event rates follow the published cohort; delirium is screened on a subset
# and its rate is conditional on screening.
DEFAULT_TASK_GEN: dict[str, TaskGenSpec] = {
    "death30": TaskGenSpec(event_rate=0.02),
    "dvt": TaskGenSpec(event_rate=0.006),
    "pe": TaskGenSpec(event_rate=0.003),
    "pneumonia": TaskGenSpec(event_rate=0.006),
    "aki": TaskGenSpec(event_rate=0.13),
    "delirium": TaskGenSpec(event_rate=0.47, screening_rate=0.143),
}


@dataclass(frozen=True)
class CorpusSpec:
    """Everything generate_corpus needs; a (spec, seed) pair is the corpus."""

    n_docs: int = 84_875
    vocab_size: int = 3_203
    length_mean: float = 8.9
    length_sd: float = 6.9
    tasks: Mapping[str, TaskGenSpec] = field(default_factory=lambda: dict(DEFAULT_TASK_GEN))
    seed: int = 0

    def validate(self) -> None:
        if self.n_docs < 1:
            raise CorpusError("n_docs: must be >= 1")
        if self.length_mean < 1:
            raise CorpusError("length_mean: must be >= 1")
        if self.length_sd < 0:
            raise CorpusError("length_sd: must be >= 0")
        if not self.tasks:
            raise CorpusError("tasks: at least one task channel required")
        for name, gen in self.tasks.items():
            if not 0.0 <= gen.event_rate <= 1.0:
                raise CorpusError(f"tasks[{name!r}].event_rate: {gen.event_rate} not in [0, 1]")
            if not 0.0 <= gen.screening_rate <= 1.0:
                raise CorpusError(
                    f"tasks[{name!r}].screening_rate: {gen.screening_rate} not in [0, 1]")
            if not 0.0 <= gen.signal_strength <= 1.0:
                raise CorpusError(
                    f"tasks[{name!r}].signal_strength: {gen.signal_strength} not in [0, 1]")
            if gen.signal_tokens < 1:
                raise CorpusError(f"tasks[{name!r}].signal_tokens: must be >= 1")
        n_signal = sum(g.signal_tokens for g in self.tasks.values())
        floor = len(_LATERALITY) + len(_CONNECTORS) + _MIN_CORE + _MIN_MODIFIERS + n_signal
        if self.vocab_size < floor:
            raise CorpusError(
                f"vocab_size: {self.vocab_size} too small for template grammar "
                f"(needs >= {floor} for {len(self.tasks)} tasks)")


@dataclass(frozen=True)
class Grammar:
    lateralities: tuple[str, ...]
    connectors: tuple[str, ...]
    cores: tuple[str, ...]
    modifiers: tuple[str, ...]
    signal_tokens: dict[str, tuple[str, ...]]  # task name -> disjoint token set


def build_grammar(spec: CorpusSpec) -> Grammar:
    """Fixed word lists sized so the realized vocabulary tracks the target."""
    spec.validate()
    signal: dict[str, tuple[str, ...]] = {}
    pool = list(_SIGNAL_POOL)
    cursor = 0
    for name in sorted(spec.tasks):
        want = spec.tasks[name].signal_tokens
        toks = []
        for _ in range(want):
            if cursor < len(pool):
                toks.append(pool[cursor])
            else:
                toks.append(f"riskmarker{cursor}")
            cursor += 1
        signal[name] = tuple(toks)

    n_signal = cursor
    budget = spec.vocab_size - len(_LATERALITY) - len(_CONNECTORS) - n_signal
    # Cores get ~70% of the remaining budget, modifiers the rest.
    n_cores = max(_MIN_CORE, int(round(budget * 0.7)))
    n_mods = max(_MIN_MODIFIERS, budget - n_cores)

    cores = []
    for suffix in _PROC_SUFFIX:
        for stem in _ANATOMY:
            cores.append(stem + suffix)
    serial = 0
    while len(cores) < n_cores:
        cores.append(f"procedure{serial}")
        serial += 1

    mods = list(_EXTRAS)
    for suffix in _MOD_SUFFIX:
        for stem in _MOD_STEM:
            mods.append(stem + suffix if suffix else stem)
    serial = 0
    while len(mods) < n_mods:
        mods.append(f"qualifier{serial}")
        serial += 1

    taken = set()
    for toks in signal.values():
        taken.update(toks)
    cores = [c for c in cores if c not in taken][:n_cores]
    mods = [m for m in mods if m not in taken][:n_mods]
    return Grammar(tuple(_LATERALITY), tuple(_CONNECTORS), tuple(cores), tuple(mods), signal)


def _compose_note(rng: np.random.Generator, grammar: Grammar, length: int) -> list[str]:
    """<laterality?> <core> <modifier*> clauses, joined by connectors.

    Clause order is shuffled per note: the source data presents procedures
    in an arbitrary order, so the generator does too.
    """
    clauses: list[list[str]] = []
    total = 0
    while total < length:
        clause = []
        if rng.random() < 0.3:
            clause.append(grammar.lateralities[rng.integers(len(grammar.lateralities))])
        clause.append(grammar.cores[rng.integers(len(grammar.cores))])
        n_mod = int(rng.geometric(0.45)) - 1
        for _ in range(n_mod):
            clause.append(grammar.modifiers[rng.integers(len(grammar.modifiers))])
        clauses.append(clause)
        total += len(clause) + 1  # +1 for the joining connector
    order = rng.permutation(len(clauses))
    tokens: list[str] = []
    for j, idx in enumerate(order):
        if j > 0:
            tokens.append(grammar.connectors[rng.integers(len(grammar.connectors))])
        tokens.extend(clauses[idx])
    return tokens[:length]


def generate_corpus(spec: CorpusSpec) -> Dataset:
    """Deterministic synthetic corpus matching the spec's summary statistics."""
    spec.validate()
    grammar = build_grammar(spec)
    task_names = sorted(spec.tasks)
    tasks = tuple(TaskSpec(n) for n in task_names)
    rng = rng_stream(spec.seed, STREAM_DATA)

    lengths = np.maximum(1, np.rint(
        rng.normal(spec.length_mean, spec.length_sd, size=spec.n_docs))).astype(int)
    notes = []
    width = max(6, len(str(spec.n_docs)))
    for i in range(spec.n_docs):
        tokens = _compose_note(rng, grammar, int(lengths[i]))
        labels: dict[str, int | None] = {}
        for name in task_names:
            gen = spec.tasks[name]
            if rng.random() >= gen.screening_rate:
                labels[name] = None
                continue
            positive = rng.random() < gen.event_rate
            labels[name] = POSITIVE if positive else NEGATIVE
            if positive and rng.random() < gen.signal_strength:
                toks = grammar.signal_tokens[name]
                tokens.append(toks[rng.integers(len(toks))])
        notes.append(ClinicalNote(f"note-{i:0{width}d}", " ".join(tokens), labels))
    return Dataset(notes, tasks)


# --------------------------------------------------------------------- stats

@dataclass(frozen=True)
class TaskStats:
    event_rate: float | None  # None when every label is missing
    missing_rate: float


@dataclass(frozen=True)
class CorpusStats:
    n_docs: int
    vocab_size: int
    mean_word_len: float
    sd_word_len: float
    mean_vocab_len: float
    sd_vocab_len: float
    per_task: dict[str, TaskStats]


def corpus_stats(dataset: Dataset) -> CorpusStats:
    """Corpus summary: |V|, token/distinct-token lengths, per-task rates."""
    if len(dataset) == 0:
        raise CorpusError("cannot compute statistics of an empty dataset")
    vocab: set[str] = set()
    word_lens = np.empty(len(dataset))
    vocab_lens = np.empty(len(dataset))
    for i, note in enumerate(dataset):
        toks = note.text.lower().split()
        vocab.update(toks)
        word_lens[i] = len(toks)
        vocab_lens[i] = len(set(toks))
    per_task = {}
    for t in dataset.tasks:
        vals, mask = dataset.labels(t.name)
        observed = int(mask.sum())
        rate = float(vals[mask].mean()) if observed else None
        per_task[t.name] = TaskStats(rate, 1.0 - observed / len(dataset))
    return CorpusStats(
        n_docs=len(dataset),
        vocab_size=len(vocab),
        mean_word_len=float(word_lens.mean()),
        sd_word_len=float(word_lens.std()),
        mean_vocab_len=float(vocab_lens.mean()),
        sd_vocab_len=float(vocab_lens.std()),
        per_task=per_task,
    )


# ------------------------------------------------------------------ JSONL IO

def serialize_jsonl(dataset: Dataset) -> str:
    lines = []
    for note in dataset:
        labels = {t.name: note.labels[t.name] for t in dataset.tasks}
        lines.append(canonical_json({"id": note.id, "text": note.text, "labels": labels}))
    return "\n".join(lines) + ("\n" if lines else "")


def save_dataset(dataset: Dataset, path) -> None:
    from .util import atomic_write_text

    atomic_write_text(path, serialize_jsonl(dataset))


def load_dataset(path, tasks: Sequence[TaskSpec] = DEFAULT_TASKS) -> Dataset:
    """Parse a JSONL dataset; errors carry the 1-based offending line number."""
    notes = []
    registry = [t.name for t in tasks]
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                raise CorpusError(f"line {lineno}: object must have 'id' and 'text'")
            if "labels" not in obj:
                raise CorpusError(f"line {lineno}: missing 'labels'")
            labels = obj["labels"]
            if not isinstance(labels, dict):
                raise CorpusError(f"line {lineno}: 'labels' must be an object")
            unknown = set(labels) - set(registry)
            if unknown:
                raise CorpusError(
                    f"line {lineno}: unknown task key(s) {sorted(unknown)}; "
                    f"registry is {registry}")
            notes.append(ClinicalNote(str(obj["id"]), str(obj["text"]), labels))
    return Dataset(notes, tasks)


# ------------------------------------------------------------------ splitting

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: Mapping[str, int]  # doc id -> fold index
    task: str

    def fold_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.fold_of.items() if f == fold]

    def test_train_ids(self, fold: int) -> tuple[list[str], list[str]]:
        test = [i for i, f in self.fold_of.items() if f == fold]
        train = [i for i, f in self.fold_of.items() if f != fold]
        return test, train


def stratified_split(dataset: Dataset, k: int, task: str, seed: int) -> FoldAssignment:
    """Deal each label class round-robin so fold prevalences match globally.

    A single fold cursor runs across the classes (positives, negatives,
    missing) so fold sizes stay balanced; per-class counts per fold differ
    from the proportional share by at most 1.
    """
    if k < 2:
        raise CorpusError("k: fold count must be >= 2")
    if k > len(dataset):
        raise CorpusError(f"k: {k} folds but only {len(dataset)} documents")
    dataset.task(task)
    vals, mask = dataset.labels(task)
    ids = np.array([n.id for n in dataset.notes])
    classes = {
        "positive": ids[mask & (vals == 1)],
        "negative": ids[mask & (vals == 0)],
    }
    for cls in ("positive", "negative"):
        if len(classes[cls]) == 0:
            raise CorpusError(f"task {task!r}: no {cls} examples to stratify")
    rng = rng_stream(seed, STREAM_SPLIT)
    fold_of: dict[str, int] = {}
    cursor = 0
    for cls in ("positive", "negative", "missing"):
        members = classes[cls] if cls != "missing" else ids[~mask]
        members = list(members)
        rng.shuffle(members)
        for doc_id in members:
            fold_of[doc_id] = cursor % k
            cursor += 1
    return FoldAssignment(k, fold_of, task)
