"""Operator surface: config-driven subcommands chaining corpus generation,
pretraining, fine-tuning, embedding extraction, predictor training,
evaluation, probing, and report emission.

Settings resolve flag > config file > built-in default; `--explain` prints
the resolved values with their sources and exits. All artifacts are written
atomically and embed the effective-config hash plus the tool version, so
re-running a command with identical inputs rewrites byte-identical files.

Exit codes: 0 ok, 1 config/data/compatibility error, 2 usage error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from . import baselines as B
from . import corpus as C
from . import evaluation as E
from . import finetune as FT
from . import predict as P
from . import probe as PR
from . import text as T
from . import transformer as TF
from .checkpoint import CheckpointError, load_container, save_container
from .util import atomic_write_text, config_hash

ENV_SEED = "PERILOOM_SEED"

TRANSFORMER_STRATEGIES = set(FT.STRATEGIES)
BASELINE_STRATEGIES = set(B.TRAINERS)


class ConfigError(ValueError):
    pass


class CompatError(ValueError):
    pass


# -------------------------------------------------------------- configuration

_DEMO_TASKS = {
    "death30": {"event_rate": 0.08, "signal_strength": 0.7},
    "dvt": {"event_rate": 0.05, "signal_strength": 0.7},
    "pe": {"event_rate": 0.04, "signal_strength": 0.7},
    "pneumonia": {"event_rate": 0.05, "signal_strength": 0.7},
    "aki": {"event_rate": 0.13, "signal_strength": 0.7},
    "delirium": {"event_rate": 0.47, "screening_rate": 0.4, "signal_strength": 0.7},
}

DEFAULT_CONFIG = {
    "seed": None,           # flag > file > $PERILOOM_SEED > 0
    "out_dir": "runs/default",
    "dataset": None,        # JSONL path; omitted -> generate from "corpus"
    "pretrain_dataset": None,
    "corpus": {
        "n_docs": 1200, "vocab_size": 600, "length_mean": 8.9, "length_sd": 6.9,
        "seed": None, "tasks": _DEMO_TASKS,
    },
    "pretrain_corpus": {
        "n_docs": 2400, "vocab_size": 600, "length_mean": 8.9, "length_sd": 6.9,
        "seed": None, "tasks": _DEMO_TASKS,
    },
    "arch": {
        "variant": "encoder", "n_layers": 2, "d_model": 64, "n_heads": 4,
        "d_ff": 256, "max_len": 32, "dropout": 0.1,
    },
    "pretrain": {"epochs": 3, "batch_size": 64, "lr": 1e-3, "mlm_rate": 0.15},
    "finetune": {
        "strategy": "foundation", "tasks": [], "lam": 1.0, "lam_vec": None,
        "include_self_loss": True, "epochs": 2, "batch_size": 32, "lr": 3e-4,
        "mlm_rate": 0.15,
    },
    "baseline": {"kind": "cbow", "dim": 64, "window": 4, "epochs": 15,
                 "negatives": 5, "lr": 0.05},
    "predictor": {"family": "gbt", "hp": {},
                  "grid": [{"rounds": 50, "max_depth": 3},
                           {"rounds": 100, "max_depth": 3}]},
    "eval": {"k_outer": 5, "k_inner": 3, "tune": "predictor_only",
             "threshold": 0.5, "tasks": None,
             "strategies": ["pretrained_only", "self_supervised",
                            "semi_supervised", "foundation"],
             "jobs": 1},
}


def _deep_merge(base: dict, override: dict, path="", sources=None, origin="file"):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value, where, sources, origin)
        else:
            out[key] = copy.deepcopy(value)
            if sources is not None:
                sources[where] = origin
    return out


def resolve_config(path: str | None, flag_overrides: dict):
    """flag > file > env seed > defaults; returns (config, sources)."""
    sources: dict[str, str] = {}
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc.msg})")
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config file {path}: top level must be an object")
        unknown = set(file_cfg) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        cfg = _deep_merge(cfg, file_cfg, sources=sources, origin="file")
    cfg = _deep_merge(cfg, flag_overrides, sources=sources, origin="flag")
    if cfg["seed"] is None:
        env = os.environ.get(ENV_SEED)
        if env is not None:
            try:
                cfg["seed"] = int(env)
            except ValueError:
                raise ConfigError(f"{ENV_SEED} must be an integer, got {env!r}")
            sources["seed"] = f"env:{ENV_SEED}"
        else:
            cfg["seed"] = 0
            sources.setdefault("seed", "default")
    validate_config(cfg)
    return cfg, sources


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed: must be an integer")
    if cfg["arch"]["variant"] not in (TF.ENCODER, TF.DECODER):
        raise ConfigError("arch.variant: must be 'encoder' or 'decoder'")
    strat = cfg["finetune"]["strategy"]
    if strat not in TRANSFORMER_STRATEGIES:
        raise ConfigError(f"finetune.strategy: unknown strategy {strat!r}")
    fam = cfg["predictor"]["family"]
    if fam not in ("gbt", "logreg", "rf", "head"):
        raise ConfigError(f"predictor.family: unknown family {fam!r}")
    ev = cfg["eval"]
    if ev["k_outer"] < 2 or ev["k_inner"] < 2:
        raise ConfigError("eval.k_outer and eval.k_inner must be >= 2")
    if ev["tune"] not in ("predictor_only", "full_pipeline"):
        raise ConfigError("eval.tune: must be 'predictor_only' or 'full_pipeline'")
    for s in ev["strategies"]:
        if s not in TRANSFORMER_STRATEGIES | BASELINE_STRATEGIES:
            raise ConfigError(f"eval.strategies: unknown strategy {s!r}")
    if not isinstance(cfg["predictor"]["grid"], list):
        raise ConfigError("predictor.grid: must be a list of hp objects")
    for section in ("corpus", "pretrain_corpus"):
        tasks = cfg[section]["tasks"]
        if not isinstance(tasks, dict) or not tasks:
            raise ConfigError(f"{section}.tasks: must be a non-empty object")


def effective_hash(cfg: dict) -> str:
    """Hash of the run-defining configuration. Execution-only knobs (worker
    count) are excluded so artifacts stay byte-identical across --jobs."""
    hashed = copy.deepcopy(cfg)
    hashed["eval"].pop("jobs", None)
    return config_hash(hashed)


def explain(cfg: dict, sources: dict, stream=None) -> None:
    stream = stream if stream is not None else sys.stdout
    print("# resolved configuration (flag > file > default)", file=stream)
    print(json.dumps(cfg, indent=1, sort_keys=True), file=stream)
    print("# non-default fields:", file=stream)
    for field in sorted(sources):
        print(f"#   {field}: {sources[field]}", file=stream)


# ------------------------------------------------------------------ plumbing

def _out(cfg, *parts) -> str:
    return os.path.join(cfg["out_dir"], *parts)


def _provenance(cfg: dict, command: str) -> dict:
    return {"config_hash": effective_hash(cfg), "tool_version": __version__,
            "command": command, "seed": cfg["seed"]}


def _corpus_spec(cfg: dict, section: str) -> C.CorpusSpec:
    sec = cfg[section]
    seed = sec["seed"]
    if seed is None:
        seed = cfg["seed"] + (1000 if section == "pretrain_corpus" else 0)
    tasks = {}
    for name, t in sec["tasks"].items():
        tasks[name] = C.TaskGenSpec(
            event_rate=t["event_rate"],
            screening_rate=t.get("screening_rate", 1.0),
            signal_strength=t.get("signal_strength", 1.0),
            signal_tokens=t.get("signal_tokens", 2))
    return C.CorpusSpec(n_docs=sec["n_docs"], vocab_size=sec["vocab_size"],
                        length_mean=sec["length_mean"], length_sd=sec["length_sd"],
                        tasks=tasks, seed=seed)


def _resolve_dataset(cfg: dict, which: str = "corpus") -> C.Dataset:
    path_key = "dataset" if which == "corpus" else "pretrain_dataset"
    if cfg[path_key]:
        return C.load_dataset(cfg[path_key])
    return C.generate_corpus(_corpus_spec(cfg, which))


def _ft_config(cfg: dict, section: str, seed: int, **extra) -> FT.FineTuneConfig:
    sec = dict(cfg[section])
    sec.pop("strategy", None)
    sec.pop("tasks", None)
    if sec.get("lam_vec") is not None:
        sec["lam_vec"] = tuple(sec["lam_vec"])
    sec.update(extra)
    return FT.FineTuneConfig(seed=seed, **sec)


def _baseline_hp(cfg: dict, seed: int) -> B.BaselineHyperparams:
    sec = dict(cfg["baseline"])
    sec.pop("kind", None)
    return B.BaselineHyperparams(seed=seed, **sec)


def _load_base(cfg: dict, base_path: str | None):
    path = base_path or _out(cfg, "pretrained.pltc")
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"pretrained checkpoint not found at {path} (run `pretrain` first)")
    model = FT.load_model(path)
    vocab_path = _out(cfg, "vocab.json")
    if not os.path.exists(vocab_path):
        raise FileNotFoundError(f"vocabulary not found at {vocab_path}")
    vocab = T.Vocabulary.load(vocab_path)
    expected = model.params.meta.get("vocab_hash", "")
    if expected and expected != vocab.hash():
        raise CompatError(
            f"checkpoint {path} was built with a different vocabulary "
            f"(hash {expected[:12]}.. != {vocab.hash()[:12]}..)")
    return model.params, vocab


def _load_model_for(cfg: dict, path: str | None):
    if path is None:
        candidates = [
            _out(cfg, f"model-{cfg['finetune']['strategy']}.pltc"),
            _out(cfg, "pretrained.pltc"),
        ]
        for cand in candidates:
            if os.path.exists(cand):
                path = cand
                break
        else:
            raise FileNotFoundError(
                f"no model found in {cfg['out_dir']} (tried {candidates})")
    model = FT.load_model(path)
    vocab = T.Vocabulary.load(_out(cfg, "vocab.json"))
    expected = model.params.meta.get("vocab_hash", "")
    if expected and expected != vocab.hash():
        raise CompatError(f"model {path} does not match vocab.json")
    return model, vocab, path


# ------------------------------------------------------------------- commands

def cmd_generate_corpus(cfg, args) -> int:
    which = "pretrain_corpus" if args.which == "pretrain" else "corpus"
    ds = C.generate_corpus(_corpus_spec(cfg, which))
    name = "pretrain.jsonl" if args.which == "pretrain" else "dataset.jsonl"
    path = args.out or _out(cfg, name)
    C.save_dataset(ds, path)
    st = C.corpus_stats(ds)
    stats = {
        "provenance": _provenance(cfg, "generate-corpus"),
        "n_docs": st.n_docs, "vocab_size": st.vocab_size,
        "mean_word_len": st.mean_word_len, "sd_word_len": st.sd_word_len,
        "mean_vocab_len": st.mean_vocab_len,
        "per_task": {k: {"event_rate": v.event_rate, "missing_rate": v.missing_rate}
                     for k, v in st.per_task.items()},
    }
    atomic_write_text(os.path.splitext(path)[0] + ".stats.json",
                      json.dumps(stats, indent=1, sort_keys=True) + "\n")
    print(f"wrote {path} ({st.n_docs} notes, |V|={st.vocab_size})")
    return 0


def cmd_pretrain(cfg, args) -> int:
    ds = _resolve_dataset(cfg, "pretrain_corpus")
    vocab = T.build_vocab(ds, min_count=1)
    arch = TF.ArchConfig(vocab_size=len(vocab), seed=cfg["seed"], **cfg["arch"])
    ft_cfg = _ft_config(cfg, "pretrain", cfg["seed"])
    params = FT.pretrain(arch, ds, ft_cfg, vocab)
    vocab.save(_out(cfg, "vocab.json"))
    prov = _provenance(cfg, "pretrain")
    prov["loss_trace"] = params.meta.get("loss_trace", [])
    prov["corpus_hash"] = ds.content_hash()
    FT.save_model(_out(cfg, "pretrained.pltc"),
                  FT.FineTunedModel(params, {}, prov))
    print(f"wrote {_out(cfg, 'pretrained.pltc')} "
          f"(final loss {prov['loss_trace'][-1]:.4f})" if prov["loss_trace"]
          else f"wrote {_out(cfg, 'pretrained.pltc')}")
    return 0


def cmd_finetune(cfg, args) -> int:
    params, vocab = _load_base(cfg, args.base)
    ds = _resolve_dataset(cfg)
    strategy = cfg["finetune"]["strategy"]
    tasks = list(cfg["finetune"]["tasks"]) or [t.name for t in ds.tasks]
    ft_cfg = _ft_config(cfg, "finetune", cfg["seed"], strategy=strategy,
                        tasks=tuple(tasks))
    if strategy == FT.PRETRAINED_ONLY:
        model = FT.FineTunedModel(params, {}, {})
    elif strategy == FT.SELF_SUPERVISED:
        model = FT.finetune_self_supervised(params, ds, ft_cfg, vocab)
    elif strategy == FT.SEMI_SUPERVISED:
        model = FT.finetune_semi_supervised(params, ds, tasks[0], ft_cfg, vocab)
    else:
        model = FT.finetune_foundation(params, ds, tasks, ft_cfg, vocab)
    model.params.meta["vocab_hash"] = vocab.hash()
    model.provenance.update(_provenance(cfg, "finetune"))
    path = args.out or _out(cfg, f"model-{strategy}.pltc")
    FT.save_model(path, model)
    print(f"wrote {path}")
    return 0


def cmd_embed(cfg, args) -> int:
    model, vocab, model_path = _load_model_for(cfg, args.model)
    ds = _resolve_dataset(cfg)
    X = model.embed(vocab, ds.texts())
    prov = _provenance(cfg, "embed")
    prov["model"] = os.path.basename(model_path)
    prov["corpus_hash"] = ds.content_hash()
    path = args.out or _out(cfg, "embeddings.pltc")
    save_container(path, {"embeddings": X.astype(np.float32)},
                   meta={"format": "embeddings", "ids": [n.id for n in ds.notes],
                         "dim": int(X.shape[1])},
                   provenance=prov)
    print(f"wrote {path} ({X.shape[0]} x {X.shape[1]})")
    return 0


def cmd_train_predictor(cfg, args) -> int:
    path = args.embeddings or _out(cfg, "embeddings.pltc")
    tensors, meta, _ = load_container(path)
    if meta.get("format") != "embeddings":
        raise ConfigError(f"{path}: not an embeddings container")
    X = tensors["embeddings"].astype(np.float64)
    ds = _resolve_dataset(cfg)
    ids = meta["ids"]
    if ids != [n.id for n in ds.notes]:
        raise CompatError("embeddings ids do not match the dataset rows")
    task = args.task or (cfg["eval"]["tasks"] or [ds.tasks[0].name])[0]
    y, mask = ds.labels(task)
    family = cfg["predictor"]["family"]
    model = E.fit_predictor(family, X[mask], y[mask], cfg["predictor"]["hp"],
                            cfg["seed"])
    out = args.out or _out(cfg, f"predictor-{task}-{family}.pltc")
    P.save_predictor(out, model, provenance=_provenance(cfg, "train-predictor"))
    print(f"wrote {out}")
    return 0


def _strategy_units(cfg, strategies, tasks):
    """Work units: per-task for semi-supervised, shared-fold otherwise."""
    units = []
    for strategy in strategies:
        if strategy == FT.SEMI_SUPERVISED:
            units.extend((strategy, task) for task in tasks)
        else:
            units.append((strategy, None))
    return units


def _run_eval_unit(payload):
    cfg, strategy, task, tasks = payload
    ds = _resolve_dataset(cfg)
    ev = cfg["eval"]
    seed = cfg["seed"]
    grid = cfg["predictor"]["grid"] or [{}]
    family = cfg["predictor"]["family"]
    if strategy in BASELINE_STRATEGIES:
        pipeline = E.BaselinePipeline(strategy, _baseline_hp(cfg, seed))
    else:
        params, vocab = _load_base(cfg, None)
        ft_cfg = _ft_config(cfg, "finetune", seed, strategy=strategy,
                            tasks=tuple(tasks))
        pipeline = E.StrategyPipeline(strategy, params, vocab, ft_cfg,
                                      foundation_tasks=tasks)
    if strategy == FT.SEMI_SUPERVISED:
        run = E.nested_cv(ds, task, pipeline, family, grid,
                          k_outer=ev["k_outer"], k_inner=ev["k_inner"],
                          seed=seed, tune=ev["tune"], threshold=ev["threshold"])
        return [run]
    return E.nested_cv_multitask(ds, tasks, pipeline, family, grid,
                                 k_outer=ev["k_outer"], k_inner=ev["k_inner"],
                                 seed=seed, threshold=ev["threshold"])


def cmd_evaluate(cfg, args) -> int:
    ds = _resolve_dataset(cfg)
    ev = cfg["eval"]
    tasks = ev["tasks"] or [t.name for t in ds.tasks]
    strategies = ev["strategies"]
    if any(s in TRANSFORMER_STRATEGIES for s in strategies):
        _load_base(cfg, None)  # fail fast with a clear message
    units = _strategy_units(cfg, strategies, tasks)
    payloads = [(cfg, s, t, tasks) for s, t in units]
    if ev["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=ev["jobs"]) as pool:
            unit_results = list(pool.map(_run_eval_unit, payloads))
    else:
        unit_results = [_run_eval_unit(p) for p in payloads]
    results = [run for runs in unit_results for run in runs]
    report = E.EvalReport(results, {
        **_provenance(cfg, "evaluate"),
        "tasks": tasks, "strategies": strategies,
        "predictor": cfg["predictor"]["family"],
        "grid": cfg["predictor"]["grid"],
        "k_outer": ev["k_outer"], "k_inner": ev["k_inner"], "tune": ev["tune"],
    })
    path = _out(cfg, "eval_results.json")
    atomic_write_text(path, json.dumps(report.to_dict(), indent=1,
                                       sort_keys=True) + "\n")
    print(f"wrote {path} ({len(results)} runs)")
    return 0


def cmd_probe(cfg, args) -> int:
    model, vocab, _ = _load_model_for(cfg, args.model)
    mode = args.mode
    if mode == "auto":
        mode = "fill" if model.params.config.variant == TF.ENCODER else "complete"
    if mode == "fill":
        result = PR.fill_mask(model, vocab, args.prompt, k=args.k)
    else:
        result = PR.complete(model, vocab, args.prompt,
                             max_new_tokens=args.max_new_tokens)
    if args.json:
        print(json.dumps(result.to_dict(), indent=1, sort_keys=True))
    else:
        print(f"prompt: {result.prompt}")
        if mode == "fill":
            for token, prob in result.candidates:
                print(f"  {prob:8.5f}  {token}")
        else:
            print(f"completion: {result.continuation}")
    return 0


# ------------------------------------------------------------------ reporting

def _svg_bar_chart(summary: dict, metric: str = "auroc") -> str:
    """Minimal grouped bar chart with standard-error whiskers."""
    records = [r for r in summary["records"] if r["metric"] == metric
               and r["mean"] is not None]
    tasks = sorted({r["task"] for r in records})
    strategies = sorted({r["strategy"] for r in records})
    if not records:
        return "<svg xmlns='http://www.w3.org/2000/svg' width='10' height='10'/>"
    bar_w, gap, group_gap, h, margin = 26, 4, 30, 260, 50
    group_w = len(strategies) * (bar_w + gap) + group_gap
    width = margin * 2 + len(tasks) * group_w
    height = h + 2 * margin
    palette = ["#4878a8", "#e49444", "#5ba053", "#c23b3b", "#8268a8", "#999999"]
    lut = {(r["task"], r["strategy"]): r for r in records}
    parts = [f"<svg xmlns='http://www.w3.org/2000/svg' width='{width}' "
             f"height='{height}' font-family='sans-serif' font-size='11'>"]
    parts.append(f"<text x='{margin}' y='20' font-size='14'>mean {metric} "
                 f"per task and strategy (whiskers: +/-1 SE)</text>")
    # y axis: 0..1
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = margin + h - tick * h
        parts.append(f"<line x1='{margin - 4}' y1='{y:.1f}' x2='{width - margin}' "
                     f"y2='{y:.1f}' stroke='#dddddd'/>")
        parts.append(f"<text x='{margin - 10}' y='{y + 4:.1f}' "
                     f"text-anchor='end'>{tick:g}</text>")
    for ti, task in enumerate(tasks):
        x0 = margin + ti * group_w
        for si, strategy in enumerate(strategies):
            rec = lut.get((task, strategy))
            if rec is None:
                continue
            x = x0 + si * (bar_w + gap)
            bh = rec["mean"] * h
            y = margin + h - bh
            color = palette[si % len(palette)]
            parts.append(f"<rect x='{x:.1f}' y='{y:.1f}' width='{bar_w}' "
                         f"height='{bh:.1f}' fill='{color}'><title>"
                         f"{task}/{strategy}: {rec['mean']:.3f}</title></rect>")
            if rec["se"]:
                cx = x + bar_w / 2
                y_lo = margin + h - (rec["mean"] - rec["se"]) * h
                y_hi = margin + h - (rec["mean"] + rec["se"]) * h
                parts.append(f"<line x1='{cx:.1f}' y1='{y_lo:.1f}' x2='{cx:.1f}' "
                             f"y2='{y_hi:.1f}' stroke='black'/>")
                for yy in (y_lo, y_hi):
                    parts.append(f"<line x1='{cx - 4:.1f}' y1='{yy:.1f}' "
                                 f"x2='{cx + 4:.1f}' y2='{yy:.1f}' stroke='black'/>")
        parts.append(f"<text x='{x0 + (group_w - group_gap) / 2:.1f}' "
                     f"y='{margin + h + 16}' text-anchor='middle'>{task}</text>")
    for si, strategy in enumerate(strategies):
        x = margin + si * 150
        y = height - 12
        color = palette[si % len(palette)]
        parts.append(f"<rect x='{x}' y='{y - 10}' width='12' height='12' "
                     f"fill='{color}'/>")
        parts.append(f"<text x='{x + 16}' y='{y}'>{strategy}</text>")
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_report(cfg, args) -> int:
    directory = args.dir or cfg["out_dir"]
    path = os.path.join(directory, "eval_results.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no eval_results.json in {directory} "
                                "(run `evaluate` first)")
    with open(path, "r", encoding="utf-8") as fh:
        report = E.EvalReport.from_dict(json.load(fh))
    summary = E.summarize(report)
    summary["provenance"] = _provenance(cfg, "report")
    atomic_write_text(os.path.join(directory, "report.csv"),
                      E.report_csv(report))
    atomic_write_text(os.path.join(directory, "summary.json"),
                      json.dumps(summary, indent=1, sort_keys=True) + "\n")
    atomic_write_text(os.path.join(directory, "chart.svg"),
                      _svg_bar_chart(summary, metric=args.metric))
    print(f"wrote {directory}/report.csv, summary.json, chart.svg")
    return 0


# ----------------------------------------------------------------- entrypoint

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="periloom",
        description="postoperative-risk prediction from procedure notes: "
                    "synthetic corpora, embeddings, fine-tuning, evaluation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="global seed override")
        p.add_argument("--out-dir", help="artifact directory override")
        p.add_argument("--dataset", help="dataset JSONL path override")
        p.add_argument("--explain", action="store_true",
                       help="print resolved config with sources and exit")

    p = sub.add_parser("generate-corpus", help="write a synthetic dataset JSONL")
    common(p)
    p.add_argument("--which", choices=["target", "pretrain"], default="target")
    p.add_argument("--out", help="output JSONL path")

    p = sub.add_parser("pretrain", help="pretrain the transformer body")
    common(p)
    p.add_argument("--epochs", type=int, help="pretraining epochs override")

    p = sub.add_parser("finetune", help="fine-tune under a strategy")
    common(p)
    p.add_argument("--strategy", choices=sorted(TRANSFORMER_STRATEGIES))
    p.add_argument("--lambda", dest="lam", type=float,
                   help="supervised loss weight (semi-supervised)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--task", help="task for semi-supervised tuning")
    p.add_argument("--base", help="pretrained checkpoint path")
    p.add_argument("--out", help="output model path")

    p = sub.add_parser("embed", help="extract document embeddings")
    common(p)
    p.add_argument("--model", help="model checkpoint path")
    p.add_argument("--out", help="output embeddings path")

    p = sub.add_parser("train-predictor", help="fit a predictor on embeddings")
    common(p)
    p.add_argument("--embeddings", help="embeddings container path")
    p.add_argument("--task", help="task to predict")
    p.add_argument("--out", help="output predictor path")

    p = sub.add_parser("evaluate", help="nested-CV strategy comparison")
    common(p)
    p.add_argument("--k-outer", type=int)
    p.add_argument("--k-inner", type=int)
    p.add_argument("--tasks", help="comma-separated task subset")
    p.add_argument("--strategies", help="comma-separated strategy subset")
    p.add_argument("--jobs", type=int, help="parallel worker processes")

    p = sub.add_parser("probe", help="fill-mask or complete a prompt")
    common(p)
    p.add_argument("--model", help="model checkpoint path")
    p.add_argument("--prompt", required=True)
    p.add_argument("--mode", choices=["auto", "fill", "complete"], default="auto")
    p.add_argument("-k", type=int, default=5, help="top-k candidates")
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("report", help="emit CSV/JSON summary and SVG chart")
    common(p)
    p.add_argument("--dir", help="evaluate output directory")
    p.add_argument("--metric", default="auroc")
    return parser


def _flag_overrides(args) -> dict:
    over: dict = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "out_dir", None):
        over["out_dir"] = args.out_dir
    if getattr(args, "dataset", None):
        over["dataset"] = args.dataset
    ft = {}
    if getattr(args, "strategy", None):
        ft["strategy"] = args.strategy
    if getattr(args, "lam", None) is not None:
        ft["lam"] = args.lam
    if getattr(args, "epochs", None) is not None:
        if args.command == "pretrain":
            over.setdefault("pretrain", {})["epochs"] = args.epochs
        else:
            ft["epochs"] = args.epochs
    if getattr(args, "task", None) and args.command == "finetune":
        ft["tasks"] = [args.task]
    if ft:
        over["finetune"] = ft
    ev = {}
    for flag, key in (("k_outer", "k_outer"), ("k_inner", "k_inner"),
                      ("jobs", "jobs")):
        if getattr(args, flag, None) is not None:
            ev[key] = getattr(args, flag)
    if getattr(args, "tasks", None) and args.command == "evaluate":
        ev["tasks"] = [t.strip() for t in args.tasks.split(",") if t.strip()]
    if getattr(args, "strategies", None):
        ev["strategies"] = [s.strip() for s in args.strategies.split(",")
                            if s.strip()]
    if ev:
        over["eval"] = ev
    return over


COMMANDS = {
    "generate-corpus": cmd_generate_corpus,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "embed": cmd_embed,
    "train-predictor": cmd_train_predictor,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, sources = resolve_config(args.config, _flag_overrides(args))
        if args.explain:
            explain(cfg, sources)
            return 0
        os.makedirs(cfg["out_dir"], exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except CompatError as exc:
        print(f"error: compat: {exc}", file=sys.stderr)
        return 1
    except (C.CorpusError, T.TextError, FT.FineTuneError, TF.ModelError,
            B.BaselineError, P.PredictError, E.EvalError, PR.ProbeError,
            CheckpointError, FileNotFoundError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # invariant violation
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
