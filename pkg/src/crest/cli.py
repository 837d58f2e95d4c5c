"""Command-line entry point: ``crest <subcommand> [--config FILE] [overrides]``.

Artifacts live under the work directory::

    data/corpus.jsonl, data/tokenizer.json         (gen-data, shared by all seeds)
    seed-<s>/masker.ckpt, editor.ckpt              (train-masker, train-editor)
    seed-<s>/pairs-{train,test}.jsonl              (generate; filter adds .filtered)
    seed-<s>/augmented.ckpt, agreement.ckpt        (augment, train-agreement)
    seed-<s>/reports/<subcommand>.{csv,md}         (every subcommand)
    reports/<subcommand>-seeds.{csv,md}            (mean and std over ``seeds``)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from . import pipeline as P
from .agreement import AgreementConfig, encode_pairs, fit_agreement, write_epoch_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, seed_list
from .corpus import Example, FormatError, Tokenizer, read_jsonl, read_pairs, split, write_jsonl
from .editor import BeamConfig
from .generation import budget_sweep, generate_corpus, validity_filter
from .metrics import MetricReport, NgramLM, aggregate

log = logging.getLogger("crest")

COMMANDS = ("gen-data", "train-masker", "train-editor", "generate", "filter", "augment",
            "train-agreement", "eval-metrics", "simulate", "sweep-budget")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------
# artifact helpers
# ----------------------------------------------------------------------

def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing {path}; run `crest {producer}` first")
    return path


def _load_data(cfg: RunConfig):
    corpus = read_jsonl(_need(cfg.data_dir / "corpus.jsonl", "gen-data"))
    tok = Tokenizer.from_json(json.loads(_need(cfg.data_dir / "tokenizer.json", "gen-data").read_text()))
    return corpus, tok


def _load_model(cfg: RunConfig, name: str, tok: Tokenizer, producer: str, seed: Optional[int] = None):
    model, _ = load_checkpoint(_need(cfg.run_dir(seed) / f"{name}.ckpt", producer), tok)
    return model


def _pairs_path(cfg: RunConfig, split_name: str, filtered: bool, seed: Optional[int] = None) -> Path:
    suffix = ".filtered" if filtered else ""
    return cfg.run_dir(seed) / f"pairs-{split_name}{suffix}.jsonl"


def _beam(cfg: RunConfig) -> BeamConfig:
    return BeamConfig(cfg.beam_size, cfg.no_repeat_ngram)


def _train_kw(cfg: RunConfig) -> dict:
    return dict(batch_size=cfg.batch_size, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _report(cfg: RunConfig, command: str, rep: MetricReport, seed: Optional[int] = None) -> Path:
    rep.meta = cfg.meta(command, seed)
    out = cfg.run_dir(seed) / "reports" / command
    rep.to_csv(out.with_suffix(".csv"))
    out.with_suffix(".md").write_text(rep.to_markdown())
    log.info("%s: %s", command, {k: round(v, 4) for k, (v, _) in rep.metrics.items()})
    return out.with_suffix(".csv")


def _write_seed_summary(cfg: RunConfig, command: str, reports: Dict[int, MetricReport]) -> Path:
    """Mean and std over seeds, one row per metric (plus a markdown rendering)."""
    agg = aggregate(list(reports.values()))
    out = cfg.root / "reports" / f"{command}-seeds"
    out.parent.mkdir(parents=True, exist_ok=True)
    seeds = ",".join(str(s) for s in reports)
    with out.with_suffix(".csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["command", "config_hash", "seeds", "metric", "mean", "std"])
        for k, (mu, sd) in agg.items():
            w.writerow([command, cfg.hash(), seeds, k, f"{mu:.6f}", f"{sd:.6f}"])
    lines = [f"command={command}, config_hash={cfg.hash()}, seeds={seeds}", "",
             "| metric | mean | std |", "|---|---|---|"]
    lines += [f"| {k} | {mu:.4f} | {sd:.4f} |" for k, (mu, sd) in agg.items()]
    out.with_suffix(".md").write_text("\n".join(lines) + "\n")
    return out.with_suffix(".csv")


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> None:
    corpus = P.make_corpus(cfg.task, cfg.data_seed, cfg.data_size, cfg.distractor_rate)
    tok = Tokenizer.from_examples(corpus, P.TASKS[cfg.task][0])
    write_jsonl(cfg.data_dir / "corpus.jsonl", corpus)
    (cfg.data_dir / "tokenizer.json").write_text(json.dumps(tok.to_json(), sort_keys=True))
    rep = MetricReport()
    for name in ("train", "dev", "test"):
        rep.add(f"n_{name}", len(split(corpus, name)), len(corpus))
    rep.add("vocab", len(tok), len(corpus))
    _report(cfg, "gen-data", rep)


def cmd_train_masker(cfg: RunConfig) -> None:
    corpus, tok = _load_data(cfg)
    masker = P.train_masker(corpus, tok, cfg.task, cfg.budget, cfg.seed, cfg.masker_epochs,
                            d=cfg.d, max_len=cfg.max_len, transition_penalty=cfg.transition_penalty,
                            patience=cfg.patience, **_train_kw(cfg))
    save_checkpoint(masker, cfg.run_dir() / "masker.ckpt", tok, extra=cfg.meta("train-masker"))
    rep = P.interpretability(masker, tok, cfg.task, split(corpus, "train"), split(corpus, "test"))
    _report(cfg, "train-masker", rep)


def cmd_train_editor(cfg: RunConfig) -> None:
    corpus, tok = _load_data(cfg)
    masker = _load_model(cfg, "masker", tok, "train-masker")
    editor = P.train_editor(masker, corpus, tok, cfg.editor_epochs, cfg.seed, cfg.d, **_train_kw(cfg))
    save_checkpoint(editor, cfg.run_dir() / "editor.ckpt", tok, extra=cfg.meta("train-editor"))
    rep = MetricReport()
    rep.add("train_items", len(split(corpus, "train")), len(split(corpus, "train")))
    _report(cfg, "train-editor", rep)


def cmd_generate(cfg: RunConfig) -> None:
    corpus, tok = _load_data(cfg)
    masker = _load_model(cfg, "masker", tok, "train-masker")
    editor = _load_model(cfg, "editor", tok, "train-editor")
    rep = MetricReport()
    for name in ("train", "test"):
        examples = split(corpus, name)
        pairs, counts = generate_corpus(examples, masker, editor, tok, cfg.task, _beam(cfg))
        write_jsonl(_pairs_path(cfg, name, False), pairs)
        rep.add(f"{name}_pairs", len(pairs), len(examples))
        rep.add(f"{name}_failed", counts["failed"], len(examples))
        rep.add(f"{name}_skipped", counts["skipped"], len(examples))
    _report(cfg, "generate", rep)


def cmd_filter(cfg: RunConfig) -> None:
    corpus, tok = _load_data(cfg)
    masker = _load_model(cfg, "masker", tok, "train-masker")
    oracle = P.TASKS[cfg.task][1]
    rep = MetricReport()
    for name in ("train", "test"):
        pairs = read_pairs(_need(_pairs_path(cfg, name, False), "generate"))
        kept, dropped = validity_filter(pairs, masker, tok)
        write_jsonl(_pairs_path(cfg, name, True), kept)
        rep.add(f"{name}_kept", len(kept), len(pairs))
        if pairs:
            rep.add(f"{name}_oracle_validity_before", np.mean([oracle(p.x_tilde) == p.y_c for p in pairs]), len(pairs))
        if kept:
            rep.add(f"{name}_oracle_validity_after", np.mean([oracle(p.x_tilde) == p.y_c for p in kept]), len(kept))
    _report(cfg, "filter", rep)


def cmd_augment(cfg: RunConfig) -> None:
    corpus, tok = _load_data(cfg)
    pairs = read_pairs(_need(_pairs_path(cfg, "train", cfg.use_filtered), "generate" if not cfg.use_filtered else "filter"))
    extra = [Example(f"{p.id}-cf", p.x_tilde, p.y_c, None, "train") for p in pairs]
    augmented = list(corpus) + extra
    model = P.train_masker(augmented, tok, cfg.task, cfg.budget, cfg.seed, cfg.masker_epochs,
                           d=cfg.d, max_len=cfg.max_len, transition_penalty=cfg.transition_penalty,
                           patience=cfg.patience, **_train_kw(cfg))
    save_checkpoint(model, cfg.run_dir() / "augmented.ckpt", tok, extra=cfg.meta("augment"))
    rep = P.interpretability(model, tok, cfg.task, split(corpus, "train"), split(corpus, "test"))
    rep.add("counterfactuals_added", len(extra), len(extra))
    _report(cfg, "augment", rep)


def cmd_train_agreement(cfg: RunConfig) -> None:
    corpus, tok = _load_data(cfg)
    pairs = read_pairs(_need(_pairs_path(cfg, "train", cfg.use_filtered), "generate" if not cfg.use_filtered else "filter"))
    enc = encode_pairs(pairs, tok)
    model = P.new_rationalizer(tok, cfg.task, cfg.budget, cfg.seed, cfg.d, cfg.max_len, cfg.transition_penalty)
    _, history = fit_agreement(model, enc, AgreementConfig(cfg.alpha, cfg.lam), epochs=cfg.agreement_epochs,
                               seed=cfg.seed, dev=P.labeled(split(corpus, "dev"), tok), patience=cfg.patience,
                               **_train_kw(cfg))
    save_checkpoint(model, cfg.run_dir() / "agreement.ckpt", tok, extra=cfg.meta("train-agreement"))
    write_epoch_csv(cfg.run_dir() / "reports" / "train-agreement-epochs.csv", history, cfg.meta("train-agreement"))
    rep = P.interpretability(model, tok, cfg.task, split(corpus, "train"), split(corpus, "test"))
    _report(cfg, "train-agreement", rep)


def cmd_eval_metrics(cfg: RunConfig) -> None:
    corpus, tok = _load_data(cfg)
    lm = NgramLM.train(e.tokens for e in split(corpus, "train"))
    oracle = P.TASKS[cfg.task][1]
    reports = {}
    for s in seed_list(cfg):
        path = _need(_pairs_path(cfg, "test", cfg.use_filtered, s), "generate")
        pairs = read_pairs(path)
        if len(pairs) < 2:
            raise UsageError(f"{path}: need at least two pairs to evaluate")
        reports[s] = P.counterfactual_report(pairs, oracle, lm)
        _report(cfg, "eval-metrics", reports[s], s)
    if len(reports) > 1:
        _write_seed_summary(cfg, "eval-metrics", reports)


def cmd_simulate(cfg: RunConfig) -> None:
    corpus, tok = _load_data(cfg)
    train, test = split(corpus, "train"), split(corpus, "test")
    reports = {}
    for s in seed_list(cfg):
        editor = _load_model(cfg, "editor", tok, "train-editor", s)
        merged = MetricReport()
        for name in ("masker", "augmented", "agreement"):
            path = cfg.run_dir(s) / f"{name}.ckpt"
            if not path.exists():
                continue
            model, _ = load_checkpoint(path, tok)
            rep = P.interpretability(model, tok, cfg.task, train, test, editor, _beam(cfg))
            for k, (v, n) in rep.metrics.items():
                merged.add(f"{name}.{k}", v, n)
        if not merged.metrics:
            raise UsageError(f"no rationalizer checkpoints under {cfg.run_dir(s)}")
        reports[s] = merged
        _report(cfg, "simulate", merged, s)
    if len(reports) > 1:
        _write_seed_summary(cfg, "simulate", reports)


def cmd_sweep_budget(cfg: RunConfig) -> None:
    corpus, tok = _load_data(cfg)
    lm = NgramLM.train(e.tokens for e in split(corpus, "train"))
    kw = dict(d=cfg.d, max_len=cfg.max_len, transition_penalty=cfg.transition_penalty,
              patience=cfg.patience, **_train_kw(cfg))
    rows = budget_sweep(
        split(corpus, "test"), cfg.sweep_budgets,
        lambda b: P.train_masker(corpus, tok, cfg.task, b, cfg.seed, cfg.masker_epochs, **kw),
        lambda m: P.train_editor(m, corpus, tok, cfg.editor_epochs, cfg.seed, cfg.d, **_train_kw(cfg)),
        tok, cfg.task, P.TASKS[cfg.task][1], lm, _beam(cfg))
    out = cfg.run_dir() / "reports" / "sweep-budget"
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = cfg.meta("sweep-budget")
    with out.with_suffix(".csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(meta) + ["budget", "validity", "fluency", "closeness", "n_pairs"])
        for r in rows:
            w.writerow(list(meta.values()) + [f"{r.budget:.2f}", f"{r.validity:.6f}", f"{r.fluency:.6f}",
                                              f"{r.closeness:.6f}", r.n_pairs])
    lines = [", ".join(f"{k}={v}" for k, v in meta.items()), "", "| budget | val. | fl. | clo. | n |", "|---|---|---|---|---|"]
    lines += [f"| {r.budget:.2f} | {100 * r.validity:.2f} | {r.fluency:.2f} | {100 * r.closeness:.2f} | {r.n_pairs} |"
              for r in rows]
    out.with_suffix(".md").write_text("\n".join(lines) + "\n")


HANDLERS = {
    "gen-data": cmd_gen_data, "train-masker": cmd_train_masker, "train-editor": cmd_train_editor,
    "generate": cmd_generate, "filter": cmd_filter, "augment": cmd_augment,
    "train-agreement": cmd_train_agreement, "eval-metrics": cmd_eval_metrics,
    "simulate": cmd_simulate, "sweep-budget": cmd_sweep_budget,
}

HELP = {
    "gen-data": "generate the synthetic corpus and tokenizer",
    "train-masker": "train the rationalizer used as masker",
    "train-editor": "train the span-infilling editor on masker rationales",
    "generate": "produce counterfactual pairs for the train and test splits",
    "filter": "keep pairs whose counterfactual the masker labels as intended",
    "augment": "train a rationalizer on factual plus counterfactual examples",
    "train-agreement": "train a rationalizer on pairs with rationale agreement",
    "eval-metrics": "validity, fluency, diversity and closeness of test pairs",
    "simulate": "plausibility and simulability of trained rationalizers",
    "sweep-budget": "masker/editor pairs across budgets, one metric row each",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crest", description="Counterfactual rationalization pipeline.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' settings file")
    common.add_argument("--seed", type=int, help="model seed (overrides the config)")
    common.add_argument("--budget", type=float, help="rationale budget B in (0, 1]")
    common.add_argument("--alpha", type=float, help="weight of the counterfactual loss")
    common.add_argument("--lambda", dest="lam", type=float, help="weight of the agreement penalty")
    common.add_argument("--beam-size", type=int, help="editor beam width")
    common.add_argument("--out", help="work directory for all artifacts (default $CREST_ROOT or .)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "budget": args.budget, "alpha": args.alpha, "lam": args.lam,
                 "beam_size": args.beam_size, "workdir": args.out}
    try:
        cfg = load_config(args.config, overrides)
        HANDLERS[args.command](cfg)
    except (UsageError, FileNotFoundError, CheckpointError, FormatError, ValueError) as exc:
        print(f"crest {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
