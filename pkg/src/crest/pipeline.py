"""Training and evaluation recipes shared by the command line and the test suite."""

from __future__ import annotations

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import rationalizer as R
from .corpus import (NLI_LABELS, SENTIMENT_LABELS, SEP, Example, Tokenizer, gen_nli_corpus,
                     gen_sentiment_corpus, nli_oracle, sentiment_oracle, split)
from .editor import BeamConfig, EditorModel, apply_sentinels, generate
from .editor import fit as fit_editor
from .generation import label_flip
from .metrics import (MetricReport, NgramLM, closeness, counterfactual_simulability, fluency_ppl,
                      forward_simulability, mean_plausibility, self_bleu, train_student, validity)

log = logging.getLogger(__name__)

TASKS = {
    "sentiment": (SENTIMENT_LABELS, sentiment_oracle),
    "nli": (NLI_LABELS, nli_oracle),
}


def make_corpus(task: str, seed: int, size: int, distractor_rate: float = 0.0) -> List[Example]:
    if task == "sentiment":
        return gen_sentiment_corpus(seed, size, distractor_rate=distractor_rate)
    return gen_nli_corpus(seed, size)


def labeled(examples: Sequence[Example], tok: Tokenizer) -> List[Tuple[np.ndarray, int]]:
    return [(tok.encode_tokens(e.tokens), tok.labels.index(e.label)) for e in examples]


def new_rationalizer(tok: Tokenizer, task: str, budget: float = 0.3, seed: int = 0, d: int = 64,
                     max_len: int = 128, transition_penalty: float = 1e-4) -> R.RationalizerModel:
    nli = task == "nli"
    return R.RationalizerModel(len(tok), len(tok.labels), d=d, max_len=max_len, budget=budget,
                               transition_penalty=transition_penalty, seed=seed,
                               sep_id=tok.id(SEP) if nli else None, freeze_premise=nli)


def train_masker(examples: Sequence[Example], tok: Tokenizer, task: str, budget: float = 0.3,
                 seed: int = 0, epochs: int = 3, use_dev: bool = True, **train_kw) -> R.RationalizerModel:
    """Rationalizer trained on the train split, best epoch chosen on dev accuracy."""
    model_kw = {k: train_kw.pop(k) for k in ("d", "max_len", "transition_penalty") if k in train_kw}
    model = new_rationalizer(tok, task, budget, seed, **model_kw)
    dev = labeled(split(examples, "dev"), tok) if use_dev else None
    R.fit(model, labeled(split(examples, "train"), tok), epochs=epochs, seed=seed, dev=dev, **train_kw)
    return model


def masker_rationales(masker: R.RationalizerModel, tok: Tokenizer,
                      examples: Sequence[Example]) -> List[Tuple[List[str], np.ndarray, str]]:
    return [(e.tokens, R.rationalize(masker, tok.encode_tokens(e.tokens)).z, e.label) for e in examples]


def train_editor(masker: R.RationalizerModel, examples: Sequence[Example], tok: Tokenizer,
                 epochs: int = 8, seed: int = 0, d: int = 64, **train_kw) -> EditorModel:
    """Editor taught to infill the masker's rationale spans of the train split, given the gold label."""
    editor = EditorModel(len(tok), d=d, seed=seed)
    fit_editor(editor, tok, masker_rationales(masker, tok, split(examples, "train")),
               epochs=epochs, seed=seed, **train_kw)
    return editor


def classifier_fn(model: R.RationalizerModel, tok: Tokenizer) -> Callable:
    """``tokens -> (predicted class index, rationale mask)``."""
    def classify(tokens):
        out = R.rationalize(model, tok.encode_tokens(list(tokens)))
        return out.prediction, out.z
    return classify


def editor_fn(editor: EditorModel, tok: Tokenizer, task: str, beam: BeamConfig = BeamConfig()) -> Callable:
    """``(tokens, mask, predicted index) -> edited tokens`` under the flipped predicted label."""
    labels = TASKS[task][0]

    def edit(tokens, z, y):
        # neutral predictions and empty masks raise ValueError and are counted as failures
        return generate(editor, tok, apply_sentinels(tokens, z), label_flip(labels[y], task), beam).tokens
    return edit


def interpretability(model: R.RationalizerModel, tok: Tokenizer, task: str, train: Sequence[Example],
                     test: Sequence[Example], editor: Optional[EditorModel] = None,
                     beam: BeamConfig = BeamConfig()) -> MetricReport:
    """Accuracy, plausibility AUC, forward and counterfactual simulability of one rationalizer."""
    rep = MetricReport()
    data = labeled(test, tok)
    outs = [R.rationalize(model, ids) for ids, _ in data]
    rep.add("accuracy", np.mean([o.prediction == y for o, (_, y) in zip(outs, data)]), len(data))
    auc, n_auc = mean_plausibility((o.mu.data, e.rationale) for o, e in zip(outs, test) if e.rationale)
    rep.add("plausibility", auc, n_auc)
    clf = classifier_fn(model, tok)
    student = train_student(clf, [e.tokens for e in train], tok.itos, len(tok.labels))
    rep.add("forward_sim", forward_simulability(clf, student, [e.tokens for e in test]), len(test))
    if editor is not None:
        cs = counterfactual_simulability(clf, editor_fn(editor, tok, task, beam), [e.tokens for e in test])
        rep.add("counterfactual_sim", cs.rate, cs.n_used)
    return rep


def counterfactual_report(pairs, oracle: Callable, lm: NgramLM) -> MetricReport:
    """Validity, fluency, diversity, closeness and mean length of generated counterfactuals."""
    rep = MetricReport()
    n = len(pairs)
    rep.add("validity", validity(pairs, oracle), n)
    rep.add("fluency", fluency_ppl([p.x_tilde for p in pairs], lm), n)
    rep.add("diversity", self_bleu([p.x_tilde for p in pairs]), n)
    rep.add("closeness", float(np.mean([closeness(p.x, p.x_tilde) for p in pairs])), n)
    rep.add("tokens", float(np.mean([len(p.x_tilde) for p in pairs])), n)
    return rep
