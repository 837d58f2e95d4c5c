"""Counterfactual generation: mask with a rationalizer, infill with the editor.

The masker's rationale ``z*`` decides which tokens the editor may rewrite;
the editor is conditioned on the flipped label ``y_c``.  Each result is a
:class:`CounterfactualPair` carrying both texts and both masks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .agreement import derive_counterfactual_rationale
from .corpus import NLI_LABELS, SENTIMENT_LABELS, Example, Tokenizer
from .editor import BeamConfig, EditorModel, apply_sentinels, generate
from .metrics import closeness, fluency_ppl, validity
from .rationalizer import RationalizerModel, rationalize

log = logging.getLogger(__name__)

TASK_LABELS = {"sentiment": SENTIMENT_LABELS, "nli": NLI_LABELS}
_NLI_SWAP = {"entailment": "contradiction", "contradiction": "entailment"}


class SkipExample(ValueError):
    """Raised for inputs that are deliberately not turned into counterfactuals."""


@dataclass
class CounterfactualPair:
    id: str
    x: List[str]
    y_f: str
    x_tilde: List[str]
    y_c: str
    z_star: List[int]
    z_tilde_star: List[int]
    valid: Optional[bool] = None

    def __post_init__(self):
        if self.y_f == self.y_c:
            raise ValueError(f"{self.id}: counterfactual label equals factual label {self.y_f!r}")
        if len(self.z_star) != len(self.x):
            raise ValueError(f"{self.id}: rationale mask length {len(self.z_star)} != {len(self.x)}")
        if len(self.z_tilde_star) != len(self.x_tilde):
            raise ValueError(f"{self.id}: counterfactual mask length {len(self.z_tilde_star)} != {len(self.x_tilde)}")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "text": " ".join(self.x),
            "label": self.y_f,
            "counterfactual": " ".join(self.x_tilde),
            "counterfactual_label": self.y_c,
            "rationale_mask": [int(v) for v in self.z_star],
            "counterfactual_mask": [int(v) for v in self.z_tilde_star],
            "valid": self.valid,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CounterfactualPair":
        valid = d.get("valid")
        return cls(str(d["id"]), d["text"].split(), d["label"], d["counterfactual"].split(),
                   d["counterfactual_label"], [int(v) for v in d["rationale_mask"]],
                   [int(v) for v in d["counterfactual_mask"]], None if valid is None else bool(valid))


def label_flip(y_f: Optional[str], task: str, probs: Optional[Sequence[float]] = None) -> str:
    """Choose the counterfactual label.

    With a gold ``y_f`` the label is flipped directly; a neutral gold NLI label
    raises :class:`SkipExample`.  With ``y_f=None`` the flip starts from the
    argmax of ``probs``, and a neutral prediction falls back to the
    second-most probable class.
    """
    labels = TASK_LABELS.get(task)
    if labels is None:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASK_LABELS)}")
    if y_f is None:
        if probs is None:
            raise ValueError("need either a gold label or class probabilities")
        p = np.asarray(probs, dtype=np.float64)
        if p.shape != (len(labels),):
            raise ValueError(f"expected {len(labels)} class probabilities, got shape {p.shape}")
        order = np.argsort(-p, kind="stable")
        pred = labels[order[0]]
        if task == "nli" and pred == "neutral":
            return labels[order[1]]
        y_f = pred
    if y_f not in labels:
        raise ValueError(f"label {y_f!r} not in {labels}")
    if task == "sentiment":
        return labels[1 - labels.index(y_f)]
    if y_f == "neutral":
        raise SkipExample("neutral examples are not flipped")
    return _NLI_SWAP[y_f]


def generate_counterfactual(x: Sequence[str], y_f: Optional[str], masker: RationalizerModel,
                            editor: EditorModel, tok: Tokenizer, task: str,
                            beam: BeamConfig = BeamConfig(), id: str = "") -> CounterfactualPair:
    """Mask ``x`` with the masker's rationale and let the editor rewrite it under the flipped label."""
    x = list(x)
    out = rationalize(masker, tok.encode_tokens(x))
    y_c = label_flip(y_f, task, None if y_f is not None else out.probs)
    if y_f is None:
        y_f = TASK_LABELS[task][out.prediction]
    z_star = out.z
    gen = generate(editor, tok, apply_sentinels(x, z_star), y_c, beam)
    if not gen.tokens:
        raise ValueError("editor produced an empty text")
    z_tilde = derive_counterfactual_rationale(x, gen.tokens)
    return CounterfactualPair(id, x, y_f, gen.tokens, y_c, [int(v) for v in z_star], list(z_tilde))


def generate_corpus(examples: Sequence[Example], masker: RationalizerModel, editor: EditorModel,
                    tok: Tokenizer, task: str, beam: BeamConfig = BeamConfig(),
                    use_gold: bool = True) -> Tuple[List[CounterfactualPair], Dict[str, int]]:
    """Counterfactuals for a corpus; failures are logged and counted, never raised."""
    pairs, skipped = [], {"skipped": 0, "failed": 0}
    for ex in examples:
        try:
            pairs.append(generate_counterfactual(ex.tokens, ex.label if use_gold else None, masker,
                                                 editor, tok, task, beam, id=ex.id))
        except SkipExample:
            skipped["skipped"] += 1
        except ValueError as exc:
            log.warning("skipping %s: %s", ex.id, exc)
            skipped["failed"] += 1
    return pairs, skipped


def model_classifier(model: RationalizerModel, tok: Tokenizer) -> Callable[[Sequence[str]], str]:
    """Wrap a rationalizer as a ``tokens -> label`` function."""
    def classify(tokens):
        return tok.labels[rationalize(model, tok.encode_tokens(list(tokens))).prediction]
    return classify


def validity_filter(pairs: Sequence[CounterfactualPair], predictor,
                    tok: Optional[Tokenizer] = None) -> Tuple[List[CounterfactualPair], List[CounterfactualPair]]:
    """Split pairs by whether ``predictor`` assigns ``y_c`` to ``x_tilde``.

    ``predictor`` is a rationalizer (with ``tok``) or any ``tokens -> label``
    callable.  Returned pairs are copies with ``valid`` set.
    """
    classify = model_classifier(predictor, tok) if isinstance(predictor, RationalizerModel) else predictor
    kept, dropped = [], []
    for p in pairs:
        ok = classify(p.x_tilde) == p.y_c
        (kept if ok else dropped).append(replace(p, valid=ok))
    return kept, dropped


@dataclass
class SweepRow:
    budget: float
    validity: float
    fluency: float
    closeness: float
    n_pairs: int


def budget_sweep(examples: Sequence[Example], budgets: Sequence[float],
                 train_masker: Callable[[float], RationalizerModel],
                 train_editor: Callable[[RationalizerModel], EditorModel],
                 tok: Tokenizer, task: str, oracle: Callable[[Sequence[str]], str], lm,
                 beam: BeamConfig = BeamConfig()) -> List[SweepRow]:
    """One masker/editor pair per budget, evaluated on ``examples``."""
    rows = []
    for b in budgets:
        masker = train_masker(b)
        editor = train_editor(masker)
        pairs, _ = generate_corpus(examples, masker, editor, tok, task, beam)
        if not pairs:
            raise RuntimeError(f"no counterfactuals produced at budget {b}")
        rows.append(SweepRow(
            budget=float(b),
            validity=validity(pairs, oracle),
            fluency=fluency_ppl([p.x_tilde for p in pairs], lm),
            closeness=float(np.mean([closeness(p.x, p.x_tilde) for p in pairs])),
            n_pairs=len(pairs),
        ))
        log.info("budget %.2f: %s", b, rows[-1])
    return rows
