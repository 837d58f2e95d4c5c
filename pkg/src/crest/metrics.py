"""Intrinsic counterfactual metrics and rationale interpretability metrics."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .alignment import edit_distance

log = logging.getLogger(__name__)

BLEU_EPS = 1e-9
UNK_WORD = "<unk>"
BOS_WORD = "<bos>"


# ----------------------------------------------------------------------
# counterfactual quality
# ----------------------------------------------------------------------

def validity(pairs, classifier: Callable[[Sequence[str]], str]) -> float:
    """Fraction of pairs whose counterfactual the classifier labels ``y_c``."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("validity of an empty set of pairs is undefined")
    return sum(classifier(p.x_tilde) == p.y_c for p in pairs) / len(pairs)


class NgramLM:
    """Interpolated add-k bigram LM: ``w * P_bigram + (1 - w) * P_unigram``.

    Out-of-vocabulary words map to ``<unk>``.  Every distribution is over the
    same vocabulary, so conditionals are normalised for every context.
    """

    def __init__(self, vocab: Iterable[str] = (), k: float = 0.1, weight: float = 0.7):
        if k <= 0 or not 0 <= weight <= 1:
            raise ValueError("need k > 0 and 0 <= weight <= 1")
        self.k, self.weight = k, weight
        self.vocab = sorted(set(vocab) | {UNK_WORD})
        self._index = set(self.vocab)
        self.unigrams: Counter = Counter()
        self.bigrams: Counter = Counter()
        self.contexts: Counter = Counter()
        self.n_tokens = 0

    @classmethod
    def train(cls, texts: Iterable[Sequence[str]], k: float = 0.1, weight: float = 0.7) -> "NgramLM":
        texts = [list(t) for t in texts]
        lm = cls((w for t in texts for w in t), k, weight)
        for t in texts:
            prev = BOS_WORD
            for w in t:
                lm.unigrams[w] += 1
                lm.bigrams[prev, w] += 1
                lm.contexts[prev] += 1
                prev = w
            lm.n_tokens += len(t)
        return lm

    @property
    def V(self) -> int:
        return len(self.vocab)

    def _norm(self, w: str) -> str:
        return w if w in self._index else UNK_WORD

    def prob(self, w: str, prev: str = BOS_WORD) -> float:
        w = self._norm(w)
        prev = prev if prev == BOS_WORD else self._norm(prev)
        uni = (self.unigrams[w] + self.k) / (self.n_tokens + self.k * self.V)
        bi = (self.bigrams[prev, w] + self.k) / (self.contexts[prev] + self.k * self.V)
        return self.weight * bi + (1 - self.weight) * uni

    def perplexity(self, tokens: Sequence[str]) -> float:
        if not tokens:
            raise ValueError("perplexity of an empty text is undefined")
        prev, lp = BOS_WORD, 0.0
        for w in tokens:
            lp += math.log(self.prob(w, prev))
            prev = w
        return math.exp(-lp / len(tokens))


def fluency_ppl(texts: Iterable[Sequence[str]], lm: NgramLM) -> float:
    """Mean per-text perplexity; empty texts are skipped."""
    ppl = []
    for t in texts:
        if not t:
            log.warning("skipping empty text in fluency evaluation")
            continue
        ppl.append(lm.perplexity(t))
    if not ppl:
        raise ValueError("no non-empty texts to score")
    return float(np.mean(ppl))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypothesis: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4,
         eps: float = BLEU_EPS) -> float:
    """Sentence BLEU with uniform weights, clipped counts and epsilon smoothing of zero matches.

    Orders longer than the hypothesis contribute a precision of 1.
    """
    hyp = list(hypothesis)
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = _ngrams(hyp, n)
        max_ref: Counter = Counter()
        for ref in references:
            for g, c in _ngrams(list(ref), n).items():
                max_ref[g] = max(max_ref[g], c)
        total = sum(counts.values())
        if total == 0:
            # hypothesis shorter than n: no evidence either way, precision 1
            continue
        match = sum(min(c, max_ref[g]) for g, c in counts.items())
        log_p += math.log((match if match > 0 else eps) / total)
    c = len(hyp)
    if c == 0:
        return 0.0
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p / max_n)


def self_bleu(texts: Sequence[Sequence[str]]) -> float:
    """Mean BLEU of each text against all the others (lower means more diverse)."""
    texts = [list(t) for t in texts]
    if len(texts) < 2:
        raise ValueError("self-BLEU needs at least two texts")
    return float(np.mean([bleu(t, texts[:i] + texts[i + 1:]) for i, t in enumerate(texts)]))


def closeness(x: Sequence[str], x_tilde: Sequence[str]) -> float:
    """Token edit distance normalised by the longer length."""
    longest = max(len(x), len(x_tilde))
    return edit_distance(list(x), list(x_tilde)) / longest if longest else 0.0


# ----------------------------------------------------------------------
# rationale quality
# ----------------------------------------------------------------------

def plausibility_auc(token_scores, gold_mask) -> float:
    """ROC AUC of ``token_scores`` ranking gold-rationale tokens first; ties count one half."""
    s = np.asarray(token_scores, dtype=np.float64)
    g = np.asarray(gold_mask).astype(bool)
    if s.shape != g.shape:
        raise ValueError(f"scores {s.shape} and mask {g.shape} differ in shape")
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: gold mask has a single class")
    # Mann-Whitney U from average ranks
    ranks = rankdata(s)
    u = ranks[g].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mean_plausibility(scored: Iterable[Tuple[Sequence[float], Sequence[int]]]) -> Tuple[float, int]:
    """Mean AUC over examples, skipping single-class gold masks.  Returns ``(mean, n_used)``."""
    vals = []
    for scores, gold in scored:
        try:
            vals.append(plausibility_auc(scores, gold))
        except ValueError:
            continue
    return (float(np.mean(vals)) if vals else float("nan")), len(vals)


def word_scores(piece_scores: Sequence[float], word_ids: Sequence[int]) -> np.ndarray:
    """Average sub-word scores into word scores; ``word_ids[i]`` is the word of piece ``i``."""
    piece_scores = np.asarray(piece_scores, dtype=np.float64)
    word_ids = np.asarray(word_ids, dtype=np.int64)
    n_words = int(word_ids.max()) + 1 if word_ids.size else 0
    sums = np.bincount(word_ids, weights=piece_scores, minlength=n_words)
    counts = np.bincount(word_ids, minlength=n_words)
    return sums / np.maximum(counts, 1)


def mask_iou(a, b) -> float:
    """Intersection over union of two binary masks (1.0 when both are empty)."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 1.0


class LinearStudent:
    """Multinomial logistic regression over bag-of-selected-token counts."""

    def __init__(self, vocab: Sequence[str], n_classes: int, l2: float = 1e-3, lr: float = 0.5,
                 steps: int = 300):
        self.vocab = {w: i for i, w in enumerate(vocab)}
        self.n_classes = n_classes
        self.l2, self.lr, self.steps = l2, lr, steps
        self.W = np.zeros((len(self.vocab), n_classes))
        self.b = np.zeros(n_classes)

    def features(self, selected: Sequence[Sequence[str]]) -> np.ndarray:
        X = np.zeros((len(selected), len(self.vocab)))
        for r, toks in enumerate(selected):
            for t in toks:
                j = self.vocab.get(t)
                if j is not None:
                    X[r, j] += 1
        return X

    def fit(self, selected: Sequence[Sequence[str]], labels: Sequence[int]) -> "LinearStudent":
        """Full-batch gradient descent on mean cross-entropy plus an L2 penalty."""
        X = self.features(selected)
        Y = np.eye(self.n_classes)[np.asarray(labels, dtype=np.int64)]
        for _ in range(self.steps):
            logits = X @ self.W + self.b
            logits -= logits.max(axis=1, keepdims=True)
            P = np.exp(logits)
            P /= P.sum(axis=1, keepdims=True)
            G = (P - Y) / len(X)
            self.W -= self.lr * (X.T @ G + self.l2 * self.W)
            self.b -= self.lr * G.sum(axis=0)
        return self

    def predict(self, selected: Sequence[str]) -> int:
        return int(np.argmax(self.features([selected])[0] @ self.W + self.b))


def selected_tokens(tokens: Sequence[str], z: Sequence[int]) -> List[str]:
    return [t for t, keep in zip(tokens, z) if keep]


def train_student(classifier: Callable, texts: Sequence[Sequence[str]], vocab: Sequence[str],
                  n_classes: int, **kwargs) -> LinearStudent:
    """Fit a student to the classifier's own predictions, seeing only rationale tokens.

    ``classifier(tokens) -> (label index, mask)``.
    """
    outs = [classifier(t) for t in texts]
    return LinearStudent(vocab, n_classes, **kwargs).fit(
        [selected_tokens(t, z) for t, (_, z) in zip(texts, outs)], [y for y, _ in outs])


def forward_simulability(classifier: Callable, student, texts: Sequence[Sequence[str]]) -> float:
    """Fraction of texts where the student, given only the rationale, matches the classifier."""
    if not texts:
        raise ValueError("empty evaluation set")
    hits = 0
    for t in texts:
        y, z = classifier(t)
        hits += student.predict(selected_tokens(t, z)) == y
    return hits / len(texts)


@dataclass
class SimulabilityResult:
    rate: float
    n_used: int
    n_failed: int

    def __float__(self) -> float:
        return self.rate


def counterfactual_simulability(classifier: Callable, editor: Callable,
                                texts: Sequence[Sequence[str]]) -> SimulabilityResult:
    """Fraction of texts whose rationale-guided edit changes the classifier's prediction.

    ``classifier(tokens) -> (label, mask)``; ``editor(tokens, mask, label) ->
    tokens``.  Examples where the editor raises ``ValueError`` are left out
    of both counts.
    """
    flips, used, failed = 0, 0, 0
    for t in texts:
        y, z = classifier(t)
        try:
            edited = editor(list(t), z, y)
        except ValueError as exc:
            log.debug("edit failed: %s", exc)
            failed += 1
            continue
        used += 1
        flips += classifier(edited)[0] != y
    if used == 0:
        raise ValueError("no example could be edited")
    return SimulabilityResult(flips / used, used, failed)


def mad_agreement(ratings_a: Sequence[float], ratings_b: Sequence[float], scale_max: int) -> float:
    """One minus the mean absolute rating difference, normalised by the scale width."""
    a = np.asarray(ratings_a, dtype=np.float64)
    b = np.asarray(ratings_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"rating lists differ in length: {a.size} vs {b.size}")
    if scale_max < 2:
        raise ValueError("scale_max must be >= 2")
    if a.size == 0:
        raise ValueError("no ratings")
    return float(1.0 - np.mean(np.abs(a - b)) / (scale_max - 1))


# ----------------------------------------------------------------------
# reporting
# ----------------------------------------------------------------------

# column name, header, scaled by 100 for display
TABLE_COLUMNS = (
    ("validity", "val.", True),
    ("fluency", "fl.", False),
    ("diversity", "div.", True),
    ("closeness", "clo.", True),
    ("tokens", "#tks", False),
)


@dataclass
class MetricReport:
    """Named scalar metrics with their sample counts, plus optional per-example rows."""

    metrics: Dict[str, Tuple[float, int]] = field(default_factory=dict)
    rows: List[Dict[str, object]] = field(default_factory=list)
    meta: Dict[str, str] = field(default_factory=dict)

    def add(self, name: str, value: float, n: int) -> None:
        self.metrics[name] = (float(value), int(n))

    def __getitem__(self, name: str) -> float:
        return self.metrics[name][0]

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(self.meta) + ["metric", "value", "n"])
            for name, (value, n) in self.metrics.items():
                w.writerow(list(self.meta.values()) + [name, f"{value:.6f}", n])

    def to_markdown(self) -> str:
        """One-row table in the val./fl./div./clo./#tks layout; rates shown x100."""
        cols = [(k, h, s) for k, h, s in TABLE_COLUMNS if k in self.metrics]
        extra = [k for k in self.metrics if k not in {c[0] for c in TABLE_COLUMNS}]
        head = [h for _, h, _ in cols] + extra
        cells = [_fmt(self[k] * (100 if s else 1)) for k, _, s in cols] + [_fmt(self[k]) for k in extra]
        lines = [", ".join(f"{k}={v}" for k, v in self.meta.items()), ""] if self.meta else []
        lines += ["| " + " | ".join(head) + " |", "|" + "---|" * len(head), "| " + " | ".join(cells) + " |"]
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def aggregate(reports: Sequence[MetricReport]) -> Dict[str, Tuple[float, float]]:
    """Mean and (population) standard deviation of each metric across reports, e.g. seeds."""
    names = [k for k in reports[0].metrics if all(k in r.metrics for r in reports)]
    return {k: (float(np.mean([r[k] for r in reports])), float(np.std([r[k] for r in reports]))) for k in names}
