"""Synthetic corpora with oracle labels and gold rationales, tokenization, JSONL I/O."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

PAD, UNK, EOS, SEP, BOS = "<pad>", "<unk>", "</s>", "<sep>", "<bos>"
N_SENTINELS = 100

SENTIMENT_LABELS = ("negative", "positive")
NLI_LABELS = ("entailment", "neutral", "contradiction")

POSITIVE_WORDS = (
    "great", "wonderful", "excellent", "superb", "brilliant", "amazing",
    "delightful", "charming", "moving", "fantastic", "stunning", "lovely",
)
NEGATIVE_WORDS = (
    "awful", "terrible", "boring", "dreadful", "dull", "horrible",
    "poor", "weak", "tedious", "mediocre", "clumsy", "bland",
)
# neutral filler, written as short phrases so text has some local structure
FILLER_PHRASES = (
    "the movie", "the film", "the plot", "the cast", "the director", "the ending",
    "the music", "the story", "the script", "the acting", "was", "is", "felt",
    "and", "but", "with", "overall", "in the end", "to be honest", "this time",
    "at times", "for a sequel", "i think", "the scenes", "the dialogue", "really",
    "quite", "somewhat", "again", "as expected", ".", ",",
)

NLI_ENTITIES = ("man", "woman", "child", "dog", "girl", "boy", "chef", "player")
# attribute dimensions: each pair is mutually exclusive
NLI_ATTRIBUTES = (
    ("happy", "sad"), ("tall", "short"), ("standing", "sitting"),
    ("indoors", "outdoors"), ("awake", "asleep"), ("young", "old"),
    ("wet", "dry"), ("loud", "quiet"),
)


def sentinel(i: int) -> str:
    return f"<sent_{i}>"


def label_token(label: str) -> str:
    return f"<label_{label}>"


_TOKEN_RE = re.compile(r"<[^<>\s]+>|\w+|[^\w\s]")


@dataclass
class Example:
    id: str
    tokens: List[str]
    label: str
    rationale: Optional[List[int]] = None
    split: str = "train"

    def __post_init__(self):
        if self.rationale is not None:
            if len(self.rationale) != len(self.tokens):
                raise ValueError(f"{self.id}: rationale length {len(self.rationale)} != {len(self.tokens)} tokens")
            if sum(self.rationale) < 1:
                raise ValueError(f"{self.id}: gold rationale must mark at least one token")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_json(self) -> dict:
        d = {"id": self.id, "text": self.text, "label": self.label, "split": self.split}
        if self.rationale is not None:
            d["rationale"] = list(map(int, self.rationale))
        return d


class Tokenizer:
    """Word-level lowercase tokenizer with punctuation splitting.

    Special tokens are angle-bracketed, so they can never collide with text
    tokens (which are lowercased word characters or single punctuation marks).
    """

    def __init__(self, words: Iterable[str], labels: Sequence[str], lowercase: bool = True):
        self.lowercase = lowercase
        self.labels = list(labels)
        specials = [PAD, UNK, EOS, SEP, BOS]
        specials += [sentinel(i) for i in range(N_SENTINELS)]
        specials += [label_token(lab) for lab in self.labels]
        words = sorted(set(words) - set(specials))
        self.itos = specials + words
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.n_special = len(specials)

    def __len__(self) -> int:
        return len(self.itos)

    @classmethod
    def from_examples(cls, examples: Iterable[Example], labels: Sequence[str]) -> "Tokenizer":
        words = set()
        for ex in examples:
            words.update(t for t in ex.tokens if not t.startswith("<"))
        return cls(words, labels)

    def tokenize(self, text: str) -> List[str]:
        if self.lowercase:
            # keep special tokens intact
            text = _TOKEN_RE.sub(lambda m: m.group(0) if m.group(0).startswith("<") else m.group(0).lower(), text)
        return _TOKEN_RE.findall(text)

    def encode_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        unk = self.stoi[UNK]
        return np.array([self.stoi.get(t, unk) for t in tokens], dtype=np.int64)

    def encode(self, text: str) -> np.ndarray:
        return self.encode_tokens(self.tokenize(text))

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[int(i)] for i in ids)

    def id(self, token: str) -> int:
        return self.stoi[token]

    def is_special(self, idx: int) -> bool:
        return int(idx) < self.n_special

    def sentinel_index(self, idx: int) -> Optional[int]:
        """Sentinel number for token id ``idx``, or None."""
        j = int(idx) - 5
        return j if 0 <= j < N_SENTINELS else None

    @property
    def vocab_hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def to_json(self) -> dict:
        return {"labels": self.labels, "words": self.itos[self.n_special:],
                "lowercase": self.lowercase}

    @classmethod
    def from_json(cls, d: dict) -> "Tokenizer":
        return cls(d["words"], d["labels"], d.get("lowercase", True))


# ----------------------------------------------------------------------
# generators
# ----------------------------------------------------------------------

def _assign_splits(examples: List[Example], fractions=(0.8, 0.1, 0.1)) -> List[Example]:
    n = len(examples)
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    for i, ex in enumerate(examples):
        ex.split = "train" if i < n_train else ("dev" if i < n_train + n_dev else "test")
    return examples


def gen_sentiment_corpus(seed: int, size: int, length_range=(8, 16), distractor_rate: float = 0.0,
                         prefix: str = "sent") -> List[Example]:
    """Templated reviews: neutral filler plus 1-3 polarity words.

    The label is the majority polarity.  With probability ``distractor_rate``
    an example also gets one opposite-polarity word, kept in the minority.
    Every polarity word is marked in the gold rationale.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = length_range
    out = []
    for i in range(size):
        label = int(rng.integers(2))
        own = POSITIVE_WORDS if label == 1 else NEGATIVE_WORDS
        other = NEGATIVE_WORDS if label == 1 else POSITIVE_WORDS
        n_pol = int(rng.integers(1, 4))
        polar = [own[j] for j in rng.integers(len(own), size=n_pol)]
        if distractor_rate > 0 and rng.random() < distractor_rate:
            if n_pol == 1:
                polar.append(own[int(rng.integers(len(own)))])
            polar.append(other[int(rng.integers(len(other)))])
        target_len = int(rng.integers(lo, hi + 1))
        filler: List[str] = []
        while len(filler) + len(polar) < target_len:
            filler.extend(FILLER_PHRASES[int(rng.integers(len(FILLER_PHRASES)))].split())
        filler = filler[: max(0, target_len - len(polar))]
        tokens = list(filler)
        for w in polar:
            tokens.insert(int(rng.integers(len(tokens) + 1)), w)
        polar_set = set(POSITIVE_WORDS) | set(NEGATIVE_WORDS)
        rationale = [int(t in polar_set) for t in tokens]
        out.append(Example(f"{prefix}-{seed}-{i}", tokens, SENTIMENT_LABELS[label], rationale))
    return _assign_splits(out)


def sentiment_oracle(tokens: Sequence[str]) -> str:
    """Lexicon-majority classifier; ties go to negative."""
    pos = sum(t in POSITIVE_WORDS for t in tokens)
    neg = sum(t in NEGATIVE_WORDS for t in tokens)
    return "positive" if pos > neg else "negative"


def gen_nli_corpus(seed: int, size: int, prefix: str = "nli") -> List[Example]:
    """Premise/hypothesis pairs over entity-attribute facts, joined by the separator.

    * entailment: the hypothesis restates one premise attribute
    * contradiction: it states the opposite attribute, or negates the premise one
    * neutral: it mentions an attribute dimension absent from the premise
    The gold rationale marks the decisive hypothesis tokens (attribute, plus "not").
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(size):
        ent = NLI_ENTITIES[int(rng.integers(len(NLI_ENTITIES)))]
        dims = rng.permutation(len(NLI_ATTRIBUTES))
        d1, d2, d3 = int(dims[0]), int(dims[1]), int(dims[2])
        a1 = NLI_ATTRIBUTES[d1][int(rng.integers(2))]
        a2 = NLI_ATTRIBUTES[d2][int(rng.integers(2))]
        premise = ["the", ent, "is", a1, "and", a2]
        label = int(rng.integers(3))
        focus_dim, focus_attr = (d1, a1) if rng.random() < 0.5 else (d2, a2)
        if label == 0:
            hyp = ["the", ent, "is", focus_attr]
            gold = [0, 0, 0, 1]
        elif label == 2:
            if rng.random() < 0.5:
                hyp = ["the", ent, "is", "not", focus_attr]
                gold = [0, 0, 0, 1, 1]
            else:
                pair = NLI_ATTRIBUTES[focus_dim]
                hyp = ["the", ent, "is", pair[1] if pair[0] == focus_attr else pair[0]]
                gold = [0, 0, 0, 1]
        else:
            hyp = ["the", ent, "is", NLI_ATTRIBUTES[d3][int(rng.integers(2))]]
            gold = [0, 0, 0, 1]
        tokens = premise + [SEP] + hyp
        rationale = [0] * (len(premise) + 1) + gold
        out.append(Example(f"{prefix}-{seed}-{i}", tokens, NLI_LABELS[label], rationale))
    return _assign_splits(out)


def nli_oracle(tokens: Sequence[str]) -> str:
    sep = list(tokens).index(SEP)
    premise, hyp = set(tokens[:sep]), list(tokens[sep + 1:])
    attr = hyp[-1]
    negated = "not" in hyp
    if attr in premise:
        return "contradiction" if negated else "entailment"
    for a, b in NLI_ATTRIBUTES:
        if (attr == a and b in premise) or (attr == b and a in premise):
            return "entailment" if negated else "contradiction"
    return "neutral"


def split(examples: Sequence[Example], name: str) -> List[Example]:
    return [ex for ex in examples if ex.split == name]


# ----------------------------------------------------------------------
# JSON-lines I/O
# ----------------------------------------------------------------------

class FormatError(ValueError):
    pass


def write_jsonl(path, records: Iterable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            obj = rec.to_json() if hasattr(rec, "to_json") else rec
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def _iter_json(path):
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def read_jsonl(path) -> List[Example]:
    out = []
    for lineno, obj in _iter_json(path):
        missing = [k for k in ("id", "text", "label") if k not in obj]
        if missing:
            raise FormatError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        try:
            out.append(Example(str(obj["id"]), obj["text"].split(), obj["label"],
                               obj.get("rationale"), obj.get("split", "train")))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


PAIR_FIELDS = ("id", "text", "label", "counterfactual", "counterfactual_label",
               "rationale_mask", "counterfactual_mask")


def read_pairs(path) -> list:
    from .generation import CounterfactualPair

    out = []
    for lineno, obj in _iter_json(path):
        missing = [k for k in PAIR_FIELDS if k not in obj]
        if missing:
            raise FormatError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        try:
            out.append(CounterfactualPair.from_json(obj))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out
