"""Label-conditioned span-infilling editor.

Masked spans are collapsed to sentinels (``<sent_0>``, ``<sent_1>``, ...)
and the decoder is taught to emit ``<sent_0> span0 <sent_1> span1 ... </s>``.
The source is prefixed with a label token, so at generation time swapping in
a counterfactual label steers what gets infilled.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import AdamW, Tensor
from .corpus import BOS, EOS, PAD, Tokenizer, label_token, sentinel
from .layers import (Module, add_block_params, affine, attention, causal_mask, embed,
                     feed_forward, init_linear)

log = logging.getLogger(__name__)


@dataclass
class MaskedInput:
    source: List[str]
    target: List[str]
    span_lengths: List[int] = field(default_factory=list)

    @property
    def n_spans(self) -> int:
        return len(self.span_lengths)


def apply_sentinels(tokens: Sequence[str], z: Sequence[int]) -> MaskedInput:
    """Collapse each maximal run of ``z == 1`` into one sentinel."""
    if len(tokens) != len(z):
        raise ValueError(f"mask length {len(z)} != {len(tokens)} tokens")
    if not any(z):
        raise ValueError("nothing to edit: mask selects no tokens")
    source, target, lengths = [], [], []
    i = 0
    n = len(tokens)
    while i < n:
        if z[i]:
            j = i
            while j < n and z[j]:
                j += 1
            s = sentinel(len(lengths))
            source.append(s)
            target.append(s)
            target.extend(tokens[i:j])
            lengths.append(j - i)
            i = j
        else:
            source.append(tokens[i])
            i += 1
    target.append(EOS)
    return MaskedInput(source, target, lengths)


def split_target(target: Sequence[str], n_spans: int) -> Tuple[List[List[str]], bool]:
    """Recover spans from a sentinel-delimited sequence.

    Returns ``(spans, well_formed)``.  When sentinels are missing, repeated or
    out of order, segments are assigned to slots positionally (in order of
    appearance) and the result is flagged as not well formed.
    """
    toks = list(target)
    if EOS in toks:
        toks = toks[: toks.index(EOS)]
    segments: List[List[str]] = []
    seen: List[str] = []
    lead: List[str] = []
    for t in toks:
        if t.startswith("<sent_"):
            seen.append(t)
            segments.append([])
        elif segments:
            segments[-1].append(t)
        else:
            lead.append(t)
    expected = [sentinel(i) for i in range(n_spans)]
    ok = seen == expected and not lead
    if not ok:
        if lead:
            segments.insert(0, lead)
        segments = segments[:n_spans] + [[] for _ in range(n_spans - len(segments))]
    return segments, ok


def clean_span(span: Sequence[str]) -> List[str]:
    """Drop special symbols (sentinels, end markers, padding) from a generated span."""
    return [t for t in span if not (t.startswith("<") and t.endswith(">"))]


def fill_spans(source: Sequence[str], spans: Sequence[Sequence[str]]) -> List[str]:
    out = []
    for t in source:
        if t.startswith("<sent_"):
            idx = int(t[len("<sent_"):-1])
            out.extend(spans[idx] if idx < len(spans) else [])
        else:
            out.append(t)
    return out


# ----------------------------------------------------------------------
# model
# ----------------------------------------------------------------------

class EditorModel(Module):
    kind = "editor"

    def __init__(self, vocab_size: int, d: int = 64, max_len: int = 128, seed: int = 0):
        super().__init__()
        self.config = dict(vocab_size=vocab_size, d=d, max_len=max_len, seed=seed)
        rng = np.random.default_rng(seed)
        self.add("emb", rng.normal(0, 1.0, size=(vocab_size, d)))
        self.add("enc.pos", rng.normal(0, 0.5, size=(max_len, d)))
        self.add("dec.pos", rng.normal(0, 0.5, size=(max_len, d)))
        add_block_params(self, rng, "enc.block", d)
        self.add("enc.ln_g", np.ones((1, d)))
        self.add("enc.ln_b", np.zeros((1, d)))
        add_block_params(self, rng, "dec.block", d, cross=True)
        self.add("dec.ln_g", np.ones((1, d)))
        self.add("dec.ln_b", np.zeros((1, d)))
        # small output init keeps the initial softmax near uniform
        self.add("out.w", init_linear(rng, d, vocab_size) * 0.01)
        self.add("out.b", np.zeros((1, vocab_size)))

    @classmethod
    def from_config(cls, config: dict) -> "EditorModel":
        return cls(**config)


def encode_source(editor: EditorModel, src_ids) -> Tensor:
    x = embed(editor, "emb", "enc.pos", src_ids)
    x = attention(editor, "enc.block.attn", x)
    x = feed_forward(editor, "enc.block.ffn", x)
    return ag.layer_norm(x, editor["enc.ln_g"], editor["enc.ln_b"])


def decode(editor: EditorModel, memory: Tensor, dec_ids) -> Tensor:
    """Logits (m, V) for every decoder position."""
    m = len(dec_ids)
    y = embed(editor, "emb", "dec.pos", dec_ids)
    y = attention(editor, "dec.block.attn", y, mask=causal_mask(m))
    y = attention(editor, "dec.block.cross", y, memory=memory)
    y = feed_forward(editor, "dec.block.ffn", y)
    y = ag.layer_norm(y, editor["dec.ln_g"], editor["dec.ln_b"])
    return affine(y, editor["out.w"], editor["out.b"])


def _source_ids(tok: Tokenizer, masked: MaskedInput, label: str) -> np.ndarray:
    return tok.encode_tokens([label_token(label)] + list(masked.source))


def editor_loss(editor: EditorModel, tok: Tokenizer, masked: MaskedInput, label: str) -> Tensor:
    """Teacher-forced mean cross-entropy of the target given the label-prefixed source."""
    src = _source_ids(tok, masked, label)
    tgt = tok.encode_tokens(masked.target)
    dec_in = np.concatenate([[tok.id(BOS)], tgt[:-1]])
    return ag.cross_entropy(decode(editor, encode_source(editor, src), dec_in), tgt)


def train_step(editor: EditorModel, tok: Tokenizer, batch: Sequence[Tuple[Sequence[str], Sequence[int], str]],
               optimizer: AdamW) -> float:
    """One AdamW step over ``batch`` of (tokens, mask, gold label)."""
    optimizer.zero_grad()
    total = 0.0
    for tokens, z, label in batch:
        loss = ag.scale(editor_loss(editor, tok, apply_sentinels(tokens, z), label), 1.0 / len(batch))
        loss.backward()
        total += float(loss.data)
    optimizer.step()
    return total


def fit(editor: EditorModel, tok: Tokenizer, data: Sequence[Tuple[Sequence[str], Sequence[int], str]], *,
        epochs: int = 5, batch_size: int = 16, lr: float = 3e-3, weight_decay: float = 1e-6,
        seed: int = 0) -> List[float]:
    """Teacher-forced training on (tokens, mask, label); items with an empty mask are skipped."""
    usable = [d for d in data if any(d[1])]
    if len(usable) < len(data):
        log.info("skipping %d training items with an empty mask", len(data) - len(usable))
    data = usable
    opt = AdamW(editor.params, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    trace = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), batch_size):
            trace.append(train_step(editor, tok, [data[i] for i in order[start:start + batch_size]], opt))
    return trace


# ----------------------------------------------------------------------
# decoding
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class BeamConfig:
    size: int = 15
    no_repeat_ngram: int = 2
    length_normalize: bool = True


def _banned_by_ngram(seq: Sequence[int], n: int) -> set:
    if n <= 0 or len(seq) < n - 1:
        return set()
    prefix = tuple(seq[len(seq) - (n - 1):]) if n > 1 else ()
    banned = set()
    for i in range(len(seq) - n + 1):
        if tuple(seq[i:i + n - 1]) == prefix:
            banned.add(seq[i + n - 1])
    return banned


def beam_search(step: Callable[[List[int]], np.ndarray], bos: int, eos: int, size: int, max_len: int,
                no_repeat_ngram: int = 2, length_normalize: bool = True,
                banned: Sequence[int] = ()) -> Tuple[List[int], float]:
    """Beam search over ``step(prefix) -> log-probs``.

    Each round keeps the ``size`` best extensions of the live hypotheses by
    cumulative log-probability; extensions ending in ``eos`` retire.  The
    returned hypothesis (without ``bos``/``eos``) is the best retired one by
    length-normalised score.  ``size=1`` is greedy decoding.
    """
    if size < 1:
        raise ValueError("beam size must be >= 1")
    banned = set(banned)
    live: List[Tuple[List[int], float]] = [([bos], 0.0)]
    done: List[Tuple[List[int], float]] = []
    for t in range(max_len):
        cands = []
        for seq, score in live:
            lp = np.asarray(step(seq), dtype=np.float64).copy()
            for b in banned | _banned_by_ngram(seq[1:], no_repeat_ngram):
                lp[b] = -np.inf
            if t == max_len - 1:
                # out of room: only the end token may follow
                keep = lp[eos]
                lp[:] = -np.inf
                lp[eos] = keep
            top = np.argsort(-lp, kind="stable")[:size]
            cands.extend((score + lp[j], seq, int(j)) for j in top if np.isfinite(lp[j]))
        cands.sort(key=lambda c: -c[0])
        live = []
        for score, seq, j in cands[:size]:
            if j == eos:
                done.append((seq + [j], score))
            else:
                live.append((seq + [j], score))
        if not live:
            break
    if not done:
        done = [(s + [eos], sc) for s, sc in live]
    if not done:
        return [], -math.inf

    def final(h):
        seq, score = h
        return score / (len(seq) - 1) if length_normalize else score

    best = max(done, key=final)
    return best[0][1:-1], final(best)


@dataclass
class Generation:
    tokens: List[str]
    spans: List[List[str]]
    well_formed: bool
    score: float


def generate(editor: EditorModel, tok: Tokenizer, masked: MaskedInput, target_label: str,
             beam: BeamConfig = BeamConfig()) -> Generation:
    """Infill ``masked`` under ``target_label``; returns the edited token sequence."""
    if masked.n_spans == 0:
        return Generation([t for t in masked.source], [], True, 0.0)
    max_len = sum(2 * n + 4 for n in masked.span_lengths) + masked.n_spans + 1
    max_len = min(max_len, editor.config["max_len"])
    with ag.no_grad():
        memory = encode_source(editor, _source_ids(tok, masked, target_label))

        def step(prefix):
            logits = decode(editor, memory, prefix).data[-1].astype(np.float64)
            z = logits - logits.max()
            return z - np.log(np.exp(z).sum())

        banned = [tok.id(PAD), tok.id(BOS)] + [tok.id(label_token(l)) for l in tok.labels]
        ids, score = beam_search(step, tok.id(BOS), tok.id(EOS), beam.size, max_len,
                                 beam.no_repeat_ngram, beam.length_normalize, banned)
    out = [tok.itos[i] for i in ids] + [EOS]
    spans, ok = split_target(out, masked.n_spans)
    spans = [clean_span(s) for s in spans]
    if not ok:
        log.debug("malformed sentinel order in generated target %s", out)
    return Generation(fill_spans(masked.source, spans), spans, ok, score)
