import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crest.alignment import edit_distance
from crest.autograd import AdamW
from crest.corpus import EOS, SENTIMENT_LABELS, Tokenizer, label_token
from crest.editor import (BeamConfig, EditorModel, MaskedInput, apply_sentinels, beam_search,
                          editor_loss, fill_spans, generate, split_target, train_step)

WORDS = ["the", "movie", "was", "good", "great", "bad", "awful", "plot", "and", "acting"]


@pytest.fixture(scope="module")
def tok():
    return Tokenizer(WORDS, SENTIMENT_LABELS)


def synthetic_set(n=50, seed=0):
    """Sentences whose single masked slot holds a label-specific word."""
    rng = np.random.default_rng(seed)
    data = []
    for i in range(n):
        label = SENTIMENT_LABELS[i % 2]
        word = rng.choice(["good", "great"] if label == "positive" else ["bad", "awful"])
        tokens = ["the", str(rng.choice(["movie", "plot", "acting"])), "was", str(word)]
        data.append((tokens, [0, 0, 0, 1], label))
    return data


class TestSentinels:
    def test_two_spans(self):
        m = apply_sentinels(list("abcde"), [0, 1, 1, 0, 1])
        assert m.source == ["a", "<sent_0>", "d", "<sent_1>"]
        assert m.target == ["<sent_0>", "b", "c", "<sent_1>", "e", EOS]
        assert m.span_lengths == [2, 1]

    def test_all_ones(self):
        m = apply_sentinels(list("abcde"), [1] * 5)
        assert m.source == ["<sent_0>"]
        assert m.target == ["<sent_0>"] + list("abcde") + [EOS]

    def test_nothing_to_edit(self):
        with pytest.raises(ValueError, match="nothing to edit"):
            apply_sentinels(list("abc"), [0, 0, 0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            apply_sentinels(list("abc"), [1, 0])

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(1, 20).flatmap(
        lambda n: st.tuples(st.lists(st.sampled_from(WORDS), min_size=n, max_size=n),
                            st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(any))))
    def test_round_trip(self, case):
        tokens, z = case
        m = apply_sentinels(tokens, z)
        sents = [t for t in m.source if t.startswith("<sent_")]
        assert sents == [f"<sent_{i}>" for i in range(m.n_spans)]
        assert [t for t in m.target if t.startswith("<sent_")] == sents
        spans, ok = split_target(m.target, m.n_spans)
        assert ok
        assert fill_spans(m.source, spans) == tokens


class TestSplitTarget:
    def test_malformed_order_is_flagged_and_salvaged(self):
        spans, ok = split_target(["<sent_1>", "x", "<sent_0>", "y", EOS], 2)
        assert not ok
        assert spans == [["x"], ["y"]]

    def test_missing_sentinel(self):
        spans, ok = split_target(["x", "y", EOS], 2)
        assert not ok
        assert spans == [["x", "y"], []]

    def test_stops_at_eos(self):
        spans, ok = split_target(["<sent_0>", "x", EOS, "junk"], 1)
        assert ok and spans == [["x"]]


class TestEditorTraining:
    def test_initial_loss_near_log_vocab(self, tok):
        ed = EditorModel(len(tok), d=32, seed=0)
        losses = [float(editor_loss(ed, tok, apply_sentinels(t, z), y).data)
                  for t, z, y in synthetic_set(10)]
        np.testing.assert_allclose(np.mean(losses), math.log(len(tok)), rtol=0.1)

    def test_loss_decreases(self, tok):
        data = synthetic_set(50)
        ed = EditorModel(len(tok), d=32, seed=0)
        opt = AdamW(ed.params, lr=3e-3, weight_decay=1e-6)
        losses = [train_step(ed, tok, [data[(5 * s + j) % 50] for j in range(5)], opt) for s in range(100)]
        assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])

    def test_label_embedding_receives_gradient(self, tok):
        ed = EditorModel(len(tok), d=32, seed=0)
        ed.zero_grad()
        for t, z, y in synthetic_set(8):
            editor_loss(ed, tok, apply_sentinels(t, z), y).backward()
        for label in SENTIMENT_LABELS:
            assert np.abs(ed["emb"].grad[tok.id(label_token(label))]).sum() > 0


def toy_step(table):
    """Decoder whose next-token log-probs depend only on the previous token."""
    def step(prefix):
        return table[prefix[-1]]
    return step


class TestBeamSearch:
    def test_size_one_is_greedy(self):
        rng = np.random.default_rng(0)
        V, bos, eos = 6, 0, 1
        for _ in range(20):
            logits = rng.normal(size=(V, V))
            table = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
            seq = [bos]
            for _ in range(5):
                lp = table[seq[-1]].copy()
                if len(seq) == 5:
                    seq.append(eos)
                    break
                nxt = int(np.argmax(lp))
                seq.append(nxt)
                if nxt == eos:
                    break
            if seq[-1] != eos:
                seq.append(eos)
            out, _ = beam_search(toy_step(table), bos, eos, size=1, max_len=5, no_repeat_ngram=0)
            assert out == seq[1:-1]

    def test_exhaustive_two_step(self):
        rng = np.random.default_rng(1)
        V, bos, eos = 5, 0, 1
        for _ in range(20):
            logits = rng.normal(size=(V, V)) * 2
            table = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
            best, best_score = None, -np.inf
            # at most two tokens before the forced end token
            for length in range(0, 3):
                for body in itertools.product(range(V), repeat=length):
                    if eos in body:
                        continue
                    seq = [bos, *body, eos]
                    s = sum(table[a][b] for a, b in zip(seq, seq[1:])) / (len(seq) - 1)
                    if s > best_score + 1e-12:
                        best, best_score = list(body), s
            out, score = beam_search(toy_step(table), bos, eos, size=V * V, max_len=3, no_repeat_ngram=0)
            assert out == best
            assert score == pytest.approx(best_score)

    def test_no_repeat_bigram(self):
        # the decoder would love to loop "2 3 2 3 ..."
        V, bos, eos = 4, 0, 1
        table = np.full((V, V), -5.0)
        table[0, 2] = table[2, 3] = table[3, 2] = -0.01
        table[:, eos] = -3.0
        out, _ = beam_search(toy_step(table), bos, eos, size=3, max_len=8, no_repeat_ngram=2)
        bigrams = list(zip(out, out[1:]))
        assert len(bigrams) == len(set(bigrams))

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            beam_search(lambda p: np.zeros(3), 0, 1, size=0, max_len=3)


class TestGenerate:
    def test_defaults(self):
        b = BeamConfig()
        assert b.size == 15 and b.no_repeat_ngram == 2

    def test_no_sentinel_passthrough(self, tok):
        ed = EditorModel(len(tok), d=16)
        masked = MaskedInput(["the", "movie", "was", "good"], [EOS], [])
        assert generate(ed, tok, masked, "negative").tokens == ["the", "movie", "was", "good"]

    @pytest.mark.parametrize("seed", range(5))
    def test_unmasked_tokens_preserved(self, tok, seed):
        rng = np.random.default_rng(seed)
        ed = EditorModel(len(tok), d=16, seed=seed)
        tokens = [str(w) for w in rng.choice(WORDS, size=8)]
        z = (rng.uniform(size=8) < 0.4).astype(int)
        z[0] = 1
        masked = apply_sentinels(tokens, z)
        g = generate(ed, tok, masked, "negative", BeamConfig(size=3))
        assert g.tokens == fill_spans(masked.source, g.spans)
        kept = [t for t, m in zip(tokens, z) if not m]
        assert [t for t in masked.source if not t.startswith("<")] == kept
        generated = sum(len(s) for s in g.spans)
        assert edit_distance(tokens, g.tokens) <= int(np.sum(z)) + generated

    def test_deterministic(self, tok):
        ed = EditorModel(len(tok), d=16, seed=3)
        masked = apply_sentinels(["the", "plot", "was", "bad"], [0, 0, 0, 1])
        a = generate(ed, tok, masked, "positive", BeamConfig(size=1))
        b = generate(ed, tok, masked, "positive", BeamConfig(size=1))
        assert a.tokens == b.tokens

    def test_trained_editor_follows_label(self, tok):
        data = synthetic_set(50)
        ed = EditorModel(len(tok), d=32, seed=0)
        opt = AdamW(ed.params, lr=3e-3, weight_decay=1e-6)
        for s in range(150):
            train_step(ed, tok, [data[(5 * s + j) % 50] for j in range(5)], opt)
        masked = apply_sentinels(["the", "movie", "was", "bad"], [0, 0, 0, 1])
        pos = generate(ed, tok, masked, "positive", BeamConfig(size=4)).tokens
        neg = generate(ed, tok, masked, "negative", BeamConfig(size=4)).tokens
        assert pos[-1] in ("good", "great")
        assert neg[-1] in ("bad", "awful")
