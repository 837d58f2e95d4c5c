import csv
import math

import numpy as np
import pytest

from crest.corpus import gen_sentiment_corpus, split
from crest.generation import CounterfactualPair
from crest.metrics import (BLEU_EPS, LinearStudent, MetricReport, NgramLM, aggregate, bleu,
                           closeness, counterfactual_simulability, fluency_ppl, forward_simulability,
                           mad_agreement, mask_iou, mean_plausibility, plausibility_auc, self_bleu,
                           train_student, validity, word_scores)
from oracles import bleu_oracle, closeness_oracle, mad_oracle, pairwise_auc, self_bleu_oracle


def pair(xt, yc, i=0):
    return CounterfactualPair(f"p{i}", ["a"], "positive" if yc == "negative" else "negative",
                              list(xt), yc, [1], [1] * len(xt))


class TestValidity:
    def test_rate(self):
        pairs = [pair(["ok"] if i < 93 else ["no"], "negative", i) for i in range(100)]
        assert validity(pairs, lambda t: "negative" if t == ["ok"] else "positive") == pytest.approx(0.93)

    def test_constant_classifier(self):
        pairs = [pair(["w"], "negative" if i % 4 else "positive", i) for i in range(40)]
        assert validity(pairs, lambda t: "negative") == pytest.approx(0.75)

    def test_empty(self):
        with pytest.raises(ValueError):
            validity([], lambda t: "x")


@pytest.fixture(scope="module")
def lm():
    return NgramLM.train([e.tokens for e in split(gen_sentiment_corpus(0, 400), "train")])


class TestNgramLM:
    def test_conditionals_normalised(self, lm):
        for prev in ["<bos>", "the", "great", "never-seen"]:
            total = sum(lm.prob(w, prev) for w in lm.vocab)
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_uniform_lm(self):
        lm = NgramLM(["a", "b", "c"])
        assert lm.perplexity(["a", "c", "b", "zzz"]) == pytest.approx(lm.V)

    def test_single_token(self, lm):
        p = lm.prob("the")
        assert lm.perplexity(["the"]) == pytest.approx(1 / p)

    def test_shuffled_text_scores_worse(self, lm):
        rng = np.random.default_rng(0)
        texts = [e.tokens for e in split(gen_sentiment_corpus(1, 2000), "test")][:200]
        worse = 0
        for t in texts:
            shuffled = list(rng.permutation(t))
            while shuffled == t:
                shuffled = list(rng.permutation(t))
            worse += lm.perplexity(shuffled) > lm.perplexity(t)
        assert worse >= 180

    def test_fluency_skips_empty(self, lm):
        a = fluency_ppl([["the", "film"], []], lm)
        assert a == pytest.approx(lm.perplexity(["the", "film"]))
        with pytest.raises(ValueError):
            fluency_ppl([[]], lm)

    def test_bad_parameters(self):
        with pytest.raises(ValueError):
            NgramLM(k=0)


class TestBleu:
    def test_identical(self):
        assert self_bleu([["a", "b", "c", "d"], ["a", "b", "c", "d"]]) == pytest.approx(1.0)

    def test_identical_short(self):
        assert self_bleu([["a", "b"], ["a", "b"]]) == pytest.approx(1.0)

    def test_disjoint(self):
        assert self_bleu([["a", "b", "c", "d"], ["e", "f", "g", "h"]]) < 1e-6

    def test_hand_computed(self):
        # each side: 3/4 unigrams, 2/3 bigrams, 1/2 trigrams, no 4-gram match; equal lengths
        expected = (0.75 * (2 / 3) * 0.5 * BLEU_EPS) ** 0.25
        got = self_bleu([["a", "b", "c", "d"], ["a", "b", "c", "e"]])
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(self_bleu_oracle([list("abcd"), list("abce")]), abs=1e-12)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            texts = [list(rng.choice(list("abcde"), size=rng.integers(1, 9)))
                     for _ in range(int(rng.integers(2, 5)))]
            assert abs(self_bleu(texts) - self_bleu_oracle(texts)) <= 1e-9

    def test_brevity_penalty(self):
        assert bleu(["a", "b"], [["a", "b", "c", "d"]]) == pytest.approx(math.exp(1 - 2))

    def test_needs_two(self):
        with pytest.raises(ValueError):
            self_bleu([["a"]])

    def test_empty_hypothesis(self):
        assert bleu([], [["a"]]) == 0.0 == bleu_oracle([], [["a"]])


class TestCloseness:
    def test_examples(self):
        assert closeness(list("abcd"), list("abcd")) == 0.0
        assert closeness(list("abcd"), list("abce")) == 0.25
        assert closeness(list("abcd"), list("wxyz")) == 1.0
        assert closeness([], []) == 0.0

    def test_random_against_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            x = list(rng.choice(list("abcd"), size=rng.integers(0, 10)))
            y = list(rng.choice(list("abcd"), size=rng.integers(0, 10)))
            assert abs(closeness(x, y) - closeness_oracle(x, y)) <= 1e-9


class TestPlausibility:
    def test_examples(self):
        gold = [0, 1, 1, 0]
        assert plausibility_auc([0.1, 0.9, 0.8, 0.2], gold) == 1.0
        assert plausibility_auc([0.9, 0.1, 0.2, 0.8], gold) == 0.0
        assert plausibility_auc([0.5] * 4, gold) == 0.5

    def test_single_class_is_undefined(self):
        with pytest.raises(ValueError):
            plausibility_auc([0.1, 0.2], [1, 1])
        mean, n = mean_plausibility([([0.1, 0.2], [1, 1]), ([0.3, 0.1], [1, 0])])
        assert (mean, n) == (1.0, 1)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(2)
        done = 0
        while done < 100:
            n = int(rng.integers(2, 12))
            gold = rng.integers(0, 2, size=n)
            if gold.min() == gold.max():
                continue
            # coarse scores so ties occur
            scores = rng.integers(0, 4, size=n) / 4
            assert abs(plausibility_auc(scores, gold) - pairwise_auc(scores, gold)) <= 1e-9
            done += 1

    def test_word_scores(self):
        np.testing.assert_allclose(word_scores([1.0, 3.0, 5.0], [0, 0, 1]), [2.0, 5.0])

    def test_mask_iou(self):
        assert mask_iou([1, 1, 0, 0], [0, 1, 1, 0]) == pytest.approx(1 / 3)
        assert mask_iou([0, 0], [0, 0]) == 1.0


class TestMad:
    def test_examples(self):
        assert mad_agreement([1, 2, 3], [1, 2, 3], 5) == 1.0
        assert mad_agreement([1, 5], [5, 1], 5) == 0.0

    def test_random_against_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 10))
            a, b = rng.integers(1, 6, size=n), rng.integers(1, 6, size=n)
            assert abs(mad_agreement(a, b, 5) - mad_oracle(a, b, 5)) <= 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mad_agreement([1, 2], [1], 5)


POLAR = {"good": 1, "bad": 0}
FILLER = ["the", "film", "was", "plot", "and", "it", "very", "quite"]


def balanced_texts(n, seed=0):
    rng = np.random.default_rng(seed)
    texts = []
    for i in range(n):
        t = list(rng.choice(FILLER, size=6))
        t.insert(int(rng.integers(7)), "good" if i % 2 else "bad")
        texts.append(t)
    return texts


def lexicon_classifier(tokens):
    y = int("good" in tokens)
    return y, [int(t in POLAR) for t in tokens]


VOCAB = FILLER + list(POLAR)


class TestForwardSimulability:
    def test_copying_student(self):
        class Copy:
            def predict(self, selected):
                return int("good" in selected)

        assert forward_simulability(lexicon_classifier, Copy(), balanced_texts(50)) == 1.0

    def test_label_permuted_student(self):
        texts = balanced_texts(500)
        outs = [lexicon_classifier(t) for t in texts]
        student = LinearStudent(VOCAB, 2).fit(
            [[w for w, k in zip(t, z) if k] for t, (_, z) in zip(texts, outs)], [1 - y for y, _ in outs])
        assert forward_simulability(lexicon_classifier, student, texts) <= 0.1

    def test_gold_beats_random_rationale(self):
        rng = np.random.default_rng(5)

        def random_classifier(tokens):
            z = np.zeros(len(tokens), dtype=int)
            z[rng.integers(len(tokens))] = 1
            return int("good" in tokens), z

        train, test = balanced_texts(300, 1), balanced_texts(200, 2)
        gold = forward_simulability(lexicon_classifier,
                                    train_student(lexicon_classifier, train, VOCAB, 2), test)
        rand = forward_simulability(random_classifier,
                                    train_student(random_classifier, train, VOCAB, 2), test)
        assert gold == 1.0 and rand < 0.8

    def test_empty_rationale_is_bias_only(self):
        student = LinearStudent(VOCAB, 2)
        student.b[:] = (0.0, 1.0)
        assert student.predict([]) == 1


class TestCounterfactualSimulability:
    @staticmethod
    def clf(tokens):
        return lexicon_classifier(tokens)

    @staticmethod
    def flip(tokens, z, y):
        return ["bad" if t == "good" else "good" if t == "bad" else t for t in tokens]

    def test_identity_editor(self):
        r = counterfactual_simulability(self.clf, lambda t, z, y: t, balanced_texts(10))
        assert r.rate == 0.0 and r.n_used == 10

    def test_always_flip(self):
        assert float(counterfactual_simulability(self.clf, self.flip, balanced_texts(4))) == 1.0

    def test_three_of_four(self):
        texts = balanced_texts(4)
        calls = iter(range(4))

        def editor(tokens, z, y):
            return tokens if next(calls) == 2 else self.flip(tokens, z, y)

        assert counterfactual_simulability(self.clf, editor, texts).rate == 0.75

    def test_failures_excluded(self):
        texts = balanced_texts(5)
        calls = iter(range(5))

        def editor(tokens, z, y):
            if next(calls) < 2:
                raise ValueError("nothing to edit")
            return self.flip(tokens, z, y)

        r = counterfactual_simulability(self.clf, editor, texts)
        assert (r.rate, r.n_used, r.n_failed) == (1.0, 3, 2)


class TestReport:
    def _report(self, v=0.8):
        r = MetricReport(meta={"command": "generate", "seed": "0"})
        r.add("validity", v, 100)
        r.add("fluency", 12.345, 100)
        r.add("closeness", 0.25, 100)
        r.add("accuracy", 0.9, 50)
        return r

    def test_csv(self, tmp_path):
        path = tmp_path / "r.csv"
        self._report().to_csv(path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["command", "seed", "metric", "value", "n"]
        assert rows[1] == ["generate", "0", "validity", "0.800000", "100"]

    def test_markdown(self):
        md = self._report().to_markdown().splitlines()
        assert md[0] == "command=generate, seed=0"
        assert md[2] == "| val. | fl. | clo. | accuracy |"
        assert md[4] == "| 80.00 | 12.35 | 25.00 | 0.90 |"

    def test_aggregate(self):
        agg = aggregate([self._report(0.8), self._report(0.6)])
        assert agg["validity"] == pytest.approx((0.7, 0.1))
