"""Budget-constrained selective rationalizer.

Encoder -> per-token scores -> SparseMAP marginals ``mu`` -> predictor over
token embeddings scaled by ``mu``.  The reported rationale is the top-k
binarisation of ``mu`` with ``k = ceil(B * n)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import AdamW, Tensor
from .layers import Module, add_block_params, affine, attention, embed, feed_forward, init_linear
from .sparsemap import (BudgetFactor, SparseMapSolution, binarize, budget_tokens, sparsemap,
                        sparsemap_backward)

log = logging.getLogger(__name__)

FROZEN_SCORE = -1e3


class RationalizerModel(Module):
    kind = "rationalizer"

    def __init__(self, vocab_size: int, n_classes: int, d: int = 64, max_len: int = 128,
                 budget: float = 0.3, transition_penalty: float = 1e-4, seed: int = 0,
                 score_bias: float = 1.0, sep_id: Optional[int] = None, freeze_premise: bool = False):
        super().__init__()
        if d <= 0 or n_classes < 2 or not 0 < budget <= 1:
            raise ValueError("need d > 0, n_classes >= 2 and 0 < budget <= 1")
        self.config = dict(vocab_size=vocab_size, n_classes=n_classes, d=d, max_len=max_len,
                           budget=budget, transition_penalty=transition_penalty, seed=seed,
                           score_bias=score_bias, sep_id=sep_id, freeze_premise=freeze_premise)
        rng = np.random.default_rng(seed)
        # encoder (phi)
        self.add("enc.emb", rng.normal(0, 1.0, size=(vocab_size, d)))
        self.add("enc.pos", rng.normal(0, 0.5, size=(max_len, d)))
        add_block_params(self, rng, "enc.block", d)
        self.add("enc.ln_g", np.ones((1, d)))
        self.add("enc.ln_b", np.zeros((1, d)))
        # explainer scorer (gamma)
        self.add("expl.w", init_linear(rng, d, 1))
        self.add("expl.b", np.full((1, 1), score_bias))
        # predictor (theta)
        self.add("pred.emb", rng.normal(0, 1.0, size=(vocab_size, d)))
        self.add("pred.w", init_linear(rng, d, d))
        self.add("pred.b", np.zeros((1, d)))
        self.add("pred.att", init_linear(rng, d, 1) * 0.1)
        self.add("pred.cls_w", init_linear(rng, d, n_classes) * 0.1)
        self.add("pred.cls_b", np.zeros((1, n_classes)))

    @classmethod
    def from_config(cls, config: dict) -> "RationalizerModel":
        return cls(**config)

    @property
    def budget(self) -> float:
        return self.config["budget"]

    def group(self, name: str) -> dict:
        """Parameters of one component: 'enc' (phi), 'expl' (gamma) or 'pred' (theta)."""
        return {k: v for k, v in self.params.items() if k.startswith(name + ".")}


@dataclass
class RationaleOutput:
    mu: Tensor
    z: np.ndarray
    logits: Tensor
    solution: SparseMapSolution

    @property
    def probs(self) -> np.ndarray:
        return ag._softmax_np(self.logits.data.astype(np.float64))[0]

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits.data[0]))


def _check_ids(model: RationalizerModel, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("expected a non-empty 1-D token id sequence")
    if ids.min() < 0 or ids.max() >= model.config["vocab_size"]:
        raise ValueError("token id out of vocabulary; map unknown words to <unk> first")
    if ids.size > model.config["max_len"]:
        raise ValueError(f"sequence length {ids.size} exceeds max_len {model.config['max_len']}")
    return ids


def encode(model: RationalizerModel, tokens) -> Tensor:
    ids = _check_ids(model, tokens)
    x = embed(model, "enc.emb", "enc.pos", ids)
    x = attention(model, "enc.block.attn", x)
    x = feed_forward(model, "enc.block.ffn", x)
    return ag.layer_norm(x, model["enc.ln_g"], model["enc.ln_b"])


def _sparsemap_op(scores: Tensor, factor: BudgetFactor, max_iter: int = 100, tol: float = 1e-6) -> Tuple[Tensor, SparseMapSolution]:
    holder = {}

    def forward(theta):
        sol = sparsemap(theta, factor, max_iter=max_iter, tol=tol)
        if not sol.converged:
            log.debug("sparsemap did not converge in %d iterations (n=%d, k=%d)", max_iter, factor.n, factor.k)
        holder["sol"] = sol
        return sol.marginals, sol

    def backward(sol, g):
        return (sparsemap_backward(sol, g).astype(g.dtype),)

    mu = ag.custom(forward, backward, [scores], "sparsemap", factor=factor)
    return mu, holder["sol"]


def explain(model: RationalizerModel, H: Tensor, budget_override: Optional[float] = None,
            tokens=None) -> Tuple[Tensor, np.ndarray, SparseMapSolution]:
    """Score positions, solve SparseMAP under ``k = ceil(B n)``, binarise.

    ``tokens`` is only needed when the model freezes the premise segment.
    """
    n = H.shape[0]
    budget = model.budget if budget_override is None else budget_override
    factor = BudgetFactor.from_budget(n, budget, model.config["transition_penalty"])
    scores = ag.reshape(affine(H, model["expl.w"], model["expl.b"]), (n,))
    if model.config.get("freeze_premise") and tokens is not None and model.config.get("sep_id") is not None:
        ids = np.asarray(tokens)
        hits = np.flatnonzero(ids == model.config["sep_id"])
        if hits.size:
            frozen = np.zeros(n, dtype=np.float32)
            frozen[: hits[0] + 1] = FROZEN_SCORE
            scores = ag.add(scores, Tensor(frozen))
    mu, sol = _sparsemap_op(scores, factor)
    return mu, binarize(sol.marginals, factor.k), sol


def predict(model: RationalizerModel, tokens, mu) -> Tensor:
    """Logits (1, C) from token embeddings scaled by ``mu``; masked rows carry no token information."""
    ids = _check_ids(model, tokens)
    mu = ag.as_tensor(mu)
    if mu.shape != (ids.size,):
        raise ValueError(f"mask length {mu.shape} does not match {ids.size} tokens")
    m = ag.scale_rows(ag.gather(model["pred.emb"], ids), mu)
    h = ag.tanh(affine(m, model["pred.w"], model["pred.b"]))
    att = ag.softmax(ag.reshape(ag.matmul(h, model["pred.att"]), (1, ids.size)))
    pooled = ag.matmul(att, h)
    return affine(pooled, model["pred.cls_w"], model["pred.cls_b"])


def forward(model: RationalizerModel, tokens, budget: Optional[float] = None) -> RationaleOutput:
    H = encode(model, tokens)
    mu, z, sol = explain(model, H, budget, tokens)
    return RationaleOutput(mu, z, predict(model, tokens, mu), sol)


def rationalize(model: RationalizerModel, tokens, budget: Optional[float] = None) -> RationaleOutput:
    """Inference-only forward pass (no graph recorded)."""
    with ag.no_grad():
        return forward(model, tokens, budget)


def make_optimizer(model: Module, lr: float = 1e-4, weight_decay: float = 1e-6) -> AdamW:
    return AdamW(model.params, lr=lr, weight_decay=weight_decay)


def train_step(model: RationalizerModel, batch: Sequence[Tuple[np.ndarray, int]], optimizer: AdamW) -> float:
    """One AdamW step on mean cross-entropy over ``batch`` of (token ids, label index)."""
    optimizer.zero_grad()
    total = 0.0
    for ids, y in batch:
        out = forward(model, ids)
        loss = ag.scale(ag.cross_entropy(out.logits, [y]), 1.0 / len(batch))
        loss.backward()
        total += float(loss.data)
    optimizer.step()
    return total


def gradient_masker(model: RationalizerModel, tokens, top_fraction: float) -> np.ndarray:
    """Mask the ceil(fraction * n) positions whose predictor-embedding gradient has the largest l1 norm."""
    ids = _check_ids(model, tokens)
    n = ids.size
    emb = Tensor(model["pred.emb"].data[ids], requires_grad=True)
    ones = Tensor(np.ones(n, dtype=np.float32))
    h = ag.tanh(affine(ag.scale_rows(emb, ones), model["pred.w"], model["pred.b"]))
    att = ag.softmax(ag.reshape(ag.matmul(h, model["pred.att"]), (1, n)))
    logits = affine(ag.matmul(att, h), model["pred.cls_w"], model["pred.cls_b"])
    y = int(np.argmax(logits.data[0]))
    ag.cross_entropy(logits, [y]).backward()
    attribution = np.abs(emb.grad).sum(axis=1)
    k = budget_tokens(top_fraction, n)
    z = np.zeros(n, dtype=np.int8)
    z[np.argsort(-attribution, kind="stable")[:k]] = 1
    return z


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------

def accuracy(model: RationalizerModel, data: Sequence[Tuple[np.ndarray, int]], budget=None) -> float:
    if not data:
        return float("nan")
    hits = sum(rationalize(model, ids, budget).prediction == y for ids, y in data)
    return hits / len(data)


def fit(model: RationalizerModel, train: Sequence, *, epochs: int = 5, batch_size: int = 16,
        lr: float = 3e-3, weight_decay: float = 1e-6, seed: int = 0,
        dev: Optional[Sequence[Tuple[np.ndarray, int]]] = None, min_epochs: int = 1,
        patience: int = 5, optimizer: Optional[AdamW] = None,
        step: Optional[Callable] = None, on_epoch: Optional[Callable[[int], None]] = None) -> List[float]:
    """Shuffle-and-step training; returns the per-step loss trace.

    ``step(model, batch, optimizer) -> loss`` defaults to :func:`train_step`
    on (token ids, label) items.  With ``dev`` given, keeps the parameters of
    the best dev-accuracy epoch and stops after ``patience`` epochs without
    improvement (never before ``min_epochs``).
    """
    opt = optimizer or make_optimizer(model, lr, weight_decay)
    step = step or train_step
    rng = np.random.default_rng(seed)
    trace: List[float] = []
    best, best_state, stale = -1.0, None, 0
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch_size):
            trace.append(step(model, [train[i] for i in order[start:start + batch_size]], opt))
        if on_epoch is not None:
            on_epoch(epoch)
        if dev is not None:
            acc = accuracy(model, dev)
            log.info("epoch %d: dev acc %.4f", epoch, acc)
            if acc > best:
                best, best_state, stale = acc, model.state(), 0
            else:
                stale += 1
                if stale >= patience and epoch + 1 >= min_epochs:
                    break
    if best_state is not None:
        model.load_state(best_state)
    return trace
