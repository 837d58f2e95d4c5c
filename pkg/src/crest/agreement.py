"""Joint training on factual/counterfactual pairs with rationale agreement.

Every pair is fed through one shared rationalizer twice: the factual flow on
``x`` and the counterfactual flow on ``x_tilde``.  The counterfactual flow runs
with a budget rescaled by how many tokens the edit touched.  The objective is

    CE(y_f, y_hat) + alpha * CE(y_c, y_tilde) + lam * Omega

where ``Omega`` pulls the relaxed masks of both flows toward the
generation-stage targets ``z*`` and ``z_tilde*``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .alignment import INS, SUB, align
from .autograd import AdamW, Tensor
from .rationalizer import RationalizerModel, fit, forward

log = logging.getLogger(__name__)

MIN_BUDGET = 1e-6


@dataclass(frozen=True)
class AgreementConfig:
    alpha: float = 0.01
    lam: float = 0.001

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lambda must be non-negative")

    @classmethod
    def for_task(cls, task: str) -> "AgreementConfig":
        if task == "sentiment":
            return cls(0.01, 0.001)
        if task == "nli":
            return cls(0.01, 0.1)
        raise ValueError(f"unknown task {task!r}")


def derive_counterfactual_rationale(x: Sequence[str], x_tilde: Sequence[str]) -> np.ndarray:
    """Mark the positions of ``x_tilde`` that were inserted or substituted when aligning from ``x``."""
    z = np.zeros(len(x_tilde), dtype=np.int8)
    for op, _, j in align(list(x), list(x_tilde)):
        if op in (INS, SUB):
            z[j] = 1
    return z


def adjusted_budget(budget: float, z_star, z_tilde_star) -> float:
    """Rescale ``budget`` by ``|z_tilde*| / |z*|``, clamped to ``(0, 1]``."""
    n_f = int(np.count_nonzero(z_star))
    if n_f == 0:
        raise ValueError("factual rationale is empty; cannot rescale the budget")
    b = budget * np.count_nonzero(z_tilde_star) / n_f
    return float(min(1.0, max(b, MIN_BUDGET)))


def agreement_loss(mu, mu_tilde, z_star, z_tilde_star) -> Tensor:
    """Squared L2 distance of each flow's relaxed mask to its binary target, summed."""
    mu, mu_tilde = ag.as_tensor(mu), ag.as_tensor(mu_tilde)
    terms = []
    for m, target in ((mu, z_star), (mu_tilde, z_tilde_star)):
        target = np.asarray(target, dtype=m.data.dtype)
        if m.shape != target.shape:
            raise ValueError(f"mask shape {m.shape} does not match target {target.shape}")
        d = ag.sub(m, Tensor(target))
        terms.append(ag.sum(ag.mul(d, d)))
    return ag.add(terms[0], terms[1])


def total_loss(logits_f: Tensor, logits_c: Tensor, y_f: int, y_c: int, omega: Tensor,
               cfg: AgreementConfig) -> Tensor:
    loss = ag.add(ag.cross_entropy(logits_f, [y_f]), ag.scale(ag.cross_entropy(logits_c, [y_c]), cfg.alpha))
    return ag.add(loss, ag.scale(omega, cfg.lam))


@dataclass
class EncodedPair:
    ids_f: np.ndarray
    y_f: int
    ids_c: np.ndarray
    y_c: int
    z_star: np.ndarray
    z_tilde_star: np.ndarray


def encode_pairs(pairs, tok) -> List[EncodedPair]:
    """Map :class:`CounterfactualPair` records to ids; pairs with an empty ``z*`` are dropped."""
    out = []
    for p in pairs:
        if not any(p.z_star):
            log.warning("skipping pair %s: empty factual rationale", p.id)
            continue
        out.append(EncodedPair(tok.encode_tokens(p.x), tok.labels.index(p.y_f),
                               tok.encode_tokens(p.x_tilde), tok.labels.index(p.y_c),
                               np.asarray(p.z_star, dtype=np.float32),
                               np.asarray(p.z_tilde_star, dtype=np.float32)))
    return out


def _pair_step(model: RationalizerModel, batch: Sequence[EncodedPair], cfg: AgreementConfig,
               optimizer: AdamW, stats: Dict[str, float]) -> float:
    optimizer.zero_grad()
    total = 0.0
    for p in batch:
        out_f = forward(model, p.ids_f)
        b_c = adjusted_budget(model.budget, p.z_star, p.z_tilde_star)
        out_c = forward(model, p.ids_c, budget=b_c)
        omega = agreement_loss(out_f.mu, out_c.mu, p.z_star, p.z_tilde_star)
        loss = ag.scale(total_loss(out_f.logits, out_c.logits, p.y_f, p.y_c, omega, cfg), 1.0 / len(batch))
        loss.backward()
        total += float(loss.data)
        with ag.no_grad():
            stats["L_f"] += float(ag.cross_entropy(out_f.logits, [p.y_f]).data)
            stats["L_c"] += float(ag.cross_entropy(out_c.logits, [p.y_c]).data)
        stats["Omega"] += float(omega.data)
        stats["acc_f"] += out_f.prediction == p.y_f
        stats["acc_c"] += out_c.prediction == p.y_c
    optimizer.step()
    return total


STAT_KEYS = ("L_f", "L_c", "Omega", "acc_f", "acc_c")


def train_agreement_epoch(model: RationalizerModel, pairs: Sequence[EncodedPair], cfg: AgreementConfig,
                          optimizer: AdamW, order: Optional[np.ndarray] = None,
                          batch_size: int = 16) -> Dict[str, float]:
    """One pass over ``pairs`` (in ``order``); per-example means of each loss term and accuracies."""
    order = np.arange(len(pairs)) if order is None else order
    stats = dict.fromkeys(STAT_KEYS, 0.0)
    for start in range(0, len(order), batch_size):
        _pair_step(model, [pairs[i] for i in order[start:start + batch_size]], cfg, optimizer, stats)
    n = max(len(order), 1)
    return {k: v / n for k, v in stats.items()}


def fit_agreement(model: RationalizerModel, pairs: Sequence[EncodedPair], cfg: AgreementConfig, *,
                  epochs: int = 5, batch_size: int = 16, lr: float = 3e-3, weight_decay: float = 1e-6,
                  seed: int = 0, dev=None, min_epochs: int = 1, patience: int = 5,
                  optimizer: Optional[AdamW] = None):
    """Train on paired data with the same shuffling and early stopping as :func:`crest.rationalizer.fit`.

    Returns ``(trace, history)``: the per-step loss trace and one stats dict
    per epoch.
    """
    stats = dict.fromkeys(STAT_KEYS, 0.0)
    history: List[Dict[str, float]] = []

    def step(m, batch, opt):
        return _pair_step(m, batch, cfg, opt, stats)

    def on_epoch(epoch):
        history.append({"epoch": epoch, **{k: v / max(len(pairs), 1) for k, v in stats.items()}})
        log.info("epoch %d: %s", epoch, history[-1])
        stats.update(dict.fromkeys(STAT_KEYS, 0.0))

    trace = fit(model, pairs, epochs=epochs, batch_size=batch_size, lr=lr, weight_decay=weight_decay,
                seed=seed, dev=dev, min_epochs=min_epochs, patience=patience, optimizer=optimizer,
                step=step, on_epoch=on_epoch)
    return trace, history


def write_epoch_csv(path, history: Sequence[Dict[str, float]], meta: Optional[Dict[str, str]] = None) -> None:
    """Per-epoch stats as CSV; ``meta`` entries become leading constant columns."""
    meta = meta or {}
    fields = list(meta) + ["epoch", "L_f", "L_c", "Omega", "acc_f", "acc_c"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({**meta, **{k: (f"{row[k]:.6f}" if k != "epoch" else row[k]) for k in fields if k in row}})
