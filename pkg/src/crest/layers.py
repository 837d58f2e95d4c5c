"""Transformer building blocks on top of :mod:`crest.autograd`."""

from __future__ import annotations

import math
from typing import Dict, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Named parameter container.  Subclasses fill ``self.params`` and ``self.config``."""

    kind = "module"

    def __init__(self):
        self.params: Dict[str, Tensor] = {}
        self.config: dict = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(array, dtype=np.float32), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float32)


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def add_block_params(m: Module, rng, prefix: str, d: int, cross: bool = False, ffn_mult: int = 2):
    for name in ("attn",) + (("cross",) if cross else ()):
        m.add(f"{prefix}.{name}.ln_g", np.ones((1, d)))
        m.add(f"{prefix}.{name}.ln_b", np.zeros((1, d)))
        for w in ("q", "k", "v", "o"):
            m.add(f"{prefix}.{name}.w{w}", init_linear(rng, d, d))
    m.add(f"{prefix}.ffn.ln_g", np.ones((1, d)))
    m.add(f"{prefix}.ffn.ln_b", np.zeros((1, d)))
    m.add(f"{prefix}.ffn.w1", init_linear(rng, d, ffn_mult * d))
    m.add(f"{prefix}.ffn.b1", np.zeros((1, ffn_mult * d)))
    m.add(f"{prefix}.ffn.w2", init_linear(rng, ffn_mult * d, d) * 0.5)
    m.add(f"{prefix}.ffn.b2", np.zeros((1, d)))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ag.add(ag.matmul(x, w), ag.repeat_row(b, x.shape[0]))


def attention(m: Module, prefix: str, x: Tensor, memory: Optional[Tensor] = None,
              mask: Optional[np.ndarray] = None) -> Tensor:
    """Pre-norm single-head attention with residual.  ``memory=None`` means self-attention."""
    p = m.params
    a = ag.layer_norm(x, p[f"{prefix}.ln_g"], p[f"{prefix}.ln_b"])
    src = a if memory is None else memory
    q = ag.matmul(a, p[f"{prefix}.wq"])
    k = ag.matmul(src, p[f"{prefix}.wk"])
    v = ag.matmul(src, p[f"{prefix}.wv"])
    s = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    if mask is not None:
        s = ag.add(s, Tensor(mask))
    ctx = ag.matmul(ag.softmax(s), v)
    return ag.add(x, ag.matmul(ctx, p[f"{prefix}.wo"]))


def feed_forward(m: Module, prefix: str, x: Tensor) -> Tensor:
    p = m.params
    a = ag.layer_norm(x, p[f"{prefix}.ln_g"], p[f"{prefix}.ln_b"])
    h = ag.relu(affine(a, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return ag.add(x, affine(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"]))


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    return np.triu(np.full((n, n), -1e9, dtype=dtype), k=1)


def embed(m: Module, table: str, positions: Optional[str], ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    x = ag.gather(m.params[table], ids)
    if positions is not None:
        pos = m.params[positions]
        if len(ids) > pos.shape[0]:
            raise ValueError(f"sequence length {len(ids)} exceeds max_len {pos.shape[0]}")
        x = ag.add(x, ag.gather(pos, np.arange(len(ids))))
    return x
