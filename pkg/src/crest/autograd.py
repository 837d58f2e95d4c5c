"""Minimal reverse-mode automatic differentiation over dense 2-D arrays.

Tensors record the primitive that produced them, so a computation written
eagerly can be captured as a :class:`Graph`, replayed on new inputs with
:func:`evaluate`, and differentiated with :func:`gradients`.  Models in this
package use the eager form directly and call :meth:`Tensor.backward`.

Shapes are never broadcast implicitly.  The only row-wise expansion is
:func:`scale_rows`; biases are expanded explicitly with :func:`repeat_row`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

DTYPE = np.float32

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


class NumericDomainError(ArithmeticError):
    """Raised when log/softmax-type primitives see non-finite input."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. for inference and beam search."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "attrs",
                 "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype or getattr(data, "dtype", None) or DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op: Optional[str] = None
        self.parents: tuple = ()
        self.attrs: dict = {}
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order([self])
        grads: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or not node.requires_grad:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topo_order(roots: Sequence[Tensor]) -> List[Tensor]:
    seen = set()
    order: List[Tensor] = []
    stack = [(r, False) for r in reversed(roots)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op, **attrs) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        out.op = op
        out.parents = tuple(parents)
        out.attrs = attrs
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._backward = backward
    return out


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: expected matching shapes, got {a.shape} and {b.shape}")


def _check_finite(op, x):
    if not np.all(np.isfinite(x.data)):
        raise NumericDomainError(f"{op}: non-finite input")


# ----------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (g * b.data, g * a.data), "mul")


def scale(a, factor: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    f = a.data.dtype.type(factor)
    return _result(a.data * f, (a,), lambda g: (g * f,), "scale", factor=float(factor))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: expected (m,k)@(k,n), got {a.shape} and {b.shape}")
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D input, got {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape",
                   shape=shape)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    other = 1 - axis
    ref = ts[0].shape
    for t in ts[1:]:
        if t.data.ndim != 2 or t.shape[other] != ref[other]:
            raise ShapeError(f"concat: axis-{other} sizes differ, expected {ref} got {t.shape}")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, backward,
                   "concat", axis=axis)


def gather(table, index) -> Tensor:
    """Row lookup: ``out[i] = table[index[i]]`` (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather: expected 2-D table and 1-D index, got {table.shape}, {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather: index out of range for table with {table.shape[0]} rows")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(table.data[idx], (table,), backward, "gather", index=idx)


def repeat_row(row, n: int) -> Tensor:
    """Expand a (1, d) row to (n, d); explicit stand-in for bias broadcasting."""
    return gather(row, np.zeros(n, dtype=np.int64))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1 + np.tanh(0.5 * a.data))
    return _result(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("log", a)
    if np.any(a.data <= 0):
        raise NumericDomainError("log: non-positive input")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sum(a) -> Tensor:  # noqa: A001 - mirrors the primitive name
    a = as_tensor(a)
    return _result(a.data.sum(dtype=a.data.dtype), (a,),
                   lambda g: (np.full_like(a.data, g),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _result(a.data.mean(dtype=a.data.dtype), (a,),
                   lambda g: (np.full_like(a.data, g / n),), "mean")


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"softmax: expected 2-D input, got {a.shape}")
    _check_finite("softmax", a)
    y = _softmax_np(a.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, (a,), backward, "softmax")


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax(logits)."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != t.size:
        raise ShapeError(f"cross_entropy: expected ({t.size}, C) logits, got {logits.shape}")
    _check_finite("cross_entropy", logits)
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(t.size)
    loss = -logp[rows, t].mean(dtype=x.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, t] -= 1
        return (p * (g / t.size),)

    return _result(loss, (logits,), backward, "cross_entropy", targets=t)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise each row of ``x`` then apply per-feature ``gain`` and ``bias`` (both (1, d))."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[1]
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise ShapeError(f"layer_norm: gain/bias must be (1, {d}), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True))
        return (gx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True))

    return _result(out.astype(x.data.dtype), (x, gain, bias), backward, "layer_norm", eps=eps)


def scale_rows(x, v) -> Tensor:
    """Scale row i of ``x`` (n, d) by ``v[i]`` (v has shape (n,))."""
    x, v = as_tensor(x), as_tensor(v)
    if x.data.ndim != 2 or v.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: expected x (n, d) and v (n,), got {x.shape}, {v.shape}")
    col = v.data[:, None]
    return _result(x.data * col, (x, v),
                   lambda g: (g * col, (g * x.data).sum(axis=1)), "scale_rows")


def custom(fn_forward: Callable, fn_backward: Callable, inputs: Sequence, op: str, **attrs) -> Tensor:
    """Wrap a non-primitive differentiable function (e.g. a solver) as a graph node.

    ``fn_forward`` maps input arrays to an output array plus a context object;
    ``fn_backward(ctx, g)`` returns one gradient (or None) per input.
    """
    ins = [as_tensor(t) for t in inputs]
    data, ctx = fn_forward(*[t.data for t in ins])
    return _result(np.asarray(data, dtype=ins[0].data.dtype), ins,
                   lambda g: fn_backward(ctx, g), op, fwd_fn=fn_forward,
                   bwd_fn=fn_backward, **attrs)


PRIMITIVES: Dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul, "transpose": transpose,
    "tanh": tanh, "relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log,
    "sum": sum, "mean": mean, "softmax": softmax,
}


# ----------------------------------------------------------------------
# static graph capture
# ----------------------------------------------------------------------

class Graph:
    """A captured computation: nodes in topological order plus named inputs/outputs.

    Build one by running eager ops on named leaf tensors and passing the
    results to :meth:`Graph.capture`.  Leaves without a name are constants.
    """

    def __init__(self, nodes: List[Tensor], outputs: Dict[str, Tensor]):
        self.nodes = nodes
        self.index = {id(n): i for i, n in enumerate(nodes)}
        self.outputs = {k: self.index[id(v)] for k, v in outputs.items()}
        self.inputs = {n.name: i for i, n in enumerate(nodes) if n.op is None and n.name}

    @classmethod
    def capture(cls, outputs: Dict[str, Tensor]) -> "Graph":
        return cls(_topo_order(list(outputs.values())), outputs)

    def __len__(self) -> int:
        return len(self.nodes)


def _replay(node: Tensor, args: List[Tensor], idx: int) -> Tensor:
    op, attrs = node.op, node.attrs
    try:
        if op in PRIMITIVES:
            return PRIMITIVES[op](*args)
        if op == "scale":
            return scale(args[0], attrs["factor"])
        if op == "reshape":
            return reshape(args[0], attrs["shape"])
        if op == "concat":
            return concat(args, axis=attrs["axis"])
        if op == "gather":
            return gather(args[0], attrs["index"])
        if op == "cross_entropy":
            return cross_entropy(args[0], attrs["targets"])
        if op == "layer_norm":
            return layer_norm(*args, eps=attrs["eps"])
        if op == "scale_rows":
            return scale_rows(*args)
        if "fwd_fn" in attrs:
            extra = {k: v for k, v in attrs.items() if k not in ("fwd_fn", "bwd_fn")}
            return custom(attrs["fwd_fn"], attrs["bwd_fn"], args, op, **extra)
    except ShapeError as exc:
        raise ShapeError(f"node {idx} ({op}): {exc}") from None
    raise ValueError(f"node {idx}: unknown primitive {op!r}")


def evaluate(graph: Graph, inputs: Dict[str, np.ndarray], requires_grad=()) -> Dict[str, Tensor]:
    """Replay ``graph`` with new values bound to its named inputs.

    Unbound named inputs keep their captured values.  Names listed in
    ``requires_grad`` are marked for differentiation.
    """
    unknown = set(inputs) - set(graph.inputs)
    if unknown:
        raise KeyError(f"unknown graph inputs: {sorted(unknown)}")
    values: List[Tensor] = []
    for i, node in enumerate(graph.nodes):
        if node.op is None:
            if node.name in inputs:
                arr = np.asarray(inputs[node.name])
                if arr.shape != node.shape:
                    raise ShapeError(f"node {i} (input {node.name!r}): expected {node.shape}, got {arr.shape}")
                t = Tensor(arr.astype(node.data.dtype), name=node.name)
            else:
                t = Tensor(node.data, name=node.name)
            t.requires_grad = node.name in requires_grad if node.name else False
            values.append(t)
        else:
            values.append(_replay(node, [values[graph.index[id(p)]] for p in node.parents], i))
    return {name: values[i] for name, i in graph.outputs.items()}


def gradients(graph: Graph, loss: str, inputs: Dict[str, np.ndarray],
              wrt: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
    """Gradient of the scalar output ``loss`` w.r.t. named graph inputs.

    ``wrt`` defaults to every named input.  Inputs the loss does not depend on
    get a zero gradient.
    """
    wrt = list(graph.inputs) if wrt is None else list(wrt)
    if graph.nodes[graph.outputs[loss]].data.size != 1:
        raise ValueError(f"gradients: output {loss!r} is not scalar")
    # rebuild leaves so we can read their grads back
    leaves: Dict[str, Tensor] = {}
    values: List[Tensor] = []
    for i, node in enumerate(graph.nodes):
        if node.op is None:
            arr = inputs.get(node.name, node.data) if node.name else node.data
            t = Tensor(np.asarray(arr, dtype=node.data.dtype), name=node.name,
                       requires_grad=node.name in wrt)
            if node.name:
                leaves[node.name] = t
            values.append(t)
        else:
            values.append(_replay(node, [values[graph.index[id(p)]] for p in node.parents], i))
    out = values[graph.outputs[loss]]
    out.backward()
    result = {}
    for name in wrt:
        t = leaves[name]
        result[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return result


# ----------------------------------------------------------------------
# optimiser
# ----------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay.

    Each step: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``.
    """

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-4, weight_decay: float = 1e-6,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** t
        c2 = 1 - b2 ** t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ShapeError(f"AdamW: grad for {k!r} has shape {g.shape}, param {p.shape}")
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "lr": self.lr, "weight_decay": self.weight_decay,
                "betas": (self.beta1, self.beta2), "eps": self.eps}
