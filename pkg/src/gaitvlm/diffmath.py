"""Small reverse-mode autodiff over float64 numpy arrays.

Graphs are built eagerly: calling an op on :class:`Tensor` inputs computes the
forward value immediately and records how to push gradients back. A
:class:`Graph` wraps a function of named leaf tensors so the same computation
can be evaluated, differentiated and finite-difference checked by name.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible shapes."""

    def __init__(self, op: str, node: str | None, shapes: Iterable[tuple]):
        self.op = op
        self.node = node
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{op} at node {node!r}: incompatible shapes {self.shapes}")


class GradCheckError(ValueError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "op", "inputs", "_backward", "name", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 op: str = "leaf", inputs: tuple = (), backward_fn=None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.op = op
        self.inputs = inputs
        self._backward = backward_fn
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor<{self.op}{label} shape={self.shape}>"

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op, inputs, backward_fn) -> Tensor:
    for t in inputs:
        if t.requires_grad:
            return Tensor(data, requires_grad=True, op=op, inputs=inputs, backward_fn=backward_fn)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a: Tensor, b: Tensor):
    if a.data.shape == b.data.shape:
        return a.data.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.name or b.name, [a.shape, b.shape]) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _node(a.data / b.data, "div", (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, "gelu", (a,), bw)


NONLINEARITIES = {"relu": relu, "tanh": tanh, "gelu": gelu, "exp": exp}


def pointwise(a, kind: str) -> Tensor:
    try:
        fn = NONLINEARITIES[kind]
    except KeyError:
        raise ValueError(f"unknown nonlinearity {kind!r}") from None
    return fn(a)


def power_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    if p == 2:
        return square(a)
    out = a.data ** p
    return _node(out, "pow", (a,), lambda g: (g * p * a.data ** (p - 1),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError("matmul", a.name or b.name, [a.shape, b.shape])
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.name or b.name, [a.shape, b.shape]) from None

    def bw(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(list(range(ad.ndim - 1)), list(range(g.ndim))))
            return _unbroadcast(ga, a.shape), gb
        if ad.ndim == 1:
            ga = np.matmul(g[..., None, :], np.swapaxes(bd, -1, -2))[..., 0, :]
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _node(out, "matmul", (a, b), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.name, [a.shape, tuple(shape)]) from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _node(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _node(out, "getitem", (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", next((t.name for t in ts if t.name), None),
                         [t.shape for t in ts]) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, "concat", tuple(ts), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len({t.shape for t in ts}) > 1:
        raise ShapeError("stack", None, [t.shape for t in ts])
    out = np.stack([t.data for t in ts], axis=axis)
    return _node(out, "stack", tuple(ts),
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)
    return _node(np.array(out), "broadcast", (a,), lambda g: (_unbroadcast(g, a.shape),))


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.name, [table.shape])
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _node(table.data[ids], "embedding", (table,), bw)


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- fused ops

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, "softmax", (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(out, "log_softmax", (a,), bw)


def layer_norm(x, gain=None, bias=None, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis; constant rows map to zeros."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    out = _node(xhat, "layer_norm", (x,), bw)
    if gain is not None:
        gain = as_tensor(gain)
        if gain.shape != (n,):
            raise ShapeError("layer_norm", gain.name, [x.shape, gain.shape])
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = a.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _node(out, "l2_normalize", (a,), bw)


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise ShapeError("cosine_similarity", a.name or b.name, [a.shape, b.shape])
    return sum_(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


def attention(q, k, v, n_heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``(..., T, d)`` inputs split into heads.

    ``mask`` is additive and broadcast against ``(..., heads, Tq, Tk)``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if d % n_heads or k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", q.name, [q.shape, k.shape, v.shape])
    hd = d // n_heads

    def split(t):
        lead = t.shape[:-2]
        t = reshape(t, lead + (t.shape[-2], n_heads, hd))
        nd = t.ndim
        return transpose(t, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

    qh, kh, vh = split(q), split(k), split(v)
    scores = scale(matmul(qh, transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2))),
                   1.0 / math.sqrt(hd))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    w = softmax(scores, axis=-1)
    o = matmul(w, vh)
    nd = o.ndim
    o = transpose(o, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return reshape(o, o.shape[:-2] + (d,))


def causal_mask(n: int, prefix: int = 0) -> np.ndarray:
    """Additive mask: position i sees j <= i; the first ``prefix`` positions see each other."""
    m = np.triu(np.full((n, n), -1e9), k=1)
    if prefix:
        m[:prefix, :prefix] = 0.0
    return m


def cross_entropy(logits, targets, axis: int = -1, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy with integer targets over the last axis."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits, axis=axis)
    flat = reshape(lp, (-1, logits.shape[-1]))
    picked = getitem(flat, (np.arange(flat.shape[0]), targets.reshape(-1)))
    nll = scale(picked, -1.0)
    if reduction == "none":
        return reshape(nll, targets.shape)
    if reduction == "sum":
        return sum_(nll)
    return mean(nll)


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------- graph driver

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backprop(root: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate ``.grad`` on every node upstream of ``root`` that requires it."""
    if seed is None:
        seed = np.ones_like(root.data)
    seed = np.asarray(seed, dtype=DTYPE)
    if seed.shape != root.shape:
        raise ShapeError("backward", root.name, [root.shape, seed.shape])
    if not root.requires_grad:
        return
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = seed.copy()
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node.inputs, grads):
            if not parent.requires_grad or g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


class Graph:
    """A function of named leaf tensors, evaluated eagerly per call.

    >>> g = Graph(lambda t: t["x"] * t["y"])
    >>> float(g.forward({"x": 2.0, "y": 3.0}).data)
    6.0
    >>> float(g.backward()["x"])
    3.0
    """

    def __init__(self, fn: Callable[[dict[str, Tensor]], Tensor], name: str | None = None):
        self.fn = fn
        self.name = name or getattr(fn, "__name__", "graph")
        self.output: Tensor | None = None
        self.leaves: dict[str, Tensor] = {}

    def forward(self, bindings: Mapping[str, np.ndarray], wrt: Iterable[str] | None = None) -> Tensor:
        wrt_set = set(bindings) if wrt is None else set(wrt)
        unknown = wrt_set - set(bindings)
        if unknown:
            raise KeyError(f"gradient requested for unbound names {sorted(unknown)}")
        self.leaves = {
            k: Tensor(np.asarray(v, dtype=DTYPE), requires_grad=k in wrt_set, name=k)
            for k, v in bindings.items()
        }
        out = self.fn(self.leaves)
        if not isinstance(out, Tensor):
            out = Tensor(out)
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError(f"non-finite forward value in graph {self.name!r}")
        self.output = out
        return out

    def backward(self, seed: np.ndarray | None = None) -> dict[str, np.ndarray]:
        if self.output is None:
            raise RuntimeError(f"backward called before forward on graph {self.name!r}")
        backprop(self.output, seed)
        grads = {}
        for k, leaf in self.leaves.items():
            if not leaf.requires_grad:
                continue
            grads[k] = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
        return grads


def forward(graph: Graph, bindings: Mapping[str, np.ndarray], wrt=None) -> Tensor:
    return graph.forward(bindings, wrt)


def backward(graph: Graph, seed: np.ndarray | None = None) -> dict[str, np.ndarray]:
    return graph.backward(seed)


def value_and_grad(fn, bindings, wrt=None) -> tuple[float, dict[str, np.ndarray]]:
    g = Graph(fn)
    out = g.forward(bindings, wrt)
    if out.data.size != 1:
        raise ShapeError("value_and_grad", g.name, [out.shape])
    return float(out.data.reshape(())), g.backward()


def grad_check(fn, bindings: Mapping[str, np.ndarray], h: float = 1e-5,
               wrt: Iterable[str] | None = None, seed_vec: np.ndarray | None = None) -> float:
    """Worst per-tensor relative error between analytic and central-difference gradients.

    For each checked tensor the error is ``|a - cd| / max(|a|, |cd|)`` in the
    Euclidean norm over its entries, so entries with near-zero gradient do not
    turn finite-difference roundoff into a large ratio. For non-scalar outputs
    the check is on ``<seed_vec, fn(x)>``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = {k: np.array(v, dtype=DTYPE) for k, v in bindings.items()}
    for k, v in point.items():
        if not np.all(np.isfinite(v)):
            raise GradCheckError(f"non-finite entries in binding {k!r}")
    names = list(point) if wrt is None else list(wrt)

    g = Graph(fn)
    out = g.forward(point, names)
    seed = np.ones_like(out.data) if seed_vec is None else np.asarray(seed_vec, dtype=DTYPE)
    analytic = g.backward(seed)

    def f_at(pt):
        val = Graph(fn).fn({k: Tensor(v) for k, v in pt.items()}).data
        s = float((val * seed).sum())
        if not math.isfinite(s):
            raise GradCheckError("non-finite forward value under perturbation")
        return s

    worst = 0.0
    for name in names:
        flat = point[name].reshape(-1)
        cd = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f_at(point)
            flat[i] = orig - h
            fm = f_at(point)
            flat[i] = orig
            cd[i] = (fp - fm) / (2 * h)
        an = analytic[name].reshape(-1)
        scale = max(np.linalg.norm(an), np.linalg.norm(cd))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(an - cd) / scale))
    return worst


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                   state: OptimizerState, trainable: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """One Adam update. Returns a new mapping; inputs are left untouched."""
    names = list(grads) if trainable is None else list(trainable)
    missing = [n for n in names if n not in grads]
    if missing:
        raise KeyError(f"missing gradient for trainable parameters {missing}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new = dict(params)
    for n in names:
        g = grads[n]
        p = params[n]
        if g.shape != p.shape:
            raise ShapeError("optimizer_step", n, [p.shape, g.shape])
        m = state.m.get(n)
        v = state.v.get(n)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[n], state.v[n] = m, v
        new[n] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"GVLMCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    """Write parameters in the little-endian layout described in the README."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype="<f8")
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + klen].decode("utf-8")
        off += klen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        out[name] = arr.astype(DTYPE)
    return out
