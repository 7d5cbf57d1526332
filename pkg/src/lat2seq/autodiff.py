"""Reverse-mode automatic differentiation over per-example dynamic graphs.

A :class:`Graph` is an append-only list of :class:`Tensor` nodes.  Every
operation computes its value eagerly and registers a closure mapping the
output gradient to input gradients; :meth:`Graph.backward` walks the list in
descending index order, so a node's gradient is complete before it is read.

Parameters live in a :class:`ParamStore`.  ``graph.param(store, name)`` binds
a leaf to a stored array; after ``backward`` the leaf gradients are *added*
to the store's gradient buffers, which are only cleared by ``zero_grad``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

DEBUG = bool(os.environ.get("LAT2SEQ_DEBUG"))


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("graph", "index", "value", "grad", "inputs", "backward_fn", "tag",
                 "requires_grad", "param_name")

    def __init__(self, graph, value, inputs=(), backward_fn=None, tag="const",
                 requires_grad=False, param_name=None):
        self.graph = graph
        self.value = value
        self.grad = None
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.tag = tag
        self.requires_grad = requires_grad
        self.param_name = param_name
        self.index = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor({self.tag}#{self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(self.graph, other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


class Graph:
    """One computation graph; build, backprop once, discard."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._params: dict[tuple[int, str], Tensor] = {}

    def constant(self, value) -> Tensor:
        return Tensor(self, np.asarray(value, dtype=np.float64))

    def param(self, store: "ParamStore", name: str) -> Tensor:
        key = (id(store), name)
        t = self._params.get(key)
        if t is None:
            t = Tensor(self, store.values[name], tag="param", requires_grad=True, param_name=name)
            t.inputs = (store,)
            self._params[key] = t
        return t

    def op(self, tag, value, inputs, backward_fn) -> Tensor:
        """Register an operation.  ``backward_fn(g)`` returns one gradient (or
        None) per input; it is only called if some input needs a gradient."""
        if DEBUG and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by {tag}")
        needs = any(x.requires_grad for x in inputs)
        return Tensor(self, value, tuple(inputs), backward_fn if needs else None, tag, needs)

    def backward(self, loss: Tensor) -> set[str]:
        """Accumulate d(loss)/d(param) into the stores; returns touched names."""
        if loss.graph is not self:
            raise ValueError("loss belongs to another graph")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        touched = set()
        for node in reversed(self.nodes[: loss.index + 1]):
            g = node.grad
            if g is None:
                continue
            if node.param_name is not None:
                store = node.inputs[0]
                buf = store.grads[node.param_name]
                buf += g
                touched.add(node.param_name)
                continue
            if node.backward_fn is None:
                continue
            grads = node.backward_fn(g)
            for x, gx in zip(node.inputs, grads):
                if gx is None or not x.requires_grad:
                    continue
                if x.grad is None:
                    x.grad = gx
                else:
                    x.grad = x.grad + gx
            node.grad = None  # gradients of intermediate nodes are not kept
        return touched


def _wrap(graph, x) -> Tensor:
    return x if isinstance(x, Tensor) else graph.constant(x)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    raise TypeError("at least one operand must be a Tensor")


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(tag, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{tag}: incompatible shapes {shapes}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _wrap(g, a), _wrap(g, b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return g.op("add", a.value + b.value, (a, b),
                lambda gy: (unbroadcast(gy, sa), unbroadcast(gy, sb)))


def sub(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _wrap(g, a), _wrap(g, b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return g.op("sub", a.value - b.value, (a, b),
                lambda gy: (unbroadcast(gy, sa), unbroadcast(-gy, sb)))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    g = _graph_of(a, b)
    a, b = _wrap(g, a), _wrap(g, b)
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return g.op("mul", av * bv, (a, b),
                lambda gy: (unbroadcast(gy * bv, av.shape), unbroadcast(gy * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return a.graph.op("scale", a.value * c, (a,), lambda gy: (gy * c,))


def sum_nodes(xs: Sequence[Tensor]) -> Tensor:
    """Sum of several same-shaped tensors."""
    xs = list(xs)
    if not xs:
        raise ShapeError("sum_nodes: empty input")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"sum_nodes: shape {x.shape} != {shape}")
    value = xs[0].value.copy()
    for x in xs[1:]:
        value += x.value
    return xs[0].graph.op("sum_nodes", value, xs, lambda gy: (gy,) * len(xs))


def sigmoid_value(x):
    return 0.5 * np.tanh(0.5 * x) + 0.5


def sigmoid(a: Tensor) -> Tensor:
    y = sigmoid_value(a.value)
    return a.graph.op("sigmoid", y, (a,), lambda gy: (gy * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return a.graph.op("tanh", y, (a,), lambda gy: (gy * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    return a.graph.op("exp", y, (a,), lambda gy: (gy * y,))


def log(a: Tensor) -> Tensor:
    x = a.value
    if np.any(x <= 0):
        raise FloatingPointError("log of non-positive input (floor scores before taking logs)")
    return a.graph.op("log", np.log(x), (a,), lambda gy: (gy / x,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` for a of shape (..., K) and b of shape (K, M) or (K,)."""
    g = _graph_of(a, b)
    a, b = _wrap(g, a), _wrap(g, b)
    av, bv = a.value, b.value
    if bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")

    def backward(gy):
        if bv.ndim == 1:
            ga = gy[..., None] * bv
            gb = np.tensordot(gy, av, axes=gy.ndim) if b.requires_grad else None
        else:
            ga = gy @ bv.T
            gb = (av.reshape(-1, av.shape[-1]).T @ gy.reshape(-1, bv.shape[1])
                  if b.requires_grad else None)
        return ga, gb

    return g.op("matmul", av @ bv, (a, b), backward)


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` with W of shape (out, in); x may carry leading axes."""
    xv, Wv = x.value, W.value
    if xv.shape[-1] != Wv.shape[1]:
        raise ShapeError(f"affine: input {xv.shape} does not match weight {Wv.shape}")
    y = xv @ Wv.T
    if b is not None:
        if b.shape != (Wv.shape[0],):
            raise ShapeError(f"affine: bias {b.shape} does not match weight {Wv.shape}")
        y = y + b.value
    inputs = (x, W) if b is None else (x, W, b)

    def backward(gy):
        gx = gy @ Wv if x.requires_grad else None
        g2 = gy.reshape(-1, Wv.shape[0])
        gW = g2.T @ xv.reshape(-1, Wv.shape[1]) if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return x.graph.op("affine", y, inputs, backward)


# ---------------------------------------------------------------------------
# shape manipulation


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    try:
        value = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    ax = axis % value.ndim
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return xs[0].graph.op("concat", value, xs, lambda gy: tuple(np.split(gy, bounds, axis=ax)))


def stack(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    value = np.stack([x.value for x in xs])
    return xs[0].graph.op("stack", value, xs, lambda gy: tuple(gy))


def index(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing (``a[idx]``)."""
    x = a.value
    y = x[idx]

    def backward(gy):
        gx = np.zeros_like(x)
        np.add.at(gx, idx, gy)
        return (gx,)

    return a.graph.op("index", np.array(y, copy=True), (a,), backward)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    x = a.value
    y = x[..., start:stop]

    def backward(gy):
        gx = np.zeros_like(x)
        gx[..., start:stop] = gy
        return (gx,)

    return a.graph.op("slice", y, (a,), backward)


def split_last(a: Tensor, n: int) -> list[Tensor]:
    size = a.shape[-1] // n
    if size * n != a.shape[-1]:
        raise ShapeError(f"split_last: {a.shape[-1]} not divisible by {n}")
    return [slice_last(a, j * size, (j + 1) * size) for j in range(n)]


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return a.graph.op("reshape", a.value.reshape(shape), (a,), lambda gy: (gy.reshape(old),))


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    x = a.value
    y = np.asarray(x.sum(axis=axis))

    def backward(gy):
        if axis is None:
            return (np.broadcast_to(gy, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(gy, axis), x.shape).copy(),)

    return a.graph.op("sum", y, (a,), backward)


def lookup(table: Tensor, ids) -> Tensor:
    """Embedding lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    E = table.value

    def backward(gy):
        gt = np.zeros_like(E)
        np.add.at(gt, ids.reshape(-1), gy.reshape(-1, E.shape[1]))
        return (gt,)

    return table.graph.op("lookup", E[ids], (table,), backward)


# ---------------------------------------------------------------------------
# normalizers and losses


def softmax_value(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = softmax_value(a.value, axis)

    def backward(gy):
        return (y * (gy - (gy * y).sum(axis=axis, keepdims=True)),)

    return a.graph.op("softmax", y, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    y = x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))

    def backward(gy):
        return (gy - np.exp(y) * gy.sum(axis=axis, keepdims=True),)

    return a.graph.op("log_softmax", y, (a,), backward)


def pick_neg_log_softmax(logits: Tensor, targets) -> Tensor:
    """Sum over rows of ``-log softmax(logits[b])[targets[b]]``.

    ``logits`` is (V,) or (B, V); ``targets`` an int or (B,) ints.
    """
    x = logits.value
    x2 = x.reshape(-1, x.shape[-1])
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if len(t) != x2.shape[0]:
        raise ShapeError(f"pick_neg_log_softmax: {len(t)} targets for logits {x.shape}")
    m = x2.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x2 - m).sum(axis=1))
    rows = np.arange(len(t))
    y = np.asarray((lse - x2[rows, t]).sum())

    def backward(gy):
        p = np.exp(x2 - lse[:, None])
        p[rows, t] -= 1.0
        return ((gy * p).reshape(x.shape),)

    return logits.graph.op("pick_nls", y, (logits,), backward)


def segment_log_softmax(a: Tensor, starts: np.ndarray) -> Tensor:
    """Log-softmax over contiguous row groups beginning at ``starts``.

    Rows of ``a`` are partitioned as ``a[starts[j]:starts[j+1]]`` (the last
    group runs to the end); columns are normalized independently.
    """
    from .scores import segment_logsumexp

    x = a.value
    starts = np.asarray(starts, dtype=np.int64)
    counts = np.diff(np.append(starts, len(x)))
    z = np.repeat(segment_logsumexp(x, starts), counts, axis=0)
    y = x - z

    def backward(gy):
        p = np.exp(y)
        tot = np.repeat(np.add.reduceat(gy, starts, axis=0), counts, axis=0)
        return (gy - p * tot,)

    return a.graph.op("seg_log_softmax", y, (a,), backward)


# ---------------------------------------------------------------------------
# parameters and checkpoints


def glorot(rng: np.random.Generator, shape) -> np.ndarray:
    fan_out, fan_in = shape[0], shape[1] if len(shape) > 1 else 1
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    """Named parameters with persistent gradient buffers."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.vdot(g, g)) for g in self.grads.values())))

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, v in self.values.items():
            other.add(name, v)
        return other

    def num_parameters(self) -> int:
        return sum(v.size for v in self.values.values())


MAGIC = b"L2SCKPT\x00"
FORMAT_VERSION = 1


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, store: ParamStore, config: dict,
                    optimizer_state: dict[str, np.ndarray] | None = None,
                    extra: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, raw little-endian f8 data."""
    names = list(store.values)
    opt = optimizer_state or {}
    header = {
        "config": config,
        "digest": config_digest(config),
        "params": [[n, list(store.values[n].shape)] for n in names],
        "optimizer": [[n, list(np.shape(v))] for n, v in opt.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(store.values[n], dtype="<f8").tobytes())
        for v in opt.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ParamStore, dict, dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a lat2seq checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    if header["digest"] != config_digest(header["config"]):
        raise ValueError(f"{path}: config digest mismatch")
    offset = 16 + hlen
    store = ParamStore()

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        return arr.astype(np.float64)

    for name, shape in header["params"]:
        store.add(name, take(shape))
    opt = {name: take(shape) for name, shape in header["optimizer"]}
    return store, header["config"], opt, header["extra"]


# ---------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor absorbs round-off on
    near-zero gradients."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradient_check(build_loss: Callable[[Graph], Tensor], store: ParamStore,
                   names: Iterable[str] | None = None, h: float = 1e-5,
                   tolerance: float = 1e-4, max_entries: int | None = 20,
                   rng: np.random.Generator | None = None) -> dict:
    """Compare backprop gradients with central differences.

    ``build_loss`` must be deterministic.  Up to ``max_entries`` coordinates
    are sampled per parameter (all when None).  Returns ``{"errors": {name:
    max_rel_err}, "touched": names with gradients, "passed": bool}``.
    """
    rng = rng or np.random.default_rng(0)
    saved = {n: g.copy() for n, g in store.grads.items()}
    store.zero_grad()
    graph = Graph()
    loss = build_loss(graph)
    touched = graph.backward(loss)
    analytic = {n: store.grads[n].copy() for n in touched}
    for n, g in saved.items():
        store.grads[n][...] = g

    def f() -> float:
        return float(build_loss(Graph()).value)

    errors = {}
    for name in (names if names is not None else sorted(touched)):
        value = store.values[name]
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a = analytic[name].reshape(-1)[idx] if name in analytic else np.zeros(len(idx))
        num = np.empty(len(idx))
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            fp = f()
            flat[k] = orig - h
            fm = f()
            flat[k] = orig
            num[j] = (fp - fm) / (2 * h)
        errors[name] = float(relative_error(a, num).max()) if len(idx) else 0.0
    worst = max(errors.values(), default=0.0)
    return {"errors": errors, "touched": touched, "max_error": worst, "passed": worst < tolerance}
