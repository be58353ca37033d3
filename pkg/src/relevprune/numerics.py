"""Small reverse-mode autodiff engine on top of numpy.

Every primitive produces a new :class:`Tensor`. While a :class:`Graph` is
recording (``with Graph() as g:``) each primitive appends a node holding its
vector-Jacobian product, so :func:`backward` can return gradients for *every*
tensor the graph touched -- parameters, inputs and intermediates such as
post-softmax attention maps.

Broadcasting is deliberately not supported, except where a primitive names
it (``add_bias`` broadcasts a vector over the last axis, ``matmul`` accepts a
2-D right operand against a batched left operand).
"""

from __future__ import annotations

import io
import itertools
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np

DTYPE = np.float32

_ids = itertools.count()
_active: list["Graph"] = []


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    """Immutable float32 array with a graph identity."""

    __slots__ = ("data", "id")

    def __init__(self, data, dtype=DTYPE):
        arr = np.array(data, dtype=dtype)
        arr.setflags(write=False)
        self.data = arr
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # takes ownership of a freshly computed array, no copy
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return index(self, key)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Tape of recorded primitives, in execution (hence topological) order."""

    nodes: list[Node] = field(default_factory=list)
    shapes: dict[int, tuple[int, ...]] = field(default_factory=dict)
    consumed: bool = False

    def __enter__(self) -> "Graph":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def _record(self, op, inputs, out, vjp) -> None:
        for t in inputs:
            self.shapes.setdefault(t.id, t.shape)
        self.shapes[out.id] = out.shape
        self.nodes.append(Node(op, tuple(t.id for t in inputs), out.id, vjp))


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite output")
    out = Tensor._wrap(data)
    if _active:
        _active[-1]._record(op, inputs, out, vjp)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def backward(graph: Graph, output) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``output`` for every tensor recorded in ``graph``.

    Tensors the output does not depend on get zero gradients. A graph can be
    consumed once; record a fresh one for another backward pass.
    """
    out_id = output.id if isinstance(output, Tensor) else int(output)
    if graph.consumed:
        raise GraphError("graph already consumed by a backward pass")
    if out_id not in graph.shapes:
        raise GraphError(f"tensor {out_id} was not recorded on this graph")
    if math.prod(graph.shapes[out_id]) != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {graph.shapes[out_id]}")
    graph.consumed = True

    grads: dict[int, np.ndarray] = {out_id: np.ones(graph.shapes[out_id], dtype=DTYPE)}
    for node in reversed(graph.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    for tid, shape in graph.shapes.items():
        if tid not in grads:
            grads[tid] = np.zeros(shape, dtype=DTYPE)
    return grads


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    x, y = a.data, b.data
    return _emit("mul", x * y, (a, b), lambda g: (g * y, g * x))


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def mask(a: Tensor, keep: np.ndarray) -> Tensor:
    """Multiply by a constant 0/1 mask of the same shape; no flow through zeros."""
    keep = np.asarray(keep, dtype=a.data.dtype)
    if keep.shape != a.shape:
        raise ShapeError(f"mask: shape {keep.shape} vs {a.shape}")
    return _emit("mask", a.data * keep, (a,), lambda g: (g * keep,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} vs input {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _emit("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _emit("relu", np.where(on, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * on,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation."""
    v = x.data
    u = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(u)
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * (v * v))
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return _emit("gelu", out.astype(v.dtype), (x,), vjp)


# -- shape ops -----------------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {src} -> {shape}") from e
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def index(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing."""
    src = x.shape

    def vjp(g):
        full = np.zeros(src, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _emit("index", np.ascontiguousarray(x.data[key]), (x,), vjp)


def total(x: Tensor) -> Tensor:
    src = x.shape
    return _emit("sum", np.array([x.data.sum()], dtype=x.data.dtype), (x,),
                 lambda g: (np.full(src, g[0], dtype=g.dtype),))


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / x.data.size)


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for (..., m, k) x (k, n) or matching batch dims (..., k, n)."""
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: {x.shape} @ {y.shape}")
    if y.ndim > 2 and x.shape[:-2] != y.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {x.shape[:-2]} vs {y.shape[:-2]}")

    def vjp(g):
        ga = g @ np.swapaxes(y, -1, -2)
        if y.ndim == 2:
            gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(x, -1, -2) @ g
        return ga, gb

    return _emit("matmul", x @ y, (a, b), vjp)


# -- normalisation / probability -----------------------------------------------

def softmax(x: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``allowed`` (bool, broadcastable) masks entries to exactly 0."""
    v = x.data
    if v.shape[-1] < 1:
        raise ShapeError("softmax: empty row")
    if allowed is not None:
        v = np.where(allowed, v, -np.inf)
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = (e / e.sum(axis=-1, keepdims=True)).astype(x.data.dtype)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    v = x.data
    z = v - v.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = (z - lse).astype(v.dtype)
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    v = x.data
    d = v.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: params {gamma.shape}/{beta.shape} for width {d}")
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    axes = tuple(range(v.ndim - 1))

    def vjp(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _emit("layer_norm", out.astype(v.dtype), (x, gamma, beta), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"embedding: id out of range [0, {n})")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit("embedding", table.data[ids], (table,), vjp)


# -- 1D convolutions (channels-first: batch, channels, length) -----------------

def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel conv with an odd kernel and same-length zero padding."""
    v = x.data
    if v.ndim != 3:
        raise ShapeError(f"depthwise_conv1d: expected (B, C, N), got {v.shape}")
    _, c, n = v.shape
    k = w.shape[1]
    if w.shape[0] != c or b.shape != (c,) or k % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: kernel {w.shape}, bias {b.shape}, channels {c}")
    if n < k:
        raise ShapeError(f"depthwise_conv1d: length {n} shorter than kernel {k}")
    pad = k // 2
    xp = np.pad(v, ((0, 0), (0, 0), (pad, pad)))
    out = np.zeros(v.shape, np.result_type(v, w.data))
    for j in range(k):
        out += w.data[None, :, j, None] * xp[:, :, j:j + n]
    out += b.data[None, :, None]

    def vjp(g):
        gxp = np.zeros(xp.shape, g.dtype)
        gw = np.empty_like(w.data)
        for j in range(k):
            gxp[:, :, j:j + n] += w.data[None, :, j, None] * g
            gw[:, j] = (g * xp[:, :, j:j + n]).sum(axis=(0, 2))
        return gxp[:, :, pad:pad + n], gw, g.sum(axis=(0, 2))

    return _emit("depthwise_conv1d", out, (x, w, b), vjp)


def pointwise_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 conv: ``w`` is (C_in, C_out)."""
    v = x.data
    if v.ndim != 3 or w.shape[0] != v.shape[1] or b.shape != (w.shape[1],):
        raise ShapeError(f"pointwise_conv1d: input {v.shape}, kernel {w.shape}, bias {b.shape}")
    wt = w.data.T
    out = np.matmul(wt, v) + b.data[None, :, None]

    def vjp(g):
        gx = np.matmul(w.data, g)
        gw = np.einsum("bcn,bon->co", v, g, optimize=True)
        return gx, gw, g.sum(axis=(0, 2))

    return _emit("pointwise_conv1d", out, (x, w, b), vjp)


# -- losses ----------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under (B, V) logits."""
    v = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if v.ndim != 2 or targets.shape != (v.shape[0],):
        raise ShapeError(f"cross_entropy: logits {v.shape}, targets {targets.shape}")
    z = v - v.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(v.shape[0])
    loss = -logp[rows, targets].mean()

    def vjp(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g[0] / v.shape[0]),)

    return _emit("cross_entropy", np.array([loss], dtype=v.dtype), (logits,), vjp)


def _xlogx_ratio(p: np.ndarray, logq: np.ndarray) -> np.ndarray:
    pos = p > 0
    safe = np.where(pos, p, 1.0)
    return np.where(pos, p * (np.log(safe) - logq), 0.0)


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """Batch-mean KL(p || q) over the last axis, with 0 log 0 = 0."""
    _same_shape("kl_div", p, q)
    pv, qv = p.data, q.data
    rows = pv.size // pv.shape[-1]
    with np.errstate(divide="ignore"):
        logq = np.log(qv)
    val = _xlogx_ratio(pv, logq).sum() / rows

    def vjp(g):
        pos = pv > 0
        gp = np.where(pos, np.log(np.where(pos, pv, 1.0)) - logq + 1.0, 0.0)
        gq = -pv / qv
        s = g[0] / rows
        return (gp * s).astype(pv.dtype), (gq * s).astype(qv.dtype)

    return _emit("kl_div", np.array([val], dtype=pv.dtype), (p, q), vjp)


def kl_div_log(p: np.ndarray, logq: Tensor) -> Tensor:
    """Batch-mean KL(p || q) from log-probabilities; ``p`` is a constant target."""
    pv = np.asarray(p, dtype=logq.data.dtype)
    if pv.shape != logq.shape:
        raise ShapeError(f"kl_div_log: {pv.shape} vs {logq.shape}")
    rows = pv.size // pv.shape[-1]
    val = _xlogx_ratio(pv, logq.data).sum() / rows
    return _emit("kl_div_log", np.array([val], dtype=pv.dtype), (logq,),
                 lambda g: (-pv * (g[0] / rows),))


# -- optimisation ----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new parameter arrays; ``state`` advances in place."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ShapeError("adam_step: parameter, gradient and state keys differ")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"adam_step: shape mismatch for {k!r}")
        state.m[k] = beta1 * state.m[k] + (1 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1 - beta2) * (g * g)
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        new[k] = (p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return new, state


# -- serialisation ---------------------------------------------------------------

TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<II", TENSOR_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = math.prod(shape)
    buf = fh.read(4 * count)
    if len(buf) != 4 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(DTYPE)


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()
