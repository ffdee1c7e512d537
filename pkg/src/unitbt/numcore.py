"""Dense float64 tensors with a small reverse-mode tape, Adam, and checkpoint I/O.

Only the handful of layer operations used by the models are supported. Every op
returns a new :class:`Tensor`; when gradient recording is enabled the output
keeps references to its inputs and a closure that pushes the upstream gradient
back to them.
"""

from __future__ import annotations

import contextlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DataError, DimensionError, NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used for decoding)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accum(x, g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)

    def backward(g):
        _accum(x, g * scale)

    return _result(x.data * scale, (x,), backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)

    def backward(g):
        _accum(x, g * y)

    return _result(y, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")

    def backward(g):
        _accum(x, g / x.data)

    return _result(np.log(x.data), (x,), backward)


def log1p(x: Tensor) -> Tensor:
    if np.any(x.data <= -1):
        raise NumericError("log1p argument must exceed -1")

    def backward(g):
        _accum(x, g / (1.0 + x.data))

    return _result(np.log1p(x.data), (x,), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        _accum(x, 2.0 * g * x.data)

    return _result(x.data * x.data, (x,), backward)


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def backward(g):
        _accum(x, g * sign)

    return _result(np.abs(x.data), (x,), backward)


# ---------------------------------------------------------------- reductions / shape


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        _accum(x, g.transpose(inv))

    return _result(x.data.transpose(axes), (x,), backward)


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accum(x, full)

    return _result(x.data[idx], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(xs, np.split(g, splits, axis=axis)):
            _accum(t, part)

    try:
        data = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _result(data, xs, backward)


# ---------------------------------------------------------------- layers


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = log_softmax_np(x.data, axis)
    p = np.exp(y)

    def backward(g):
        _accum(x, g - p * g.sum(axis=axis, keepdims=True))

    return _result(y, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layernorm: feature dim {x.shape[-1]} vs gamma {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc / sigma
    axes = tuple(range(x.ndim - 1))

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (gh - m1 - xhat * m2) / sigma)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding id out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _result(table.data[ids], (table,), backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last 1-D convolution.

    x: (B, T, Cin), w: (K, Cin, Cout), b: (Cout,) -> (B, Tout, Cout) with
    Tout = (T + 2*padding - K) // stride + 1.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} vs kernel {w.shape}")
    k = w.shape[0]
    B, T, cin = x.shape
    if T + 2 * padding < k:
        raise DimensionError(f"conv1d: length {T} too short for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    # (B, Tout, Cin, K)
    cols = sliding_window_view(xp, k, axis=1)[:, ::stride]
    tout = cols.shape[1]
    out = np.einsum("btck,kco->bto", cols, w.data, optimize=True)
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        out = out + b.data

    def backward(g):
        if w.requires_grad:
            _accum(w, np.einsum("bto,btck->kco", g, cols, optimize=True))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 1)))
        if x.requires_grad:
            gcols = np.einsum("bto,kco->btck", g, w.data, optimize=True)
            gxp = np.zeros_like(xp)
            span = stride * (tout - 1) + 1
            for j in range(k):
                gxp[:, j : j + span : stride] += gcols[..., j]
            _accum(x, gxp[:, padding : padding + T])

    return _result(out, parents, backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or rate is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def smoothed_nll(logits: Tensor, targets, mask, smoothing: float = 0.0) -> Tensor:
    """Mean per-token label-smoothed NLL.

    The gold token receives 1 - smoothing, the other V - 1 tokens share
    ``smoothing`` equally. ``mask`` selects the positions that count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ContractError(f"target id out of range [0, {V})")
    n = mask.sum()
    if n <= 0:
        raise ContractError("smoothed_nll needs at least one unmasked position")
    lp = log_softmax_np(logits.data)
    q = np.full(lp.shape, smoothing / (V - 1) if V > 1 else 0.0)
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing, axis=-1)
    tok = -(q * lp).sum(axis=-1)
    loss = float((tok * mask).sum() / n)

    def backward(g):
        p = np.exp(lp)
        _accum(logits, g * (p - q) * (mask / n)[..., None])

    return _result(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Fill ``.grad`` of every tensor reachable from ``loss``.

    Returns a map from each leaf tensor that requires grad to its gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        if node._backward is not None:
            if node.grad is not None:
                node._backward(node.grad)
            # free graph memory as we go
            node._backward = None
            node._parents = ()
        elif node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            leaves[node] = node.grad
    return leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    peak_lr: float = 5e-4
    warmup_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    schedule: str = "inverse_sqrt"  # or "constant"
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, step: int | None = None) -> float:
        """Linear warm-up to ``peak_lr``, then inverse-square-root decay."""
        s = self.step if step is None else step
        if self.schedule == "constant":
            return self.peak_lr
        if s <= 0:
            return 0.0
        w = max(self.warmup_steps, 1)
        if s <= w:
            return self.peak_lr * s / w
        return self.peak_lr * math.sqrt(w / s)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """In-place Adam update of ``params`` using ``grads`` (missing grads count as zero)."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    lr = state.lr()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"UBTC"
VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays in the little-endian UBTC container."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a UBTC checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims)
            off += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated checkpoint") from exc
    if off != len(buf):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return out
