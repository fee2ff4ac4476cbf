"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything is stored as contiguous row-major numpy arrays in 64-bit floats;
the graph is rebuilt on every forward pass (dispatcher row dropout changes
the topology per step). Two module-level instruments support the benchmark
harness: ``MEMORY`` tracks the high-water mark of live tensor buffer bytes,
and ``MACS`` accumulates labelled multiply-accumulate counts.

Backward-pass memory discipline: each op records the arrays its gradient
rule needs in ``Node.saved``; while retiring a node, ``backward`` drops the
node's saved arrays and the non-leaf output gradient so the live set stays
close to one layer's frontier. ``backward`` may run once per graph - a
second call raises ContractError.
"""

from __future__ import annotations

import contextlib
import math
import weakref

import numpy as np

from .errors import ContractError, DataError, DimensionError


class AllocStats:
    """High-water-mark accounting of live tensor buffer bytes.

    Buffers are tracked per base allocation (views share their base's
    entry) and released by weakref finalizers, so with CPython refcounting
    the live count follows actual buffer lifetime.
    """

    def __init__(self):
        self.live_bytes = 0
        self.peak_bytes = 0
        self._tracked = set()

    def track(self, arr: np.ndarray) -> None:
        base = arr
        while base.base is not None:
            base = base.base
        key = id(base)
        if key in self._tracked:
            return
        self._tracked.add(key)
        nbytes = base.nbytes
        self.live_bytes += nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
        weakref.finalize(base, self._untrack, key, nbytes)

    def _untrack(self, key: int, nbytes: int) -> None:
        self._tracked.discard(key)
        self.live_bytes -= nbytes

    def reset_peak(self) -> None:
        self.peak_bytes = self.live_bytes


class MacCounter:
    """Labelled multiply-accumulate counters (forward-pass counts only)."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, label: str, n: int) -> None:
        self.counts[label] = self.counts.get(label, 0) + n

    def get(self, label: str) -> int:
        return self.counts.get(label, 0)

    def total(self) -> int:
        return sum(self.counts.values())

    def reset(self) -> None:
        self.counts.clear()


MEMORY = AllocStats()
MACS = MacCounter()

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the context (evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One backward record: parents, saved arrays, and a gradient rule.

    ``fn(saved, grad_out)`` returns one gradient array (or None) per parent.
    A rule may hand the incoming ``grad_out`` (or a view of it) to at most
    one parent; the backward driver copies on repeated ownership within a
    node, so returning the same array for two parents is also safe.
    """

    __slots__ = ("op", "parents", "saved", "fn")

    def __init__(self, op, parents, saved, fn):
        self.op = op
        self.parents = parents
        self.saved = saved
        self.fn = fn


class Tensor:
    """Contiguous float64 array plus optional gradient and graph record."""

    __slots__ = ("data", "grad", "node", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # 0-d arrays are always contiguous, so this never promotes rank
            arr = np.ascontiguousarray(arr)
        MEMORY.track(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small conveniences for model code; full op set lives at module level.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, other)

    def __rmul__(self, other):
        return mul_const(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, op, parents, saved, fn) -> Tensor:
    """Wrap an op result, attaching a graph node when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p.node is not None for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), saved, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def _bwd_add(saved, g):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _result(data, "add", (a, b), (a.shape, b.shape), _bwd_add)


def _bwd_mul(saved, g):
    ad, bd, sa, sb = saved
    return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _result(data, "mul", (a, b), (a.data, b.data, a.shape, b.shape), _bwd_mul)


def _bwd_mul_const(saved, g):
    (c, shape) = saved
    return (_unbroadcast(g * c, shape),)


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or ndarray (no gradient flows to it)."""
    data = a.data * c
    if data.shape != a.shape:
        raise DimensionError(f"mul_const: constant of shape {np.shape(c)} changes tensor shape {a.shape}")
    return _result(data, "mul_const", (a,), (c, a.shape), _bwd_mul_const)


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _bwd_matmul(saved, g):
    ad, bd = saved
    ga = _unbroadcast(g @ _swap_last(bd), ad.shape)
    gb = _unbroadcast(_swap_last(ad) @ g, bd.shape)
    return ga, gb


def matmul(a: Tensor, b: Tensor, mac_label: str = "matmul") -> Tensor:
    """Batched matrix product [..,m,k] @ [..,k,n]; counts forward MACs."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from exc
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(data.shape[:-2], dtype=np.int64)) if data.ndim > 2 else 1
    MACS.add(mac_label, batch * m * k * n)
    return _result(data, "matmul", (a, b), (a.data, b.data), _bwd_matmul)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def _bwd_sigmoid(saved, g):
    (y,) = saved
    return (g * y * (1.0 - y),)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # Two-sided form: never exponentiates a large positive argument.
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, "sigmoid", (x,), (out,), _bwd_sigmoid)


_GELU_C = math.sqrt(2.0 / math.pi)


def _bwd_gelu(saved, g):
    xd, t = saved
    du = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
    return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)


def gelu(x: Tensor) -> Tensor:
    """tanh-form GELU (the GPT-2 variant)."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd ** 3))
    return _result(0.5 * xd * (1.0 + t), "gelu", (x,), (xd, t), _bwd_gelu)


def _bwd_softmax(saved, g):
    (y,) = saved
    dot = np.sum(g * y, axis=-1, keepdims=True)
    return (y * (g - dot),)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return _result(z, "softmax", (x,), (z,), _bwd_softmax)


def _bwd_masked_softmax(saved, g):
    (y,) = saved
    dot = np.sum(g * y, axis=-1, keepdims=True)
    g -= dot
    g *= y
    return (g, None)


def masked_softmax(x: Tensor, mask: Tensor) -> Tensor:
    """softmax(x + mask) along the last axis, reusing x's buffer.

    ``mask`` is an additive constant (0 or -inf entries, no gradient) and
    must leave at least one finite entry per row. The input buffer is
    overwritten in place, so ``x`` must not be read again after this call;
    this keeps attention's N x N working set to a single buffer per layer.
    The backward rule likewise consumes the incoming gradient buffer.
    """
    buf = x.data
    try:
        buf += mask.data
    except ValueError as exc:
        raise DimensionError(f"masked_softmax: mask {mask.shape} does not broadcast onto {x.shape}") from exc
    buf -= buf.max(axis=-1, keepdims=True)
    np.exp(buf, out=buf)
    buf /= buf.sum(axis=-1, keepdims=True)
    return _result(buf, "masked_softmax", (x, mask), (buf,), _bwd_masked_softmax)


# ---------------------------------------------------------------------------
# normalization / lookup / loss
# ---------------------------------------------------------------------------

def _bwd_layer_norm(saved, g):
    xhat, inv_std, gd = saved
    d = xhat.shape[-1]
    dg = _unbroadcast(g * xhat, gd.shape)
    db = _unbroadcast(g, gd.shape)
    dxhat = g * gd
    dx = inv_std * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True) / d)
    return dx, dg, db


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match feature dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gain.data * xhat + bias.data
    return _result(out, "layer_norm", (x, gain, bias), (xhat, inv_std, gain.data), _bwd_layer_norm)


def _bwd_embedding(saved, g):
    ids, table_shape = saved
    gt = np.zeros(table_shape, dtype=np.float64)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, table_shape[-1]))
    return (gt,)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids is a constant integer array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = np.argwhere((ids < 0) | (ids >= table.shape[0]))[0]
        pos = tuple(int(v) for v in bad)
        raise DataError(f"token id {int(ids[tuple(bad)])} out of range [0, {table.shape[0]}) at position {pos}")
    return _result(table.data[ids], "embedding", (table,), (ids, table.shape), _bwd_embedding)


def _bwd_cross_entropy(saved, g):
    probs, tgt, shape = saved
    scale = float(g) / tgt.size
    probs *= scale
    probs[np.arange(tgt.size), tgt] -= scale
    return (probs.reshape(shape),)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over all positions (log-sum-exp form)."""
    tgt = np.asarray(targets).reshape(-1)
    flat = logits.data.reshape(-1, logits.shape[-1])
    if tgt.shape[0] != flat.shape[0]:
        raise DimensionError(f"cross_entropy: {logits.shape} logits vs {targets.shape} targets")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= flat.shape[1]):
        bad = int(np.argmax((tgt < 0) | (tgt >= flat.shape[1])))
        raise DataError(f"target id {int(tgt[bad])} out of range [0, {flat.shape[1]}) at position {bad}")
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    ez = np.exp(z)
    denom = ez.sum(axis=-1, keepdims=True)
    nll = np.log(denom.reshape(-1)) - z[np.arange(tgt.size), tgt]
    probs = ez / denom
    out = np.asarray(nll.mean())
    return _result(out, "cross_entropy", (logits,), (probs, tgt, logits.shape), _bwd_cross_entropy)


# ---------------------------------------------------------------------------
# shape / sequence ops
# ---------------------------------------------------------------------------

def _bwd_roll(saved, g):
    shift, axis = saved
    return (np.roll(g, -shift, axis=axis),)


def roll_right(x: Tensor, shift: int, axis: int = -2) -> Tensor:
    """Circular rotation toward higher positions: out[p] = x[(p - shift) mod N].

    The gradient is the matching left rotation.
    """
    if shift < 0:
        raise ContractError(f"roll_right: shift must be >= 0, got {shift}")
    return _result(np.roll(x.data, shift, axis=axis), "roll_right", (x,), (shift, axis), _bwd_roll)


def _bwd_reshape(saved, g):
    (shape,) = saved
    return (np.ascontiguousarray(g).reshape(shape),)


def reshape(x: Tensor, shape) -> Tensor:
    if int(np.prod(shape)) != x.size and -1 not in tuple(shape):
        raise DimensionError(f"reshape: {x.shape} has {x.size} elements, target {tuple(shape)}")
    return _result(x.data.reshape(shape), "reshape", (x,), (x.shape,), _bwd_reshape)


def _bwd_transpose(saved, g):
    ax1, ax2 = saved
    return (np.ascontiguousarray(np.swapaxes(g, ax1, ax2)),)


def transpose(x: Tensor, ax1: int = -1, ax2: int = -2) -> Tensor:
    # storage stays contiguous per the engine's no-strided-views rule
    return _result(np.ascontiguousarray(np.swapaxes(x.data, ax1, ax2)),
                   "transpose", (x,), (ax1, ax2), _bwd_transpose)


def _bwd_narrow(saved, g):
    shape, axis, start = saved
    gx = np.zeros(shape, dtype=np.float64)
    idx = [slice(None)] * len(shape)
    idx[axis] = slice(start, start + g.shape[axis])
    gx[tuple(idx)] = g
    return (gx,)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Copy a contiguous slice along one axis."""
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(f"narrow: [{start}:{start + length}] exceeds axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    return _result(np.ascontiguousarray(x.data[tuple(idx)]), "narrow", (x,),
                   (x.shape, axis, start), _bwd_narrow)


def _bwd_take_index(saved, g):
    shape, axis, index = saved
    gx = np.zeros(shape, dtype=np.float64)
    idx = [slice(None)] * len(shape)
    idx[axis] = index
    gx[tuple(idx)] = g
    return (gx,)


def take_index(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one index along an axis, dropping that axis."""
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = index
    return _result(np.ascontiguousarray(x.data[tuple(idx)]), "take_index", (x,),
                   (x.shape, axis, index), _bwd_take_index)


def _bwd_sum_all(saved, g):
    (shape,) = saved
    return (np.full(shape, float(g), dtype=np.float64),)


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), "sum_all", (x,), (x.shape,), _bwd_sum_all)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Gradients land on every reachable tensor with ``requires_grad``; saved
    arrays and intermediate gradients are dropped as nodes retire. The tape
    is consumed: a second backward over the same graph raises ContractError.
    """
    if loss.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("backward: no graph attached (already consumed, or built under no_grad)")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in visited or t.node is None:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=np.float64)
    for t in reversed(topo):
        node = t.node
        if t.grad is None:
            # dead branch (no downstream use contributed gradient)
            node.saved = None
            t.node = None
            continue
        grads = node.fn(node.saved, t.grad)
        owned: set[int] = set()
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                base = g
                while base.base is not None:
                    base = base.base
                if id(base) in owned:
                    g = g.copy()
                    base = g
                owned.add(id(base))
                MEMORY.track(g)
                p.grad = g
            else:
                p.grad += g
        node.saved = None
        t.node = None
        t.grad = None
    # intermediates are freed as nodes retire; leaves keep their gradients
