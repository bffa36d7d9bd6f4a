"""Dense float64 tensors with tape-based reverse-mode differentiation.

Array storage and arithmetic are backed by numpy. Every op below builds the
graph eagerly: the output tensor keeps references to its inputs and a closure
that routes the output gradient to them. ``backward`` walks that graph once,
in reverse topological order, and accumulates gradients into ``.grad``.
Gradients are never cleared implicitly; call sites reset them between steps.

Also here: the deterministic counter-based RNG used for every weight draw and
data draw in the package, the finite-difference gradient oracle, and the
multiply-accumulate counter used by the cost-accounting instrumentation.
"""
from __future__ import annotations

import hashlib
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1

# tanh-form GELU: 0.5*x*(1 + tanh(C0*(x + C1*x^3))).
# C0 = sqrt(2/pi). Both constants are pinned here so the nonlinearity is
# reproducible to the last bit across the codebase.
GELU_C0 = 0.7978845608028654
GELU_C1 = 0.044715

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class GraphError(RuntimeError):
    """Raised on invalid use of the backward pass."""


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation
# ---------------------------------------------------------------------------


class MacCounter:
    """Tally of matmul-family multiply-accumulates and softmax exp/div work.

    ``macs`` counts one unit per scalar multiply-accumulate inside matmul and
    grouped_linear. Softmax is not a MAC operation; its per-element exp and
    divide are tallied separately in ``softmax_elems`` (one unit covers the
    exp+div pair for one matrix element). Elementwise adds, gate scalings and
    normalization arithmetic are deliberately not counted; the analytic cost
    model counts the same set of operations so the two agree exactly.
    """

    __slots__ = ("macs", "softmax_elems")

    def __init__(self) -> None:
        self.macs = 0
        self.softmax_elems = 0


_MAC_STACK: list[MacCounter] = []


@contextmanager
def count_macs():
    """Context manager yielding a MacCounter active for ops run inside it.

    Counters do not nest additively: only the innermost active counter
    receives tallies.
    """
    counter = MacCounter()
    _MAC_STACK.append(counter)
    try:
        yield counter
    finally:
        _MAC_STACK.pop()


def _tally_macs(n: int) -> None:
    if _MAC_STACK:
        _MAC_STACK[-1].macs += int(n)


def _tally_softmax(n: int) -> None:
    if _MAC_STACK:
        _MAC_STACK[-1].softmax_elems += int(n)


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A float64 array plus optional gradient and graph linkage.

    Leaves are built directly (``Tensor(data, requires_grad=...)``); interior
    nodes are built by the op functions. ``grad`` stays None until a backward
    pass deposits something into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        # np.array with order="C" keeps 0-d shapes intact, unlike
        # ascontiguousarray on some numpy versions
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._backward_done = False

    @staticmethod
    def _node(data: np.ndarray, parents: Sequence["Tensor"]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = None
        out._backward_done = False
        return out

    # -- conveniences -------------------------------------------------------

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum. Accepts equal shapes, a 1-D bias against the last
    axis of a 2-D operand, or a scalar against anything."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    ok = (
        a.shape == b.shape
        or (b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0])
        or (a.ndim == 1 and b.ndim == 2 and b.shape[1] == a.shape[0])
        or a.ndim == 0
        or b.ndim == 0
    )
    if not ok:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor._node(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw(g: np.ndarray) -> None:
            if a.requires_grad:
                _accum(a, _reduce_to(g, a.shape))
            if b.requires_grad:
                _accum(b, _reduce_to(g, b.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a scalar tensor."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if not (a.shape == b.shape or a.ndim == 0 or b.ndim == 0):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor._node(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw(g: np.ndarray) -> None:
            if a.requires_grad:
                _accum(a, _reduce_to(g * b.data, a.shape))
            if b.requires_grad:
                _accum(b, _reduce_to(g * a.data, b.shape))
        out._backward = _bw
    return out


def scale(x, c: float) -> Tensor:
    """Multiply by a python constant (not tracked as a parameter)."""
    x = _as_tensor(x)
    c = float(c)
    out = Tensor._node(x.data * c, (x,))
    if out.requires_grad:
        def _bw(g: np.ndarray) -> None:
            _accum(x, g * c)
        out._backward = _bw
    return out


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    p, q = a.shape
    r = b.shape[1]
    _tally_macs(p * q * r)
    out = Tensor._node(a.data @ b.data, (a, b))
    if out.requires_grad:
        def _bw(g: np.ndarray) -> None:
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        out._backward = _bw
    return out


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: need a 2-D tensor, got shape {x.shape}")
    out = Tensor._node(np.ascontiguousarray(x.data.T), (x,))
    if out.requires_grad:
        def _bw(g: np.ndarray) -> None:
            _accum(x, np.ascontiguousarray(g.T))
        out._backward = _bw
    return out


def cols(x, start: int, stop: int) -> Tensor:
    """Column slice [start, stop) of a 2-D tensor."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"cols: need a 2-D tensor, got shape {x.shape}")
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"cols: slice [{start}, {stop}) out of range for shape {x.shape}")
    out = Tensor._node(np.ascontiguousarray(x.data[:, start:stop]), (x,))
    if out.requires_grad:
        def _bw(g: np.ndarray) -> None:
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            _accum(x, full)
        out._backward = _bw
    return out


def _concat(parts: Iterable, axis: int) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    for t in ts:
        if t.ndim != 2:
            raise ShapeError(f"concat: need 2-D tensors, got shape {t.shape}")
    other = 1 - axis
    width = ts[0].shape[other]
    for t in ts[1:]:
        if t.shape[other] != width:
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} disagree on axis {other}")
    out = Tensor._node(np.concatenate([t.data for t in ts], axis=axis), ts)
    if out.requires_grad:
        sizes = [t.shape[axis] for t in ts]
        offsets = np.cumsum([0] + sizes)
        def _bw(g: np.ndarray) -> None:
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    piece = g[lo:hi, :] if axis == 0 else g[:, lo:hi]
                    _accum(t, np.ascontiguousarray(piece))
        out._backward = _bw
    return out


def concat_rows(parts) -> Tensor:
    """Stack 2-D tensors along axis 0."""
    return _concat(parts, axis=0)


def concat_cols(parts) -> Tensor:
    """Stack 2-D tensors along axis 1."""
    return _concat(parts, axis=1)


def mean_rows(x) -> Tensor:
    """Mean over axis 0 of a 2-D tensor, kept as a 1-row matrix."""
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"mean_rows: need a non-empty 2-D tensor, got shape {x.shape}")
    p = x.shape[0]
    out = Tensor._node(x.data.mean(axis=0, keepdims=True), (x,))
    if out.requires_grad:
        def _bw(g: np.ndarray) -> None:
            _accum(x, np.broadcast_to(g / p, x.shape).copy())
        out._backward = _bw
    return out


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._node(np.asarray(x.data.sum()), (x,))
    if out.requires_grad:
        def _bw(g: np.ndarray) -> None:
            _accum(x, np.full_like(x.data, float(g)))
        out._backward = _bw
    return out


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    n = x.size
    out = Tensor._node(np.asarray(x.data.mean()), (x,))
    if out.requires_grad:
        def _bw(g: np.ndarray) -> None:
            _accum(x, np.full_like(x.data, float(g) / n))
        out._backward = _bw
    return out


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._node(np.maximum(x.data, 0.0), (x,))
    if out.requires_grad:
        mask = (x.data > 0.0).astype(np.float64)
        def _bw(g: np.ndarray) -> None:
            _accum(x, g * mask)
        out._backward = _bw
    return out


def gelu(x) -> Tensor:
    """tanh-form GELU with the module-level constants."""
    x = _as_tensor(x)
    v = x.data
    inner = GELU_C0 * (v + GELU_C1 * v ** 3)
    t = np.tanh(inner)
    out = Tensor._node(0.5 * v * (1.0 + t), (x,))
    if out.requires_grad:
        def _bw(g: np.ndarray) -> None:
            dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * v ** 2)
            _accum(x, g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * dinner))
        out._backward = _bw
    return out


def layer_norm(x, gain, shift) -> Tensor:
    """Normalize each row of a 2-D tensor to zero mean / unit variance over
    the last axis (biased variance, eps inside the sqrt), then apply the
    1-D ``gain`` and ``shift``."""
    x = _as_tensor(x)
    gain = _as_tensor(gain)
    shift = _as_tensor(shift)
    if x.ndim != 2:
        raise ShapeError(f"layer_norm: need a 2-D tensor, got shape {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/shift shapes {gain.shape}/{shift.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    out = Tensor._node(xhat * gain.data + shift.data, (x, gain, shift))
    if out.requires_grad:
        def _bw(g: np.ndarray) -> None:
            if x.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                _accum(x, inv * (dxhat - m1 - xhat * m2))
            if gain.requires_grad:
                _accum(gain, (g * xhat).sum(axis=0))
            if shift.requires_grad:
                _accum(shift, g.sum(axis=0))
        out._backward = _bw
    return out


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a 2-D tensor with per-row max subtraction."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows: need a 2-D tensor, got shape {x.shape}")
    if not np.isfinite(x.data).all():
        raise ValueError("softmax_rows: input contains non-finite values")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    _tally_softmax(y.size)
    out = Tensor._node(y, (x,))
    if out.requires_grad:
        def _bw(g: np.ndarray) -> None:
            dot = (g * y).sum(axis=1, keepdims=True)
            _accum(x, y * (g - dot))
        out._backward = _bw
    return out


def grouped_linear(x, weight, bias=None) -> Tensor:
    """Block-diagonal linear map.

    ``weight`` has shape (G, d_in/G, d_out/G); input column group g feeds
    output column group g and nothing else. Equivalent to a dense matmul with
    a block-diagonal matrix, at 1/G of the weights and MACs.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 3:
        raise ShapeError(f"grouped_linear: need 2-D input and 3-D weight, got {x.shape} and {weight.shape}")
    groups, gin, gout = weight.shape
    if x.shape[1] != groups * gin:
        raise ShapeError(
            f"grouped_linear: input shape {x.shape} does not match weight shape {weight.shape}"
        )
    p = x.shape[0]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (groups * gout,):
            raise ShapeError(f"grouped_linear: bias shape {bias.shape} does not match output width {groups * gout}")
    x3 = x.data.reshape(p, groups, gin)
    y = np.einsum("pgi,gio->pgo", x3, weight.data).reshape(p, groups * gout)
    _tally_macs(p * groups * gin * gout)
    if bias is not None:
        y = y + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)
    out = Tensor._node(np.ascontiguousarray(y), parents)
    if out.requires_grad:
        def _bw(g: np.ndarray) -> None:
            g3 = g.reshape(p, groups, gout)
            if x.requires_grad:
                _accum(x, np.einsum("pgo,gio->pgi", g3, weight.data).reshape(p, groups * gin))
            if weight.requires_grad:
                _accum(weight, np.einsum("pgi,pgo->gio", x3, g3))
            if bias is not None and bias.requires_grad:
                _accum(bias, g.sum(axis=0))
        out._backward = _bw
    return out


def cross_entropy_logits(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels`` under row ``logits``.

    Uses the log-sum-exp form with per-row max subtraction; the gradient is
    (softmax - onehot) / batch.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits: need 2-D logits, got shape {logits.shape}")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy_logits: labels shape {labels.shape} does not match logits shape {logits.shape}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("cross_entropy_logits: labels must be integers")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"cross_entropy_logits: labels out of range for {c} classes")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    lse = zmax[:, 0] + np.log(e.sum(axis=1))
    picked = z[np.arange(n), labels]
    out = Tensor._node(np.asarray((lse - picked).mean()), (logits,))
    if out.requires_grad:
        probs = e / e.sum(axis=1, keepdims=True)
        def _bw(g: np.ndarray) -> None:
            d = probs.copy()
            d[np.arange(n), labels] -= 1.0
            _accum(logits, d * (float(g) / n))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Run one reverse pass from a scalar ``loss``, accumulating into .grad.

    A second call on the same loss node raises; gradients must be reset and
    the graph rebuilt (a fresh forward pass) between passes.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward: loss must be a Tensor")
    if loss.shape != ():
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._backward_done:
        raise GraphError("backward: this graph was already walked; reset gradients and rebuild it")
    loss._backward_done = True
    if not loss.requires_grad:
        return
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference estimate of d f / d x, evaluated coordinate by
    coordinate. ``f`` must be deterministic; it is re-run 2*size times."""
    if h <= 0.0:
        raise ValueError(f"finite_diff_grad: step must be positive, got {h}")
    flat = x.data.reshape(-1)
    out = np.zeros_like(x.data)
    oflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar_value(f(x))
        flat[i] = orig - h
        fm = _scalar_value(f(x))
        flat[i] = orig
        oflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(out)


def _scalar_value(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


# ---------------------------------------------------------------------------
# deterministic RNG
# ---------------------------------------------------------------------------


def stream_id(name: str) -> int:
    """Stable 64-bit stream id for a component name (first 8 bytes of its
    SHA-256, little-endian)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(seed: int, label: str) -> int:
    """Fold a label into a seed, giving an independent 64-bit seed."""
    payload = int(seed).to_bytes(8, "little", signed=False) + label.encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Counter-based deterministic generator (Philox, keyed by seed+stream).

    The same (seed, stream) pair yields the same draw sequence on every run
    and platform; distinct streams are independent, so construction order
    never shifts any component's draws.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        bits = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        self._gen = np.random.Generator(bits)

    @classmethod
    def for_name(cls, seed: int, name: str) -> "Rng":
        return cls(seed, stream_id(name))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(loc=mean, scale=std, size=shape).astype(np.float64)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low=low, high=high, size=shape).astype(np.float64)

    def integers(self, n: int, low: int, high: int) -> np.ndarray:
        """n integers in [low, high)."""
        return self._gen.integers(low=low, high=high, size=n)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
