"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: it records exactly the operations the
attention blocks, losses and the tiny benchmark backbone need, on row-major
float64 arrays.  Each operation's output keeps references to its inputs and
a vector-Jacobian closure; :func:`backward` walks that DAG once in reverse
topological order and accumulates gradients into every tensor that was
created with ``requires_grad=True``.

Conventions
-----------
* Forward values are immutable once recorded (arrays are exposed as
  read-only views); optimizers rebind ``.data`` between steps instead of
  writing in place.
* Binary operations broadcast in three sanctioned patterns: equal shapes, a
  scalar operand, or trailing-axes alignment (a ``[H, W]`` mask against a
  ``[C, H, W]`` or ``[N, C, H, W]`` feature map, and size-1 axes against a
  batch).  Anything else raises :class:`ShapeError`.
* Gradients of broadcast operands are summed over the broadcast axes.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import rng as _rng
from .errors import GraphStateError, NumericError, OracleError, ShapeError

DTYPE = np.float64

# Every op kind that can appear as Tensor._op.  Tests key off this to make
# sure each registered op has gradient coverage.
OP_KINDS = frozenset({
    "add", "sub", "mul",
    "relu", "sigmoid", "square",
    "matmul", "softmax_rows",
    "reduce_sum", "reduce_mean",
    "reshape", "transpose_last2",
    "conv3x3", "avgpool2",
    "cross_entropy_logits", "euclidean_distance",
})

_node_ids = itertools.count()


def _freeze(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.flags.writeable = False
    return v


class Tensor:
    """A node in the differentiation graph.

    Leaves are built directly (or via :func:`create`); operation outputs are
    built by the op functions in this module and must not be constructed by
    hand.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id",
                 "_op", "_inputs", "_vjp", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = _freeze(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self._op: Optional[str] = None
        self._inputs: tuple = ()
        self._vjp: Optional[Callable] = None
        self._backward_done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # Small operator sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _op_output(op: str, data: np.ndarray, inputs: tuple, vjp_factory) -> Tensor:
    """Build an op output; closures are only materialized on the grad path."""
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = op
        out._inputs = inputs
        out._vjp = vjp_factory()
    return out


# ---------------------------------------------------------------------------
# construction


def create(shape: Sequence[int], init: str = "zeros", *, value: float = 0.0,
           mean: float = 0.0, std: float = 1.0, seed: int = 0,
           requires_grad: bool = False) -> Tensor:
    """Allocate a tensor: init is one of ``zeros``, ``constant``, ``gaussian``.

    Gaussian values come from :func:`wsolkit.rng.gaussian` (Philox raw output
    plus Box-Muller), so a given ``seed`` yields bitwise-identical arrays on
    every platform.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    if init == "zeros":
        data = np.zeros(shape, dtype=DTYPE)
    elif init == "constant":
        data = np.full(shape, float(value), dtype=DTYPE)
    elif init == "gaussian":
        if std < 0:
            raise ValueError(f"gaussian std must be >= 0, got {std}")
        data = _rng.gaussian(shape, mean=mean, std=std, seed=seed)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def stop_gradient(t: Tensor) -> Tensor:
    """Same values, detached: no gradient flows into t's producers."""
    return Tensor(t.data)


# ---------------------------------------------------------------------------
# broadcasting helpers for binary elementwise ops


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb or sa == () or sb == ():
        return True
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if small == big[len(big) - len(small):]:
        return True
    if len(sa) == len(sb):
        return all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb))
    return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the axes a broadcast input was expanded along."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, a, b, fwd, vjp_a, vjp_b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    data = fwd(a.data, b.data)

    def factory():
        ad, bd = a.data, b.data
        a_shape, b_shape = a.shape, b.shape

        def vjp(g):
            ga = _unbroadcast(vjp_a(g, ad, bd), a_shape) if a.requires_grad else None
            gb = _unbroadcast(vjp_b(g, ad, bd), b_shape) if b.requires_grad else None
            return ga, gb
        return vjp

    return _op_output(op, data, (a, b), factory)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def _unary(op: str, a, fwd, dfun) -> Tensor:
    a = _as_tensor(a)
    data = fwd(a.data)

    def factory():
        ad = a.data

        def vjp(g):
            return (g * dfun(ad, data),)
        return vjp

    return _op_output(op, data, (a,), factory)


def relu(a) -> Tensor:
    # Subgradient at 0 is 0 (strict comparison).
    return _unary("relu", a, lambda x: np.maximum(x, 0.0),
                  lambda x, y: (x > 0).astype(DTYPE))


def sigmoid(a) -> Tensor:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    return _unary("sigmoid", a, fwd, lambda x, y: y * (1.0 - y))


def square(a) -> Tensor:
    return _unary("square", a, lambda x: x * x, lambda x, y: 2.0 * x)


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}
_ELEMENTWISE_UNARY = {"relu": relu, "sigmoid": sigmoid, "square": square}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by kind: add | mul | sub | relu | sigmoid | square."""
    if kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _ELEMENTWISE_BINARY[kind](a, b)
    if kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"{kind} takes one operand")
        return _ELEMENTWISE_UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra


def _swap_last2(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, plus batched forms with one leading axis.

    Either operand may carry a single leading batch axis; a 2-D operand is
    broadcast across the other's batch.  Gradients follow the usual rules
    (dA = dOut . B^T, dB = A^T . dOut) with broadcast batches summed out.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul supports 2-D/3-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def factory():
        ad, bd = a.data, b.data

        def vjp(g):
            ga = gb = None
            if a.requires_grad:
                ga = np.matmul(g, _swap_last2(bd))
                if ga.ndim > ad.ndim:
                    ga = ga.sum(axis=0)
            if b.requires_grad:
                gb = np.matmul(_swap_last2(ad), g)
                if gb.ndim > bd.ndim:
                    gb = gb.sum(axis=0)
            return ga, gb
        return vjp

    return _op_output("matmul", data, (a, b), factory)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis with max-shift stabilization.

    Rows sum to 1 within 1e-12 for any finite input.  Non-finite entries are
    rejected up front.
    """
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"softmax_rows needs >= 2 dims, got {a.shape}")
    if not np.isfinite(a.data).all():
        raise NumericError("softmax_rows received non-finite input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def factory():
        y = data

        def vjp(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
        return vjp

    return _op_output("softmax_rows", data, (a,), factory)


# ---------------------------------------------------------------------------
# reductions / shape ops


def _normalize_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = tuple(ax + ndim if ax < 0 else ax for ax in axes)
    for ax in norm:
        if not 0 <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for ndim {ndim}")
    if len(set(norm)) != len(norm):
        raise ValueError(f"repeated axis in {axes}")
    return norm


def _reduce(op: str, a: Tensor, axes, is_mean: bool) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axes, a.ndim)
    data = a.data.mean(axis=axes) if is_mean else a.data.sum(axis=axes)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def factory():
        in_shape = a.shape

        def vjp(g):
            gk = np.array(g, dtype=DTYPE)
            for ax in sorted(axes):
                gk = np.expand_dims(gk, ax)
            out = np.broadcast_to(gk, in_shape)
            return ((out / count) if is_mean else out.copy(),)
        return vjp

    return _op_output(op, np.asarray(data, dtype=DTYPE), (a,), factory)


def reduce_sum(a, axes=None) -> Tensor:
    return _reduce("reduce_sum", a, axes, is_mean=False)


def reduce_mean(a, axes=None) -> Tensor:
    return _reduce("reduce_mean", a, axes, is_mean=True)


def reduce(kind: str, a, axes=None) -> Tensor:
    """Dispatch by kind: mean | sum, over the given axes (None = all)."""
    if kind == "sum":
        return reduce_sum(a, axes)
    if kind == "mean":
        return reduce_mean(a, axes)
    raise ValueError(f"unknown reduce kind {kind!r}")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    data = a.data.reshape(shape)

    def factory():
        in_shape = a.shape

        def vjp(g):
            return (g.reshape(in_shape),)
        return vjp

    return _op_output("reshape", data, (a,), factory)


def transpose_last2(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2 needs >= 2 dims, got {a.shape}")
    data = np.ascontiguousarray(_swap_last2(a.data))

    def factory():
        def vjp(g):
            return (_swap_last2(g),)
        return vjp

    return _op_output("transpose_last2", data, (a,), factory)


# ---------------------------------------------------------------------------
# spatial ops for the benchmark backbone


def conv3x3(x: Tensor, w: Tensor) -> Tensor:
    """3x3 same-padding convolution, stride 1, no bias.

    x: [N, Cin, H, W], w: [Cout, Cin, 3, 3] -> [N, Cout, H, W].
    Implemented as im2col + one matmul per batch.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3 expects x [N,C,H,W] and w [K,C,3,3], got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3x3 channel mismatch: {x.shape} vs {w.shape}")
    n, cin, h, wid = x.shape
    cout = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, h * wid, cin * 9)
    wmat = w.data.reshape(cout, cin * 9)
    out = np.matmul(cols, wmat.T)                      # [N, HW, Cout]
    data = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, cout, h, wid)

    def factory():
        def vjp(g):
            gmat = g.reshape(n, cout, h * wid).transpose(0, 2, 1)   # [N, HW, Cout]
            gx = gw = None
            if w.requires_grad:
                gw = np.einsum("nio,nik->ok", gmat, cols).reshape(cout, cin, 3, 3)
            if x.requires_grad:
                dcols = np.matmul(gmat, wmat).reshape(n, h, wid, cin, 3, 3)
                dxp = np.zeros((n, cin, h + 2, wid + 2), dtype=DTYPE)
                for ki in range(3):
                    for kj in range(3):
                        dxp[:, :, ki:ki + h, kj:kj + wid] += \
                            dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                gx = dxp[:, :, 1:h + 1, 1:wid + 1]
            return gx, gw
        return vjp

    return _op_output("conv3x3", data, (x, w), factory)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial extents must be even."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avgpool2 expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial extents, got {h}x{w}")
    data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def factory():
        def vjp(g):
            up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
            return (up * 0.25,)
        return vjp

    return _op_output("avgpool2", data, (x,), factory)


# ---------------------------------------------------------------------------
# fused loss primitives


def _validate_onehot(y: np.ndarray):
    if not ((y == 0) | (y == 1)).all() or not (y.sum(axis=-1) == 1).all():
        raise ValueError("labels must be exact one-hot rows")


def cross_entropy_logits(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean cross entropy from raw logits via log-sum-exp.

    logits: [N, K] (or [K] for one sample), onehot: matching exact one-hot
    array.  The logits gradient is (softmax - onehot) / N.
    """
    logits = _as_tensor(logits)
    y = np.asarray(onehot, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeError(f"one-hot shape {y.shape} != logits shape {logits.shape}")
    ld = logits.data if logits.ndim == 2 else logits.data[None, :]
    yd = y if y.ndim == 2 else y[None, :]
    _validate_onehot(yd)
    n = ld.shape[0]
    m = ld.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(axis=-1))
    data = np.asarray((lse - (ld * yd).sum(axis=-1)).mean(), dtype=DTYPE)

    def factory():
        soft = np.exp(ld - m)
        soft /= soft.sum(axis=-1, keepdims=True)

        def vjp(g):
            gl = float(g) * (soft - yd) / n
            return (gl.reshape(logits.shape),)
        return vjp

    return _op_output("cross_entropy_logits", data, (logits,), factory)


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """L2 distance over the last axis; subgradient 0 at zero distance."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"euclidean_distance shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    data = np.sqrt((diff * diff).sum(axis=-1))

    def factory():
        def vjp(g):
            d = np.where(data > 0, data, 1.0)
            scale = (np.asarray(g) / d)[..., None]
            scale = np.where(data[..., None] > 0, scale, 0.0)
            ga = scale * diff
            return ga, -ga
        return vjp

    return _op_output("euclidean_distance", np.asarray(data, dtype=DTYPE), (a, b), factory)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for inp in node._inputs:
            if id(inp) not in visited:
                stack.append((inp, False))
    return order


def backward(loss: Tensor) -> dict:
    """Reverse-mode sweep from a scalar loss.

    Returns {node_id -> gradient array} for every node on the gradient path
    and accumulates into ``.grad`` of each requires_grad tensor.  A second
    call on the same loss without re-running the forward pass is an error.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise GraphStateError("backward already ran for this loss; re-run the forward pass")
    loss._backward_done = True

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.get(node.node_id)
        if g is None or node._vjp is None:
            continue
        in_grads = node._vjp(g)
        for inp, gi in zip(node._inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            acc = grads.get(inp.node_id)
            grads[inp.node_id] = gi if acc is None else acc + gi

    for node in order:
        if node.requires_grad and node.node_id in grads:
            g = grads[node.node_id]
            node.grad = g.copy() if node.grad is None else node.grad + g
    return grads


def grad_or_zeros(t: Tensor) -> np.ndarray:
    """t.grad, or zeros when the tensor never entered the graph."""
    return np.zeros(t.shape, dtype=DTYPE) if t.grad is None else t.grad


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_check(fn: Callable[[Tensor], Tensor], x: Tensor,
                            eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must map a tensor to a scalar tensor and be deterministic (this is
    checked by double evaluation).  Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(x.data, dtype=DTYPE)

    v0 = fn(Tensor(base.copy())).item()
    v1 = fn(Tensor(base.copy())).item()
    if v0 != v1:
        raise OracleError(f"fn is not deterministic: {v0!r} != {v1!r}")

    xt = Tensor(base.copy(), requires_grad=True)
    backward(fn(xt))
    analytic = grad_or_zeros(xt).reshape(-1)

    numeric = np.zeros(base.size, dtype=DTYPE)
    flat = base.reshape(-1)
    for i in range(base.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        fp = fn(Tensor(plus.reshape(base.shape))).item()
        fm = fn(Tensor(minus.reshape(base.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * eps)

    if base.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
