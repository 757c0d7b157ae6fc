"""Minimal define-by-run reverse-mode differentiation on float64 numpy arrays.

Every primitive computes its forward value eagerly. When at least one input
requires a gradient and recording is enabled, the primitive appends a node to
the thread's active :class:`ComputationRecord`. Because nodes are appended in
execution order, the record is already topologically sorted and
:func:`backward` simply walks it in reverse.

A record is consumed by the backward pass that walks it; a fresh record is
started automatically afterwards.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from anomem.errors import DimensionError, NumericError, StateError, ValidationError

__all__ = [
    "Tensor",
    "ComputationRecord",
    "PRIMITIVES",
    "active_record",
    "new_record",
    "no_grad",
    "is_recording",
    "backward",
    "as_tensor",
    "finite_difference_grad",
    # primitives
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "conv2d",
    "relu",
    "exp",
    "log",
    "sqrt",
    "sum",
    "mean",
    "variance",
    "softmax",
    "logsumexp",
    "l2_normalize",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "avg_pool",
    "average_pool",
]

NORM_EPS = 1e-12

_local = threading.local()

# name -> forward function; used to enumerate primitives in gradient checks
PRIMITIVES: dict[str, Callable[..., "Tensor"]] = {}


def _primitive(name: str):
    def register(fn):
        PRIMITIVES[name] = fn
        return fn

    return register


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "record", "index")

    def __init__(self, op, inputs, output, backward_fn, record, index):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.record = record
        self.index = index

    def __repr__(self) -> str:
        return f"Node({self.op}, #{self.index})"


class ComputationRecord:
    """Ordered list of executed primitives awaiting a backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def active_record() -> ComputationRecord:
    rec = getattr(_local, "record", None)
    if rec is None or rec.consumed:
        rec = ComputationRecord()
        _local.record = rec
    return rec


def new_record() -> ComputationRecord:
    """Discard the active record (if any) and start an empty one."""
    old = getattr(_local, "record", None)
    if old is not None and not old.consumed:
        _release(old)
    _local.record = ComputationRecord()
    return _local.record


def _release(rec: ComputationRecord) -> None:
    """Mark ``rec`` consumed and cut node/output cycles so arrays free promptly."""
    for node in rec.nodes:
        node.output = None
        node.inputs = ()
        node.backward_fn = None
    rec.nodes.clear()
    rec.consumed = True


def is_recording() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording anything."""
    prev = is_recording()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """Dense float64 array that may participate in a computation record.

    A tensor created directly with ``requires_grad=True`` is a trainable leaf:
    :func:`backward` accumulates ``dLoss/dLeaf`` into its ``grad`` buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if 0 in arr.shape:
            raise DimensionError(f"tensor dimensions must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialised with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node = None
        t.name = None
        return t

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # --- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"primitive '{op}' produced non-finite values")
    out = Tensor._wrap(np.asarray(data, dtype=np.float64))
    if is_recording() and any(t.requires_grad for t in inputs):
        rec = active_record()
        node = Node(op, tuple(inputs), out, backward_fn, rec, len(rec.nodes))
        rec.nodes.append(node)
        out.node = node
        out.requires_grad = True
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every trainable leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        raise StateError("loss is not attached to a computation record")
    rec = loss.node.record
    if rec.consumed:
        raise StateError("computation record was already consumed by a backward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(rec.nodes[: loss.node.index + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi

    _release(rec)
    if getattr(_local, "record", None) is rec:
        _local.record = ComputationRecord()


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _axis(axis: int, ndim: int) -> int:
    if not isinstance(axis, (int, np.integer)) or not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} is invalid for a {ndim}-d tensor")
    return int(axis) % ndim


def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (tuple, list)):
        return tuple(sorted(_axis(a, ndim) for a in axis))
    return (_axis(axis, ndim),)


def _expand(g: np.ndarray, axes: tuple[int, ...], keepdims: bool, shape) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


@_primitive("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bw)


@_primitive("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), bw)


@_primitive("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", a.data * b.data, (a, b), bw)


@_primitive("div")
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", out, (a, b), bw)


@_primitive("neg")
def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


@_primitive("scale")
def scale(a, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    a = as_tensor(a)
    c = float(factor)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


@_primitive("relu")
def relu(a) -> Tensor:
    """``max(a, 0)`` elementwise; the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


@_primitive("exp")
def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


@_primitive("log")
def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _emit("log", out, (a,), lambda g: (g / a.data,))


@_primitive("sqrt")
def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly 0 is defined as 0 so that a
    zero-variance input yields a finite (zero) gradient."""
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def bw(g):
        pos = out > 0
        return (np.where(pos, g * 0.5 / np.where(pos, out, 1.0), 0.0),)

    return _emit("sqrt", out, (a,), bw)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------


@_primitive("sum")
def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _emit("sum", out, (a,), lambda g: (_expand(g, axes, keepdims, a.shape),))


@_primitive("mean")
def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _emit("mean", out, (a,), lambda g: (_expand(g, axes, keepdims, a.shape) / n,))


@_primitive("variance")
def variance(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Population (biased) variance along one axis."""
    a = as_tensor(a)
    ax = _axis(axis, a.ndim)
    n = a.shape[ax]
    if n < 2:
        raise DimensionError(f"variance needs at least 2 elements along axis {axis}, got {n}")
    centered = a.data - a.data.mean(axis=ax, keepdims=True)
    out = (centered**2).mean(axis=ax, keepdims=keepdims)

    def bw(g):
        g = g if keepdims else np.expand_dims(g, ax)
        return (g * centered * (2.0 / n),)

    return _emit("variance", out, (a,), bw)


@_primitive("softmax")
def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _emit("softmax", out, (a,), bw)


@_primitive("logsumexp")
def logsumexp(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """``log(sum(exp(a)))`` along ``axis`` restricted to entries where ``mask``
    is true. Every reduced slice must keep at least one entry."""
    a = as_tensor(a)
    ax = _axis(axis, a.ndim)
    if mask is None:
        keep = np.ones(a.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        if not np.all(keep.any(axis=ax)):
            raise ValidationError("logsumexp mask leaves an empty slice")
    masked = np.where(keep, a.data, -np.inf)
    m = masked.max(axis=ax, keepdims=True)
    e = np.where(keep, np.exp(masked - m), 0.0)
    s = e.sum(axis=ax, keepdims=True)
    out = (m + np.log(s)).squeeze(ax)
    weights = e / s

    def bw(g):
        return (np.expand_dims(g, ax) * weights,)

    return _emit("logsumexp", out, (a,), bw)


@_primitive("l2_normalize")
def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    Slices with norm at or below ``NORM_EPS`` map to the zero vector with a
    zero gradient.
    """
    a = as_tensor(a)
    ax = _axis(axis, a.ndim)
    norm = np.sqrt((a.data**2).sum(axis=ax, keepdims=True))
    ok = norm > NORM_EPS
    safe = np.where(ok, norm, 1.0)
    out = np.where(ok, a.data / safe, 0.0)

    def bw(g):
        proj = (g * out).sum(axis=ax, keepdims=True)
        return (np.where(ok, (g - out * proj) / safe, 0.0),)

    return _emit("l2_normalize", out, (a,), bw)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------


@_primitive("matmul")
def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", out, (a, b), bw)


def _same_pad(k: int) -> tuple[int, int]:
    lo = k // 2
    return lo, k - 1 - lo


@_primitive("conv2d")
def conv2d(x, kernel, stride: int = 1) -> Tensor:
    """Same-padded 2-D cross-correlation on channels-last maps.

    Args:
        x: ``[H, W, C_in]`` or batched ``[B, H, W, C_in]``.
        kernel: ``[k, k, C_in, C_out]``.
        stride: step along both spatial axes.

    Zero padding of ``k // 2`` is placed before each axis (and ``k - 1 - k//2``
    after), so the output extent is ``(H - 1) // stride + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"conv2d kernel must be [k, k, C_in, C_out], got {kernel.shape}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be [H, W, C] or [B, H, W, C], got {x.shape}")
    stride = int(stride)
    if stride < 1:
        raise ValidationError(f"conv2d stride must be ≥ 1, got {stride}")
    k, _, cin, cout = kernel.shape
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    _, h, w, c = xd.shape
    if c != cin:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {cin}")
    if k > h or k > w:
        raise DimensionError(f"conv2d kernel {k} larger than input {h}x{w}")

    lo, hi = _same_pad(k)
    xp = np.pad(xd, ((0, 0), (lo, hi), (lo, hi), (0, 0)))
    # [B, H', W', C, k, k]
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = cols.shape[1], cols.shape[2]
    out = np.tensordot(cols, kernel.data, axes=([3, 4, 5], [2, 0, 1]))
    if not batched:
        out = out[0]

    def bw(g):
        gb = g if batched else g[None]
        gk = gx = None
        if kernel.requires_grad:
            # [C, k, k, C_out] -> [k, k, C, C_out]
            gk = np.tensordot(cols, gb, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        if x.requires_grad:
            dcols = np.tensordot(gb, kernel.data, axes=([3], [3]))  # [B, H', W', k, k, C]
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += dcols[
                        :, :, :, di, dj
                    ]
            gx = gxp[:, lo : lo + h, lo : lo + w]
            if not batched:
                gx = gx[0]
        return gx, gk

    return _emit("conv2d", out, (x, kernel), bw)


# ----------------------------------------------------------------------
# pooling
# ----------------------------------------------------------------------


def _pool_matrix(n: int, bins: int) -> np.ndarray:
    """Row i averages input cells [floor(i*n/bins), ceil((i+1)*n/bins))."""
    p = np.zeros((bins, n))
    for i in range(bins):
        start = (i * n) // bins
        stop = -((-(i + 1) * n) // bins)
        p[i, start:stop] = 1.0 / (stop - start)
    return p


@_primitive("avg_pool")
def avg_pool(x, grid: int | tuple[int, int]) -> Tensor:
    """Adaptive average pooling of ``[..., H, W, C]`` onto a ``grid`` of cells."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"avg_pool needs [..., H, W, C], got {x.shape}")
    gh, gw = (grid, grid) if isinstance(grid, (int, np.integer)) else grid
    h, w = x.shape[-3], x.shape[-2]
    if not (1 <= gh <= h and 1 <= gw <= w):
        raise DimensionError(f"pool grid {gh}x{gw} does not fit a {h}x{w} map")
    ph, pw = _pool_matrix(h, gh), _pool_matrix(w, gw)
    out = np.einsum("ih,...hwc,jw->...ijc", ph, x.data, pw, optimize=True)

    def bw(g):
        return (np.einsum("ih,...ijc,jw->...hwc", ph, g, pw, optimize=True),)

    return _emit("avg_pool", out, (x,), bw)


def average_pool(x, window: int) -> Tensor:
    """Non-overlapping ``window``×``window`` average pooling."""
    x = as_tensor(x)
    h, w = x.shape[-3], x.shape[-2]
    if window < 1 or h % window or w % window:
        raise DimensionError(f"pool window {window} does not tile a {h}x{w} map")
    return avg_pool(x, (h // window, w // window))


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------


@_primitive("reshape")
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}") from exc
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


@_primitive("transpose")
def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(_axis(ax, a.ndim) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {a.ndim}-d tensor")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


@_primitive("getitem")
def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise DimensionError(str(exc)) from exc
    out = np.array(out, dtype=np.float64)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _emit("getitem", out, (a,), bw)


@_primitive("concat")
def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty sequence")
    ax = _axis(axis, ts[0].ndim)
    try:
        out = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", out, tuple(ts), bw)


# ----------------------------------------------------------------------
# numerical gradient
# ----------------------------------------------------------------------


def finite_difference_grad(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d fn() / d leaf, evaluated without recording."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data.sum())
            flat[i] = orig - h
            fm = float(fn().data.sum())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad
