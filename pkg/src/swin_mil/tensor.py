"""Dense tensors with reverse-mode automatic differentiation.

Every operation the model needs lives here as a plain function operating on
:class:`Tensor` objects. Each differentiable op records a node holding its
parents and an adjoint closure; :meth:`Tensor.backward` walks those nodes in
reverse topological order.

Image tensors are channels-last (``[..., H, W, C]``) and row-major.
"""

from __future__ import annotations

import contextlib
import struct
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import DomainError, FormatError, GraphError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "power",
    "exp",
    "log",
    "sigmoid",
    "gelu",
    "clamp",
    "tensor_sum",
    "mean",
    "reshape",
    "transpose",
    "roll",
    "concat",
    "take",
    "matmul",
    "linear",
    "softmax",
    "layer_norm",
    "conv1x1",
    "bilinear_upsample",
    "bilinear_weights",
    "save_smt1",
    "load_smt1",
    "encode_smt1",
    "decode_smt1",
]

_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class _Node:
    __slots__ = ("parents", "backward_fn", "released")

    def __init__(self, parents: tuple["Tensor", ...], backward_fn: Callable):
        self.parents = parents
        self.backward_fn = backward_fn
        self.released = False


class Tensor:
    """An N-dimensional real array that can take part in the gradient tape.

    Leaves created with ``requires_grad=True`` accumulate ``dLoss/dTensor`` in
    :attr:`grad` on every :meth:`backward` call. Reading ``grad`` on such a
    leaf before any backward pass gives zeros.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def grad(self) -> np.ndarray | None:
        if self._grad is None and self.requires_grad and self.is_leaf:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- reverse mode -----------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every ``requires_grad`` leaf reachable from
        this scalar. The recorded graph is released afterwards, so a second
        call without a new forward pass raises :class:`GraphError`."""
        if self.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not require grad; nothing was recorded")
        if self.is_leaf:
            self._accumulate(np.ones_like(self.data))
            return
        if self._node.released:
            raise GraphError("graph already consumed by backward(); run a new forward pass")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if t.is_leaf:
                if g is not None:
                    t._accumulate(g)
                continue
            node = t._node
            if node.released:
                raise GraphError("graph already consumed by backward(); run a new forward pass")
            if g is not None:
                parent_grads = node.backward_fn(g)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node.released = True
            node.backward_fn = None

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.shape:
            g = _unbroadcast(g, self.shape)
        if self._grad is None:
            self._grad = g.copy()
        else:
            self._grad = self._grad + g


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _result(out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def power(x: Tensor, p: float) -> Tensor:
    """Elementwise ``x ** p`` for a constant real exponent."""
    p = float(p)
    out = np.power(x.data, x.dtype.type(p))

    def backward(g):
        if p == 1.0:
            return (g,)
        return (g * x.dtype.type(p) * np.power(x.data, x.dtype.type(p - 1.0)),)

    return _result(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value; clamp the argument first")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    k = xd.dtype.type(_GELU_K)
    c = xd.dtype.type(_GELU_C)
    t = np.tanh(k * (xd + c * xd**3))
    out = 0.5 * xd * (1 + t)

    def backward(g):
        dt = (1 - t * t) * k * (1 + 3 * c * xd * xd)
        return (g * (0.5 * (1 + t) + 0.5 * xd * dt),)

    return _result(out, (x,), backward)


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient flows only where the input was inside."""
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi

    return _result(out, (x,), lambda g: (np.where(inside, g, 0).astype(g.dtype),))


# -- reductions and shape ops -------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(tensor_sum(x, axes, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Cyclic (torus) shift; ``roll(roll(x, s), -s) == x``."""
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(axes)
    back = tuple(-s for s in shifts)
    return _result(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, tensors, backward)


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (first axis) by an integer index array."""
    index = np.asarray(index)
    out = table.data[index]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (table,), backward)


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return _result(out, (x,), backward)


# -- linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..., M, K] @ [..., K, N]``."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis, with ``w`` stored as ``[in, out]``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input features {x.shape} do not match weight {w.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: channel axis {c} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward)


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-pixel affine map ``[..., H, W, Cin] -> [..., H, W, Cout]``."""
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"conv1x1: input {x.shape}, weight {w.shape}, bias {b.shape} disagree")
    return linear(x, w, b)


@lru_cache(maxsize=64)
def bilinear_weights(src: int, dst: int) -> np.ndarray:
    """``[dst, src]`` interpolation matrix, align-corners-false convention."""
    m = np.zeros((dst, src), dtype=np.float64)
    ratio = src / dst
    for d in range(dst):
        s = max((d + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(s)), src - 1)
        i1 = min(i0 + 1, src - 1)
        lam = s - i0
        m[d, i0] += 1.0 - lam
        m[d, i1] += lam
    m.setflags(write=False)
    return m


def bilinear_upsample(x: Tensor, height: int, width: int) -> Tensor:
    """Resize ``[..., h, w, C]`` up to ``[..., height, width, C]``."""
    if x.ndim < 3:
        raise ShapeError(f"bilinear_upsample expects [..., h, w, C], got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    if height < h or width < w:
        raise ShapeError(f"bilinear_upsample only enlarges: {h}x{w} -> {height}x{width} unsupported")
    ah = bilinear_weights(h, height).astype(x.dtype)
    aw = bilinear_weights(w, width).astype(x.dtype)
    rows = np.einsum("ip,...pqc->...iqc", ah, x.data)
    out = np.einsum("jq,...iqc->...ijc", aw, rows)

    def backward(g):
        gr = np.einsum("jq,...ijc->...iqc", aw, g)
        return (np.einsum("ip,...iqc->...pqc", ah, gr),)

    return _result(out, (x,), backward)


# -- SMT1 raw tensor files ----------------------------------------------------
SMT1_MAGIC = b"SMT1"


def encode_smt1(array) -> bytes:
    """Serialize as ``SMT1`` + u32 rank + u64 dims + float32 LE payload."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    payload = np.ascontiguousarray(arr, dtype="<f4")
    head = SMT1_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + payload.tobytes()


def decode_smt1(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one SMT1 record starting at ``offset``; returns (array, end offset)."""
    if buf[offset : offset + 4] != SMT1_MAGIC:
        raise FormatError("bad SMT1 magic", offset)
    pos = offset + 4
    if len(buf) < pos + 4:
        raise FormatError("truncated SMT1 rank", pos)
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 8 * rank:
        raise FormatError("truncated SMT1 dims", pos)
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = 4 * count
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated SMT1 payload, expected {nbytes} bytes", pos)
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
    return arr, pos + nbytes


def save_smt1(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_smt1(array))


def load_smt1(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_smt1(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after SMT1 payload", end)
    return arr

