"""Small N-dimensional array with reverse-mode automatic differentiation.

Values live in numpy arrays. Every differentiable operation records its
parents and a closure that maps the output gradient to parent gradients;
:func:`backward` walks the recorded graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError



_state = {"dtype": np.dtype(np.float32), "strict": False, "grad_enabled": True}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    _state["dtype"] = dt


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``"float64"`` for verification)."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def strict_domain(enabled: bool = True):
    """Raise DomainError on log/sqrt of negative inputs."""
    old = _state["strict"]
    _state["strict"] = enabled
    try:
        yield
    finally:
        _state["strict"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, o):
        return elementwise("add", self, o)

    def __radd__(self, o):
        return elementwise("add", o, self)

    def __sub__(self, o):
        return elementwise("sub", self, o)

    def __rsub__(self, o):
        return elementwise("sub", o, self)

    def __mul__(self, o):
        return elementwise("mul", self, o)

    def __rmul__(self, o):
        return elementwise("mul", o, self)

    def __truediv__(self, o):
        return elementwise("div", self, o)

    def __rtruediv__(self, o):
        return elementwise("div", o, self)

    def __neg__(self):
        return elementwise("neg", self)

    def __pow__(self, o):
        return elementwise("pow", self, o)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce("max", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, grad=None):
        backward(self, grad)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Build a tensor in the current default dtype."""
    return Tensor(np.array(data, dtype=_state["dtype"]), requires_grad, name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _state["dtype"]
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def broadcast_shape(*shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast shapes {shapes}") from exc


# ---------------------------------------------------------------------------
# elementwise


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_domain(tag, x):
    if _state["strict"] and np.any(x < 0):
        raise DomainError(f"{tag} of negative input")


_UNARY = {"neg", "exp", "log", "sqrt", "abs", "silu", "sigmoid", "softplus", "tanh"}
_BINARY = {"add", "sub", "mul", "div", "pow"}
OP_TAGS = tuple(sorted(_UNARY | _BINARY))


def elementwise(tag: str, a, b=None) -> Tensor:
    """Apply the elementwise op ``tag`` with trailing-dimension broadcasting."""
    if tag in _UNARY:
        if b is not None:
            raise ContractError(f"{tag} takes one operand")
        return _unary(tag, as_tensor(a))
    if tag not in _BINARY:
        raise ContractError(f"unknown op tag {tag!r}")
    if b is None:
        raise ContractError(f"{tag} takes two operands")
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    a = as_tensor(a, like)
    b = as_tensor(b, like)
    return _binary(tag, a, b)


def _binary(tag, a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data
    broadcast_shape(x.shape, y.shape)
    if tag == "add":
        out = x + y

        def bw(g):
            return unbroadcast(g, x.shape), unbroadcast(g, y.shape)

    elif tag == "sub":
        out = x - y

        def bw(g):
            return unbroadcast(g, x.shape), unbroadcast(-g, y.shape)

    elif tag == "mul":
        out = x * y

        def bw(g):
            return unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape)

    elif tag == "div":
        out = x / y

        def bw(g):
            gx = g / y
            return unbroadcast(gx, x.shape), unbroadcast(-gx * out, y.shape)

    else:  # pow
        out = np.power(x, y)

        def bw(g):
            gx = g * y * np.power(x, y - 1)
            gy = None
            if b.requires_grad:
                with np.errstate(divide="ignore", invalid="ignore"):
                    gy = g * out * np.log(x)
                gy = unbroadcast(gy, y.shape)
            return unbroadcast(gx, x.shape), gy

    return make_result(out, (a, b), bw)


def _unary(tag, a: Tensor) -> Tensor:
    x = a.data
    if tag == "neg":
        out = -x
        bw = lambda g: (-g,)
    elif tag == "exp":
        out = np.exp(x)
        bw = lambda g: (g * out,)
    elif tag == "log":
        _check_domain(tag, x)
        out = np.log(x)
        bw = lambda g: (g / x,)
    elif tag == "sqrt":
        _check_domain(tag, x)
        out = np.sqrt(x)
        bw = lambda g: (0.5 * g / out,)
    elif tag == "abs":
        out = np.abs(x)
        bw = lambda g: (g * np.sign(x),)
    elif tag == "sigmoid":
        out = _sigmoid(x)
        bw = lambda g: (g * out * (1 - out),)
    elif tag == "silu":
        s = _sigmoid(x)
        out = x * s
        bw = lambda g: (g * (s + out * (1 - s)),)
    elif tag == "softplus":
        out = np.logaddexp(0, x).astype(x.dtype, copy=False)
        bw = lambda g: (g * _sigmoid(x),)
    else:  # tanh
        out = np.tanh(x)
        bw = lambda g: (g * (1 - out * out),)
    return make_result(out, (a,), bw)


def exp(a):
    return elementwise("exp", a)


def log(a):
    return elementwise("log", a)


def sqrt(a):
    return elementwise("sqrt", a)


def silu(a):
    return elementwise("silu", a)


def sigmoid(a):
    return elementwise("sigmoid", a)


def softplus(a):
    return elementwise("softplus", a)


def tanh(a):
    return elementwise("tanh", a)


# ---------------------------------------------------------------------------
# contraction and reduction


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    a = as_tensor(a)
    b = as_tensor(b, a)
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dimensions")
    if x.shape[-1] != y.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {x.shape} @ {y.shape}")
    broadcast_shape(x.shape[:-2], y.shape[:-2])
    out = np.matmul(x, y)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape)
        return ga, gb

    return make_result(out, (a, b), bw)


def _norm_axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(tag: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Reduce ``a`` over ``axes`` with sum, mean or max.

    An empty axis list returns a copy of the input. Max routes its gradient
    to the first maximal element (lowest flat index within each slice).
    """
    a = as_tensor(a)
    if axes is not None and not isinstance(axes, int) and len(axes) == 0:
        return make_result(a.data.copy(), (a,), lambda g: (g,))
    ax = _norm_axes(axes, a.ndim)
    x = a.data
    kshape = tuple(1 if i in ax else n for i, n in enumerate(x.shape))

    if tag == "sum":
        out = x.sum(axis=ax, keepdims=keepdims)
        bw = lambda g: (np.broadcast_to(g.reshape(kshape), x.shape),)
    elif tag == "mean":
        count = int(np.prod([x.shape[i] for i in ax])) if ax else 1
        out = x.mean(axis=ax, keepdims=keepdims)
        bw = lambda g: (np.broadcast_to(g.reshape(kshape) / count, x.shape),)
    elif tag == "max":
        keep = [i for i in range(x.ndim) if i not in ax]
        perm = keep + list(ax)
        moved = np.transpose(x, perm)
        lead = moved.shape[: len(keep)]
        flat = moved.reshape(lead + (-1,))
        idx = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if keepdims:
            out = out.reshape(kshape)

        def bw(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], np.reshape(g, lead)[..., None], axis=-1)
            gm = gflat.reshape(moved.shape)
            return (np.transpose(gm, np.argsort(perm)),)

    else:
        raise ContractError(f"unknown reduction {tag!r}")
    return make_result(np.asarray(out, dtype=x.dtype), (a,), bw)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5,
               weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Normalize to zero mean and unit variance along ``axis``, then scale and shift."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    a = as_tensor(a)
    x = a.data
    axis = axis % x.ndim
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def bw(g):
        mg = g.mean(axis=axis, keepdims=True)
        mgx = (g * xhat).mean(axis=axis, keepdims=True)
        return (rstd * (g - mg - xhat * mgx),)

    out = make_result(xhat.astype(x.dtype, copy=False), (a,), bw)
    if weight is not None or bias is not None:
        shape = [1] * x.ndim
        shape[axis] = x.shape[axis]
        if weight is not None:
            out = out * reshape(weight, tuple(shape))
        if bias is not None:
            out = out + reshape(bias, tuple(shape))
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return make_result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (list, np.ndarray, Tensor)) for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_result(np.array(out, copy=True), (a,), bw)


def flip(a: Tensor, axis: int) -> Tensor:
    return make_result(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis),))


def concat(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    axis = axis % items[0].ndim
    try:
        out = np.concatenate([t.data for t in items], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    splits = np.cumsum([t.shape[axis] for t in items])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tuple(items), bw)


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in items]
    return concat(expanded, axis=axis)


def pad(a: Tensor, widths: Sequence[tuple[int, int]], mode: str = "constant") -> Tensor:
    """Zero or reflect padding; ``widths`` gives (before, after) per axis."""
    a = as_tensor(a)
    if mode == "constant":
        out = np.pad(a.data, widths)
        sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
        return make_result(out, (a,), lambda g: (g[sl],))
    if mode != "reflect":
        raise ContractError(f"unknown pad mode {mode!r}")
    out = a
    for axis, (lo, hi) in enumerate(widths):
        if lo == 0 and hi == 0:
            continue
        n = out.shape[axis]
        if lo >= n or hi >= n:
            raise DimensionError(f"reflect pad ({lo}, {hi}) too wide for axis of size {n}")
        parts = []
        if lo:
            parts.append(flip(_slice_axis(out, axis, 1, lo + 1), axis))
        parts.append(out)
        if hi:
            parts.append(flip(_slice_axis(out, axis, n - 1 - hi, n - 1), axis))
        out = concat(parts, axis)
    return out


def _slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return getitem(a, tuple(idx))


def frame(a: Tensor, size: int, hop: int) -> Tensor:
    """Split the last axis into overlapping frames ``[..., n_frames, size]``.

    Requires ``size % hop == 0``; the adjoint is :func:`overlap_add`.
    """
    if size % hop:
        raise ContractError("frame size must be a multiple of hop")
    x = a.data
    n = x.shape[-1]
    if n < size:
        raise DimensionError("signal shorter than one frame")
    n_frames = 1 + (n - size) // hop
    view = np.lib.stride_tricks.sliding_window_view(x, size, axis=-1)[..., ::hop, :]
    out = np.ascontiguousarray(view[..., :n_frames, :])

    def bw(g):
        return (_ola(g, hop, n),)

    return make_result(out, (a,), bw)


def _ola(frames: np.ndarray, hop: int, length: int) -> np.ndarray:
    *lead, n_frames, size = frames.shape
    r = size // hop
    blocks = frames.reshape(*lead, n_frames, r, hop)
    total = n_frames + r - 1
    acc = np.zeros((*lead, total, hop), dtype=frames.dtype)
    for k in range(r):
        acc[..., k:k + n_frames, :] += blocks[..., :, k, :]
    flat = acc.reshape(*lead, total * hop)
    if flat.shape[-1] >= length:
        return np.ascontiguousarray(flat[..., :length])
    return np.concatenate([flat, np.zeros((*lead, length - flat.shape[-1]), flat.dtype)], axis=-1)


def overlap_add(frames: Tensor, hop: int, length: int) -> Tensor:
    """Sum frames ``[..., n_frames, size]`` at stride ``hop`` into ``length`` samples."""
    size = frames.shape[-1]
    if size % hop:
        raise ContractError("frame size must be a multiple of hop")
    n_frames = frames.shape[-2]
    out = _ola(frames.data, hop, length)

    def bw(g):
        need = (n_frames - 1) * hop + size
        if g.shape[-1] < need:
            g = np.concatenate([g, np.zeros(g.shape[:-1] + (need - g.shape[-1],), g.dtype)], -1)
        view = np.lib.stride_tricks.sliding_window_view(g, size, axis=-1)[..., ::hop, :]
        return (np.ascontiguousarray(view[..., :n_frames, :]),)

    return make_result(out, (frames,), bw)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every reachable leaf that requires grad.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError("backward() without an explicit gradient needs a scalar loss")
        grad = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tol]

    @property
    def ok(self) -> bool:
        return not self.failed

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], tol: float = 1e-4,
                    eps: float = 1e-5, names: Sequence[str] | None = None,
                    max_entries: int | None = None, rng=None) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    The error for one parameter is ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max-abs values, so exact zeros on both sides
    count as agreement. ``max_entries`` samples a subset of coordinates per
    parameter for large tensors.
    """
    names = list(names) if names is not None else [p.name or f"p{i}" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(tol=tol)
    for name, p, ga in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.zeros(len(idxs))
        for j, i in enumerate(idxs):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            num[j] = (fp - fm) / (2 * eps)
        an = ga.reshape(-1)[idxs].astype(np.float64)
        scale = max(np.max(np.abs(num), initial=0.0), np.max(np.abs(an), initial=0.0))
        diff = np.max(np.abs(an - num), initial=0.0)
        report.errors[name] = 0.0 if scale == 0 else float(diff / scale)
    for p in params:
        p.grad = None
    return report


# ---------------------------------------------------------------------------
# binary snapshot format

MAGIC = b"SBMT"
SNAPSHOT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def to_bytes(t) -> bytes:
    """Serialize: magic, version u32, dtype tag u32, rank u32, dims u64, raw LE data."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    tag = _DTYPE_TAGS[arr.dtype]
    head = MAGIC + struct.pack("<III", SNAPSHOT_VERSION, tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def from_bytes(buf: bytes) -> Tensor:
    if buf[:4] != MAGIC:
        raise ValueError("not a tensor snapshot (bad magic)")
    version, tag, rank = struct.unpack_from("<III", buf, 4)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 16)
    off = 16 + 8 * rank
    dtype = _TAG_DTYPES[tag].newbyteorder("<")
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - off != count * dtype.itemsize:
        raise ValueError("snapshot payload size does not match header")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims)
    return Tensor(arr.astype(_TAG_DTYPES[tag]))


def save_tensor(t, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
