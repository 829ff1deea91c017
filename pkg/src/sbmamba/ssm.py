"""Selective state-space scan: discretization, sequential and parallel scans,
the time-invariant convolution kernel, and a differentiable scan op.

Shapes follow one convention throughout::

    u, delta : [batch, L, d_inner]
    b, c_out : [batch, L, d_state]
    a        : [d_state] or [d_inner, d_state]   (continuous-time, negative)
    d_skip   : [d_inner]
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .tensor import ContractError, DimensionError, Tensor, make_result, unbroadcast

EULER_THRESHOLD = 1e-6
_CHUNK_ELEMENTS = 1 << 16


@dataclass
class SSMParams:
    a: np.ndarray
    delta: np.ndarray
    b: np.ndarray
    c_out: np.ndarray
    d_skip: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.delta <= 0):
            raise ContractError("delta must be positive")
        if np.any(self.a >= 0):
            raise ContractError("state matrix entries must be negative")

    def a_matrix(self, d_inner: int) -> np.ndarray:
        return _a_matrix(self.a, d_inner)

    def skip(self, d_inner: int, dtype) -> np.ndarray:
        if self.d_skip is None:
            return np.zeros(d_inner, dtype=dtype)
        return np.asarray(self.d_skip, dtype=dtype)


def _a_matrix(a, d_inner):
    a = np.asarray(a)
    if a.ndim == 1:
        return np.ascontiguousarray(np.broadcast_to(a, (d_inner, a.shape[0])))
    return np.ascontiguousarray(a)


@dataclass(frozen=True)
class ScanElement:
    """Affine map h -> gain * h + offset; composition is associative."""

    gain: float
    offset: float

    def then(self, later: "ScanElement") -> "ScanElement":
        """Apply ``self`` first, then ``later``."""
        return ScanElement(later.gain * self.gain, later.gain * self.offset + later.offset)

    def __call__(self, h):
        return self.gain * h + self.offset


def _combine(g1, o1, g2, o2):
    return g2 * g1, g2 * o1 + o2


def discretize(a, delta, b):
    """Zero-order hold on a diagonal state matrix.

    Returns ``a_bar = exp(delta * a)`` and ``b_bar = (a_bar - 1) / a * b``
    with shapes ``[..., L, d_inner, d_state]``. Where ``|delta * a|`` is below
    1e-6 the Euler form ``delta * b`` is used instead.
    """
    a = np.asarray(a)
    delta = np.asarray(delta)
    b = np.asarray(b)
    d_inner = delta.shape[-1]
    A = _a_matrix(a, d_inner)
    da = delta[..., :, None] * A
    a_bar = np.exp(da)
    with np.errstate(divide="ignore", invalid="ignore"):
        zoh = (a_bar - 1.0) / A
    coef = np.where(np.abs(da) < EULER_THRESHOLD, delta[..., :, None], zoh)
    b_bar = coef * b[..., None, :]
    return a_bar, b_bar


# ---------------------------------------------------------------------------
# compiled kernels (one lane = one (batch, channel) pair)


def _zoh(delta, A, dtype, out=None):
    """Per-element ``a_bar`` and ``b_bar / b`` coefficients, ``[S, L, D, N]``."""
    shape = delta.shape + A.shape[-1:]
    if out is None:
        out = (np.empty(shape, dtype), np.empty(shape, dtype))
    a_bar, coef = (o[: shape[0]] for o in out)
    np.multiply(delta[..., :, None], A, out=coef)
    small = np.abs(coef) < EULER_THRESHOLD
    np.exp(coef, out=a_bar)
    np.subtract(a_bar, 1.0, out=coef)
    np.divide(coef, A, out=coef)
    if small.any():
        coef[small] = np.broadcast_to(delta[..., :, None], shape)[small]
    return a_bar, coef


@numba.njit(cache=True, fastmath=True)
def _scan_fwd_kernel(u, a_bar, coef, B, C, D, y):
    S, L, Dn = u.shape
    N = B.shape[2]
    h = np.empty((Dn, N), dtype=u.dtype)
    for s in range(S):
        h[:, :] = 0.0
        for t in range(L):
            for d in range(Dn):
                ut = u[s, t, d]
                acc = D[d] * ut
                for n in range(N):
                    hn = a_bar[s, t, d, n] * h[d, n] + coef[s, t, d, n] * B[s, t, n] * ut
                    h[d, n] = hn
                    acc += C[s, t, n] * hn
                y[s, t, d] = acc


@numba.njit(cache=True, fastmath=True)
def _scan_bwd_kernel(u, delta, A, a_bar, coef, B, C, D, gy, gu, gdelta, gA, gB, gC, gD):
    S, L, Dn = u.shape
    N = B.shape[2]
    hist = np.empty((L + 1, Dn, N), dtype=u.dtype)
    gh = np.empty((Dn, N), dtype=u.dtype)
    for s in range(S):
        hist[0] = 0.0
        for t in range(L):
            for d in range(Dn):
                ut = u[s, t, d]
                for n in range(N):
                    hist[t + 1, d, n] = a_bar[s, t, d, n] * hist[t, d, n] + coef[s, t, d, n] * B[s, t, n] * ut
        gh[:, :] = 0.0
        for t in range(L - 1, -1, -1):
            for d in range(Dn):
                ut = u[s, t, d]
                dt = delta[s, t, d]
                g = gy[s, t, d]
                gD[d] += g * ut
                gu_acc = g * D[d]
                gdt = 0.0
                for n in range(N):
                    gC[s, t, n] += g * hist[t + 1, d, n]
                    ghn = gh[d, n] + g * C[s, t, n]
                    bn = B[s, t, n]
                    an = A[d, n]
                    ab = a_bar[s, t, d, n]
                    cf = coef[s, t, d, n]
                    # h_t = a_bar * h_{t-1} + coef * b * u_t
                    g_ab = ghn * hist[t, d, n]
                    g_cf = ghn * bn * ut
                    gB[s, t, n] += ghn * cf * ut
                    gu_acc += ghn * cf * bn
                    # a_bar = exp(dt*a); coef = (a_bar - 1)/a, or dt (Euler)
                    gdt += g_ab * ab * an
                    gA[d, n] += g_ab * ab * dt
                    if abs(dt * an) < 1e-6:
                        gdt += g_cf
                    else:
                        gdt += g_cf * ab
                        gA[d, n] += g_cf * (dt * an * ab - (ab - 1.0)) / (an * an)
                    gh[d, n] = ghn * ab
                gu[s, t, d] = gu_acc
                gdelta[s, t, d] = gdt


def _check_shapes(u, delta, b, c):
    if u.ndim != 3 or delta.shape != u.shape:
        raise DimensionError(f"u and delta must share shape [batch, L, d_inner], got {u.shape}, {delta.shape}")
    if b.shape[:2] != u.shape[:2] or c.shape != b.shape:
        raise DimensionError(f"b, c_out must be [batch, L, d_state], got {b.shape}, {c.shape}")


def scan_sequential(u, p: SSMParams) -> np.ndarray:
    """Run the recurrence strictly left to right from a zero state.

    ``h_t = a_bar_t * h_{t-1} + b_bar_t * u_t``, ``y_t = <c_t, h_t> + d_skip * u_t``.
    """
    u = np.asarray(u)
    _check_shapes(u, p.delta, p.b, p.c_out)
    dtype = u.dtype
    Dn = u.shape[-1]
    y = np.empty_like(u)
    if u.shape[1] == 0:
        return y
    a_bar, coef = _zoh(np.asarray(p.delta, dtype), p.a_matrix(Dn).astype(dtype), dtype)
    _scan_fwd_kernel(u, a_bar, coef, np.asarray(p.b, dtype), np.asarray(p.c_out, dtype),
                     p.skip(Dn, dtype), y)
    return y


def hidden_states(u, p: SSMParams) -> np.ndarray:
    """All hidden states ``[batch, L, d_inner, d_state]`` (vectorized over lanes)."""
    u = np.asarray(u)
    a_bar, b_bar = discretize(p.a, p.delta, p.b)
    h = np.zeros(a_bar.shape[:1] + a_bar.shape[2:], dtype=u.dtype)
    out = np.empty(a_bar.shape, dtype=u.dtype)
    for t in range(u.shape[1]):
        h = a_bar[:, t] * h + b_bar[:, t] * u[:, t, :, None]
        out[:, t] = h
    return out


def scan_parallel(u, p: SSMParams) -> np.ndarray:
    """Work-efficient (Blelloch) associative scan over affine scan elements.

    Same contract as :func:`scan_sequential`. The sequence is padded with
    identity elements to a power of two; every level is vectorized over lanes.
    """
    u = np.asarray(u)
    _check_shapes(u, p.delta, p.b, p.c_out)
    batch, L, Dn = u.shape
    if L == 0:
        return np.empty_like(u)
    a_bar, b_bar = discretize(p.a, p.delta, p.b)
    gain = a_bar.astype(u.dtype)
    offset = (b_bar * u[..., None]).astype(u.dtype)
    size = 1 << (L - 1).bit_length()
    if size != L:
        padshape = (batch, size - L) + gain.shape[2:]
        gain = np.concatenate([gain, np.ones(padshape, gain.dtype)], axis=1)
        offset = np.concatenate([offset, np.zeros(padshape, offset.dtype)], axis=1)
    elem_g, elem_o = gain.copy(), offset.copy()

    # up-sweep: each right child becomes the composition of its subtree
    stride = 1
    while stride < size:
        right = np.arange(2 * stride - 1, size, 2 * stride)
        left = right - stride
        gain[:, right], offset[:, right] = _combine(gain[:, left], offset[:, left],
                                                    gain[:, right], offset[:, right])
        stride *= 2
    # down-sweep to the exclusive prefix
    gain[:, size - 1] = 1.0
    offset[:, size - 1] = 0.0
    stride = size // 2
    while stride >= 1:
        right = np.arange(2 * stride - 1, size, 2 * stride)
        left = right - stride
        lg, lo = gain[:, left].copy(), offset[:, left].copy()
        gain[:, left], offset[:, left] = gain[:, right], offset[:, right]
        gain[:, right], offset[:, right] = _combine(gain[:, right], offset[:, right], lg, lo)
        stride //= 2
    _, h = _combine(gain, offset, elem_g, elem_o)
    h = h[:, :L]
    y = np.einsum("bldn,bln->bld", h, np.asarray(p.c_out, u.dtype))
    return (y + p.skip(Dn, u.dtype) * u).astype(u.dtype)


def ssm_kernel(a_bar, b_bar, c_out, L: int) -> np.ndarray:
    """Convolution kernel ``K[j] = <c, a_bar**j * b_bar>`` of a time-invariant SSM.

    Each parameter is ``[d_state]``; a ``[L, d_state]`` array is accepted only
    when every row is identical.
    """
    vecs = []
    for name, v in (("a_bar", a_bar), ("b_bar", b_bar), ("c_out", c_out)):
        v = np.asarray(v)
        if v.ndim == 2:
            if not np.all(v == v[:1]):
                raise ContractError(f"{name} varies over time; kernel form needs time-invariant parameters")
            v = v[0]
        elif v.ndim != 1:
            raise DimensionError(f"{name} must be [d_state]")
        vecs.append(v)
    a_bar, b_bar, c_out = vecs
    powers = a_bar[None, :] ** np.arange(L)[:, None]
    return powers @ (c_out * b_bar)


def causal_conv(u, kernel) -> np.ndarray:
    """``y[t] = sum_{j<=t} kernel[j] * u[t-j]`` along axis 0."""
    u = np.asarray(u)
    L = u.shape[0]
    y = np.zeros_like(u, dtype=np.result_type(u, kernel))
    for j in range(L):
        y[j:] += kernel[j] * u[: L - j]
    return y


# ---------------------------------------------------------------------------
# differentiable op


def selective_scan(u: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor,
                   d_skip: Tensor | None = None, reverse: bool = False,
                   impl: str = "sequential") -> Tensor:
    """Differentiable selective scan on Tensors.

    ``reverse=True`` runs the recurrence from the end of the sequence. The
    forward pass uses ``impl`` (sequential or parallel); the backward pass
    always replays the sequential recurrence.
    """
    _check_shapes(u.data, delta.data, b.data, c.data)
    dtype = u.dtype
    Dn = u.shape[-1]
    a_shape = a.shape
    A = _a_matrix(a.data, Dn).astype(dtype)
    D = np.zeros(Dn, dtype) if d_skip is None else d_skip.data.astype(dtype)

    def prep(x):
        x = np.asarray(x, dtype)
        return np.ascontiguousarray(np.flip(x, 1)) if reverse else np.ascontiguousarray(x)

    uu, dd, bb, cc = prep(u.data), prep(delta.data), prep(b.data), prep(c.data)
    if impl == "sequential":
        y = _fwd_chunked(uu, dd, A, bb, cc, D)
    elif impl == "parallel":
        y = _parallel_raw(uu, dd, A, bb, cc, D)
    else:
        raise ContractError(f"unknown scan implementation {impl!r}")
    out = np.flip(y, 1).copy() if reverse else y

    def bw(g):
        gu, gdelta, gA, gB, gC, gD = _bwd_chunked(uu, dd, A, bb, cc, D, prep(g))
        post = (lambda x: np.flip(x, 1).copy()) if reverse else (lambda x: x)
        ga = unbroadcast(gA, a_shape) if len(a_shape) == 1 else gA
        grads = [post(gu), post(gdelta), ga, post(gB), post(gC)]
        if d_skip is not None:
            grads.append(gD)
        return tuple(grads)

    parents = (u, delta, a, b, c) + ((d_skip,) if d_skip is not None else ())
    return make_result(out, parents, bw)


def _chunks(u, A):
    per_seq = max(1, u.shape[1] * A.size)
    step = max(1, _CHUNK_ELEMENTS // per_seq)
    for lo in range(0, u.shape[0], step):
        yield slice(lo, lo + step)


def _fwd_chunked(u, delta, A, B, C, D):
    y = np.empty_like(u)
    if u.shape[1] == 0:
        return y
    bufs = None
    for sl in _chunks(u, A):
        a_bar, coef = _zoh(delta[sl], A, u.dtype, bufs)
        bufs = bufs or (a_bar, coef)
        _scan_fwd_kernel(u[sl], a_bar, coef, B[sl], C[sl], D, y[sl])
    return y


def _bwd_chunked(u, delta, A, B, C, D, gy):
    gu = np.zeros_like(u)
    gdelta = np.zeros_like(delta)
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    gD = np.zeros_like(D)
    if u.shape[1] == 0:
        return gu, gdelta, gA, gB, gC, gD
    bufs = None
    for sl in _chunks(u, A):
        a_bar, coef = _zoh(delta[sl], A, u.dtype, bufs)
        bufs = bufs or (a_bar, coef)
        _scan_bwd_kernel(u[sl], delta[sl], A, a_bar, coef, B[sl], C[sl], D, gy[sl],
                         gu[sl], gdelta[sl], gA, gB[sl], gC[sl], gD)
    return gu, gdelta, gA, gB, gC, gD


def _parallel_raw(u, delta, A, B, C, D):
    p = SSMParams.__new__(SSMParams)
    p.a, p.delta, p.b, p.c_out, p.d_skip = A, delta, B, C, D
    return scan_parallel(u, p)
