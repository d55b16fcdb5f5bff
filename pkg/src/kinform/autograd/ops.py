"""Differentiable kernels.

Layout conventions are channels-last throughout: images are ``(N, H, W, C)``,
length-indexed maps are ``(N, L, C)``. Broadcasting is limited to
scalar-times-tensor plus the explicit per-axis scaling ops below.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.polynomial import chebyshev

from .tensor import NumericError, ShapeError, Tensor, active_tape

PROB_CLAMP = 1e-12


def _finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in output")


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _finite(data, op)
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- element-wise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit(a.data + c, (a,), lambda g: (g,), "add_scalar")


def reciprocal(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = 1.0 / a.data
    return _emit(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (x,), back, "log_softmax")


# -- shape plumbing ---------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if len(t.shape) != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _emit(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back, "concat")


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` along the first axis."""
    idx = np.asarray(index, dtype=np.intp)
    src = x.shape

    def back(g):
        gx = np.zeros(src, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(x.data[idx], (x,), back, "take_rows")


def tensor_sum(x: Tensor) -> Tensor:
    src = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.full(src, g, dtype=x.data.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    src, n = x.shape, x.size
    return _emit(np.asarray(x.data.mean()), (x,), lambda g: (np.full(src, g / n, dtype=x.data.dtype),), "mean")


def weighted_sum(x: Tensor, weights) -> Tensor:
    """``sum(weights * x)`` with constant weights of x's shape."""
    w = np.asarray(weights, dtype=x.data.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs input {x.shape}")
    return _emit(np.asarray((x.data * w).sum()), (x,), lambda g: (g * w,), "weighted_sum")


# -- linear maps ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading batch axes."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T
        a2 = ad.reshape(-1, ad.shape[-1]) if ad.ndim > 1 else ad[None, :]
        g2 = g.reshape(-1, g.shape[-1]) if g.ndim > 1 else g[None, :]
        return ga, a2.T @ g2

    return _emit(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected layer: ``x (N, in) @ weight (in, out) + bias (out,)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def back(g):
        grads = (g @ wd.T, xd.T @ g)
        return grads + ((g.sum(axis=0),) if bias is not None else ())

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, back, "linear")


def conv1d_k1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Kernel-size-1 convolution along the length axis: pure channel mixing.

    ``x`` is ``(N, L, Cin)``, ``weight`` is ``(Cin, Cout)``; every position is
    mapped by the same matrix, so the length ``L`` is preserved.
    """
    if x.ndim != 3 or weight.ndim != 2 or x.shape[2] != weight.shape[0]:
        raise ShapeError(f"conv1d_k1: input {x.shape} does not fit kernel {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"conv1d_k1: bias {bias.shape} does not fit kernel {weight.shape}")
    n, length, cin = x.shape
    xd, wd = x.data, weight.data
    flat = xd.reshape(n * length, cin)
    out = flat @ wd
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(n * length, -1)
        grads = ((g2 @ wd.T).reshape(n, length, cin), flat.T @ g2)
        return grads + ((g2.sum(axis=0),) if bias is not None else ())

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out.reshape(n, length, -1), inputs, back, "conv1d_k1")


def conv2d_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D convolution on ``(N, H, W, Cin)`` with a ``(kh, kw, Cin, Cout)`` kernel."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} does not fit kernel {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[3],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not fit kernel {weight.shape}")
    n, h, w, cin = x.shape
    kh, kw, _, cout = weight.shape
    ho = conv2d_output_size(h, kh, stride, padding)
    wo = conv2d_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # win: (N, Ho, Wo, Cin, kh, kw)
    cols = np.ascontiguousarray(win).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        gcols = (g2 @ wmat.T).reshape(n, ho, wo, cin, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[..., i, j]
        gx = gxp[:, p:p + h, p:p + w, :] if p else gxp
        grads = (np.ascontiguousarray(gx), np.ascontiguousarray(gw))
        return grads + ((g2.sum(axis=0),) if bias is not None else ())

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out.reshape(n, ho, wo, cout), inputs, back, "conv2d")


def avg_pool_length(x: Tensor) -> Tensor:
    """Global average over the length axis: ``(N, L, C) -> (N, C)``."""
    if x.ndim != 3:
        raise ShapeError(f"avg_pool_length: expected (N, L, C), got {x.shape}")
    n, length, c = x.shape

    def back(g):
        return (np.broadcast_to(g[:, None, :] / length, (n, length, c)).copy(),)

    return _emit(x.data.mean(axis=1), (x,), back, "avg_pool_length")


def channel_scale(x: Tensor, w: Tensor) -> Tensor:
    """Element-wise product of each trailing-axis vector of ``x`` with ``w``."""
    if w.ndim != 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"channel_scale: input {x.shape} vs weights {w.shape}")
    xd, wd = x.data, w.data

    def back(g):
        return g * wd, (g * xd).reshape(-1, wd.shape[0]).sum(axis=0)

    return _emit(xd * wd, (x, w), back, "channel_scale")


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row ``i`` of a 2-D ``x`` by ``s[i]``."""
    if x.ndim != 2 or s.shape != (x.shape[0],):
        raise ShapeError(f"row_scale: input {x.shape} vs scales {s.shape}")
    xd, sd = x.data, s.data

    def back(g):
        return g * sd[:, None], (g * xd).sum(axis=1)

    return _emit(xd * sd[:, None], (x, s), back, "row_scale")


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor."""
    if x.ndim != 2:
        raise ShapeError(f"row_norm: expected 2-D input, got {x.shape}")
    xd = x.data
    nrm = np.sqrt((xd * xd).sum(axis=1))
    return _emit(nrm, (x,), lambda g: (xd * (g / nrm)[:, None],), "row_norm")


def normalize_columns(w: Tensor) -> Tensor:
    """Scale each column of a 2-D tensor to unit Euclidean norm."""
    if w.ndim != 2:
        raise ShapeError(f"normalize_columns: expected 2-D input, got {w.shape}")
    nrm = np.sqrt((w.data * w.data).sum(axis=0))
    u = w.data / nrm

    def back(g):
        return ((g - u * (u * g).sum(axis=0)) / nrm,)

    return _emit(u, (w,), back, "normalize_columns")


# -- losses -----------------------------------------------------------------

def _reduce(per: np.ndarray, reduction: str):
    if reduction == "none":
        return per, 1.0
    if reduction == "sum":
        return np.asarray(per.sum()), 1.0
    if reduction == "mean":
        return np.asarray(per.mean()), 1.0 / per.size
    raise ValueError(f"unknown reduction {reduction!r}")


def binary_cross_entropy(p: Tensor, target, reduction: str = "mean") -> Tensor:
    """BCE on probabilities; ``p`` is clamped into ``[1e-12, 1 - 1e-12]``."""
    y = np.asarray(target, dtype=p.data.dtype)
    if y.shape != p.shape:
        raise ShapeError(f"binary_cross_entropy: targets {y.shape} vs scores {p.shape}")
    s = np.clip(p.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per = -(y * np.log(s) + (1.0 - y) * np.log(1.0 - s))
    out, k = _reduce(per, reduction)
    dper = (-y / s + (1.0 - y) / (1.0 - s)) * k

    return _emit(out, (p,), lambda g: (g * dper,), "binary_cross_entropy")


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy for ``(N, K)`` logits and integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (N, K) logits, got {logits.shape}")
    lab = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if lab.shape != (n,):
        raise ShapeError(f"cross_entropy: labels {lab.shape} vs logits {logits.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    per = -logp[rows, lab]
    out, c = _reduce(per, reduction)
    sm = np.exp(logp)
    sm[rows, lab] -= 1.0

    def back(g):
        gg = g[:, None] if reduction == "none" else g
        return (sm * gg * c,)

    return _emit(out, (logits,), back, "cross_entropy")


def margin_psi(cos: Tensor, m: int) -> Tensor:
    """Angular-margin target function of the cosine.

    ``psi(theta) = (-1)^k cos(m theta) - 2k`` for ``theta`` in
    ``[k pi/m, (k+1) pi/m]``; ``cos(m theta)`` is evaluated as the Chebyshev
    polynomial ``T_m(cos theta)`` so the derivative stays finite at the poles.
    """
    c = np.clip(cos.data, -1.0, 1.0)
    theta = np.arccos(c)
    k = np.minimum(np.floor(theta * m / np.pi), m - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    tm = chebyshev.Chebyshev.basis(m)
    out = sign * tm(c) - 2.0 * k
    slope = sign * tm.deriv()(c)
    return _emit(out, (cos,), lambda g: (g * slope,), "margin_psi")
