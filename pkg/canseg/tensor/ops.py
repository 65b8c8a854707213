"""
Differentiable NCHW primitives.

Each op validates its operands, computes the forward value with numpy,
reports its FLOP cost to an active CostTracer and registers a backward rule.
Convolution is cross-correlation with zero padding; `conv2d` gathers
sliding windows (im2col style) for dense kernels and accumulates per-tap
products for depthwise kernels.
"""

from contextlib import contextmanager
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from canseg.core.errors import ConfigError, NumericError, PrecisionError, ShapeError
from canseg.tensor.tensor import Tensor, trace_cost

Pair = Union[int, Tuple[int, int]]
ACTIVATIONS = ("relu", "sigmoid", "hard_sigmoid", "hard_swish")

_corrupted: Dict[str, float] = {}


@contextmanager
def corrupt_backward(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the gradients produced by `op`'s backward rule (negative-control hook)."""
    previous = _corrupted.get(op)
    _corrupted[op] = factor
    try:
        yield
    finally:
        if previous is None:
            _corrupted.pop(op, None)
        else:
            _corrupted[op] = previous


def _emit(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    def rule(g: np.ndarray):
        grads = backward(g)
        factor = _corrupted.get(op)
        if factor is not None:
            grads = [None if x is None else x * factor for x in grads]
        return grads

    return Tensor.from_op(op, data, parents, rule)


def _pair(v: Pair) -> Tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def _same_precision(*tensors: Tensor) -> np.dtype:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) != 1:
        raise PrecisionError(f"mixed precisions in one op: {sorted(str(d) for d in dtypes)}")
    return dtypes.pop()


def _as_tensor(v, like: Tensor) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return Tensor(np.full((1, 1, 1, 1), v, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_precision(a, b)
    out = a.data + b.data
    trace_cost("add", out.size)
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_precision(a, b)
    out = a.data - b.data
    trace_cost("add", out.size)
    return _emit("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_precision(a, b)
    out = a.data * b.data
    trace_cost("mul", out.size)
    return _emit(
        "mul", out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    )


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * a.data.dtype.type(s)
    trace_cost("mul", out.size)
    return _emit("scale", out, (a,), lambda g: (g * a.data.dtype.type(s),))


def sum(a: Tensor) -> Tensor:
    out = a.data.sum(dtype=a.data.dtype).reshape(1, 1, 1, 1)
    return _emit("sum", out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = (a.data.sum(dtype=a.data.dtype) / n).reshape(1, 1, 1, 1)
    return _emit("mean", out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: Tuple[int, int, int, int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes: Tuple[int, int, int, int]) -> Tensor:
    if sorted(axes) != [0, 1, 2, 3]:
        raise ShapeError(f"invalid permutation {axes}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _emit("permute", np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    _same_precision(*tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if any(t.shape[i] != ref[i] for i in range(4) if i != axis):
            raise ShapeError(f"concat along axis {axis}: {t.shape} does not match {ref}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        index = [slice(None)] * 4
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return _emit("concat", out, tuple(tensors), backward)


def gather_channels(a: Tensor, index: Sequence[int]) -> Tensor:
    """out[:, k] = a[:, index[k]]; channels may repeat."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= a.shape[1]:
        raise ShapeError(f"channel index out of range for {a.shape[1]} channels")

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None), idx), g)
        return (ga,)

    return _emit("gather_channels", a.data[:, idx], (a,), backward)


# ---------------------------------------------------------------------------
# Convolution and products
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: Pair = 1,
    padding: Pair = 0,
    groups: int = 1,
) -> Tensor:
    N, C, H, W = x.shape
    Cout, Cg, kh, kw = weight.shape
    if groups < 1 or C % groups:
        raise ShapeError(f"groups={groups} does not divide input channels {C}")
    if Cg != C // groups or Cout % groups:
        raise ShapeError(f"weight {weight.shape} incompatible with input {x.shape} at groups={groups}")
    if bias is not None and bias.shape != (1, Cout, 1, 1):
        raise ShapeError(f"bias {bias.shape} must be (1, {Cout}, 1, 1)")
    operands = (x, weight) if bias is None else (x, weight, bias)
    _same_precision(*operands)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {H}x{W} with padding {ph},{pw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    w = weight.data
    depthwise = Cg == 1 and Cout == C == groups
    G, Og = groups, Cout // groups

    def tap(arr, i, j):
        return arr[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw]

    windows = None
    if depthwise:
        out = np.zeros((N, Cout, Ho, Wo), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                out += tap(xp, i, j) * w[:, 0, i, j][None, :, None, None]
    elif kh == kw == 1 and groups == 1:
        xs = tap(xp, 0, 0)
        out = np.tensordot(xs, w[:, :, 0, 0], axes=([1], [1])).transpose(0, 3, 1, 2)
    else:
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
        if groups == 1:
            out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        else:
            wg = windows.reshape(N, G, Cg, Ho, Wo, kh, kw)
            out = np.einsum("ngcyxij,gocij->ngoyx", wg, w.reshape(G, Og, Cg, kh, kw), optimize=True)
            out = out.reshape(N, Cout, Ho, Wo)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data
    trace_cost("conv2d", N * kh * kw * Cg * Cout * Ho * Wo)

    def backward(g):
        gxp = np.zeros_like(xp)
        if depthwise:
            gw = np.zeros_like(w)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (g * tap(xp, i, j)).sum(axis=(0, 2, 3))
                    tap(gxp, i, j)[...] += g * w[:, 0, i, j][None, :, None, None]
        elif groups == 1:
            if windows is None:
                gw = np.tensordot(g, tap(xp, 0, 0), axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            else:
                gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
            for i in range(kh):
                for j in range(kw):
                    tap(gxp, i, j)[...] += np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        else:
            gg = g.reshape(N, G, Og, Ho, Wo)
            wg = windows.reshape(N, G, Cg, Ho, Wo, kh, kw)
            w5 = w.reshape(G, Og, Cg, kh, kw)
            gw = np.einsum("ngoyx,ngcyxij->gocij", gg, wg, optimize=True).reshape(w.shape)
            for i in range(kh):
                for j in range(kw):
                    part = np.einsum("ngoyx,goc->ngcyx", gg, w5[:, :, :, i, j], optimize=True)
                    tap(gxp, i, j)[...] += part.reshape(N, C, Ho, Wo)
        gx = gxp[:, :, ph:ph + H, pw:pw + W] if ph or pw else gxp
        grads = [np.ascontiguousarray(gx), gw.astype(w.dtype, copy=False)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(1, Cout, 1, 1))
        return grads

    return _emit("conv2d", out, operands, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over the last two axes: (N, G, P, Q) @ (N, G, Q, R)."""
    if a.shape[:2] != b.shape[:2] or a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul operands {a.shape} and {b.shape} do not align")
    _same_precision(a, b)
    N, G, P, Q = a.shape
    R = b.shape[3]
    out = np.matmul(a.data, b.data)
    trace_cost("matmul", N * G * P * Q * R)

    def backward(g):
        return (np.matmul(g, b.data.swapaxes(-1, -2)), np.matmul(a.data.swapaxes(-1, -2), g))

    return _emit("matmul", out, (a, b), backward)


def softmax(x: Tensor) -> Tensor:
    """Normalise along the last axis, max-subtracted for stability."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains NaN or Inf")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    trace_cost("softmax", y.size)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), backward)


# ---------------------------------------------------------------------------
# Pooling and resampling
# ---------------------------------------------------------------------------


def _bin_edges(extent: int, bins: int):
    lo = [(i * extent) // bins for i in range(bins)]
    hi = [-((-(i + 1) * extent) // bins) for i in range(bins)]
    return lo, hi


def adaptive_max_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bin i covers [floor(i*H/out), ceil((i+1)*H/out)); equal extents give the identity."""
    N, C, H, W = x.shape
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"adaptive pooling to {out_h}x{out_w}: extents must be positive")
    if out_h > H or out_w > W:
        raise ShapeError(f"adaptive pooling to {out_h}x{out_w} exceeds input {H}x{W}")
    rlo, rhi = _bin_edges(H, out_h)
    clo, chi = _bin_edges(W, out_w)
    out = np.empty((N, C, out_h, out_w), dtype=x.data.dtype)
    argmax = np.empty((N, C, out_h, out_w), dtype=np.int64)
    cols = np.arange(W)
    for i in range(out_h):
        for j in range(out_w):
            window = x.data[:, :, rlo[i]:rhi[i], clo[j]:chi[j]].reshape(N, C, -1)
            k = window.argmax(axis=-1)
            out[:, :, i, j] = np.take_along_axis(window, k[..., None], axis=-1)[..., 0]
            ww = chi[j] - clo[j]
            argmax[:, :, i, j] = (rlo[i] + k // ww) * W + cols[clo[j]] + k % ww
    trace_cost("max_pool", x.size)

    def backward(g):
        gx = np.zeros((N, C, H * W), dtype=g.dtype)
        n_idx, c_idx = np.meshgrid(np.arange(N), np.arange(C), indexing="ij")
        for i in range(out_h):
            for j in range(out_w):
                np.add.at(gx, (n_idx, c_idx, argmax[:, :, i, j]), g[:, :, i, j])
        return (gx.reshape(N, C, H, W),)

    return _emit("adaptive_max_pool2d", out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    trace_cost("avg_pool", x.size)
    return _emit("global_avg_pool", out, (x,), lambda g: (np.broadcast_to(g / (H * W), x.shape).copy(),))


def interpolation_matrix(out_size: int, in_size: int, align_corners: bool, dtype=np.float64) -> np.ndarray:
    """Row k holds the linear weights that produce output sample k from the input axis."""
    m = np.zeros((out_size, in_size), dtype=np.float64)
    for k in range(out_size):
        if align_corners:
            src = k * (in_size - 1) / (out_size - 1) if out_size > 1 else 0.0
        else:
            src = max((k + 0.5) * in_size / out_size - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[k, i0] += 1.0 - frac
        m[k, i1] += frac
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    N, C, H, W = x.shape
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"resize to {out_h}x{out_w}: extents must be positive")
    ry = interpolation_matrix(out_h, H, align_corners, x.data.dtype)
    rx = interpolation_matrix(out_w, W, align_corners, x.data.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    trace_cost("resize", out.size)

    def backward(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _emit("bilinear_resize", out, (x,), backward)


# ---------------------------------------------------------------------------
# Normalisation and activations
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    eps: float = 1e-5,
    training: bool = False,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalisation; training mode also updates the running statistics in place."""
    C = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (1, C, 1, 1):
            raise ShapeError(f"batch_norm {name} has shape {t.shape}, expected (1, {C}, 1, 1)")
    if eps < 0 or (training and eps == 0):
        raise ConfigError(f"batch_norm eps must be positive, got {eps}", path="eps")
    _same_precision(x, gamma, beta)
    axes = (0, 2, 3)
    if training:
        m = x.size // C
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        mu = running_mean.data.astype(x.data.dtype)
        var = running_var.data.astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data
    trace_cost("batch_norm", out.size)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes, keepdims=True)
        gbeta = g.sum(axis=axes, keepdims=True)
        dxhat = g * gamma.data
        if training:
            m = x.size // C
            gx = inv_std / m * (
                m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = dxhat * inv_std
        return (gx, ggamma, gbeta)

    return _emit("batch_norm", out, (x, gamma, beta), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def activation(x: Tensor, kind: str) -> Tensor:
    v = x.data
    one_sixth = v.dtype.type(1.0 / 6.0)
    if kind == "relu":
        out = np.maximum(v, 0)
        deriv = lambda: (v > 0).astype(v.dtype)
    elif kind == "sigmoid":
        out = _sigmoid(v)
        deriv = lambda: out * (1 - out)
    elif kind == "hard_sigmoid":
        out = np.clip((v + 3) * one_sixth, 0, 1)
        deriv = lambda: ((v > -3) & (v < 3)).astype(v.dtype) * one_sixth
    elif kind == "hard_swish":
        out = v * np.clip((v + 3) * one_sixth, 0, 1)
        deriv = lambda: np.where(v <= -3, 0, np.where(v >= 3, 1, (2 * v + 3) * one_sixth)).astype(v.dtype)
    else:
        raise ConfigError(f"unknown activation '{kind}', expected one of {ACTIVATIONS}", path="activation")
    out = out.astype(v.dtype, copy=False)
    trace_cost(kind, out.size)
    return _emit(kind, out, (x,), lambda g: (g * deriv(),))


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def hard_sigmoid(x: Tensor) -> Tensor:
    return activation(x, "hard_sigmoid")


def hard_swish(x: Tensor) -> Tensor:
    return activation(x, "hard_swish")


# ---------------------------------------------------------------------------
# Loss primitive
# ---------------------------------------------------------------------------


def pixel_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Per-pixel softmax cross entropy over the channel axis, shape (N, 1, H, W); ignored pixels are 0."""
    N, K, H, W = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (N, H, W):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_index
    if np.any(valid & ((labels < 0) | (labels >= K))):
        raise ShapeError(f"labels must lie in [0, {K}) or equal ignore_index {ignore_index}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("logits contain NaN or Inf")
    target = np.where(valid, labels, 0).astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_z
    picked = np.take_along_axis(log_p, target[:, None], axis=1)
    out = np.where(valid[:, None], -picked, 0).astype(logits.data.dtype)

    def backward(g):
        grad = np.exp(log_p)
        np.put_along_axis(grad, target[:, None], np.take_along_axis(grad, target[:, None], axis=1) - 1, axis=1)
        return (grad * g * valid[:, None],)

    return _emit("pixel_cross_entropy", out, (logits,), backward)
