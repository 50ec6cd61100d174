"""Neural-network operations with hand-written backward rules."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .tensor import ShapeError, Tensor, as_tensor, make_result, unbroadcast

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# --------------------------------------------------------------- activations
def relu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    return make_result(np.where(pos, xd, 0).astype(xd.dtype, copy=False), (x,),
                       lambda g: (g * pos,))


def _sigmoid_grad(out: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * out * (1.0 - out)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return make_result(out, (x,), lambda g: (_sigmoid_grad(out, g),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return make_result((xd * cdf).astype(xd.dtype, copy=False), (x,), bw)


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"relu": relu, "sigmoid": sigmoid, "gelu": gelu}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ------------------------------------------------------------------ softmax
def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``x / temperature`` along ``axis`` (max-subtracted)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        gz = out * (g - (g * out).sum(axis=axis, keepdims=True))
        return (gz / temperature,)

    return make_result(out, (x,), bw)


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, temperature, axis=-1)


def log_softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return ((g - sm * g.sum(axis=axis, keepdims=True)) / temperature,)

    return make_result(out, (x,), bw)


# ------------------------------------------------------------ normalisation
def _normalize_backward(g_hat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes):
    m1 = g_hat.mean(axis=axes, keepdims=True)
    m2 = (g_hat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - m1 - xhat * m2)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gain``/``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shape {gain.shape} does not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    gd = gain.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx = _normalize_backward(g * gd, xhat, inv_std, -1)
        return gx, g_gain, g_bias

    return make_result(xhat * gd + bias.data, (x, gain, bias), bw)


def batch_norm(x: Tensor, gain: Tensor, bias: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch normalisation for (B, C) or (B, C, H, W) inputs.

    In training mode the batch statistics normalise the input and the running
    buffers are updated in place (unbiased variance, like the usual convention);
    in eval mode the running buffers are used.
    """
    if x.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    xd = x.data
    gd = gain.data.reshape(bshape)

    if not training:
        inv_std = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        scale = gd * inv_std
        out = (xd - running_mean.reshape(bshape)) * scale + bias.data.reshape(bshape)
        xhat = (xd - running_mean.reshape(bshape)) * inv_std

        def bw_eval(g):
            return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_result(out.astype(xd.dtype, copy=False), (x, gain, bias), bw_eval)

    if xd.shape[0] < 2:
        raise ShapeError("batch_norm in training mode needs a batch of at least 2")
    n = xd.size // xd.shape[1]
    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(-1)
    running_var *= 1.0 - momentum
    running_var += momentum * var.reshape(-1) * (n / max(n - 1, 1))

    def bw(g):
        gx = _normalize_backward(g * gd, xhat, inv_std, axes)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(xhat * gd + bias.data.reshape(bshape), (x, gain, bias), bw)


# -------------------------------------------------------------- convolution
def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col. x: (B, C, H, W), weight: (O, C, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    B, C, H, W = x.shape
    O, Cw, k, kw = weight.shape
    if Cw != C or k != kw:
        raise ShapeError(f"conv2d weight {weight.shape} incompatible with input {x.shape}")
    Ho, Wo = conv_output_size(H, k, stride, padding), conv_output_size(W, k, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d output size would be {Ho}x{Wo}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wmat = weight.data.reshape(O, C * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, k, k)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(np.ascontiguousarray(out), parents, bw)


def max_pool2d(x: Tensor, window: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling; gradient goes to the lowest flat index among tied maxima."""
    stride = stride or window
    B, C, H, W = x.shape
    if window < 1 or padding < 0 or 2 * padding > window:
        raise ShapeError(f"invalid pooling window {window} with padding {padding}")
    Ho, Wo = conv_output_size(H, window, stride, padding), conv_output_size(W, window, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"pooling window {window} does not fit input {H}x{W}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else xd
    win = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += g * hit
        return (dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp,)

    return make_result(np.ascontiguousarray(out), (x,), bw)


def global_avg_pool2d(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) channel means."""
    B, C, H, W = x.shape
    scale = 1.0 / (H * W)
    return make_result(x.data.mean(axis=(2, 3)), (x,),
                       lambda g: (np.broadcast_to(g[:, :, None, None] * scale, x.shape).astype(x.dtype),))


def pool2d(x: Tensor, kind: str, window: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    if kind == "max":
        return max_pool2d(x, window, stride, padding)
    if kind == "global_avg":
        return global_avg_pool2d(x)
    raise ValueError(f"unknown pooling kind {kind!r}")


# ----------------------------------------------------------- set reductions
def max_over_set(rows: Tensor, axis: int = 0, mask: np.ndarray | None = None) -> Tensor:
    """Maximum over ``axis`` (a set of rows), optionally ignoring masked-out rows.

    ``mask`` is broadcast against ``rows`` with the feature axis dropped; rows
    where it is False never win. Ties resolve to the lowest index.
    """
    xd = rows.data
    axis = axis % xd.ndim
    if xd.shape[axis] == 0:
        raise ShapeError("max_over_set of an empty set")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        m = mask.reshape(mask.shape + (1,) * (xd.ndim - mask.ndim))
        if not m.any(axis=axis).all():
            raise ShapeError("max_over_set with every row masked out")
        xd = np.where(m, xd, -np.inf)
    arg = xd.argmax(axis=axis)
    out = np.take_along_axis(xd, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros(rows.shape, dtype=rows.dtype)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return make_result(out, (rows,), bw)


def segment_max(x: Tensor, assign: np.ndarray, num_segments: int) -> tuple[Tensor, np.ndarray]:
    """Per-segment feature max over views.

    x: (B, N, D); assign: (B, N) integers in [0, num_segments). Returns the
    (B, M, D) pooled rows, exact zeros for empty segments, and the (B, M)
    validity mask.
    """
    B, N, D = x.shape
    assign = np.asarray(assign)
    onehot = assign[:, :, None] == np.arange(num_segments)[None, None, :]  # (B, N, M)
    valid = onehot.any(axis=1)
    xd = x.data
    big = np.where(onehot[..., None], xd[:, :, None, :], -np.inf)  # (B, N, M, D)
    arg = big.argmax(axis=1)  # (B, M, D)
    out = np.take_along_axis(big, arg[:, None], axis=1)[:, 0]
    out = np.where(valid[..., None], out, 0.0).astype(xd.dtype)

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        b_idx = np.arange(B)[:, None, None]
        d_idx = np.arange(D)[None, None, :]
        np.add.at(gx, (b_idx, arg, d_idx), g * valid[..., None])
        return (gx,)

    return make_result(out, (x,), bw), valid


# ------------------------------------------------------------------ dropout
def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an RNG")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


# ------------------------------------------------------------------- linear
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with weight stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out.reshape(lead + (wd.shape[1],)), parents, bw)


# ------------------------------------------------------------------- losses
def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return make_result(np.asarray((diff * diff).sum() / n), (pred, target),
                       lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


def cross_entropy(logits: Tensor, labels, literal_label_softmax: bool = False) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    ``literal_label_softmax`` replaces the one-hot target with softmax(one-hot),
    the target distribution obtained by reading the hard-label formula literally.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (B, C) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    B, C = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise ValueError("labels out of range")
    target = np.zeros((B, C), dtype=logits.dtype)
    target[np.arange(B), labels] = 1.0
    if literal_label_softmax:
        e = np.exp(target - 1.0)
        target = e / e.sum(axis=1, keepdims=True)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    sm = np.exp(logp)
    value = -(target * logp).sum() / B
    return make_result(np.asarray(value), (logits,),
                       lambda g: (g * (sm * target.sum(axis=1, keepdims=True) - target) / B,))


def _check_stochastic(p: np.ndarray, name: str, tol: float = 1e-4) -> None:
    if (p < 0).any() or np.abs(p.sum(axis=-1) - 1.0).max() > tol:
        raise ValueError(f"{name} rows are not probability distributions")


def kl_div(p_t: Tensor, p_s: Tensor) -> Tensor:
    """Mean over rows of sum p_t (log p_t - log p_s), both row-stochastic."""
    if p_t.shape != p_s.shape:
        raise ShapeError(f"kl_div shapes differ: {p_t.shape} vs {p_s.shape}")
    pt, ps = p_t.data, p_s.data
    _check_stochastic(pt, "first kl_div argument")
    _check_stochastic(ps, "second kl_div argument")
    rows = pt.size // pt.shape[-1]
    tiny = np.finfo(pt.dtype).tiny
    log_t = np.log(np.maximum(pt, tiny))
    log_s = np.log(np.maximum(ps, tiny))
    value = np.where(pt > 0, pt * (log_t - log_s), 0.0).sum() / rows

    def bw(g):
        gt = g * np.where(pt > 0, log_t - log_s + 1.0, 0.0) / rows
        gs = -g * pt / np.maximum(ps, tiny) / rows
        return gt, gs

    return make_result(np.asarray(value, dtype=pt.dtype), (p_t, p_s), bw)


def kl_div_logits(teacher_logits: Tensor, student_logits: Tensor, temperature: float) -> Tensor:
    """KL(softmax(t/T) || softmax(s/T)) computed from log-probabilities."""
    log_pt = log_softmax(teacher_logits, temperature)
    log_ps = log_softmax(student_logits, temperature)
    pt = np.exp(log_pt.data)
    rows = pt.size // pt.shape[-1]
    diff = log_pt.data - log_ps.data
    value = (pt * diff).sum() / rows

    def bw(g):
        # d/dlog_pt of sum exp(log_pt) * (log_pt - log_ps)
        g_lt = g * pt * (diff + 1.0) / rows
        g_ls = -g * pt / rows
        return g_lt, g_ls

    return make_result(np.asarray(value, dtype=pt.dtype), (log_pt, log_ps), bw)


def loss(pred: Tensor, target, kind: str) -> Tensor:
    if kind == "mse":
        return mse_loss(pred, target)
    if kind == "cross_entropy":
        return cross_entropy(pred, target)
    if kind == "kl_div":
        return kl_div(pred, as_tensor(target))
    raise ValueError(f"unknown loss {kind!r}")


def elementwise(a, b, kind: str) -> Tensor:
    a = as_tensor(a)
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    if kind == "mul":
        return a * b
    raise ValueError(f"unknown elementwise kind {kind!r}")


__all__ = [
    "activation", "batch_norm", "conv2d", "conv_output_size", "cross_entropy", "dropout",
    "elementwise", "gelu", "global_avg_pool2d", "kl_div", "kl_div_logits", "layer_norm",
    "linear", "log_softmax", "loss", "max_over_set", "max_pool2d", "mse_loss", "pool2d",
    "relu", "segment_max", "sigmoid", "softmax", "softmax_rows", "unbroadcast",
]
