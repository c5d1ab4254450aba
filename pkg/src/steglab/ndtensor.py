"""Small NCHW tensor kernels with hand-written backward passes.

Every op works on plain ``numpy`` arrays shaped ``(n, c, h, w)``. Forward and
backward are separate pure functions; there is no tape. Ops keep the dtype of
their input (float32 for training, float64 for gradient checks) while
reductions that feed statistics are accumulated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ContractError(ValueError):
    """Raised when an op receives arguments that violate its shape contract."""


def _check4(x, name="input"):
    if x.ndim != 4:
        raise ContractError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")


@dataclass
class ConvParams:
    kernels: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray | None = None
    stride: int = 1
    pad: int | tuple[int, int] = 0  # int, or (before, after) on both spatial axes

    @property
    def pads(self):
        if isinstance(self.pad, (tuple, list)):
            return int(self.pad[0]), int(self.pad[1])
        return int(self.pad), int(self.pad)

    def output_hw(self, h, w):
        kh, kw = self.kernels.shape[2:]
        total = sum(self.pads)
        return (h + total - kh) // self.stride + 1, (w + total - kw) // self.stride + 1


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum_bn: float = 0.9

    @classmethod
    def fresh(cls, c, dtype=np.float32):
        return cls(
            gamma=np.ones(c, dtype),
            beta=np.zeros(c, dtype),
            running_mean=np.zeros(c, dtype),
            running_var=np.ones(c, dtype),
        )


# --------------------------------------------------------------------------
# convolution


def _validate_conv(x, p):
    _check4(x)
    if p.kernels.ndim != 4:
        raise ContractError(f"kernels must be 4-D, got shape {p.kernels.shape}")
    out_c, in_c, kh, kw = p.kernels.shape
    if x.shape[1] != in_c:
        raise ContractError(f"channels: input has {x.shape[1]}, kernels expect {in_c}")
    if p.stride < 1:
        raise ContractError(f"stride must be positive, got {p.stride}")
    before, after = p.pads
    if min(before, after) < 0:
        raise ContractError(f"pad must be non-negative, got {p.pad}")
    if kh > x.shape[2] + before + after:
        raise ContractError(f"height: kernel {kh} exceeds padded input {x.shape[2] + before + after}")
    if kw > x.shape[3] + before + after:
        raise ContractError(f"width: kernel {kw} exceeds padded input {x.shape[3] + before + after}")
    if p.bias is not None and p.bias.shape != (out_c,):
        raise ContractError(f"bias must have shape ({out_c},), got {p.bias.shape}")


def _pad_nhwc(x, pads):
    before, after = pads
    if before == 0 and after == 0:
        return x
    return np.pad(x, ((0, 0), (before, after), (before, after), (0, 0)))


def _im2col(x, p):
    """Unfold ``x`` into rows of output positions ``(n, oh, ow)`` and columns
    ordered ``(kh, kw, c)``."""
    kh, kw = p.kernels.shape[2:]
    oh, ow = p.output_hw(*x.shape[2:])
    xp = _pad_nhwc(x.transpose(0, 2, 3, 1), p.pads)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (n, H', W', c, kh, kw)
    s = p.stride
    win = win[:, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    n, c = x.shape[:2]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)


def _is_pointwise(p):
    return p.kernels.shape[2:] == (1, 1) and p.stride == 1 and p.pads == (0, 0)


def _kernel_matrix(p, dtype):
    out_c = p.kernels.shape[0]
    return p.kernels.transpose(0, 2, 3, 1).reshape(out_c, -1).astype(dtype, copy=False)


def _unfold(x, p):
    if _is_pointwise(p):
        return x.transpose(0, 2, 3, 1).reshape(-1, x.shape[1])
    return _im2col(x, p)


def conv2d_forward(x, p):
    """Convolution returning ``(output, cols)``; ``cols`` may be handed to
    :func:`conv2d_grad` to skip re-unfolding the input."""
    _validate_conv(x, p)
    n = x.shape[0]
    out_c = p.kernels.shape[0]
    oh, ow = p.output_hw(*x.shape[2:])
    cols = _unfold(x, p)
    y = cols @ _kernel_matrix(p, x.dtype).T
    if p.bias is not None:
        y += p.bias.astype(x.dtype, copy=False)
    y = y.reshape(n, oh, ow, out_c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), cols


def conv2d(x, p):
    """2-D cross-correlation with zero padding (no kernel flip)."""
    return conv2d_forward(x, p)[0]


def conv2d_grad(x, p, grad_out, cols=None, need_input=True):
    """Gradients of :func:`conv2d` w.r.t. input, kernels and bias.

    Returns ``(grad_input, grad_kernels, grad_bias)``; ``grad_bias`` is None
    for bias-free layers and ``grad_input`` is None when not ``need_input``.
    """
    _validate_conv(x, p)
    n, c, h, w = x.shape
    out_c, _, kh, kw = p.kernels.shape
    oh, ow = p.output_hw(h, w)
    if grad_out.shape != (n, out_c, oh, ow):
        raise ContractError(
            f"grad_out shape {grad_out.shape} does not match conv output {(n, out_c, oh, ow)}"
        )
    if cols is None:
        cols = _unfold(x, p)
    g2 = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(n * oh * ow, out_c)
    grad_k = (g2.T @ cols).reshape(out_c, kh, kw, c).transpose(0, 3, 1, 2)
    grad_k = np.ascontiguousarray(grad_k)
    grad_b = None
    if p.bias is not None:
        grad_b = g2.sum(axis=0, dtype=np.float64).astype(x.dtype)
    if not need_input:
        return None, grad_k, grad_b
    gcols = g2 @ _kernel_matrix(p, x.dtype)
    if _is_pointwise(p):
        grad_x = gcols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(grad_x), grad_k, grad_b
    gcols = gcols.reshape(n, oh, ow, kh, kw, c)
    before, after = p.pads
    gxp = np.zeros((n, h + before + after, w + before + after, c), dtype=x.dtype)
    s = p.stride
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += gcols[:, :, :, i, j]
    grad_x = gxp[:, before : before + h, before : before + w].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(grad_x), grad_k, grad_b


# --------------------------------------------------------------------------
# batch normalization


def _validate_bn(x, p):
    _check4(x)
    c = x.shape[1]
    for name in ("gamma", "beta", "running_mean", "running_var"):
        arr = getattr(p, name)
        if arr.shape != (c,):
            raise ContractError(f"channels: {name} has shape {arr.shape}, input has {c} channels")


def _batch_stats(x):
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = ((x - mean[None, :, None, None].astype(x.dtype)) ** 2).mean(axis=(0, 2, 3), dtype=np.float64)
    return mean, var


def batch_norm_forward(x, p, training):
    """Batch normalization returning ``(output, cache)``.

    In training mode the batch statistics are used and the running averages
    are updated in place as ``running = m * running + (1 - m) * batch``; the
    running variance tracks the unbiased batch variance. ``cache`` is None in
    inference mode.
    """
    _validate_bn(x, p)
    if training:
        mean, var = _batch_stats(x)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / max(count - 1, 1)
        m = p.momentum_bn
        p.running_mean[...] = m * p.running_mean + (1 - m) * mean
        p.running_var[...] = m * p.running_var + (1 - m) * unbiased
    else:
        mean = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std.astype(x.dtype)[None, :, None, None]
    y = xhat * p.gamma.astype(x.dtype)[None, :, None, None] + p.beta.astype(x.dtype)[None, :, None, None]
    return y, ((xhat, inv_std) if training else None)


def batch_norm(x, p, training):
    """Per-channel batch normalization, ``gamma * normalized + beta``."""
    return batch_norm_forward(x, p, training)[0]


def batch_norm_grad(x, p, grad_out, cache=None):
    """Backward of training-mode :func:`batch_norm`.

    Returns ``(grad_input, grad_gamma, grad_beta)``.
    """
    _validate_bn(x, p)
    if grad_out.shape != x.shape:
        raise ContractError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    if cache is None:
        mean, var = _batch_stats(x)
        inv_std = 1.0 / np.sqrt(var + p.epsilon)
        xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std.astype(x.dtype)[None, :, None, None]
    else:
        xhat, inv_std = cache
    g_beta = grad_out.sum(axis=(0, 2, 3), dtype=np.float64)
    g_gamma = np.einsum("nchw,nchw->c", grad_out, xhat, dtype=np.float64)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    k = (p.gamma * inv_std).astype(x.dtype)[None, :, None, None]
    grad_x = k * (
        grad_out
        - (g_beta / count).astype(x.dtype)[None, :, None, None]
        - xhat * (g_gamma / count).astype(x.dtype)[None, :, None, None]
    )
    return grad_x, g_gamma.astype(x.dtype), g_beta.astype(x.dtype)


# --------------------------------------------------------------------------
# pointwise


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x, grad_out):
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


# --------------------------------------------------------------------------
# structural


def concat_channels(inputs):
    if not inputs:
        raise ContractError("concat_channels needs at least one input")
    for t in inputs:
        _check4(t)
    n, _, h, w = inputs[0].shape
    for i, t in enumerate(inputs[1:], start=1):
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ContractError(
                f"spatial: input {i} has shape {t.shape}, expected (n={n}, h={h}, w={w})"
            )
    if len(inputs) == 1:
        return inputs[0]
    return np.concatenate(inputs, axis=1)


def concat_channels_grad(sizes, grad_out):
    """Split ``grad_out`` back into per-input slices of the given channel sizes."""
    offsets = np.cumsum(sizes)[:-1]
    return np.split(grad_out, offsets, axis=1)


def global_avg_pool(x):
    _check4(x)
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)


def global_avg_pool_grad(input_shape, grad_out):
    h, w = input_shape[2:]
    return np.broadcast_to(grad_out / (h * w), input_shape).copy()


# --------------------------------------------------------------------------
# classifier head


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class DenseGrads:
    input: np.ndarray
    weights: np.ndarray
    bias: np.ndarray | None = field(default=None)


def dense_softmax_xent(x, weights, labels, bias=None):
    """Fully-connected layer followed by softmax and mean cross-entropy.

    ``x`` is any ``(n, ...)`` array flattened per sample; ``weights`` has shape
    ``(features, classes)``. ``labels`` may be None for inference, in which
    case loss and gradients are None.

    Returns ``(probabilities, loss, DenseGrads | None)``.
    """
    n = x.shape[0]
    flat = x.reshape(n, -1)
    if flat.shape[1] != weights.shape[0]:
        raise ContractError(
            f"features: input has {flat.shape[1]} per sample, weights expect {weights.shape[0]}"
        )
    logits = flat @ weights.astype(x.dtype, copy=False)
    if bias is not None:
        logits = logits + bias.astype(x.dtype, copy=False)
    probs = softmax(logits.astype(np.float64))
    if labels is None:
        return probs, None, None
    labels = np.asarray(labels)
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= weights.shape[1]:
        raise ContractError(f"labels must be {n} values in [0, {weights.shape[1]}), got {labels}")
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    g_logits = probs.copy()
    g_logits[np.arange(n), labels] -= 1.0
    g_logits /= n
    g_logits = g_logits.astype(x.dtype)
    grads = DenseGrads(
        input=(g_logits @ weights.T.astype(x.dtype, copy=False)).reshape(x.shape),
        weights=flat.T @ g_logits,
        bias=None if bias is None else g_logits.sum(axis=0),
    )
    return probs, loss, grads
