"""Differentiable operators used by the networks and losses.

Convolution is cross-correlation. The three maps

    conv2d(x, w)                  forward
    conv_transpose2d(g, w)        adjoint in x
    conv2d_weight_grad(x, g)      adjoint in w

form a closed set: each one's backward is expressed with the other two, so
gradients of gradients are available for every layer.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import (
    Tensor,
    abs_,
    broadcast_to,
    concat,
    leaky_relu,
    logsumexp,
    make,
    mean,
    mul,
    power,
    relu,
    reshape,
    slice_axis,
    tanh,
    tsum,
)

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-5


class GeometryError(ValueError):
    """Spatial sizes that cannot produce a valid output."""


class DimensionError(ValueError):
    """Channel or feature dimensions that do not line up."""


def conv_output_size(size, k, stride, padding, dilation):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv_transpose_output_size(size, k, stride, padding, dilation=1, output_padding=0):
    return (size - 1) * stride - 2 * padding + dilation * (k - 1) + 1 + output_padding


def _check_geometry(stride, dilation, k):
    if k < 1 or stride < 1 or dilation < 1:
        raise GeometryError(f"invalid conv geometry k={k} stride={stride} dilation={dilation}")


# ---------------------------------------------------------------------------
# raw numpy kernels


def _conv_fwd(x, w, stride, padding, dilation):
    B, C, H, W = x.shape
    cout, cin, k, _ = w.shape
    ho = conv_output_size(H, k, stride, padding, dilation)
    wo = conv_output_size(W, k, stride, padding, dilation)
    cols = kernels.im2col(x, k, stride, padding, dilation, ho, wo)
    out = w.reshape(cout, cin * k * k) @ cols
    return np.ascontiguousarray(out.reshape(cout, B, ho, wo).transpose(1, 0, 2, 3))


def _conv_tr_fwd(g, w, stride, padding, dilation, out_hw):
    B, cg, ho, wo = g.shape
    _, cx, k, _ = w.shape
    gmat = g.transpose(1, 0, 2, 3).reshape(cg, B * ho * wo)
    cols = w.reshape(cg, cx * k * k).T @ gmat
    return kernels.col2im(cols, (B, cx, out_hw[0], out_hw[1]), k, stride, padding, dilation, ho, wo)


def _conv_wgrad(x, g, k, stride, padding, dilation):
    B, C, H, W = x.shape
    cout, ho, wo = g.shape[1], g.shape[2], g.shape[3]
    cols = kernels.im2col(x, k, stride, padding, dilation, ho, wo)
    gmat = g.transpose(1, 0, 2, 3).reshape(cout, B * ho * wo)
    return (gmat @ cols.T).reshape(cout, C, k, k)


# ---------------------------------------------------------------------------
# differentiable convolution triad


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """Cross-correlate (B, Cin, H, W) with (Cout, Cin, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv2d: input has {x.shape[1]} channels but kernel expects {weight.shape[1]}"
        )
    k = weight.shape[2]
    _check_geometry(stride, dilation, k)
    H, W = x.shape[2:]
    ho = conv_output_size(H, k, stride, padding, dilation)
    wo = conv_output_size(W, k, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise GeometryError(
            f"conv2d: input {H}x{W} too small for k={k} dilation={dilation} padding={padding}"
        )

    def bw(g):
        return (
            conv_transpose2d(g, weight, None, stride, padding, dilation, output_size=(H, W)),
            conv2d_weight_grad(x, g, k, stride, padding, dilation),
        )

    out = make(_conv_fwd(x.data, weight.data, stride, padding, dilation), (x, weight), bw, "conv2d")
    return add_bias(out, bias) if bias is not None else out


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, dilation=1,
                     output_padding=0, output_size=None):
    """Transposed convolution; ``weight`` is (Cin, Cout, k, k).

    Equal to the input-adjoint of ``conv2d`` with the same kernel and geometry.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv_transpose2d expects 4-D input and kernel, got {x.shape}, {weight.shape}"
        )
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"conv_transpose2d: input has {x.shape[1]} channels but kernel expects {weight.shape[0]}"
        )
    k = weight.shape[2]
    _check_geometry(stride, dilation, k)
    H, W = x.shape[2:]
    if output_size is None:
        output_size = (
            conv_transpose_output_size(H, k, stride, padding, dilation, output_padding),
            conv_transpose_output_size(W, k, stride, padding, dilation, output_padding),
        )
    output_size = tuple(int(s) for s in output_size)
    if min(output_size) <= 0:
        raise GeometryError(f"conv_transpose2d: non-positive output size {output_size}")
    for size, s_in in zip(output_size, (H, W)):
        if conv_output_size(size, k, stride, padding, dilation) != s_in:
            raise GeometryError(
                f"conv_transpose2d: output size {output_size} inconsistent with input {H}x{W}"
            )

    def bw(g):
        return (
            conv2d(g, weight, None, stride, padding, dilation),
            conv2d_weight_grad(g, x, k, stride, padding, dilation),
        )

    data = _conv_tr_fwd(x.data, weight.data, stride, padding, dilation, output_size)
    out = make(data, (x, weight), bw, "conv_transpose2d")
    return add_bias(out, bias) if bias is not None else out


def conv2d_weight_grad(x, g, k, stride=1, padding=0, dilation=1):
    """Kernel adjoint of ``conv2d``: bilinear in the input and output gradient."""
    H, W = x.shape[2:]

    def bw(gw):
        return (
            conv_transpose2d(g, gw, None, stride, padding, dilation, output_size=(H, W)),
            conv2d(x, gw, None, stride, padding, dilation),
        )

    data = _conv_wgrad(x.data, g.data, k, stride, padding, dilation)
    return make(data, (x, g), bw, "conv2d_weight_grad")


# ---------------------------------------------------------------------------
# layers


def add_bias(x, bias):
    """Add a per-channel (axis 1) bias."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise DimensionError(f"bias of shape {bias.shape} does not match channels of {x.shape}")
    shape = (1, bias.shape[0]) + (1,) * (x.ndim - 2)
    return x + broadcast_to(reshape(bias, shape), x.shape)


def channel_scale(x, gamma):
    shape = (1, gamma.shape[0]) + (1,) * (x.ndim - 2)
    return mul(x, broadcast_to(reshape(gamma, shape), x.shape))


def instance_norm(x, gamma=None, beta=None, eps=NORM_EPS):
    """Per-(sample, channel) standardization over H x W, then affine."""
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise DimensionError(f"instance_norm expects a non-empty 4-D tensor, got {x.shape}")
    mu = broadcast_to(mean(x, (2, 3), keepdims=True), x.shape)
    xc = x - mu
    var = mean(mul(xc, xc), (2, 3), keepdims=True)
    inv = broadcast_to(power(var + eps, -0.5), x.shape)
    y = mul(xc, inv)
    if gamma is not None:
        y = channel_scale(y, gamma)
    if beta is not None:
        y = add_bias(y, beta)
    return y


def activation(x, kind="linear", slope=LEAKY_SLOPE):
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def fully_connected(x, weight, bias=None):
    """x (B, D) @ weight (D, E) + bias (E)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"fully_connected: cannot apply {weight.shape} to {x.shape}")
    out = x @ weight
    return add_bias(out, bias) if bias is not None else out


def concat_channels(parts):
    return concat(parts, axis=1)


def slice_channels(x, start, stop):
    return slice_axis(x, 1, start, stop)


def flatten(x):
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def avg_pool2(x):
    """2x2 average pooling with stride 2 (H and W must be even)."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise GeometryError(f"avg_pool2 needs even spatial size, got {H}x{W}")
    return mean(reshape(x, (B, C, H // 2, 2, W // 2, 2)), (3, 5))


def global_avg_pool(x):
    return mean(x, (2, 3))


def gram_matrix(f):
    """(B, C, H, W) -> (B, C, C), normalized by C*H*W."""
    B, C, H, W = f.shape
    flat = reshape(f, (B, C, H * W))
    return (flat @ flat.transpose(0, 2, 1)) * (1.0 / (C * H * W))


def log_softmax(logits):
    return logits - broadcast_to(logsumexp(logits, axis=-1), logits.shape)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects (B, N) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    B, N = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"expected {B} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= N):
        raise IndexError(f"labels must lie in [0, {N}), got {labels.tolist()}")
    onehot = np.zeros((B, N), dtype=logits.dtype)
    onehot[np.arange(B), labels] = 1.0
    picked = tsum(mul(log_softmax(logits), Tensor(onehot)))
    return picked * (-1.0 / B)


def softmax(logits):
    return np.exp(log_softmax(logits).data)


def reduce(x, kind="mean"):
    if kind == "mean":
        return mean(x)
    if kind == "sum":
        return tsum(x)
    if kind == "l1_mean":
        return mean(abs_(x))
    if kind == "l2_norm":
        return power(tsum(mul(x, x)), 0.5)
    raise ValueError(f"unknown reduction {kind!r}")
