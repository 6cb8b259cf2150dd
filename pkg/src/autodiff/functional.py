"""Differentiable operators over Tensor.

Each op computes its forward result with numpy and hands a backward rule to
the active tape. Backward rules receive a ``needs`` mask and skip the
gradients nobody asked for.
"""
from typing import NamedTuple, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.autodiff.tensor import Tensor, make_output
from src.errors import ShapeError


class BatchStats(NamedTuple):
    """Per-channel batch statistics exposed by batchnorm2d"""
    mean: Tensor
    var: Tensor


def _expect_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _expect_ndim(op: str, x: Tensor, ndim: int) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{op}: expected a {ndim}-D tensor, got shape {x.shape}")


def _scalar(value, dtype) -> np.ndarray:
    return np.asarray(value, dtype=dtype).reshape(())


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a [B,Cin,H,W] batch with [Cout,Cin,kh,kw] filters"""
    _expect_ndim("conv2d", x, 4)
    _expect_ndim("conv2d", weight, 4)
    B, Cin, H, W = x.shape
    Cout, w_cin, kh, kw = weight.shape
    if w_cin != Cin:
        raise ShapeError(f"conv2d: weight expects {w_cin} input channels, input has {Cin}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {H}x{W} with padding {padding}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {Cout} filters")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(grad, needs):
        grad_x = grad_w = grad_b = None
        if needs[1]:
            grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        if needs[2]:
            grad_b = grad.sum(axis=(0, 2, 3))
        if needs[0]:
            cols = np.tensordot(grad, weight.data, axes=([1], [0]))
            grad_xp = np.zeros(xp.shape, dtype=grad.dtype)
            h_end = stride * (Ho - 1) + 1
            w_end = stride * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    grad_xp[:, :, i:i + h_end:stride, j:j + w_end:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            grad_x = grad_xp[:, :, padding:padding + H, padding:padding + W] if padding else grad_xp
        return grad_x, grad_w, grad_b

    return make_output("conv2d", out, (x, weight, bias), backward)


def channel_mean(x: Tensor) -> Tensor:
    """Mean over the B, H, W axes of a [B,C,H,W] tensor"""
    _expect_ndim("channel_mean", x, 4)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(0, 2, 3))

    def backward(grad, needs):
        return (np.ones_like(x.data) * (grad / count)[None, :, None, None],)

    return make_output("channel_mean", out, (x,), backward)


def channel_var(x: Tensor) -> Tensor:
    """Biased variance over the B, H, W axes of a [B,C,H,W] tensor"""
    _expect_ndim("channel_var", x, 4)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    centered = x.data - x.data.mean(axis=(0, 2, 3), keepdims=True)
    out = x.data.var(axis=(0, 2, 3))

    def backward(grad, needs):
        return (centered * (2.0 * grad / count)[None, :, None, None],)

    return make_output("channel_var", out, (x,), backward)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
                mode: str = "train", momentum: float = 0.1,
                eps: float = 1e-5) -> Tuple[Tensor, Optional[BatchStats]]:
    """Batch normalization over the channel axis.

    ``train`` normalizes with batch statistics and updates the running
    buffers, ``eval`` normalizes with the running buffers, ``synthesis``
    normalizes with the running buffers but still reports batch statistics.
    Variances are biased everywhere, running_var included.
    """
    _expect_ndim("batchnorm2d", x, 4)
    B, C, H, W = x.shape
    for label, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                     ("running_var", running_var)):
        if t.shape != (C,):
            raise ShapeError(f"batchnorm2d: {label} shape {t.shape} does not match {C} channels")
    if eps <= 0:
        raise ValueError(f"batchnorm2d: eps must be positive, got {eps}")
    if B == 0 or H * W == 0:
        raise ShapeError(f"batchnorm2d: zero extent in input shape {x.shape}")
    count = B * H * W

    if mode == "train":
        if count < 2:
            raise ShapeError(f"batchnorm2d: train mode needs at least 2 values per channel, got {count}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean.data[...] = (1.0 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1.0 - momentum) * running_var.data + momentum * var
    elif mode in ("eval", "synthesis"):
        mean = running_mean.data
        var = running_var.data
    else:
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(grad, needs):
        grad_x = grad_gamma = grad_beta = None
        if needs[0]:
            grad_xhat = grad * gamma.data[None, :, None, None]
            if mode == "train":
                grad_x = (inv_std[None, :, None, None] / count) * (
                    count * grad_xhat
                    - grad_xhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (grad_xhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            else:
                grad_x = grad_xhat * inv_std[None, :, None, None]
        if needs[1]:
            grad_gamma = (grad * xhat).sum(axis=(0, 2, 3))
        if needs[2]:
            grad_beta = grad.sum(axis=(0, 2, 3))
        return grad_x, grad_gamma, grad_beta

    output = make_output("batchnorm2d", out, (x, gamma, beta), backward)
    stats = BatchStats(channel_mean(x), channel_var(x)) if mode != "eval" else None
    return output, stats


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(grad, needs):
        return (grad * mask,)

    return make_output("relu", out, (x,), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    _expect_same_shape("add", x, y)

    def backward(grad, needs):
        return grad, grad

    return make_output("add", x.data + y.data, (x, y), backward)


def sub(x: Tensor, y: Tensor) -> Tensor:
    _expect_same_shape("sub", x, y)

    def backward(grad, needs):
        return grad, -grad

    return make_output("sub", x.data - y.data, (x, y), backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant; the backward multiplies by exactly c"""
    def backward(grad, needs):
        return (grad * c,)

    return make_output("scale", x.data * c, (x,), backward)


def maxpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    _expect_ndim("maxpool2d", x, 4)
    B, C, H, W = x.shape
    if kernel < 1 or stride < 1 or H < kernel or W < kernel:
        raise ShapeError(f"maxpool2d: kernel {kernel}/stride {stride} invalid for input {H}x{W}")
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    windows = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(B, C, Ho, Wo, kernel * kernel)
    winner = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]

    def backward(grad, needs):
        grad_x = np.zeros(x.shape, dtype=grad.dtype)
        h_end = stride * (Ho - 1) + 1
        w_end = stride * (Wo - 1) + 1
        for i in range(kernel):
            for j in range(kernel):
                routed = grad * (winner == i * kernel + j)
                grad_x[:, :, i:i + h_end:stride, j:j + w_end:stride] += routed
        return (grad_x,)

    return make_output("maxpool2d", np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C]"""
    _expect_ndim("global_avg_pool", x, 4)
    B, C, H, W = x.shape
    if H * W == 0:
        raise ShapeError(f"global_avg_pool: zero spatial extent in {x.shape}")

    def backward(grad, needs):
        return (np.ones_like(x.data) * (grad / (H * W))[:, :, None, None],)

    return make_output("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x [B,in] @ weight[out,in]^T + bias[out]"""
    _expect_ndim("linear", x, 2)
    _expect_ndim("linear", weight, 2)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: weight expects {weight.shape[1]} features, input has {x.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(grad, needs):
        grad_x = grad @ weight.data if needs[0] else None
        grad_w = grad.T @ x.data if needs[1] else None
        grad_b = grad.sum(axis=0) if needs[2] else None
        return grad_x, grad_w, grad_b

    return make_output("linear", out, (x, weight, bias), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)"""
    _expect_ndim("softmax_cross_entropy", logits, 2)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    B, K = logits.shape
    if labels.shape[0] != B:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {B} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ShapeError(f"softmax_cross_entropy: labels must lie in [0, {K})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(B)
    loss = -log_probs[rows, labels].mean()

    def backward(grad, needs):
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        return (probs * (grad / B),)

    return make_output("softmax_cross_entropy", _scalar(loss, logits.dtype), (logits,), backward)


def l1_distance_sum(a: Tensor, b: Tensor) -> Tensor:
    """Sum of |a - b| over every element"""
    _expect_same_shape("l1_distance_sum", a, b)
    diff = a.data - b.data
    direction = np.sign(diff)

    def backward(grad, needs):
        return grad * direction, -grad * direction

    return make_output("l1_distance_sum", _scalar(np.abs(diff).sum(), a.dtype), (a, b), backward)


def sq_l2_norm(x: Tensor) -> Tensor:
    """Sum of squares over every element"""
    def backward(grad, needs):
        return (2.0 * grad * x.data,)

    return make_output("sq_l2_norm", _scalar(np.square(x.data).sum(), x.dtype), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(grad, needs):
        return (np.ones_like(x.data) * grad,)

    return make_output("sum", _scalar(x.data.sum(), x.dtype), (x,), backward)


def tv_loss(images: Tensor) -> Tensor:
    """Total variation of a [B,C,h,w] batch, normalized by C*h*w per image"""
    _expect_ndim("tv_loss", images, 4)
    B, C, h, w = images.shape
    if h < 2 or w < 2:
        raise ShapeError(f"tv_loss: needs h >= 2 and w >= 2, got {h}x{w}")
    norm = C * h * w
    horizontal = images.data[..., :, 1:] - images.data[..., :, :-1]
    vertical = images.data[..., 1:, :] - images.data[..., :-1, :]
    value = (np.square(horizontal).sum() + np.square(vertical).sum()) / norm

    def backward(grad, needs):
        grad_x = np.zeros(images.shape, dtype=grad.dtype)
        grad_x[..., :, 1:] += 2.0 * horizontal
        grad_x[..., :, :-1] -= 2.0 * horizontal
        grad_x[..., 1:, :] += 2.0 * vertical
        grad_x[..., :-1, :] -= 2.0 * vertical
        return (grad_x * (grad / norm),)

    return make_output("tv_loss", _scalar(value, images.dtype), (images,), backward)
