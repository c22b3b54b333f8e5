"""Differentiable tensor operators used by the networks.

Thin, shape-checked wrappers over ``torch`` so that every operator the
autoencoder and the surrogate rely on has one documented entry point.
Tensors are ``(N, C, W, H, D)``; gradients come from torch's reverse-mode
tape.  ``numerical_gradient`` is a finite-difference oracle that only calls
the forward function, so it can be used to audit the analytic gradients.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import LayoutError, NumericError

LEAKY_SLOPE = 0.2


def _triple(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (int(v),) * 3


def conv_output_size(n, kernel, stride, padding):
    return (n + 2 * padding - kernel) // stride + 1


def tconv_output_size(n, kernel, stride, padding, output_padding=0):
    return (n - 1) * stride - 2 * padding + kernel + output_padding


def check_finite(x, what="tensor"):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


def conv3(x, weight, bias=None, stride=1, padding=0):
    """3D cross-correlation; output size per axis ``floor((n + 2p - k)/s) + 1``."""
    if x.dim() != 5 or weight.dim() != 5 or x.shape[1] != weight.shape[1]:
        raise LayoutError(f"conv3: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    if min(_triple(stride)) < 1:
        raise LayoutError("conv3: stride must be >= 1")
    return F.conv3d(x, weight, bias, stride=_triple(stride), padding=_triple(padding))


def tconv3(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed 3D convolution (the adjoint of :func:`conv3`).

    ``weight`` has shape ``(C_in, C_out, k, k, k)``; output size per axis is
    ``(n - 1)*s - 2p + k + op`` with a per-axis ``op < s``.
    """
    stride, output_padding = _triple(stride), _triple(output_padding)
    if x.dim() != 5 or weight.dim() != 5 or x.shape[1] != weight.shape[0]:
        raise LayoutError(f"tconv3: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    if any(op >= s for op, s in zip(output_padding, stride)):
        raise LayoutError("tconv3: output padding must be smaller than the stride")
    return F.conv_transpose3d(x, weight, bias, stride=stride, padding=_triple(padding),
                              output_padding=output_padding)


def batchnorm3(x, gamma, beta, running_mean, running_var, training, eps=1e-5, momentum=0.1):
    """Per-channel normalisation over ``(N, W, H, D)``.

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running statistics are used.
    """
    if training and x.shape[0] < 2:
        raise LayoutError("batchnorm3 needs a batch of at least 2 in training mode")
    return F.batch_norm(x, running_mean, running_var, gamma, beta, training, momentum, eps)


def activation(x, kind):
    if kind == "relu":
        return F.relu(x)
    if kind == "leakyrelu":
        return F.leaky_relu(x, LEAKY_SLOPE)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def nearest_resize3(x, size):
    """Nearest-neighbour resize; source index per axis ``floor(out * n_in / n_out)``."""
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 1:
        raise LayoutError(f"invalid target size {size}")
    if tuple(x.shape[2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="nearest")


def fully_connected(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise LayoutError(f"fully_connected: input width {x.shape[-1]} vs weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def concat_channels(*xs):
    spatial = {tuple(x.shape[2:]) for x in xs}
    if len(spatial) != 1 or len({x.shape[0] for x in xs}) != 1:
        raise LayoutError("concat_channels: batch and spatial dims must agree")
    return torch.cat(xs, dim=1)


def add(*xs):
    if len({tuple(x.shape) for x in xs}) != 1:
        raise LayoutError("add: shapes must agree")
    out = xs[0]
    for x in xs[1:]:
        out = out + x
    return out


def scale(x, beta):
    return x * beta


def l1_loss(pred, target, weight=None):
    """Mean absolute error, optionally weighted per element.

    The subgradient of ``|e|`` at ``e = 0`` is taken as 0.
    """
    if pred.shape != target.shape:
        raise LayoutError(f"l1_loss: {tuple(pred.shape)} vs {tuple(target.shape)}")
    err = torch.abs(pred - target)
    if weight is not None:
        err = err * weight
    return err.mean()


def l2_penalty(params, lam):
    return lam * sum((p ** 2).sum() for p in params)


def backward(loss):
    if loss.dim() != 0 and loss.numel() != 1:
        raise LayoutError("backward needs a scalar loss")
    check_finite(loss.detach(), "loss")
    loss.backward()


def make_optimizer(params, kind, lr, momentum=0.9, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def he_normal_(weight, fan_in, negative_slope=0.0):
    std = math.sqrt(2.0 / ((1 + negative_slope ** 2) * fan_in))
    with torch.no_grad():
        weight.normal_(0.0, std)
    return weight


def xavier_normal_(weight, fan_in, fan_out):
    std = math.sqrt(2.0 / (fan_in + fan_out))
    with torch.no_grad():
        weight.normal_(0.0, std)
    return weight


def numerical_gradient(fn, x, h=1e-5):
    """Central finite-difference gradient of a scalar ``fn`` at tensor ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(fn(x))
            flat[i] = orig - h
            fm = float(fn(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b):
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))
