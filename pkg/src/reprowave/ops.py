"""Precision-generic tensor ops with reverse-mode gradients.

Tensors are plain numpy arrays shaped (batch, channels, height, width).
Every op keeps the input dtype (float32 stays float32). Reductions that
emulate GPU non-determinism — the convolution ones — route through the
kernels module and take a summation policy; everything else is
elementwise or uses numpy's own (deterministic) pairwise sums.

Entropy discipline for the shuffled policy: each conv forward draws one
term permutation; each conv backward draws the batch order for the
weight gradient, then (if requested) the term permutation for the input
gradient. The draw sequence is fixed by the program, so a recorded
entropy stream replays exactly.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .kernels import conv_forward_kernel, conv_grad_weights_kernel


@lru_cache(maxsize=512)
def _term_offsets(in_ch: int, kh: int, kw: int, hp: int, wp: int) -> np.ndarray:
    """Flat input offsets of the canonical (channel, row, column) terms."""
    off = (
        np.arange(in_ch, dtype=np.int64)[:, None, None] * (hp * wp)
        + np.arange(kh, dtype=np.int64)[None, :, None] * wp
        + np.arange(kw, dtype=np.int64)[None, None, :]
    ).reshape(-1)
    off.flags.writeable = False
    return off


def replication_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")


def replication_pad_adjoint(grad: np.ndarray, pad: int) -> np.ndarray:
    """Fold padded-cell gradients back onto their source edge pixels."""
    if pad == 0:
        return grad
    h = grad.shape[2] - 2 * pad
    w = grad.shape[3] - 2 * pad
    cols = grad[:, :, :, pad : pad + w].copy()
    for j in range(pad):
        cols[:, :, :, 0] += grad[:, :, :, j]
        cols[:, :, :, w - 1] += grad[:, :, :, pad + w + j]
    out = cols[:, :, pad : pad + h, :].copy()
    for i in range(pad):
        out[:, :, 0, :] += cols[:, :, i, :]
        out[:, :, h - 1, :] += cols[:, :, pad + h + i, :]
    return out


def _run_conv(xpad: np.ndarray, weights: np.ndarray, bias: np.ndarray, perm) -> np.ndarray:
    """Valid conv of a pre-padded input; perm reorders the reduction terms."""
    n_batch, in_ch, hp, wp = xpad.shape
    out_ch, _, kh, kw = weights.shape
    h, w = hp - kh + 1, wp - kw + 1
    xoff = _term_offsets(in_ch, kh, kw, hp, wp)
    wflat = weights.reshape(out_ch, -1)
    if perm is not None:
        xoff = xoff[perm]
        wflat = wflat[:, perm]
    out = np.empty((n_batch, out_ch, h, w), dtype=xpad.dtype)
    conv_forward_kernel(
        np.ascontiguousarray(xpad).reshape(n_batch, -1),
        np.ascontiguousarray(wflat),
        bias,
        xoff,
        wp,
        xpad.dtype.type(0),
        out,
    )
    return out


def conv2d_forward(xpad: np.ndarray, weights: np.ndarray, bias: np.ndarray, policy) -> np.ndarray:
    """Cross-correlation + bias on an already replication-padded input."""
    if xpad.shape[1] != weights.shape[1]:
        raise ValueError(
            f"input has {xpad.shape[1]} channels, weights expect {weights.shape[1]}"
        )
    if xpad.dtype != weights.dtype:
        raise ValueError(f"dtype mismatch: input {xpad.dtype}, weights {weights.dtype}")
    n_terms = weights.shape[1] * weights.shape[2] * weights.shape[3]
    return _run_conv(xpad, weights, bias, policy.permutation(n_terms))


def conv2d_backward(
    xpad: np.ndarray,
    weights: np.ndarray,
    grad_out: np.ndarray,
    policy,
    need_grad_input: bool = True,
):
    """Gradients of conv2d_forward w.r.t. padded input, weights, bias."""
    n_batch = xpad.shape[0]
    out_ch, in_ch, kh, kw = weights.shape
    h, w = grad_out.shape[2], grad_out.shape[3]
    grad_out = np.ascontiguousarray(grad_out)
    zero = xpad.dtype.type(0)

    border = policy.permutation(n_batch)
    if border is None:
        border = np.arange(n_batch, dtype=np.int64)
    else:
        border = border.astype(np.int64)
    grad_w = np.empty_like(weights)
    grad_b = np.empty(out_ch, dtype=weights.dtype)
    conv_grad_weights_kernel(
        np.ascontiguousarray(xpad), grad_out, border, zero, grad_w, grad_b
    )

    grad_x = None
    if need_grad_input:
        # Full correlation: conv the zero-padded output gradient with the
        # spatially flipped, channel-transposed weights. Reuses the forward
        # kernel, so the policy applies to this reduction too.
        gz = np.zeros(
            (n_batch, out_ch, h + 2 * (kh - 1), w + 2 * (kw - 1)), dtype=xpad.dtype
        )
        gz[:, :, kh - 1 : kh - 1 + h, kw - 1 : kw - 1 + w] = grad_out
        wflip = np.ascontiguousarray(weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grad_x = _run_conv(
            gz, wflip, np.zeros(in_ch, dtype=weights.dtype), policy.permutation(out_ch * kh * kw)
        )
    return grad_x, grad_w, grad_b


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0)


def relu_backward(grad: np.ndarray, z: np.ndarray) -> np.ndarray:
    return grad * (z > 0)


def _axis_coords(n_out: int, n_in: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Align-corners sample positions split into floor index + fraction."""
    if n_out < 2:
        raise ValueError(f"resample target must be >= 2 per dimension, got {n_out}")
    pos = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(pos.astype(np.int64), max(n_in - 2, 0))
    frac = (pos - i0).astype(dtype)
    return i0, frac


def resample_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of (B, C, H, W)."""
    h, w = x.shape[2], x.shape[3]
    y0, fy = _axis_coords(out_h, h, x.dtype)
    x0, fx = _axis_coords(out_w, w, x.dtype)
    r0 = x[:, :, y0, :]
    r1 = x[:, :, np.minimum(y0 + 1, h - 1), :]
    rows = r0 + (r1 - r0) * fy[None, None, :, None]
    c0 = rows[:, :, :, x0]
    c1 = rows[:, :, :, np.minimum(x0 + 1, w - 1)]
    return c0 + (c1 - c0) * fx[None, None, None, :]


def resample_bilinear_backward(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of resample_bilinear back to the (in_h, in_w) source grid."""
    out_h, out_w = grad.shape[2], grad.shape[3]
    y0, fy = _axis_coords(out_h, in_h, grad.dtype)
    x0, fx = _axis_coords(out_w, in_w, grad.dtype)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)

    gcols = np.zeros(grad.shape[:3] + (in_w,), dtype=grad.dtype)
    gfx = grad * fx[None, None, None, :]
    np.add.at(gcols, (slice(None), slice(None), slice(None), x0), grad - gfx)
    np.add.at(gcols, (slice(None), slice(None), slice(None), x1), gfx)

    gx = np.zeros(grad.shape[:2] + (in_h, in_w), dtype=grad.dtype)
    gfy = gcols * fy[None, None, :, None]
    np.add.at(gx, (slice(None), slice(None), y0), gcols - gfy)
    np.add.at(gx, (slice(None), slice(None), y1), gfy)
    return gx


def he_init(out_ch: int, in_ch: int, k: int, rng: np.random.Generator, dtype):
    """He-normal weights (std = sqrt(2/fan_in)) and zero biases.

    Drawn in float64 and cast, so single and double models built from
    the same seed start from the same values up to rounding.
    """
    fan_in = in_ch * k * k
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k))
    return w.astype(dtype), np.zeros(out_ch, dtype=dtype)
