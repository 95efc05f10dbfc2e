"""Numba inner loops for convolution.

The accumulation order inside these kernels is the reproducibility
knob of the whole artifact, so they are written for a fixed, explicit
order rather than left to a BLAS call:

* conv_forward_kernel walks reduction terms in the order given by the
  offset table (the caller permutes that table, or not). Eight output
  pixels are accumulated per inner pass through independent scalar
  chains; each pixel still sees exactly the canonical per-pixel term
  sequence, so the result is bit-identical to a one-pixel-at-a-time
  loop while running ~2x faster.
* conv_grad_weights_kernel accumulates each weight gradient over
  (batch, row, column) with the batch order taken from an index table.

The `zero` argument seeds every accumulator with the array dtype so
float32 chains never promote to float64 inside the jitted code.
"""

from __future__ import annotations

from numba import njit


@njit(cache=True)
def conv_forward_kernel(xflat, wflat, bias, xoff, wp, zero, out):
    """Valid cross-correlation with an explicit term order.

    xflat: (B, C*Hp*Wp) flattened padded inputs
    wflat: (OC, L) weights, columns in the same order as xoff
    xoff:  (L,) flat offsets of each term relative to the pixel base
    wp:    padded row width (stride between input rows)
    zero:  scalar 0 in the working dtype (seeds the accumulators)
    out:   (B, OC, H, W) preallocated output
    """
    n_batch = xflat.shape[0]
    n_out = out.shape[1]
    h = out.shape[2]
    w = out.shape[3]
    n_terms = xoff.shape[0]
    for b in range(n_batch):
        xb = xflat[b]
        for oc in range(n_out):
            bv = bias[oc]
            for y in range(h):
                rowbase = y * wp
                x = 0
                while x + 8 <= w:
                    base = rowbase + x
                    a0 = zero
                    a1 = zero
                    a2 = zero
                    a3 = zero
                    a4 = zero
                    a5 = zero
                    a6 = zero
                    a7 = zero
                    for l in range(n_terms):
                        off = base + xoff[l]
                        wv = wflat[oc, l]
                        a0 += wv * xb[off]
                        a1 += wv * xb[off + 1]
                        a2 += wv * xb[off + 2]
                        a3 += wv * xb[off + 3]
                        a4 += wv * xb[off + 4]
                        a5 += wv * xb[off + 5]
                        a6 += wv * xb[off + 6]
                        a7 += wv * xb[off + 7]
                    out[b, oc, y, x] = bv + a0
                    out[b, oc, y, x + 1] = bv + a1
                    out[b, oc, y, x + 2] = bv + a2
                    out[b, oc, y, x + 3] = bv + a3
                    out[b, oc, y, x + 4] = bv + a4
                    out[b, oc, y, x + 5] = bv + a5
                    out[b, oc, y, x + 6] = bv + a6
                    out[b, oc, y, x + 7] = bv + a7
                    x += 8
                while x < w:
                    base = rowbase + x
                    acc = zero
                    for l in range(n_terms):
                        acc += wflat[oc, l] * xb[base + xoff[l]]
                    out[b, oc, y, x] = bv + acc
                    x += 1


@njit(cache=True)
def conv_grad_weights_kernel(xpad, gout, border, zero, gw, gb):
    """Weight/bias gradients, accumulated per weight over (batch, y, x).

    border gives the batch traversal order; the (y, x) order inside a
    sample is always canonical row-major.
    """
    n_chan = xpad.shape[1]
    n_out = gout.shape[1]
    h = gout.shape[2]
    w = gout.shape[3]
    kh = gw.shape[2]
    kw = gw.shape[3]
    n_batch = border.shape[0]
    for oc in range(n_out):
        for c in range(n_chan):
            for i in range(kh):
                for j in range(kw):
                    acc = zero
                    for t in range(n_batch):
                        b = border[t]
                        for y in range(h):
                            for x in range(w):
                                acc += gout[b, oc, y, x] * xpad[b, c, y + i, x + j]
                    gw[oc, c, i, j] = acc
        accb = zero
        for t in range(n_batch):
            b = border[t]
            for y in range(h):
                for x in range(w):
                    accb += gout[b, oc, y, x]
        gb[oc] = accb
