"""Direct loop evaluations used as independent references.

Deliberately written as plain index loops over scalars; slow, but each line
is a transcription of the defining sum.
"""
from __future__ import annotations

import numpy as np


def conv2d_loop(x, weight, bias):
    c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    p = (k - 1) // 2
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for y in range(h):
            for xx in range(w):
                acc = bias[o]
                for c in range(c_in):
                    for dy in range(k):
                        for dx in range(k):
                            sy, sx = y + dy - p, xx + dx - p
                            if 0 <= sy < h and 0 <= sx < w:
                                acc += weight[o, c, dy, dx] * x[c, sy, sx]
                out[o, y, xx] = acc
    return out


def nearest_loop(x, sigma):
    c, h, w = x.shape
    out = np.zeros((c, sigma * h, sigma * w))
    for ch in range(c):
        for ti in range(sigma * h):
            for tj in range(sigma * w):
                out[ch, ti, tj] = x[ch, ti // sigma, tj // sigma]
    return out


def reassemble_loop(x, kernels, sigma, k_up):
    """X'[c, i', j'] = sum_{n, m = -r..r} W_{l'}(n, m) X[c, i + n, j + m]."""
    c, h, w = x.shape
    r = k_up // 2
    out = np.zeros((c, sigma * h, sigma * w))
    for ti in range(sigma * h):
        for tj in range(sigma * w):
            i, j = ti // sigma, tj // sigma
            p = (ti % sigma) * sigma + (tj % sigma)
            for ch in range(c):
                acc = 0.0
                for n in range(-r, r + 1):
                    for m in range(-r, r + 1):
                        si, sj = i + n, j + m
                        if 0 <= si < h and 0 <= sj < w:
                            q = (n + r) * k_up + (m + r)
                            acc += kernels[p * k_up * k_up + q, i, j] * x[ch, si, sj]
                out[ch, ti, tj] = acc
    return out


def deconv_scatter_loop(x, weight, bias):
    """Stride-2, pad-1, output-pad-1, 3x3 transposed conv by explicit scatter."""
    c_in, h, w = x.shape
    c_out = weight.shape[1]
    out = np.zeros((c_out, 2 * h, 2 * w))
    for c in range(c_in):
        for i in range(h):
            for j in range(w):
                for o in range(c_out):
                    for dy in range(3):
                        for dx in range(3):
                            y, xx = 2 * i + dy - 1, 2 * j + dx - 1
                            if 0 <= y < 2 * h and 0 <= xx < 2 * w:
                                out[o, y, xx] += x[c, i, j] * weight[c, o, dy, dx]
    if bias is not None:
        out += np.asarray(bias)[:, None, None]
    return out


def box_filter_nearest(x, sigma, k):
    """Nearest upsampling of the zero-padded k x k mean filter of ``x``."""
    c, h, w = x.shape
    r = k // 2
    box = np.zeros_like(x, dtype=np.float64)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for n in range(-r, r + 1):
                    for m in range(-r, r + 1):
                        if 0 <= i + n < h and 0 <= j + m < w:
                            acc += x[ch, i + n, j + m]
                box[ch, i, j] = acc / (k * k)
    return nearest_loop(box, sigma)
