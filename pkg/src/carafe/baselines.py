"""Comparison upsamplers: interpolation, conv-after-interpolation, transposed
convolution, pixel shuffle and spatial attention, each with its backward."""
from __future__ import annotations

import enum

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    as_tensor, conv2d_backward, conv2d_forward, mul_broadcast_channel,
    sigmoid, tally,
)


class UpsamplerKind(enum.Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"
    NEAREST_CONV = "nearest_conv"
    BILINEAR_CONV = "bilinear_conv"
    DECONV = "deconv"
    PIXEL_SHUFFLE = "pixel_shuffle"
    SPATIAL_ATTENTION = "spatial_attention"
    CARAFE = "carafe"

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, name: str) -> "UpsamplerKind":
        key = name.strip().lower().replace("-", "_")
        for kind in cls:
            if key in (kind.value, kind.label.lower()):
                return kind
        raise ConfigError(f"unknown upsampler kind {name!r}; "
                          f"choose from {', '.join(k.value for k in cls)}")


_LABELS = {
    UpsamplerKind.NEAREST: "Nearest",
    UpsamplerKind.BILINEAR: "Bilinear",
    UpsamplerKind.NEAREST_CONV: "N.C.",
    UpsamplerKind.BILINEAR_CONV: "B.C.",
    UpsamplerKind.DECONV: "Deconv",
    UpsamplerKind.PIXEL_SHUFFLE: "P.S.",
    UpsamplerKind.SPATIAL_ATTENTION: "S.A.",
    UpsamplerKind.CARAFE: "CARAFE",
}

# Row order of the upsampler comparison table.
TABLE_KINDS = tuple(UpsamplerKind)


def subpixel_index(py: int, px: int, sigma: int) -> int:
    """Channel-block index of sub-pixel (py, px) inside a sigma x sigma block.

    Shared by pixel shuffle and the CARAFE kernel layout.
    """
    return py * sigma + px


def _check_sigma(sigma):
    if int(sigma) != sigma or sigma < 1:
        raise ConfigError(f"sigma must be an integer >= 1, got {sigma}")
    return int(sigma)


# --------------------------------------------------------------------------
# interpolation
# --------------------------------------------------------------------------

def nearest(x, sigma: int) -> np.ndarray:
    x = as_tensor(x, 3, "x")
    s = _check_sigma(sigma)
    return np.repeat(np.repeat(x, s, axis=1), s, axis=2)


def nearest_backward(grad_out, sigma: int) -> np.ndarray:
    s = _check_sigma(sigma)
    c, hh, ww = grad_out.shape
    if hh % s or ww % s:
        raise ShapeError(f"grad extents {hh}x{ww} not divisible by sigma={s}")
    return grad_out.reshape(c, hh // s, s, ww // s, s).sum(axis=(2, 4))


def bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centers, edge clamped."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x, size) -> np.ndarray:
    x = as_tensor(x, 3, "x")
    ht, wt = (int(v) for v in size)
    if ht < 1 or wt < 1:
        raise ShapeError(f"target size must be positive, got {size}")
    ah = bilinear_weights(x.shape[1], ht)
    aw = bilinear_weights(x.shape[2], wt)
    tally("bilinear", 8 * x.shape[0] * ht * wt)
    return np.einsum("ih,chw,jw->cij", ah, x, aw)


def bilinear_resize_backward(grad_out, in_size) -> np.ndarray:
    h, w = in_size
    _, ht, wt = grad_out.shape
    ah = bilinear_weights(h, ht)
    aw = bilinear_weights(w, wt)
    return np.einsum("ih,cij,jw->chw", ah, grad_out, aw)


def bilinear(x, sigma: int) -> np.ndarray:
    s = _check_sigma(sigma)
    x = as_tensor(x, 3, "x")
    return bilinear_resize(x, (s * x.shape[1], s * x.shape[2]))


def bilinear_backward(grad_out, sigma: int) -> np.ndarray:
    s = _check_sigma(sigma)
    _, hh, ww = grad_out.shape
    return bilinear_resize_backward(grad_out, (hh // s, ww // s))


# --------------------------------------------------------------------------
# interpolation followed by a 3x3 conv
# --------------------------------------------------------------------------

def nearest_conv(x, sigma, weight, bias) -> np.ndarray:
    return conv2d_forward(nearest(x, sigma), weight, bias)


def bilinear_conv(x, sigma, weight, bias) -> np.ndarray:
    return conv2d_forward(bilinear(x, sigma), weight, bias)


def interp_conv_backward(grad_out, x, sigma, weight, mode: str = "nearest"):
    """Backward of ``nearest_conv`` / ``bilinear_conv``: (gx, gw, gb)."""
    if mode == "nearest":
        up = nearest(x, sigma)
    elif mode == "bilinear":
        up = bilinear(x, sigma)
    else:
        raise ConfigError(f"unknown interpolation mode {mode!r}")
    g_up, gw, gb = conv2d_backward(grad_out, up, weight)
    if mode == "nearest":
        gx = nearest_backward(g_up, sigma)
    else:
        gx = bilinear_backward(g_up, sigma)
    return gx, gw, gb


# --------------------------------------------------------------------------
# transposed convolution: 3x3, stride 2, padding 1, output padding 1
# --------------------------------------------------------------------------

DECONV_KERNEL = 3
DECONV_STRIDE = 2
DECONV_PADDING = 1


def _check_deconv(x, weight, bias=None):
    x = as_tensor(x, 3, "x")
    weight = as_tensor(weight, 4, "weight")
    k = DECONV_KERNEL
    if weight.shape[0] != x.shape[0] or weight.shape[2:] != (k, k):
        raise ShapeError(f"deconv weight must be (C_in={x.shape[0]}, C_out, 3, 3), "
                         f"got {weight.shape}")
    if bias is not None and np.shape(bias) != (weight.shape[1],):
        raise ShapeError(f"bias must have shape ({weight.shape[1]},)")
    return x, weight


def deconv(x, weight, bias=None) -> np.ndarray:
    """Transposed conv; ``weight`` is (C_in, C_out, 3, 3). Output is 2H x 2W.

    Each input pixel scatters ``value * weight`` onto a 3x3 patch anchored at
    (2i - 1, 2j - 1) of the output grid; taps falling outside are dropped.
    """
    x, weight = _check_deconv(x, weight, bias)
    c_in, h, w = x.shape
    c_out = weight.shape[1]
    k, s, p = DECONV_KERNEL, DECONV_STRIDE, DECONV_PADDING
    # canvas covers rows -p .. s*(h-1)+k-1-p; output keeps the first s*h of them
    canvas = np.zeros((c_out, s * (h - 1) + k, s * (w - 1) + k))
    for dy in range(k):
        for dx in range(k):
            contrib = np.tensordot(weight[:, :, dy, dx], x, axes=([0], [0]))
            canvas[:, dy:dy + s * h:s, dx:dx + s * w:s] += contrib
    out = np.zeros((c_out, s * h, s * w))
    hh = min(s * h, canvas.shape[1] - p)
    ww = min(s * w, canvas.shape[2] - p)
    out[:, :hh, :ww] = canvas[:, p:p + hh, p:p + ww]
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None, None]
    # counted on the source grid, bias charged once per source pixel
    tally("deconv", 2 * (k * k * c_in + 1) * c_out * h * w)
    return out


def deconv_backward(grad_out, x, weight):
    x, weight = _check_deconv(x, weight)
    c_in, h, w = x.shape
    c_out = weight.shape[1]
    k, s, p = DECONV_KERNEL, DECONV_STRIDE, DECONV_PADDING
    if grad_out.shape != (c_out, s * h, s * w):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(c_out, s * h, s * w)}")
    canvas = np.zeros((c_out, s * (h - 1) + k, s * (w - 1) + k))
    hh = min(s * h, canvas.shape[1] - p)
    ww = min(s * w, canvas.shape[2] - p)
    canvas[:, p:p + hh, p:p + ww] = grad_out[:, :hh, :ww]
    grad_x = np.zeros_like(x)
    grad_w = np.zeros_like(weight)
    for dy in range(k):
        for dx in range(k):
            g = canvas[:, dy:dy + s * h:s, dx:dx + s * w:s]
            grad_x += np.tensordot(weight[:, :, dy, dx], g, axes=([1], [0]))
            grad_w[:, :, dy, dx] = np.tensordot(x, g, axes=([1, 2], [1, 2]))
    grad_b = grad_out.sum(axis=(1, 2))
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# pixel shuffle
# --------------------------------------------------------------------------

def depth_to_space(x, sigma: int) -> np.ndarray:
    """(sigma^2 * G, H, W) -> (G, sigma*H, sigma*W).

    Input channel ``subpixel_index(py, px) * G + g`` lands at output
    ``[g, sigma*i + py, sigma*j + px]``.
    """
    s = _check_sigma(sigma)
    x = as_tensor(x, 3, "x")
    c, h, w = x.shape
    if c % (s * s):
        raise ShapeError(f"{c} channels not divisible by sigma^2={s * s}")
    g = c // (s * s)
    return x.reshape(s, s, g, h, w).transpose(2, 3, 0, 4, 1).reshape(g, s * h, s * w)


def space_to_depth(x, sigma: int) -> np.ndarray:
    s = _check_sigma(sigma)
    x = as_tensor(x, 3, "x")
    g, hh, ww = x.shape
    if hh % s or ww % s:
        raise ShapeError(f"extents {hh}x{ww} not divisible by sigma={s}")
    h, w = hh // s, ww // s
    return x.reshape(g, h, s, w, s).transpose(2, 4, 0, 1, 3).reshape(s * s * g, h, w)


def pixel_shuffle_up(x, weight, bias, sigma: int) -> np.ndarray:
    s = _check_sigma(sigma)
    x = as_tensor(x, 3, "x")
    if weight.shape[0] != s * s * x.shape[0]:
        raise ShapeError(f"pixel shuffle conv needs {s * s * x.shape[0]} output "
                         f"channels, got {weight.shape[0]}")
    return depth_to_space(conv2d_forward(x, weight, bias), s)


def pixel_shuffle_backward(grad_out, x, weight, sigma: int):
    g = space_to_depth(grad_out, sigma)
    return conv2d_backward(g, x, weight)


# --------------------------------------------------------------------------
# spatial attention
# --------------------------------------------------------------------------

def spatial_attention_up(x, weight, bias, sigma: int, return_cache: bool = False):
    """Bilinear upsample, then rescale by logistic(conv3x3(up)) over channels."""
    up = bilinear(x, sigma)
    if weight.shape[0] != 1:
        raise ShapeError("spatial attention conv must have one output channel")
    att = sigmoid(conv2d_forward(up, weight, bias))
    out = mul_broadcast_channel(up, att)
    if return_cache:
        return out, (up, att)
    return out


def spatial_attention_backward(grad_out, x, weight, bias, sigma: int, cache=None):
    if cache is None:
        _, cache = spatial_attention_up(x, weight, bias, sigma, return_cache=True)
    up, att = cache
    g_up = grad_out * att
    g_att = (grad_out * up).sum(axis=0, keepdims=True)
    g_z = g_att * att * (1.0 - att)
    g_up2, gw, gb = conv2d_backward(g_z, up, weight)
    gx = bilinear_backward(g_up + g_up2, sigma)
    return gx, gw, gb
