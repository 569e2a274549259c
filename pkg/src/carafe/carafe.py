"""Content-aware reassembly of features.

Kernel prediction (channel compressor -> content encoder -> normalizer),
reassembly of each source neighbourhood with the predicted kernels, the
analytic backward pass through both, and two small compositions built on top
(mask reassembly and staged bilinear + CARAFE upsampling).

Kernel field layout: channel ``u = p * k_up**2 + q`` where
``p = subpixel_index(i' % sigma, j' % sigma)`` selects the target sub-pixel and
``q = n_row * k_up + n_col`` walks the k_up x k_up window row-major.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .baselines import bilinear_resize, bilinear_resize_backward, depth_to_space
from .errors import ConfigError, ContractError, ShapeError
from .tensor import (
    as_tensor, conv2d_backward, conv2d_forward, he_normal, sigmoid, softmax,
    read_archive, softmax_backward, tally, write_archive, zero_pad,
)

NORMALIZERS = ("softmax", "sigmoid", "sigmoid_normalized")
NORMALIZATION_TOL = 1e-4


@dataclass(frozen=True)
class CarafeConfig:
    in_channels: int
    sigma: int = 2
    k_up: int = 5
    k_encoder: int = 3
    c_mid: int | None = 64  # None removes the channel compressor
    normalizer: str = "softmax"

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if int(self.sigma) != self.sigma or self.sigma < 1:
            raise ConfigError(f"sigma must be an integer >= 1, got {self.sigma}")
        for name in ("k_up", "k_encoder"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be odd and >= 1, got {k}")
        if self.c_mid is not None and not 1 <= self.c_mid <= self.in_channels:
            raise ConfigError(f"c_mid must lie in [1, {self.in_channels}], got {self.c_mid}")
        if self.normalizer not in NORMALIZERS:
            raise ConfigError(f"normalizer must be one of {NORMALIZERS}")

    @property
    def c_up(self) -> int:
        return self.sigma ** 2 * self.k_up ** 2

    @property
    def encoder_in(self) -> int:
        return self.in_channels if self.c_mid is None else self.c_mid

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={'none' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CarafeConfig":
        kw = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"malformed config line {raw!r}")
            if key == "normalizer":
                kw[key] = value
            elif key == "c_mid" and value.lower() in ("none", "n/a"):
                kw[key] = None
            elif key in {f.name for f in fields(cls)}:
                kw[key] = int(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kw)


@dataclass
class CarafeParams:
    encoder_weight: np.ndarray
    encoder_bias: np.ndarray
    compressor_weight: np.ndarray | None = None
    compressor_bias: np.ndarray | None = None

    @classmethod
    def init(cls, cfg: CarafeConfig, rng) -> "CarafeParams":
        comp_w = comp_b = None
        if cfg.c_mid is not None:
            comp_w = he_normal(rng, (cfg.c_mid, cfg.in_channels, 1, 1))
            comp_b = np.zeros(cfg.c_mid)
        k = cfg.k_encoder
        enc_w = he_normal(rng, (cfg.c_up, cfg.encoder_in, k, k))
        return cls(enc_w, np.zeros(cfg.c_up), comp_w, comp_b)

    @classmethod
    def zeros(cls, cfg: CarafeConfig) -> "CarafeParams":
        comp_w = comp_b = None
        if cfg.c_mid is not None:
            comp_w = np.zeros((cfg.c_mid, cfg.in_channels, 1, 1))
            comp_b = np.zeros(cfg.c_mid)
        k = cfg.k_encoder
        return cls(np.zeros((cfg.c_up, cfg.encoder_in, k, k)), np.zeros(cfg.c_up),
                   comp_w, comp_b)

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        if self.compressor_weight is not None:
            out["compressor_weight"] = self.compressor_weight
            out["compressor_bias"] = self.compressor_bias
        out["encoder_weight"] = self.encoder_weight
        out["encoder_bias"] = self.encoder_bias
        return out

    def count(self) -> int:
        return sum(v.size for v in self.named().values())

    def check(self, cfg: CarafeConfig) -> None:
        ref = CarafeParams.zeros(cfg).named()
        got = self.named()
        if ref.keys() != got.keys():
            raise ShapeError(f"params {sorted(got)} do not match config {sorted(ref)}")
        for name, arr in ref.items():
            if np.shape(got[name]) != arr.shape:
                raise ShapeError(f"{name} has shape {np.shape(got[name])}, expected {arr.shape}")

    def save(self, path, cfg: CarafeConfig) -> None:
        write_archive(path, self.named(), meta={"config": cfg.to_text()})

    @classmethod
    def load(cls, path) -> tuple["CarafeParams", CarafeConfig]:
        tensors, meta = read_archive(path)
        cfg = CarafeConfig.from_text(meta["config"])
        params = cls(**tensors)
        params.check(cfg)
        return params, cfg


@dataclass
class KernelField:
    """Predicted kernels: ``raw`` encoder output and ``normalized`` weights,
    both (sigma^2 * k_up^2, H, W)."""

    raw: np.ndarray
    normalized: np.ndarray
    sigma: int
    k_up: int

    def groups(self) -> np.ndarray:
        """Normalized kernels viewed as (sigma^2, k_up^2, H, W)."""
        return _grouped(self.normalized, self.sigma, self.k_up)

    def at(self, i: int, j: int, py: int = 0, px: int = 0) -> np.ndarray:
        """The k_up x k_up kernel used at source (i, j) for sub-pixel (py, px)."""
        p = py * self.sigma + px
        return self.groups()[p, :, i, j].reshape(self.k_up, self.k_up)

    def per_target(self) -> np.ndarray:
        """(k_up^2, sigma*H, sigma*W): the kernel applied at every target pixel."""
        return depth_to_space(self.normalized, self.sigma)


def _grouped(arr, sigma, k_up):
    c, h, w = arr.shape
    if c != sigma * sigma * k_up * k_up:
        raise ShapeError(f"kernel field has {c} channels, expected {sigma ** 2 * k_up ** 2}")
    return arr.reshape(sigma * sigma, k_up * k_up, h, w)


# --------------------------------------------------------------------------
# normalizers
# --------------------------------------------------------------------------

def normalize_variant(raw, mode: str = "softmax", axis: int = -1) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if mode == "softmax":
        return softmax(raw, axis=axis)
    if mode == "sigmoid":
        return sigmoid(raw)
    if mode == "sigmoid_normalized":
        s = sigmoid(raw)
        return s / s.sum(axis=axis, keepdims=True)
    raise ConfigError(f"unknown normalizer {mode!r}")


def normalize_variant_backward(grad_out, raw, out, mode: str = "softmax",
                               axis: int = -1) -> np.ndarray:
    if mode == "softmax":
        return softmax_backward(grad_out, out, axis=axis)
    if mode == "sigmoid":
        return grad_out * out * (1.0 - out)
    if mode == "sigmoid_normalized":
        s = sigmoid(raw)
        total = s.sum(axis=axis, keepdims=True)
        g_s = (grad_out - (grad_out * out).sum(axis=axis, keepdims=True)) / total
        return g_s * s * (1.0 - s)
    raise ConfigError(f"unknown normalizer {mode!r}")


# --------------------------------------------------------------------------
# kernel prediction
# --------------------------------------------------------------------------

def _check_input(x, cfg):
    x = as_tensor(x, 3, "x")
    if x.shape[0] != cfg.in_channels:
        raise ShapeError(f"x has {x.shape[0]} channels, config expects {cfg.in_channels}")
    return x


def _predict(x, params: CarafeParams, cfg: CarafeConfig):
    params.check(cfg)
    if cfg.c_mid is None:
        compressed = x
    else:
        compressed = conv2d_forward(x, params.compressor_weight, params.compressor_bias)
    raw = conv2d_forward(compressed, params.encoder_weight, params.encoder_bias)
    grouped = _grouped(raw, cfg.sigma, cfg.k_up)
    normalized = normalize_variant(grouped, cfg.normalizer, axis=1).reshape(raw.shape)
    return compressed, KernelField(raw, normalized, cfg.sigma, cfg.k_up)


def predict_kernels(x, params: CarafeParams, cfg: CarafeConfig) -> KernelField:
    x = _check_input(x, cfg)
    return _predict(x, params, cfg)[1]


# --------------------------------------------------------------------------
# reassembly
# --------------------------------------------------------------------------

def _source_windows(x, k):
    """(C, H, W) -> (C, H, W, k*k) zero-padded neighbourhoods, row-major."""
    c, h, w = x.shape
    r = k // 2
    xp = zero_pad(x, r)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return win.reshape(c, h, w, k * k)


def _kernel_array(kernels, sigma, k_up, h, w):
    arr = kernels.normalized if isinstance(kernels, KernelField) else np.asarray(kernels, dtype=np.float64)
    if arr.shape != (sigma * sigma * k_up * k_up, h, w):
        raise ShapeError(f"kernel field shape {arr.shape} does not match "
                         f"{(sigma * sigma * k_up * k_up, h, w)}")
    return arr.reshape(sigma * sigma, k_up * k_up, h, w)


def check_normalized(groups: np.ndarray, tol: float = NORMALIZATION_TOL) -> None:
    sums = groups.sum(axis=1)
    worst = float(np.max(np.abs(sums - 1.0)))
    if worst > tol:
        raise ContractError(f"reassembly kernels are not normalized (max |sum-1| = {worst:.3g})")


def _reassemble(x, groups, sigma, k_up):
    c, h, w = x.shape
    win = _source_windows(x, k_up).transpose(1, 2, 0, 3)
    # out[c, p, i, j] = sum_q win[c, i, j, q] * K[p, q, i, j], batched over (i, j)
    out = np.matmul(win, groups.transpose(2, 3, 1, 0)).transpose(2, 3, 0, 1)
    tally("reassemble", 2 * k_up * k_up * sigma * sigma * c * h * w)
    return (out.reshape(c, sigma, sigma, h, w)
               .transpose(0, 3, 1, 4, 2)
               .reshape(c, sigma * h, sigma * w))


def reassemble(x, kernels, cfg: CarafeConfig, check: bool = True) -> np.ndarray:
    """out[c, i', j'] = sum_{n,m} W(n, m) * x[c, i + n, j + m], i = i' // sigma.

    Out-of-bounds taps read zero; kernels are not renormalized at borders.
    """
    x = as_tensor(x, 3, "x")
    _, h, w = x.shape
    groups = _kernel_array(kernels, cfg.sigma, cfg.k_up, h, w)
    if check:
        check_normalized(groups)
    return _reassemble(x, groups, cfg.sigma, cfg.k_up)


def reassemble_backward(grad_out, x, kernels, cfg: CarafeConfig):
    """Return (grad_x, grad_kernels) for :func:`reassemble`.

    ``grad_kernels`` uses the kernel-field layout (sigma^2 * k_up^2, H, W).
    """
    x = as_tensor(x, 3, "x")
    c, h, w = x.shape
    s, k = cfg.sigma, cfg.k_up
    groups = _kernel_array(kernels, s, k, h, w)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (c, s * h, s * w):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(c, s * h, s * w)}")
    g = grad_out.reshape(c, h, s, w, s).transpose(0, 2, 4, 1, 3).reshape(c, s * s, h, w)
    win = _source_windows(x, k).transpose(1, 2, 0, 3)          # (h, w, c, q)
    g_hw = g.transpose(2, 3, 0, 1)                             # (h, w, c, p)
    grad_k = np.matmul(g_hw.transpose(0, 1, 3, 2), win).transpose(2, 3, 0, 1)
    grad_win = np.matmul(g_hw, groups.transpose(2, 3, 0, 1))   # (h, w, c, q)
    grad_win = np.ascontiguousarray(grad_win.transpose(3, 2, 0, 1))
    r = k // 2
    gpad = np.zeros((c, h + 2 * r, w + 2 * r))
    for q in range(k * k):
        dy, dx = divmod(q, k)
        gpad[:, dy:dy + h, dx:dx + w] += grad_win[q]
    grad_x = gpad[:, r:r + h, r:r + w].copy()
    return grad_x, grad_k.reshape(s * s * k * k, h, w)


def reassemble_mask(mask, kernels, cfg: CarafeConfig) -> np.ndarray:
    """Upsample a 1-channel [0, 1] mask with the feature map's kernels."""
    mask = as_tensor(mask, 3, "mask")
    if mask.shape[0] != 1:
        raise ShapeError(f"mask must have one channel, got {mask.shape[0]}")
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise ContractError("mask values must lie in [0, 1]")
    return reassemble(mask, kernels, cfg)


# --------------------------------------------------------------------------
# full operator
# --------------------------------------------------------------------------

@dataclass
class CarafeCache:
    x: np.ndarray
    compressed: np.ndarray
    kernels: KernelField


def carafe_forward(x, params: CarafeParams, cfg: CarafeConfig):
    """Upsample ``x`` by ``cfg.sigma``; returns ``(y, cache)``."""
    x = _check_input(x, cfg)
    compressed, field = _predict(x, params, cfg)
    y = reassemble(x, field, cfg, check=cfg.normalizer != "sigmoid")
    return y, CarafeCache(x, compressed, field)


def carafe_backward(grad_y, cache: CarafeCache, params: CarafeParams, cfg: CarafeConfig):
    """Return ``(grad_x, grad_params)``; grad_params is a :class:`CarafeParams`.

    ``grad_x`` sums the reassembly-tap path and the kernel-prediction path.
    """
    field = cache.kernels
    gx_tap, g_norm = reassemble_backward(grad_y, cache.x, field, cfg)
    s, k = cfg.sigma, cfg.k_up
    g_raw = normalize_variant_backward(
        _grouped(g_norm, s, k), _grouped(field.raw, s, k), field.groups(),
        cfg.normalizer, axis=1,
    ).reshape(field.raw.shape)
    g_comp, g_enc_w, g_enc_b = conv2d_backward(g_raw, cache.compressed, params.encoder_weight)
    if cfg.c_mid is None:
        return gx_tap + g_comp, CarafeParams(g_enc_w, g_enc_b)
    gx_pred, g_comp_w, g_comp_b = conv2d_backward(g_comp, cache.x, params.compressor_weight)
    return gx_tap + gx_pred, CarafeParams(g_enc_w, g_enc_b, g_comp_w, g_comp_b)


def staged_upsample(x, target_hw, params: CarafeParams, cfg: CarafeConfig) -> np.ndarray:
    """Bilinear resize to half the target size, then CARAFE x2."""
    ht, wt = (int(v) for v in target_hw)
    if ht % 2 or wt % 2 or ht < 2 or wt < 2:
        raise ConfigError(f"target extents must be even and positive, got {target_hw}")
    if cfg.sigma != 2:
        raise ConfigError("staged upsampling finishes with a sigma=2 CARAFE")
    x = _check_input(x, cfg)
    if x.shape[1:] == (ht // 2, wt // 2):
        mid = x
    else:
        mid = bilinear_resize(x, (ht // 2, wt // 2))
    return carafe_forward(mid, params, cfg)[0]


def staged_upsample_backward(grad_y, x, target_hw, params, cfg):
    x = _check_input(x, cfg)
    ht, wt = target_hw
    mid = x if x.shape[1:] == (ht // 2, wt // 2) else bilinear_resize(x, (ht // 2, wt // 2))
    _, cache = carafe_forward(mid, params, cfg)
    g_mid, g_params = carafe_backward(grad_y, cache, params, cfg)
    if mid is x:
        return g_mid, g_params
    return bilinear_resize_backward(g_mid, x.shape[1:]), g_params
