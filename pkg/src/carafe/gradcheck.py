"""Central finite-difference checks of every analytic backward pass.

Each op is reduced to a scalar ``L = sum(r * f(inputs))`` with a random
cotangent ``r``; the analytic gradient comes from calling the op's backward
with ``grad_out = r``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import baselines as B
from .carafe import (
    CarafeConfig, CarafeParams, carafe_backward, carafe_forward, normalize_variant,
    normalize_variant_backward,
)
from .tensor import (
    conv2d_backward, conv2d_forward, he_normal, make_rng, softmax, softmax_backward,
)

EPS = 1e-5
TOLERANCE = 1e-5
# |a - n| is divided by max(|a|, |n|, DENOM_FLOOR); below the floor the
# difference quotient is dominated by round-off in L, not by the gradient
DENOM_FLOOR = 1e-6

# (sigma, k_up, k_encoder)
DEFAULT_CONFIGS = ((1, 1, 1), (2, 3, 1), (2, 5, 3), (3, 3, 3))


@dataclass(frozen=True)
class GradCheckResult:
    op: str
    tensor: str
    seed: int
    worst: float
    n_checked: int
    worst_index: tuple = ()

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.worst < tol


def relative_error(analytic, numeric, floor: float = DENOM_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def _pick(shape, rng, max_entries):
    total = int(np.prod(shape))
    if max_entries is None or total <= max_entries:
        flat = np.arange(total)
    else:
        flat = np.sort(rng.choice(total, size=max_entries, replace=False))
    return [np.unravel_index(i, shape) for i in flat]


def check_tensors(op, seed, loss, tensors: dict, analytic: dict, rng,
                  max_entries=None, eps=EPS) -> list[GradCheckResult]:
    """Compare ``analytic[name]`` to central differences of ``loss()``.

    ``loss`` must read the arrays in ``tensors``, which are perturbed in place.
    """
    results = []
    for name, arr in tensors.items():
        worst, worst_idx = 0.0, ()
        idxs = _pick(arr.shape, rng, max_entries)
        for idx in idxs:
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss()
            arr[idx] = orig - eps
            down = loss()
            arr[idx] = orig
            num = (up - down) / (2 * eps)
            err = float(relative_error(analytic[name][idx], num))
            if err > worst:
                worst, worst_idx = err, tuple(int(i) for i in idx)
        results.append(GradCheckResult(op, name, seed, worst, len(idxs), worst_idx))
    return results


# --------------------------------------------------------------------------
# per-op suites
# --------------------------------------------------------------------------

def check_conv2d(seed, max_entries=None, k=3):
    rng = make_rng(seed)
    x = rng.normal(size=(2, 4, 4))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    r = rng.normal(size=(3, 4, 4))
    gx, gw, gb = conv2d_backward(r, x, w)

    def loss():
        return float(np.sum(r * conv2d_forward(x, w, b)))

    return check_tensors("conv2d", seed, loss, {"input": x, "weight": w, "bias": b},
                         {"input": gx, "weight": gw, "bias": gb}, rng, max_entries)


def check_softmax(seed, max_entries=None, n=7):
    rng = make_rng(seed)
    v = rng.normal(size=n) * 2.0
    r = rng.normal(size=n)
    g = softmax_backward(r, softmax(v))

    def loss():
        return float(np.sum(r * softmax(v)))

    return check_tensors("softmax", seed, loss, {"values": v}, {"values": g}, rng, max_entries)


def check_normalizer(seed, mode, max_entries=None, n=9):
    rng = make_rng(seed)
    v = rng.normal(size=n) * 2.0
    r = rng.normal(size=n)
    g = normalize_variant_backward(r, v, normalize_variant(v, mode), mode)

    def loss():
        return float(np.sum(r * normalize_variant(v, mode)))

    return check_tensors(f"normalize[{mode}]", seed, loss, {"values": v}, {"values": g},
                         rng, max_entries)


def carafe_instance(seed, sigma, k_up, k_encoder, channels=3, c_mid=2, h=4, w=3,
                    normalizer="softmax"):
    rng = make_rng(seed)
    cfg = CarafeConfig(channels, sigma=sigma, k_up=k_up, k_encoder=k_encoder,
                       c_mid=c_mid, normalizer=normalizer)
    params = CarafeParams.init(cfg, rng)
    # random biases so the zero-init path is not the only one exercised
    params.encoder_bias[:] = rng.normal(size=cfg.c_up) * 0.5
    if params.compressor_bias is not None:
        params.compressor_bias[:] = rng.normal(size=cfg.c_mid) * 0.5
    x = rng.normal(size=(channels, h, w))
    return rng, cfg, params, x


def check_carafe(seed, sigma, k_up, k_encoder, max_entries=None, **kw):
    rng, cfg, params, x = carafe_instance(seed, sigma, k_up, k_encoder, **kw)
    y, cache = carafe_forward(x, params, cfg)
    r = rng.normal(size=y.shape)
    gx, gp = carafe_backward(r, cache, params, cfg)

    def loss():
        return float(np.sum(r * carafe_forward(x, params, cfg)[0]))

    tensors = {"input": x, **params.named()}
    analytic = {"input": gx, **gp.named()}
    tag = f"carafe[s={sigma},k_up={k_up},k_enc={k_encoder}"
    tag += "" if cfg.normalizer == "softmax" else f",{cfg.normalizer}"
    tag += ",no-compressor]" if cfg.c_mid is None else "]"
    return check_tensors(tag, seed, loss, tensors, analytic, rng, max_entries)


def check_deconv(seed, max_entries=None):
    rng = make_rng(seed)
    x = rng.normal(size=(2, 3, 3))
    w = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(3, 6, 6))
    gx, gw, gb = B.deconv_backward(r, x, w)

    def loss():
        return float(np.sum(r * B.deconv(x, w, b)))

    return check_tensors("deconv", seed, loss, {"input": x, "weight": w, "bias": b},
                         {"input": gx, "weight": gw, "bias": gb}, rng, max_entries)


def check_pixel_shuffle(seed, max_entries=None, sigma=2):
    rng = make_rng(seed)
    x = rng.normal(size=(2, 3, 3))
    w = rng.normal(size=(sigma * sigma * 2, 2, 3, 3))
    b = rng.normal(size=sigma * sigma * 2)
    r = rng.normal(size=(2, 3 * sigma, 3 * sigma))
    gx, gw, gb = B.pixel_shuffle_backward(r, x, w, sigma)

    def loss():
        return float(np.sum(r * B.pixel_shuffle_up(x, w, b, sigma)))

    return check_tensors("pixel_shuffle", seed, loss, {"input": x, "weight": w, "bias": b},
                         {"input": gx, "weight": gw, "bias": gb}, rng, max_entries)


def check_spatial_attention(seed, max_entries=None, sigma=2):
    rng = make_rng(seed)
    x = rng.normal(size=(2, 3, 3))
    w = he_normal(rng, (1, 2, 3, 3))
    b = rng.normal(size=1)
    r = rng.normal(size=(2, 3 * sigma, 3 * sigma))
    gx, gw, gb = B.spatial_attention_backward(r, x, w, b, sigma)

    def loss():
        return float(np.sum(r * B.spatial_attention_up(x, w, b, sigma)))

    return check_tensors("spatial_attention", seed, loss,
                         {"input": x, "weight": w, "bias": b},
                         {"input": gx, "weight": gw, "bias": gb}, rng, max_entries)


def check_interp_conv(seed, mode, max_entries=None, sigma=2):
    rng = make_rng(seed)
    x = rng.normal(size=(2, 3, 3))
    w = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=2)
    r = rng.normal(size=(2, 3 * sigma, 3 * sigma))
    gx, gw, gb = B.interp_conv_backward(r, x, sigma, w, mode)
    fwd = B.nearest_conv if mode == "nearest" else B.bilinear_conv

    def loss():
        return float(np.sum(r * fwd(x, sigma, w, b)))

    return check_tensors(f"{mode}_conv", seed, loss, {"input": x, "weight": w, "bias": b},
                         {"input": gx, "weight": gw, "bias": gb}, rng, max_entries)


def run_suite(seeds=range(20), configs=DEFAULT_CONFIGS, max_entries=48):
    """Every gradient check over ``seeds``; returns a flat list of results."""
    results = []
    for seed in seeds:
        results += check_conv2d(seed, max_entries)
        results += check_softmax(seed)
        for mode in ("sigmoid", "sigmoid_normalized"):
            results += check_normalizer(seed, mode)
        for sigma, k_up, k_enc in configs:
            results += check_carafe(seed, sigma, k_up, k_enc, max_entries)
        results += check_carafe(seed, 2, 3, 1, max_entries, c_mid=None)
        results += check_carafe(seed, 2, 3, 3, max_entries, normalizer="sigmoid_normalized")
        results += check_deconv(seed, max_entries)
        results += check_pixel_shuffle(seed, max_entries)
        results += check_spatial_attention(seed, max_entries)
        results += check_interp_conv(seed, "nearest", max_entries)
        results += check_interp_conv(seed, "bilinear", max_entries)
    return results


def worst_by_op(results) -> dict[str, GradCheckResult]:
    worst: dict[str, GradCheckResult] = {}
    for r in results:
        if r.op not in worst or r.worst > worst[r.op].worst:
            worst[r.op] = r
    return worst
