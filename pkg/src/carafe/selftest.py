"""Fast invariant suite behind ``carafe selftest``."""
from __future__ import annotations

import numpy as np

from . import oracles
from .baselines import TABLE_KINDS, UpsamplerKind, nearest
from .carafe import (
    CarafeConfig, CarafeParams, carafe_forward, predict_kernels, reassemble,
)
from .cost import carafe_cost, cost_for, cost_table
from .tensor import conv2d_forward, count_flops, make_rng
from .upsamplers import make_upsampler


def _random_case(seed, sigma, k_up, k_encoder, channels=3, h=5, w=4, scale=1.0):
    rng = make_rng(seed)
    cfg = CarafeConfig(channels, sigma=sigma, k_up=k_up, k_encoder=k_encoder,
                       c_mid=min(2, channels))
    params = CarafeParams.init(cfg, rng)
    params.encoder_weight *= scale
    params.encoder_bias[:] = rng.normal(size=cfg.c_up) * scale
    x = rng.normal(size=(channels, h, w))
    return cfg, params, x


CONFIGS = ((1, 1, 1), (2, 3, 1), (2, 5, 3), (3, 3, 3))


def check_cost_golden(golden: str):
    ok = cost_table() == golden
    r = carafe_cost(256, CarafeConfig(256))
    ok &= (r.flops_per_source_pixel, r.params) == (199_496, 74_148)
    return ok, f"CARAFE {r.flops_per_source_pixel} FLOPs / {r.params} params; CSV match={cost_table() == golden}"


def check_normalization(seeds):
    worst, in_range = 0.0, True
    for seed in seeds:
        for s, k, ke in CONFIGS:
            cfg, params, x = _random_case(seed, s, k, ke, scale=3.0)
            groups = predict_kernels(x, params, cfg).groups()
            worst = max(worst, float(np.abs(groups.sum(axis=1) - 1).max()))
            in_range &= bool(np.all((groups > 0) & (groups <= 1)))
    return worst <= 1e-6 and in_range, f"max |sum-1| = {worst:.2e}"


def check_constant_preservation(seeds):
    worst = 0.0
    for seed in seeds:
        for s, k, ke in CONFIGS:
            cfg, params, _ = _random_case(seed, s, k, ke, h=7, w=7)
            x = np.full((3, 7, 7), 2.5)
            y, _ = carafe_forward(x, params, cfg)
            r = k // 2
            inner = y[:, r * s:(7 - r) * s, r * s:(7 - r) * s]
            worst = max(worst, float(np.abs(inner - 2.5).max()))
    return worst <= 1e-10, f"max interior deviation {worst:.2e}"


def check_degeneracy(seeds):
    worst = 0.0
    for seed in seeds:
        for s in (1, 2, 3):
            cfg, params, x = _random_case(seed, s, 1, 3, scale=5.0)
            y, _ = carafe_forward(x, params, cfg)
            worst = max(worst, float(np.abs(y - nearest(x, s)).max()))
    return worst <= 1e-12, f"k_up=1 vs nearest max diff {worst:.2e}"


def check_oracle(seeds):
    worst = 0.0
    for seed in seeds:
        for s, k, ke in CONFIGS:
            cfg, params, x = _random_case(seed, s, k, ke)
            field = predict_kernels(x, params, cfg)
            fast = reassemble(x, field, cfg)
            slow = oracles.reassemble_loop(x, field.normalized, s, k)
            worst = max(worst, float(np.abs(fast - slow).max()))
    return worst <= 1e-12, f"vectorized vs loop max diff {worst:.2e}"


def check_degenerate_kernels(seeds):
    worst = 0.0
    for seed in seeds:
        rng = make_rng(seed)
        for s, k in ((2, 3), (2, 5), (3, 3)):
            cfg = CarafeConfig(2, sigma=s, k_up=k, k_encoder=1, c_mid=1)
            x = rng.normal(size=(2, 4, 5))
            delta = np.zeros((s * s, k * k, 4, 5))
            delta[:, (k * k) // 2] = 1.0
            d = reassemble(x, delta.reshape(-1, 4, 5), cfg) - nearest(x, s)
            uniform = np.full((s * s * k * k, 4, 5), 1.0 / (k * k))
            u = reassemble(x, uniform, cfg) - oracles.box_filter_nearest(x, s, k)
            worst = max(worst, float(np.abs(d).max()), float(np.abs(u).max()))
    return worst <= 1e-12, f"delta/uniform kernel max diff {worst:.2e}"


def check_conv_oracle(seeds):
    worst = 0.0
    for seed in seeds:
        rng = make_rng(seed)
        x = rng.normal(size=(2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        worst = max(worst, float(np.abs(conv2d_forward(x, w, b) - oracles.conv2d_loop(x, w, b)).max()))
    return worst <= 1e-12, f"conv2d vs loop max diff {worst:.2e}"


def check_flop_counter(channels=8):
    rng = make_rng(0)
    h, w = 3, 4
    x = rng.normal(size=(channels, h, w))
    bad = []
    for kind in TABLE_KINDS:
        up = make_upsampler(kind, channels, 2, rng)
        with count_flops() as counter:
            up.forward(x)
        expected = cost_for(kind, channels, 2).flops_per_source_pixel * h * w
        if counter.total != expected:
            bad.append(f"{kind.value}: counted {counter.total} != {expected}")
    return not bad, "; ".join(bad) or f"all {len(TABLE_KINDS)} kinds exact at C={channels}"


def run_selftest(golden: str, seeds: int = 20):
    seed_range = range(seeds)
    checks = [
        ("cost golden values", lambda: check_cost_golden(golden)),
        ("kernel normalization", lambda: check_normalization(seed_range)),
        ("interior constant preservation", lambda: check_constant_preservation(seed_range)),
        ("k_up=1 degeneracy", lambda: check_degeneracy(seed_range)),
        ("reassembly oracle equivalence", lambda: check_oracle(seed_range)),
        ("delta/uniform kernels", lambda: check_degenerate_kernels(seed_range)),
        ("conv2d oracle equivalence", lambda: check_conv_oracle(seed_range)),
        ("instrumented FLOPs", check_flop_counter),
    ]
    results = []
    for name, fn in checks:
        try:
            passed, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a traceback
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(passed), detail))
    return results
