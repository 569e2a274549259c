"""Closed-form FLOPs and parameter counts for every upsampler.

FLOPs are reported per *source* pixel, i.e. per pixel of the map before
upsampling. A multiply-accumulate counts 2, a conv bias add counts 2 via the
``(... + 1)`` factors, an interpolation tap counts 2 per channel, and the
spatial-attention rescale counts 1 per element.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .baselines import TABLE_KINDS, UpsamplerKind
from .carafe import CarafeConfig
from .errors import ConfigError

CSV_COLUMNS = ("kind", "flops_exact", "flops_rounded", "params_exact", "params_rounded")

# a whole number of k/M is printed when it is this close to the exact count
ROUND_WHOLE_REL_TOL = 0.05


@dataclass(frozen=True)
class CostReport:
    kind: UpsamplerKind
    c_in: int
    sigma: int
    flops_per_source_pixel: int
    params: int
    config: CarafeConfig | None = None

    @property
    def flops_rounded(self) -> str:
        return format_count(self.flops_per_source_pixel)

    @property
    def params_rounded(self) -> str:
        return format_count(self.params)


def format_count(n: int) -> str:
    """Compact display of a count: ``0``, ``8k``, ``2.3k``, ``199k``, ``4.7M``.

    Below 1000 the integer is printed. Otherwise the count is scaled to k or
    M and shown as a whole number if that is within 5% of the exact value,
    else with one decimal.
    """
    n = int(n)
    if n < 1000:
        return str(n)
    unit, scale = ("M", 1e6) if n >= 1_000_000 else ("k", 1e3)
    v = n / scale
    whole = round(v)
    if abs(whole - v) <= ROUND_WHOLE_REL_TOL * v:
        return f"{whole}{unit}"
    return f"{v:.1f}{unit}"


def _conv(c_in: int, c_out: int, k: int) -> tuple[int, int]:
    """(FLOPs per output pixel, params) of a biased k x k conv."""
    return 2 * (k * k * c_in + 1) * c_out, k * k * c_in * c_out + c_out


def carafe_cost(c_in: int, cfg: CarafeConfig) -> CostReport:
    s2k2 = cfg.c_up
    if cfg.c_mid is None:
        comp_flops = comp_params = 0
        c_m = c_in
    else:
        c_m = cfg.c_mid
        comp_flops = 2 * (c_in + 1) * c_m
        comp_params = c_in * c_m + c_m
    enc_flops = 2 * (c_m * cfg.k_encoder ** 2 + 1) * s2k2
    enc_params = cfg.k_encoder ** 2 * c_m * s2k2 + s2k2
    reassembly = 2 * s2k2 * c_in
    return CostReport(UpsamplerKind.CARAFE, c_in, cfg.sigma,
                      comp_flops + enc_flops + reassembly,
                      comp_params + enc_params, cfg)


def baseline_cost(kind: UpsamplerKind, c_in: int, sigma: int) -> CostReport:
    s2 = sigma * sigma
    bilinear = 2 * 4 * c_in * s2
    conv_flops, conv_params = _conv(c_in, c_in, 3)
    if kind is UpsamplerKind.NEAREST:
        flops, params = 0, 0
    elif kind is UpsamplerKind.BILINEAR:
        flops, params = bilinear, 0
    elif kind is UpsamplerKind.NEAREST_CONV:
        flops, params = s2 * conv_flops, conv_params
    elif kind is UpsamplerKind.BILINEAR_CONV:
        flops, params = bilinear + s2 * conv_flops, conv_params
    elif kind is UpsamplerKind.DECONV:
        flops, params = conv_flops, conv_params
    elif kind is UpsamplerKind.PIXEL_SHUFFLE:
        flops, params = _conv(c_in, s2 * c_in, 3)
    elif kind is UpsamplerKind.SPATIAL_ATTENTION:
        att_flops, params = _conv(c_in, 1, 3)
        flops = bilinear + s2 * att_flops + s2 * c_in
    else:
        raise ConfigError(f"no closed-form baseline cost for {kind!r}")
    return CostReport(kind, c_in, sigma, flops, params)


def cost_for(kind: UpsamplerKind, c_in: int, sigma: int,
             carafe_cfg: CarafeConfig | None = None) -> CostReport:
    if kind is UpsamplerKind.CARAFE:
        if carafe_cfg is None:
            carafe_cfg = CarafeConfig(c_in, sigma=sigma, c_mid=min(64, c_in))
        return carafe_cost(c_in, carafe_cfg)
    return baseline_cost(kind, c_in, sigma)


def cost_table(c_in: int = 256, sigma: int = 2, kinds=TABLE_KINDS,
               carafe_cfg: CarafeConfig | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for kind in kinds:
        r = cost_for(kind, c_in, sigma, carafe_cfg)
        writer.writerow([kind.label, r.flops_per_source_pixel, r.flops_rounded,
                         r.params, r.params_rounded])
    return buf.getvalue()
