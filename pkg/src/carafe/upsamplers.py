"""Trainable wrappers giving every upsampler kind one forward/backward API."""
from __future__ import annotations

import numpy as np

from . import baselines as B
from .baselines import UpsamplerKind
from .carafe import CarafeConfig, CarafeParams, carafe_backward, carafe_forward
from .errors import ConfigError
from .tensor import conv2d_forward, he_normal


class Upsampler:
    """``forward(x) -> (y, cache)``; ``backward(g, cache) -> (gx, grads)``.

    ``params`` and ``grads`` are dicts keyed by parameter name.
    """

    kind: UpsamplerKind

    def __init__(self, channels: int, sigma: int):
        self.channels = channels
        self.sigma = sigma
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_y, cache):
        raise NotImplementedError

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


class Nearest(Upsampler):
    kind = UpsamplerKind.NEAREST

    def forward(self, x):
        return B.nearest(x, self.sigma), None

    def backward(self, grad_y, cache):
        return B.nearest_backward(grad_y, self.sigma), {}


class Bilinear(Upsampler):
    kind = UpsamplerKind.BILINEAR

    def forward(self, x):
        return B.bilinear(x, self.sigma), None

    def backward(self, grad_y, cache):
        return B.bilinear_backward(grad_y, self.sigma), {}


class _InterpConv(Upsampler):
    mode = "nearest"

    def __init__(self, channels, sigma, rng):
        super().__init__(channels, sigma)
        self.params = {"weight": he_normal(rng, (channels, channels, 3, 3)),
                       "bias": np.zeros(channels)}

    def forward(self, x):
        up = B.nearest(x, self.sigma) if self.mode == "nearest" else B.bilinear(x, self.sigma)
        return conv2d_forward(up, self.params["weight"], self.params["bias"]), x

    def backward(self, grad_y, x):
        gx, gw, gb = B.interp_conv_backward(grad_y, x, self.sigma, self.params["weight"], self.mode)
        return gx, {"weight": gw, "bias": gb}


class NearestConv(_InterpConv):
    kind = UpsamplerKind.NEAREST_CONV
    mode = "nearest"


class BilinearConv(_InterpConv):
    kind = UpsamplerKind.BILINEAR_CONV
    mode = "bilinear"


class Deconv(Upsampler):
    kind = UpsamplerKind.DECONV

    def __init__(self, channels, sigma, rng):
        if sigma != 2:
            raise ConfigError("deconv upsampler is fixed to sigma=2")
        super().__init__(channels, sigma)
        # fan-in of a stride-2 3x3 transposed conv is about C * 9 / 4 taps
        w = rng.normal(0.0, np.sqrt(2.0 / (channels * 9 / 4)), size=(channels, channels, 3, 3))
        self.params = {"weight": w, "bias": np.zeros(channels)}

    def forward(self, x):
        return B.deconv(x, self.params["weight"], self.params["bias"]), x

    def backward(self, grad_y, x):
        gx, gw, gb = B.deconv_backward(grad_y, x, self.params["weight"])
        return gx, {"weight": gw, "bias": gb}


class PixelShuffle(Upsampler):
    kind = UpsamplerKind.PIXEL_SHUFFLE

    def __init__(self, channels, sigma, rng):
        super().__init__(channels, sigma)
        c_out = sigma * sigma * channels
        self.params = {"weight": he_normal(rng, (c_out, channels, 3, 3)),
                       "bias": np.zeros(c_out)}

    def forward(self, x):
        return B.pixel_shuffle_up(x, self.params["weight"], self.params["bias"], self.sigma), x

    def backward(self, grad_y, x):
        gx, gw, gb = B.pixel_shuffle_backward(grad_y, x, self.params["weight"], self.sigma)
        return gx, {"weight": gw, "bias": gb}


class SpatialAttention(Upsampler):
    kind = UpsamplerKind.SPATIAL_ATTENTION

    def __init__(self, channels, sigma, rng):
        super().__init__(channels, sigma)
        self.params = {"weight": he_normal(rng, (1, channels, 3, 3)), "bias": np.zeros(1)}

    def forward(self, x):
        y, cache = B.spatial_attention_up(x, self.params["weight"], self.params["bias"],
                                          self.sigma, return_cache=True)
        return y, (x, cache)

    def backward(self, grad_y, cache):
        x, inner = cache
        gx, gw, gb = B.spatial_attention_backward(grad_y, x, self.params["weight"],
                                                  self.params["bias"], self.sigma, inner)
        return gx, {"weight": gw, "bias": gb}


class Carafe(Upsampler):
    kind = UpsamplerKind.CARAFE

    def __init__(self, channels, sigma, rng, cfg: CarafeConfig | None = None):
        super().__init__(channels, sigma)
        if cfg is None:
            cfg = CarafeConfig(channels, sigma=sigma, c_mid=min(64, channels))
        if cfg.in_channels != channels or cfg.sigma != sigma:
            raise ConfigError("CARAFE config disagrees with upsampler channels/sigma")
        self.cfg = cfg
        self.params = CarafeParams.init(cfg, rng).named()

    def carafe_params(self) -> CarafeParams:
        return CarafeParams(**self.params)

    def forward(self, x):
        return carafe_forward(x, self.carafe_params(), self.cfg)

    def backward(self, grad_y, cache):
        gx, gp = carafe_backward(grad_y, cache, self.carafe_params(), self.cfg)
        return gx, gp.named()


_REGISTRY = {cls.kind: cls for cls in
             (Nearest, Bilinear, NearestConv, BilinearConv, Deconv, PixelShuffle,
              SpatialAttention, Carafe)}


def make_upsampler(kind, channels: int, sigma: int, rng,
                   carafe_cfg: CarafeConfig | None = None) -> Upsampler:
    if isinstance(kind, str):
        kind = UpsamplerKind.parse(kind)
    cls = _REGISTRY[kind]
    if cls in (Nearest, Bilinear):
        return cls(channels, sigma)
    if cls is Carafe:
        return cls(channels, sigma, rng, carafe_cfg)
    return cls(channels, sigma, rng)
