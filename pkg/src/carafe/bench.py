"""Desk-scale training benchmark.

A synthetic super-resolution task where sharp edges decide the loss: targets
are piecewise-constant 32x32 images, inputs are their 2x2 average pools. A
tiny network (3x3 stem -> upsampler -> 1x1 head) is trained with SGD on MSE.
This is a qualitative analogue of an upsampler comparison, not a reproduction
of any detection or segmentation benchmark.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .baselines import UpsamplerKind
from .carafe import CarafeConfig
from .errors import ConfigError, TrainingDiverged
from .tensor import conv2d_backward, conv2d_forward, he_normal, make_rng, sgd_step
from .upsamplers import make_upsampler

log = logging.getLogger(__name__)

ANALOGUE_NOTE = "synthetic analogue benchmark; not a reproduction of published results"


@dataclass(frozen=True)
class ToyTaskSpec:
    image_size: int = 32
    n_train: int = 512
    n_eval: int = 128
    pattern: str = "rectangles"
    seed: int = 0
    noise_std: float = 0.02

    def __post_init__(self):
        if self.image_size < 2 or self.image_size % 2:
            raise ConfigError("image_size must be even and >= 2")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be >= 1")
        if self.pattern not in ("rectangles", "voronoi"):
            raise ConfigError(f"unknown pattern {self.pattern!r}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.2
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    channels: int = 16
    # CARAFE settings for the 16-channel toy model
    k_up: int = 3
    k_encoder: int = 3
    c_mid: int = 16
    # rescale the batch gradient when its global L2 norm exceeds this; None disables
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")


@dataclass
class ExperimentResult:
    kind: UpsamplerKind
    seed: int
    train_loss: list[float]
    eval_loss: float
    eval_per_epoch: list[float] = field(default_factory=list)
    wall_time: float = 0.0


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def _rectangles(rng, n):
    img = np.zeros((n, n))
    count = int(rng.integers(5, 11))
    values = rng.permutation(np.linspace(0.0, 1.0, 16))[:count]
    for v in values:
        y0, y1 = np.sort(rng.integers(0, n + 1, size=2))
        x0, x1 = np.sort(rng.integers(0, n + 1, size=2))
        if y1 - y0 < 2:
            y1 = min(n, y0 + 2)
        if x1 - x0 < 2:
            x1 = min(n, x0 + 2)
        img[y0:y1, x0:x1] = v
    return img


def _voronoi(rng, n):
    count = int(rng.integers(5, 11))
    sites = rng.uniform(0, n, size=(count, 2))
    values = rng.permutation(np.linspace(0.0, 1.0, 16))[:count]
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    d = (yy[None] - sites[:, 0, None, None]) ** 2 + (xx[None] - sites[:, 1, None, None]) ** 2
    return values[np.argmin(d, axis=0)]


def avg_pool2(img: np.ndarray) -> np.ndarray:
    c, h, w = img.shape
    return img.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def gen_task(spec: ToyTaskSpec, split: str = "train"):
    """Return a list of ``(input (1, n/2, n/2), target (1, n, n))`` pairs."""
    count = spec.n_train if split == "train" else spec.n_eval
    # separate streams so train and eval never share samples
    rng = make_rng([spec.seed, 0 if split == "train" else 1])
    draw = _rectangles if spec.pattern == "rectangles" else _voronoi
    data = []
    for _ in range(count):
        target = draw(rng, spec.image_size)[None]
        x = avg_pool2(target)
        if spec.noise_std > 0:
            x = x + rng.normal(0.0, spec.noise_std, size=x.shape)
        data.append((x, target))
    return data


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

class ToyModel:
    """3x3 stem (1 -> C), sigma=2 upsampler, 1x1 head (C -> 1)."""

    def __init__(self, kind, channels: int = 16, seed: int = 0,
                 carafe_cfg: CarafeConfig | None = None):
        rng = make_rng([seed, 2])
        self.kind = UpsamplerKind.parse(kind) if isinstance(kind, str) else kind
        self.stem_w = he_normal(rng, (channels, 1, 3, 3))
        self.stem_b = np.zeros(channels)
        self.up = make_upsampler(self.kind, channels, 2, rng, carafe_cfg)
        self.head_w = he_normal(rng, (1, channels, 1, 1))
        self.head_b = np.zeros(1)

    def params(self) -> dict[str, np.ndarray]:
        out = {"stem_w": self.stem_w, "stem_b": self.stem_b}
        out.update({f"up.{k}": v for k, v in self.up.params.items()})
        out.update({"head_w": self.head_w, "head_b": self.head_b})
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        if name.startswith("up."):
            self.up.params[name[3:]] = value
        else:
            setattr(self, name, value)

    def forward(self, x):
        f = conv2d_forward(x, self.stem_w, self.stem_b)
        u, up_cache = self.up.forward(f)
        y = conv2d_forward(u, self.head_w, self.head_b)
        return y, (x, f, u, up_cache)

    def backward(self, grad_y, cache):
        x, f, u, up_cache = cache
        g_u, g_hw, g_hb = conv2d_backward(grad_y, u, self.head_w)
        g_f, g_up = self.up.backward(g_u, up_cache)
        _, g_sw, g_sb = conv2d_backward(g_f, x, self.stem_w)
        grads = {"stem_w": g_sw, "stem_b": g_sb}
        grads.update({f"up.{k}": v for k, v in g_up.items()})
        grads.update({"head_w": g_hw, "head_b": g_hb})
        return grads

    def loss_and_grads(self, x, target):
        y, cache = self.forward(x)
        diff = y - target
        loss = float(np.mean(diff ** 2))
        return loss, self.backward(2.0 * diff / diff.size, cache)


def build_model(kind, cfg: TrainConfig) -> ToyModel:
    kind = UpsamplerKind.parse(kind) if isinstance(kind, str) else kind
    carafe_cfg = None
    if kind is UpsamplerKind.CARAFE:
        carafe_cfg = CarafeConfig(cfg.channels, sigma=2, k_up=cfg.k_up,
                                  k_encoder=cfg.k_encoder, c_mid=cfg.c_mid)
    return ToyModel(kind, cfg.channels, cfg.seed, carafe_cfg)


def evaluate(model: ToyModel, data) -> float:
    return float(np.mean([np.mean((model.forward(x)[0] - t) ** 2) for x, t in data]))


def train(model: ToyModel, data, cfg: TrainConfig, eval_data=None) -> ExperimentResult:
    """Minibatch SGD with momentum on per-pixel MSE.

    Epoch train loss is the mean of per-sample losses seen during that epoch.
    """
    start = time.perf_counter()
    rng = make_rng([cfg.seed, 3])
    state: dict[str, np.ndarray] = {}
    history, eval_hist = [], []
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b0 in range(0, n, cfg.batch_size):
            batch = order[b0:b0 + cfg.batch_size]
            acc: dict[str, np.ndarray] = {}
            for idx in batch:
                loss, grads = model.loss_and_grads(*data[idx])
                total += loss
                for k, g in grads.items():
                    acc[k] = acc[k] + g if k in acc else g
            scale = 1.0 / len(batch)
            if cfg.clip_norm is not None:
                norm = scale * float(np.sqrt(sum(np.sum(g * g) for g in acc.values())))
                if norm > cfg.clip_norm:
                    scale *= cfg.clip_norm / norm
            for k, p in model.params().items():
                new, state[k] = sgd_step(p, acc[k] * scale, cfg.lr, cfg.momentum, state.get(k))
                model.set_param(k, new)
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(epoch, epoch_loss)
        history.append(epoch_loss)
        if eval_data is not None:
            eval_hist.append(evaluate(model, eval_data))
        log.info("%s seed=%d epoch=%d train_loss=%.6f", model.kind.value, cfg.seed,
                 epoch, epoch_loss)
    final_eval = evaluate(model, eval_data) if eval_data is not None else float("nan")
    return ExperimentResult(model.kind, cfg.seed, history, final_eval, eval_hist,
                            time.perf_counter() - start)


# --------------------------------------------------------------------------
# comparison
# --------------------------------------------------------------------------

@dataclass
class Comparison:
    spec: ToyTaskSpec
    cfg: TrainConfig
    results: list[ExperimentResult]

    def summary(self) -> dict[UpsamplerKind, tuple[float, float]]:
        by_kind: dict[UpsamplerKind, list[float]] = {}
        for r in self.results:
            by_kind.setdefault(r.kind, []).append(r.eval_loss)
        return {k: (float(np.mean(v)), float(np.std(v))) for k, v in by_kind.items()}

    def to_csv(self, include_time: bool = False) -> str:
        buf = io.StringIO()
        buf.write(f"# {ANALOGUE_NOTE}\n")
        for key, value in {**asdict(self.spec), **asdict(self.cfg)}.items():
            if key != "seed":
                buf.write(f"# {key}={value}\n")
        cols = ["kind", "seed", "epoch", "train_loss", "eval_loss"]
        if include_time:
            cols.append("wall_time")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in self.results:
            for epoch, loss in enumerate(r.train_loss, start=1):
                ev = r.eval_per_epoch[epoch - 1] if r.eval_per_epoch else r.eval_loss
                row = [r.kind.value, r.seed, epoch, repr(loss), repr(ev)]
                if include_time:
                    row.append(f"{r.wall_time:.3f}")
                writer.writerow(row)
        return buf.getvalue()

    def summary_table(self) -> str:
        lines = [f"# {ANALOGUE_NOTE}", f"{'kind':<18}{'mean eval MSE':>16}{'sd':>12}"]
        for kind, (mean, sd) in self.summary().items():
            lines.append(f"{kind.value:<18}{mean:>16.6f}{sd:>12.6f}")
        return "\n".join(lines)


def run_one(kind, spec: ToyTaskSpec, cfg: TrainConfig, data=None) -> ExperimentResult:
    if data is None:
        data = (gen_task(spec, "train"), gen_task(spec, "eval"))
    model = build_model(kind, cfg)
    return train(model, data[0], cfg, eval_data=data[1])


def compare(kinds, spec: ToyTaskSpec, cfg: TrainConfig, n_seeds: int = 3) -> Comparison:
    """Train every kind for seeds ``cfg.seed .. cfg.seed + n_seeds - 1``.

    The task data for a seed is shared by all kinds so the only difference
    between runs of one seed is the upsampler.
    """
    kinds = [UpsamplerKind.parse(k) if isinstance(k, str) else k for k in kinds]
    results = []
    for offset in range(n_seeds):
        seed = cfg.seed + offset
        run_spec = replace(spec, seed=spec.seed + offset)
        data = (gen_task(run_spec, "train"), gen_task(run_spec, "eval"))
        for kind in kinds:
            results.append(run_one(kind, run_spec, replace(cfg, seed=seed), data))
    return Comparison(spec, cfg, results)
