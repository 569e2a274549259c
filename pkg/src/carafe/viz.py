"""Reassembly-weight heatmaps written as binary PGM/PPM.

Weights are quantized linearly from [0, max weight] to [0, 255]; the max
weight and cell size are stored in a header comment so files can be decoded
back to weights.
"""
from __future__ import annotations

import numpy as np

from .carafe import CarafeConfig, CarafeParams, carafe_forward, reassemble_backward


def quantize(weights) -> tuple[np.ndarray, float]:
    w = np.asarray(weights, dtype=np.float64)
    top = float(w.max())
    if top <= 0:
        return np.zeros(w.shape, dtype=np.uint8), 0.0
    return np.rint(np.clip(w, 0.0, None) / top * 255).astype(np.uint8), top


def dequantize(pixels, max_weight: float) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 255.0 * max_weight


def _enlarge(img, cell):
    return np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)


def _header(magic, h, w, comments):
    lines = [magic] + [f"# {c}" for c in comments] + [f"{w} {h}", "255"]
    return ("\n".join(lines) + "\n").encode("ascii")


def write_pgm(path, img: np.ndarray, comments=()) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(_header("P5", h, w, comments))
        f.write(img.tobytes())


def write_ppm(path, rgb: np.ndarray, comments=()) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(_header("P6", h, w, comments))
        f.write(rgb.tobytes())


def read_pnm(path) -> tuple[np.ndarray, dict[str, str]]:
    """Read a binary P5/P6 file; returns pixels and ``key=value`` comments."""
    with open(path, "rb") as f:
        buf = f.read()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    pos, values, meta = 2, [], {}
    while len(values) < 3:
        while True:
            while pos < len(buf) and buf[pos:pos + 1].isspace():
                pos += 1
            if buf[pos:pos + 1] != b"#":
                break
            end = buf.index(b"\n", pos)
            text = buf[pos + 1:end].decode("ascii").strip()
            key, sep, value = text.partition("=")
            if sep:
                meta[key.strip()] = value.strip()
            pos = end + 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        values.append(int(buf[start:pos]))
    w, h, maxval = values
    if maxval != 255:
        raise ValueError(f"{path}: expected max value 255, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    depth = 1 if magic == b"P5" else 3
    data = np.frombuffer(buf, dtype=np.uint8, count=h * w * depth, offset=pos)
    shape = (h, w) if depth == 1 else (h, w, 3)
    return data.reshape(shape).copy(), meta


def decode_heatmap(path) -> np.ndarray:
    """Recover the weight grid from a file written by :func:`save_kernel_heatmap`
    or :func:`save_accumulated_map`."""
    pixels, meta = read_pnm(path)
    cell = int(meta.get("cell", 1))
    if pixels.ndim == 3:
        pixels = pixels[..., 0]
    return dequantize(pixels[::cell, ::cell], float(meta["max_weight"]))


# --------------------------------------------------------------------------
# weight extraction
# --------------------------------------------------------------------------

def run_levels(x, params: CarafeParams, cfg: CarafeConfig, levels: int):
    """Apply CARAFE ``levels`` times; return the kernel field of every level."""
    fields = []
    for _ in range(levels):
        x, cache = carafe_forward(x, params, cfg)
        fields.append(cache.kernels)
    return x, fields


def kernel_at_target(field, ti: int, tj: int) -> np.ndarray:
    s = field.sigma
    return field.at(ti // s, tj // s, ti % s, tj % s)


def accumulated_map(fields, cfg: CarafeConfig, base_hw, ti: int, tj: int) -> np.ndarray:
    """Weight of every level-0 source pixel in final target pixel (ti, tj).

    Per-level weights multiply along each path from source to target and the
    products are summed over all paths, which is the reassembly chain's
    linear map with kernels held fixed.
    """
    s = cfg.sigma
    sizes = [tuple(base_hw)]
    for _ in fields[:-1]:
        sizes.append((sizes[-1][0] * s, sizes[-1][1] * s))
    h, w = sizes[-1]
    g = np.zeros((1, h * s, w * s))
    g[0, ti, tj] = 1.0
    for field, (lh, lw) in zip(reversed(fields), reversed(sizes)):
        g, _ = reassemble_backward(g, np.zeros((1, lh, lw)), field, cfg)
    return g[0]


def save_kernel_heatmap(path, kernel: np.ndarray, cell: int = 8, label: str = "") -> float:
    img, top = quantize(kernel)
    comments = [f"max_weight={top!r}", f"cell={cell}"]
    if label:
        comments.append(f"label={label}")
    write_pgm(path, _enlarge(img, cell), comments)
    return top


def save_accumulated_map(path, weights: np.ndarray, base=None, cell: int = 4,
                         label: str = "") -> float:
    """Red channel carries the quantized weight; green/blue show ``base``."""
    red, top = quantize(weights)
    rgb = np.zeros(weights.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = red
    if base is not None:
        b = np.asarray(base, dtype=np.float64)
        span = b.max() - b.min()
        gray = (b - b.min()) / span if span > 0 else np.zeros_like(b)
        rgb[..., 1] = rgb[..., 2] = np.rint(gray * 127).astype(np.uint8)
    comments = [f"max_weight={top!r}", f"cell={cell}"]
    if label:
        comments.append(f"label={label}")
    write_ppm(path, np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1), comments)
    return top
