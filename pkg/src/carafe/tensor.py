"""Dense float64 tensor substrate.

Feature maps are ``numpy`` arrays of shape ``(C, H, W)``; convolution weights
are ``(C_out, C_in, k, k)``. Every routine here is a pure function of its
arguments and returns freshly allocated float64 arrays.
"""
from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, ShapeError

CTNS_MAGIC = b"CTNS"
CTNS_VERSION = 1


# --------------------------------------------------------------------------
# FLOP instrumentation
# --------------------------------------------------------------------------

@dataclass
class FlopCounter:
    total: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


_active_counters: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops():
    """Tally arithmetic performed by forward passes inside the block.

    Convention: a multiply-accumulate is 2 FLOPs, a convolution bias add is
    charged 2 FLOPs per output element, a bare multiply is 1 FLOP.
    Normalizers (softmax, logistic) are not charged.
    """
    counter = FlopCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def tally(op: str, n: int) -> None:
    for counter in _active_counters:
        counter.add(op, n)


# --------------------------------------------------------------------------
# validation helpers
# --------------------------------------------------------------------------

def as_tensor(x, rank: int | None = None, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if rank is not None and arr.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got shape {arr.shape}")
    if arr.size == 0 or any(d < 1 for d in arr.shape):
        raise ShapeError(f"{name} has an empty extent: {arr.shape}")
    return arr


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name} contains NaN or Inf")
    return x


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.stride != 1:
            raise ConfigError("only stride 1 convolutions are supported")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels, k, k)

    @classmethod
    def for_weight(cls, weight: np.ndarray) -> "ConvSpec":
        o, c, kh, kw = weight.shape
        if kh != kw:
            raise ShapeError(f"square kernels only, got {kh}x{kw}")
        return cls(c, o, kh)


def _check_conv(x, weight, spec):
    x = as_tensor(x, 3, "input")
    weight = as_tensor(weight, 4, "weight")
    if spec is None:
        spec = ConvSpec.for_weight(weight)
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} does not match {spec.weight_shape}")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[0]} channels, conv expects {spec.in_channels}")
    return x, weight, spec


def zero_pad(x: np.ndarray, p: int) -> np.ndarray:
    """Pad the two spatial axes of (C, H, W) with ``p`` zeros on each side."""
    if p == 0:
        return x
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, p:p + h, p:p + w] = x
    return out


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (C, H, W, k, k) zero-padded, same-size sliding windows."""
    xp = zero_pad(x, (k - 1) // 2)
    return sliding_window_view(xp, (k, k), axis=(1, 2))


def conv2d_forward(x, weight, bias=None, spec: ConvSpec | None = None) -> np.ndarray:
    """Same-size 2-D cross-correlation with zero padding (k-1)/2."""
    x, weight, spec = _check_conv(x, weight, spec)
    o = spec.out_channels
    if bias is None:
        bias = np.zeros(o)
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {bias.shape}")
    _, h, w = x.shape
    k = spec.kernel_size
    win = _windows(x, k)
    out = np.tensordot(weight, win, axes=([1, 2, 3], [0, 3, 4]))
    out += bias[:, None, None]
    tally("conv2d", 2 * (spec.in_channels * k * k + 1) * o * h * w)
    return out


def conv2d_backward(grad_out, x, weight, spec: ConvSpec | None = None):
    """Gradients of ``conv2d_forward`` w.r.t. input, weight and bias."""
    x, weight, spec = _check_conv(x, weight, spec)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _, h, w = x.shape
    if grad_out.shape != (spec.out_channels, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(spec.out_channels, h, w)}")
    k = spec.kernel_size
    p = spec.padding
    win = _windows(x, k)
    grad_weight = np.tensordot(grad_out, win, axes=([1, 2], [1, 2]))
    grad_bias = grad_out.sum(axis=(1, 2))
    # input gradient = correlation of grad_out with the flipped, transposed kernel
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_input = np.tensordot(flipped, _windows(grad_out, k), axes=([1, 2, 3], [0, 3, 4]))
    return grad_input, grad_weight, grad_bias


# --------------------------------------------------------------------------
# normalizers
# --------------------------------------------------------------------------

def softmax(values, axis: int = -1) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out, out, axis: int = -1) -> np.ndarray:
    g = np.asarray(grad_out, dtype=np.float64)
    s = np.asarray(out, dtype=np.float64)
    if g.shape != s.shape:
        raise ShapeError(f"grad_out shape {g.shape} != softmax output shape {s.shape}")
    return s * (g - (g * s).sum(axis=axis, keepdims=True))


def sigmoid(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


# --------------------------------------------------------------------------
# elementwise + optimizer
# --------------------------------------------------------------------------

def add(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def mul_scalar(a, s: float) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) * float(s)


def mul_broadcast_channel(x, a) -> np.ndarray:
    """Multiply a (C, H, W) map by a single-channel (1, H, W) map."""
    x = as_tensor(x, 3, "x")
    a = as_tensor(a, 3, "a")
    if a.shape != (1,) + x.shape[1:]:
        raise ShapeError(f"expected a of shape {(1,) + x.shape[1:]}, got {a.shape}")
    tally("mul_broadcast", x.size)
    return x * a


def sgd_step(param, grad, lr: float, momentum: float, state=None):
    """SGD with heavy-ball momentum; returns ``(new_param, new_state)``."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise ShapeError(f"param {param.shape} and grad {grad.shape} differ")
    if state is None:
        state = np.zeros_like(param)
    elif np.shape(state) != param.shape:
        raise ShapeError("momentum state shape differs from param")
    state = momentum * state + grad
    return param - lr * state, state


# --------------------------------------------------------------------------
# random init
# --------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    # PCG64 streams are specified bit-for-bit, so seeds reproduce everywhere
    return np.random.Generator(np.random.PCG64(seed))


def rng_normal(rng: np.random.Generator, n: int, std: float) -> np.ndarray:
    if std <= 0:
        raise ConfigError(f"std must be positive, got {std}")
    return rng.normal(0.0, std, size=int(n))


def he_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Zero-mean Gaussian with std sqrt(2 / fan_in), fan_in = C_in * k * k."""
    fan_in = int(np.prod(shape[1:]))
    return rng_normal(rng, int(np.prod(shape)), np.sqrt(2.0 / fan_in)).reshape(shape)


# --------------------------------------------------------------------------
# CTNS binary container
# --------------------------------------------------------------------------

def encode_tensor(x) -> bytes:
    arr = np.ascontiguousarray(x, dtype="<f8")
    header = CTNS_MAGIC + struct.pack("<II", CTNS_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one CTNS record at ``offset``; return it and the end offset."""
    if buf[offset:offset + 4] != CTNS_MAGIC:
        raise ShapeError("not a CTNS record (bad magic)")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != CTNS_VERSION:
        raise ShapeError(f"unsupported CTNS version {version}")
    pos = offset + 12
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    n = int(np.prod(dims)) if rank else 1
    if any(d < 1 for d in dims):
        raise ShapeError(f"CTNS extents must be >= 1, got {dims}")
    end = pos + 8 * n
    if end > len(buf):
        raise ShapeError("truncated CTNS payload")
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
    return data.reshape(dims), end


def write_tensor(path_or_file, x) -> None:
    data = encode_tensor(x)
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as f:
            f.write(data)


def read_tensor(path_or_file: "str | BinaryIO") -> np.ndarray:
    if hasattr(path_or_file, "read"):
        buf = path_or_file.read()
    else:
        with open(path_or_file, "rb") as f:
            buf = f.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise ShapeError("trailing bytes after CTNS payload")
    return arr


# --------------------------------------------------------------------------
# named-tensor archives
# --------------------------------------------------------------------------

ARCHIVE_FORMAT = "ctns-archive"


def write_archive(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named tensors as concatenated CTNS records behind a JSON manifest.

    Layout: u64 little-endian manifest length, UTF-8 JSON manifest, then the
    records. Manifest offsets are relative to the first record.
    """
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        blob = encode_tensor(value)
        entries.append({"name": name, "shape": list(np.shape(value)),
                        "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"format": ARCHIVE_FORMAT, "version": CTNS_VERSION,
                "tensors": entries, "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for blob in blobs:
            f.write(blob)


def read_archive(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)`` from a file written by :func:`write_archive`."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 8:
        raise ShapeError("archive too short")
    (n,) = struct.unpack_from("<Q", buf, 0)
    try:
        manifest = json.loads(buf[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ShapeError(f"bad archive manifest: {exc}") from None
    if manifest.get("format") != ARCHIVE_FORMAT:
        raise ShapeError("not a CTNS archive")
    base = 8 + n
    tensors = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        arr, end = decode_tensor(buf, start)
        if end - start != entry["length"] or list(arr.shape) != entry["shape"]:
            raise ShapeError(f"manifest disagrees with record {entry['name']!r}")
        tensors[entry["name"]] = arr
    return tensors, manifest.get("meta", {})
