"""Double-precision reference operators for the feature-extraction network.

Tensors are plain numpy arrays of shape (C, H, W), float64, row-major.
These operators define the semantics that the integer lowering is checked
against, so everything here is deterministic and conversion-free.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels
from .errors import InvalidArgument


def check_tensor(x, name="tensor"):
    """Validate the (C, H, W) float layout and finiteness."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise InvalidArgument(f"{name} must be (C, H, W), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument(f"{name} contains non-finite values")
    return np.ascontiguousarray(x, dtype=np.float64)


@dataclass(frozen=True)
class ConvSpec:
    """Stride-1 convolution parameters: 3x3 pad 1 or 1x1 pad 0."""

    in_channels: int
    out_channels: int
    kernel: int
    weights: np.ndarray  # (out, in, k, k)
    bias: np.ndarray  # (out,)

    @property
    def padding(self) -> int:
        return 1 if self.kernel == 3 else 0

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise InvalidArgument(f"kernel must be 1 or 3, got {self.kernel}")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise InvalidArgument("channel counts must be positive")
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        expect = (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if w.shape != expect:
            raise InvalidArgument(f"weights shape {w.shape} != {expect}")
        if b.shape != (self.out_channels,):
            raise InvalidArgument(f"bias shape {b.shape} != ({self.out_channels},)")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


class SoftmaxMode(Enum):
    FLOAT_E = "float_e"
    FIXED_BASE2 = "fixed_base2"


def conv2d(x, spec: ConvSpec):
    """Zero-padded stride-1 convolution, y = sum(w * x) + b per site."""
    x = check_tensor(x, "conv input")
    if x.shape[0] != spec.in_channels:
        raise InvalidArgument(
            f"input has {x.shape[0]} channels, spec expects {spec.in_channels}"
        )
    return kernels.conv2d_f64(x, spec.weights, spec.bias, spec.padding)


def maxpool2x2(x):
    """2x2 max pooling, stride 2, no padding; H and W must be even."""
    x = check_tensor(x, "pool input")
    _, h, w = x.shape
    if h % 2 or w % 2:
        raise InvalidArgument(f"maxpool2x2 needs even H and W, got {h}x{w}")
    return kernels.maxpool2x2_f64(x)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softmax_channels(x, mode: SoftmaxMode = SoftmaxMode.FLOAT_E):
    """Softmax across the channel axis at every spatial site.

    FLOAT_E is the numerically-stable base-e softmax.  FIXED_BASE2 emulates
    an 8-bit fixed-point accelerator softmax: logits are quantised to 8-bit
    signed, exponentiated in base 2, and the probabilities are re-quantised
    to 8-bit unsigned (scale 1/255) before a final renormalisation.
    """
    x = check_tensor(x, "softmax input")
    if x.shape[0] < 1:
        raise InvalidArgument("softmax needs at least one channel")
    if mode == SoftmaxMode.FLOAT_E:
        z = x - x.max(axis=0, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=0, keepdims=True)
    return _base2_fixed_softmax(x)


def base2_softmax_probs(x):
    """Base-2 softmax before any output quantisation: 2^x / sum 2^x."""
    z = x - x.max(axis=0, keepdims=True)
    e = np.exp2(z)
    return e / e.sum(axis=0, keepdims=True)


def _base2_fixed_softmax(x):
    max_abs = np.abs(x).max()
    scale = max_abs / 127.0 if max_abs > 0 else 1.0
    q = np.clip(np.round(x / scale), -128, 127)
    probs = base2_softmax_probs(q * scale)
    q_out = np.round(probs * 255.0) / 255.0
    total = q_out.sum(axis=0, keepdims=True)
    total[total == 0.0] = 1.0
    return q_out / total


def depth_to_space_raw(x, block: int):
    """depth_to_space without dtype conversion (used on integer tensors too)."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise InvalidArgument("depth_to_space input must be (C, H, W)")
    c, h, w = x.shape
    if block <= 0:
        raise InvalidArgument("block must be positive")
    if c % (block * block):
        raise InvalidArgument(f"{c} channels not divisible by block^2 = {block * block}")
    c_out = c // (block * block)
    y = x.reshape(c_out, block, block, h, w)
    y = y.transpose(0, 3, 1, 4, 2)  # (C', H, block, W, block)
    return np.ascontiguousarray(y.reshape(c_out, h * block, w * block))


def depth_to_space(x, block: int):
    """Rearrange channels into space: channel k of cell (i, j) lands at
    pixel (i*block + k//block, j*block + k%block)."""
    return depth_to_space_raw(check_tensor(x, "depth_to_space input"), block)


def bilinear_sample(m, x: float, y: float):
    """4-neighbour bilinear blend per channel; coordinates clamp to borders."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 3 or m.size == 0:
        raise InvalidArgument("map must be a non-empty (C, H, W) tensor")
    _, h, w = m.shape
    x = min(max(float(x), 0.0), w - 1.0)
    y = min(max(float(y), 0.0), h - 1.0)
    x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
    y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    return (
        m[:, y0, x0] * (1 - fx) * (1 - fy)
        + m[:, y0, x1] * fx * (1 - fy)
        + m[:, y1, x0] * (1 - fx) * fy
        + m[:, y1, x1] * fx * fy
    )


def resize_bilinear(x, out_h: int, out_w: int):
    """Centre-aligned bilinear resize of a (C, H, W) tensor."""
    x = check_tensor(x, "resize input")
    c, h, w = x.shape
    if out_h <= 0 or out_w <= 0:
        raise InvalidArgument("output size must be positive")
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    g = lambda yy, xx: x[:, yy[:, None], xx[None, :]]
    return (
        g(y0, x0) * (1 - fx) * (1 - fy)
        + g(y0, x1) * fx * (1 - fy)
        + g(y1, x0) * (1 - fx) * fy
        + g(y1, x1) * fx * fy
    )


def l2_normalize_channels(x, eps: float = 1e-12):
    """Per-site channel vectors scaled to unit norm; eps guards zeros."""
    if eps <= 0:
        raise InvalidArgument("eps must be positive")
    x = check_tensor(x, "l2norm input")
    norm = np.sqrt((x * x).sum(axis=0, keepdims=True))
    return x / np.maximum(norm, eps)


# Fine-image pixel (x, y) sampled on a stride-8 coarse map lands at this
# coarse coordinate (centre-aligned grids).
def fine_to_coarse(v: float, stride: int = 8) -> float:
    return (v + 0.5) / stride - 0.5
