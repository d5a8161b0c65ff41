"""Uniform affine quantisation with zero-point 0 and its threshold form.

Rounding is half-away-from-zero throughout, implemented without the
`floor(x + 0.5)` shortcut so results are exact for every float64 input.
Weights are quantised signed symmetric per output channel, activations
unsigned per tensor after ReLU; a quantised activation is equivalently a
bank of ascending per-channel thresholds (`quant_to_thresholds`).
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidArgument, InvalidConfig, UnsupportedTransform

SUPERPOINT_LAYERS = (
    "conv1a",
    "conv1b",
    "conv2a",
    "conv2b",
    "conv3a",
    "conv3b",
    "conv4a",
    "conv4b",
    "convPa",
    "convPb",
    "convDa",
    "convDb",
)

# layers whose output activation is ReLU'd and requantised (head outputs
# convPb/convDb go straight to the real-valued boundary)
RELU_LAYERS = (
    "conv1a",
    "conv1b",
    "conv2a",
    "conv2b",
    "conv3a",
    "conv3b",
    "conv4a",
    "conv4b",
    "convPa",
    "convDa",
)


def round_half_away(v):
    """Exact round-half-away-from-zero for float64 arrays."""
    v = np.asarray(v, dtype=np.float64)
    a = np.abs(v)
    f = np.floor(a)
    r = f + (a - f >= 0.5)
    return np.copysign(r, v)


@dataclass(frozen=True)
class QuantParams:
    """Scale/bit-width bundle; zero-point is fixed at 0 by construction."""

    bit_width: int
    signed: bool
    scale: object  # float (per tensor) or 1-D ndarray (per channel)

    def __post_init__(self):
        if not 2 <= self.bit_width <= 8:
            raise InvalidArgument(f"bit width {self.bit_width} outside [2, 8]")
        s = self.scale
        if np.isscalar(s) or (isinstance(s, np.ndarray) and s.ndim == 0):
            s = float(s)
            if not (s > 0 and np.isfinite(s)):
                raise InvalidArgument("scale must be finite and positive")
        else:
            s = np.asarray(s, dtype=np.float64)
            if s.ndim != 1 or s.size == 0:
                raise InvalidArgument("per-channel scale must be a 1-D vector")
            if not np.all(np.isfinite(s) & (s > 0)):
                raise InvalidArgument("per-channel scales must be finite and positive")
        object.__setattr__(self, "scale", s)

    @property
    def per_channel(self) -> bool:
        return isinstance(self.scale, np.ndarray)

    @property
    def qmin(self) -> int:
        return -(1 << (self.bit_width - 1)) if self.signed else 0

    @property
    def qmax(self) -> int:
        return (1 << (self.bit_width - 1)) - 1 if self.signed else (1 << self.bit_width) - 1

    def scale_array(self, ndim: int):
        """Scale broadcast against an array whose axis 0 is the channel axis."""
        if not self.per_channel:
            return self.scale
        return self.scale.reshape((self.scale.size,) + (1,) * (ndim - 1))


@dataclass(frozen=True)
class QuantTensor:
    values: np.ndarray  # int64
    params: QuantParams

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int64)
        if v.min(initial=0) < self.params.qmin or v.max(initial=0) > self.params.qmax:
            raise InvalidArgument("quantised values exceed the representable range")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class ThresholdSet:
    """Ascending per-channel thresholds realising ReLU + unsigned requant."""

    per_channel: np.ndarray  # (channels, 2**b - 1)
    out_bit_width: int
    out_scale: float | None = None
    out_signed: bool = field(default=False)

    def __post_init__(self):
        rows = np.asarray(self.per_channel, dtype=np.float64)
        if rows.ndim != 2:
            raise InvalidArgument("thresholds must be a (channels, n) matrix")
        if np.any(np.diff(rows, axis=1) < 0):
            raise InvalidArgument("threshold rows must be non-decreasing")
        if rows.shape[1] > (1 << self.out_bit_width) - 1:
            raise InvalidArgument(
                f"{rows.shape[1]} levels do not fit {self.out_bit_width} output bits"
            )
        if self.out_signed:
            raise InvalidArgument("threshold outputs are unsigned by construction")
        object.__setattr__(self, "per_channel", rows)

    @property
    def channels(self) -> int:
        return self.per_channel.shape[0]

    @property
    def levels(self) -> int:
        return self.per_channel.shape[1]


def quantize(x, params: QuantParams) -> QuantTensor:
    """q = clamp(round_half_away(x / s), qmin, qmax), channel-resolved scale."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("cannot quantise non-finite values")
    s = params.scale_array(x.ndim)
    if params.per_channel and x.shape[0] != params.scale.size:
        raise InvalidArgument(
            f"per-channel scale length {params.scale.size} != {x.shape[0]} channels"
        )
    q = np.clip(round_half_away(x / s), params.qmin, params.qmax)
    return QuantTensor(q.astype(np.int64), params)


def dequantize(q: QuantTensor) -> np.ndarray:
    s = q.params.scale_array(q.values.ndim)
    return q.values.astype(np.float64) * s


def calibrate(samples, bit_width: int, signed: bool, layout: str = "per_tensor") -> QuantParams:
    """Max-abs scale selection over a batch of sample tensors.

    `layout` is "per_tensor" or "per_channel"; per-channel groups over axis 0.
    """
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    if not samples:
        raise InvalidArgument("calibration needs at least one sample")
    qmag = (1 << (bit_width - 1)) - 1 if signed else (1 << bit_width) - 1
    if layout == "per_tensor":
        max_abs = max(float(np.abs(s).max(initial=0.0)) for s in samples)
        if max_abs == 0.0:
            raise InvalidArgument("all-zero calibration group has no scale")
        return QuantParams(bit_width, signed, max_abs / qmag)
    if layout != "per_channel":
        raise InvalidArgument(f"unknown layout {layout!r}")
    channels = samples[0].shape[0]
    max_abs = np.zeros(channels)
    for s in samples:
        if s.shape[0] != channels:
            raise InvalidArgument("calibration samples disagree on channel count")
        max_abs = np.maximum(max_abs, np.abs(s.reshape(channels, -1)).max(axis=1))
    if np.any(max_abs == 0.0):
        raise InvalidArgument("a calibration channel is all-zero")
    return QuantParams(bit_width, signed, max_abs / qmag)


def quant_to_thresholds(act_params: QuantParams, channels: int | None = None) -> ThresholdSet:
    """Lower ReLU + unsigned requantisation to thresholds t_j = s*(j - 0.5).

    Counting thresholds reached reproduces quantize(relu(x)) exactly under
    round-half-away-from-zero.
    """
    if act_params.signed:
        raise InvalidArgument("thresholds realise unsigned post-ReLU activations")
    n = (1 << act_params.bit_width) - 1
    j = np.arange(1, n + 1, dtype=np.float64)
    if act_params.per_channel:
        if channels is not None and channels != act_params.scale.size:
            raise InvalidArgument("channel count disagrees with per-channel scale")
        rows = act_params.scale[:, None] * (j[None, :] - 0.5)
        scale = None
    else:
        rows = np.tile(act_params.scale * (j - 0.5), (channels or 1, 1))
        scale = act_params.scale
    return ThresholdSet(rows, act_params.bit_width, out_scale=scale)


def apply_thresholds(x, t: ThresholdSet) -> QuantTensor:
    """Per entry, the number of its channel's thresholds it reaches (x >= t_j)."""
    x = np.asarray(x, dtype=np.float64)
    rows = t.per_channel
    channels = x.shape[0] if x.ndim > 1 else 1
    flat = x.reshape(channels, -1) if x.ndim > 1 else x.reshape(1, -1)
    if rows.shape[0] == 1 and channels > 1:
        rows = np.broadcast_to(rows, (channels, rows.shape[1]))
    if rows.shape[0] != channels:
        raise InvalidArgument(
            f"threshold set has {t.channels} rows, input has {channels} channels"
        )
    counts = kernels.threshold_count(
        np.ascontiguousarray(flat), np.ascontiguousarray(rows)
    ).reshape(x.shape)
    params = QuantParams(t.out_bit_width, False, t.out_scale if t.out_scale else 1.0)
    return QuantTensor(counts, params)


def absorb_affine(t: ThresholdSet, a, b) -> ThresholdSet:
    """Fold the affine a*x + b feeding a threshold bank: t_j <- (t_j - b) / a.

    Requires a > 0 on every channel; a <= 0 would flip threshold order and is
    rejected instead of silently mishandled.
    """
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        raise UnsupportedTransform("affine absorption needs strictly positive scale")
    channels = max(t.channels, a.size, b.size)
    rows = np.broadcast_to(t.per_channel, (channels, t.levels))
    a = np.broadcast_to(a, (channels,))[:, None]
    b = np.broadcast_to(b, (channels,))[:, None]
    return ThresholdSet((rows - b) / a, t.out_bit_width, out_scale=None)


def quantize_bias(bias, w_scale, a_scale) -> np.ndarray:
    """Requantise a float bias into the conv accumulator grid: round(b / (s_w * s_a))."""
    prod = np.asarray(w_scale, dtype=np.float64) * float(a_scale)
    return round_half_away(np.asarray(bias, dtype=np.float64) / prod).astype(np.int64)


# -- per-layer bit-width configuration --------------------------------------


@dataclass(frozen=True)
class BitWidthConfig:
    """Weight/activation bit widths for every named network layer."""

    name: str
    per_layer: dict  # layer -> (weight_bits, activation_bits)

    def __post_init__(self):
        missing = [l for l in SUPERPOINT_LAYERS if l not in self.per_layer]
        if missing:
            raise InvalidConfig(f"layers without bit assignment: {missing}")
        for layer, (wb, ab) in self.per_layer.items():
            if not (2 <= wb <= 8 and 2 <= ab <= 8):
                raise InvalidConfig(f"{layer}: bits ({wb}, {ab}) outside [2, 8]")

    def weight_bits(self, layer: str) -> int:
        return self.per_layer[layer][0]

    def activation_bits(self, layer: str) -> int:
        return self.per_layer[layer][1]

    @staticmethod
    def uniform(name: str, bits: int) -> "BitWidthConfig":
        return BitWidthConfig(name, {l: (bits, bits) for l in SUPERPOINT_LAYERS})

    @staticmethod
    def int8() -> "BitWidthConfig":
        return BitWidthConfig.uniform("int8", 8)

    @staticmethod
    def int4() -> "BitWidthConfig":
        return BitWidthConfig.uniform("int4", 4)

    @staticmethod
    def int3() -> "BitWidthConfig":
        return BitWidthConfig.uniform("int3", 3)

    @staticmethod
    def mixed424() -> "BitWidthConfig":
        # 4 bits: first encoder conv, final conv of each decoder head, and the
        # ReLU activations feeding those final convs; 2 bits everywhere else.
        per_layer = {l: (2, 2) for l in SUPERPOINT_LAYERS}
        per_layer["conv1a"] = (4, 2)
        per_layer["convPa"] = (2, 4)
        per_layer["convPb"] = (4, 2)
        per_layer["convDa"] = (2, 4)
        per_layer["convDb"] = (4, 2)
        return BitWidthConfig("mixed424", per_layer)

    @staticmethod
    def preset(name: str) -> "BitWidthConfig":
        table = {
            "int8": BitWidthConfig.int8,
            "int4": BitWidthConfig.int4,
            "int3": BitWidthConfig.int3,
            "mixed424": BitWidthConfig.mixed424,
        }
        if name not in table:
            raise InvalidConfig(f"unknown bit-width preset {name!r}")
        return table[name]()

    def to_text(self) -> str:
        lines = [f"# bit-width config: {self.name}", "# layer = weight_bits activation_bits"]
        for layer in SUPERPOINT_LAYERS:
            wb, ab = self.per_layer[layer]
            lines.append(f"{layer} = {wb} {ab}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str, name: str = "custom") -> "BitWidthConfig":
        per_layer = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                key, value = line.split("=", 1)
                wb, ab = value.split()
                per_layer[key.strip()] = (int(wb), int(ab))
            except ValueError as exc:
                raise InvalidConfig(f"line {lineno}: cannot parse {raw!r}") from exc
        return BitWidthConfig(name, per_layer)
