"""SuperPoint graph assembly and keypoint/descriptor post-processing.

The architecture constants follow the original network: a shared VGG-style
encoder (pools after blocks 1-3, /8 total), a 65-channel detector head whose
65th channel is the "no keypoint in this cell" dustbin, and a 256-channel
descriptor head.  Post-processing turns the two head outputs into scored
keypoints with unit-norm descriptors.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import graphc, kernels, nncore
from .errors import InvalidArgument, InvalidConfig
from .nncore import ConvSpec, SoftmaxMode
from .quant import RELU_LAYERS, calibrate, quantize, quantize_bias

# name -> (in_channels, out_channels, kernel)
ARCHITECTURE = {
    "conv1a": (1, 64, 3),
    "conv1b": (64, 64, 3),
    "conv2a": (64, 64, 3),
    "conv2b": (64, 64, 3),
    "conv3a": (64, 128, 3),
    "conv3b": (128, 128, 3),
    "conv4a": (128, 128, 3),
    "conv4b": (128, 128, 3),
    "convPa": (128, 256, 3),
    "convPb": (256, 65, 1),
    "convDa": (128, 256, 3),
    "convDb": (256, 256, 1),
}

ENCODER = ("conv1a", "conv1b", "pool", "conv2a", "conv2b", "pool",
           "conv3a", "conv3b", "pool", "conv4a", "conv4b")

DUSTBIN_CHANNELS = 65
DESCRIPTOR_DIM = 256
CELL = 8
INPUT_SCALE = 1.0 / 255.0
INPUT_BITS = 8


@dataclass(frozen=True)
class SuperPointWeights:
    layers: dict  # name -> ConvSpec

    def __post_init__(self):
        for name, (cin, cout, k) in ARCHITECTURE.items():
            spec = self.layers.get(name)
            if spec is None:
                raise InvalidArgument(f"missing weights for layer {name}")
            if (spec.in_channels, spec.out_channels, spec.kernel) != (cin, cout, k):
                raise InvalidArgument(
                    f"{name}: expected ({cin}, {cout}, {k}x{k}), got "
                    f"({spec.in_channels}, {spec.out_channels}, {spec.kernel}x{spec.kernel})"
                )

    def __getitem__(self, name: str) -> ConvSpec:
        return self.layers[name]


@dataclass(frozen=True)
class DetectorConfig:
    conf_threshold: float = 0.015
    nms_radius: int = 4
    border_margin: int = 4
    max_keypoints: int = 1000  # 0 = unlimited

    def __post_init__(self):
        if self.nms_radius < 0 or self.border_margin < 0:
            raise InvalidArgument("radius and margin must be non-negative")
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise InvalidArgument("confidence threshold must be in [0, 1]")


@dataclass
class DetectionResult:
    """Keypoints (x, y, score) sorted by descending score, plus descriptors."""

    keypoints: np.ndarray  # (N, 3) float64
    descriptors: np.ndarray  # (N, D) float64, unit rows

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.shape[0] != self.keypoints.shape[0]:
            raise InvalidArgument("keypoint/descriptor counts differ")
        scores = self.keypoints[:, 2]
        if scores.size and np.any(np.diff(scores) > 0):
            raise InvalidArgument("keypoints must be sorted by descending score")
        if self.descriptors.size:
            norms = np.linalg.norm(self.descriptors, axis=1)
            ok = (np.abs(norms - 1.0) <= 1e-6) | (norms == 0.0)
            if not np.all(ok):
                raise InvalidArgument("descriptors must be unit-norm")

    def __len__(self) -> int:
        return self.keypoints.shape[0]

    def to_json(self) -> str:
        return json.dumps(
            {
                "keypoints": self.keypoints.tolist(),
                "descriptors": self.descriptors.tolist(),
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "DetectionResult":
        doc = json.loads(text)
        kp = np.asarray(doc["keypoints"], dtype=np.float64).reshape(-1, 3)
        desc = np.asarray(doc["descriptors"], dtype=np.float64).reshape(kp.shape[0], -1)
        return DetectionResult(kp, desc)

    def to_binary(self) -> bytes:
        """Little-endian: uint32 count, then per keypoint f32 x, y, score and
        256 f32 descriptor components."""
        if self.descriptors.size and self.descriptors.shape[1] != DESCRIPTOR_DIM:
            raise InvalidArgument("binary serialisation is fixed to 256-d descriptors")
        out = [struct.pack("<I", len(self))]
        for i in range(len(self)):
            out.append(struct.pack("<3f", *self.keypoints[i]))
            out.append(self.descriptors[i].astype("<f4").tobytes())
        return b"".join(out)

    @staticmethod
    def from_binary(blob: bytes) -> "DetectionResult":
        (count,) = struct.unpack_from("<I", blob, 0)
        record = 4 * (3 + DESCRIPTOR_DIM)
        if len(blob) != 4 + count * record:
            raise InvalidArgument("detection blob has the wrong length")
        kp = np.empty((count, 3))
        desc = np.empty((count, DESCRIPTOR_DIM))
        for i in range(count):
            base = 4 + i * record
            kp[i] = struct.unpack_from("<3f", blob, base)
            desc[i] = np.frombuffer(blob, dtype="<f4", count=DESCRIPTOR_DIM, offset=base + 12)
        return DetectionResult(kp, desc)


# -- graph construction ------------------------------------------------------


def _conv_node(name, spec, prev):
    return graphc.Node(
        name,
        "Conv",
        {
            "name": name,
            "weight": spec.weights,
            "bias": spec.bias,
            "kernel": spec.kernel,
            "padding": spec.padding,
            "domain": "float",
        },
        [prev],
    )


def build_graph(weights: SuperPointWeights, bits="float", activation_stats=None,
                input_shape=None) -> graphc.GraphIR:
    """Assemble the network as a GraphIR.

    `bits` is "float" for the full-precision reference or a BitWidthConfig for
    the fake-quantised build (integer conv weights + explicit scale Affines +
    ReLU/requant pairs that streamlining turns into thresholds).  Quantised
    builds need `activation_stats`: per-layer max |activation| after ReLU,
    as produced by `collect_activation_stats`.
    """
    nodes = [graphc.Node("input", "Input", {"shape": input_shape}, [])]
    if isinstance(bits, str):
        if bits != "float":
            raise InvalidConfig(f"bits must be 'float' or a BitWidthConfig, got {bits!r}")
        cfg = None
    else:
        cfg = bits
        if activation_stats is None:
            raise InvalidConfig("quantised builds need activation calibration stats")
        missing = [l for l in RELU_LAYERS if l not in activation_stats]
        if missing:
            raise InvalidConfig(f"activation stats missing for layers: {missing}")

    state = {"scale": INPUT_SCALE}

    def add_layer(name, prev):
        spec = weights[name]
        if cfg is None:
            nodes.append(_conv_node(name, spec, prev))
            tip = name
            if name in RELU_LAYERS:
                nodes.append(graphc.Node(f"{name}_relu", "Relu", {}, [tip]))
                tip = f"{name}_relu"
            return tip
        w_bits = cfg.weight_bits(name)
        w_params = calibrate([spec.weights], w_bits, signed=True, layout="per_channel")
        q_w = quantize(spec.weights, w_params).values
        s_in = state["scale"]
        bias_int = quantize_bias(spec.bias, w_params.scale, s_in)
        nodes.append(
            graphc.Node(
                name,
                "Conv",
                {
                    "name": name,
                    "weight": q_w,
                    "bias": bias_int.astype(np.float64),
                    "bias_int": bias_int,
                    "kernel": spec.kernel,
                    "padding": spec.padding,
                    "w_bits": w_bits,
                    "domain": "int",
                },
                [prev],
            )
        )
        scale_vec = w_params.scale * s_in
        nodes.append(
            graphc.Node(
                f"{name}_aff", "Affine", {"a": scale_vec, "b": np.zeros_like(scale_vec)}, [name]
            )
        )
        tip = f"{name}_aff"
        if name in RELU_LAYERS:
            a_bits = cfg.activation_bits(name)
            qmax = (1 << a_bits) - 1
            max_abs = float(activation_stats[name])
            if max_abs <= 0:
                raise InvalidConfig(f"layer {name}: activation stats are all zero")
            s_act = max_abs / qmax
            nodes.append(graphc.Node(f"{name}_relu", "Relu", {}, [tip]))
            nodes.append(
                graphc.Node(
                    f"{name}_act",
                    "Quant",
                    {"scale": s_act, "bits": a_bits, "signed": False},
                    [f"{name}_relu"],
                )
            )
            tip = f"{name}_act"
            state["scale"] = s_act
        return tip

    if cfg is None:
        tip = "input"
    else:
        nodes.append(
            graphc.Node(
                "in_quant",
                "Quant",
                {"scale": INPUT_SCALE, "bits": INPUT_BITS, "signed": False},
                ["input"],
            )
        )
        tip = "in_quant"

    pools = 0
    for item in ENCODER:
        if item == "pool":
            pools += 1
            nodes.append(graphc.Node(f"pool{pools}", "MaxPool", {}, [tip]))
            tip = f"pool{pools}"
        else:
            tip = add_layer(item, tip)
    trunk = tip
    trunk_scale = state["scale"]

    tip = add_layer("convPa", trunk)
    tip = add_layer("convPb", tip)
    nodes.append(graphc.Node("out_logits", "Output", {}, [tip]))

    state["scale"] = trunk_scale
    tip = add_layer("convDa", trunk)
    tip = add_layer("convDb", tip)
    nodes.append(graphc.Node("out_desc", "Output", {}, [tip]))

    name = "superpoint_float" if cfg is None else f"superpoint_{cfg.name}"
    return graphc.GraphIR(nodes, name=name)


def collect_activation_stats(weights: SuperPointWeights, images) -> dict:
    """Per-layer max |post-ReLU activation| over calibration images.

    Runs the float graph and reads the traced ReLU outputs; used to pick
    post-training activation scales.
    """
    g = build_graph(weights, "float")
    stats = {l: 0.0 for l in RELU_LAYERS}
    for image in images:
        _, values = execute_with_trace(g, image)
        for layer in RELU_LAYERS:
            stats[layer] = max(stats[layer], float(values[f"{layer}_relu"].max(initial=0.0)))
    return stats


def execute_with_trace(graph, x):
    """execute_reference, additionally returning every intermediate tensor."""
    values = {}
    outputs = graphc.execute_reference(graph, x, trace=values)
    return outputs, values


# -- detection post-processing -------------------------------------------


def heatmap_from_logits(logits, mode: SoftmaxMode = SoftmaxMode.FLOAT_E):
    """Softmax over the 65 channels, drop the dustbin (without renormalising),
    and spread the 64 cell positions back to full resolution."""
    if logits.shape[0] != DUSTBIN_CHANNELS:
        raise InvalidArgument(f"expected {DUSTBIN_CHANNELS} channels, got {logits.shape[0]}")
    probs = nncore.softmax_channels(logits, mode)
    return nncore.depth_to_space(probs[:-1], CELL)[0]


def nms(points, radius: int):
    """Greedy Chebyshev non-maximum suppression.

    Points are (x, y, score) rows; higher scores win, ties resolve in raster
    order (y, then x).  Returns the survivors sorted by priority.
    """
    if radius < 0:
        raise InvalidArgument("radius must be non-negative")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return pts
    order = np.lexsort((pts[:, 0], pts[:, 1], -pts[:, 2]))
    ordered = pts[order]
    keep = kernels.nms_greedy(
        np.ascontiguousarray(ordered[:, 0]), np.ascontiguousarray(ordered[:, 1]), radius
    )
    return ordered[keep]


def keypoints_from_heatmap(heatmap, cfg: DetectorConfig):
    """Threshold, suppress, trim borders, sort, truncate."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    h, w = heatmap.shape
    ys, xs = np.nonzero(heatmap >= cfg.conf_threshold)
    if xs.size == 0:
        return np.zeros((0, 3))
    pts = np.column_stack([xs, ys, heatmap[ys, xs]]).astype(np.float64)
    kept = nms(pts, cfg.nms_radius)
    m = cfg.border_margin
    inside = (
        (kept[:, 0] >= m)
        & (kept[:, 0] < w - m)
        & (kept[:, 1] >= m)
        & (kept[:, 1] < h - m)
    )
    kept = kept[inside]
    if cfg.max_keypoints and kept.shape[0] > cfg.max_keypoints:
        kept = kept[: cfg.max_keypoints]
    return kept


def sample_descriptors(desc_map, keypoints, eps: float = 1e-12):
    """Normalise the coarse map, bilinearly sample at each keypoint with the
    centre-aligned /8 convention, and renormalise each sampled vector."""
    coarse = nncore.l2_normalize_channels(np.asarray(desc_map, dtype=np.float64), eps)
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    c, h, w = coarse.shape
    if kp.shape[0] == 0:
        return np.zeros((0, c))
    kx = np.clip(nncore.fine_to_coarse(kp[:, 0], CELL), 0.0, w - 1.0)
    ky = np.clip(nncore.fine_to_coarse(kp[:, 1], CELL), 0.0, h - 1.0)
    x0 = np.clip(np.floor(kx).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ky).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = kx - x0
    fy = ky - y0
    d = (
        coarse[:, y0, x0] * (1 - fx) * (1 - fy)
        + coarse[:, y0, x1] * fx * (1 - fy)
        + coarse[:, y1, x0] * (1 - fx) * fy
        + coarse[:, y1, x1] * fx * fy
    ).T
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    return d / np.maximum(norms, eps)


def detect(image, graph: graphc.GraphIR, cfg: DetectorConfig = DetectorConfig(),
           softmax_mode: SoftmaxMode = SoftmaxMode.FLOAT_E) -> DetectionResult:
    """Full pipeline: run the graph, decode the heatmap, sample descriptors."""
    image = nncore.check_tensor(image, "image")
    c, h, w = image.shape
    if c != 1:
        raise InvalidArgument("detect expects a single-channel image")
    if h % CELL or w % CELL:
        raise InvalidArgument(f"image sides must be multiples of {CELL}, got {w}x{h}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise InvalidArgument("image values must lie in [0, 1]")
    logits, desc_map = graphc.execute(graph, image)
    heat = heatmap_from_logits(logits, softmax_mode)
    keypoints = keypoints_from_heatmap(heat, cfg)
    descriptors = sample_descriptors(desc_map, keypoints)
    return DetectionResult(keypoints, descriptors)
