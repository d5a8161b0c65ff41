"""Dataflow-graph IR plus the streamlining and integer-lowering passes.

A graph is an ordered list of typed nodes (topological order is an
invariant).  Quantised graphs are built with integer conv weights and
explicit Affine scale nodes; streamlining converts ReLU+requant pairs to
threshold banks and folds every Affine on a threshold path into the
thresholds.  Lowering then rounds thresholds onto the integer accumulator
grid (`ceil`), after which execution is integer-only up to the output
boundary and agrees with the streamlined real-arithmetic reference exactly.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels, nncore
from .errors import (
    InvalidArgument,
    InvalidGraph,
    UnsupportedTransform,
    UnsupportedWidth,
)
from .quant import round_half_away

NODE_KINDS = (
    "Input",
    "Output",
    "Conv",
    "MaxPool",
    "Relu",
    "Quant",
    "Dequant",
    "Affine",
    "MultiThreshold",
    "Softmax",
    "DepthToSpace",
    "Resize",
    "L2Norm",
)

_THRESHOLD_CLIP = 1 << 62  # beyond any admissible accumulator


@dataclass(eq=False)
class Node:
    id: str
    kind: str
    attrs: dict
    inputs: list
    output: str = ""

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise InvalidGraph(f"unknown node kind {self.kind!r}")
        if not self.output:
            self.output = self.id

    def copy(self) -> "Node":
        return Node(self.id, self.kind, dict(self.attrs), list(self.inputs), self.output)


@dataclass(eq=False)
class GraphIR:
    nodes: list
    name: str = "graph"
    lowered: bool = False
    budgets: dict = field(default_factory=dict)  # conv node id -> accumulator bits

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen_out = set()
        ids = set()
        for node in self.nodes:
            if node.id in ids:
                raise InvalidGraph(f"duplicate node id {node.id!r}")
            ids.add(node.id)
            if node.output in seen_out:
                raise InvalidGraph(f"tensor {node.output!r} has two producers")
            for src in node.inputs:
                if src not in seen_out:
                    raise InvalidGraph(
                        f"node {node.id!r} consumes {src!r} before it is produced"
                    )
            seen_out.add(node.output)

    def node_by_id(self, node_id: str) -> Node:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise InvalidGraph(f"no node {node_id!r}")

    def producer_of(self, tensor: str) -> Node:
        for node in self.nodes:
            if node.output == tensor:
                return node
        raise InvalidGraph(f"no producer for {tensor!r}")

    def consumers_of(self, tensor: str) -> list:
        return [n for n in self.nodes if tensor in n.inputs]

    def input_node(self) -> Node:
        inputs = [n for n in self.nodes if n.kind == "Input"]
        if len(inputs) != 1:
            raise InvalidGraph(f"expected one Input node, found {len(inputs)}")
        return inputs[0]

    def output_nodes(self) -> list:
        return [n for n in self.nodes if n.kind == "Output"]

    def kind_census(self) -> dict:
        census = {}
        for node in self.nodes:
            census[node.kind] = census.get(node.kind, 0) + 1
        return census

    def copy(self) -> "GraphIR":
        g = GraphIR([n.copy() for n in self.nodes], self.name, self.lowered)
        g.budgets = dict(self.budgets)
        return g


@dataclass
class PassReport:
    name: str
    rewritten: int
    remaining: dict

    def to_dict(self) -> dict:
        return {"pass": self.name, "rewritten": self.rewritten, "remaining": self.remaining}


# -- execution ---------------------------------------------------------------


def _affine_params(attrs):
    a = np.atleast_1d(np.asarray(attrs["a"], dtype=np.float64))
    b = np.atleast_1d(np.asarray(attrs["b"], dtype=np.float64))
    return a, b


def _channelwise(v, x):
    return v if v.size == 1 else v.reshape((v.size,) + (1,) * (x.ndim - 1))


def _quant_levels(x, attrs):
    scale = attrs["scale"]
    bits = attrs["bits"]
    signed = attrs["signed"]
    qmin = -(1 << (bits - 1)) if signed else 0
    qmax = (1 << (bits - 1)) - 1 if signed else (1 << bits) - 1
    return np.clip(round_half_away(x / scale), qmin, qmax)


def _run_thresholds(x, rows):
    channels = x.shape[0]
    if rows.shape[0] == 1 and channels > 1:
        rows = np.broadcast_to(rows, (channels, rows.shape[1]))
    if rows.shape[0] != channels:
        raise InvalidGraph(
            f"threshold bank has {rows.shape[0]} rows for {channels} channels"
        )
    flat = np.ascontiguousarray(x.reshape(channels, -1))
    counts = kernels.threshold_count(flat, np.ascontiguousarray(rows))
    return counts.reshape(x.shape)


def execute_reference(graph: GraphIR, x, trace: dict | None = None):
    """Run the graph in float64 (fake-quantised) arithmetic.

    Quant nodes emit integer levels as float64; Conv nodes with integer
    weights accumulate those levels exactly.  Returns one array per Output
    node, in graph order.  Pass a dict as `trace` to capture every
    intermediate tensor by output name.
    """
    values = {} if trace is None else trace
    outputs = []
    x = np.asarray(x, dtype=np.float64)
    for node in graph.nodes:
        kind = node.kind
        args = [values[src] for src in node.inputs]
        if kind == "Input":
            result = x
        elif kind == "Output":
            outputs.append(args[0])
            continue
        elif kind == "Conv":
            w = np.asarray(node.attrs["weight"], dtype=np.float64)
            bias = np.asarray(node.attrs["bias"], dtype=np.float64)
            result = kernels.conv2d_f64(
                np.ascontiguousarray(args[0]), w, bias, node.attrs["padding"]
            )
        elif kind == "MaxPool":
            if args[0].shape[1] % 2 or args[0].shape[2] % 2:
                raise InvalidGraph(f"node {node.id}: MaxPool needs even H and W")
            result = kernels.maxpool2x2_f64(np.ascontiguousarray(args[0]))
        elif kind == "Relu":
            result = np.maximum(args[0], 0.0)
        elif kind == "Quant":
            result = _quant_levels(args[0], node.attrs)
        elif kind == "Dequant":
            scale = np.atleast_1d(np.asarray(node.attrs["scale"], dtype=np.float64))
            result = args[0] * _channelwise(scale, args[0])
        elif kind == "Affine":
            a, b = _affine_params(node.attrs)
            result = args[0] * _channelwise(a, args[0]) + _channelwise(b, args[0])
        elif kind == "MultiThreshold":
            rows = np.asarray(node.attrs["thresholds"], dtype=np.float64)
            result = _run_thresholds(args[0], rows).astype(np.float64)
        elif kind == "Softmax":
            result = nncore.softmax_channels(
                args[0], nncore.SoftmaxMode(node.attrs.get("mode", "float_e"))
            )
        elif kind == "DepthToSpace":
            result = nncore.depth_to_space(args[0], node.attrs["block"])
        elif kind == "Resize":
            result = nncore.resize_bilinear(
                args[0], node.attrs["out_h"], node.attrs["out_w"]
            )
        elif kind == "L2Norm":
            result = nncore.l2_normalize_channels(args[0], node.attrs.get("eps", 1e-12))
        else:
            raise InvalidGraph(f"kind {kind} not executable")
        values[node.output] = result
    return outputs


def execute_lowered(graph: GraphIR, x):
    """Run a lowered graph: int64 end to end until the Dequant/Affine boundary."""
    if not graph.lowered:
        raise InvalidGraph("graph is not lowered; use execute_reference")
    values = {}
    outputs = []
    x = np.asarray(x, dtype=np.float64)
    for node in graph.nodes:
        kind = node.kind
        args = [values[src] for src in node.inputs]
        if kind == "Input":
            result = x
        elif kind == "Output":
            outputs.append(args[0])
            continue
        elif kind == "Quant":
            result = _quant_levels(args[0], node.attrs).astype(np.int64)
        elif kind == "Conv":
            if args[0].dtype != np.int64:
                raise InvalidGraph(f"node {node.id}: lowered Conv needs integer input")
            w = np.asarray(node.attrs["weight"], dtype=np.int64)
            bias = np.asarray(node.attrs["bias_int"], dtype=np.int64)
            result = kernels.conv2d_i64(
                np.ascontiguousarray(args[0]), w, bias, node.attrs["padding"]
            )
        elif kind == "MaxPool":
            result = kernels.maxpool2x2_i64(np.ascontiguousarray(args[0]))
        elif kind == "MultiThreshold":
            rows = np.asarray(node.attrs["thresholds"], dtype=np.int64)
            result = _run_thresholds(args[0], rows)
        elif kind == "DepthToSpace":
            result = nncore.depth_to_space_raw(args[0], node.attrs["block"])
        elif kind == "Dequant":
            scale = np.atleast_1d(np.asarray(node.attrs["scale"], dtype=np.float64))
            out = args[0].astype(np.float64)
            result = out * _channelwise(scale, out)
        elif kind == "Affine":
            a, b = _affine_params(node.attrs)
            out = args[0].astype(np.float64)
            result = out * _channelwise(a, out) + _channelwise(b, out)
        elif kind == "Softmax":
            result = nncore.softmax_channels(
                args[0].astype(np.float64),
                nncore.SoftmaxMode(node.attrs.get("mode", "float_e")),
            )
        elif kind == "L2Norm":
            result = nncore.l2_normalize_channels(
                args[0].astype(np.float64), node.attrs.get("eps", 1e-12)
            )
        elif kind == "Resize":
            result = nncore.resize_bilinear(
                args[0].astype(np.float64), node.attrs["out_h"], node.attrs["out_w"]
            )
        else:
            raise InvalidGraph(f"kind {kind} not executable in lowered graphs")
        values[node.output] = result
    return outputs


def execute(graph: GraphIR, x):
    return execute_lowered(graph, x) if graph.lowered else execute_reference(graph, x)


# -- streamlining ------------------------------------------------------------


def _single_consumer(graph: GraphIR, node: Node):
    consumers = graph.consumers_of(node.output)
    return consumers[0] if len(consumers) == 1 else None


def _pass_canonicalize_dequant(graph: GraphIR):
    """Dequant is Affine(scale, 0); rewrite so later passes see one node kind."""
    count = 0
    for node in graph.nodes:
        if node.kind == "Dequant":
            scale = np.atleast_1d(np.asarray(node.attrs["scale"], dtype=np.float64))
            node.kind = "Affine"
            node.attrs = {"a": scale, "b": np.zeros_like(scale)}
            count += 1
    return count


def _pass_fuse_affine(graph: GraphIR):
    count = 0
    for node in list(graph.nodes):
        if node.kind != "Affine" or node not in graph.nodes:
            continue
        nxt = _single_consumer(graph, node)
        if nxt is None or nxt.kind != "Affine":
            continue
        a1, b1 = _affine_params(node.attrs)
        a2, b2 = _affine_params(nxt.attrs)
        nxt.attrs = {"a": a2 * a1, "b": a2 * b1 + b2}
        nxt.inputs = list(node.inputs)
        graph.nodes.remove(node)
        count += 1
    return count


_SHAPE_ONLY = {"MaxPool", "DepthToSpace", "Resize"}


def _movable_past(node: Node, nxt: Node) -> bool:
    a, b = _affine_params(node.attrs)
    if nxt.kind == "MaxPool":
        return bool(np.all(a > 0))
    if nxt.kind == "DepthToSpace":
        # per-channel parameters would become spatially varying
        return a.size == 1 and b.size == 1
    if nxt.kind == "Resize":
        return a.size == 1 and b.size == 1 and float(b[0]) == 0.0
    return False


def _pass_move_affine(graph: GraphIR):
    count = 0
    changed = True
    while changed:
        changed = False
        for idx, node in enumerate(graph.nodes):
            if node.kind != "Affine":
                continue
            nxt = _single_consumer(graph, node)
            if nxt is None or nxt.kind not in _SHAPE_ONLY:
                continue
            if not _movable_past(node, nxt):
                continue
            # x -> Affine -> Shape  becomes  x -> Shape -> Affine, reusing the
            # affine's old tensor name for the shape node's new output
            src = node.inputs[0]
            o_affine, o_shape = node.output, nxt.output
            nxt.inputs = [src]
            nxt.output = o_affine
            node.inputs = [o_affine]
            node.output = o_shape
            j = graph.nodes.index(nxt)
            graph.nodes[idx], graph.nodes[j] = graph.nodes[j], graph.nodes[idx]
            count += 1
            changed = True
            break
    return count


def _pass_relu_quant_to_threshold(graph: GraphIR):
    count = 0
    for node in list(graph.nodes):
        if node.kind != "Relu" or node not in graph.nodes:
            continue
        nxt = _single_consumer(graph, node)
        if nxt is None or nxt.kind != "Quant" or nxt.attrs["signed"]:
            continue
        bits = nxt.attrs["bits"]
        scale = float(nxt.attrs["scale"])
        n = (1 << bits) - 1
        rows = (scale * (np.arange(1, n + 1, dtype=np.float64) - 0.5))[None, :]
        nxt.kind = "MultiThreshold"
        nxt.attrs = {"thresholds": rows, "out_bits": bits}
        nxt.inputs = list(node.inputs)
        graph.nodes.remove(node)
        count += 1
    return count


def _pass_absorb_affine(graph: GraphIR):
    count = 0
    for node in list(graph.nodes):
        if node.kind != "Affine" or node not in graph.nodes:
            continue
        nxt = _single_consumer(graph, node)
        if nxt is None or nxt.kind != "MultiThreshold":
            continue
        a, b = _affine_params(node.attrs)
        if np.any(a <= 0):
            raise UnsupportedTransform(
                f"node {node.id}: affine with non-positive scale feeds thresholds"
            )
        rows = np.asarray(nxt.attrs["thresholds"], dtype=np.float64)
        channels = max(rows.shape[0], a.size, b.size)
        rows = np.broadcast_to(rows, (channels, rows.shape[1]))
        av = np.broadcast_to(a, (channels,))[:, None]
        bv = np.broadcast_to(b, (channels,))[:, None]
        nxt.attrs = {"thresholds": (rows - bv) / av, "out_bits": nxt.attrs["out_bits"]}
        nxt.inputs = list(node.inputs)
        graph.nodes.remove(node)
        count += 1
    return count


_PASSES = (
    ("canonicalize_dequant", _pass_canonicalize_dequant),
    ("fuse_affine", _pass_fuse_affine),
    ("move_affine_past_shape", _pass_move_affine),
    ("relu_quant_to_threshold", _pass_relu_quant_to_threshold),
    ("absorb_affine_into_threshold", _pass_absorb_affine),
)


def _threshold_paths_clear(graph: GraphIR):
    """No Affine may remain on any path that ends in a MultiThreshold."""
    for node in graph.nodes:
        if node.kind != "MultiThreshold":
            continue
        stack = list(node.inputs)
        seen = set()
        while stack:
            tensor = stack.pop()
            if tensor in seen:
                continue
            seen.add(tensor)
            producer = graph.producer_of(tensor)
            if producer.kind == "Affine":
                a, _ = _affine_params(producer.attrs)
                reason = "non-positive scale" if np.any(a <= 0) else "pass fragment"
                raise UnsupportedTransform(
                    f"node {producer.id}: affine stuck on a threshold path ({reason})"
                )
            stack.extend(producer.inputs)


def streamline(graph: GraphIR, pass_order=None, on_pass=None):
    """Apply the streamlining passes to fixpoint.

    Returns (new graph, reports), one report per pass application in order.
    After the fixpoint no Affine remains on any path ending in a
    MultiThreshold; a violation raises UnsupportedTransform.  `on_pass`
    (graph, report) is invoked after every pass that rewrote something.
    """
    g = graph.copy()
    reports = []
    passes = list(pass_order or _PASSES)
    for _ in range(10 * len(g.nodes) + 10):
        round_rewrites = 0
        for name, fn in passes:
            rewritten = fn(g)
            round_rewrites += rewritten
            if rewritten:
                report = PassReport(name, rewritten, g.kind_census())
                reports.append(report)
                if on_pass is not None:
                    on_pass(g, report)
        if round_rewrites == 0:
            break
    else:
        raise UnsupportedTransform("streamline did not reach a fixpoint")
    g.validate()
    _threshold_paths_clear(g)
    return g, reports


# -- integer lowering --------------------------------------------------------


def _weight_bits(weights: np.ndarray) -> int:
    mag = int(np.abs(weights).max(initial=0))
    bits = 1
    while (1 << (bits - 1)) - 1 < mag:
        bits += 1
    return bits


def accumulator_bits(w_bits: int, in_bits: int, kernel: int, in_channels: int) -> int:
    return w_bits + in_bits + int(np.ceil(np.log2(kernel * kernel * in_channels))) + 1


def lower_integer(graph: GraphIR, cfg=None) -> GraphIR:
    """Round thresholds onto the accumulator grid and mark the graph integer.

    Requires a streamlined quantised graph: every activation thresholded,
    conv weights and biases already integer.  Computes the per-conv
    accumulator budget and rejects anything beyond 64 bits.
    """
    g = graph.copy()
    bits_on_edge = {}
    budgets = {}
    for node in g.nodes:
        if node.kind == "Relu":
            raise UnsupportedTransform(f"node {node.id}: activation was not thresholded")
        if node.kind == "Input":
            bits_on_edge[node.output] = None
        elif node.kind == "Quant":
            src = g.producer_of(node.inputs[0])
            if src.kind != "Input":
                raise UnsupportedTransform(
                    f"node {node.id}: only input quantisation survives lowering"
                )
            bits_on_edge[node.output] = node.attrs["bits"]
        elif node.kind == "Conv":
            w = np.asarray(node.attrs["weight"])
            if not np.issubdtype(w.dtype, np.integer):
                if np.any(w != np.round(w)):
                    raise InvalidArgument(
                        f"node {node.id}: conv weights are not integer-valued"
                    )
                node.attrs["weight"] = w.astype(np.int64)
            if "bias_int" not in node.attrs:
                raise InvalidArgument(f"node {node.id}: conv lacks an integer bias")
            in_bits = bits_on_edge.get(node.inputs[0])
            if in_bits is None:
                raise UnsupportedTransform(
                    f"node {node.id}: conv input is not in the integer domain"
                )
            w_bits = node.attrs.get("w_bits") or _weight_bits(node.attrs["weight"])
            need = accumulator_bits(w_bits, in_bits, node.attrs["kernel"], w.shape[1])
            if need > 64:
                raise UnsupportedWidth(
                    f"node {node.id}: accumulator needs {need} bits (> 64)"
                )
            budgets[node.id] = need
            bits_on_edge[node.output] = need
        elif node.kind == "MultiThreshold":
            rows = np.asarray(node.attrs["thresholds"], dtype=np.float64)
            ints = np.clip(np.ceil(rows), -_THRESHOLD_CLIP, _THRESHOLD_CLIP)
            node.attrs["thresholds"] = ints.astype(np.int64)
            bits_on_edge[node.output] = node.attrs["out_bits"]
        elif node.kind in ("MaxPool", "DepthToSpace"):
            bits_on_edge[node.output] = bits_on_edge.get(node.inputs[0])
        elif node.kind in ("Dequant", "Affine", "Softmax", "L2Norm", "Resize"):
            bits_on_edge[node.output] = None
        elif node.kind == "Output":
            continue
    g.lowered = True
    g.budgets = budgets
    return g


def verify_equivalence(g_ref: GraphIR, g_lowered: GraphIR, trials: int = 10, seed: int = 0,
                       input_shape=None) -> float:
    """Max abs deviation between the two graphs over random inputs in [0, 1)."""
    shape = input_shape or g_ref.input_node().attrs.get("shape")
    if shape is None:
        raise InvalidArgument("input shape unknown; set it on the Input node")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.random(tuple(shape))
        ref = execute(g_ref, x)
        low = execute(g_lowered, x)
        if len(ref) != len(low):
            raise InvalidGraph("graphs disagree on output count")
        for r, l in zip(ref, low):
            l = np.asarray(l, dtype=np.float64)
            if r.shape != l.shape:
                raise InvalidGraph(f"output shapes differ: {r.shape} vs {l.shape}")
            worst = max(worst, float(np.abs(r - l).max(initial=0.0)))
    return worst


# -- JSON serialisation -------------------------------------------------------

GRAPH_JSON_VERSION = 1


def _encode_attr(value):
    if isinstance(value, np.ndarray):
        return {
            "__array__": True,
            "dtype": str(value.dtype),
            "shape": list(value.shape),
            "data": value.ravel().tolist(),
            "sha256": hashlib.sha256(np.ascontiguousarray(value).tobytes()).hexdigest(),
        }
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def _decode_attr(value):
    if isinstance(value, dict) and value.get("__array__"):
        arr = np.array(value["data"], dtype=value["dtype"]).reshape(value["shape"])
        return arr
    return value


def graph_to_json(graph: GraphIR) -> str:
    doc = {
        "version": GRAPH_JSON_VERSION,
        "name": graph.name,
        "lowered": graph.lowered,
        "budgets": graph.budgets,
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind,
                "attrs": {k: _encode_attr(v) for k, v in sorted(n.attrs.items())},
                "inputs": n.inputs,
                "output": n.output,
            }
            for n in graph.nodes
        ],
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def graph_from_json(text: str) -> GraphIR:
    doc = json.loads(text)
    if doc.get("version") != GRAPH_JSON_VERSION:
        raise InvalidGraph(f"unsupported graph version {doc.get('version')}")
    nodes = [
        Node(
            d["id"],
            d["kind"],
            {k: _decode_attr(v) for k, v in d["attrs"].items()},
            list(d["inputs"]),
            d["output"],
        )
        for d in doc["nodes"]
    ]
    g = GraphIR(nodes, doc.get("name", "graph"), doc.get("lowered", False))
    g.budgets = {k: int(v) for k, v in doc.get("budgets", {}).items()}
    return g
