import itertools

import numpy as np
import pytest

from helpers import random_lowerable_chain, random_streamline_graph
from qsp import graphc
from qsp.errors import InvalidGraph, UnsupportedTransform, UnsupportedWidth
from qsp.graphc import GraphIR, Node


def chain(*nodes):
    return GraphIR(list(nodes))


def identity_graph():
    return chain(
        Node("in", "Input", {"shape": (1, 2, 2)}, []),
        Node("out", "Output", {}, ["in"]),
    )


class TestExecutors:
    def test_identity(self, rng):
        x = rng.random((1, 2, 2))
        (y,) = graphc.execute_reference(identity_graph(), x)
        assert np.array_equal(y, x)

    def test_relu_chain(self):
        g = chain(
            Node("in", "Input", {}, []),
            Node("r", "Relu", {}, ["in"]),
            Node("out", "Output", {}, ["r"]),
        )
        (y,) = graphc.execute_reference(g, np.array([[[-1.0, 2.0]]]))
        assert np.array_equal(y, [[[0.0, 2.0]]])

    def test_quant_dequant_round(self):
        g = chain(
            Node("in", "Input", {}, []),
            Node("q", "Quant", {"scale": 1.0, "bits": 8, "signed": False}, ["in"]),
            Node("d", "Dequant", {"scale": 1.0}, ["q"]),
            Node("out", "Output", {}, ["d"]),
        )
        (y,) = graphc.execute_reference(g, np.array([[[0.4]]]))
        assert y[0, 0, 0] == 0.0

    def test_cycle_rejected(self):
        with pytest.raises(InvalidGraph):
            chain(
                Node("in", "Input", {}, []),
                Node("a", "Relu", {}, ["b"]),
                Node("b", "Relu", {}, ["a"]),
                Node("out", "Output", {}, ["b"]),
            )

    def test_duplicate_producer_rejected(self):
        with pytest.raises(InvalidGraph):
            chain(
                Node("in", "Input", {}, []),
                Node("a", "Relu", {}, ["in"], output="t"),
                Node("b", "Relu", {}, ["in"], output="t"),
                Node("out", "Output", {}, ["t"]),
            )


class TestStreamlinePasses:
    def test_no_affine_unchanged(self, rng):
        g = chain(
            Node("in", "Input", {"shape": (1, 4, 4)}, []),
            Node("r", "Relu", {}, ["in"]),
            Node("out", "Output", {}, ["r"]),
        )
        out, reports = graphc.streamline(g)
        assert reports == []
        assert out.kind_census() == g.kind_census()

    def test_absorb_example(self):
        g = chain(
            Node("in", "Input", {"shape": (1, 2, 2)}, []),
            Node("a", "Affine", {"a": np.array([2.0]), "b": np.array([1.0])}, ["in"]),
            Node(
                "t",
                "MultiThreshold",
                {"thresholds": np.array([[1.0, 3.0, 5.0]]), "out_bits": 2},
                ["a"],
            ),
            Node("out", "Output", {}, ["t"]),
        )
        out, _ = graphc.streamline(g)
        census = out.kind_census()
        assert "Affine" not in census
        mt = [n for n in out.nodes if n.kind == "MultiThreshold"][0]
        assert np.array_equal(mt.attrs["thresholds"], [[0.0, 1.0, 2.0]])

    def test_fuse_example(self, rng):
        g = chain(
            Node("in", "Input", {"shape": (1, 2, 2)}, []),
            Node("a1", "Affine", {"a": np.array([2.0]), "b": np.array([0.0])}, ["in"]),
            Node("a2", "Affine", {"a": np.array([3.0]), "b": np.array([1.0])}, ["a1"]),
            Node("out", "Output", {}, ["a2"]),
        )
        out, _ = graphc.streamline(g)
        affines = [n for n in out.nodes if n.kind == "Affine"]
        assert len(affines) == 1
        assert affines[0].attrs["a"][0] == 6.0 and affines[0].attrs["b"][0] == 1.0
        x = rng.random((1, 2, 2))
        assert np.array_equal(
            graphc.execute_reference(g, x)[0], graphc.execute_reference(out, x)[0]
        )

    def test_move_past_maxpool(self, rng):
        g = chain(
            Node("in", "Input", {"shape": (1, 4, 4)}, []),
            Node("a", "Affine", {"a": np.array([2.0]), "b": np.array([1.0])}, ["in"]),
            Node("p", "MaxPool", {}, ["a"]),
            Node(
                "t",
                "MultiThreshold",
                {"thresholds": np.array([[1.0, 3.0]]), "out_bits": 2},
                ["p"],
            ),
            Node("out", "Output", {}, ["t"]),
        )
        out, _ = graphc.streamline(g)
        assert "Affine" not in out.kind_census()
        x = rng.random((1, 4, 4))
        assert np.array_equal(
            graphc.execute_reference(g, x)[0], graphc.execute_reference(out, x)[0]
        )

    def test_negative_scale_into_threshold_rejected(self):
        g = chain(
            Node("in", "Input", {"shape": (1, 2, 2)}, []),
            Node("a", "Affine", {"a": np.array([-1.0]), "b": np.array([0.0])}, ["in"]),
            Node(
                "t",
                "MultiThreshold",
                {"thresholds": np.array([[0.5]]), "out_bits": 2},
                ["a"],
            ),
            Node("out", "Output", {}, ["t"]),
        )
        with pytest.raises(UnsupportedTransform):
            graphc.streamline(g)

    def test_relu_quant_becomes_threshold(self):
        g = chain(
            Node("in", "Input", {"shape": (1, 2, 2)}, []),
            Node("r", "Relu", {}, ["in"]),
            Node("q", "Quant", {"scale": 0.5, "bits": 2, "signed": False}, ["r"]),
            Node("out", "Output", {}, ["q"]),
        )
        out, _ = graphc.streamline(g)
        census = out.kind_census()
        assert census.get("MultiThreshold") == 1 and "Relu" not in census
        mt = [n for n in out.nodes if n.kind == "MultiThreshold"][0]
        assert np.array_equal(mt.attrs["thresholds"], [[0.25, 0.75, 1.25]])


class TestStreamlineSoundness:
    def test_random_graphs_exact(self):
        rng = np.random.default_rng(7)
        for i in range(30):
            g = random_streamline_graph(rng)
            out, _ = graphc.streamline(g)
            for _ in range(3):
                x = rng.random(g.input_node().attrs["shape"])
                ref = graphc.execute_reference(g, x)
                new = graphc.execute_reference(out, x)
                for a, b in zip(ref, new):
                    assert np.array_equal(a, b), f"graph {i} diverged"

    def test_affine_count_decreases_to_fixpoint(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            g = random_streamline_graph(rng)
            out, reports = graphc.streamline(g)
            counts = [g.kind_census().get("Affine", 0)] + [
                r.remaining.get("Affine", 0) for r in reports
            ]
            final = counts[-1]
            # monotone non-increasing, and strictly decreasing until final
            assert all(b <= a for a, b in zip(counts, counts[1:]))
            assert out.kind_census().get("Affine", 0) == final

    def test_pass_order_independence(self):
        rng = np.random.default_rng(13)
        orders = list(itertools.permutations(graphc._PASSES))
        rng.shuffle(orders)
        for _ in range(5):
            g = random_streamline_graph(rng)
            x = rng.random(g.input_node().attrs["shape"])
            base = None
            for order in orders[:5]:
                out, _ = graphc.streamline(g, pass_order=list(order))
                res = graphc.execute_reference(out, x)
                if base is None:
                    base = res
                else:
                    for a, b in zip(base, res):
                        assert np.array_equal(a, b)


class TestLowering:
    def test_unit_scale_conv_unchanged(self, rng):
        w = rng.integers(-3, 4, size=(2, 2, 3, 3)).astype(np.int64)
        b = rng.integers(-3, 4, size=2).astype(np.int64)
        g = chain(
            Node("in", "Input", {"shape": (2, 4, 4)}, []),
            Node("q", "Quant", {"scale": 1.0, "bits": 8, "signed": False}, ["in"]),
            Node(
                "c",
                "Conv",
                {
                    "name": "c",
                    "weight": w,
                    "bias": b.astype(np.float64),
                    "bias_int": b,
                    "kernel": 3,
                    "padding": 1,
                    "domain": "int",
                },
                ["q"],
            ),
            Node("out", "Output", {}, ["c"]),
        )
        low = graphc.lower_integer(g)
        node = low.node_by_id("c")
        assert np.array_equal(node.attrs["weight"], w)
        assert np.array_equal(node.attrs["bias_int"], b)

    def test_budget_formula(self):
        assert graphc.accumulator_bits(8, 8, 3, 128) == 28

    def test_budget_overflow_rejected(self, rng):
        w = rng.integers(-3, 4, size=(1, 1, 3, 3)).astype(np.int64)
        g = chain(
            Node("in", "Input", {"shape": (1, 4, 4)}, []),
            Node("q", "Quant", {"scale": 1.0, "bits": 8, "signed": False}, ["in"]),
            Node(
                "c",
                "Conv",
                {
                    "name": "c",
                    "weight": w,
                    "bias": np.zeros(1),
                    "bias_int": np.zeros(1, dtype=np.int64),
                    "kernel": 3,
                    "padding": 1,
                    "domain": "int",
                    "w_bits": 40,
                },
                ["q"],
            ),
            Node("out", "Output", {}, ["c"]),
        )
        g.node_by_id("q").attrs["bits"] = 8
        g.node_by_id("c").attrs["w_bits"] = 60
        with pytest.raises(UnsupportedWidth):
            graphc.lower_integer(g)

    def test_streamlined_vs_lowered_chains_exact(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            g = random_lowerable_chain(rng)
            s, _ = graphc.streamline(g)
            low = graphc.lower_integer(s)
            assert graphc.verify_equivalence(s, low, trials=3, seed=5) == 0.0

    def test_threshold_mutation_detected(self):
        rng = np.random.default_rng(19)
        g = random_lowerable_chain(rng, max_depth=3)
        s, _ = graphc.streamline(g)
        low = graphc.lower_integer(s)
        # drop the level-1 boundary of the last bank: every site that used to
        # emit 0 now emits at least 1
        for node in reversed(low.nodes):
            if node.kind == "MultiThreshold":
                t = node.attrs["thresholds"].copy()
                t[:, 0] = -(1 << 40)
                node.attrs["thresholds"] = t
                break
        assert graphc.verify_equivalence(s, low, trials=10, seed=5) > 0.0

    def test_leftover_relu_rejected(self):
        g = chain(
            Node("in", "Input", {"shape": (1, 2, 2)}, []),
            Node("r", "Relu", {}, ["in"]),
            Node("out", "Output", {}, ["r"]),
        )
        with pytest.raises(UnsupportedTransform):
            graphc.lower_integer(g)

    def test_identical_graphs_zero_deviation(self, rng):
        g = identity_graph()
        assert graphc.verify_equivalence(g, g, trials=3, seed=0) == 0.0


class TestGraphJson:
    def test_round_trip(self):
        rng = np.random.default_rng(23)
        g = random_streamline_graph(rng)
        text = graphc.graph_to_json(g)
        back = graphc.graph_from_json(text)
        x = rng.random(g.input_node().attrs["shape"])
        ref = graphc.execute_reference(g, x)
        new = graphc.execute_reference(back, x)
        for a, b in zip(ref, new):
            assert np.array_equal(a, b)
        assert graphc.graph_to_json(back) == text

    def test_lowered_round_trip(self):
        rng = np.random.default_rng(29)
        g = random_lowerable_chain(rng, max_depth=2)
        s, _ = graphc.streamline(g)
        low = graphc.lower_integer(s)
        back = graphc.graph_from_json(graphc.graph_to_json(low))
        assert back.lowered
        assert graphc.verify_equivalence(s, back, trials=2, seed=3) == 0.0

    def test_version_check(self):
        with pytest.raises(InvalidGraph):
            graphc.graph_from_json('{"version": 99, "nodes": []}')
