"""Shared test utilities: synthetic weights, datasets, and random graphs.

The random-graph generators keep all affine/quant parameters on dyadic
grids (powers of two for scales, eighths for offsets, integer weights) so
that every float64 rewrite the streamliner performs is exact and the
"unchanged, exactly" soundness checks are meaningful rather than lucky.
"""

import numpy as np
from PIL import Image

from qsp import graphc, superpoint, vo
from qsp.nncore import ConvSpec
from qsp.se3 import PoseSE3, rodrigues


def random_weights(rng, scale=0.4):
    layers = {}
    for name, (cin, cout, k) in superpoint.ARCHITECTURE.items():
        w = rng.normal(0.0, scale, size=(cout, cin, k, k))
        b = rng.normal(0.0, scale / 2, size=cout)
        layers[name] = ConvSpec(cin, cout, k, w, b)
    return superpoint.SuperPointWeights(layers)


def calibration_images(rng, n=2, shape=(1, 48, 64)):
    return [rng.random(shape) for _ in range(n)]


# -- random graphs -----------------------------------------------------------


def _pow2(rng, lo=-3, hi=3, size=None):
    return 2.0 ** rng.integers(lo, hi + 1, size=size).astype(np.float64)


def _dyadic(rng, size=None):
    return rng.integers(-64, 65, size=size).astype(np.float64) / 8.0


def _conv_node(rng, node_id, prev, cin, cout):
    w = rng.integers(-7, 8, size=(cout, cin, 3, 3)).astype(np.int64)
    bias = rng.integers(-16, 17, size=cout).astype(np.int64)
    return graphc.Node(
        node_id,
        "Conv",
        {
            "name": node_id,
            "weight": w,
            "bias": bias.astype(np.float64),
            "bias_int": bias,
            "kernel": 3,
            "padding": 1,
            "domain": "int",
        },
        [prev],
    )


def random_streamline_graph(rng, max_depth=6, channels=4, hw=8):
    """Quantised chain with dyadic-exact parameters; exercises every pass."""
    nodes = [graphc.Node("input", "Input", {"shape": (channels, hw, hw)}, [])]
    nodes.append(
        graphc.Node(
            "q0",
            "Quant",
            {"scale": float(_pow2(rng, -6, 0)), "bits": int(rng.choice([4, 8])), "signed": False},
            ["input"],
        )
    )
    tip = "q0"
    c = channels
    size = hw
    depth = int(rng.integers(1, max_depth + 1))
    for i in range(depth):
        nodes.append(_conv_node(rng, f"conv{i}", tip, c, c))
        tip = f"conv{i}"
        nodes.append(
            graphc.Node(
                f"aff{i}",
                "Affine",
                {"a": _pow2(rng, size=c), "b": _dyadic(rng, size=c)},
                [tip],
            )
        )
        tip = f"aff{i}"
        if rng.random() < 0.3:  # adjacent affine pair -> fuse pass
            nodes.append(
                graphc.Node(
                    f"aff{i}b",
                    "Affine",
                    {"a": _pow2(rng, size=c), "b": _dyadic(rng, size=c)},
                    [tip],
                )
            )
            tip = f"aff{i}b"
        pool_before_act = rng.random() < 0.3 and size % 2 == 0
        if pool_before_act:  # affine must cross the pool to reach its threshold
            nodes.append(graphc.Node(f"pool{i}", "MaxPool", {}, [tip]))
            tip = f"pool{i}"
            size //= 2
        nodes.append(graphc.Node(f"relu{i}", "Relu", {}, [tip]))
        nodes.append(
            graphc.Node(
                f"act{i}",
                "Quant",
                {
                    "scale": float(_pow2(rng, -4, 2)),
                    "bits": int(rng.choice([2, 3, 4, 8])),
                    "signed": False,
                },
                [f"relu{i}"],
            )
        )
        tip = f"act{i}"
        if not pool_before_act and rng.random() < 0.25 and size % 2 == 0:
            nodes.append(graphc.Node(f"postpool{i}", "MaxPool", {}, [tip]))
            tip = f"postpool{i}"
            size //= 2
        if rng.random() < 0.2 and c % 4 == 0:
            nodes.append(graphc.Node(f"d2s{i}", "DepthToSpace", {"block": 2}, [tip]))
            tip = f"d2s{i}"
            c //= 4
            size *= 2
    if rng.random() < 0.5:  # real-valued output boundary
        nodes.append(
            graphc.Node(
                "bound",
                "Affine",
                {"a": _pow2(rng, size=c), "b": np.zeros(c)},
                [tip],
            )
        )
        tip = "bound"
    nodes.append(graphc.Node("out", "Output", {}, [tip]))
    return graphc.GraphIR(nodes, name="random_chain")


def random_lowerable_chain(rng, max_depth=6, channels=3, hw=8):
    """Conv-Relu-Quant chain with arbitrary (non-dyadic) scales; streamlined
    vs lowered must still agree exactly."""
    nodes = [graphc.Node("input", "Input", {"shape": (channels, hw, hw)}, [])]
    nodes.append(
        graphc.Node("q0", "Quant", {"scale": 1.0 / 255.0, "bits": 8, "signed": False}, ["input"])
    )
    tip = "q0"
    depth = int(rng.integers(1, max_depth + 1))
    for i in range(depth):
        nodes.append(_conv_node(rng, f"conv{i}", tip, channels, channels))
        a = rng.uniform(0.001, 0.2, size=channels)
        nodes.append(graphc.Node(f"aff{i}", "Affine", {"a": a, "b": np.zeros(channels)}, [f"conv{i}"]))
        nodes.append(graphc.Node(f"relu{i}", "Relu", {}, [f"aff{i}"]))
        nodes.append(
            graphc.Node(
                f"act{i}",
                "Quant",
                {
                    "scale": float(rng.uniform(0.01, 0.5)),
                    "bits": int(rng.choice([2, 3, 4, 8])),
                    "signed": False,
                },
                [f"relu{i}"],
            )
        )
        tip = f"act{i}"
    nodes.append(
        graphc.Node("bound", "Affine", {"a": rng.uniform(0.01, 1.0, channels), "b": np.zeros(channels)}, [tip])
    )
    nodes.append(graphc.Node("out", "Output", {}, ["bound"]))
    return graphc.GraphIR(nodes, name="lowerable_chain")


# -- synthetic datasets -------------------------------------------------------


def save_gray_png(path, array01):
    """array01: (H, W) floats in [0, 1] -> 8-bit grayscale PNG."""
    img = Image.fromarray(np.round(np.asarray(array01) * 255).astype(np.uint8), mode="L")
    img.save(path)


def save_depth_png(path, raw):
    """raw: (H, W) integers -> 16-bit PNG."""
    img = Image.fromarray(np.asarray(raw).astype(np.uint16))
    img.save(path)


def textured_image(rng, h=48, w=64):
    """Smooth random texture with enough structure for stable detections."""
    base = rng.random((h // 8, w // 8))
    img = np.kron(base, np.ones((8, 8)))
    img += 0.25 * rng.random((h, w))
    img = (img - img.min()) / (img.max() - img.min() + 1e-9)
    return img


def make_tum_dataset(root, rng, n_frames=3, h=48, w=64, motion=None, calib=True):
    """Tiny synthetic TUM-format sequence with constant depth plane."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "rgb").mkdir(exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    base = textured_image(rng, h, w)
    rgb_lines, depth_lines, gt_lines = ["# rgb"], ["# depth"], ["# gt"]
    pose = PoseSE3.identity()
    for i in range(n_frames):
        t = 1000.0 + i * 0.1
        img = np.roll(base, shift=i, axis=1) if motion == "roll" else base
        save_gray_png(root / "rgb" / f"{t:.6f}.png", img)
        save_depth_png(root / "depth" / f"{t:.6f}.png", np.full((h, w), 5000, dtype=np.uint16))
        rgb_lines.append(f"{t:.6f} rgb/{t:.6f}.png")
        depth_lines.append(f"{t:.6f} depth/{t:.6f}.png")
        from qsp.se3 import rot_to_quat

        q = rot_to_quat(pose.rotation)
        tx, ty, tz = pose.translation
        gt_lines.append(
            f"{t:.6f} {tx:.6f} {ty:.6f} {tz:.6f} {q[0]:.6f} {q[1]:.6f} {q[2]:.6f} {q[3]:.6f}"
        )
    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    (root / "groundtruth.txt").write_text("\n".join(gt_lines) + "\n")
    if calib:
        (root / "calibration.txt").write_text(
            "fx = 100.0\nfy = 100.0\ncx = 32.0\ncy = 24.0\ndepth_factor = 5000\n"
        )
    return root


def make_hpatches_dataset(root, rng, n_seq=2, h=48, w=64):
    """Synthetic HPatches tree: identity-ish warps of a random texture."""
    root.mkdir(parents=True, exist_ok=True)
    for s in range(n_seq):
        seq = root / f"v_synth{s}"
        seq.mkdir(exist_ok=True)
        base = textured_image(rng, h, w)
        save_gray_png(seq / "1.png", base)
        for k in range(2, 7):
            dx = (k - 1) % 3
            shifted = np.roll(base, shift=dx, axis=1)
            save_gray_png(seq / f"{k}.png", shifted)
            hmat = np.array([[1.0, 0.0, float(dx)], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
            (seq / f"H_1_{k}").write_text(
                " ".join(f"{v}" for v in hmat.ravel()) + "\n"
            )
    return root


def random_pose(rng, max_angle_deg=30.0, max_trans=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, max_angle_deg))
    t = rng.uniform(-1.0, 1.0, size=3)
    n = np.linalg.norm(t)
    if n > max_trans:
        t *= max_trans / n
    return PoseSE3(rodrigues(axis * angle), t)


def random_trajectory(rng, n=5, dt=0.5, t0=0.0):
    entries = []
    for i in range(n):
        entries.append((t0 + i * dt, random_pose(rng, 40.0, 2.0), i))
    return vo.Trajectory(entries)
