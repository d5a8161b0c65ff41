"""Command-line entry point.

Subcommands: extract, compile, eval-hpatches, run-vo, eval-trajectory.
Every report embeds a run manifest (command, resolved parameters, input
digests, seed, version); wall-clock timings live under "timings" and are
the only fields allowed to differ between identical runs.  Exit codes:
0 ok, 1 usage/validation, 2 I/O, 3 compute.
"""

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__, backend, dataio, graphc, metrics, superpoint, vo
from .errors import (
    InvalidArgument,
    IoError,
    QspError,
    UndefinedMetric,
)
from .nncore import SoftmaxMode, resize_bilinear
from .quant import BitWidthConfig

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_COMPUTE = 0, 1, 2, 3

CALIBRATION_SHAPE = (1, 48, 64)  # synthetic calibration images for `compile`


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _atomic_write(path: Path, data):
    """Write via a temp file + rename so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Manifest:
    """Collects resolved parameters, input digests, and stage timings."""

    def __init__(self, command: str, seed: int, parameters: dict):
        self.doc = {
            "command": command,
            "seed": seed,
            "version": __version__,
            "backend": backend.backend_name(),
            "parameters": {k: v for k, v in sorted(parameters.items())},
            "inputs": {},
            "timings": {},
        }
        self._t0 = time.perf_counter()

    def add_input(self, path):
        path = Path(path)
        if path.is_file():
            self.doc["inputs"][str(path)] = _digest(path)
        elif path.is_dir():
            files = sorted(p.name for p in path.iterdir())
            self.doc["inputs"][str(path)] = f"dir:{len(files)}"

    def stage(self, name: str):
        now = time.perf_counter()
        self.doc["timings"][name] = round(now - self._t0, 6)
        self._t0 = now


def _report_json(manifest: Manifest, payload: dict) -> str:
    doc = dict(payload)
    doc["manifest"] = manifest.doc
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def _resolve_bits(spec: str):
    """--bits value: fp, a preset name, or a path to a config file."""
    if spec == "fp":
        return "float"
    if spec in ("int8", "int4", "int3", "mixed424"):
        return BitWidthConfig.preset(spec)
    path = Path(spec)
    if not path.exists():
        raise IoError(f"bit-width config file not found: {spec}")
    return BitWidthConfig.from_text(path.read_text(), name=path.stem)


def _build_for_inference(weights, bits, calib_images, input_shape=None):
    """Float graph, or calibrate + build + streamline + lower for presets."""
    if bits == "float":
        return superpoint.build_graph(weights, "float", input_shape=input_shape)
    stats = superpoint.collect_activation_stats(weights, calib_images)
    g = superpoint.build_graph(weights, bits, stats, input_shape=input_shape)
    streamlined, _ = graphc.streamline(g)
    return graphc.lower_integer(streamlined)


def _detector_config(args) -> superpoint.DetectorConfig:
    return superpoint.DetectorConfig(
        conf_threshold=args.conf,
        nms_radius=args.nms_radius,
        border_margin=args.border,
        max_keypoints=args.top_k,
    )


def _softmax_mode(args) -> SoftmaxMode:
    return SoftmaxMode(args.softmax)


# -- extract ------------------------------------------------------------------


def cmd_extract(args) -> int:
    manifest = Manifest(
        "extract",
        args.seed,
        {
            "image": args.image,
            "weights": args.weights,
            "bits": args.bits,
            "conf": args.conf,
            "nms_radius": args.nms_radius,
            "border": args.border,
            "top_k": args.top_k,
            "softmax": args.softmax,
        },
    )
    weights_dir = Path(args.weights)
    manifest.add_input(weights_dir / "manifest.json")
    manifest.add_input(weights_dir / "weights.bin")
    manifest.add_input(args.image)
    weights = dataio.load_weights(weights_dir)
    image = dataio.decode_image(args.image)
    if image.ndim != 3:
        raise InvalidArgument(f"{args.image} decodes to depth, not greyscale")
    manifest.stage("load")

    bits = _resolve_bits(args.bits)
    graph = _build_for_inference(weights, bits, [image], input_shape=image.shape)
    manifest.stage("build")

    result = superpoint.detect(image, graph, _detector_config(args), _softmax_mode(args))
    manifest.stage("detect")

    out = Path(args.out) if args.out else Path(args.image).with_suffix(".det")
    _atomic_write(out, result.to_binary())
    summary = {
        "keypoints": len(result),
        "image_shape": list(image.shape),
        "bits": args.bits,
        "detections_file": str(out),
    }
    _atomic_write(out.with_suffix(".json"), _report_json(manifest, summary))
    print(f"extract: {len(result)} keypoints -> {out}")
    for stage, dt in manifest.doc["timings"].items():
        print(f"  {stage}: {dt:.3f}s")
    return EXIT_OK


# -- compile ------------------------------------------------------------------


def cmd_compile(args) -> int:
    if args.bits == "fp":
        print("compile: nothing to lower for fp; pick an integer preset", file=sys.stderr)
        return EXIT_USAGE
    manifest = Manifest(
        "compile",
        args.seed,
        {"weights": args.weights, "bits": args.bits, "trials": args.trials},
    )
    weights_dir = Path(args.weights)
    manifest.add_input(weights_dir / "manifest.json")
    manifest.add_input(weights_dir / "weights.bin")
    weights = dataio.load_weights(weights_dir)
    bits = _resolve_bits(args.bits)
    rng = np.random.default_rng(args.seed)
    calib = [rng.random(CALIBRATION_SHAPE) for _ in range(2)]
    stats = superpoint.collect_activation_stats(weights, calib)
    g = superpoint.build_graph(weights, bits, stats, input_shape=CALIBRATION_SHAPE)
    manifest.stage("build")

    dump_dir = Path(args.dump_passes) if args.dump_passes else None
    dumped = []

    def on_pass(graph, report):
        if dump_dir is None:
            return
        idx = len(dumped)
        name = f"pass_{idx:03d}_{report.name}.json"
        _atomic_write(dump_dir / name, graphc.graph_to_json(graph))
        dumped.append(report.to_dict())

    streamlined, reports = graphc.streamline(g, on_pass=on_pass)
    lowered = graphc.lower_integer(streamlined)
    if args.debug_corrupt_threshold:
        for node in reversed(lowered.nodes):
            if node.kind == "MultiThreshold":
                t = node.attrs["thresholds"].copy()
                t[:, 0] = -(1 << 40)
                node.attrs["thresholds"] = t
                break
    manifest.stage("lower")

    deviation = graphc.verify_equivalence(streamlined, lowered, args.trials, args.seed)
    manifest.stage("verify")

    if dump_dir is not None:
        _atomic_write(
            dump_dir / "pass_reports.json",
            json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True) + "\n",
        )
    payload = {
        "bits": args.bits,
        "deviation": deviation,
        "accumulator_bits": lowered.budgets,
        "node_census": lowered.kind_census(),
        "passes": [r.to_dict() for r in reports],
    }
    out = Path(args.out) if args.out else Path(f"compiled_{args.bits}.json")
    _atomic_write(out, graphc.graph_to_json(lowered))
    _atomic_write(out.with_suffix(".report.json"), _report_json(manifest, payload))
    print(f"compile: deviation={deviation} budgets={lowered.budgets}")
    if deviation != 0.0:
        print("compile: lowered graph deviates from the reference", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


# -- eval-hpatches ------------------------------------------------------------


def _scale_matrix(src_shape, dst_shape):
    sy = dst_shape[0] / src_shape[0]
    sx = dst_shape[1] / src_shape[1]
    return np.array(
        [[sx, 0.0, 0.5 * sx - 0.5], [0.0, sy, 0.5 * sy - 0.5], [0.0, 0.0, 1.0]]
    )


def cmd_eval_hpatches(args) -> int:
    manifest = Manifest(
        "eval-hpatches",
        args.seed,
        {
            "dataset": args.dataset,
            "weights": args.weights,
            "bits": args.bits,
            "eps": args.eps,
            "top_k": args.top_k,
            "e": args.e,
            "min_sim": args.min_sim,
            "conf": args.conf,
            "nms_radius": args.nms_radius,
            "border": args.border,
            "resize": list(args.resize),
        },
    )
    manifest.add_input(args.dataset)
    sequences = dataio.load_hpatches(args.dataset)
    weights = dataio.load_weights(args.weights)
    target = tuple(args.resize)  # (H, W)

    def prepared(path):
        img = dataio.decode_image(path)
        if img.ndim != 3:
            raise InvalidArgument(f"{path} is not a greyscale image")
        src_shape = img.shape[1:]
        if src_shape != target:
            img = resize_bilinear(img, *target)
        return np.clip(img, 0.0, 1.0), src_shape

    first_image, _ = prepared(sequences[0].image_paths[0])
    bits = _resolve_bits(args.bits)
    graph = _build_for_inference(weights, bits, [first_image], input_shape=first_image.shape)
    manifest.stage("build")

    # the detector keeps a generous pool; metrics trim to --top-k themselves
    cfg = superpoint.DetectorConfig(
        conf_threshold=args.conf,
        nms_radius=args.nms_radius,
        border_margin=args.border,
        max_keypoints=max(1000, args.top_k),
    )
    mode = _softmax_mode(args)
    per_sequence = []
    pair_rep, pair_loc, pair_hom = [], [], []
    undefined = 0
    for seq in sequences:
        ref_img, ref_shape = prepared(seq.image_paths[0])
        det_ref = superpoint.detect(ref_img, graph, cfg, mode)
        s_ref = _scale_matrix(ref_shape, target)
        reps, locs, homs = [], [], []
        for k in range(5):
            tgt_img, tgt_shape = prepared(seq.image_paths[k + 1])
            det_tgt = superpoint.detect(tgt_img, graph, cfg, mode)
            h = _scale_matrix(tgt_shape, target) @ seq.homographies[k] @ np.linalg.inv(s_ref)
            try:
                reps.append(
                    metrics.repeatability(
                        det_ref.keypoints, det_tgt.keypoints, h, target,
                        eps=args.eps, top_k=args.top_k,
                    )
                )
                locs.append(
                    metrics.localization_error(
                        det_ref.keypoints, det_tgt.keypoints, h, target,
                        eps=args.eps, top_k=args.top_k,
                    )
                )
            except UndefinedMetric:
                undefined += 1
            try:
                correct, _err = metrics.homography_score(
                    det_ref, det_tgt, h, target, e=args.e, seed=args.seed,
                    min_similarity=args.min_sim,
                )
                homs.append(1.0 if correct else 0.0)
            except QspError:
                homs.append(0.0)  # estimation failure counts as incorrect
        pair_rep.extend(reps)
        pair_loc.extend(locs)
        pair_hom.extend(homs)
        per_sequence.append(
            {
                "sequence": seq.name,
                "repeatability": float(np.mean(reps)) if reps else None,
                "localization_error": float(np.mean(locs)) if locs else None,
                "homography_accuracy": float(np.mean(homs)) if homs else None,
            }
        )
    manifest.stage("evaluate")
    if not pair_rep and not pair_hom:
        print("eval-hpatches: no metric could be computed", file=sys.stderr)
        return EXIT_IO
    aggregate = {
        "repeatability": float(np.mean(pair_rep)) if pair_rep else None,
        "localization_error": float(np.mean(pair_loc)) if pair_loc else None,
        "homography_accuracy": float(np.mean(pair_hom)) if pair_hom else None,
        "pairs": len(pair_hom),
        "undefined_pairs": undefined,
    }
    payload = {"aggregate": aggregate, "per_sequence": per_sequence, "bits": args.bits}
    out = Path(args.out) if args.out else Path("hpatches_scores.json")
    _atomic_write(out, _report_json(manifest, payload))
    csv_lines = ["sequence,repeatability,localization_error,homography_accuracy"]
    for row in per_sequence:
        csv_lines.append(
            f"{row['sequence']},{row['repeatability']},"
            f"{row['localization_error']},{row['homography_accuracy']}"
        )
    csv_lines.append(
        f"__aggregate__,{aggregate['repeatability']},"
        f"{aggregate['localization_error']},{aggregate['homography_accuracy']}"
    )
    _atomic_write(out.with_suffix(".csv"), "\n".join(csv_lines) + "\n")
    print(
        "eval-hpatches: repeatability={repeatability} loc_err={localization_error} "
        "homography={homography_accuracy}".format(**aggregate)
    )
    return EXIT_OK


# -- run-vo --------------------------------------------------------------


def cmd_run_vo(args) -> int:
    manifest = Manifest(
        "run-vo",
        args.seed,
        {
            "dataset": args.dataset,
            "weights": args.weights,
            "bits": args.bits,
            "min_sim": args.min_sim,
            "conf": args.conf,
            "nms_radius": args.nms_radius,
            "border": args.border,
            "top_k": args.top_k,
            "max_dt": args.max_dt,
        },
    )
    manifest.add_input(args.dataset)
    seq = dataio.load_tum(args.dataset, max_dt=args.max_dt, calib_path=args.calib)
    if seq.intrinsics is None:
        raise IoError(
            f"{args.dataset}: no calibration.txt found and --calib not given"
        )
    if not seq.frames:
        raise IoError(f"{args.dataset}: no associated rgb/depth frames")
    weights = dataio.load_weights(args.weights)

    frames = []
    for i, fr in enumerate(seq.frames):
        gray = dataio.decode_image(fr.rgb_path)
        depth = dataio.decode_image(fr.depth_path)
        if gray.ndim != 3 or depth.ndim != 2:
            raise IoError(f"frame {i}: expected 8-bit grey rgb and 16-bit depth")
        frames.append(vo.FrameData(fr.timestamp, gray, depth, frame_id=i))
    manifest.stage("load")

    bits = _resolve_bits(args.bits)
    graph = _build_for_inference(
        weights, bits, [frames[0].gray], input_shape=frames[0].gray.shape
    )
    manifest.stage("build")

    seed_pose, seed_source = None, "identity"
    if seq.groundtruth is not None and len(seq.groundtruth):
        gt_t = seq.groundtruth.timestamps()
        k = int(np.argmin(np.abs(gt_t - frames[0].timestamp)))
        if abs(gt_t[k] - frames[0].timestamp) <= args.max_dt:
            seed_pose = seq.groundtruth.poses()[k]
            seed_source = "groundtruth"

    trajectory, reports = vo.run_sequence(
        frames,
        seq.intrinsics,
        graph,
        _detector_config(args),
        min_similarity=args.min_sim,
        seed_pose=seed_pose,
        depth_factor=seq.depth_factor,
        softmax_mode=_softmax_mode(args),
    )
    manifest.stage("track")

    out = Path(args.out) if args.out else Path("trajectory.txt")
    _atomic_write(out, trajectory.to_tum_text())
    payload = {
        "bits": args.bits,
        "frames": len(frames),
        "seed_pose": seed_source,
        "fallback_frames": [r.frame_id for r in reports if r.fallback],
        "per_frame": [
            {
                "frame": r.frame_id,
                "timestamp": r.timestamp,
                "matches": r.matches,
                "with_depth": r.used,
                "fallback": r.fallback,
            }
            for r in reports
        ],
        "trajectory_file": str(out),
    }
    _atomic_write(out.with_suffix(".report.json"), _report_json(manifest, payload))
    n_fb = sum(1 for r in reports if r.fallback)
    print(f"run-vo: {len(frames)} frames -> {out} ({n_fb} fallback)")
    return EXIT_OK


# -- eval-trajectory -----------------------------------------------------


def cmd_eval_trajectory(args) -> int:
    manifest = Manifest(
        "eval-trajectory",
        args.seed,
        {"est": args.est, "gt": args.gt, "delta": args.delta, "max_dt": args.max_dt},
    )
    for path in (args.est, args.gt):
        if not Path(path).exists():
            raise IoError(f"no such trajectory file: {path}")
        manifest.add_input(path)
    try:
        est = vo.Trajectory.from_tum_text(Path(args.est).read_text())
        gt = vo.Trajectory.from_tum_text(Path(args.gt).read_text())
    except InvalidArgument as exc:
        raise IoError(f"cannot parse trajectory: {exc}") from exc
    try:
        score = metrics.trajectory_score(est, gt, delta=args.delta, max_dt=args.max_dt)
        traces = metrics.angle_traces(est, gt, max_dt=args.max_dt)
    except UndefinedMetric as exc:
        print(f"eval-trajectory: {exc}", file=sys.stderr)
        return EXIT_IO
    manifest.stage("evaluate")

    out = Path(args.out) if args.out else Path("trajectory_score.json")
    _atomic_write(out, _report_json(manifest, {"score": score.to_dict()}))
    header = "timestamp,est_roll,est_pitch,est_yaw,gt_roll,gt_pitch,gt_yaw"
    rows = [header] + [
        ",".join(
            f"{t[k]:.9f}"
            for k in (
                "timestamp",
                "est_roll", "est_pitch", "est_yaw",
                "gt_roll", "gt_pitch", "gt_yaw",
            )
        )
        for t in traces
    ]
    _atomic_write(out.with_suffix(".angles.csv"), "\n".join(rows) + "\n")
    print(
        "eval-trajectory: "
        f"R_RPE={score.rpe_rot:.6g} deg  t_RPE={score.rpe_trans:.6g} m/s  "
        f"R_APE={score.ape_rot:.6g} deg  t_APE={score.ape_trans:.6g} m"
    )
    return EXIT_OK


# -- parser --------------------------------------------------------------


def _add_detector_flags(p, top_k_default=1000, top_k_help="max keypoints (0 = unlimited)"):
    p.add_argument("--conf", type=float, default=0.015, help="confidence threshold")
    p.add_argument("--nms-radius", type=int, default=4, help="NMS Chebyshev radius, px")
    p.add_argument("--border", type=int, default=4, help="border margin, px")
    p.add_argument("--top-k", type=int, default=top_k_default, help=top_k_help)
    p.add_argument(
        "--softmax",
        choices=[m.value for m in SoftmaxMode],
        default=SoftmaxMode.FLOAT_E.value,
        help="detector softmax arithmetic",
    )


def _add_common(p, with_weights=True):
    if with_weights:
        p.add_argument("--weights", required=True, help="weight archive directory")
        p.add_argument(
            "--bits",
            default="fp",
            help="fp, int8, int4, int3, mixed424, or a config file path",
        )
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--out", help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qsp", description=__doc__)
    parser.add_argument("--version", action="version", version=f"qsp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="detect keypoints + descriptors in one image")
    p.add_argument("image")
    _add_common(p)
    _add_detector_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("compile", help="streamline + lower + verify a quantised graph")
    _add_common(p)
    p.add_argument("--dump-passes", help="directory for per-pass graph dumps")
    p.add_argument("--trials", type=int, default=10, help="equivalence fuzz trials")
    p.add_argument(
        "--debug-corrupt-threshold",
        action="store_true",
        help=argparse.SUPPRESS,  # test hook: breaks one threshold on purpose
    )
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("eval-hpatches", help="detector metrics on an HPatches tree")
    p.add_argument("dataset")
    _add_common(p)
    _add_detector_flags(p, top_k_default=300, top_k_help="metric top-k keypoints")
    p.add_argument("--eps", type=float, default=3.0, help="correctness radius, px")
    p.add_argument("--e", type=float, default=3.0, help="homography corner tolerance, px")
    p.add_argument("--min-sim", type=float, default=0.0, help="match similarity floor")
    p.add_argument(
        "--resize",
        type=int,
        nargs=2,
        default=(480, 640),
        metavar=("H", "W"),
        help="working resolution (default 480 640)",
    )
    p.set_defaults(func=cmd_eval_hpatches)

    p = sub.add_parser("run-vo", help="frame-to-frame odometry over a TUM sequence")
    p.add_argument("dataset")
    _add_common(p)
    _add_detector_flags(p)
    p.add_argument("--min-sim", type=float, default=0.7, help="match similarity floor")
    p.add_argument("--calib", help="camera config path (default: <root>/calibration.txt)")
    p.add_argument("--max-dt", type=float, default=0.02, help="association tolerance, s")
    p.set_defaults(func=cmd_run_vo)

    p = sub.add_parser("eval-trajectory", help="APE/RPE of an estimate vs ground truth")
    p.add_argument("est")
    p.add_argument("gt")
    _add_common(p, with_weights=False)
    p.add_argument("--delta", type=float, default=1.0, help="RPE step, seconds")
    p.add_argument("--max-dt", type=float, default=0.02, help="association tolerance, s")
    p.set_defaults(func=cmd_eval_trajectory)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except IoError as exc:
        print(f"qsp: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvalidArgument as exc:
        print(f"qsp: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except QspError as exc:
        print(f"qsp: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
