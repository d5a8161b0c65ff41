"""Dataset ingestion (TUM RGB-D, HPatches), image decoding, weight archive.

The weight archive is `manifest.json` + `weights.bin` side by side: the
manifest lists (name, shape, dtype, byte offset, byte length) per tensor,
the blob is little-endian packed f32/i32 data.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ArchiveError, InvalidArgument, IoError, ParseError
from .metrics import normalize_homography
from .nncore import ConvSpec
from .se3 import PoseSE3, quat_to_rot
from .superpoint import ARCHITECTURE, SuperPointWeights
from .vo import CameraIntrinsics, Trajectory

log = logging.getLogger(__name__)

TUM_DEPTH_FACTOR = 5000.0
_MANIFEST_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}
_LUMA = (0.299, 0.587, 0.114)  # ITU-R 601


# -- images --------------------------------------------------------------


def decode_image(path):
    """Decode to a tensor: 8-bit images become (1, H, W) grey in [0, 1]
    (RGB via ITU-R 601 luma), 16-bit single-channel becomes a raw integer
    (H, W) depth array with no scaling applied."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such image: {path}")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise IoError(f"cannot decode {path}: {exc}") from exc
    if img.format not in ("PNG", "PPM", "PGM"):
        raise IoError(f"{path}: unsupported format {img.format} (PNG/PGM/PPM only)")
    if img.mode in ("I", "I;16", "I;16B"):
        return np.asarray(img.convert("I"), dtype=np.int64)
    if img.mode == "L":
        return (np.asarray(img, dtype=np.float64) / 255.0)[None]
    if img.mode == "RGB":
        rgb = np.asarray(img, dtype=np.float64)
        grey = rgb[..., 0] * _LUMA[0] + rgb[..., 1] * _LUMA[1] + rgb[..., 2] * _LUMA[2]
        return (grey / 255.0)[None]
    raise IoError(f"{path}: unsupported image mode {img.mode}")


# -- TUM sequences -------------------------------------------------------


@dataclass(frozen=True)
class TumFrame:
    timestamp: float
    rgb_path: Path
    depth_path: Path


@dataclass
class TumSequence:
    root: Path
    frames: list  # of TumFrame, sorted by timestamp
    groundtruth: Trajectory | None
    intrinsics: CameraIntrinsics | None
    depth_factor: float = TUM_DEPTH_FACTOR
    dropped: int = 0


def _read_stamped_lines(path: Path, expect_fields: int):
    if not path.exists():
        raise IoError(f"missing dataset file: {path}")
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != expect_fields:
            raise ParseError(
                f"{path}:{lineno}: expected {expect_fields} fields, got {len(parts)}"
            )
        try:
            stamp = float(parts[0])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from exc
        rows.append((stamp, parts[1:], lineno))
    return rows


def _associate_stamps(a_stamps, b_stamps, max_dt):
    """Greedy nearest-timestamp pairing of two stamp lists."""
    candidates = []
    for i, ta in enumerate(a_stamps):
        for j, tb in enumerate(b_stamps):
            d = abs(ta - tb)
            if d <= max_dt:
                candidates.append((d, i, j))
    candidates.sort()
    used_a, used_b = set(), set()
    pairs = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def load_sequence_config(path) -> tuple:
    """Parse a `key = value` camera config; returns (intrinsics, depth_factor)."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"missing camera config: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = float(val)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: cannot parse {raw!r}") from exc
    try:
        intr = CameraIntrinsics(
            values["fx"],
            values["fy"],
            values["cx"],
            values["cy"],
            tuple(values.get(k, 0.0) for k in ("k1", "k2", "p1", "p2", "k3")),
        )
    except KeyError as exc:
        raise ParseError(f"{path}: missing intrinsic {exc}") from exc
    return intr, values.get("depth_factor", TUM_DEPTH_FACTOR)


def load_tum(root, max_dt: float = 0.02, calib_path=None) -> TumSequence:
    """Parse rgb.txt/depth.txt/groundtruth.txt and associate rgb with depth.

    Frames whose nearest depth stamp is farther than max_dt are dropped and
    counted.  Camera intrinsics come from `calibration.txt` in the sequence
    root (or `calib_path`) when present.
    """
    root = Path(root)
    rgb = _read_stamped_lines(root / "rgb.txt", 2)
    depth = _read_stamped_lines(root / "depth.txt", 2)
    gt_rows = _read_stamped_lines(root / "groundtruth.txt", 8)

    pairs = _associate_stamps([r[0] for r in rgb], [d[0] for d in depth], max_dt)
    frames = [
        TumFrame(rgb[i][0], root / rgb[i][1][0], root / depth[j][1][0])
        for i, j in pairs
    ]
    frames.sort(key=lambda f: f.timestamp)
    dropped = len(rgb) - len(frames)

    entries = []
    for stamp, fields, lineno in gt_rows:
        try:
            tx, ty, tz, qx, qy, qz, qw = map(float, fields)
            pose = PoseSE3(quat_to_rot([qx, qy, qz, qw]), [tx, ty, tz])
        except (ValueError, InvalidArgument) as exc:
            raise ParseError(f"groundtruth.txt:{lineno}: {exc}") from exc
        entries.append((stamp, pose, len(entries)))
    groundtruth = Trajectory(entries) if entries else None

    calib = Path(calib_path) if calib_path else root / "calibration.txt"
    intrinsics, depth_factor = (None, TUM_DEPTH_FACTOR)
    if calib.exists():
        intrinsics, depth_factor = load_sequence_config(calib)

    return TumSequence(root, frames, groundtruth, intrinsics, depth_factor, dropped)


# -- HPatches ------------------------------------------------------------


@dataclass(frozen=True)
class HpatchesSequence:
    name: str
    image_paths: tuple  # 6 paths, reference first
    homographies: tuple  # 5 matrices, H_1_2 .. H_1_6, h33 = 1


def _parse_homography_file(path: Path) -> np.ndarray:
    values = path.read_text().split()
    if len(values) != 9:
        raise ParseError(f"{path}: expected 9 numbers, got {len(values)}")
    try:
        h = np.array([float(v) for v in values]).reshape(3, 3)
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric entry") from exc
    try:
        return normalize_homography(h)
    except InvalidArgument as exc:
        raise ParseError(f"{path}: {exc}") from exc


def load_hpatches(root) -> list:
    """Load every sequence directory (images 1..6 plus H_1_2..H_1_6)."""
    root = Path(root)
    if not root.is_dir():
        raise IoError(f"no such dataset directory: {root}")
    sequences = []
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        homs = []
        for k in range(2, 7):
            hpath = seq_dir / f"H_1_{k}"
            if not hpath.exists():
                raise IoError(f"missing homography file: {hpath}")
            homs.append(_parse_homography_file(hpath))
        images = []
        for idx in range(1, 7):
            for ext in (".ppm", ".png", ".pgm"):
                candidate = seq_dir / f"{idx}{ext}"
                if candidate.exists():
                    images.append(candidate)
                    break
            else:
                raise IoError(f"missing image {idx} in {seq_dir}")
        sequences.append(HpatchesSequence(seq_dir.name, tuple(images), tuple(homs)))
    if not sequences:
        raise IoError(f"{root} contains no HPatches sequences")
    return sequences


# -- weight archive ------------------------------------------------------


def write_archive(out_dir, tensors: dict, metadata: dict | None = None):
    """Write `manifest.json` + `weights.bin`; tensors keep insertion order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    blob = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = "i32" if np.issubdtype(arr.dtype, np.integer) else "f32"
        data = np.ascontiguousarray(arr.astype(_DTYPES[dtype])).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "byte_offset": len(blob),
                "byte_length": len(data),
            }
        )
        blob.extend(data)
    manifest = {
        "version": _MANIFEST_VERSION,
        "metadata": metadata or {},
        "tensors": entries,
    }
    (out_dir / "weights.bin").write_bytes(bytes(blob))
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out_dir


def read_archive(archive_dir) -> tuple:
    """Load and validate an archive; returns (metadata, {name: ndarray})."""
    archive_dir = Path(archive_dir)
    manifest_path = archive_dir / "manifest.json"
    blob_path = archive_dir / "weights.bin"
    if not manifest_path.exists() or not blob_path.exists():
        raise ArchiveError(f"{archive_dir} lacks manifest.json / weights.bin")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{manifest_path}: invalid JSON: {exc}") from exc
    if manifest.get("version") != _MANIFEST_VERSION:
        raise ArchiveError(f"unsupported archive version {manifest.get('version')}")
    blob = blob_path.read_bytes()
    tensors = {}
    spans = []
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ArchiveError(f"tensor {name}: unknown dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        off, length = entry["byte_offset"], entry["byte_length"]
        if length != expected:
            raise ArchiveError(
                f"tensor {name}: byte length {length} != shape {shape} ({expected})"
            )
        if off < 0 or off + length > len(blob):
            raise ArchiveError(f"tensor {name}: range outside the blob")
        spans.append((off, off + length, name))
        tensors[name] = np.frombuffer(
            blob, dtype=dtype, count=length // dtype.itemsize, offset=off
        ).reshape(shape)
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ArchiveError(f"tensors {n0} and {n1} overlap in the blob")
    return manifest.get("metadata", {}), tensors


def load_weights(archive_dir) -> SuperPointWeights:
    """Materialise the network weights, shape-checked against the architecture."""
    _, tensors = read_archive(archive_dir)
    layers = {}
    required = set()
    for name, (cin, cout, k) in ARCHITECTURE.items():
        wname, bname = f"{name}.weight", f"{name}.bias"
        required.update((wname, bname))
        if wname not in tensors or bname not in tensors:
            raise ArchiveError(f"archive lacks {wname} / {bname}")
        w = tensors[wname]
        b = tensors[bname]
        if w.shape != (cout, cin, k, k):
            raise ArchiveError(
                f"{wname}: shape {w.shape} != expected {(cout, cin, k, k)}"
            )
        if b.shape != (cout,):
            raise ArchiveError(f"{bname}: shape {b.shape} != expected ({cout},)")
        layers[name] = ConvSpec(cin, cout, k, w.astype(np.float64), b.astype(np.float64))
    extras = sorted(set(tensors) - required)
    if extras:
        log.warning("archive carries unknown extra tensors: %s", extras)
    return SuperPointWeights(layers)


def store_weights(out_dir, weights: SuperPointWeights, metadata: dict | None = None):
    """Write a SuperPointWeights bundle as an archive (architecture order)."""
    tensors = {}
    for name in ARCHITECTURE:
        spec = weights[name]
        tensors[f"{name}.weight"] = spec.weights.astype(np.float32)
        tensors[f"{name}.bias"] = spec.bias.astype(np.float32)
    return write_archive(out_dir, tensors, metadata)
