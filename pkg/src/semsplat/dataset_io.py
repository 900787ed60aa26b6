"""Sequence bundle formats.

A bundle directory holds:

* ``manifest.json``      intrinsics, frame count, channel metadata, flags
* ``rgb/%06d.png``       8-bit color
* ``depth/%06d.pfm``     32-bit float depth (0 marks invalid)
* ``sem/%06d.png``       16-bit label ids (0 = background)
* ``sem_gt/%06d.png``    optional uncorrupted labels (evaluation reference)
* ``features/%06d.json`` per-mask records: label, embedding, run-length mask
* ``poses.txt``          optional camera-to-world lines
                         ``timestamp tx ty tz qx qy qz qw``

The pose line layout matches the TUM-RGBD ground-truth convention so real
trajectories drop in unchanged.  Run-length masks store alternating
zero-run / one-run lengths in row-major order, starting with a (possibly
zero-length) zero run; the trailing zero run is omitted.

A directory containing ``associations.txt`` instead of a manifest is loaded
as a geometric-only TUM-style sequence: 16-bit depth PNGs scaled by 1/5000,
no labels, no features.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import BundleFormatError, InvalidArgumentError
from .scene import CameraIntrinsics, Observation
from .se3 import Pose

TUM_DEPTH_SCALE = 5000.0


def one_hot_encode(labels: np.ndarray, semantic_dim: int) -> np.ndarray:
    """Expand a label image to S channels; ids must lie in [0, S)."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0:
        raise InvalidArgumentError("label ids must be non-negative")
    if labels.size and labels.max() >= semantic_dim:
        raise InvalidArgumentError(
            f"label id {int(labels.max())} out of range for {semantic_dim} channels")
    out = np.zeros(labels.shape + (semantic_dim,))
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def rle_encode(mask: np.ndarray) -> list:
    """Alternating zero-run / one-run lengths, row-major, zero run first."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], changes))
    lengths = np.diff(np.concatenate((starts, [flat.size])))
    runs = []
    if flat[0]:
        runs.append(0)
    runs.extend(int(n) for n in lengths)
    if not flat[-1]:
        runs.pop()
    return runs


def rle_decode(runs, shape) -> np.ndarray:
    total = int(np.prod(shape))
    flat = np.zeros(total, dtype=bool)
    pos = 0
    for i, run in enumerate(runs):
        run = int(run)
        if run < 0 or pos + run > total:
            raise InvalidArgumentError("run lengths exceed the mask size")
        if i % 2 == 1:
            flat[pos:pos + run] = True
        pos += run
    return flat.reshape(shape)


def write_pfm(path, data: np.ndarray):
    """Grayscale PFM, little-endian, rows stored bottom-up per convention."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise InvalidArgumentError("pfm writer expects a 2D array")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"Pf":
            raise BundleFormatError(f"{path}: not a grayscale PFM file")
        dims = fh.readline().split()
        try:
            width, height = int(dims[0]), int(dims[1])
            scale = float(fh.readline().strip())
        except (ValueError, IndexError):
            raise BundleFormatError(f"{path}: malformed PFM header")
        count = width * height
        raw = fh.read(count * 4)
        if len(raw) != count * 4:
            raise BundleFormatError(f"{path}: truncated PFM payload")
        endian = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(raw, dtype=endian).reshape(height, width)
    return np.flipud(data).astype(np.float64)


def write_png8(path, rgb: np.ndarray):
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    img = Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB")
    img.save(path)


def read_png8(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png16(path, labels: np.ndarray):
    arr = np.asarray(labels)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > np.iinfo(np.uint16).max:
        raise InvalidArgumentError("labels do not fit a 16-bit image")
    img = Image.fromarray(arr.astype(np.uint16))
    img.save(path)


def read_png16(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.int64)
    return arr


@dataclass
class FeatureRecord:
    """One segmented region: its label, descriptor, and run-length mask."""

    mask_id: int
    label: int
    embedding: np.ndarray
    rle: list

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64).reshape(-1)


@dataclass
class SequenceBundle:
    intrinsics: CameraIntrinsics
    frames: list                        # list[Observation]
    features: list                      # per frame: list[FeatureRecord]
    semantic_dim: int
    feature_dim: int
    label_names: list = field(default_factory=list)
    gt_poses: list | None = None        # list[Pose], world-to-camera
    gt_semantics: list | None = None    # clean label images when labels were corrupted
    has_semantics: bool = True
    gt_map = None                       # set by the synthetic generator, never serialized

    @property
    def frame_count(self) -> int:
        return len(self.frames)


def _pose_line(timestamp: float, pose: Pose) -> str:
    c2w = pose.inverse()
    t = c2w.translation
    q = c2w.quat
    vals = [timestamp, t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
    return " ".join(repr(float(v)) for v in vals)


def _parse_pose_line(line: str):
    parts = line.split()
    if len(parts) != 8:
        raise BundleFormatError(f"pose line must have 8 fields, got {len(parts)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise BundleFormatError(f"pose line has a non-numeric field: {line!r}")
    c2w = Pose(np.array(vals[4:8]), np.array(vals[1:4]))
    return vals[0], c2w.inverse()


def save_bundle(bundle: SequenceBundle, path):
    """Write the directory layout; deterministic bytes for identical bundles."""
    os.makedirs(path, exist_ok=True)
    for sub in ("rgb", "depth", "sem", "features"):
        os.makedirs(os.path.join(path, sub), exist_ok=True)
    if bundle.gt_semantics is not None:
        os.makedirs(os.path.join(path, "sem_gt"), exist_ok=True)
    intr = bundle.intrinsics
    manifest = {
        "format": "semsplat-bundle",
        "version": 1,
        "width": intr.width, "height": intr.height,
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
        "frame_count": bundle.frame_count,
        "semantic_dim": bundle.semantic_dim,
        "feature_dim": bundle.feature_dim,
        "label_names": list(bundle.label_names),
        "has_gt_poses": bundle.gt_poses is not None,
        "has_gt_semantics": bundle.gt_semantics is not None,
        "has_semantics": bundle.has_semantics,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for i, obs in enumerate(bundle.frames):
        write_png8(os.path.join(path, "rgb", f"{i:06d}.png"), obs.rgb)
        write_pfm(os.path.join(path, "depth", f"{i:06d}.pfm"), obs.depth)
        write_png16(os.path.join(path, "sem", f"{i:06d}.png"), obs.semantic)
        if bundle.gt_semantics is not None:
            write_png16(os.path.join(path, "sem_gt", f"{i:06d}.png"), bundle.gt_semantics[i])
        records = sorted(bundle.features[i], key=lambda r: r.mask_id)
        payload = [{"mask_id": r.mask_id, "label": int(r.label),
                    "embedding": [float(v) for v in r.embedding],
                    "rle": [int(v) for v in r.rle]} for r in records]
        with open(os.path.join(path, "features", f"{i:06d}.json"), "w") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")
    if bundle.gt_poses is not None:
        lines = [_pose_line(obs.timestamp, pose)
                 for obs, pose in zip(bundle.frames, bundle.gt_poses)]
        with open(os.path.join(path, "poses.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _require(path, what):
    if not os.path.exists(path):
        raise BundleFormatError(f"{path}: missing {what}")
    return path


def load_bundle(path) -> SequenceBundle:
    if os.path.exists(os.path.join(path, "associations.txt")):
        return _load_tum_sequence(path)
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise BundleFormatError(
            f"{manifest_path}: missing manifest (and no associations.txt fallback)")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"{manifest_path}: invalid JSON ({exc})")
    for key in ("width", "height", "fx", "fy", "cx", "cy", "frame_count",
                "semantic_dim", "feature_dim"):
        if key not in manifest:
            raise BundleFormatError(f"{manifest_path}: missing field {key!r}")
    intr = CameraIntrinsics(manifest["fx"], manifest["fy"], manifest["cx"],
                            manifest["cy"], manifest["width"], manifest["height"])
    n = int(manifest["frame_count"])
    poses = None
    timestamps = [i / 30.0 for i in range(n)]
    if manifest.get("has_gt_poses"):
        pose_path = _require(os.path.join(path, "poses.txt"), "pose file")
        poses = []
        with open(pose_path) as fh:
            rows = [ln for ln in (l.strip() for l in fh) if ln and not ln.startswith("#")]
        if len(rows) != n:
            raise BundleFormatError(
                f"{pose_path}: {len(rows)} pose lines for {n} frames")
        for i, row in enumerate(rows):
            ts, pose = _parse_pose_line(row)
            timestamps[i] = ts
            poses.append(pose)
    frames = []
    features = []
    gt_semantics = [] if manifest.get("has_gt_semantics") else None
    for i in range(n):
        rgb = read_png8(_require(os.path.join(path, "rgb", f"{i:06d}.png"), "rgb frame"))
        depth = read_pfm(_require(os.path.join(path, "depth", f"{i:06d}.pfm"), "depth frame"))
        sem = read_png16(_require(os.path.join(path, "sem", f"{i:06d}.png"), "label frame"))
        if rgb.shape[:2] != (intr.height, intr.width):
            raise BundleFormatError(
                f"rgb/{i:06d}.png: size {rgb.shape[:2]} does not match manifest")
        frames.append(Observation(rgb, depth, sem, frame_index=i, timestamp=timestamps[i]))
        feat_path = _require(os.path.join(path, "features", f"{i:06d}.json"), "feature file")
        with open(feat_path) as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise BundleFormatError(f"{feat_path}: invalid JSON ({exc})")
        records = []
        for entry in payload:
            emb = np.asarray(entry["embedding"], dtype=np.float64)
            if emb.shape[0] != manifest["feature_dim"]:
                raise BundleFormatError(
                    f"{feat_path}: embedding length {emb.shape[0]} != feature_dim")
            records.append(FeatureRecord(int(entry["mask_id"]), int(entry["label"]),
                                         emb, list(entry["rle"])))
        features.append(records)
        if gt_semantics is not None:
            gt_semantics.append(read_png16(
                _require(os.path.join(path, "sem_gt", f"{i:06d}.png"), "gt label frame")))
    return SequenceBundle(
        intrinsics=intr, frames=frames, features=features,
        semantic_dim=int(manifest["semantic_dim"]),
        feature_dim=int(manifest["feature_dim"]),
        label_names=list(manifest.get("label_names", [])),
        gt_poses=poses, gt_semantics=gt_semantics,
        has_semantics=bool(manifest.get("has_semantics", True)))


def save_trajectory(path, poses, timestamps=None):
    """Write camera-to-world pose lines (``timestamp tx ty tz qx qy qz qw``)."""
    if timestamps is None:
        timestamps = [i / 30.0 for i in range(len(poses))]
    lines = [_pose_line(ts, pose) for ts, pose in zip(timestamps, poses)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_trajectory(path):
    """Read pose lines back; returns (poses, timestamps), world-to-camera."""
    poses, timestamps = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            ts, pose = _parse_pose_line(line)
            timestamps.append(ts)
            poses.append(pose)
    return poses, timestamps


def save_map(gmap, path):
    """Serialize a splat map to a single .npz archive."""
    np.savez(path,
             semantic_dim=np.int64(gmap.semantic_dim),
             positions=gmap.positions, radii=gmap.radii,
             opacities=gmap.opacities, colors=gmap.colors,
             semantics=gmap.semantics, creation_frame=gmap.creation_frame)


def load_map(path):
    from .scene import GaussianMap
    try:
        with np.load(path) as data:
            gmap = GaussianMap(int(data["semantic_dim"]))
            gmap.positions = np.asarray(data["positions"], dtype=np.float64)
            gmap.radii = np.asarray(data["radii"], dtype=np.float64)
            gmap.opacities = np.asarray(data["opacities"], dtype=np.float64)
            gmap.colors = np.asarray(data["colors"], dtype=np.float64)
            gmap.semantics = np.asarray(data["semantics"], dtype=np.float64)
            gmap.creation_frame = np.asarray(data["creation_frame"], dtype=np.int64)
    except (KeyError, ValueError, OSError) as exc:
        raise BundleFormatError(f"{path}: unreadable map archive ({exc})")
    n = len(gmap)
    shapes_ok = (gmap.positions.ndim == 2 and gmap.positions.shape[1] == 3
                 and gmap.colors.shape == (n, 3)
                 and gmap.semantics.shape == (n, gmap.semantic_dim)
                 and gmap.radii.shape == (n,) and gmap.opacities.shape == (n,)
                 and gmap.creation_frame.shape == (n,))
    if not shapes_ok:
        raise BundleFormatError(f"{path}: inconsistent array shapes in map archive")
    gmap.mark_mutated()
    return gmap


def _load_tum_sequence(path) -> SequenceBundle:
    """Geometric-only loader for TUM-style rgb/depth association lists."""
    assoc_path = os.path.join(path, "associations.txt")
    entries = []
    with open(assoc_path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise BundleFormatError(
                    f"{assoc_path}: association lines need 4 fields, got {len(parts)}")
            entries.append((float(parts[0]), parts[1], float(parts[2]), parts[3]))
    if not entries:
        raise BundleFormatError(f"{assoc_path}: no associations found")
    frames = []
    intr = None
    calib_path = os.path.join(path, "calibration.txt")
    for i, (ts, rgb_rel, _, depth_rel) in enumerate(entries):
        rgb = read_png8(_require(os.path.join(path, rgb_rel), "rgb frame"))
        with Image.open(_require(os.path.join(path, depth_rel), "depth frame")) as img:
            depth_raw = np.asarray(img, dtype=np.float64)
        depth = depth_raw / TUM_DEPTH_SCALE
        if intr is None:
            h, w = rgb.shape[:2]
            if os.path.exists(calib_path):
                with open(calib_path) as fh:
                    fx, fy, cx, cy = [float(v) for v in fh.read().split()[:4]]
            else:
                # TUM-RGBD default camera
                fx = fy = 525.0 * w / 640.0
                cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
            intr = CameraIntrinsics(fx, fy, cx, cy, w, h)
        labels = np.zeros(rgb.shape[:2], dtype=np.int64)
        frames.append(Observation(rgb, depth, labels, frame_index=i, timestamp=ts))
    return SequenceBundle(
        intrinsics=intr, frames=frames, features=[[] for _ in frames],
        semantic_dim=1, feature_dim=0, label_names=["background"],
        gt_poses=None, gt_semantics=None, has_semantics=False)
