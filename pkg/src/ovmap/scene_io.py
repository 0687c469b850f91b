"""On-disk scene format and loaders.

A scene directory looks like::

    scene/
      manifest.json        frames in temporal order, intrinsics, poses
      depth/<frame_id>.png 16-bit depth in millimetres, 0 = invalid
      masks/<frame_id>.json  {"frame_id": t, "masks": [{"mask_id": i, "rle": [start, len, ...]}]}
      features.bin         16-byte header then D float32 per mask, mask_id order
      gt.json              optional ground truth instances
      labels.json          optional label table (text + embedding)

All ids are unsigned integers, all binary data little-endian.
"""

from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .config import PipelineConfig
from .geometry import VoxelSet, backproject_mask, rle_decode

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FEATURE_MAGIC = b"OVMFEAT\x00"
_HEADER = struct.Struct("<8sII")  # magic, count, dimension -> 16 bytes
DEPTH_SCALE = 1000.0  # millimetres per metre

NORM_TOL = 1e-5
NORM_REJECT = 1e-2


class SceneError(Exception):
    pass


class SceneLoadError(SceneError):
    """A referenced file is missing or unreadable."""


class SchemaError(SceneError):
    """File content violates the scene schema."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise SchemaError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise SchemaError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SchemaError("principal point outside the image")


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise SchemaError("pose rotation is not a proper rotation matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))


@dataclass(eq=False)
class Frame:
    frame_id: int
    intrinsics: CameraIntrinsics
    pose: Pose
    depth: np.ndarray  # metres, float32, 0 or NaN = invalid
    mask_ids: list[int] = field(default_factory=list)


@dataclass(eq=False)
class Mask2D:
    mask_id: int
    frame_id: int
    pixels: np.ndarray  # flat (start, length) pairs
    feature: np.ndarray
    cloud: VoxelSet | None = None

    def pixel_indices(self) -> np.ndarray:
        return rle_decode(self.pixels)


@dataclass(eq=False)
class GroundTruthInstance:
    instance_id: int
    points: np.ndarray
    center: np.ndarray
    label_id: int | None = None


@dataclass(eq=False)
class SceneDataset:
    path: Path | None
    frames: list[Frame]
    masks: dict[int, Mask2D]
    feature_dim: int
    dropped_mask_ids: list[int] = field(default_factory=list)
    manifest: dict[str, Any] = field(default_factory=dict)

    def frame(self, frame_id: int) -> Frame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)

    def masks_in_frame(self, frame_id: int) -> list[Mask2D]:
        return [self.masks[i] for i in self.frame(frame_id).mask_ids]

    @property
    def mask_count(self) -> int:
        return len(self.masks)


# -- feature blobs -------------------------------------------------------------


def write_feature_blob(path: str | Path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(features, dtype="<f4"))
    if arr.ndim != 2:
        raise SchemaError("feature blob expects a 2-D array")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_feature_blob(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise SceneLoadError(f"missing file: {path}") from exc
    if len(raw) < _HEADER.size:
        raise SchemaError(f"{path}: truncated header")
    magic, count, dim = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise SchemaError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * count * dim
    if len(raw) != expected:
        raise SchemaError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, dim).copy()


# -- depth -----------------------------------------------------------------------


def write_depth_png(path: str | Path, depth_m: np.ndarray) -> None:
    d = np.nan_to_num(np.asarray(depth_m, dtype=np.float64), nan=0.0)
    mm = np.clip(np.round(d * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path, format="PNG")


def read_depth_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            mm = np.array(im)
    except FileNotFoundError as exc:
        raise SceneLoadError(f"missing file: {path}") from exc
    if mm.ndim != 2:
        raise SchemaError(f"{path}: depth map must be single-channel")
    return (mm.astype(np.float64) / DEPTH_SCALE).astype(np.float32)


# -- loading ---------------------------------------------------------------------


def _read_json(path: Path) -> Any:
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise SceneLoadError(f"missing file: {path}") from exc
    try:
        return json.loads(text) if text.strip() else None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc


def _parse_frame_entry(entry: dict[str, Any]) -> tuple[int, CameraIntrinsics, Pose]:
    try:
        k = entry["intrinsics"]
        intr = CameraIntrinsics(
            fx=float(k["fx"]), fy=float(k["fy"]), cx=float(k["cx"]), cy=float(k["cy"]),
            width=int(k["width"]), height=int(k["height"]),
        )
        p = entry["pose"]
        pose = Pose(np.asarray(p["rotation"], dtype=np.float64), np.asarray(p["translation"], dtype=np.float64))
        return int(entry["frame_id"]), intr, pose
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"malformed frame entry: {exc}") from exc


def _normalize_features(feats: np.ndarray) -> np.ndarray:
    f = feats.astype(np.float64)
    norms = np.linalg.norm(f, axis=1)
    dev = np.abs(norms - 1.0)
    bad = np.flatnonzero(dev > NORM_REJECT)
    if bad.size:
        raise SchemaError(
            f"feature row {int(bad[0])} has norm {norms[bad[0]]:.6f}; deviation exceeds {NORM_REJECT}"
        )
    drift = dev > NORM_TOL
    if drift.any():
        logger.warning("renormalizing %d feature vectors with small norm drift", int(drift.sum()))
        f[drift] /= norms[drift, None]
    return f


def load_scene(path: str | Path, config: PipelineConfig | None = None, threads: int | None = None) -> SceneDataset:
    """Load, validate and back-project a scene directory."""
    cfg = config or PipelineConfig()
    root = Path(path)
    manifest = _read_json(root / MANIFEST)
    if not isinstance(manifest, dict) or "frames" not in manifest:
        raise SchemaError(f"{root / MANIFEST}: manifest must be an object with a 'frames' list")

    entries = manifest["frames"]
    parsed = [_parse_frame_entry(e) for e in entries]
    frame_ids = [p[0] for p in parsed]
    if len(set(frame_ids)) != len(frame_ids):
        raise SchemaError("duplicate frame ids in manifest")

    def read_frame(i: int) -> tuple[Frame, list[tuple[int, np.ndarray]]]:
        entry = entries[i]
        fid, intr, pose = parsed[i]
        depth = read_depth_png(root / entry.get("depth", f"depth/{fid}.png"))
        if depth.shape != (intr.height, intr.width):
            raise SchemaError(f"frame {fid}: depth shape {depth.shape} does not match intrinsics")
        mfile = root / entry.get("masks", f"masks/{fid}.json")
        mdata = _read_json(mfile) or {"masks": []}
        raw_masks = []
        npix = intr.width * intr.height
        for rec in mdata.get("masks", []):
            try:
                mid = int(rec["mask_id"])
                rle = np.asarray(rec["rle"], dtype=np.int64)
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{mfile}: malformed mask record ({exc})") from exc
            if rle.size % 2:
                raise SchemaError(f"{mfile}: mask {mid} has an odd-length RLE")
            runs = rle.reshape(-1, 2)
            if runs.size and ((runs[:, 0] < 0).any() or (runs[:, 1] <= 0).any()
                              or (runs[:, 0] + runs[:, 1] > npix).any()):
                raise SchemaError(f"{mfile}: mask {mid} has runs outside the image")
            raw_masks.append((mid, rle))
        ids = [m[0] for m in raw_masks]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"frame {fid}: duplicate mask ids")
        return Frame(fid, intr, pose, depth, ids), raw_masks

    workers = threads or None
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(read_frame, range(len(entries))))

    frames = [r[0] for r in results]
    all_masks = [(fr.frame_id, mid, rle) for fr, raws in results for mid, rle in raws]
    mask_ids = [m[1] for m in all_masks]
    if len(set(mask_ids)) != len(mask_ids):
        raise SchemaError("mask ids are not globally unique")

    feats = read_feature_blob(root / manifest.get("features", "features.bin"))
    dim = int(manifest.get("feature_dim", feats.shape[1] if feats.size else 0))
    if feats.shape[1] != dim:
        raise SchemaError(f"feature dimension {feats.shape[1]} does not match manifest ({dim})")
    if feats.shape[0] != len(all_masks):
        raise SchemaError(f"feature blob holds {feats.shape[0]} rows for {len(all_masks)} masks")
    feats = _normalize_features(feats) if len(feats) else feats.astype(np.float64)

    order = {mid: row for row, mid in enumerate(sorted(mask_ids))}
    frame_by_id = {f.frame_id: f for f in frames}
    masks = {
        mid: Mask2D(mid, fid, rle, feats[order[mid]])
        for fid, mid, rle in all_masks
    }

    def lift(mid: int) -> tuple[int, VoxelSet | None]:
        m = masks[mid]
        fr = frame_by_id[m.frame_id]
        idx = rle_decode(m.pixels)
        d = fr.depth.ravel()[idx]
        if np.count_nonzero(np.isfinite(d) & (d > 0)) < cfg.min_mask_pixels:
            return mid, None
        cloud = backproject_mask(fr, m, cfg.voxel_size)
        return mid, cloud if len(cloud) else None

    with ThreadPoolExecutor(max_workers=workers) as pool:
        lifted = list(pool.map(lift, sorted(masks)))

    dropped = []
    for mid, cloud in lifted:
        if cloud is None:
            dropped.append(mid)
            del masks[mid]
        else:
            masks[mid].cloud = cloud
    if dropped:
        logger.info("dropped %d masks below %d valid pixels", len(dropped), cfg.min_mask_pixels)
        gone = set(dropped)
        for fr in frames:
            fr.mask_ids = [i for i in fr.mask_ids if i not in gone]

    return SceneDataset(root, frames, masks, dim, dropped, manifest)


def save_scene(scene: SceneDataset, path: str | Path) -> None:
    """Write a scene in the on-disk format (depth, masks, features, manifest)."""
    root = Path(path)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for fr in scene.frames:
        k = fr.intrinsics
        entries.append({
            "frame_id": fr.frame_id,
            "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                           "width": k.width, "height": k.height},
            "pose": {"rotation": fr.pose.rotation.tolist(), "translation": fr.pose.translation.tolist()},
            "depth": f"depth/{fr.frame_id}.png",
            "masks": f"masks/{fr.frame_id}.json",
        })
        write_depth_png(root / "depth" / f"{fr.frame_id}.png", fr.depth)
        recs = [{"mask_id": int(m), "rle": [int(x) for x in scene.masks[m].pixels]} for m in fr.mask_ids]
        (root / "masks" / f"{fr.frame_id}.json").write_text(
            json.dumps({"frame_id": fr.frame_id, "masks": recs}, separators=(",", ":")) + "\n"
        )
    ids = sorted(scene.masks)
    feats = np.stack([scene.masks[i].feature for i in ids]) if ids else np.zeros((0, scene.feature_dim))
    write_feature_blob(root / "features.bin", feats)
    manifest = {k: v for k, v in scene.manifest.items() if k not in ("frames", "features", "feature_dim")}
    manifest.update({"format": "ovmap-scene", "version": 1, "feature_dim": scene.feature_dim,
                     "features": "features.bin", "frames": entries})
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- ground truth ----------------------------------------------------------------


def load_ground_truth(path: str | Path) -> list[GroundTruthInstance]:
    path = Path(path)
    data = _read_json(path)
    if data is None:
        return []
    records = data.get("instances", []) if isinstance(data, dict) else data
    if not isinstance(records, list):
        raise SchemaError(f"{path}: expected a list of instances")
    out: list[GroundTruthInstance] = []
    seen: set[int] = set()
    for i, rec in enumerate(records):
        try:
            iid = int(rec["instance_id"])
            pts = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 3)
            label = rec.get("label_id")
            label = None if label is None else int(label)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: malformed record {i} ({exc})") from exc
        if iid in seen:
            raise SchemaError(f"{path}: record {i} duplicates instance_id {iid}")
        if len(pts) == 0:
            raise SchemaError(f"{path}: record {i} has no points")
        seen.add(iid)
        center = pts.mean(axis=0)
        if "center" in rec:
            given = np.asarray(rec["center"], dtype=np.float64).reshape(3)
            if np.abs(given - center).max() > 1e-6:
                raise SchemaError(f"{path}: record {i} center disagrees with its point centroid")
        out.append(GroundTruthInstance(iid, pts, center, label))
    return out


def save_ground_truth(path: str | Path, instances: list[GroundTruthInstance]) -> None:
    recs = []
    for g in instances:
        rec: dict[str, Any] = {"instance_id": int(g.instance_id)}
        if g.label_id is not None:
            rec["label_id"] = int(g.label_id)
        rec["center"] = [float(x) for x in g.center]
        rec["points"] = np.asarray(g.points, dtype=np.float64).tolist()
        recs.append(rec)
    Path(path).write_text(json.dumps({"instances": recs}, separators=(",", ":")) + "\n")
