"""Synthetic scene generator.

Scenes are sets of axis-aligned boxes and spheres (z up) rendered by ray
casting from a posed pinhole camera.  Each visible object yields one mask per
frame whose feature is drawn around that object's cluster centre on the unit
sphere.  Touching objects can be emitted as a single under-segmented mask,
which is what makes structure alone unreliable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .geometry import VoxelSet, rle_encode
from .providers import HashedTokenEmbedder
from .scene_io import (
    CameraIntrinsics, Frame, GroundTruthInstance, Mask2D, Pose, SceneDataset,
    save_ground_truth, save_scene,
)


class SceneSpecError(ValueError):
    pass


@dataclass
class ObjectSpec:
    shape: str  # "box" | "sphere"
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # full extents; spheres use size[0] as diameter
    caption: str | None = None
    noise: float | None = None  # per-object angular noise override (radians)
    category: str | None = None  # label-table entry; defaults to the caption

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=np.float64)
        half = np.asarray(self.size, dtype=np.float64) / 2
        if self.shape == "sphere":
            half = np.full(3, self.size[0] / 2)
        return c - half, c + half


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    width: int = 640
    height: int = 480
    fx: float = 577.0
    fy: float = 577.0
    feature_dim: int = 64
    feature_noise: float = 0.1
    min_cluster_angle: float = 0.5
    depth_noise: float = 0.0
    occluder_probability: float = 0.0
    underseg_probability: float = 0.0
    underseg_frames: int | None = None  # exact number of frames with combined masks (overrides the probability)
    touch_distance: float = 0.06
    voxel_size: float = 0.05
    text_embed_seed: int = 0
    objects: list[ObjectSpec] = field(default_factory=list)
    random_objects: dict[str, Any] | None = None
    camera: dict[str, Any] = field(default_factory=lambda: {
        "type": "orbit", "target": [0.0, 0.0, 0.4], "radius": 3.0, "height": 1.8,
        "frames": 6, "arc_degrees": 90.0, "start_degrees": 0.0,
    })
    queries: list[dict[str, Any]] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SyntheticSceneSpec:
        data = dict(data)
        objs = [ObjectSpec(o["shape"], tuple(o["center"]), tuple(o.get("size", [o.get("diameter", 0.5)] * 3)),
                           o.get("caption"), o.get("noise"), o.get("category")) for o in data.pop("objects", [])]
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise SceneSpecError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(objects=objs, **data)

    @classmethod
    def load(cls, path: str | Path) -> SyntheticSceneSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict[str, Any]:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "objects"}
        out["objects"] = [
            {"shape": o.shape, "center": list(o.center), "size": list(o.size),
             **({"caption": o.caption} if o.caption else {}),
             **({"noise": o.noise} if o.noise is not None else {}),
             **({"category": o.category} if o.category else {})}
            for o in self.objects
        ]
        return out


# -- camera -------------------------------------------------------------------------


def look_at(position: Sequence[float], target: Sequence[float]) -> Pose:
    """Camera-to-world pose; camera x right, y down, z forward; world z up."""
    p = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - p
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), p)


def camera_poses(cam: dict[str, Any]) -> list[Pose]:
    kind = cam.get("type", "orbit")
    if kind == "orbit":
        target = np.asarray(cam.get("target", [0, 0, 0.4]), dtype=np.float64)
        n = int(cam.get("frames", 6))
        arc = math.radians(float(cam.get("arc_degrees", 90.0)))
        start = math.radians(float(cam.get("start_degrees", 0.0)))
        radius, height = float(cam.get("radius", 3.0)), float(cam.get("height", 1.8))
        poses = []
        for i in range(n):
            theta = start + (arc * (i / (n - 1) - 0.5) if n > 1 else 0.0)
            pos = target + np.array([radius * math.cos(theta), radius * math.sin(theta), 0.0])
            pos[2] = height
            poses.append(look_at(pos, target))
        return poses
    if kind == "waypoints":
        return [look_at(w["position"], w["look_at"]) for w in cam["poses"]]
    raise SceneSpecError(f"unknown camera trajectory type {kind!r}")


# -- ray casting -------------------------------------------------------------------


def _ray_dirs(intr: CameraIntrinsics, pose: Pose) -> np.ndarray:
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u, dtype=np.float64)], axis=-1)
    # unnormalised so the ray parameter equals camera-frame depth
    return cam.reshape(-1, 3) @ pose.rotation.T


def _inverse(dirs: np.ndarray) -> np.ndarray:
    safe = np.where(dirs == 0.0, 1e-300, dirs)
    return 1.0 / safe


def _hit_box(origin: np.ndarray, inv: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab test; ``inv`` holds reciprocal ray directions (see ``_inverse``)."""
    t1 = (lo - origin) * inv
    t2 = (hi - origin) * inv
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    tmin = np.maximum(np.maximum(near[:, 0], near[:, 1]), near[:, 2])
    tmax = np.minimum(np.minimum(far[:, 0], far[:, 1]), far[:, 2])
    hit = (tmax >= tmin) & (tmax > 0)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where(hit, t, np.inf)


def _hit_sphere(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    oc = origin - center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.maximum(disc, 0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 0, t0, t1)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def _pixel_window(lo: np.ndarray, hi: np.ndarray, intr: CameraIntrinsics, pose: Pose) -> np.ndarray | None:
    """Flat indices of the pixels whose rays can hit the box [lo, hi]; None means all."""
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    cam = (corners - pose.translation) @ pose.rotation
    if np.any(cam[:, 2] <= 1e-6):
        return None
    u = intr.fx * cam[:, 0] / cam[:, 2] + intr.cx
    v = intr.fy * cam[:, 1] / cam[:, 2] + intr.cy
    u0, u1 = max(0, int(np.floor(u.min())) - 1), min(intr.width - 1, int(np.ceil(u.max())) + 1)
    v0, v1 = max(0, int(np.floor(v.min())) - 1), min(intr.height - 1, int(np.ceil(v.max())) + 1)
    if u0 > u1 or v0 > v1:
        return np.zeros(0, dtype=np.int64)
    rows, cols = np.mgrid[v0:v1 + 1, u0:u1 + 1]
    return (rows * intr.width + cols).ravel()


def render(objects: Sequence[ObjectSpec], intr: CameraIntrinsics, pose: Pose,
           extra_boxes: Sequence[tuple[np.ndarray, np.ndarray]] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Depth (metres, 0 = miss) and object-id image (-1 miss, -2 occluder)."""
    dirs = _ray_dirs(intr, pose)
    inv = _inverse(dirs)
    origin = pose.translation
    best = np.full(len(dirs), np.inf)
    ids = np.full(len(dirs), -1, dtype=np.int64)

    def splat(lo, hi, label, hit_fn) -> None:
        win = _pixel_window(lo, hi, intr, pose)
        sel = slice(None) if win is None else win
        t = hit_fn(sel)
        closer = t < best[sel]
        idx = np.flatnonzero(closer) if win is None else win[closer]
        best[idx] = t[closer]
        ids[idx] = label

    for i, obj in enumerate(objects):
        lo, hi = obj.bounds()
        if obj.shape == "box":
            splat(lo, hi, i, lambda sel: _hit_box(origin, inv[sel], lo, hi))
        elif obj.shape == "sphere":
            c = np.asarray(obj.center, dtype=np.float64)
            splat(lo, hi, i, lambda sel: _hit_sphere(origin, dirs[sel], c, obj.size[0] / 2))
        else:
            raise SceneSpecError(f"unknown shape {obj.shape!r}")
    for lo, hi in extra_boxes:
        splat(lo, hi, -2, lambda sel: _hit_box(origin, inv[sel], lo, hi))
    depth = np.where(np.isfinite(best), best, 0.0)
    return depth.reshape(intr.height, intr.width), ids.reshape(intr.height, intr.width)


# -- features ----------------------------------------------------------------------


def _random_orthogonal_unit(rng: np.random.Generator, basis: list[np.ndarray], dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    for b in basis:
        v -= (v @ b) * b
    return v / np.linalg.norm(v)


def sample_around(rng: np.random.Generator, center: np.ndarray, sigma: float) -> np.ndarray:
    """Unit vector at angle |N(0, sigma)| from ``center`` in a random direction."""
    theta = abs(rng.normal(0.0, sigma)) if sigma > 0 else 0.0
    u = rng.standard_normal(center.shape[0])
    u -= (u @ center) * center
    u /= np.linalg.norm(u)
    return math.cos(theta) * center + math.sin(theta) * u


def _place_random_objects(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list[ObjectSpec]:
    cfg = spec.random_objects or {}
    count = int(cfg.get("count", 0))
    shapes = cfg.get("shapes", ["box"])
    smin, smax = cfg.get("size_range", [0.3, 0.7])
    (x0, y0), (x1, y1) = cfg.get("region", [[-1.5, -1.5], [1.5, 1.5]])
    gap = float(cfg.get("min_gap", 0.3))
    placed: list[ObjectSpec] = []
    for i in range(count):
        for _ in range(200):
            shape = shapes[int(rng.integers(len(shapes)))]
            size = rng.uniform(smin, smax, 3) if shape == "box" else np.full(3, rng.uniform(smin, smax))
            c = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1), size[2] / 2])
            cand = ObjectSpec(shape, tuple(float(x) for x in c), tuple(float(s) for s in size),
                              cfg.get("captions", [None] * count)[i] if cfg.get("captions") else None)
            lo, hi = cand.bounds()
            if all(_aabb_gap(lo, hi, *o.bounds()) >= gap for o in placed + list(spec.objects)):
                placed.append(cand)
                break
        else:
            raise SceneSpecError("could not place random objects without overlap")
    return placed


def _aabb_gap(lo1, hi1, lo2, hi2) -> float:
    d = np.maximum(0.0, np.maximum(lo1 - hi2, lo2 - hi1))
    return float(np.linalg.norm(d))


@dataclass
class GeneratedScene:
    scene: SceneDataset
    ground_truth: list[GroundTruthInstance]
    labels: list[tuple[str, np.ndarray]]
    objects: list[ObjectSpec]
    object_of_mask: dict[int, list[int]]
    queries: list[dict[str, Any]]
    mock_script: dict[str, list]


def generate(spec: SyntheticSceneSpec) -> GeneratedScene:
    """Build the in-memory scene, ground truth and label table for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    objects = list(spec.objects) + _place_random_objects(spec, rng)
    if not objects:
        raise SceneSpecError("scene has no objects")
    dim = spec.feature_dim
    text = HashedTokenEmbedder(dim, spec.text_embed_seed)

    # cluster centres: shared per caption, random orthogonal for anonymous objects
    cluster_of: list[int] = []
    centers: list[np.ndarray] = []
    names: list[str] = []
    caption_index: dict[str, int] = {}
    anon: list[np.ndarray] = []
    for i, obj in enumerate(objects):
        if obj.caption:
            if obj.caption not in caption_index:
                caption_index[obj.caption] = len(centers)
                centers.append(text.embed_text(obj.caption))
                names.append(obj.caption)
            cluster_of.append(caption_index[obj.caption])
        else:
            if len(anon) >= dim:
                raise SceneSpecError("more anonymous objects than feature dimensions")
            v = _random_orthogonal_unit(rng, anon, dim)
            anon.append(v)
            cluster_of.append(len(centers))
            centers.append(v)
            names.append(f"object {i}")
    # label table: one entry per category (the caption unless given), anonymous objects keep their centre
    label_names: list[str] = []
    label_vecs: list[np.ndarray] = []
    label_of: list[int] = []
    for i, obj in enumerate(objects):
        name = obj.category or obj.caption or names[cluster_of[i]]
        if name not in label_names:
            label_names.append(name)
            label_vecs.append(text.embed_text(name) if (obj.category or obj.caption) else centers[cluster_of[i]])
        label_of.append(label_names.index(name))
    noise = [spec.feature_noise if o.noise is None else o.noise for o in objects]
    for a in range(len(objects)):
        for b in range(a + 1, len(objects)):
            ca, cb = cluster_of[a], cluster_of[b]
            if ca == cb:
                continue
            angle = math.acos(max(-1.0, min(1.0, float(centers[ca] @ centers[cb]))))
            if angle <= 2 * max(noise[a], noise[b]) or angle < spec.min_cluster_angle:
                raise SceneSpecError(
                    f"clusters of objects {a} and {b} are {angle:.3f} rad apart; "
                    f"need > 2*sigma and >= {spec.min_cluster_angle}"
                )

    touching = [
        (a, b) for a in range(len(objects)) for b in range(a + 1, len(objects))
        if _aabb_gap(*objects[a].bounds(), *objects[b].bounds()) <= spec.touch_distance
    ]

    intr = CameraIntrinsics(spec.fx, spec.fy, (spec.width - 1) / 2, (spec.height - 1) / 2, spec.width, spec.height)
    poses = camera_poses(spec.camera)
    combined_frames: set[int] | None = None
    if spec.underseg_frames is not None:
        k = min(int(spec.underseg_frames), len(poses))
        combined_frames = {int(f) for f in rng.choice(len(poses), size=k, replace=False)}
    frames: list[Frame] = []
    masks: dict[int, Mask2D] = {}
    object_of_mask: dict[int, list[int]] = {}
    gt_cells: list[list[np.ndarray]] = [[] for _ in objects]
    next_id = 0
    for fid, pose in enumerate(poses):
        extra = []
        if spec.occluder_probability > 0 and rng.random() < spec.occluder_probability:
            tgt = np.asarray(spec.camera.get("target", [0, 0, 0.4]), dtype=np.float64)
            frac = rng.uniform(0.4, 0.6)
            c = pose.translation + frac * (tgt - pose.translation) + rng.normal(0, 0.2, 3)
            half = np.full(3, rng.uniform(0.08, 0.15))
            extra.append((c - half, c + half))
        depth, ids = render(objects, intr, pose, extra)
        exact = depth.copy()
        if spec.depth_noise > 0:
            valid = depth > 0
            depth = depth + np.where(valid, rng.normal(0, spec.depth_noise, depth.shape), 0.0)
            depth = np.where(valid, np.maximum(depth, 1e-3), 0.0)
        # mm quantisation happens on disk; mirror it so in-memory == on-disk
        depth = (np.round(depth * 1000.0) / 1000.0).astype(np.float32)

        flat_ids = ids.ravel()
        visible = [o for o in range(len(objects)) if np.any(flat_ids == o)]
        groups: list[list[int]] = []
        used: set[int] = set()
        for a, b in touching:
            if a in visible and b in visible and a not in used and b not in used:
                if combined_frames is not None:
                    fuse_pair = fid in combined_frames
                else:
                    fuse_pair = spec.underseg_probability > 0 and rng.random() < spec.underseg_probability
                if fuse_pair:
                    groups.append([a, b])
                    used.update((a, b))
        groups += [[o] for o in visible if o not in used]
        groups.sort(key=lambda g: g[0])

        mask_ids = []
        for g in groups:
            pix = np.isin(flat_ids, g)
            if len(g) == 1:
                feat = sample_around(rng, centers[cluster_of[g[0]]], noise[g[0]])
            else:
                mix = np.sum([centers[cluster_of[o]] for o in g], axis=0)
                mix /= np.linalg.norm(mix)
                feat = sample_around(rng, mix, max(noise[o] for o in g))
            masks[next_id] = Mask2D(next_id, fid, rle_encode(pix), feat)
            object_of_mask[next_id] = list(g)
            mask_ids.append(next_id)
            next_id += 1
        frames.append(Frame(fid, intr, pose, depth, mask_ids))

        # ground truth from noise-free hits
        v, u = np.divmod(np.arange(flat_ids.size), intr.width)
        d = exact.ravel()
        cam = np.stack([d * (u - intr.cx) / intr.fx, d * (v - intr.cy) / intr.fy, d], axis=1)
        world = cam @ pose.rotation.T + pose.translation
        for o in visible:
            sel = flat_ids == o
            gt_cells[o].append(np.floor(world[sel] / spec.voxel_size).astype(np.int64))

    gts = []
    for o, parts in enumerate(gt_cells):
        if not parts:
            continue
        vs = VoxelSet.from_cells(np.concatenate(parts), spec.voxel_size)
        pts = vs.centers()
        gts.append(GroundTruthInstance(o, pts, pts.mean(axis=0), label_of[o]))

    scene = SceneDataset(None, frames, masks, dim, manifest={"generator": spec.to_dict()})
    labels = [(name, vec) for name, vec in zip(label_names, label_vecs)]
    queries, script = [], {}
    by_obj = {g.instance_id: g for g in gts}
    for qi, q in enumerate(spec.queries):
        target = int(q["target"])
        if target not in by_obj:
            raise SceneSpecError(f"query {qi} targets object {target}, which no frame sees")
        queries.append({"query_id": qi, "instruction": q["instruction"], "target": target,
                        "center": [float(x) for x in by_obj[target].center]})
        if "replies" in q:
            script[q["instruction"]] = q["replies"]
    return GeneratedScene(scene, gts, labels, objects, object_of_mask, queries, script)


def write_generated(gen: GeneratedScene, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen.scene.manifest = dict(gen.scene.manifest, ground_truth="gt.json", labels="labels.json")
    save_scene(gen.scene, out)
    save_ground_truth(out / "gt.json", gen.ground_truth)
    (out / "labels.json").write_text(json.dumps(
        [{"label": name, "embedding": [float(x) for x in emb]} for name, emb in gen.labels]
    ) + "\n")
    (out / "objects.json").write_text(json.dumps(
        {str(k): v for k, v in sorted(gen.object_of_mask.items())}, sort_keys=True) + "\n")
    if gen.queries:
        (out / "queries.json").write_text(json.dumps(gen.queries, indent=2) + "\n")
    if gen.mock_script:
        (out / "mock_llm.json").write_text(json.dumps(gen.mock_script, indent=2, sort_keys=True) + "\n")
    return out


def generate_scene(spec: SyntheticSceneSpec, out_dir: str | Path) -> Path:
    return write_generated(generate(spec), out_dir)
