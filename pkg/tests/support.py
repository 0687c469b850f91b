"""Glue between the package and the oracles (data extraction only)."""

from __future__ import annotations

import numpy as np

import oracles
from ovmap.config import PipelineConfig
from ovmap.consensus import ConsensusContext, PairTable, merge_decision
from ovmap.merging import initial_entities


def consensus_mismatches(scene, cfg: PipelineConfig) -> list[str]:
    """Compare the first-generation pair table with the brute-force oracle.

    Returns human-readable mismatch lines (empty when everything agrees).
    """
    ctx = ConsensusContext.from_scene(scene, cfg)
    table = PairTable(ctx, cfg)
    entries = table.update(initial_entities(scene))
    mask_cells = {m: oracles.cell_set(c) for m, c in ctx.mask_clouds.items()}
    frame_cells = {f.frame_id: oracles.frame_volume(f, cfg.voxel_size, cfg.frame_stride) for f in scene.frames}
    feats = {m: [float(x) for x in scene.masks[m].feature] for m in scene.masks}
    want = oracles.consensus_oracle(mask_cells, frame_cells, ctx.masks_by_frame, feats,
                                    cfg.tau_obs, cfg.tau_sub, cfg.allow_self_support)
    bad = []
    for pair, (O, S, rs, sem) in want.items():
        pc = entries.get(pair)
        if pc is None:
            # not a candidate: must not be able to merge
            if rs is not None and rs * sem >= cfg.tau_thres and S:
                bad.append(f"{pair}: mergeable pair missing from candidate table")
            continue
        if set(pc.observers) != O:
            bad.append(f"{pair}: observers {sorted(pc.observers)} != {sorted(O)}")
        if set(pc.supporters) != S:
            bad.append(f"{pair}: supporters {sorted(pc.supporters)} != {sorted(S)}")
        if (pc.r_struct is None) != (rs is None) or (rs is not None and abs(pc.r_struct - rs) > 1e-9):
            bad.append(f"{pair}: r_struct {pc.r_struct} != {rs}")
        if abs(pc.r_sem - sem) > 1e-9:
            bad.append(f"{pair}: r_sem {pc.r_sem} != {sem}")
        oracle_merge = rs is not None and rs * sem >= cfg.tau_thres
        if merge_decision(pc, cfg) != oracle_merge:
            bad.append(f"{pair}: merge decision differs")
    return bad


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_consensus_graph(rng: np.random.Generator, n_nodes: int, cfg: PipelineConfig):
    """Random entities plus a random pair table over them.

    Returns ``(entities, table, mask_clouds, mask_features)``.  Each entity is
    a single mask with a one-voxel cloud so fusion stays cheap.
    """
    from ovmap.consensus import PairConsensus
    from ovmap.geometry import VoxelSet
    from ovmap.merging import Instance3D

    ids = sorted(int(x) for x in rng.choice(1000, size=n_nodes, replace=False))
    clouds = {i: VoxelSet.from_cells([(i, 0, 0)], cfg.voxel_size) for i in ids}
    feats = {i: unit(rng.normal(size=4)) for i in ids}
    ents = [Instance3D(i, (i,), clouds[i], feats[i]) for i in ids]
    table = {}
    n_edges = int(rng.integers(0, 2 * n_nodes + 1))
    for _ in range(n_edges):
        a, b = sorted(int(x) for x in rng.choice(ids, size=2, replace=False))
        n_obs = int(rng.integers(0, 8))
        n_sup = int(rng.integers(0, n_obs + 1))
        obs = frozenset(range(n_obs))
        sup = frozenset(range(n_sup))
        rs = n_sup / n_obs if n_obs else None
        table[(a, b)] = PairConsensus((a, b), obs, sup, rs, float(rng.choice([0.0, 0.5, 0.7, 0.9, 1.0])))
    return ents, dict(sorted(table.items())), clouds, feats


class KeyedProvider:
    """Crop provider returning a fixed random unit vector per crop key."""

    def __init__(self, dimension: int, seed: int = 0):
        self.dimension = dimension
        self.seed = seed
        self.seen: list = []

    def vector(self, key) -> np.ndarray:
        rng = np.random.default_rng([self.seed, *[int(k) for k in key]])
        return unit(rng.normal(size=self.dimension))

    def embed(self, crops):
        self.seen.extend(crops)
        return [self.vector(c.key) for c in crops]


class FailingProvider:
    def __init__(self, dimension: int):
        self.dimension = dimension

    def embed(self, crops):
        raise RuntimeError("service down")


def random_instance_scene(rng: np.random.Generator, dim: int = 16):
    """A stand-in scene with random rectangular masks and one instance over them."""
    from types import SimpleNamespace

    from ovmap.geometry import VoxelSet, rle_encode
    from ovmap.merging import Instance3D
    from ovmap.scene_io import CameraIntrinsics, Mask2D

    w, h = 64, 48
    intr = CameraIntrinsics(50.0, 50.0, w / 2, h / 2, w, h)
    n = int(rng.integers(1, 9))
    masks, cells_all = {}, []
    for mid in range(n):
        x0, y0 = int(rng.integers(0, w - 2)), int(rng.integers(0, h - 2))
        x1, y1 = int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1))
        flat = np.zeros(w * h, dtype=bool)
        img = flat.reshape(h, w)
        img[y0:y1, x0:x1] = True
        cells = [tuple(int(v) for v in c) for c in rng.integers(0, 6, (int(rng.integers(1, 30)), 3))]
        cells_all += cells
        masks[mid] = Mask2D(mid, mid % 3, rle_encode(flat), unit(rng.normal(size=dim)),
                            VoxelSet.from_cells(cells, 0.05))
    cloud = VoxelSet.from_cells(cells_all, 0.05)
    inst = Instance3D(0, tuple(range(n)), cloud, masks[0].feature)
    scene = SimpleNamespace(masks=masks, feature_dim=dim, frame=lambda fid: SimpleNamespace(intrinsics=intr))
    return inst, scene


def random_ap_case(rng: np.random.Generator, max_n: int = 8, labels: int = 0):
    """Small random prediction/ground-truth sets on a 6x6x1 grid.

    Returns ``(preds, gts)`` as oracle tuples: preds ``(cells, score, label)``
    and gts ``(cells, label)``.  Scores come from a short list so ties occur.
    """
    def blob():
        x0, y0 = rng.integers(0, 5, 2)
        w, h = rng.integers(1, 4, 2)
        cells = {(int(x), int(y), 0) for x in range(x0, x0 + w) for y in range(y0, y0 + h)}
        extra = {(int(x), int(y), 0) for x, y in rng.integers(0, 6, (int(rng.integers(0, 3)), 2))}
        return cells | extra

    n_p, n_g = int(rng.integers(0, max_n + 1)), int(rng.integers(1, max_n + 1))
    lab = (lambda: int(rng.integers(labels))) if labels else (lambda: None)
    preds = [(blob(), float(rng.choice([0.2, 0.5, 0.5, 0.9, 1.0])), lab()) for _ in range(n_p)]
    gts = [(blob(), lab()) for _ in range(n_g)]
    return preds, gts


def to_eval(preds, gts, voxel_size: float = 0.05):
    from ovmap.eval import Prediction, Target
    from ovmap.geometry import VoxelSet

    return ([Prediction(VoxelSet.from_cells(sorted(c), voxel_size), s, l) for c, s, l in preds],
            [Target(VoxelSet.from_cells(sorted(c), voxel_size), l) for c, l in gts])
