"""Observer/supporter sets and the structural-semantic merge criterion.

An *entity* here is anything with ``instance_id``, ``cloud``,
``representative_feature`` and ``member_mask_ids`` attributes: a single
mask wrapped as an instance at the first generation, or a merged instance
later on.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import PipelineConfig
from .geometry import GeometryError, VoxelSet, backproject_frame, containment, overlap_fraction


@dataclass(frozen=True)
class PairConsensus:
    pair: tuple[int, int]
    observers: frozenset[int]
    supporters: frozenset[int]
    r_struct: float | None  # None when the pair has no observers
    r_sem: float

    @property
    def n_observers(self) -> int:
        return len(self.observers)

    @property
    def n_supporters(self) -> int:
        return len(self.supporters)


@dataclass
class ConsensusContext:
    """Per-scene data shared by all pair computations."""

    frame_volumes: dict[int, VoxelSet]
    mask_clouds: dict[int, VoxelSet]
    masks_by_frame: dict[int, list[int]]

    @classmethod
    def from_scene(cls, scene, cfg: PipelineConfig, threads: int | None = None) -> ConsensusContext:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            vols = list(pool.map(
                lambda fr: backproject_frame(fr, cfg.voxel_size, cfg.frame_stride), scene.frames
            ))
        return cls(
            frame_volumes={fr.frame_id: v for fr, v in zip(scene.frames, vols)},
            mask_clouds={mid: m.cloud for mid, m in scene.masks.items()},
            masks_by_frame={fr.frame_id: list(fr.mask_ids) for fr in scene.frames},
        )


def compute_observers(
    entity_cloud: VoxelSet, frame_volumes: Mapping[int, VoxelSet], cfg: PipelineConfig
) -> frozenset[int]:
    if len(entity_cloud) == 0:
        raise GeometryError("compute_observers: empty entity cloud")
    out = []
    for fid, vol in frame_volumes.items():
        if cfg.overlap_over == "mask":
            frac = overlap_fraction(entity_cloud, vol)
        else:
            frac = overlap_fraction(vol, entity_cloud) if len(vol) else 0.0
        if frac >= cfg.tau_obs:
            out.append(fid)
    return frozenset(out)


def containing_masks(
    entity_cloud: VoxelSet, mask_clouds: Mapping[int, VoxelSet], cfg: PipelineConfig
) -> frozenset[int]:
    """Ids of masks holding at least ``tau_sub`` of the entity's cloud."""
    return frozenset(
        mid for mid, cloud in mask_clouds.items() if containment(entity_cloud, cloud) >= cfg.tau_sub
    )


def compute_supporters(
    pair: tuple,
    observers: Iterable[int],
    masks_by_frame: Mapping[int, Sequence[int]],
    cfg: PipelineConfig,
    mask_clouds: Mapping[int, VoxelSet] | None = None,
    containers: tuple[frozenset[int], frozenset[int]] | None = None,
) -> frozenset[int]:
    """Observer frames holding one mask that contains both entities.

    ``containers`` may pass precomputed :func:`containing_masks` results for
    the two entities; otherwise ``mask_clouds`` is required.
    """
    a, b = pair
    if containers is None:
        if mask_clouds is None:
            raise ValueError("compute_supporters needs mask_clouds or containers")
        containers = (containing_masks(a.cloud, mask_clouds, cfg), containing_masks(b.cloud, mask_clouds, cfg))
    both = containers[0] & containers[1]
    if not cfg.allow_self_support:
        both = both - set(a.member_mask_ids) - set(b.member_mask_ids)
    if not both:
        return frozenset()
    return frozenset(t for t in observers if any(k in both for k in masks_by_frame.get(t, ())))


def structural_rate(pair: PairConsensus) -> float:
    if pair.n_observers == 0:
        raise ZeroDivisionError(f"pair {pair.pair} has no observers")
    return pair.n_supporters / pair.n_observers


def semantic_rate(f_i: np.ndarray, f_j: np.ndarray) -> float:
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    if f_i.shape != f_j.shape:
        raise ValueError(f"feature dimension mismatch: {f_i.shape} vs {f_j.shape}")
    return max(0.0, float(f_i @ f_j))


def consensus_score(pair: PairConsensus, cfg: PipelineConfig) -> float | None:
    """Product of the two rates after applying the ablation switch."""
    if pair.r_struct is None:
        return None
    r_struct = 1.0 if cfg.ablate == "semantic-only" else pair.r_struct
    r_sem = 1.0 if cfg.ablate == "structural-only" else pair.r_sem
    return r_struct * r_sem


def merge_decision(pair: PairConsensus, cfg: PipelineConfig) -> bool:
    score = consensus_score(pair, cfg)
    return score is not None and score >= cfg.tau_thres


def candidate_pairs(entities: Sequence) -> list[tuple[int, int]]:
    """Pairs whose clouds touch after a one-cell dilation, as sorted id tuples."""
    if len(entities) < 2:
        return []
    ids = np.array([e.instance_id for e in entities], dtype=np.int64)
    keys = np.concatenate([e.cloud.keys for e in entities])
    owner = np.concatenate([np.full(len(e.cloud), i, dtype=np.int64) for i, e in enumerate(entities)])
    order = np.argsort(keys, kind="stable")
    keys, owner = keys[order], owner[order]
    found: set[tuple[int, int]] = set()
    for i, e in enumerate(entities):
        grown = e.cloud.dilate().keys
        lo = np.searchsorted(keys, grown, side="left")
        hi = np.searchsorted(keys, grown, side="right")
        hit = hi > lo
        if not hit.any():
            continue
        others = np.unique(np.concatenate([owner[l:h] for l, h in zip(lo[hit], hi[hit])]))
        for j in others:
            if j != i:
                x, y = int(ids[i]), int(ids[j])
                found.add((min(x, y), max(x, y)))
    return sorted(found)


class PairTable:
    """Deterministic table of pair consensus, keyed by (min_id, max_id)."""

    def __init__(self, ctx: ConsensusContext, cfg: PipelineConfig, threads: int | None = None):
        self.ctx = ctx
        self.cfg = cfg
        self.threads = threads
        self.entries: dict[tuple[int, int], PairConsensus] = {}
        self._observers: dict[int, frozenset[int]] = {}
        self._containers: dict[int, frozenset[int]] = {}

    def entity_observers(self, e) -> frozenset[int]:
        return self._observers[e.instance_id]

    def _prepare(self, entities: Sequence) -> None:
        todo = [e for e in entities if e.instance_id not in self._observers]

        def work(e):
            return (
                e.instance_id,
                compute_observers(e.cloud, self.ctx.frame_volumes, self.cfg),
                containing_masks(e.cloud, self.ctx.mask_clouds, self.cfg),
            )

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            for iid, obs, cont in pool.map(work, todo):
                self._observers[iid] = obs
                self._containers[iid] = cont

    def invalidate(self, ids: Iterable[int]) -> None:
        ids = set(ids)
        for i in ids:
            self._observers.pop(i, None)
            self._containers.pop(i, None)
        self.entries = {k: v for k, v in self.entries.items() if k[0] not in ids and k[1] not in ids}

    def pair_consensus(self, a, b) -> PairConsensus:
        if a.instance_id > b.instance_id:
            a, b = b, a
        obs = self._observers[a.instance_id] & self._observers[b.instance_id]
        sup = compute_supporters(
            (a, b), obs, self.ctx.masks_by_frame, self.cfg,
            containers=(self._containers[a.instance_id], self._containers[b.instance_id]),
        )
        r_struct = len(sup) / len(obs) if obs else None
        r_sem = semantic_rate(a.representative_feature, b.representative_feature)
        return PairConsensus((a.instance_id, b.instance_id), obs, sup, r_struct, r_sem)

    def update(self, entities: Sequence) -> dict[tuple[int, int], PairConsensus]:
        """Bring the table in line with ``entities``; unchanged pairs are reused."""
        self._prepare(entities)
        by_id = {e.instance_id: e for e in entities}
        live = set(by_id)
        self.entries = {k: v for k, v in self.entries.items() if k[0] in live and k[1] in live}
        pairs = candidate_pairs(sorted(entities, key=lambda e: e.instance_id))
        missing = [p for p in pairs if p not in self.entries]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            computed = list(pool.map(lambda p: self.pair_consensus(by_id[p[0]], by_id[p[1]]), missing))
        for p, pc in zip(missing, computed):
            self.entries[p] = pc
        keep = set(pairs)
        self.entries = {k: self.entries[k] for k in sorted(self.entries) if k in keep}
        return self.entries

    def dump(self) -> str:
        lines = ["# a b n_obs n_sup r_struct r_sem merge"]
        for (a, b), pc in self.entries.items():
            rs = "nan" if pc.r_struct is None else f"{pc.r_struct:.6f}"
            lines.append(
                f"{a} {b} {pc.n_observers} {pc.n_supporters} {rs} {pc.r_sem:.6f} "
                f"{int(merge_decision(pc, self.cfg))}"
            )
        return "\n".join(lines) + "\n"
