"""Iterative mask merging with a relaxing observer-count schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import PipelineConfig
from .consensus import ConsensusContext, PairConsensus, PairTable, merge_decision
from .geometry import VoxelSet, connected_components, containment

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class Instance3D:
    instance_id: int
    member_mask_ids: tuple[int, ...]
    cloud: VoxelSet
    representative_feature: np.ndarray
    aggregated_feature: np.ndarray | None = None
    label_id: int | None = None
    flags: set[str] = field(default_factory=set)

    @property
    def centroid(self) -> np.ndarray:
        return self.cloud.centroid()


class UnionFind:
    def __init__(self, items: Iterable[int]):
        self.parent = {i: i for i in items}

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller id becomes root so components are labelled deterministically
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra

    def groups(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for x in sorted(self.parent):
            out.setdefault(self.find(x), []).append(x)
        return out


def observer_threshold_schedule(observer_counts: Sequence[int] | Mapping, step_percent: float = 5.0) -> list[int]:
    """Descending |O| thresholds, one per merge generation.

    Threshold q is the value reached by the top ``step * (q + 1)`` percent of
    pairs.  Values are clamped at 1, deduplicated, and the list always ends
    at 1.
    """
    if isinstance(observer_counts, Mapping):
        observer_counts = [pc.n_observers for pc in observer_counts.values()]
    counts = sorted((int(c) for c in observer_counts), reverse=True)
    if not counts:
        raise ValueError("observer_threshold_schedule: empty pair table")
    n = len(counts)
    step = Fraction(str(step_percent))
    out: list[int] = []
    q = 0
    while step * (q + 1) <= 100:
        k = math.ceil(step * (q + 1) * n / 100)
        v = max(1, counts[min(max(k, 1), n) - 1])
        if not out or v < out[-1]:
            out.append(v)
        q += 1
    if out[-1] > 1:
        out.append(1)
    return out


def representative_member(cloud: VoxelSet, members: Sequence[int], mask_clouds: Mapping[int, VoxelSet]) -> int:
    """Member whose cloud covers the largest share of ``cloud``; ties -> smallest id."""
    best, best_cov = None, -1.0
    for mid in sorted(members):
        cov = containment(cloud, mask_clouds[mid])
        if cov > best_cov:
            best, best_cov = mid, cov
    return best


def merge_generation(
    entities: Sequence[Instance3D],
    pair_table: Mapping[tuple[int, int], PairConsensus],
    n_o: int,
    cfg: PipelineConfig,
    mask_clouds: Mapping[int, VoxelSet],
    mask_features: Mapping[int, np.ndarray],
) -> tuple[list[Instance3D], list[list[int]]]:
    """Merge every connected component of passing edges.

    Returns the new entity list and the groups of old entity ids that were
    merged (singletons omitted).
    """
    by_id = {e.instance_id: e for e in entities}
    uf = UnionFind(by_id)
    for (a, b), pc in pair_table.items():
        if a in by_id and b in by_id and pc.n_observers > n_o and merge_decision(pc, cfg):
            uf.union(a, b)
    out: list[Instance3D] = []
    merged_groups: list[list[int]] = []
    for _, group in uf.groups().items():
        if len(group) == 1:
            out.append(by_id[group[0]])
            continue
        merged_groups.append(group)
        out.append(fuse([by_id[g] for g in group], mask_clouds, mask_features))
    out.sort(key=lambda e: e.instance_id)
    return out, merged_groups


def fuse(parts: Sequence[Instance3D], mask_clouds: Mapping[int, VoxelSet], mask_features: Mapping[int, np.ndarray]) -> Instance3D:
    members = tuple(sorted(m for p in parts for m in p.member_mask_ids))
    cloud = parts[0].cloud.union(*(p.cloud for p in parts[1:]))
    inst = Instance3D(members[0], members, cloud, parts[0].representative_feature)
    return recompute_after_merge(inst, mask_clouds, mask_features)


def recompute_after_merge(
    merged: Instance3D,
    mask_clouds: Mapping[int, VoxelSet],
    mask_features: Mapping[int, np.ndarray],
    table: PairTable | None = None,
    entities: Sequence[Instance3D] | None = None,
) -> Instance3D:
    """Refresh the representative feature and, if given, the pair table."""
    rep = representative_member(merged.cloud, merged.member_mask_ids, mask_clouds)
    merged.representative_feature = np.asarray(mask_features[rep], dtype=np.float64)
    if table is not None:
        table.invalidate([merged.instance_id])
        if entities is not None:
            table.update(entities)
    return merged


def initial_entities(scene) -> list[Instance3D]:
    return [
        Instance3D(mid, (mid,), m.cloud, np.asarray(m.feature, dtype=np.float64))
        for mid, m in sorted(scene.masks.items())
    ]


@dataclass
class MappingRun:
    instances: list[Instance3D]
    schedule: list[int]
    generations: list[dict]
    table: PairTable


def run_mapping(scene, cfg: PipelineConfig, threads: int | None = None, postprocess_result: bool = True) -> MappingRun:
    ctx = ConsensusContext.from_scene(scene, cfg, threads)
    mask_features = {mid: m.feature for mid, m in scene.masks.items()}
    entities = initial_entities(scene)
    table = PairTable(ctx, cfg, threads)
    table.update(entities)
    log: list[dict] = []
    if not table.entries:
        schedule: list[int] = []
    else:
        schedule = observer_threshold_schedule(table.entries, cfg.observer_percentile_step)
    logger.debug("observer schedule %s", schedule)
    logger.debug("initial pair table\n%s", table.dump())

    committed = 0
    while schedule and committed < cfg.max_generations:
        merged_in_pass = False
        for n_o in schedule:
            if committed >= cfg.max_generations:
                break
            new, groups = merge_generation(entities, table.entries, n_o, cfg, ctx.mask_clouds, mask_features)
            if not groups:
                continue
            committed += 1
            merged_in_pass = True
            table.invalidate(i for g in groups for i in g)
            entities = new
            table.update(entities)
            log.append({"n_o": n_o, "merged": [list(g) for g in groups], "entities": len(entities)})
            logger.debug("generation %d at N_o=%d merged %d groups", committed, n_o, len(groups))
        if not merged_in_pass:
            break
        if cfg.reschedule_each_generation and table.entries:
            schedule = observer_threshold_schedule(table.entries, cfg.observer_percentile_step)

    instances = postprocess(entities, cfg, ctx.mask_clouds, mask_features) if postprocess_result else entities
    return MappingRun(instances, schedule, log, table)


def run_pipeline(scene, cfg: PipelineConfig, threads: int | None = None) -> list[Instance3D]:
    return run_mapping(scene, cfg, threads).instances


def underseg_masks(instances: Sequence[Instance3D], mask_clouds: Mapping[int, VoxelSet], fraction: float) -> set[int]:
    """Members spanning two or more spatially distinct instances.

    A mask spans instance J when it covers at least ``fraction`` of J's cloud.
    Two covered instances count as distinct when neither holds ``fraction``
    of the other, so near-duplicate instances do not flag each other.
    """
    live = [i for i in instances if len(i.cloud)]
    distinct: dict[tuple[int, int], bool] = {}

    def is_distinct(a: int, b: int) -> bool:
        key = (min(a, b), max(a, b))
        if key not in distinct:
            ca, cb = live[key[0]].cloud, live[key[1]].cloud
            inter = ca.intersection_count(cb)
            distinct[key] = inter / len(ca) < fraction and inter / len(cb) < fraction
        return distinct[key]

    flagged = set()
    for inst in live:
        for mid in inst.member_mask_ids:
            cloud = mask_clouds[mid]
            covered = [
                j for j, other in enumerate(live)
                if other.cloud.intersection_count(cloud) / len(other.cloud) >= fraction
            ]
            if any(is_distinct(a, b) for x, a in enumerate(covered) for b in covered[x + 1:]):
                flagged.add(mid)
    return flagged


def postprocess(
    instances: Sequence[Instance3D],
    cfg: PipelineConfig,
    mask_clouds: Mapping[int, VoxelSet],
    mask_features: Mapping[int, np.ndarray],
) -> list[Instance3D]:
    bad = underseg_masks(instances, mask_clouds, cfg.underseg_fraction)
    filtered: list[Instance3D] = []
    for inst in instances:
        keep = tuple(m for m in inst.member_mask_ids if m not in bad)
        if not keep:
            continue
        if len(keep) != len(inst.member_mask_ids):
            cloud = mask_clouds[keep[0]].union(*(mask_clouds[m] for m in keep[1:]))
            inst = Instance3D(keep[0], keep, cloud, inst.representative_feature,
                              inst.aggregated_feature, inst.label_id, set(inst.flags))
            recompute_after_merge(inst, mask_clouds, mask_features)
        filtered.append(inst)

    out: list[Instance3D] = []
    for inst in filtered:
        comps = [c for c in connected_components(inst.cloud) if len(c) >= cfg.min_component_voxels]
        if not comps:
            continue
        if len(comps) == 1:
            out.append(replace(inst, cloud=comps[0], flags=set(inst.flags)))
            continue
        assigned: dict[int, list[int]] = {i: [] for i in range(len(comps))}
        for mid in inst.member_mask_ids:
            shares = [c.intersection_count(mask_clouds[mid]) for c in comps]
            if max(shares) > 0:
                assigned[int(np.argmax(shares))].append(mid)
        for i, comp in enumerate(comps):
            members = tuple(sorted(assigned[i]))
            if not members:
                continue
            flags = set(inst.flags) | {"split"}
            out.append(Instance3D(members[0], members, comp, inst.representative_feature,
                                  inst.aggregated_feature, inst.label_id, flags))
    out.sort(key=lambda e: e.instance_id)
    return out
