"""Completeness-guided multi-level crop aggregation of instance features."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Mapping, Sequence

import numpy as np

from .config import PipelineConfig
from .geometry import VoxelSet, containment, rle_decode
from .merging import Instance3D
from .providers import CropRequest, EmbeddingProvider

logger = logging.getLogger(__name__)


def select_top_masks(instance: Instance3D, k: int, mask_clouds: Mapping[int, VoxelSet]) -> list[tuple[int, float]]:
    """Members ranked by the share of the instance cloud they cover."""
    if not instance.member_mask_ids:
        raise ValueError(f"instance {instance.instance_id} has no members")
    ranked = sorted(
        ((mid, containment(instance.cloud, mask_clouds[mid])) for mid in instance.member_mask_ids),
        key=lambda x: (-x[1], x[0]),
    )
    return ranked[:k]


def _round(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def mask_bbox(pixels: np.ndarray, width: int) -> tuple[int, int, int, int]:
    idx = rle_decode(pixels)
    if idx.size == 0:
        raise ValueError("mask has no pixels")
    ys, xs = np.divmod(idx, width)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def expand_box(box: tuple[int, int, int, int], factor: float, width: int, height: int) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hw, hh = (x1 - x0) * factor / 2, (y1 - y0) * factor / 2
    nx0, nx1 = max(0, _round(cx - hw)), min(width, _round(cx + hw))
    ny0, ny1 = max(0, _round(cy - hh)), min(height, _round(cy + hh))
    return nx0, ny0, nx1, ny1


def multi_level_boxes(mask, levels: int, width: int, height: int, expand: float = 0.2) -> list[tuple[int, int, int, int]]:
    """Level 0 is the tight box; level l grows it by ``1 + l * expand``."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    tight = mask_bbox(mask.pixels, width)
    return [expand_box(tight, 1 + l * expand, width, height) for l in range(levels)]


def crop_requests(instance: Instance3D, scene, cfg: PipelineConfig) -> list[CropRequest]:
    clouds = {mid: scene.masks[mid].cloud for mid in instance.member_mask_ids}
    out = []
    for mid, _ in select_top_masks(instance, cfg.topk_masks, clouds):
        mask = scene.masks[mid]
        K = scene.frame(mask.frame_id).intrinsics
        for level, box in enumerate(multi_level_boxes(mask, cfg.crop_levels, K.width, K.height, cfg.crop_expand)):
            out.append(CropRequest(mask.frame_id, box, level, mid))
    return out


def mean_pool(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if not len(vectors):
        raise ValueError("nothing to pool")
    m = np.mean(np.stack([np.asarray(v, dtype=np.float64) for v in vectors]), axis=0)
    n = np.linalg.norm(m)
    if n == 0:
        raise ValueError("pooled vector is zero")
    return m / n


def aggregate_instance_feature(instance: Instance3D, provider: EmbeddingProvider, scene, cfg: PipelineConfig) -> np.ndarray:
    """Embed the top-k x L crops, mean-pool and renormalize.

    On provider failure the instance keeps its representative feature and is
    flagged ``aggregation_failed``.
    """
    if provider.dimension != scene.feature_dim:
        raise ValueError(
            f"provider dimension {provider.dimension} does not match scene dimension {scene.feature_dim}"
        )
    crops = crop_requests(instance, scene, cfg)
    try:
        vecs = provider.embed(crops)
        if len(vecs) != len(crops):
            raise RuntimeError(f"provider returned {len(vecs)} vectors for {len(crops)} crops")
        feat = mean_pool(vecs)
    except Exception as exc:  # any provider fault degrades to the representative feature
        logger.warning("aggregation failed for instance %d: %s", instance.instance_id, exc)
        instance.flags.add("aggregation_failed")
        instance.aggregated_feature = np.asarray(instance.representative_feature, dtype=np.float64)
        return instance.aggregated_feature
    instance.flags.discard("aggregation_failed")
    instance.aggregated_feature = feat
    return feat


def aggregate_all(instances: Sequence[Instance3D], provider: EmbeddingProvider, scene, cfg: PipelineConfig,
                  threads: int | None = None) -> None:
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda inst: aggregate_instance_feature(inst, provider, scene, cfg), instances))
