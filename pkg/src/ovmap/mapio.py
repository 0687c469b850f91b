"""Instance map files and PLY export.

A map is a directory::

    map.json            config, scene path, instances (ids, members, cells, centroid, label, flags)
    representative.bin  representative features, instance order (scene feature blob format)
    aggregated.bin      aggregated features, present once ``aggregate`` has run
"""

from __future__ import annotations

import colorsys
import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import PipelineConfig
from .geometry import VoxelSet, write_ply
from .merging import Instance3D
from .scene_io import SchemaError, read_feature_blob, write_feature_blob

MAP_FILE = "map.json"


def save_map(out_dir: str | Path, instances: Sequence[Instance3D], cfg: PipelineConfig,
             scene_path: str | Path | None, extra: dict[str, Any] | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    insts = sorted(instances, key=lambda i: i.instance_id)
    records = []
    for inst in insts:
        records.append({
            "instance_id": int(inst.instance_id),
            "member_mask_ids": [int(m) for m in inst.member_mask_ids],
            "centroid": [float(x) for x in inst.centroid],
            "label_id": inst.label_id,
            "flags": sorted(inst.flags),
            "cells": inst.cloud.cells.ravel().tolist(),
        })
    doc = {
        "format": "ovmap-map",
        "version": 1,
        "scene": None if scene_path is None else str(scene_path),
        "voxel_size": cfg.voxel_size,
        "config": cfg.to_dict(),
        "instances": records,
    }
    if extra:
        doc.update(extra)
    (out / MAP_FILE).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
    if insts:
        write_feature_blob(out / "representative.bin", np.stack([i.representative_feature for i in insts]))
        if all(i.aggregated_feature is not None for i in insts):
            write_feature_blob(out / "aggregated.bin", np.stack([i.aggregated_feature for i in insts]))
    return out


def load_map(map_dir: str | Path) -> tuple[list[Instance3D], PipelineConfig, dict[str, Any]]:
    root = Path(map_dir)
    try:
        doc = json.loads((root / MAP_FILE).read_text())
    except FileNotFoundError as exc:
        raise SchemaError(f"missing map file: {root / MAP_FILE}") from exc
    if doc.get("format") != "ovmap-map":
        raise SchemaError(f"{root / MAP_FILE} is not an instance map")
    cfg = PipelineConfig.from_dict(doc["config"])
    recs = doc["instances"]
    rep = read_feature_blob(root / "representative.bin").astype(np.float64) if recs else np.zeros((0, 0))
    agg_path = root / "aggregated.bin"
    agg = read_feature_blob(agg_path).astype(np.float64) if agg_path.exists() and recs else None
    instances = []
    for row, rec in enumerate(recs):
        cloud = VoxelSet.from_cells(np.asarray(rec["cells"], dtype=np.int64).reshape(-1, 3), doc["voxel_size"])
        instances.append(Instance3D(
            int(rec["instance_id"]), tuple(rec["member_mask_ids"]), cloud, rep[row],
            None if agg is None else agg[row], rec.get("label_id"), set(rec.get("flags", [])),
        ))
    return instances, cfg, doc


def instance_color(instance_id: int, seed: int = 0) -> tuple[int, int, int]:
    rng = np.random.default_rng([seed, instance_id])
    h = rng.random()
    r, g, b = colorsys.hsv_to_rgb(h, 0.65 + 0.35 * rng.random(), 0.75 + 0.25 * rng.random())
    return int(r * 255), int(g * 255), int(b * 255)


def export_map_ply(path: str | Path, instances: Sequence[Instance3D], seed: int = 0) -> None:
    pts, cols = [], []
    for inst in sorted(instances, key=lambda i: i.instance_id):
        c = inst.cloud.centers()
        pts.append(c)
        cols.append(np.tile(np.asarray(instance_color(inst.instance_id, seed), dtype=np.uint8), (len(c), 1)))
    write_ply(path, np.concatenate(pts) if pts else np.zeros((0, 3)),
              np.concatenate(cols) if cols else np.zeros((0, 3), dtype=np.uint8))
