"""Instance-segmentation AP and retrieval success rates."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import GeometryError, VoxelSet

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class Prediction:
    cloud: VoxelSet
    score: float = 1.0
    label: int | None = None
    instance_id: int | None = None


@dataclass
class Target:
    cloud: VoxelSet
    label: int | None = None


def instance_iou(pred: VoxelSet, gt: VoxelSet) -> float:
    if len(pred) == 0 and len(gt) == 0:
        raise GeometryError("IoU of two empty sets")
    inter = pred.intersection_count(gt)
    return inter / (len(pred) + len(gt) - inter)


@dataclass
class MatchMatrix:
    iou: np.ndarray  # (n_pred, n_gt)
    scores: np.ndarray  # (n_pred,)
    order: np.ndarray  # prediction indices, best first

    @classmethod
    def build(cls, preds: Sequence[Prediction], gts: Sequence[Target]) -> MatchMatrix:
        iou = np.zeros((len(preds), len(gts)))
        for i, p in enumerate(preds):
            for j, g in enumerate(gts):
                iou[i, j] = instance_iou(p.cloud, g.cloud)
        scores = np.array([p.score for p in preds], dtype=np.float64)
        # confidence first, then larger instances, then input order
        order = np.array(sorted(range(len(preds)), key=lambda i: (-scores[i], -len(preds[i].cloud), i)), dtype=np.int64)
        return cls(iou, scores, order)


def greedy_match(mm: MatchMatrix, threshold: float, pred_labels=None, gt_labels=None) -> np.ndarray:
    """True-positive flags in confidence order; each gt matched at most once."""
    n_gt = mm.iou.shape[1]
    used = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(len(mm.order), dtype=bool)
    for rank, i in enumerate(mm.order):
        best_j, best_iou = -1, -1.0
        for j in range(n_gt):
            if used[j]:
                continue
            if pred_labels is not None and pred_labels[i] != gt_labels[j]:
                continue
            if mm.iou[i, j] > best_iou:
                best_j, best_iou = j, mm.iou[i, j]
        if best_j >= 0 and best_iou >= threshold:
            used[best_j] = True
            tp[rank] = True
    return tp


def precision_recall(tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    precision = ctp / np.maximum(ctp + cfp, 1)
    recall = ctp / n_gt
    return precision, recall


def ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    precision, recall = precision_recall(tp, n_gt)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(preds: Sequence[Prediction], gts: Sequence[Target], iou_threshold: float,
                      class_aware: bool = False) -> float:
    if not gts or not preds:
        return 0.0
    if not class_aware:
        mm = MatchMatrix.build(preds, gts)
        return ap_from_flags(greedy_match(mm, iou_threshold), len(gts))
    if any(g.label is None for g in gts) or any(p.label is None for p in preds):
        raise ValueError("class-aware AP needs labels on predictions and ground truth")
    classes = sorted({g.label for g in gts})
    aps = []
    for c in classes:
        cp = [p for p in preds if p.label == c]
        cg = [g for g in gts if g.label == c]
        if not cp:
            aps.append(0.0)
            continue
        mm = MatchMatrix.build(cp, cg)
        aps.append(ap_from_flags(greedy_match(mm, iou_threshold), len(cg)))
    return float(np.mean(aps))


def mean_ap(preds: Sequence[Prediction], gts: Sequence[Target], class_aware: bool = False,
            thresholds: Iterable[float] = AP_THRESHOLDS) -> float:
    return float(np.mean([average_precision(preds, gts, t, class_aware) for t in thresholds]))


def map_metrics(preds: Sequence[Prediction], gts: Sequence[Target], class_aware: bool) -> dict[str, float]:
    return {
        "AP": mean_ap(preds, gts, class_aware),
        "AP50": average_precision(preds, gts, 0.5, class_aware),
        "AP25": average_precision(preds, gts, 0.25, class_aware),
    }


def success_rate(
    retrieved: Sequence[Sequence[Sequence[float]]],
    gt_centers: Sequence[Sequence[float]],
    k_values: Sequence[int] = (1, 4, 8, 16),
    radius: float = 1.0,
) -> dict[str, float]:
    """SR and SR_k as percentages.

    ``retrieved[q]`` lists the centroids of the instances returned for query
    ``q`` in rank order.  Rank ``r`` succeeds when its centroid lies within
    ``radius`` metres (inclusive) of the ground-truth centre.
    """
    if len(retrieved) != len(gt_centers):
        raise ValueError("one ground-truth centre per query is required")
    n = len(retrieved)
    out: dict[str, float] = {}
    for k in k_values:
        hits = 0
        for cents, gt in zip(retrieved, gt_centers):
            g = np.asarray(gt, dtype=np.float64)
            if any(np.linalg.norm(np.asarray(c, dtype=np.float64) - g) <= radius for c in list(cents)[:k]):
                hits += 1
        out["SR" if k == 1 else f"SR_{k}"] = 100.0 * hits / n if n else 0.0
    return out


def success_rate_from_ids(retrieved_ids: Sequence[Sequence[int]], gt_centers, imap,
                          k_values: Sequence[int] = (1, 4, 8, 16), radius: float = 1.0) -> dict[str, float]:
    cents = [[imap.centroid(i) for i in ids] for ids in retrieved_ids]
    return success_rate(cents, gt_centers, k_values, radius)


def format_report(rows: Sequence[tuple[str, str, float]], config: Mapping | None = None) -> str:
    """Flat text report: one ``metric split value`` line per row.

    ``config`` is embedded as a ``# config`` comment line for provenance.
    """
    lines = []
    if config is not None:
        lines.append("# config " + json.dumps(dict(config), sort_keys=True, separators=(",", ":")))
    lines.append("# metric split value")
    lines += [f"{m} {s} {v:.6f}" for m, s, v in rows]
    return "\n".join(lines) + "\n"


def write_report(path: str | Path, rows: Sequence[tuple[str, str, float]], config: Mapping | None = None) -> None:
    Path(path).write_text(format_report(rows, config))


def gt_targets(gts, voxel_size: float) -> list[Target]:
    return [Target(VoxelSet.from_points(g.points, voxel_size), g.label_id) for g in gts]


def predictions_from_map(imap, class_aware: bool) -> list[Prediction]:
    preds = []
    for inst in imap.instances:
        if class_aware:
            lab = imap.labels.get(inst.instance_id)
            if lab is None:
                raise ValueError("class-aware evaluation needs labelled instances")
            preds.append(Prediction(inst.cloud, lab[2], lab[0], inst.instance_id))
        else:
            preds.append(Prediction(inst.cloud, 1.0, None, inst.instance_id))
    return preds


def split_rows(preds, gts, split_of_class: Mapping[int, str] | None) -> list[tuple[str, str, float]]:
    """Semantic AP rows for the overall set and each class split (head/common/tail)."""
    rows = [(m, "all", v) for m, v in map_metrics(preds, gts, True).items()]
    if split_of_class:
        for split in sorted(set(split_of_class.values())):
            sg = [g for g in gts if split_of_class.get(g.label) == split]
            if not sg:
                continue
            rows += [(m, split, v) for m, v in map_metrics(preds, sg, True).items()]
    return rows
