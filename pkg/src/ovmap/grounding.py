"""Instruction-to-instance grounding over an instance map."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .config import ConfigError, PipelineConfig
from .llm import LLMClient, LLMError, Message
from .merging import Instance3D

logger = logging.getLogger(__name__)


def _template(name: str) -> str:
    return resources.files("ovmap").joinpath("templates", name).read_text()


@dataclass
class LabelTable:
    labels: list[str]
    embeddings: np.ndarray  # (n, D) unit rows

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64).reshape(len(self.labels), -1)
        norms = np.linalg.norm(self.embeddings, axis=1)
        if len(self.labels) == 0:
            raise ValueError("label table is empty")
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise ValueError("label embeddings must be unit norm")

    @classmethod
    def load(cls, path: str | Path, text_embedder=None) -> LabelTable:
        data = json.loads(Path(path).read_text())
        labels, embs = [], []
        for rec in data:
            if isinstance(rec, str):
                if text_embedder is None:
                    raise ValueError(f"label {rec!r} has no embedding and no text embedder was given")
                labels.append(rec)
                embs.append(text_embedder.embed_text(rec))
            else:
                labels.append(rec["label"])
                e = np.asarray(rec["embedding"], dtype=np.float64)
                embs.append(e / np.linalg.norm(e))
        return cls(labels, np.stack(embs))


@dataclass
class CandidateReport:
    instance_id: int
    location: tuple[float, float, float]
    similarity: float
    neighbors: list[tuple[int, tuple[float, float, float], str]] = field(default_factory=list)


class InstanceMap:
    """Final instances plus a centroid KD-tree and optional labels."""

    def __init__(self, instances: Sequence[Instance3D], label_table: LabelTable | None = None):
        if not instances:
            raise ValueError("instance map is empty")
        self.instances = sorted(instances, key=lambda i: i.instance_id)
        self.ids = np.array([i.instance_id for i in self.instances], dtype=np.int64)
        self.centroids = np.stack([i.centroid for i in self.instances])
        self.spatial_index = cKDTree(self.centroids)
        self._row = {int(i): r for r, i in enumerate(self.ids)}
        self.label_table = label_table
        self.labels: dict[int, tuple[int, str, float]] = {}
        if label_table is not None:
            assign_labels(self, label_table)

    def __len__(self) -> int:
        return len(self.instances)

    def instance(self, instance_id: int) -> Instance3D:
        return self.instances[self._row[instance_id]]

    def centroid(self, instance_id: int) -> np.ndarray:
        return self.centroids[self._row[instance_id]]

    def features(self) -> np.ndarray:
        feats = []
        for inst in self.instances:
            f = inst.aggregated_feature if inst.aggregated_feature is not None else inst.representative_feature
            feats.append(np.asarray(f, dtype=np.float64))
        return np.stack(feats)

    @property
    def dimension(self) -> int:
        return int(self.features().shape[1])

    def label_text(self, instance_id: int) -> str:
        lab = self.labels.get(instance_id)
        return lab[1] if lab else "unknown"


def assign_labels(imap: InstanceMap, table: LabelTable) -> dict[int, tuple[int, str, float]]:
    """Nearest label by cosine for every instance; ties go to the earlier label."""
    sims = imap.features() @ table.embeddings.T
    out = {}
    for row, inst in enumerate(imap.instances):
        j = int(np.argmax(sims[row]))  # argmax returns the first maximum
        out[inst.instance_id] = (j, table.labels[j], float(sims[row, j]))
        inst.label_id = j
    imap.labels = out
    return out


def rank_candidates(imap: InstanceMap, f_l: np.ndarray, n_c: int | None = None) -> list[tuple[int, float]]:
    """Instances by cosine to the query, descending; ties by id."""
    q = np.asarray(f_l, dtype=np.float64)
    q = q / np.linalg.norm(q)
    feats = imap.features()
    feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    sims = feats @ q
    order = sorted(range(len(sims)), key=lambda r: (-sims[r], imap.ids[r]))
    ranked = [(int(imap.ids[r]), float(sims[r])) for r in order]
    return ranked if n_c is None else ranked[:n_c]


def spatial_context(imap: InstanceMap, candidate_id: int, n_s: int, radius: float) -> list[tuple[int, float]]:
    """Up to ``n_s`` nearest other instances within ``radius`` (id, distance)."""
    if n_s <= 0:
        return []
    c = imap.centroid(candidate_id)
    rows = imap.spatial_index.query_ball_point(c, r=radius)
    hits = []
    for r in rows:
        iid = int(imap.ids[r])
        if iid == candidate_id:
            continue
        d = float(np.linalg.norm(imap.centroids[r] - c))
        if d <= radius:
            hits.append((iid, d))
    hits.sort(key=lambda x: (x[1], x[0]))
    return hits[:n_s]


def build_round1_prompt(instruction: str, vocabulary: Sequence[str] | None = None) -> list[Message]:
    """Instruction-parsing prompt; a ``vocabulary`` switches to closed-label parsing."""
    if not instruction or not instruction.strip():
        raise ValueError("instruction must not be empty")
    if vocabulary is None:
        system = _template("round1_system.txt")
    else:
        system = _template("round1_closed_system.txt").replace("{vocabulary}", ", ".join(vocabulary))
    user = _template("round1_user.txt").replace("{instruction}", instruction.strip())
    return [{"role": "system", "content": system}, {"role": "user", "content": user}]


def _xyz(p: Sequence[float]) -> str:
    return "({:.2f}, {:.2f}, {:.2f})".format(*(float(x) for x in p))


def render_candidate(index: int, c: CandidateReport) -> str:
    nbrs = "; ".join(f"Instance {nid}, location: {_xyz(loc)}, label: {lab}" for nid, loc, lab in c.neighbors)
    return (
        f"Candidate Instance {index}: {{location: {_xyz(c.location)}; "
        f"semantic similarity: {c.similarity:.2f}; surrounding objects: [{nbrs}]}}"
    )


def build_round2_prompt(candidates: Sequence[CandidateReport], instruction: str = "",
                        description: str = "") -> list[Message]:
    if not candidates:
        raise ValueError("round two needs at least one candidate")
    body = "\n".join(render_candidate(i + 1, c) for i, c in enumerate(candidates))
    user = (
        _template("round2_user.txt")
        .replace("{instruction}", instruction.strip())
        .replace("{description}", description.strip())
        .replace("{candidates}", body)
        .replace("{count}", str(len(candidates)))
    )
    return [{"role": "system", "content": _template("round2_system.txt")}, {"role": "user", "content": user}]


_CHOICE = re.compile(r"(?:answer\s*:\s*)?(?:candidate\s*(?:instance\s*)?)?(\d+)", re.IGNORECASE)


def parse_choice(reply: str, count: int) -> int | None:
    """1-based candidate index from ``k``, ``Candidate k`` or ``answer: k``."""
    text = reply.strip().strip(".").strip()
    m = _CHOICE.fullmatch(text)
    if not m:
        return None
    k = int(m.group(1))
    return k if 1 <= k <= count else None


def _clean_description(reply: str) -> str:
    line = next((ln for ln in reply.strip().splitlines() if ln.strip()), "")
    return line.strip().strip("\"'").strip()


@dataclass
class GroundingResult:
    instance_id: int
    trace: dict[str, Any]


def ground(
    instruction: str,
    imap: InstanceMap,
    text_embedder,
    llm: LLMClient,
    cfg: PipelineConfig,
    parsing: bool = True,
    selection: bool = True,
) -> GroundingResult:
    """Two-round grounding: describe the target, rank, then pick with context.

    ``parsing=False`` restricts round one to the label table vocabulary;
    ``selection=False`` skips round two and returns the top-ranked instance.
    """
    if text_embedder.dimension != imap.dimension:
        raise ConfigError(
            f"text embedder dimension {text_embedder.dimension} does not match map features ({imap.dimension})"
        )
    flags: list[str] = []
    vocabulary = None
    if not parsing:
        if imap.label_table is None:
            raise ConfigError("closed-vocabulary parsing needs a label table")
        vocabulary = list(dict.fromkeys(imap.label_table.labels))
    p1 = build_round1_prompt(instruction, vocabulary)
    reply1 = llm.chat(p1)
    description = _clean_description(reply1)
    if not description:
        flags.append("empty_description")
        description = instruction.strip()
    f_l = text_embedder.embed_text(description)
    ranking = rank_candidates(imap, f_l)
    top = ranking[: cfg.candidates]

    candidates = []
    for iid, sim in top:
        nbrs = [
            (nid, tuple(float(x) for x in imap.centroid(nid)), imap.label_text(nid))
            for nid, _ in spatial_context(imap, iid, cfg.neighbors, cfg.neighbor_radius)
        ]
        candidates.append(CandidateReport(iid, tuple(float(x) for x in imap.centroid(iid)), sim, nbrs))

    prompts: list[list[Message]] = [p1]
    replies: list[str] = [reply1]
    chosen = top[0][0]
    if selection:
        p2 = build_round2_prompt(candidates, instruction, description)
        prompts.append(p2)
        try:
            reply2 = llm.chat(p2)
        except LLMError as exc:
            logger.warning("round two failed: %s", exc)
            reply2 = ""
        replies.append(reply2)
        k = parse_choice(reply2, len(candidates))
        if k is None:
            reminder = p2 + [
                {"role": "assistant", "content": reply2},
                {"role": "user", "content": _template("round2_reminder.txt").replace("{count}", str(len(candidates)))},
            ]
            prompts.append(reminder)
            try:
                reply3 = llm.chat(reminder)
            except LLMError as exc:
                logger.warning("round two retry failed: %s", exc)
                reply3 = ""
            replies.append(reply3)
            k = parse_choice(reply3, len(candidates))
        if k is None:
            flags.append("llm_fallback")
        else:
            chosen = candidates[k - 1].instance_id

    retrieved = [chosen] + [iid for iid, _ in ranking if iid != chosen]
    trace = {
        "instruction": instruction,
        "description": description,
        "parsing": parsing,
        "selection": selection,
        "candidates": [
            {
                "instance_id": c.instance_id,
                "location": [round(x, 6) for x in c.location],
                "similarity": round(c.similarity, 6),
                "neighbors": [
                    {"instance_id": n, "location": [round(x, 6) for x in loc], "label": lab}
                    for n, loc, lab in c.neighbors
                ],
            }
            for c in candidates
        ],
        "prompts": prompts,
        "replies": replies,
        "chosen": chosen,
        "flags": flags,
        "retrieved": [
            {"instance_id": i, "centroid": [round(float(x), 6) for x in imap.centroid(i)]} for i in retrieved
        ],
    }
    return GroundingResult(chosen, trace)
