"""Embedding providers.

The engine never runs a neural network.  Image-crop and text embeddings come
from a provider object with a ``dimension`` attribute and an ``embed``
method; this module ships a file-backed lookup, an HTTP client, and
deterministic synthetic stand-ins for tests and demos.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import requests

from .scene_io import read_feature_blob, write_feature_blob


class ProviderError(RuntimeError):
    pass


@dataclass(frozen=True)
class CropRequest:
    frame_id: int
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive), pixels
    level: int
    mask_id: int

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.box
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"crop box {self.box} has no area")

    @property
    def key(self) -> tuple[int, int, int, int, int, int]:
        return (self.frame_id, *self.box, self.level)


class EmbeddingProvider(Protocol):
    dimension: int

    def embed(self, crops: Sequence[CropRequest]) -> list[np.ndarray]: ...


class TextEmbedder(Protocol):
    dimension: int

    def embed_text(self, text: str) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ProviderError("cannot normalize a zero vector")
    return v / n


def _seeded_rng(*parts: object) -> np.random.Generator:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


STOPWORDS = frozenset(
    "a an the of to in on at by for with and or from near next beside some any "
    "that this these those is are be it its".split()
)


class HashedTokenEmbedder:
    """Text embedder that sums a seeded random unit vector per content token."""

    def __init__(self, dimension: int, seed: int = 0):
        self.dimension = int(dimension)
        self.seed = int(seed)

    def tokens(self, text: str) -> list[str]:
        words = re.findall(r"[a-z0-9]+", text.lower())
        return [w for w in words if w not in STOPWORDS]

    def token_vector(self, token: str) -> np.ndarray:
        rng = _seeded_rng("token", self.seed, self.dimension, token)
        return _unit(rng.standard_normal(self.dimension))

    def embed_text(self, text: str) -> np.ndarray:
        toks = self.tokens(text)
        if not toks:
            raise ProviderError(f"no content tokens in {text!r}")
        return _unit(np.sum([self.token_vector(t) for t in toks], axis=0))


class SyntheticCropEmbedder:
    """Deterministic crop embedder for synthetic scenes.

    A crop looks like the object its source mask was cut from, so the
    embedding is the mask's ingest feature perturbed by a small jitter seeded
    from the crop key.  Wider context levels get slightly more jitter.
    """

    def __init__(self, mask_features: Mapping[int, np.ndarray], jitter: float = 0.05, seed: int = 0):
        feats = {int(k): np.asarray(v, dtype=np.float64) for k, v in mask_features.items()}
        if not feats:
            raise ProviderError("synthetic embedder needs at least one mask feature")
        self.features = feats
        self.dimension = len(next(iter(feats.values())))
        self.jitter = float(jitter)
        self.seed = int(seed)

    def embed(self, crops: Sequence[CropRequest]) -> list[np.ndarray]:
        out = []
        for c in crops:
            if c.mask_id not in self.features:
                raise ProviderError(f"unknown mask {c.mask_id}")
            rng = _seeded_rng("crop", self.seed, *c.key, c.mask_id)
            noise = rng.standard_normal(self.dimension) / np.sqrt(self.dimension)
            out.append(_unit(self.features[c.mask_id] + self.jitter * (1 + c.level) * noise))
        return out


class FileEmbeddingProvider:
    """Precomputed crop embeddings: ``<blob>.bin`` plus ``<blob>.keys.json``.

    The keys file lists ``[frame_id, x0, y0, x1, y1, level]`` per blob row.
    """

    def __init__(self, blob_path: str | Path):
        blob_path = Path(blob_path)
        self.vectors = read_feature_blob(blob_path).astype(np.float64)
        keys_path = keys_path_for(blob_path)
        try:
            keys = json.loads(keys_path.read_text())
        except FileNotFoundError as exc:
            raise ProviderError(f"missing key index {keys_path}") from exc
        if len(keys) != len(self.vectors):
            raise ProviderError(f"{keys_path} lists {len(keys)} keys for {len(self.vectors)} vectors")
        self.index = {tuple(int(x) for x in k): i for i, k in enumerate(keys)}
        self.dimension = self.vectors.shape[1]

    def embed(self, crops: Sequence[CropRequest]) -> list[np.ndarray]:
        out = []
        for c in crops:
            row = self.index.get(c.key)
            if row is None:
                raise ProviderError(f"no stored embedding for crop {c.key}")
            out.append(_unit(self.vectors[row]))
        return out


def keys_path_for(blob_path: Path) -> Path:
    return blob_path.with_name(blob_path.stem + ".keys.json")


def write_crop_store(blob_path: str | Path, crops: Sequence[CropRequest], vectors: Sequence[np.ndarray]) -> None:
    """Write a store readable by :class:`FileEmbeddingProvider`, sorted by key."""
    blob_path = Path(blob_path)
    uniq: dict[tuple, np.ndarray] = {}
    for c, v in zip(crops, vectors):
        uniq.setdefault(c.key, np.asarray(v))
    keys = sorted(uniq)
    write_feature_blob(blob_path, np.stack([uniq[k] for k in keys]) if keys else np.zeros((0, 1)))
    keys_path_for(blob_path).write_text(json.dumps([list(k) for k in keys]) + "\n")


class HttpEmbeddingProvider:
    """Client for an embedding service that resolves crops against stored frames.

    ``POST {base_url}/embed/crops`` with
    ``{"scene": ..., "crops": [{"frame_id", "box": [x0, y0, x1, y1], "level", "mask_id"}]}``
    returns ``{"dimension": D, "embeddings": [[...], ...]}``.
    ``POST {base_url}/embed/text`` with ``{"texts": [...]}`` returns the same
    shape.  A bearer token is read from ``OVMAP_EMBED_API_KEY`` if set.
    """

    def __init__(self, base_url: str, dimension: int, scene: str | None = None,
                 timeout: float = 30.0, batch_size: int = 64):
        self.base_url = base_url.rstrip("/")
        self.dimension = int(dimension)
        self.scene = scene
        self.timeout = timeout
        self.batch_size = batch_size

    def _headers(self) -> dict[str, str]:
        key = os.environ.get("OVMAP_EMBED_API_KEY")
        return {"Authorization": f"Bearer {key}"} if key else {}

    def _post(self, route: str, payload: dict) -> list[np.ndarray]:
        try:
            resp = requests.post(f"{self.base_url}{route}", json=payload,
                                 headers=self._headers(), timeout=self.timeout)
        except requests.RequestException as exc:
            raise ProviderError(f"embedding request failed: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderError(f"embedding service returned HTTP {resp.status_code}")
        body = resp.json()
        vecs = [np.asarray(v, dtype=np.float64) for v in body.get("embeddings", [])]
        if any(v.shape != (self.dimension,) for v in vecs):
            raise ProviderError("embedding service returned vectors of the wrong dimension")
        return [_unit(v) for v in vecs]

    def embed(self, crops: Sequence[CropRequest]) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for i in range(0, len(crops), self.batch_size):
            batch = crops[i:i + self.batch_size]
            payload = {
                "scene": self.scene,
                "crops": [{"frame_id": c.frame_id, "box": list(c.box), "level": c.level,
                           "mask_id": c.mask_id} for c in batch],
            }
            vecs = self._post("/embed/crops", payload)
            if len(vecs) != len(batch):
                raise ProviderError("embedding service returned the wrong number of vectors")
            out.extend(vecs)
        return out

    def embed_text(self, text: str) -> np.ndarray:
        vecs = self._post("/embed/text", {"texts": [text]})
        if len(vecs) != 1:
            raise ProviderError("embedding service returned the wrong number of vectors")
        return vecs[0]
