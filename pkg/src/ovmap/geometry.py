"""Back-projection, voxel sets and the overlap predicates used by consensus.

Voxel cells are packed into single int64 keys (21 bits per axis, offset
binary) so that set algebra reduces to sorted-array operations.  Sorting the
keys orders cells lexicographically by (i, j, k).
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _cc

_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1
_LIMIT = _OFFSET - 2  # keep one cell of headroom for dilation


class GeometryError(ValueError):
    pass


def pack_cells(cells: np.ndarray) -> np.ndarray:
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    if cells.size and (np.abs(cells).max() > _LIMIT):
        raise GeometryError("voxel coordinate out of packable range")
    c = cells + _OFFSET
    return (c[:, 0] << (2 * _BITS)) | (c[:, 1] << _BITS) | c[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.shape[0], 3), dtype=np.int64)
    out[:, 0] = (keys >> (2 * _BITS)) & _MASK
    out[:, 1] = (keys >> _BITS) & _MASK
    out[:, 2] = keys & _MASK
    return out - _OFFSET


def _offset_key(di: int, dj: int, dk: int) -> int:
    return (di << (2 * _BITS)) + (dj << _BITS) + dk


_NEIGHBOR_OFFSETS = [
    (di, dj, dk)
    for di in (-1, 0, 1)
    for dj in (-1, 0, 1)
    for dk in (-1, 0, 1)
    if (di, dj, dk) != (0, 0, 0)
]


class VoxelSet:
    """A set of integer voxel cells at a fixed voxel size (world frame)."""

    __slots__ = ("keys", "voxel_size")

    def __init__(self, keys: np.ndarray, voxel_size: float, *, _trusted: bool = False):
        if voxel_size <= 0:
            raise GeometryError("voxel_size must be positive")
        keys = np.asarray(keys, dtype=np.int64)
        if not _trusted:
            keys = np.unique(keys)
        self.keys = keys
        self.voxel_size = float(voxel_size)

    @classmethod
    def empty(cls, voxel_size: float) -> VoxelSet:
        return cls(np.empty(0, dtype=np.int64), voxel_size, _trusted=True)

    @classmethod
    def from_cells(cls, cells: Iterable[Sequence[int]] | np.ndarray, voxel_size: float) -> VoxelSet:
        arr = np.asarray(list(cells) if not isinstance(cells, np.ndarray) else cells, dtype=np.int64)
        return cls(pack_cells(arr.reshape(-1, 3)), voxel_size)

    @classmethod
    def from_points(cls, points: np.ndarray, voxel_size: float) -> VoxelSet:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cells = np.floor(pts / voxel_size).astype(np.int64)
        return cls(pack_cells(cells), voxel_size)

    @property
    def cells(self) -> np.ndarray:
        return unpack_keys(self.keys)

    def centers(self) -> np.ndarray:
        return (self.cells.astype(np.float64) + 0.5) * self.voxel_size

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise GeometryError("centroid of an empty voxel set")
        return self.centers().mean(axis=0)

    def __len__(self) -> int:
        return int(self.keys.shape[0])

    def __contains__(self, cell: Sequence[int]) -> bool:
        key = pack_cells(np.asarray(cell).reshape(1, 3))[0]
        i = np.searchsorted(self.keys, key)
        return bool(i < len(self.keys) and self.keys[i] == key)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VoxelSet):
            return NotImplemented
        return self.voxel_size == other.voxel_size and np.array_equal(self.keys, other.keys)

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"VoxelSet(n={len(self)}, voxel_size={self.voxel_size})"

    def _check(self, other: VoxelSet) -> None:
        if self.voxel_size != other.voxel_size:
            raise GeometryError(
                f"voxel size mismatch: {self.voxel_size} vs {other.voxel_size}"
            )

    def union(self, *others: VoxelSet) -> VoxelSet:
        for o in others:
            self._check(o)
        if not others:
            return self
        return VoxelSet(np.concatenate([self.keys, *(o.keys for o in others)]), self.voxel_size)

    def intersection(self, other: VoxelSet) -> VoxelSet:
        self._check(other)
        return VoxelSet(
            np.intersect1d(self.keys, other.keys, assume_unique=True), self.voxel_size, _trusted=True
        )

    def difference(self, other: VoxelSet) -> VoxelSet:
        self._check(other)
        return VoxelSet(
            np.setdiff1d(self.keys, other.keys, assume_unique=True), self.voxel_size, _trusted=True
        )

    def intersection_count(self, other: VoxelSet) -> int:
        self._check(other)
        if len(self) == 0 or len(other) == 0:
            return 0
        small, big = (self.keys, other.keys) if len(self) <= len(other) else (other.keys, self.keys)
        idx = np.searchsorted(big, small)
        idx[idx == len(big)] = len(big) - 1
        return int(np.count_nonzero(big[idx] == small))

    def issubset(self, other: VoxelSet) -> bool:
        return self.intersection_count(other) == len(self)

    def dilate(self) -> VoxelSet:
        """One-cell 26-neighbourhood dilation."""
        if len(self) == 0:
            return self
        shifted = [self.keys] + [self.keys + _offset_key(*o) for o in _NEIGHBOR_OFFSETS]
        return VoxelSet(np.concatenate(shifted), self.voxel_size)

    def translate(self, offset: Sequence[int]) -> VoxelSet:
        return VoxelSet(self.keys + _offset_key(*(int(x) for x in offset)), self.voxel_size, _trusted=True)


# -- back-projection ---------------------------------------------------------


def rle_decode(rle: Sequence[int] | np.ndarray) -> np.ndarray:
    """Expand (start, length) pairs over row-major pixel order into flat indices."""
    runs = np.asarray(rle, dtype=np.int64).reshape(-1, 2)
    if runs.size == 0:
        return np.empty(0, dtype=np.int64)
    starts, lengths = runs[:, 0], runs[:, 1]
    total = int(lengths.sum())
    # cumulative trick: offsets within each run plus the run start
    rep_starts = np.repeat(starts - np.concatenate(([0], np.cumsum(lengths)[:-1])), lengths)
    return rep_starts + np.arange(total, dtype=np.int64)


def rle_encode(flat_mask: np.ndarray) -> np.ndarray:
    """Encode a flat boolean mask as (start, length) pairs."""
    m = np.asarray(flat_mask, dtype=bool).ravel()
    if not m.any():
        return np.empty(0, dtype=np.int64)
    padded = np.concatenate(([False], m, [False])).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    starts, ends = edges[0::2], edges[1::2]
    return np.stack([starts, ends - starts], axis=1).ravel().astype(np.int64)


def _lift(frame, flat_idx: np.ndarray) -> np.ndarray:
    """World points for the given flat pixel indices, skipping invalid depth."""
    K = frame.intrinsics
    depth = frame.depth.ravel()
    d = depth[flat_idx].astype(np.float64)
    valid = np.isfinite(d) & (d > 0)
    flat_idx, d = flat_idx[valid], d[valid]
    v, u = np.divmod(flat_idx, K.width)
    cam = np.stack(
        [d * (u - K.cx) / K.fx, d * (v - K.cy) / K.fy, d],
        axis=1,
    )
    return cam @ frame.pose.rotation.T + frame.pose.translation


def backproject_mask(frame, mask, voxel_size: float) -> VoxelSet:
    """Voxel set of a mask's valid-depth pixels in world coordinates.

    An empty result means every pixel of the mask had invalid depth; callers
    treat that as a mask-drop condition.
    """
    if mask.frame_id != frame.frame_id:
        raise GeometryError(f"mask {mask.mask_id} does not belong to frame {frame.frame_id}")
    if voxel_size <= 0:
        raise GeometryError("voxel_size must be positive")
    idx = rle_decode(mask.pixels)
    return VoxelSet.from_points(_lift(frame, idx), voxel_size)


def backproject_frame(frame, voxel_size: float, stride: int = 4) -> VoxelSet:
    if stride < 1:
        raise GeometryError("stride must be >= 1")
    K = frame.intrinsics
    vv, uu = np.meshgrid(
        np.arange(0, K.height, stride, dtype=np.int64),
        np.arange(0, K.width, stride, dtype=np.int64),
        indexing="ij",
    )
    idx = (vv * K.width + uu).ravel()
    return VoxelSet.from_points(_lift(frame, idx), voxel_size)


# -- predicates ----------------------------------------------------------------


def overlap_fraction(a: VoxelSet, b: VoxelSet) -> float:
    """Fraction of ``a``'s cells that are also in ``b`` (asymmetric)."""
    if len(a) == 0:
        raise GeometryError("overlap_fraction: first argument is empty")
    return a.intersection_count(b) / len(a)


def containment(inner: VoxelSet, outer: VoxelSet) -> float:
    if len(inner) == 0:
        raise GeometryError("containment: inner set is empty")
    return overlap_fraction(inner, outer)


def connected_components(v: VoxelSet) -> list[VoxelSet]:
    """26-connected components, largest first; ties by lexicographic min cell."""
    n = len(v)
    if n == 0:
        return []
    keys = v.keys
    rows, cols = [], []
    # half of the neighbourhood suffices for an undirected graph
    for off in _NEIGHBOR_OFFSETS[13:]:
        target = keys + _offset_key(*off)
        j = np.searchsorted(keys, target)
        j[j == n] = n - 1
        hit = keys[j] == target
        rows.append(np.flatnonzero(hit))
        cols.append(j[hit])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(n, n))
    ncomp, labels = _cc(graph, directed=False)
    parts = [keys[labels == i] for i in range(ncomp)]
    # keys are sorted, so part[0] is the lexicographic min cell
    parts.sort(key=lambda p: (-len(p), int(p[0])))
    return [VoxelSet(p, v.voxel_size, _trusted=True) for p in parts]


# -- export ----------------------------------------------------------------------


def write_ply(path: str | Path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """ASCII PLY: float x/y/z, optional uchar red/green/blue per vertex."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        cols = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        if len(cols) != len(pts):
            raise GeometryError("colors and points differ in length")
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    body = []
    for i, p in enumerate(pts):
        row = f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}"
        if colors is not None:
            row += " {} {} {}".format(*cols[i])
        body.append(row)
    Path(path).write_text("\n".join(lines + body) + "\n")


def voxelset_to_ply(path: str | Path, v: VoxelSet, color: Sequence[int] | None = None) -> None:
    centers = v.centers()
    colors = None if color is None else np.tile(np.asarray(color, dtype=np.uint8), (len(v), 1))
    write_ply(path, centers, colors)
