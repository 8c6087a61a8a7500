"""Sparse voxel grids, conservative mesh voxelization and orthographic label masks.

Grid convention: a resolution-``N`` grid covers the cube ``[-0.5, 0.5]^3``; voxel
``(x, y, z)`` spans ``[-0.5 + x/N, -0.5 + (x+1)/N]`` along each axis.  Positions are
kept as an ``(n, 3)`` int64 array sorted by linear index ``(x*N + y)*N + z`` so two
grids with the same active set compare equal element-wise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyInput,
    LabelOverflow,
    MissingLabels,
    OutOfBounds,
    ResolutionMismatch,
    ShapeError,
    UnknownPart,
)

DEFAULT_K = 64


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Aabb:
    """Inclusive integer axis-aligned box over voxel indices."""

    min: tuple[int, int, int]
    max: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.min)
        hi = tuple(int(v) for v in self.max)
        if len(lo) != 3 or len(hi) != 3:
            raise ShapeError("Aabb corners must be integer triples")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def is_valid(self) -> bool:
        return all(a <= b for a, b in zip(self.min, self.max))

    def check(self, resolution: int | None = None) -> "Aabb":
        if not self.is_valid:
            raise OutOfBounds(f"box min {self.min} exceeds max {self.max}")
        if resolution is not None:
            if min(self.min) < 0 or max(self.max) >= resolution:
                raise OutOfBounds(f"box {self.min}-{self.max} outside grid of resolution {resolution}")
        return self

    @property
    def volume(self) -> int:
        return int(np.prod([b - a + 1 for a, b in zip(self.min, self.max)]))

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.min, float) + np.asarray(self.max, float)) / 2.0

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of the rows of ``points`` lying inside the box."""
        points = np.asarray(points).reshape(-1, 3)
        lo = np.asarray(self.min)
        hi = np.asarray(self.max)
        return np.all((points >= lo) & (points <= hi), axis=1)

    def encloses(self, other: "Aabb") -> bool:
        return all(a <= b for a, b in zip(self.min, other.min)) and all(
            a >= b for a, b in zip(self.max, other.max)
        )

    def as_array(self) -> np.ndarray:
        return np.array(self.min + self.max, dtype=np.int64)

    def to_json(self) -> dict:
        return {"min": list(self.min), "max": list(self.max)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Aabb":
        return cls(tuple(obj["min"]), tuple(obj["max"]))


class SparseVoxelGrid:
    """Immutable set of active voxels on an ``N^3`` grid, optionally part-labeled."""

    __slots__ = ("resolution", "coords", "labels", "_keys")

    def __init__(self, resolution: int, coords, labels=None, *, _trusted: bool = False):
        n = int(resolution)
        if n <= 0:
            raise ValueError("resolution must be positive")
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != coords.shape[0]:
                raise ShapeError("labels must align one-to-one with voxel positions")
            if labels.size and labels.min() < 0:
                raise ValueError("part labels must be non-negative")
        if not _trusted:
            if coords.size and (coords.min() < 0 or coords.max() >= n):
                raise OutOfBounds(f"voxel positions must lie in [0, {n - 1}]^3")
            keys = _linear_keys(coords, n)
            order = np.argsort(keys, kind="stable")
            keys = keys[order]
            if keys.size > 1 and np.any(keys[1:] == keys[:-1]):
                raise ValueError("duplicate voxel positions")
            coords = coords[order]
            if labels is not None:
                labels = labels[order]
        else:
            keys = _linear_keys(coords, n)
        self.resolution = n
        self.coords = _frozen(np.ascontiguousarray(coords))
        self.labels = None if labels is None else _frozen(np.ascontiguousarray(labels))
        self._keys = _frozen(keys)

    @classmethod
    def from_positions(cls, resolution: int, positions: Iterable, labels=None) -> "SparseVoxelGrid":
        return cls(resolution, np.asarray(list(positions) if not isinstance(positions, np.ndarray) else positions), labels)

    @classmethod
    def empty(cls, resolution: int, labeled: bool = False) -> "SparseVoxelGrid":
        return cls(resolution, np.zeros((0, 3), np.int64), np.zeros(0, np.int64) if labeled else None)

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    def __repr__(self) -> str:
        lab = "labeled" if self.labels is not None else "unlabeled"
        return f"SparseVoxelGrid(N={self.resolution}, n={len(self)}, {lab})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVoxelGrid):
            return NotImplemented
        if self.resolution != other.resolution or not np.array_equal(self.coords, other.coords):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)

    __hash__ = None

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def positions(self) -> set[tuple[int, int, int]]:
        return {tuple(int(v) for v in row) for row in self.coords}

    def part_ids(self) -> list[int]:
        if self.labels is None:
            raise MissingLabels("grid carries no part labels")
        return [int(v) for v in np.unique(self.labels)]

    def part_coords(self, part_id: int) -> np.ndarray:
        if self.labels is None:
            raise MissingLabels("grid carries no part labels")
        sel = self.labels == part_id
        if not sel.any():
            raise UnknownPart(part_id)
        return self.coords[sel]

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index of each query position in this grid, ``-1`` where inactive."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        inside = np.all((coords >= 0) & (coords < self.resolution), axis=1)
        out = np.full(coords.shape[0], -1, dtype=np.int64)
        if not len(self) or not inside.any():
            return out
        q = _linear_keys(coords[inside], self.resolution)
        idx = np.searchsorted(self._keys, q)
        idx = np.minimum(idx, len(self) - 1)
        hit = self._keys[idx] == q
        out[np.flatnonzero(inside)[hit]] = idx[hit]
        return out

    def dense(self) -> np.ndarray:
        """Dense ``N^3`` int array: label+1 (or 1 if unlabeled) at active cells, 0 elsewhere."""
        vol = np.zeros((self.resolution,) * 3, dtype=np.int64)
        if len(self):
            x, y, z = self.coords.T
            vol[x, y, z] = 1 if self.labels is None else self.labels + 1
        return vol

    def relabel(self, mapping: Mapping[int, int]) -> "SparseVoxelGrid":
        if self.labels is None:
            raise MissingLabels("grid carries no part labels")
        new = np.array([mapping[int(v)] for v in self.labels], dtype=np.int64)
        return SparseVoxelGrid(self.resolution, self.coords, new, _trusted=True)

    def unlabeled(self) -> "SparseVoxelGrid":
        return SparseVoxelGrid(self.resolution, self.coords, None, _trusted=True)

    def to_json(self) -> dict:
        return {
            "resolution": self.resolution,
            "voxels": self.coords.tolist(),
            "labels": None if self.labels is None else self.labels.tolist(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SparseVoxelGrid":
        try:
            n = int(obj["resolution"])
            voxels = np.asarray(obj["voxels"], dtype=np.int64).reshape(-1, 3)
            labels = obj.get("labels")
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed voxel file: {exc}") from exc
        return cls(n, voxels, labels)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "SparseVoxelGrid":
        return cls.from_json(json.loads(Path(path).read_text()))


def _linear_keys(coords: np.ndarray, n: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return (coords[:, 0] * n + coords[:, 1]) * n + coords[:, 2]


@dataclass(frozen=True)
class LabelMask2D:
    """Integer part-index image; entries lie in ``0..K-1`` with ``K-1`` reserved for background."""

    data: np.ndarray
    K: int = DEFAULT_K

    def __post_init__(self):
        data = np.array(self.data, dtype=np.int64)
        if data.ndim != 2:
            raise ShapeError("mask must be two-dimensional")
        if data.size and (data.min() < 0 or data.max() >= self.K):
            raise LabelOverflow(f"mask entries must lie in [0, {self.K - 1}]")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def background(self) -> int:
        return self.K - 1

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelMask2D) and self.K == other.K and np.array_equal(self.data, other.data)

    __hash__ = None

    def to_json(self) -> dict:
        h, w = self.data.shape
        return {"height": h, "width": w, "K": self.K, "data": self.data.tolist()}

    @classmethod
    def from_json(cls, obj: Mapping) -> "LabelMask2D":
        return cls(np.asarray(obj["data"], dtype=np.int64).reshape(obj["height"], obj["width"]), int(obj["K"]))


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= v.shape[0]):
            raise ShapeError("triangle vertex index out of range")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "triangles", _frozen(t))

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def validated(self) -> "TriMesh":
        """Copy with zero-area triangles removed."""
        keep = self.triangle_areas() > 0
        return TriMesh(self.vertices, self.triangles[keep])

    def translated(self, offset) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(offset, float), self.triangles)

    @classmethod
    def merge(cls, meshes: Sequence["TriMesh"]) -> "TriMesh":
        verts, tris, base = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + base)
            base += m.vertices.shape[0]
        if not verts:
            return cls(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
        return cls(np.concatenate(verts), np.concatenate(tris))

    @classmethod
    def from_obj(cls, text: str) -> "TriMesh":
        """Parse Wavefront OBJ text; polygons are fan-triangulated."""
        verts, tris = [], []
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
        return cls(np.asarray(verts, float).reshape(-1, 3), np.asarray(tris, np.int64).reshape(-1, 3))

    @classmethod
    def load_obj(cls, path: str | Path) -> "TriMesh":
        return cls.from_obj(Path(path).read_text())


# --------------------------------------------------------------------------- voxelize

def _cross_axes(e: np.ndarray) -> list[np.ndarray]:
    """Cross products of the three unit axes with edge vectors ``e`` (P, 3)."""
    zero = np.zeros(e.shape[0])
    ex, ey, ez = e[:, 0], e[:, 1], e[:, 2]
    return [
        np.stack([zero, -ez, ey], axis=1),
        np.stack([ez, zero, -ex], axis=1),
        np.stack([-ey, ex, zero], axis=1),
    ]


def triangle_box_overlap(v0, v1, v2, centers, half: float) -> np.ndarray:
    """Separating-axis overlap test between triangles and cubes (closed sets).

    All array arguments are ``(P, 3)`` and paired row-wise; returns a ``(P,)`` bool mask.
    """
    a = v0 - centers
    b = v1 - centers
    c = v2 - centers
    hit = np.ones(a.shape[0], dtype=bool)
    # box face normals
    lo = np.minimum(np.minimum(a, b), c)
    hi = np.maximum(np.maximum(a, b), c)
    hit &= np.all((lo <= half) & (hi >= -half), axis=1)
    edges = (b - a, c - b, a - c)
    # triangle normal
    normal = np.cross(edges[0], edges[1])
    d = np.einsum("ij,ij->i", normal, a)
    r = half * np.abs(normal).sum(axis=1)
    hit &= np.abs(d) <= r
    for e in edges:
        for axis in _cross_axes(e):
            pa = np.einsum("ij,ij->i", axis, a)
            pb = np.einsum("ij,ij->i", axis, b)
            pc = np.einsum("ij,ij->i", axis, c)
            r = half * np.abs(axis).sum(axis=1)
            hit &= (np.minimum(np.minimum(pa, pb), pc) <= r) & (np.maximum(np.maximum(pa, pb), pc) >= -r)
    return hit


def voxelize(mesh: TriMesh, resolution: int, *, chunk: int = 400_000) -> SparseVoxelGrid:
    """Conservative surface voxelization: a cell is active iff it touches any triangle."""
    n = int(resolution)
    mesh = mesh.validated()
    if mesh.triangles.shape[0] == 0:
        raise EmptyInput("mesh has no (non-degenerate) triangles")
    if np.any(np.abs(mesh.vertices) > 0.5 + 1e-12):
        raise OutOfBounds("mesh vertices must lie within [-0.5, 0.5]^3")
    tri = mesh.vertices[mesh.triangles]  # (T, 3, 3)
    grid = (tri + 0.5) * n
    lo = np.clip(np.ceil(grid.min(axis=1)).astype(np.int64) - 1, 0, n - 1)
    hi = np.clip(np.floor(grid.max(axis=1)).astype(np.int64), 0, n - 1)
    ext = hi - lo + 1
    counts = ext.prod(axis=1)
    tri_idx = np.repeat(np.arange(tri.shape[0]), counts)
    # enumerate each triangle's candidate cells
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    ey = ext[tri_idx, 1]
    ez = ext[tri_idx, 2]
    cells = lo[tri_idx] + np.stack([offs // (ey * ez), (offs // ez) % ey, offs % ez], axis=1)
    h = 1.0 / n
    active = []
    for s in range(0, cells.shape[0], chunk):
        c = cells[s:s + chunk]
        t = tri[tri_idx[s:s + chunk]]
        centers = -0.5 + (c + 0.5) * h
        keep = triangle_box_overlap(t[:, 0], t[:, 1], t[:, 2], centers, h / 2)
        active.append(c[keep])
    hits = np.concatenate(active) if active else np.zeros((0, 3), np.int64)
    keys = np.unique(_linear_keys(hits, n))
    coords = np.stack([keys // (n * n), (keys // n) % n, keys % n], axis=1)
    return SparseVoxelGrid(n, coords, _trusted=True)


# --------------------------------------------------------------------------- composition

def compose(parts: Sequence[tuple[int, SparseVoxelGrid]], resolution: int | None = None) -> SparseVoxelGrid:
    """Union of part grids with labels; contested voxels go to the lowest part id."""
    if not parts:
        if resolution is None:
            raise EmptyInput("cannot infer the resolution of an empty composition")
        return SparseVoxelGrid.empty(resolution, labeled=True)
    n = parts[0][1].resolution if resolution is None else int(resolution)
    coords, labels = [], []
    for pid, g in parts:
        if g.resolution != n:
            raise ResolutionMismatch(f"part {pid} has resolution {g.resolution}, expected {n}")
        if pid < 0:
            raise ValueError("part ids must be non-negative")
        coords.append(g.coords)
        labels.append(np.full(len(g), int(pid), dtype=np.int64))
    coords = np.concatenate(coords)
    labels = np.concatenate(labels)
    keys = _linear_keys(coords, n)
    order = np.lexsort((labels, keys))
    keys, coords, labels = keys[order], coords[order], labels[order]
    first = np.ones(keys.shape[0], dtype=bool)
    first[1:] = keys[1:] != keys[:-1]
    return SparseVoxelGrid(n, coords[first], labels[first], _trusted=True)


def part_aabb(grid: SparseVoxelGrid, part_id: int) -> Aabb:
    pts = grid.part_coords(part_id)
    return Aabb(tuple(pts.min(axis=0)), tuple(pts.max(axis=0)))


def all_part_aabbs(grid: SparseVoxelGrid) -> dict[int, Aabb]:
    return {k: part_aabb(grid, k) for k in grid.part_ids()}


def voxels_in_box(grid: SparseVoxelGrid, box: Aabb) -> np.ndarray:
    """Active positions inside ``box`` regardless of label, as a sorted ``(m, 3)`` array."""
    box.check(grid.resolution)
    return grid.coords[box.contains(grid.coords)]


def box_member_indices(grid: SparseVoxelGrid, box: Aabb) -> np.ndarray:
    return np.flatnonzero(box.contains(grid.coords))


# --------------------------------------------------------------------------- projection

# depth axis, ray direction (+1 scans from index 0), image-column axis, column flip, image-row axis
VIEWS = {
    "front": (1, +1, 0, False, 2),   # camera at -y
    "back": (1, -1, 0, True, 2),     # camera at +y
    "left": (0, +1, 1, True, 2),     # camera at -x
    "right": (0, -1, 1, False, 2),   # camera at +x
}


@dataclass(frozen=True)
class ViewRender:
    labels: np.ndarray     # (N, N) part label of the first hit, -1 where empty
    depth: np.ndarray      # (N, N) index of the first hit along the ray, -1 where empty

    @property
    def occupancy(self) -> np.ndarray:
        return self.depth >= 0


def render_view(grid: SparseVoxelGrid, view: str = "front") -> ViewRender:
    """First-hit orthographic render; pixel ``(i, j)`` of the front view sees column ``x=j, z=N-1-i``."""
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}; choose from {sorted(VIEWS)}")
    d_axis, sign, u_axis, u_flip, v_axis = VIEWS[view]
    n = grid.resolution
    labels = np.full((n, n), -1, dtype=np.int64)
    depth = np.full((n, n), -1, dtype=np.int64)
    if not len(grid):
        return ViewRender(labels, depth)
    c = grid.coords
    dist = c[:, d_axis] if sign > 0 else n - 1 - c[:, d_axis]
    col = c[:, u_axis] if not u_flip else n - 1 - c[:, u_axis]
    row = n - 1 - c[:, v_axis]
    pix = row * n + col
    first = np.full(n * n, n, dtype=np.int64)
    np.minimum.at(first, pix, dist)
    nearest = dist == first[pix]
    lab = grid.labels if grid.labels is not None else np.zeros(len(grid), np.int64)
    labels[row[nearest], col[nearest]] = lab[nearest]
    depth[row[nearest], col[nearest]] = dist[nearest]
    return ViewRender(labels, depth)


def project_mask(
    grid: SparseVoxelGrid,
    view: str = "front",
    out_size: tuple[int, int] | None = None,
    K: int = DEFAULT_K,
) -> LabelMask2D:
    """Orthographic part-label mask; background pixels take index ``K-1``."""
    if grid.labels is None:
        raise MissingLabels("project_mask needs a labeled grid")
    if grid.labels.size and grid.labels.max() >= K - 1:
        raise LabelOverflow(f"part label {int(grid.labels.max())} collides with background index {K - 1}")
    r = render_view(grid, view)
    mask = np.where(r.labels >= 0, r.labels, K - 1)
    if out_size is not None and tuple(out_size) != mask.shape:
        h, w = out_size
        n = grid.resolution
        ri = (np.arange(h) * n) // h
        ci = (np.arange(w) * n) // w
        mask = mask[np.ix_(ri, ci)]
    return LabelMask2D(mask, K)
