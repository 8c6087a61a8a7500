"""Per-part latent sets with a validity channel, ground-truth targets, discarding and merging."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DomainError, MissingBox, PpeError
from .voxels import Aabb, SparseVoxelGrid, box_member_indices

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 0.5
DEFAULT_D = 8
N_DESCRIPTORS = 5

_NEIGHBORS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1) if (dx, dy, dz) != (0, 0, 0)],
    dtype=np.int64,
)


@dataclass
class PartTokens:
    index: int                      # part-position-embedding index, >= 1
    box: Aabb
    coords: np.ndarray              # (n, 3) int
    latents: np.ndarray             # (n, D + 1); last column is the validity channel
    part_id: int | None = None      # ground-truth part id when known

    @property
    def validity(self) -> np.ndarray:
        return self.latents[:, -1]


@dataclass
class PartLatentSet:
    whole_coords: np.ndarray
    whole_latents: np.ndarray
    parts: list[PartTokens] = field(default_factory=list)
    D: int = DEFAULT_D

    @property
    def num_tokens(self) -> int:
        return int(self.whole_coords.shape[0] + sum(p.coords.shape[0] for p in self.parts))

    def ppe_indices(self) -> np.ndarray:
        """Per-token PPE index in sequence order: whole shape first (0), then parts."""
        return np.concatenate(
            [np.zeros(self.whole_coords.shape[0], np.int64)]
            + [np.full(p.coords.shape[0], p.index, np.int64) for p in self.parts]
        )

    def check_ppe(self) -> None:
        idx = [p.index for p in self.parts]
        if sorted(idx) != list(range(1, len(idx) + 1)):
            raise PpeError(f"part PPE indices must be 1..{len(idx)}, got {idx}")
        for p in self.parts:
            if p.latents.shape != (p.coords.shape[0], self.D + 1):
                raise PpeError(f"part {p.index}: latents {p.latents.shape} do not align with {p.coords.shape[0]} voxels")
        if self.whole_latents.shape != (self.whole_coords.shape[0], self.D + 1):
            raise PpeError("whole-shape latents do not align with whole-shape voxels")

    def stacked_latents(self) -> np.ndarray:
        return np.concatenate([self.whole_latents] + [p.latents for p in self.parts], axis=0)

    def with_latents(self, stacked: np.ndarray) -> "PartLatentSet":
        """Copy with latents replaced from a ``(num_tokens, D+1)`` array in sequence order."""
        stacked = np.asarray(stacked)
        n0 = self.whole_coords.shape[0]
        out = PartLatentSet(self.whole_coords, stacked[:n0].copy(), [], self.D)
        start = n0
        for p in self.parts:
            n = p.coords.shape[0]
            out.parts.append(PartTokens(p.index, p.box, p.coords, stacked[start:start + n].copy(), p.part_id))
            start += n
        return out

    def to_json(self, include_content: bool = True) -> dict:
        parts = []
        for p in self.parts:
            entry = {"index": p.index, "box": p.box.to_json(), "voxels": p.coords.tolist(),
                     "validity": np.round(p.validity, 6).tolist()}
            if include_content:
                entry["latents"] = np.round(p.latents[:, : self.D], 6).tolist()
            if p.part_id is not None:
                entry["part_id"] = p.part_id
            parts.append(entry)
        return {"D": self.D, "parts": parts}


# --------------------------------------------------------------------------- targets

def voxel_descriptors(grid: SparseVoxelGrid) -> np.ndarray:
    """Per-voxel (normalized xyz, centered 26-neighbour count, boundary flag) -> ``(n, 5)``."""
    n = grid.resolution
    c = grid.coords
    if not len(grid):
        return np.zeros((0, N_DESCRIPTORS))
    pos = (c + 0.5) / n * 2.0 - 1.0
    nb = c[:, None, :] + _NEIGHBORS[None]
    rows = grid.lookup(nb.reshape(-1, 3)).reshape(len(grid), 26)
    present = rows >= 0
    count = present.sum(axis=1)
    if grid.labels is not None:
        nb_labels = np.where(present, grid.labels[np.maximum(rows, 0)], grid.labels[:, None])
        boundary = np.any(nb_labels != grid.labels[:, None], axis=1)
    else:
        boundary = np.zeros(len(grid), dtype=bool)
    return np.column_stack([pos, (count - 13.0) / 13.0, boundary * 2.0 - 1.0])


def content_projection(seed: int, D: int = DEFAULT_D) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((N_DESCRIPTORS, D)) / np.sqrt(N_DESCRIPTORS)


def build_targets(
    grid: SparseVoxelGrid,
    boxes: Sequence[Aabb],
    assignment: Sequence[int],
    alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
    D: int = DEFAULT_D,
) -> PartLatentSet:
    """Ground-truth latents: part ``i`` owns every active voxel inside ``boxes[i]``.

    Voxels labeled ``assignment[i]`` get validity ``+alpha``; other voxels in the box are
    noise voxels with validity ``-alpha`` and zeroed content channels.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if grid.labels is None:
        raise ValueError("build_targets needs a labeled grid")
    if len(assignment) > len(boxes):
        raise MissingBox(f"{len(assignment)} parts but only {len(boxes)} boxes")
    if len(assignment) < len(boxes):
        raise MissingBox(f"{len(boxes) - len(assignment)} boxes have no assigned part")
    content = voxel_descriptors(grid) @ content_projection(seed, D)
    whole = np.column_stack([content, np.full(len(grid), alpha)])
    parts = []
    for i, (box, pid) in enumerate(zip(boxes, assignment)):
        if box is None:
            raise MissingBox(f"part {pid} has no box")
        rows = box_member_indices(grid, box)
        valid = grid.labels[rows] == pid
        lat = np.zeros((rows.size, D + 1))
        lat[valid, :D] = content[rows[valid]]
        lat[:, D] = np.where(valid, alpha, -alpha)
        parts.append(PartTokens(i + 1, box, grid.coords[rows], lat, int(pid)))
    return PartLatentSet(grid.coords.copy(), whole, parts, D)


def inference_tokens(grid: SparseVoxelGrid, boxes: Sequence[Aabb], D: int = DEFAULT_D) -> tuple[PartLatentSet, list[int]]:
    """Token layout for generation: whole grid plus voxels of each non-empty box (latents zero).

    Returns the layout and the indices of boxes that were skipped for holding no voxels.
    """
    parts, skipped = [], []
    for i, box in enumerate(boxes):
        rows = box_member_indices(grid, box)
        if rows.size == 0:
            skipped.append(i)
            continue
        parts.append(PartTokens(len(parts) + 1, box, grid.coords[rows], np.zeros((rows.size, D + 1))))
    whole = np.zeros((len(grid), D + 1))
    return PartLatentSet(grid.coords.copy(), whole, parts, D), skipped


# --------------------------------------------------------------------------- flow and filtering

def interpolate(x0, eps, t):
    """Linear path ``(1 - t) * x0 + t * eps``; endpoints are returned exactly."""
    tf = float(t) if np.ndim(t) == 0 else None
    if tf is not None:
        if not 0.0 <= tf <= 1.0:
            raise DomainError(f"t={tf} outside [0, 1]")
        if tf == 0.0:
            return x0 * 1.0
        if tf == 1.0:
            return eps * 1.0
    else:
        arr = np.asarray(t.detach() if hasattr(t, "detach") else t)
        if arr.min() < 0 or arr.max() > 1:
            raise DomainError("t outside [0, 1]")
    return (1 - t) * x0 + t * eps


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def retained(f_valid: np.ndarray, beta: float = DEFAULT_BETA) -> np.ndarray:
    """``sigmoid(f_valid) > beta`` evaluated as ``f_valid > logit(beta)``.

    Comparing in logit space avoids sigmoid rounding to exactly ``beta`` for scores
    within machine precision of the threshold; ``logit(0.5)`` is exactly 0.
    """
    threshold = np.log(beta) - np.log1p(-beta)
    return np.asarray(f_valid, dtype=np.float64) > threshold


def discard_voxels(latents: PartLatentSet, beta: float = DEFAULT_BETA) -> PartLatentSet:
    """Drop part voxels whose validity score ``sigmoid(f_valid)`` does not exceed ``beta``."""
    if not 0.0 < beta < 1.0:
        raise DomainError("beta must lie in (0, 1)")
    out = PartLatentSet(latents.whole_coords, latents.whole_latents, [], latents.D)
    for p in latents.parts:
        keep = retained(p.validity, beta)
        out.parts.append(PartTokens(p.index, p.box, p.coords[keep], p.latents[keep], p.part_id))
    return out


def merge_parts(filtered: PartLatentSet, resolution: int) -> SparseVoxelGrid:
    """Union of retained part voxels; contested voxels go to the higher validity score, ties to the lower index.

    Labels of the merged grid are the parts' PPE indices minus one.
    """
    coords, labels, scores = [], [], []
    for p in filtered.parts:
        coords.append(p.coords)
        labels.append(np.full(p.coords.shape[0], p.index - 1, np.int64))
        scores.append(sigmoid(p.validity))
    if not coords or sum(c.shape[0] for c in coords) == 0:
        return SparseVoxelGrid.empty(resolution, labeled=True)
    coords = np.concatenate(coords)
    labels = np.concatenate(labels)
    scores = np.concatenate(scores)
    keys = (coords[:, 0] * resolution + coords[:, 1]) * resolution + coords[:, 2]
    order = np.lexsort((labels, -scores, keys))
    keys, coords, labels = keys[order], coords[order], labels[order]
    first = np.ones(keys.shape[0], bool)
    first[1:] = keys[1:] != keys[:-1]
    return SparseVoxelGrid(resolution, coords[first], labels[first], _trusted=True)


def connected_components(grid: SparseVoxelGrid) -> int:
    if not len(grid):
        return 0
    _, n = ndimage.label(grid.dense() > 0, structure=np.ones((3, 3, 3)))
    return int(n)


def save_parts(latents: PartLatentSet, path: str | Path, extra: dict | None = None) -> None:
    doc = latents.to_json()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))
