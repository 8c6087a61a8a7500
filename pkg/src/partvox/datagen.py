"""Procedural multi-part objects, training pairs for both stages, corpus splits and dataset IO.

Objects are assembled from boxes, spheres and cylinders following three archetypes
(snowman, table, robot).  Each archetype is a priority list of twelve parts in which every
part is placed so that it interpenetrates its parent; taking the first ``n`` entries gives
a connected ``n``-part assembly.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .boxcodec import BoxTokenSequence, canonical_key, canonicalize, tokenize
from .errors import GenerationFailed, StratificationError
from .latents import DEFAULT_ALPHA, DEFAULT_D, PartLatentSet, build_targets, connected_components
from .voxels import (
    DEFAULT_K,
    Aabb,
    LabelMask2D,
    SparseVoxelGrid,
    TriMesh,
    all_part_aabbs,
    compose,
    project_mask,
    voxelize,
)

ARCHETYPES = ("snowman", "table", "robot")
MAX_PARTS = 12
BUCKETS = ((2, 3), (4, 6), (7, 9), (10, 12))
SUPPORTED_RESOLUTIONS = (16, 32, 64)
EXTENT = 0.44


# --------------------------------------------------------------------------- primitive meshes

def box_mesh(center, half) -> TriMesh:
    c = np.asarray(center, float)
    h = np.asarray(half, float)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
    faces = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for a, b, cc, d in faces for t in ((a, b, cc), (a, cc, d))]
    return TriMesh(c + corners * h, tris)


def sphere_mesh(center, radius: float, seg: int = 24) -> TriMesh:
    rings = seg // 2
    verts = [[0.0, 0.0, radius]]
    for i in range(1, rings):
        th = math.pi * i / rings
        for j in range(seg):
            ph = 2 * math.pi * j / seg
            verts.append([radius * math.sin(th) * math.cos(ph), radius * math.sin(th) * math.sin(ph), radius * math.cos(th)])
    verts.append([0.0, 0.0, -radius])
    tris = []
    for j in range(seg):
        tris.append((0, 1 + j, 1 + (j + 1) % seg))
    for i in range(rings - 2):
        a, b = 1 + i * seg, 1 + (i + 1) * seg
        for j in range(seg):
            j2 = (j + 1) % seg
            tris += [(a + j, b + j, b + j2), (a + j, b + j2, a + j2)]
    last = len(verts) - 1
    base = 1 + (rings - 2) * seg
    for j in range(seg):
        tris.append((base + j, last, base + (j + 1) % seg))
    return TriMesh(np.asarray(verts) + np.asarray(center, float), tris)


def cylinder_mesh(center, radius: float, half_len: float, axis: int = 2, seg: int = 20) -> TriMesh:
    ang = 2 * math.pi * np.arange(seg) / seg
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    verts = []
    for h in (-half_len, half_len):
        for u, v in ring:
            p = [u, v]
            p.insert(axis, h)
            verts.append(p)
    cap = [0.0, 0.0]
    lo, hi = list(cap), list(cap)
    lo.insert(axis, -half_len)
    hi.insert(axis, half_len)
    verts += [lo, hi]
    c0, c1 = 2 * seg, 2 * seg + 1
    tris = []
    for j in range(seg):
        j2 = (j + 1) % seg
        tris += [(j, j2, seg + j2), (j, seg + j2, seg + j), (c0, j2, j), (c1, seg + j, seg + j2)]
    return TriMesh(np.asarray(verts) + np.asarray(center, float), tris)


# --------------------------------------------------------------------------- objects

@dataclass
class PartSpec:
    part_id: int
    kind: str                       # "box" | "sphere" | "cylinder"
    center: tuple[float, float, float]
    size: tuple[float, ...]         # box: half extents; sphere: (r,); cylinder: (r, half_len, axis)
    parent: int | None = None
    detail: bool = False            # merged into its parent by the coarse granularity variant
    name: str = ""

    def mesh(self) -> TriMesh:
        if self.kind == "box":
            return box_mesh(self.center, self.size)
        if self.kind == "sphere":
            return sphere_mesh(self.center, self.size[0])
        r, h, axis = self.size
        return cylinder_mesh(self.center, r, h, int(axis))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        if self.kind == "box":
            h = np.asarray(self.size)
        elif self.kind == "sphere":
            h = np.full(3, self.size[0])
        else:
            r, hl, axis = self.size
            h = np.full(3, r)
            h[int(axis)] = hl
        return c - h, c + h


@dataclass
class ProceduralObject:
    seed: int
    archetype: str
    resolution: int
    parts: list[PartSpec]
    granularity: list[dict[int, int]] = field(default_factory=list)

    @property
    def num_parts(self) -> int:
        return len(self.parts)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "archetype": self.archetype,
            "resolution": self.resolution,
            "parts": [
                {"part_id": p.part_id, "kind": p.kind, "center": list(p.center), "size": list(p.size),
                 "parent": p.parent, "detail": p.detail, "name": p.name}
                for p in self.parts
            ],
            "granularity": [{str(k): v for k, v in g.items()} for g in self.granularity],
        }


def _snowman(rng) -> list[PartSpec]:
    r0 = rng.uniform(0.13, 0.17)
    r1 = r0 * rng.uniform(0.7, 0.82)
    r2 = r1 * rng.uniform(0.68, 0.8)
    z0 = -EXTENT + r0
    z1 = z0 + r0 + r1 * 0.55
    z2 = z1 + r1 + r2 * 0.5
    hat_h = rng.uniform(0.035, 0.05)
    hat_r = r2 * rng.uniform(0.6, 0.8)
    hat_z = z2 + r2 * 0.8 + hat_h
    arm_len = rng.uniform(0.06, 0.09)
    arm_r = rng.uniform(0.02, 0.03)
    arm_x = r1 * 0.8 + arm_len
    btn = rng.uniform(0.028, 0.036)
    P = [
        ("bottom", "sphere", (0, 0, z0), (r0,), None, False),
        ("middle", "sphere", (0, 0, z1), (r1,), 0, False),
        ("head", "sphere", (0, 0, z2), (r2,), 1, False),
        ("hat", "cylinder", (0, 0, hat_z), (hat_r, hat_h, 2), 2, False),
        ("nose", "cylinder", (0, -r2 - 0.02, z2), (0.025, 0.045, 1), 2, True),
        ("arm_l", "cylinder", (-arm_x, 0, z1 + 0.02), (arm_r, arm_len, 0), 1, False),
        ("arm_r", "cylinder", (arm_x, 0, z1 + 0.02), (arm_r, arm_len, 0), 1, False),
        ("button_1", "sphere", (0, -r1 * 0.95, z1 + r1 * 0.25), (btn,), 1, True),
        ("button_2", "sphere", (0, -r0 * 0.95, z0 + r0 * 0.25), (btn,), 0, True),
        ("brim", "cylinder", (0, 0, z2 + r2 * 0.8), (hat_r * 1.4, 0.02, 2), 3, True),
        ("scarf", "cylinder", (0, 0, z1 + r1 * 0.8), (r1 * 0.75, 0.025, 2), 1, True),
        ("button_3", "sphere", (0, -r0 * 0.8, z0 + r0 * 0.6), (btn,), 0, True),
    ]
    return [PartSpec(i, k, tuple(map(float, c)), tuple(float(v) for v in s), par, det, n)
            for i, (n, k, c, s, par, det) in enumerate(P)]


def _table(rng) -> list[PartSpec]:
    hx, hy = rng.uniform(0.25, 0.38), rng.uniform(0.17, 0.3)
    hz = rng.uniform(0.03, 0.045)
    top_z = rng.uniform(0.0, 0.15)
    leg_r = rng.uniform(0.03, 0.042)
    inset = leg_r + rng.uniform(0.01, 0.04)
    leg_top = top_z
    leg_bot = -EXTENT
    leg_h = (leg_top - leg_bot) / 2
    leg_z = (leg_top + leg_bot) / 2
    lx, ly = hx - inset, hy - inset
    shelf_z = leg_bot + rng.uniform(0.12, 0.2)
    rail_z = top_z - hz - 0.03
    back_h = rng.uniform(0.12, 0.2)
    vase_r = rng.uniform(0.05, 0.08)
    P = [
        ("top", "box", (0, 0, top_z), (hx, hy, hz), None, False),
        ("leg_1", "cylinder", (-lx, -ly, leg_z), (leg_r, leg_h, 2), 0, False),
        ("leg_2", "cylinder", (lx, -ly, leg_z), (leg_r, leg_h, 2), 0, False),
        ("leg_3", "cylinder", (-lx, ly, leg_z), (leg_r, leg_h, 2), 0, False),
        ("leg_4", "cylinder", (lx, ly, leg_z), (leg_r, leg_h, 2), 0, False),
        ("shelf", "box", (0, 0, shelf_z), (lx + leg_r * 0.5, ly + leg_r * 0.5, 0.02), 0, False),
        ("back", "box", (0, hy - 0.02, top_z + hz + back_h), (hx * 0.9, 0.025, back_h), 0, False),
        ("rail_front", "box", (0, -ly, rail_z), (lx, 0.02, 0.025), 0, True),
        ("rail_rear", "box", (0, ly, rail_z), (lx, 0.02, 0.025), 0, True),
        ("rail_left", "box", (-lx, 0, rail_z), (0.02, ly, 0.025), 0, True),
        ("rail_right", "box", (lx, 0, rail_z), (0.02, ly, 0.025), 0, True),
        ("vase", "sphere", (rng.uniform(-0.5, 0.5) * hx, -0.3 * hy, top_z + hz + vase_r * 0.8), (vase_r,), 0, True),
    ]
    return [PartSpec(i, k, tuple(map(float, c)), tuple(float(v) for v in s), par, det, n)
            for i, (n, k, c, s, par, det) in enumerate(P)]


def _robot(rng) -> list[PartSpec]:
    tx, ty, tz = rng.uniform(0.09, 0.13), rng.uniform(0.06, 0.09), rng.uniform(0.1, 0.14)
    leg_len = rng.uniform(0.09, 0.12)
    foot_h = 0.03
    torso_z = -EXTENT + 2 * foot_h + 2 * leg_len + tz - 0.02
    head = rng.uniform(0.055, 0.075)
    head_z = torso_z + tz + head * 0.9
    arm_r = rng.uniform(0.025, 0.035)
    arm_len = tz * rng.uniform(0.8, 0.95)
    arm_x = tx + arm_r * 0.6
    arm_z = torso_z + tz - arm_len
    leg_r = rng.uniform(0.03, 0.04)
    leg_x = tx * 0.5
    leg_z = torso_z - tz - leg_len + 0.02
    hand_r = arm_r * 1.5
    hand_z = arm_z - arm_len
    foot_z = leg_z - leg_len
    P = [
        ("torso", "box", (0, 0, torso_z), (tx, ty, tz), None, False),
        ("head", "box" if rng.random() < 0.5 else "sphere", (0, 0, head_z), (head, head, head), 0, False),
        ("arm_l", "cylinder", (-arm_x, 0, arm_z), (arm_r, arm_len, 2), 0, False),
        ("arm_r", "cylinder", (arm_x, 0, arm_z), (arm_r, arm_len, 2), 0, False),
        ("leg_l", "cylinder", (-leg_x, 0, leg_z), (leg_r, leg_len, 2), 0, False),
        ("leg_r", "cylinder", (leg_x, 0, leg_z), (leg_r, leg_len, 2), 0, False),
        ("hand_l", "sphere", (-arm_x, 0, hand_z), (hand_r,), 2, True),
        ("hand_r", "sphere", (arm_x, 0, hand_z), (hand_r,), 3, True),
        ("foot_l", "box", (-leg_x, -0.02, foot_z), (leg_r * 1.3, leg_r * 1.8, foot_h), 4, True),
        ("foot_r", "box", (leg_x, -0.02, foot_z), (leg_r * 1.3, leg_r * 1.8, foot_h), 5, True),
        ("antenna", "cylinder", (0, 0, head_z + head + 0.03), (0.015, 0.04, 2), 1, True),
        ("belt", "box", (0, 0, torso_z - tz * 0.4), (tx + 0.015, ty + 0.015, 0.025), 0, True),
    ]
    out = []
    for i, (n, k, c, s, par, det) in enumerate(P):
        if k == "sphere" and len(s) == 3:
            s = (s[0],)
        out.append(PartSpec(i, k, tuple(map(float, c)), tuple(float(v) for v in s), par, det, n))
    return out


_BUILDERS = {"snowman": _snowman, "table": _table, "robot": _robot}


def _place(parts: list[PartSpec], rng) -> list[PartSpec]:
    """Random quarter-turn about z, uniform rescale and shift that keep the assembly in the cube."""
    turns = int(rng.integers(4))
    lo = np.min([p.bounds()[0] for p in parts], axis=0)
    hi = np.max([p.bounds()[1] for p in parts], axis=0)
    span = (hi - lo).max()
    scale = min(rng.uniform(0.85, 1.05), 2 * EXTENT / span)
    placed = []
    for p in parts:
        c = np.asarray(p.center) * scale
        size = list(p.size)
        for _ in range(turns):
            c = np.array([-c[1], c[0], c[2]])
            if p.kind == "box":
                size = [size[1], size[0], size[2]]
            elif p.kind == "cylinder" and int(size[2]) in (0, 1):
                size[2] = 1 - int(size[2])
        if p.kind == "box":
            size = [v * scale for v in size]
        elif p.kind == "sphere":
            size = [size[0] * scale]
        else:
            size = [size[0] * scale, size[1] * scale, size[2]]
        placed.append(PartSpec(p.part_id, p.kind, tuple(c), tuple(size), p.parent, p.detail, p.name))
    lo = np.min([p.bounds()[0] for p in placed], axis=0)
    hi = np.max([p.bounds()[1] for p in placed], axis=0)
    slack_lo = -EXTENT - lo
    slack_hi = EXTENT - hi
    shift = np.array([rng.uniform(min(a, b), max(a, b)) for a, b in zip(slack_lo, slack_hi)])
    shift[2] = slack_lo[2]  # rest on the floor
    return [PartSpec(p.part_id, p.kind, tuple(np.asarray(p.center) + shift), p.size, p.parent, p.detail, p.name)
            for p in placed]


def _coarse_map(parts: Sequence[PartSpec]) -> dict[int, int]:
    by_id = {p.part_id: p for p in parts}
    out = {}
    for p in parts:
        q = p
        while q.detail and q.parent in by_id:
            q = by_id[q.parent]
        out[p.part_id] = q.part_id
    return out


def _canonical_relabel(grid: SparseVoxelGrid) -> dict[int, int]:
    boxes = all_part_aabbs(grid)
    order = sorted(boxes, key=lambda k: (canonical_key(boxes[k]), k))
    return {old: new for new, old in enumerate(order)}


def _assemble(parts: list[PartSpec], n: int) -> tuple[list[PartSpec], SparseVoxelGrid]:
    """Voxelize, compose, and renumber part ids so they follow canonical box order."""
    vox = {p.part_id: voxelize(p.mesh(), n) for p in parts}
    for _ in range(6):
        grid = compose([(p.part_id, vox[p.part_id]) for p in parts], n)
        if len(grid.part_ids()) != len(parts):
            raise GenerationFailed("a part lost all of its voxels to its neighbours")
        remap = _canonical_relabel(grid)
        if all(k == v for k, v in remap.items()):
            return parts, grid
        parts = [
            PartSpec(remap[p.part_id], p.kind, p.center, p.size,
                     None if p.parent is None else remap[p.parent], p.detail, p.name)
            for p in parts
        ]
        vox = {remap[k]: v for k, v in vox.items()}
        parts.sort(key=lambda p: p.part_id)
    return parts, grid


def has_noise_voxels(grid: SparseVoxelGrid) -> bool:
    for pid, box in all_part_aabbs(grid).items():
        inside = box.contains(grid.coords)
        if np.any(grid.labels[inside] != pid):
            return True
    return False


def generate_object(
    seed: int,
    part_count_range: tuple[int, int] = (2, MAX_PARTS),
    resolution: int = 32,
    max_retries: int = 20,
) -> tuple[ProceduralObject, SparseVoxelGrid]:
    """Deterministic connected assembly with part ids in canonical box order."""
    n = int(resolution)
    if n not in SUPPORTED_RESOLUTIONS:
        raise ValueError(f"resolution must be one of {SUPPORTED_RESOLUTIONS}")
    lo, hi = part_count_range
    if not 2 <= lo <= hi <= MAX_PARTS:
        raise ValueError(f"part_count_range must lie within [2, {MAX_PARTS}]")
    rng = np.random.default_rng([int(seed), 0x9A27])
    for _ in range(max_retries):
        count = int(rng.integers(lo, hi + 1))
        archetype = ARCHETYPES[int(rng.integers(len(ARCHETYPES)))]
        parts = _place(_BUILDERS[archetype](rng)[:count], rng)
        try:
            parts, grid = _assemble(parts, n)
        except GenerationFailed:
            continue
        if min(len(grid.part_coords(k)) for k in grid.part_ids()) < 2:
            continue
        if connected_components(grid) != 1 or not has_noise_voxels(grid):
            continue
        variants = [{p.part_id: p.part_id for p in parts}, _coarse_map(parts)]
        return ProceduralObject(int(seed), archetype, n, parts, variants), grid
    raise GenerationFailed(f"seed {seed}: no valid assembly after {max_retries} attempts")


# --------------------------------------------------------------------------- training pairs

@dataclass
class TrainingPairS1:
    grid: SparseVoxelGrid
    mask: LabelMask2D
    sequence: BoxTokenSequence
    boxes: list[Aabb]


@dataclass
class TrainingPairS2:
    grid: SparseVoxelGrid
    boxes: list[Aabb]
    targets: PartLatentSet
    noise_fraction: float
    noise_count: int


def coarsen(grid: SparseVoxelGrid, merge_map: dict[int, int]) -> SparseVoxelGrid:
    """Apply a fine->coarse label map, then renumber coarse parts in canonical box order."""
    merged = grid.relabel(merge_map)
    return merged.relabel(_canonical_relabel(merged))


def canonical_boxes(grid: SparseVoxelGrid) -> list[Aabb]:
    return canonicalize(list(all_part_aabbs(grid).values()))


def make_pair_s1(obj: ProceduralObject, grid: SparseVoxelGrid, granularity: int = 0, K: int = DEFAULT_K) -> TrainingPairS1:
    g = grid if granularity == 0 else coarsen(grid, obj.granularity[granularity])
    boxes = canonical_boxes(g)
    return TrainingPairS1(g, project_mask(g, "front", K=K), tokenize(boxes, g.resolution), boxes)


def part_box_assignment(grid: SparseVoxelGrid) -> tuple[list[Aabb], list[int]]:
    """Per-part boxes in canonical order with the part id owning each box."""
    aabbs = all_part_aabbs(grid)
    ids = sorted(aabbs, key=lambda k: (canonical_key(aabbs[k]), k))
    return [aabbs[k] for k in ids], ids


def make_pair_s2(obj: ProceduralObject | None, grid: SparseVoxelGrid, alpha: float = DEFAULT_ALPHA, seed: int = 0,
                 D: int = DEFAULT_D) -> TrainingPairS2:
    boxes, ids = part_box_assignment(grid)
    targets = build_targets(grid, boxes, ids, alpha, seed, D)
    total = sum(p.coords.shape[0] for p in targets.parts)
    noise = sum(int((p.validity < 0).sum()) for p in targets.parts)
    return TrainingPairS2(grid, boxes, targets, noise / total if total else 0.0, noise)


# --------------------------------------------------------------------------- splits

def bucket_of(part_count: int) -> int:
    for i, (lo, hi) in enumerate(BUCKETS):
        if lo <= part_count <= hi:
            return i
    raise ValueError(f"part count {part_count} outside all buckets")


def _largest_remainder(total: int, ratios: Sequence[float]) -> np.ndarray:
    raw = np.asarray(ratios, float) * total
    base = np.floor(raw).astype(int)
    rem = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rem]] += 1
    return base


def split_corpus(
    objects: Sequence[tuple[str, int]],
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    names: Sequence[str] = ("train", "val", "test"),
) -> dict[str, list[str]]:
    """Seeded split stratified by part-count bucket.

    ``objects`` holds ``(object id, part count)`` pairs.  Split sizes follow the ratios
    exactly (largest remainder); each bucket's share of every split is within one object
    of its proportional target.
    """
    ratios = list(ratios)
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative and sum to 1")
    if len(ratios) != len(names):
        raise ValueError("need one name per ratio")
    groups: dict[int, list[str]] = {}
    for oid, count in objects:
        groups.setdefault(bucket_of(count), []).append(oid)
    active = sum(r > 0 for r in ratios)
    for b, ids in groups.items():
        if len(ids) < active:
            raise StratificationError(f"bucket {BUCKETS[b]} has {len(ids)} objects, fewer than {active} splits")
    buckets = sorted(groups)
    sizes = np.array([len(groups[b]) for b in buckets])
    targets = _largest_remainder(int(sizes.sum()), ratios)
    raw = sizes[:, None] * np.asarray(ratios)[None, :]
    alloc = np.floor(raw).astype(int)
    alloc[:, np.asarray(ratios) == 0] = 0
    need_row = sizes - alloc.sum(axis=1)
    need_col = targets - alloc.sum(axis=0)
    if need_row.sum():
        # route the leftover objects through a flow network with unit capacity per cell
        nb, ns = len(buckets), len(ratios)
        src, sink = 0, 1 + nb + ns
        cap = np.zeros((sink + 1, sink + 1), dtype=np.int32)
        for i in range(nb):
            cap[src, 1 + i] = need_row[i]
            for j in range(ns):
                if ratios[j] > 0 and raw[i, j] > alloc[i, j] - 1e-12:
                    cap[1 + i, 1 + nb + j] = 1
        for j in range(ns):
            cap[1 + nb + j, sink] = need_col[j]
        flow = maximum_flow(csr_matrix(cap), src, sink).flow.toarray()
        alloc += np.maximum(flow[1:1 + nb, 1 + nb:1 + nb + ns], 0)
        if (alloc.sum(axis=1) != sizes).any():
            raise StratificationError("could not balance the stratified allocation")
    rng = np.random.default_rng([int(seed), 0x5EED])
    out = {name: [] for name in names}
    for i, b in enumerate(buckets):
        ids = sorted(groups[b])
        perm = rng.permutation(len(ids))
        start = 0
        for j, name in enumerate(names):
            out[name].extend(ids[k] for k in perm[start:start + alloc[i, j]])
            start += alloc[i, j]
    return {name: sorted(v) for name, v in out.items()}


# --------------------------------------------------------------------------- dataset IO

def derive_seed(root: int, tag: str) -> int:
    """Purpose-specific seed: ``root XOR first-4-bytes(sha256(tag))``, masked to 31 bits."""
    digest = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "little")
    return (int(root) ^ digest) & 0x7FFFFFFF


@dataclass
class DatasetObject:
    oid: str
    grid: SparseVoxelGrid
    boxes: list[Aabb]
    mask: LabelMask2D
    meta: dict


def write_object(root: Path, oid: str, obj: ProceduralObject, grid: SparseVoxelGrid, K: int, alpha: float,
                 D: int, latent_seed: int, config_hash: str) -> dict:
    d = root / "objects" / oid
    d.mkdir(parents=True, exist_ok=True)
    s1 = make_pair_s1(obj, grid, 0, K)
    s2 = make_pair_s2(obj, grid, alpha, latent_seed, D)
    doc = grid.to_json()
    doc["config_hash"] = config_hash
    (d / "voxels.json").write_text(json.dumps(doc))
    (d / "boxes.json").write_text(json.dumps([b.to_json() for b in s1.boxes]))
    mask = s1.mask.to_json()
    mask["view"] = "front"
    (d / "mask.json").write_text(json.dumps(mask))
    parts = []
    for p in s2.targets.parts:
        noise = p.coords[p.validity < 0]
        parts.append({"index": p.index, "part_id": p.part_id, "box": p.box.to_json(),
                      "n_tokens": int(p.coords.shape[0]), "n_noise": int(noise.shape[0]),
                      "noise_voxels": noise.tolist()})
    (d / "s2_targets.json").write_text(json.dumps({
        "alpha": alpha, "D": D, "latent_seed": latent_seed, "noise_fraction": s2.noise_fraction,
        "parts": parts, "config_hash": config_hash,
    }))
    (d / "object.json").write_text(json.dumps(obj.to_json()))
    return {"seed": obj.seed, "archetype": obj.archetype, "parts": obj.num_parts,
            "bucket": bucket_of(obj.num_parts), "voxels": len(grid), "noise_fraction": s2.noise_fraction}


def generate_dataset(
    out: str | Path,
    sizes: dict[str, int] | None = None,
    resolution: int = 32,
    root_seed: int = 0,
    K: int = DEFAULT_K,
    alpha: float = DEFAULT_ALPHA,
    D: int = DEFAULT_D,
    part_count_range: tuple[int, int] = (2, MAX_PARTS),
    config_hash: str = "",
) -> dict:
    """Generate a corpus and write ``objects/<id>/...`` plus ``manifest.json``."""
    sizes = sizes or {"train": 512, "val": 64, "test": 64}
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    total = sum(sizes.values())
    gen_seed = derive_seed(root_seed, "datagen")
    latent_seed = derive_seed(root_seed, "latents")
    objects, counts = {}, []
    for i in range(total):
        oid = f"obj{i:05d}"
        obj, grid = generate_object(gen_seed + i, part_count_range, resolution)
        objects[oid] = write_object(root, oid, obj, grid, K, alpha, D, latent_seed, config_hash)
        counts.append((oid, obj.num_parts))
    names = list(sizes)
    ratios = [sizes[n] / total for n in names]
    splits = split_corpus(counts, ratios, derive_seed(root_seed, "split"), names)
    bucket_stats = {
        name: {f"{lo}-{hi}": sum(1 for o in ids if bucket_of(objects[o]["parts"]) == b)
               for b, (lo, hi) in enumerate(BUCKETS)}
        for name, ids in splits.items()
    }
    manifest = {
        "resolution": resolution, "K": K, "alpha": alpha, "D": D, "root_seed": root_seed,
        "latent_seed": latent_seed, "config_hash": config_hash, "splits": splits,
        "bucket_stats": bucket_stats, "objects": objects,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_manifest(root: str | Path) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def load_object(root: str | Path, oid: str) -> DatasetObject:
    d = Path(root) / "objects" / oid
    grid = SparseVoxelGrid.load(d / "voxels.json")
    boxes = [Aabb.from_json(b) for b in json.loads((d / "boxes.json").read_text())]
    mask = LabelMask2D.from_json(json.loads((d / "mask.json").read_text()))
    meta = json.loads((d / "object.json").read_text()) if (d / "object.json").exists() else {}
    return DatasetObject(oid, grid, boxes, mask, meta)
