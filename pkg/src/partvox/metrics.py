"""Box-level, voxel-level and point-set metrics for evaluating part-aware generation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import DegenerateShape, EmptyInput, EmptyPart
from .voxels import Aabb, SparseVoxelGrid, all_part_aabbs, box_member_indices

DEFAULT_TAUS = (0.1, 0.05)
DEFAULT_PENALTY = 1.0


# --------------------------------------------------------------------------- boxes

def bbox_iou(a: Aabb, b: Aabb) -> float:
    """IoU of the voxel index ranges covered by two inclusive boxes."""
    lo = np.maximum(a.min, b.min)
    hi = np.minimum(a.max, b.max)
    inter = int(np.prod(np.clip(hi - lo + 1, 0, None)))
    union = a.volume + b.volume - inter
    return inter / union


def iou_matrix(gt: Sequence[Aabb], pred: Sequence[Aabb]) -> np.ndarray:
    out = np.zeros((len(gt), len(pred)))
    for i, g in enumerate(gt):
        for j, p in enumerate(pred):
            out[i, j] = bbox_iou(g, p)
    return out


@dataclass
class Matching:
    pairs: list[tuple[int, int]]
    unmatched_gt: list[int]
    unmatched_pred: list[int]

    def pred_for(self, gt_index: int) -> int | None:
        for g, p in self.pairs:
            if g == gt_index:
                return p
        return None


def _mutual_nearest(gt: Sequence[Aabb], pred: Sequence[Aabb], gi: list[int], pi: list[int]) -> list[tuple[int, int]]:
    """Repeatedly pair leftover boxes whose centres are mutually nearest."""
    pairs = []
    gi, pi = list(gi), list(pi)
    while gi and pi:
        gc = np.array([gt[i].center for i in gi])
        pc = np.array([pred[j].center for j in pi])
        d = cdist(gc, pc)
        best_p = d.argmin(axis=1)
        best_g = d.argmin(axis=0)
        found = [(a, int(best_p[a])) for a in range(len(gi)) if best_g[best_p[a]] == a]
        if not found:
            break
        for a, b in found:
            pairs.append((gi[a], pi[b]))
        taken_g = {a for a, _ in found}
        taken_p = {b for _, b in found}
        gi = [g for a, g in enumerate(gi) if a not in taken_g]
        pi = [p for b, p in enumerate(pi) if b not in taken_p]
    return pairs


def match_boxes(gt: Sequence[Aabb], pred: Sequence[Aabb]) -> Matching:
    """One-to-one matching maximizing total IoU; zero-IoU leftovers pair only if mutually nearest."""
    pairs: list[tuple[int, int]] = []
    if gt and pred:
        iou = iou_matrix(gt, pred)
        rows, cols = linear_sum_assignment(-iou)
        pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if iou[r, c] > 0]
    used_g = {g for g, _ in pairs}
    used_p = {p for _, p in pairs}
    left_g = [i for i in range(len(gt)) if i not in used_g]
    left_p = [j for j in range(len(pred)) if j not in used_p]
    pairs += _mutual_nearest(gt, pred, left_g, left_p)
    pairs.sort()
    used_g = {g for g, _ in pairs}
    used_p = {p for _, p in pairs}
    return Matching(pairs,
                    [i for i in range(len(gt)) if i not in used_g],
                    [j for j in range(len(pred)) if j not in used_p])


def voxel_recall(gt_voxels: np.ndarray, box: Aabb | None) -> float:
    """Fraction of a ground-truth part's voxels that lie inside ``box`` (0 when unmatched)."""
    gt_voxels = np.asarray(gt_voxels).reshape(-1, 3)
    if gt_voxels.shape[0] == 0:
        raise EmptyPart("ground-truth part has no voxels")
    if box is None:
        return 0.0
    return float(box.contains(gt_voxels).mean())


def voxel_iou(grid: SparseVoxelGrid, gt_box: Aabb, pred_box: Aabb | None) -> float:
    """IoU of the active voxels captured by two boxes; empty against empty counts as 0."""
    a = box_member_indices(grid, gt_box)
    if pred_box is None:
        return 0.0
    b = box_member_indices(grid, pred_box)
    union = np.union1d(a, b).size
    if union == 0:
        return 0.0
    return np.intersect1d(a, b).size / union


def plan_metrics(grid: SparseVoxelGrid, pred: Sequence[Aabb]) -> dict:
    """Per-object planning scores (percent) averaged over ground-truth parts."""
    boxes = all_part_aabbs(grid)
    pids = sorted(boxes)
    gt = [boxes[p] for p in pids]
    m = match_boxes(gt, list(pred))
    ious, recalls, vious = [], [], []
    for i, pid in enumerate(pids):
        j = m.pred_for(i)
        pb = None if j is None else pred[j]
        ious.append(0.0 if pb is None else bbox_iou(gt[i], pb))
        recalls.append(voxel_recall(grid.part_coords(pid), pb))
        vious.append(voxel_iou(grid, gt[i], pb))
    return {
        "bbox_iou": 100.0 * float(np.mean(ious)),
        "voxel_recall": 100.0 * float(np.mean(recalls)),
        "voxel_iou": 100.0 * float(np.mean(vious)),
        "gt_boxes": len(gt),
        "pred_boxes": len(pred),
        "matched": len(m.pairs),
    }


# --------------------------------------------------------------------------- point sets

def normalize_points(points: np.ndarray, return_transform: bool = False):
    """Centre on the bounding-box midpoint and scale the longest edge to exactly 1."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if p.shape[0] == 0:
        raise EmptyInput("cannot normalize an empty point set")
    lo, hi = p.min(axis=0), p.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise DegenerateShape("point set has zero extent")
    center = (lo + hi) / 2.0
    out = (p - center) / extent
    return (out, center, extent) if return_transform else out


def nn_distances(a: np.ndarray, b: np.ndarray, oracle: bool = False) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest neighbour in ``b``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyInput("nearest-neighbour query on an empty point set")
    if oracle:
        out = np.empty(a.shape[0])
        for s in range(0, a.shape[0], 1024):
            out[s:s + 1024] = cdist(a[s:s + 1024], b).min(axis=1)
        return out
    d, _ = cKDTree(b).query(a, k=1)
    return d


def chamfer(p: np.ndarray, q: np.ndarray, oracle: bool = False) -> float:
    """Symmetric mean nearest-neighbour distance (unsquared)."""
    return 0.5 * (float(nn_distances(p, q, oracle).mean()) + float(nn_distances(q, p, oracle).mean()))


def f1_at(pred: np.ndarray, gt: np.ndarray, tau: float, oracle: bool = False) -> float:
    if tau <= 0:
        raise ValueError("tau must be positive")
    precision = float((nn_distances(pred, gt, oracle) < tau).mean())
    recall = float((nn_distances(gt, pred, oracle) < tau).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def rotate_z(points: np.ndarray, k: int) -> np.ndarray:
    """Rotate by ``k * 90`` degrees about the z axis; exact (sign flips and swaps only)."""
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    k %= 4
    if k == 0:
        return p.copy()
    if k == 1:
        return np.stack([-y, x, z], axis=-1)
    if k == 2:
        return np.stack([-x, -y, z], axis=-1)
    return np.stack([y, -x, z], axis=-1)


def best_over_rotations(metric_fn: Callable[[np.ndarray, np.ndarray], float], pred: np.ndarray, gt: np.ndarray,
                        mode: str = "min") -> tuple[float, int]:
    """Best metric over quarter turns of ``pred`` about z; ties go to the smaller turn."""
    if mode not in ("min", "max"):
        raise ValueError("mode must be 'min' or 'max'")
    values = [metric_fn(rotate_z(pred, k), gt) for k in range(4)]
    k = int(np.argmin(values) if mode == "min" else np.argmax(values))
    return float(values[k]), k


# --------------------------------------------------------------------------- objects

def grid_iou(a: SparseVoxelGrid, b: SparseVoxelGrid) -> float:
    """Whole-object voxel IoU of two active sets (0 when both are empty)."""
    union = np.union1d(a.keys, b.keys).size
    if union == 0:
        return 0.0
    return np.intersect1d(a.keys, b.keys).size / union


def voxel_centers(grid: SparseVoxelGrid) -> np.ndarray:
    return (grid.coords + 0.5) / grid.resolution - 0.5


@dataclass
class EvalConfig:
    taus: tuple[float, float] = DEFAULT_TAUS
    penalty: float = DEFAULT_PENALTY
    oracle: bool = False


@dataclass
class ObjectEval:
    cd: float
    f1_loose: float
    f1_tight: float
    rotation: int
    part_cd: float
    part_f1_loose: float
    part_f1_tight: float
    voxel_iou_whole: float
    gt_parts: int
    pred_parts: int
    empty_prediction: bool = False


def evaluate_object(pred: SparseVoxelGrid, gt: SparseVoxelGrid, config: EvalConfig | None = None) -> ObjectEval:
    """Whole-object and part-level CD/F1 on normalized voxel centres with a quarter-turn sweep."""
    cfg = config or EvalConfig()
    loose, tight = cfg.taus
    gt_ids = gt.part_ids() if gt.labels is not None else [0]
    if not len(pred):
        return ObjectEval(cfg.penalty, 0.0, 0.0, 0, cfg.penalty, 0.0, 0.0, 0.0, len(gt_ids), 0, True)
    gt_pts, g_c, g_s = normalize_points(voxel_centers(gt), True)
    try:
        pred_pts, p_c, p_s = normalize_points(voxel_centers(pred), True)
    except DegenerateShape:
        pred_pts, p_c, p_s = voxel_centers(pred) - voxel_centers(pred).mean(0), np.zeros(3), 1.0
    cd, k = best_over_rotations(lambda a, b: chamfer(a, b, cfg.oracle), pred_pts, gt_pts, "min")
    f_loose, _ = best_over_rotations(lambda a, b: f1_at(a, b, loose, cfg.oracle), pred_pts, gt_pts, "max")
    f_tight, _ = best_over_rotations(lambda a, b: f1_at(a, b, tight, cfg.oracle), pred_pts, gt_pts, "max")

    rotated = rotate_z(pred_pts, k)
    gt_lab = gt.labels if gt.labels is not None else np.zeros(len(gt), np.int64)
    pr_lab = pred.labels if pred.labels is not None else np.zeros(len(pred), np.int64)
    gt_parts = [gt_pts[gt_lab == i] for i in gt_ids]
    pred_ids = sorted(set(pr_lab.tolist()))
    pred_parts = [rotated[pr_lab == i] for i in pred_ids]
    cost = np.array([[chamfer(p, g, cfg.oracle) for p in pred_parts] for g in gt_parts])
    part = match_parts(cost)
    cds, fl, ft = [], [], []
    for gi, g in enumerate(gt_parts):
        pj = part.get(gi)
        if pj is None:
            cds.append(cfg.penalty)
            fl.append(0.0)
            ft.append(0.0)
            continue
        p = pred_parts[pj]
        cds.append(cost[gi, pj])
        fl.append(f1_at(p, g, loose, cfg.oracle))
        ft.append(f1_at(p, g, tight, cfg.oracle))
    return ObjectEval(cd, f_loose, f_tight, k, float(np.mean(cds)), float(np.mean(fl)), float(np.mean(ft)),
                      grid_iou(pred, gt), len(gt_ids), len(pred_ids))


def match_parts(cost: np.ndarray) -> dict[int, int]:
    """Minimum-total-cost one-to-one matching of gt rows to pred columns."""
    if cost.size == 0:
        return {}
    rows, cols = linear_sum_assignment(cost)
    return {int(r): int(c) for r, c in zip(rows, cols)}


# --------------------------------------------------------------------------- reports

def _clean(x):
    if isinstance(x, float):
        return round(x, 10) if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


@dataclass
class EvalReport:
    objects: dict[str, dict] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)
    header: dict = field(default_factory=dict)

    def add(self, oid: str, plan: dict | None = None, geometry: ObjectEval | None = None) -> None:
        entry = {}
        if plan is not None:
            entry.update(plan)
        if geometry is not None:
            entry.update(asdict(geometry))
        self.objects[oid] = entry

    def aggregate(self) -> dict:
        keys = ("bbox_iou", "voxel_recall", "voxel_iou", "cd", "f1_loose", "f1_tight",
                "part_cd", "part_f1_loose", "part_f1_tight", "voxel_iou_whole")
        agg = {}
        for k in keys:
            vals = [o[k] for _, o in sorted(self.objects.items()) if k in o]
            if vals:
                agg[k] = float(np.mean(vals))
        agg["evaluated"] = len(self.objects)
        agg["failed"] = len(self.failed)
        return agg

    def to_json(self) -> dict:
        return _clean({"header": self.header, "aggregate": self.aggregate(),
                       "objects": dict(sorted(self.objects.items())), "failed": dict(sorted(self.failed.items()))})

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"
