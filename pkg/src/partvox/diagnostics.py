"""Small float64 problems for checking every training loss against finite differences."""
from __future__ import annotations

import numpy as np
import torch

from .boxcodec import canonicalize, tokenize
from .latents import build_targets
from .numerics import GradCheckReport, grad_check
from .planner import (
    PlannerConfig,
    PlannerInput,
    PlannerModel,
    collate_sequences,
    loss_base,
    loss_coverage,
    loss_total,
    teacher_forced_logits,
)
from .synth import FlowInputs, PartDenoiser, SynthConfig, loss_cfm
from .voxels import Aabb, SparseVoxelGrid, all_part_aabbs, project_mask


def toy_two_box_grid(resolution: int = 8) -> SparseVoxelGrid:
    """Two touching labeled blocks; their boxes overlap by one voxel layer."""
    a = [(x, y, z) for x in range(1, 4) for y in range(2, 4) for z in range(1, 3)]
    b = [(x, y, z) for x in range(3, 6) for y in range(2, 5) for z in range(3, 5)]
    coords = a + [p for p in b if p not in set(a)]
    labels = [0] * len(a) + [1] * (len(coords) - len(a))
    return SparseVoxelGrid(resolution, np.array(coords), np.array(labels))


def planner_toy(seed: int = 0):
    """A tiny float64 planner plus the prefix inputs and tokens of a 2-box example."""
    grid = toy_two_box_grid()
    cfg = PlannerConfig(resolution=8, K=4, d=16, heads=2, blocks=1, L=2, patch=4, max_boxes=3, seed=seed)
    model = PlannerModel(cfg).double()
    boxes = canonicalize(list(all_part_aabbs(grid).values()))
    inputs = [PlannerInput.from_grid(grid, project_mask(grid, K=cfg.K))]
    tokens = collate_sequences([tokenize(boxes, cfg.resolution)])
    return model, inputs, tokens


def synth_toy(seed: int = 0):
    """A tiny float64 denoiser with one 10-voxel part, plus a fixed ``(x0, eps, t)``."""
    coords = np.array([(x, y, 3) for x in range(2, 7) for y in range(2, 4)])
    grid = SparseVoxelGrid(8, coords, np.zeros(len(coords), np.int64))
    box = Aabb(tuple(coords.min(0)), tuple(coords.max(0)))
    targets = build_targets(grid, [box], [0], seed=seed)
    cfg = SynthConfig(resolution=8, d=16, heads=2, blocks=1, max_parts=4, seed=seed)
    model = PartDenoiser(cfg).double()
    inputs = FlowInputs.build(grid, targets)
    x0 = torch.as_tensor(targets.stacked_latents(), dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed + 7)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    return model, inputs, x0, eps, 0.37


def run_grad_checks(samples: int = 200, tolerance: float = 1e-4, seed: int = 0,
                    epsilon: float = 1e-5) -> dict[str, GradCheckReport]:
    torch.manual_seed(seed)
    model, inputs, tokens = planner_toy(seed)

    def logits():
        return teacher_forced_logits(model, model.prefix_for(inputs), tokens)

    def base():
        return loss_base(logits(), tokens)

    def coverage():
        return loss_coverage(logits(), None, tokens)

    def total():
        lg = logits()
        return loss_total(loss_base(lg, tokens), loss_coverage(lg, None, tokens), 0.1)

    smodel, sinputs, x0, eps, t = synth_toy(seed)

    def cfm():
        return loss_cfm(smodel, x0, eps, t, sinputs)

    reports = {}
    for name, fn, mod in (("loss_base", base, model), ("loss_coverage", coverage, model),
                          ("loss_total", total, model), ("loss_cfm", cfm, smodel)):
        reports[name] = grad_check(fn, mod, epsilon=epsilon, tolerance=tolerance, samples=samples, seed=seed)
    return reports
