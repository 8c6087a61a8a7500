from __future__ import annotations

import numpy as np
import pytest
import torch

from partvox.datagen import part_box_assignment
from partvox.diagnostics import run_grad_checks, toy_two_box_grid
from partvox.errors import DomainError, EmptyBoxWarning, MissingBox, PpeError
from partvox.latents import (
    PartLatentSet,
    PartTokens,
    build_targets,
    discard_voxels,
    inference_tokens,
    interpolate,
    merge_parts,
    retained,
    sigmoid,
)
from partvox.synth import (
    FlowBatch,
    FlowInputs,
    PartDenoiser,
    SynthConfig,
    SynthExample,
    cfm_from_velocity,
    denoiser_forward,
    downsample_groups,
    initial_noise,
    sample_parts,
    train_synthesizer,
    validity_accuracy,
)
from partvox.voxels import Aabb, SparseVoxelGrid, all_part_aabbs, voxels_in_box


def cube(lo, hi):
    return [(x, y, z) for x in range(lo[0], hi[0] + 1) for y in range(lo[1], hi[1] + 1) for z in range(lo[2], hi[2] + 1)]


def notched_pair() -> SparseVoxelGrid:
    """Part 0 is a 3^3 cube missing a 3-voxel column; part 1 fills that column and a second cube."""
    column = [(2, 2, z) for z in range(3)]
    a = [p for p in cube((0, 0, 0), (2, 2, 2)) if p not in column]
    b = column + cube((3, 0, 0), (5, 2, 2))
    return SparseVoxelGrid(8, np.array(a + b), np.array([0] * len(a) + [1] * len(b)))


def small_cfg(**over):
    base = dict(resolution=8, d=32, heads=4, blocks=2, max_parts=4, seed=0)
    base.update(over)
    return SynthConfig(**base)


# --------------------------------------------------------------------------- targets

def test_part_filling_its_box_is_all_valid():
    grid = SparseVoxelGrid(8, np.array(cube((1, 1, 1), (3, 2, 4))), np.zeros(24, np.int64))
    t = build_targets(grid, [all_part_aabbs(grid)[0]], [0])
    assert np.all(t.parts[0].validity == 1.0)


def test_box_overlap_gives_exactly_the_enumerated_noise_voxels():
    grid = notched_pair()
    boxes, assign = part_box_assignment(grid)
    t = build_targets(grid, boxes, assign, alpha=1.0)
    for part, box, pid in zip(t.parts, boxes, assign):
        expected = sum(1 for c, l in zip(grid.coords.tolist(), grid.labels) if l != pid and box.contains(np.array([c])).all())
        assert int((part.validity == -1.0).sum()) == expected
    assert int((t.parts[0].validity == -1.0).sum()) == 3
    assert set(np.unique(np.concatenate([p.validity for p in t.parts]))) <= {-1.0, 1.0}


def test_target_invariants():
    grid = toy_two_box_grid()
    boxes, assign = part_box_assignment(grid)
    t = build_targets(grid, boxes, assign, alpha=2.5, seed=3)
    assert np.array_equal(t.whole_coords, grid.coords)
    assert np.all(t.whole_latents[:, -1] == 2.5)
    for p in t.parts:
        assert p.box.contains(p.coords).all()
        assert p.latents.shape == (p.coords.shape[0], t.D + 1)
        noise = p.validity < 0
        assert np.all(p.latents[noise, :-1] == 0)
        in_box = {tuple(c) for c in voxels_in_box(grid, p.box).tolist()}
        assert {tuple(c) for c in p.coords.tolist()} == in_box
    with pytest.raises(MissingBox):
        build_targets(grid, boxes[:1], assign)


# --------------------------------------------------------------------------- interpolation and filtering

def test_interpolate_endpoints_are_exact():
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((50, 9)), rng.standard_normal((50, 9))
    assert np.array_equal(interpolate(x0, eps, 0.0), x0)
    assert np.array_equal(interpolate(x0, eps, 1.0), eps)
    tx0, teps = torch.as_tensor(x0), torch.as_tensor(eps)
    assert torch.equal(interpolate(tx0, teps, 0.0), tx0)
    assert torch.equal(interpolate(tx0, teps, 1.0), teps)
    assert interpolate(np.zeros(1), np.full(1, 2.0), 0.5)[0] == 1.0
    with pytest.raises(DomainError):
        interpolate(x0, eps, 1.5)


def test_beta_half_is_sign_threshold_on_a_million_values():
    rng = np.random.default_rng(1)
    f = np.concatenate([rng.standard_normal(999_990) * 5, [0.0, -0.0, 1e-300, -1e-300, 40, -40, 800, -800, 1e-9, -1e-9]])
    assert np.array_equal(retained(f, 0.5), f > 0)


def test_sigmoid_boundary_values():
    assert sigmoid(0.0) == 0.5 and not retained(np.array([0.0]))[0]
    assert sigmoid(1.0) == pytest.approx(0.7310585786, abs=1e-10)
    assert retained(np.array([1.0]))[0]


def layout_with(validities, coords_list):
    parts = [PartTokens(i + 1, Aabb((0, 0, 0), (7, 7, 7)), np.array(c), np.column_stack([np.zeros((len(v), 2)), v]))
             for i, (v, c) in enumerate(zip(validities, coords_list))]
    return PartLatentSet(np.zeros((0, 3), np.int64), np.zeros((0, 3)), parts, 2)


def test_discard_keeps_positive_validity():
    lay = layout_with([np.array([1.0, 0.0, -1.0])], [[(0, 0, 0), (1, 0, 0), (2, 0, 0)]])
    out = discard_voxels(lay, 0.5)
    assert out.parts[0].coords.tolist() == [[0, 0, 0]]
    with pytest.raises(DomainError):
        discard_voxels(lay, 1.0)


def test_merge_rules():
    logit = lambda p: float(np.log(p / (1 - p)))
    disjoint = layout_with([np.array([1.0]), np.array([1.0])], [[(0, 0, 0)], [(1, 1, 1)]])
    g = merge_parts(disjoint, 8)
    assert {tuple(c): int(l) for c, l in zip(g.coords.tolist(), g.labels)} == {(0, 0, 0): 0, (1, 1, 1): 1}
    contested = layout_with([np.array([logit(0.6)]), np.array([logit(0.9)])], [[(2, 2, 2)], [(2, 2, 2)]])
    assert merge_parts(contested, 8).labels.tolist() == [1]
    tie = layout_with([np.array([0.7]), np.array([0.7])], [[(2, 2, 2)], [(2, 2, 2)]])
    assert merge_parts(tie, 8).labels.tolist() == [0]
    gone = discard_voxels(layout_with([np.array([-1.0, -2.0])], [[(0, 0, 0), (1, 0, 0)]]))
    assert len(merge_parts(gone, 8)) == 0


# --------------------------------------------------------------------------- token layout

def test_ppe_assignment_and_audit():
    grid = toy_two_box_grid()
    boxes, assign = part_box_assignment(grid)
    t = build_targets(grid, boxes, assign)
    inp = FlowInputs.build(grid, t)
    n0 = len(grid)
    assert torch.all(inp.ppe[:n0] == 0) and torch.all(inp.ppe[n0:] > 0)
    assert sorted(set(inp.ppe.tolist())) == [0, 1, 2]
    bad = PartLatentSet(t.whole_coords, t.whole_latents, [PartTokens(2, p.box, p.coords, p.latents) for p in t.parts[:1]], t.D)
    with pytest.raises(PpeError):
        FlowInputs.build(grid, bad)


def test_downsample_groups_never_mix_parts():
    grid = notched_pair()
    boxes, assign = part_box_assignment(grid)
    inp = FlowInputs.build(grid, build_targets(grid, boxes, assign))
    coarse = inp.coarse_index.numpy()
    for g in np.unique(coarse):
        members = coarse == g
        assert len(set(inp.ppe[members].tolist())) == 1
        assert len({tuple(c) for c in (inp.coords[members].numpy() // 2).tolist()}) == 1
        assert inp.coarse_ppe[g] == inp.ppe[members][0]
    idx, cc, cp = downsample_groups(np.array([[0, 0, 0], [1, 1, 1], [0, 0, 0]]), np.array([0, 0, 1]))
    assert idx.tolist() == [0, 0, 1] and cp.tolist() == [0, 1]


# --------------------------------------------------------------------------- model

def toy_model(seed=0):
    return PartDenoiser(small_cfg(seed=seed)).double()


def toy_inputs():
    grid = toy_two_box_grid()
    boxes, assign = part_box_assignment(grid)
    return grid, boxes, build_targets(grid, boxes, assign)


def test_output_shape_matches_latents():
    grid, _, t = toy_inputs()
    model = toy_model()
    x = torch.randn(t.num_tokens, 9, dtype=torch.float64)
    assert denoiser_forward(model, x, 0.3, FlowInputs.build(grid, t)).shape == x.shape


def test_cfm_hand_values():
    x0 = torch.zeros(4, 3, dtype=torch.float64)
    eps = torch.ones(4, 3, dtype=torch.float64)
    assert cfm_from_velocity(eps - x0, x0, eps).item() == 0.0
    assert cfm_from_velocity(torch.zeros_like(x0), x0, eps).item() == 1.0


def test_cfm_passes_grad_check():
    assert run_grad_checks(samples=40)["loss_cfm"].passed


def test_single_euler_step_closed_form():
    grid, boxes, _ = toy_inputs()
    model = toy_model()
    out = sample_parts(model, boxes, grid, steps=1, seed=4)
    layout, _ = inference_tokens(grid, boxes, 8)
    inp = FlowInputs.build(grid, layout)
    x1 = initial_noise(inp.num_tokens, 9, 4, torch.float64)
    with torch.no_grad():
        expected = x1 - model(x1, 1.0, inp)
    assert np.allclose(np.concatenate([out.whole_latents] + [p.latents for p in out.parts]), expected.numpy(), atol=1e-12)


def test_sampling_is_joint_deterministic_and_inside_boxes():
    grid, boxes, _ = toy_inputs()
    model = toy_model()
    model.forward_calls = 0
    a = sample_parts(model, boxes, grid, steps=7, seed=11)
    assert model.forward_calls == 7
    b = sample_parts(model, boxes, grid, steps=7, seed=11)
    assert np.array_equal(a.stacked_latents(), b.stacked_latents())
    kept = discard_voxels(a)
    for p, box in zip(kept.parts, boxes):
        assert box.contains(p.coords).all()
        in_box = {tuple(c) for c in voxels_in_box(grid, box).tolist()}
        assert {tuple(c) for c in p.coords.tolist()} <= in_box


def test_empty_box_is_skipped_with_warning():
    grid, boxes, _ = toy_inputs()
    with pytest.warns(EmptyBoxWarning):
        out = sample_parts(toy_model(), boxes + [Aabb((7, 7, 7), (7, 7, 7))], grid, steps=2)
    assert len(out.parts) == 2


def test_batch_matches_individual_forward():
    grid, _, t = toy_inputs()
    small = SparseVoxelGrid(8, np.array(cube((0, 0, 0), (1, 1, 1))), np.zeros(8, np.int64))
    ts = build_targets(small, [Aabb((0, 0, 0), (1, 1, 1))], [0])
    model = toy_model()
    items = [FlowInputs.build(grid, t), FlowInputs.build(small, ts)]
    x = torch.randn(sum(i.num_tokens for i in items), 9, dtype=torch.float64)
    with torch.no_grad():
        joint = model(x, torch.tensor([0.2, 0.7], dtype=torch.float64), FlowBatch.of(items))
        first = model(x[: items[0].num_tokens], 0.2, items[0])
        second = model(x[items[0].num_tokens:], 0.7, items[1])
    assert torch.allclose(joint, torch.cat([first, second]), atol=1e-10)


@pytest.fixture(scope="module")
def overfit_toy():
    grid = notched_pair()
    boxes, assign = part_box_assignment(grid)
    targets = build_targets(grid, boxes, assign)
    cfg = small_cfg(lr=3e-3, warmup=20, batch=1)
    model, hist = train_synthesizer(cfg, [SynthExample.build(grid, targets)], steps=400)
    return grid, boxes, targets, model, hist


def test_overfit_toy_recovers_validity(overfit_toy):
    grid, boxes, targets, model, hist = overfit_toy
    assert np.mean([h["loss"] for h in hist[-20:]]) < np.mean([h["loss"] for h in hist[:20]])
    gen = sample_parts(model, boxes, grid, steps=25, seed=0)
    assert validity_accuracy([gen], [targets]) >= 0.95


def test_swapping_ppe_changes_trained_output(overfit_toy):
    grid, boxes, targets, model, _ = overfit_toy
    inp = FlowInputs.build(grid, targets)
    swapped = FlowInputs.build(grid, PartLatentSet(
        targets.whole_coords, targets.whole_latents,
        [PartTokens(3 - p.index, p.box, p.coords, p.latents) for p in targets.parts], targets.D))
    x = initial_noise(inp.num_tokens, 9, 0)
    with torch.no_grad():
        assert not torch.allclose(model(x, 0.5, inp), model(x, 0.5, swapped))


def test_config_round_trip():
    cfg = SynthConfig()
    assert SynthConfig.from_json(cfg.to_json()) == cfg
    assert PartDenoiser(cfg).num_params == 238_409
