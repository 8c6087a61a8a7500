"""Rectified-flow synthesis of per-part voxel latents.

All part token sets and the whole-shape tokens are denoised together in one sequence.
Each group is pooled 2x spatially on its own (pooling never mixes groups), the coarse
tokens go through non-causal transformer blocks, and the result is gathered back to the
fine voxels, where a per-voxel head predicts the velocity for all ``D + 1`` channels.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyBoxWarning, EmptyInput, PpeError, ShapeError
from .latents import (
    _NEIGHBORS,
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_D,
    PartLatentSet,
    inference_tokens,
    interpolate,
)
from .numerics import Adam, TransformerBlock, check_finite, count_params, seeded_init, sinusoidal
from .voxels import Aabb, SparseVoxelGrid

N_FEATURES = 16
POOL = 2


@dataclass
class SynthConfig:
    resolution: int = 32
    D: int = DEFAULT_D
    d: int = 64
    heads: int = 4
    blocks: int = 4
    max_parts: int = 63
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    sample_steps: int = 25
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 4
    warmup: int = 100
    seed: int = 0
    latent_seed: int = 0

    @property
    def channels(self) -> int:
        return self.D + 1

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        names = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in obj.items() if k in names})


# --------------------------------------------------------------------------- token layout

def layout_features(grid: SparseVoxelGrid, layout: PartLatentSet) -> np.ndarray:
    """Static per-token conditioning derived from the voxels and the box layout.

    Part tokens see their box-relative position, the box size, how many boxes claim the
    voxel, how deep it sits in its own and in competing boxes, and neighbourhood counts.
    Whole-shape tokens only carry the box count, neighbour count and a flag.
    """
    c = grid.coords
    boxes = np.array([p.box.as_array() for p in layout.parts], dtype=np.int64).reshape(-1, 6)
    lo, hi = boxes[:, :3], boxes[:, 3:]
    size = hi - lo + 1
    inside = np.all((c[:, None, :] >= lo[None]) & (c[:, None, :] <= hi[None]), axis=-1)
    count = inside.sum(1)
    face = np.minimum(c[:, None, :] - lo[None], hi[None] - c[:, None, :]).min(-1)
    log_vol = np.log(size.prod(1)) if len(boxes) else np.zeros(0)

    nb = c[:, None, :] + _NEIGHBORS[None]
    nb_rows = grid.lookup(nb.reshape(-1, 3)).reshape(len(grid), 26)
    present = nb_rows >= 0

    out = [np.zeros((len(grid), N_FEATURES))]
    out[0][:, 0] = count / 4.0
    out[0][:, 12] = present.sum(1) / 26.0
    out[0][:, 15] = 1.0
    for k, part in enumerate(layout.parts):
        rows = grid.lookup(part.coords)
        if np.any(rows < 0):
            raise EmptyInput(f"part {part.index} has voxels outside the grid")
        f = np.zeros((rows.size, N_FEATURES))
        rel = (part.coords - lo[k] + 0.5) / size[k] * 2.0 - 1.0
        other = inside[rows].copy()
        other[:, k] = False
        f[:, 0] = count[rows] / 4.0
        f[:, 1:4] = rel
        f[:, 4:7] = np.log(size[k]) / 3.0
        f[:, 7] = face[rows, k] / 8.0
        f[:, 8] = np.where(other, face[rows], -1).max(1) / 8.0
        f[:, 9] = np.where(other, face[rows] / np.maximum(size.min(1), 1)[None], -1).max(1)
        f[:, 10] = (np.where(other, log_vol[None], log_vol[k]).max(1) - log_vol[k]) / 5.0
        f[:, 11] = np.abs(rel).max(1)
        in_box = np.all((nb[rows] >= lo[k]) & (nb[rows] <= hi[k]), axis=-1) & present[rows]
        certain = in_box & (count[np.maximum(nb_rows[rows], 0)] == 1)
        f[:, 12] = present[rows].sum(1) / 26.0
        f[:, 13] = in_box.sum(1) / 26.0
        f[:, 14] = certain.sum(1) / 26.0
        out.append(f)
    return np.concatenate(out, axis=0)


@dataclass
class FlowInputs:
    """Model-independent tensors describing one object's token sequence."""

    coords: torch.Tensor          # (n, 3) fine voxel positions, whole shape first
    ppe: torch.Tensor             # (n,) part-position-embedding index
    feats: torch.Tensor           # (n, N_FEATURES)
    coarse_index: torch.Tensor    # (n,) coarse token owning each fine token
    coarse_coords: torch.Tensor   # (m, 3)
    coarse_ppe: torch.Tensor      # (m,)
    resolution: int

    @property
    def num_tokens(self) -> int:
        return int(self.coords.shape[0])

    @property
    def num_coarse(self) -> int:
        return int(self.coarse_coords.shape[0])

    @classmethod
    def build(cls, grid: SparseVoxelGrid, layout: PartLatentSet) -> "FlowInputs":
        layout.check_ppe()
        if not len(grid):
            raise EmptyInput("cannot synthesize parts of an empty grid")
        if layout.whole_coords.shape[0] != len(grid):
            raise PpeError("whole-shape tokens must cover the grid's active voxels")
        coords = np.concatenate([layout.whole_coords] + [p.coords for p in layout.parts]).astype(np.int64)
        ppe = layout.ppe_indices()
        coarse_index, coarse_coords, coarse_ppe = downsample_groups(coords, ppe)
        return cls(
            torch.as_tensor(coords),
            torch.as_tensor(ppe),
            torch.as_tensor(layout_features(grid, layout), dtype=torch.float32),
            torch.as_tensor(coarse_index),
            torch.as_tensor(coarse_coords),
            torch.as_tensor(coarse_ppe),
            grid.resolution,
        )


def downsample_groups(coords: np.ndarray, ppe: np.ndarray, factor: int = POOL):
    """Coarse cells keyed by ``(group, coords // factor)``; cells never span two groups.

    Returns the per-token coarse index plus coarse coordinates and group indices, ordered
    by group so whole-shape cells come first.
    """
    cells = coords // factor
    keys = np.column_stack([ppe, cells])
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    return inverse.reshape(-1).astype(np.int64), uniq[:, 1:].astype(np.int64), uniq[:, 0].astype(np.int64)


@dataclass
class FlowBatch:
    """Several objects flattened into one fine token list and a padded coarse batch."""

    items: list[FlowInputs]
    fine_batch: torch.Tensor      # (n_total,) object index of each fine token
    coarse_flat: torch.Tensor     # (n_total,) index into the flattened (B * M) coarse grid
    coarse_valid: torch.Tensor    # (B, M)
    width: int

    @classmethod
    def of(cls, items: Sequence[FlowInputs]) -> "FlowBatch":
        items = list(items)
        width = max(x.num_coarse for x in items)
        fine_batch = torch.cat([torch.full((x.num_tokens,), i, dtype=torch.long) for i, x in enumerate(items)])
        coarse_flat = torch.cat([x.coarse_index + i * width for i, x in enumerate(items)])
        valid = torch.zeros(len(items), width, dtype=torch.bool)
        for i, x in enumerate(items):
            valid[i, : x.num_coarse] = True
        return cls(items, fine_batch, coarse_flat, valid, width)

    @property
    def sizes(self) -> list[int]:
        return [x.num_tokens for x in self.items]


# --------------------------------------------------------------------------- model

def _position_features(coords: torch.Tensor, extent: float, dtype) -> torch.Tensor:
    pos = (coords.to(dtype) + 0.5) / extent * 2.0 - 1.0
    return sinusoidal(pos, 16, max_period=8.0).flatten(-2)


class PartDenoiser(nn.Module):
    """Velocity model over the joint whole-shape + parts token sequence."""

    def __init__(self, cfg: SynthConfig):
        super().__init__()
        self.cfg = cfg
        d, c = cfg.d, cfg.channels
        self.in_proj = nn.Linear(c, d)
        self.feat_proj = nn.Linear(N_FEATURES, d)
        self.pos_fine = nn.Linear(48, d)
        self.pos_coarse = nn.Linear(48, d)
        self.ppe = nn.Embedding(cfg.max_parts + 1, d)
        self.time1 = nn.Linear(d, d)
        self.time2 = nn.Linear(d, d)
        self.down = nn.Linear(d, d)
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.heads) for _ in range(cfg.blocks))
        self.norm_coarse = nn.LayerNorm(d)
        self.up = nn.Linear(d, d)
        self.norm_fine = nn.LayerNorm(d)
        self.head1 = nn.Linear(d, 2 * d)
        self.head2 = nn.Linear(2 * d, c)
        seeded_init(self, cfg.seed)
        self.forward_calls = 0

    @property
    def num_params(self) -> int:
        return count_params(self)

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        emb = sinusoidal(t * 100.0, self.cfg.d, max_period=1000.0)
        return self.time2(F.gelu(self.time1(emb)))

    def forward(self, x: torch.Tensor, t, batch: FlowBatch | FlowInputs) -> torch.Tensor:
        """Velocity ``(n_total, D + 1)`` for latents ``x`` at times ``t`` (scalar or one per object)."""
        if isinstance(batch, FlowInputs):
            batch = FlowBatch.of([batch])
        self.forward_calls += 1
        dtype = self.in_proj.weight.dtype
        n_total = sum(batch.sizes)
        if x.shape != (n_total, self.cfg.channels):
            raise ShapeError(f"latents {tuple(x.shape)} != ({n_total}, {self.cfg.channels})")
        b = len(batch.items)
        t = torch.as_tensor(t, dtype=dtype).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        if t.numel() != b:
            raise ShapeError("need one time value per object")
        te = self.time_embedding(t)                                          # (B, d)

        coords = torch.cat([it.coords for it in batch.items])
        ppe = torch.cat([it.ppe for it in batch.items])
        if int(ppe.max()) > self.cfg.max_parts:
            raise PpeError(f"PPE index {int(ppe.max())} exceeds the table size {self.cfg.max_parts}")
        feats = torch.cat([it.feats for it in batch.items]).to(dtype)
        extent = float(batch.items[0].resolution)
        fine = (self.in_proj(x) + self.feat_proj(feats) + self.pos_fine(_position_features(coords, extent, dtype))
                + self.ppe(ppe) + te[batch.fine_batch])

        # part-aware pooling: average fine tokens sharing (group, coarse cell)
        flat = b * batch.width
        sums = torch.zeros(flat, fine.shape[-1], dtype=dtype).index_add(0, batch.coarse_flat, fine)
        counts = torch.zeros(flat, dtype=dtype).index_add(0, batch.coarse_flat, torch.ones(n_total, dtype=dtype))
        pooled = (sums / counts.clamp(min=1)[:, None]).reshape(b, batch.width, -1)
        cc = torch.zeros(b, batch.width, 3, dtype=torch.long)
        cp = torch.zeros(b, batch.width, dtype=torch.long)
        for i, it in enumerate(batch.items):
            cc[i, : it.num_coarse] = it.coarse_coords
            cp[i, : it.num_coarse] = it.coarse_ppe
        h = (self.down(pooled) + self.pos_coarse(_position_features(cc, extent / POOL, dtype))
             + self.ppe(cp) + te[:, None, :])
        mask = batch.coarse_valid[:, None, :] if b > 1 else None
        for blk in self.blocks:
            h = blk(h, mask=mask)
        h = self.norm_coarse(h).reshape(flat, -1)

        y = fine + self.up(h[batch.coarse_flat])
        return check_finite(self.head2(F.gelu(self.head1(self.norm_fine(y)))), "denoiser output")


def denoiser_forward(model: PartDenoiser, x: torch.Tensor, t, inputs: FlowInputs | FlowBatch) -> torch.Tensor:
    return model(x, t, inputs)


# --------------------------------------------------------------------------- objective and sampling

def flow_target(x0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return eps - x0


def loss_cfm(model: PartDenoiser, x0: torch.Tensor, eps: torch.Tensor, t, batch: FlowBatch | FlowInputs) -> torch.Tensor:
    """Mean squared error between the predicted velocity at ``x(t)`` and ``eps - x0``."""
    if isinstance(batch, FlowInputs):
        batch = FlowBatch.of([batch])
    dtype = x0.dtype
    tt = torch.as_tensor(t, dtype=dtype).reshape(-1)
    if tt.numel() == 1:
        tt = tt.expand(len(batch.items))
    per_token_t = tt[batch.fine_batch][:, None]
    xt = interpolate(x0, eps, per_token_t)
    v = model(xt, tt, batch)
    return ((v - flow_target(x0, eps)) ** 2).mean()


def cfm_from_velocity(v: torch.Tensor, x0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return ((v - flow_target(x0, eps)) ** 2).mean()


def initial_noise(n: int, channels: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(n, channels, generator=gen, dtype=torch.float64).to(dtype)


@torch.no_grad()
def integrate(model: PartDenoiser, batch: FlowBatch | FlowInputs, x: torch.Tensor, steps: int) -> torch.Tensor:
    """Fixed-step Euler integration of ``dx/dt = -v`` from ``t = 1`` to ``t = 0``."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        x = x - dt * model(x, t, batch)
    return x


@torch.no_grad()
def sample_parts(
    model: PartDenoiser,
    boxes: Sequence[Aabb],
    grid: SparseVoxelGrid,
    steps: int | None = None,
    seed: int = 0,
) -> PartLatentSet:
    """Generate latents for every non-empty box jointly; empty boxes are skipped with a warning."""
    layout, skipped = inference_tokens(grid, boxes, model.cfg.D)
    for i in skipped:
        warnings.warn(EmptyBoxWarning(f"box {i} holds no active voxels; skipped"))
    return sample_layouts(model, [(grid, layout)], steps, [seed])[0]


@torch.no_grad()
def sample_layouts(
    model: PartDenoiser,
    items: Sequence[tuple[SparseVoxelGrid, PartLatentSet]],
    steps: int | None = None,
    seeds: Sequence[int] | None = None,
    inputs: Sequence[FlowInputs] | None = None,
) -> list[PartLatentSet]:
    """Batched joint sampling; each object's noise comes from its own seed."""
    model.eval()
    steps = model.cfg.sample_steps if steps is None else steps
    seeds = list(range(len(items))) if seeds is None else list(seeds)
    inputs = [FlowInputs.build(g, lay) for g, lay in items] if inputs is None else list(inputs)
    dtype = model.in_proj.weight.dtype
    batch = FlowBatch.of(inputs)
    x = torch.cat([initial_noise(it.num_tokens, model.cfg.channels, s, dtype) for it, s in zip(inputs, seeds)])
    x = integrate(model, batch, x, steps)
    out, start = [], 0
    for (_, lay), n in zip(items, batch.sizes):
        out.append(lay.with_latents(x[start:start + n].double().numpy()))
        start += n
    return out


# --------------------------------------------------------------------------- training

@dataclass
class SynthExample:
    inputs: FlowInputs
    x0: torch.Tensor
    targets: PartLatentSet

    @classmethod
    def build(cls, grid: SparseVoxelGrid, targets: PartLatentSet) -> "SynthExample":
        return cls(FlowInputs.build(grid, targets), torch.as_tensor(targets.stacked_latents(), dtype=torch.float32),
                   targets)


def _lr(step: int, cfg: SynthConfig, total: int) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = min((step - cfg.warmup) / max(total - cfg.warmup, 1), 1.0)
    return cfg.lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * frac)))


def train_synthesizer(
    cfg: SynthConfig,
    examples: Sequence[SynthExample],
    steps: int | None = None,
    log_every: int = 0,
    log=print,
) -> tuple[PartDenoiser, list[dict]]:
    """CFM training with ``t ~ U[0, 1]`` per object and Gaussian ``eps``."""
    if not examples:
        raise EmptyInput("no training examples")
    torch.manual_seed(cfg.seed)
    model = PartDenoiser(cfg)
    opt = Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    rng = np.random.default_rng([cfg.seed, 0x5F1])
    steps = cfg.steps if steps is None else steps
    history = []
    model.train()
    for step in range(steps):
        size = min(cfg.batch, len(examples))
        idx = rng.choice(len(examples), size=size, replace=False)
        chosen = [examples[int(i)] for i in idx]
        batch = FlowBatch.of([e.inputs for e in chosen])
        x0 = torch.cat([e.x0 for e in chosen])
        eps = torch.randn(x0.shape, generator=gen)
        t = torch.rand(size, generator=gen)
        loss = loss_cfm(model, x0, eps, t, batch)
        opt.zero_grad()
        loss.backward()
        opt.step(_lr(step, cfg, steps))
        history.append({"step": step, "loss": loss.item()})
        if log_every and (step % log_every == 0 or step == steps - 1):
            recent = np.mean([h["loss"] for h in history[-log_every:]])
            log(f"[synth] step {step:5d} loss {recent:.4f}")
    model.eval()
    return model, history


def validity_accuracy(generated: Sequence[PartLatentSet], targets: Sequence[PartLatentSet]) -> float:
    """Fraction of part tokens whose generated validity sign matches the target sign."""
    hit = total = 0
    for g, t in zip(generated, targets):
        for gp, tp in zip(g.parts, t.parts):
            hit += int(((gp.validity > 0) == (tp.validity > 0)).sum())
            total += tp.validity.size
    return hit / max(total, 1)


def evaluate_validity(model: PartDenoiser, examples: Sequence[SynthExample], steps: int | None = None,
                      seed: int = 0, chunk: int = 8) -> float:
    gens = []
    for s in range(0, len(examples), chunk):
        part = examples[s:s + chunk]
        layouts = [(None, e.targets.with_latents(np.zeros_like(e.targets.stacked_latents()))) for e in part]
        gens.extend(sample_layouts(model, layouts, steps, [seed + s + i for i in range(len(part))],
                                   inputs=[e.inputs for e in part]))
    return validity_accuracy(gens, [e.targets for e in examples])
