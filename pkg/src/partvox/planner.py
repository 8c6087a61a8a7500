"""Mask-conditioned autoregressive box planner.

The conditioning prefix is ``[f'; q]``: a front-view feature map fused with part-label
embeddings (``f' = f + E[M]``) and cut into patch tokens, followed by ``L`` voxel tokens
pooled from the active voxel positions.  Box tokens follow the prefix and the whole
sequence runs through a causal transformer.

Logits are *target-aligned*: row ``i`` of a ``(T-1, V)`` logit matrix is the distribution
over token ``i + 1`` of the box sequence given the prefix and tokens ``0..i``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxcodec import (
    BOS,
    EOS,
    N_SPECIAL,
    PAD,
    TOKENS_PER_BOX,
    BoxTokenSequence,
    TokenRoleMap,
    canonicalize,
    detokenize,
    role_map,
    tokenize,
    vocab_size,
)
from .errors import EmptyInput, LabelOverflow, Malformed, ShapeError, TruncatedSequence
from .numerics import (
    Adam,
    CrossAttentionPool,
    TransformerBlock,
    check_finite,
    count_params,
    seeded_init,
    sinusoidal,
)
from .voxels import DEFAULT_K, Aabb, LabelMask2D, SparseVoxelGrid, render_view


@dataclass
class PlannerConfig:
    resolution: int = 32
    K: int = DEFAULT_K
    d: int = 64
    heads: int = 4
    blocks: int = 4
    L: int = 16
    patch: int = 4
    max_boxes: int = 16
    lam_cov: float = 1.0
    use_mask: bool = True
    lr: float = 1e-3
    steps: int = 3000
    batch: int = 16
    warmup: int = 100
    coarse_prob: float = 0.5
    seed: int = 0

    @property
    def vocab(self) -> int:
        return vocab_size(self.resolution)

    @property
    def grid_tokens(self) -> int:
        return (self.resolution // self.patch) ** 2

    @property
    def max_len(self) -> int:
        return TOKENS_PER_BOX * self.max_boxes + 2

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PlannerConfig":
        names = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in obj.items() if k in names})


@dataclass
class ConditioningPrefix:
    mask_tokens: torch.Tensor     # (B, grid_tokens, d): patchified f'
    voxel_tokens: torch.Tensor    # (B, L, d): q

    @property
    def tokens(self) -> torch.Tensor:
        return torch.cat([self.mask_tokens, self.voxel_tokens], dim=-2)

    def __len__(self) -> int:
        return self.mask_tokens.shape[-2] + self.voxel_tokens.shape[-2]


# --------------------------------------------------------------------------- inputs

def view_channels(grid: SparseVoxelGrid, view: str = "front") -> np.ndarray:
    """``(N, N, 2)`` occupancy and nearness (1 at the camera-side face, 0 for empty rays)."""
    r = render_view(grid, view)
    n = grid.resolution
    occ = r.occupancy.astype(np.float64)
    near = np.where(r.depth >= 0, 1.0 - r.depth / max(n - 1, 1), 0.0)
    return np.stack([occ, near], axis=-1)


def voxel_point_features(grid: SparseVoxelGrid, cell: int = 2) -> np.ndarray:
    """Normalized centres of the occupied ``cell^3`` blocks, in sorted (order-independent) order."""
    blocks = np.unique(grid.coords // cell, axis=0)
    return (blocks + 0.5) * cell / grid.resolution * 2.0 - 1.0


@dataclass
class PlannerInput:
    """Precomputed, model-independent inputs for one object."""

    view: np.ndarray          # (N, N, 2)
    mask: np.ndarray          # (N, N) int
    points: np.ndarray        # (M, 3) normalized voxel centres

    @classmethod
    def from_grid(cls, grid: SparseVoxelGrid, mask: LabelMask2D) -> "PlannerInput":
        if not len(grid):
            raise EmptyInput("planner input grid has no active voxels")
        if mask.shape != (grid.resolution, grid.resolution):
            raise ShapeError(f"mask shape {mask.shape} != ({grid.resolution}, {grid.resolution})")
        return cls(view_channels(grid), np.asarray(mask.data), voxel_point_features(grid))


def collate_inputs(inputs: Sequence[PlannerInput], dtype=torch.float32):
    view = torch.as_tensor(np.stack([x.view for x in inputs]), dtype=dtype)
    mask = torch.as_tensor(np.stack([x.mask for x in inputs]), dtype=torch.long)
    m = max(x.points.shape[0] for x in inputs)
    pts = np.zeros((len(inputs), m, 3))
    valid = np.zeros((len(inputs), m), dtype=bool)
    for i, x in enumerate(inputs):
        pts[i, : x.points.shape[0]] = x.points
        valid[i, : x.points.shape[0]] = True
    return view, mask, torch.as_tensor(pts, dtype=dtype), torch.as_tensor(valid)


def collate_sequences(seqs: Sequence[BoxTokenSequence]) -> torch.Tensor:
    t = max(len(s) for s in seqs)
    out = torch.full((len(seqs), t), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s.tokens)
    return out


# --------------------------------------------------------------------------- model

class PlannerModel(nn.Module):
    def __init__(self, cfg: PlannerConfig):
        super().__init__()
        if cfg.resolution % cfg.patch:
            raise ShapeError("resolution must be divisible by the patch size")
        if cfg.K < 2:
            raise ValueError("K must be at least 2 (one part plus background)")
        self.cfg = cfg
        d = cfg.d
        self.pixel = nn.Linear(2, d)
        self.part_embed = nn.Embedding(cfg.K, d)
        self.patch_proj = nn.Linear(cfg.patch * cfg.patch * d, d)
        self.point_proj = nn.Linear(3 * 16, d)
        self.pool = CrossAttentionPool(d, cfg.heads, cfg.L)
        self.prefix_pos = nn.Parameter(torch.zeros(cfg.grid_tokens + cfg.L, d))
        self.tok_embed = nn.Embedding(cfg.vocab, d)
        self.seq_pos = nn.Parameter(torch.zeros(cfg.max_len, d))
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.heads) for _ in range(cfg.blocks))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.vocab)
        seeded_init(self, cfg.seed)
        if not cfg.use_mask:
            with torch.no_grad():
                self.part_embed.weight.zero_()
            self.part_embed.weight.requires_grad_(False)

    @property
    def num_params(self) -> int:
        return count_params(self)

    # -- conditioning
    def featurize_view(self, view: torch.Tensor) -> torch.Tensor:
        """Per-pixel linear embedding of rendered channels: ``(..., h, w, 2) -> (..., h, w, d)``."""
        return self.pixel(view)

    def fuse_mask(self, f: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return fuse_mask(f, mask, self.part_embed.weight)

    def patchify(self, fp: torch.Tensor) -> torch.Tensor:
        b, h, w, d = fp.shape
        p = self.cfg.patch
        x = fp.reshape(b, h // p, p, w // p, p, d).permute(0, 1, 3, 2, 4, 5)
        return self.patch_proj(x.reshape(b, (h // p) * (w // p), p * p * d))

    def encode_voxel_tokens(self, points: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        """Fixed-length tokens ``(B, L, d)`` from normalized voxel centres ``(B, M, 3)``."""
        if points.shape[-2] == 0:
            raise EmptyInput("no voxels to encode")
        feats = sinusoidal(points, 16, max_period=8.0).flatten(-2)
        return self.pool(self.point_proj(feats), valid)

    def build_prefix(self, view, mask, points, valid) -> ConditioningPrefix:
        fp = self.fuse_mask(self.featurize_view(view), mask)
        return ConditioningPrefix(self.patchify(fp), self.encode_voxel_tokens(points, valid))

    def prefix_for(self, inputs: Sequence[PlannerInput]) -> ConditioningPrefix:
        dtype = next(self.parameters()).dtype
        return self.build_prefix(*collate_inputs(inputs, dtype))

    # -- sequence
    def forward(self, prefix: ConditioningPrefix, tokens: torch.Tensor) -> torch.Tensor:
        """Logits ``(B, T, V)`` where position ``i`` predicts token ``i + 1``."""
        if tokens.shape[-1] > self.cfg.max_len:
            raise ShapeError(f"sequence length {tokens.shape[-1]} exceeds {self.cfg.max_len}")
        pre = prefix.tokens + self.prefix_pos
        seq = self.tok_embed(tokens) + self.seq_pos[: tokens.shape[-1]]
        x = torch.cat([pre, seq], dim=-2)
        for blk in self.blocks:
            x = blk(x, causal=True)
        x = self.norm(x[..., pre.shape[-2]:, :])
        return check_finite(self.head(x), "planner logits")


def fuse_mask(f: torch.Tensor, mask: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """``f'[i, j] = f[i, j] + E[M[i, j]]``."""
    if f.shape[:-1] != mask.shape:
        raise ShapeError(f"feature map {tuple(f.shape[:-1])} and mask {tuple(mask.shape)} differ")
    if mask.numel() and (int(mask.max()) >= table.shape[0] or int(mask.min()) < 0):
        raise LabelOverflow(f"mask label outside [0, {table.shape[0] - 1}]")
    return f + table[mask]


# --------------------------------------------------------------------------- losses

def teacher_forced_logits(model: PlannerModel, prefix: ConditioningPrefix, tokens: torch.Tensor) -> torch.Tensor:
    """Target-aligned logits ``(B, T-1, V)`` for a padded token batch ``(B, T)``."""
    return model(prefix, tokens[:, :-1])


def nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over non-PAD targets."""
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    keep = targets != PAD
    return -(picked * keep).sum() / keep.sum().clamp(min=1)


def loss_base(logits: torch.Tensor, seq: BoxTokenSequence | torch.Tensor) -> torch.Tensor:
    """Teacher-forced next-token loss; BOS is input only, every later token (incl. EOS) a target."""
    if isinstance(seq, BoxTokenSequence):
        seq.validate()
        targets = torch.as_tensor(seq.tokens[1:])
    else:
        targets = seq[..., 1:]
    if logits.shape[:-1] != targets.shape:
        raise Malformed(f"logits {tuple(logits.shape)} do not align with {tuple(targets.shape)} targets")
    return nll(logits, targets)


def _role_masks(tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """MIN/MAX position masks over target positions ``1..T-1`` of a padded batch."""
    t = tokens.shape[-1]
    pos = torch.arange(1, t)
    slot = (pos - 1) % TOKENS_PER_BOX
    is_coord = (tokens[..., 1:] >= N_SPECIAL)
    return is_coord & (slot < 3), is_coord & (slot >= 3)


def expected_coordinate(logits: torch.Tensor, resolution: int) -> torch.Tensor:
    """Softmax-weighted coordinate over the coordinate sub-vocabulary only."""
    coord_logits = logits[..., N_SPECIAL:N_SPECIAL + resolution]
    probs = torch.softmax(coord_logits, dim=-1)
    values = torch.arange(resolution, dtype=logits.dtype)
    return probs @ values


def coverage_terms(pred: torch.Tensor, gt: torch.Tensor, is_min: torch.Tensor, is_max: torch.Tensor) -> torch.Tensor:
    """Per-sequence ``(1/|M|) [sum ReLU(pred - gt) over MIN + sum ReLU(gt - pred) over MAX]``."""
    pen = torch.where(is_min, F.relu(pred - gt), torch.zeros_like(pred))
    pen = pen + torch.where(is_max, F.relu(gt - pred), torch.zeros_like(pred))
    count = (is_min | is_max).sum(-1)
    per_seq = pen.sum(-1) / count.clamp(min=1)
    return per_seq, count


def loss_coverage(
    logits: torch.Tensor,
    roles: TokenRoleMap | None,
    gt_seq: BoxTokenSequence | torch.Tensor,
    hard: bool = False,
) -> torch.Tensor:
    """Part coverage penalty on MIN/MAX positions; soft uses the expected coordinate, hard the argmax."""
    if isinstance(gt_seq, BoxTokenSequence):
        if roles is None:
            roles = role_map(gt_seq)
        if len(roles.roles) != len(gt_seq):
            raise Malformed("role map does not match the sequence")
        tokens = torch.as_tensor(gt_seq.tokens).unsqueeze(0)
        logits = logits.unsqueeze(0) if logits.dim() == 2 else logits
        resolution = gt_seq.resolution
        is_min = torch.tensor([r == "MIN" for r in roles.roles[1:]]).unsqueeze(0)
        is_max = torch.tensor([r == "MAX" for r in roles.roles[1:]]).unsqueeze(0)
    else:
        tokens = gt_seq
        resolution = logits.shape[-1] - N_SPECIAL
        is_min, is_max = _role_masks(tokens)
    if logits.shape[:-1] != tokens[..., 1:].shape:
        raise Malformed("logits do not align with the ground-truth sequence")
    gt = (tokens[..., 1:] - N_SPECIAL).to(logits.dtype)
    if hard:
        pred = logits[..., N_SPECIAL:N_SPECIAL + resolution].argmax(-1).to(logits.dtype)
    else:
        pred = expected_coordinate(logits, resolution)
    per_seq, count = coverage_terms(pred, gt, is_min, is_max)
    has = count > 0
    if not has.any():
        return per_seq.sum() * 0
    return per_seq[has].mean()


def coverage_from_boxes(gt: Sequence[Aabb], pred: Sequence[Aabb]) -> float:
    """Hard coverage loss between aligned box lists (decoded coordinates)."""
    if len(gt) != len(pred):
        raise Malformed("coverage needs one predicted box per ground-truth box")
    if not gt:
        return 0.0
    total = 0.0
    for g, p in zip(gt, pred):
        total += sum(max(pm - gm, 0) for pm, gm in zip(p.min, g.min))
        total += sum(max(gm - pm, 0) for pm, gm in zip(p.max, g.max))
    return total / (6 * len(gt))


def loss_total(base, coverage, lam_cov: float = 0.1):
    if lam_cov < 0:
        raise ValueError("lam_cov must be non-negative")
    return base + lam_cov * coverage


def token_accuracy(logits: torch.Tensor, tokens: torch.Tensor) -> tuple[int, int]:
    targets = tokens[..., 1:]
    keep = targets != PAD
    hit = (logits.argmax(-1) == targets) & keep
    return int(hit.sum()), int(keep.sum())


# --------------------------------------------------------------------------- decoding

def _allowed(step: int, resolution: int, vocab: int) -> torch.Tensor:
    """Grammar mask for the token generated at interior step ``step`` (0-based)."""
    ok = torch.zeros(vocab, dtype=torch.bool)
    ok[N_SPECIAL:N_SPECIAL + resolution] = True
    if step % TOKENS_PER_BOX == 0:
        ok[EOS] = True
    return ok


def repair(raw: Sequence[Sequence[int]]) -> list[Aabb]:
    """Boxes from raw 6-coordinate rows; inverted axes are fixed by swapping min and max."""
    out = []
    for row in raw:
        lo = [min(row[a], row[a + 3]) for a in range(3)]
        hi = [max(row[a], row[a + 3]) for a in range(3)]
        out.append(Aabb(tuple(lo), tuple(hi)))
    return out


@torch.no_grad()
def sample_boxes_batch(
    model: PlannerModel,
    prefix: ConditioningPrefix,
    max_boxes: int | None = None,
    temperature: float = 0.0,
    generator: torch.Generator | None = None,
) -> list[tuple[list[Aabb], bool]]:
    """Decode every prefix in the batch; returns ``(canonical boxes, truncated)`` per item."""
    cfg = model.cfg
    max_boxes = cfg.max_boxes if max_boxes is None else min(max_boxes, cfg.max_boxes)
    b = prefix.mask_tokens.shape[0]
    if max_boxes <= 0:
        return [([], False) for _ in range(b)]
    tokens = torch.full((b, 1), BOS, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    truncated = torch.zeros(b, dtype=torch.bool)
    budget = TOKENS_PER_BOX * max_boxes
    for step in range(budget + 1):
        logits = model(prefix, tokens)[:, -1, :]
        logits = logits.masked_fill(~_allowed(step, cfg.resolution, cfg.vocab), float("-inf"))
        if temperature <= 0:
            nxt = logits.argmax(-1)
        else:
            probs = torch.softmax(logits / temperature, dim=-1)
            nxt = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
        if step == budget:
            truncated = ~done & (nxt != EOS)
            nxt = torch.full_like(nxt, EOS)
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        tokens = torch.cat([tokens, nxt[:, None]], dim=1)
        done |= nxt == EOS
        if done.all():
            break
    results = []
    for i in range(b):
        row = tokens[i, 1:].tolist()
        interior = []
        for tok in row:
            if tok in (EOS, PAD):
                break
            interior.append(tok - N_SPECIAL)
        trunc = bool(truncated[i])
        interior = interior[: len(interior) - len(interior) % TOKENS_PER_BOX]
        raw = [interior[k:k + TOKENS_PER_BOX] for k in range(0, len(interior), TOKENS_PER_BOX)]
        results.append((canonicalize(repair(raw)), trunc))
    return results


def sample_boxes(
    model: PlannerModel,
    prefix: ConditioningPrefix,
    max_boxes: int | None = None,
    temperature: float = 0.0,
    generator: torch.Generator | None = None,
) -> list[Aabb]:
    """Greedy (``temperature=0``) or sampled decoding for a single prefix.

    A :class:`TruncatedSequence` warning is emitted when the budget runs out before EOS;
    the boxes decoded so far are still returned.
    """
    (boxes, trunc), = sample_boxes_batch(model, prefix, max_boxes, temperature, generator)
    if trunc:
        warnings.warn(TruncatedSequence(f"no EOS within {max_boxes} boxes; returning partial result"))
    return boxes


# --------------------------------------------------------------------------- training

@dataclass
class PlannerExample:
    inputs: PlannerInput
    sequence: BoxTokenSequence
    grid: SparseVoxelGrid
    boxes: list[Aabb] = field(default_factory=list)

    @classmethod
    def build(cls, grid: SparseVoxelGrid, mask: LabelMask2D, boxes: Sequence[Aabb]) -> "PlannerExample":
        boxes = canonicalize(boxes)
        return cls(PlannerInput.from_grid(grid, mask), tokenize(boxes, grid.resolution), grid, boxes)


def lr_at(step: int, cfg: PlannerConfig | None = None, *, lr: float | None = None, warmup: int = 0,
          total: int = 1) -> float:
    """Linear warmup then cosine decay to 10% of the peak rate."""
    if cfg is not None:
        lr, warmup, total = cfg.lr, cfg.warmup, cfg.steps
    if step < warmup:
        return lr * (step + 1) / warmup
    frac = (step - warmup) / max(total - warmup, 1)
    return lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0))))


def planner_batch_loss(model: PlannerModel, examples: Sequence[PlannerExample], lam_cov: float):
    prefix = model.prefix_for([e.inputs for e in examples])
    tokens = collate_sequences([e.sequence for e in examples])
    logits = teacher_forced_logits(model, prefix, tokens)
    base = loss_base(logits, tokens)
    cov = loss_coverage(logits, None, tokens)
    return loss_total(base, cov, lam_cov), base, cov, logits, tokens


def train_planner(
    cfg: PlannerConfig,
    pool: Sequence[Sequence[PlannerExample]],
    steps: int | None = None,
    log_every: int = 0,
    log=print,
    stop_at_accuracy: float | None = None,
) -> tuple[PlannerModel, list[dict]]:
    """Train on ``pool``: one list of granularity variants per object (variant 0 is the finest).

    Each batch draws objects uniformly; a coarse variant is used with probability
    ``cfg.coarse_prob`` when the object has one.
    """
    torch.manual_seed(cfg.seed)
    model = PlannerModel(cfg)
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x71A])
    steps = cfg.steps if steps is None else steps
    history = []
    for step in range(steps):
        if cfg.batch >= len(pool):
            idx = np.arange(len(pool))
        else:
            idx = rng.choice(len(pool), size=cfg.batch, replace=False)
        batch = []
        for i in idx:
            variants = pool[int(i)]
            use_coarse = len(variants) > 1 and rng.random() < cfg.coarse_prob
            batch.append(variants[1 + int(rng.integers(len(variants) - 1))] if use_coarse else variants[0])
        model.train()
        total, base, cov, logits, tokens = planner_batch_loss(model, batch, cfg.lam_cov)
        opt.zero_grad()
        total.backward()
        opt.step(lr_at(step, lr=cfg.lr, warmup=cfg.warmup, total=steps))
        hit, n = token_accuracy(logits.detach(), tokens)
        rec = {"step": step, "loss": total.item(), "base": base.item(), "coverage": cov.item(), "acc": hit / n}
        history.append(rec)
        if log_every and (step % log_every == 0 or step == steps - 1):
            log(f"[plan] step {step:5d} loss {rec['loss']:.4f} base {rec['base']:.4f} "
                f"cov {rec['coverage']:.3f} acc {rec['acc']:.4f}")
        if stop_at_accuracy is not None and step % 50 == 49:
            if teacher_forced_accuracy(model, [v[0] for v in pool]) >= stop_at_accuracy:
                break
    model.eval()
    return model, history


@torch.no_grad()
def teacher_forced_accuracy(model: PlannerModel, examples: Sequence[PlannerExample], batch: int = 64) -> float:
    hit = total = 0
    for s in range(0, len(examples), batch):
        chunk = examples[s:s + batch]
        prefix = model.prefix_for([e.inputs for e in chunk])
        tokens = collate_sequences([e.sequence for e in chunk])
        h, n = token_accuracy(teacher_forced_logits(model, prefix, tokens), tokens)
        hit, total = hit + h, total + n
    return hit / max(total, 1)


@torch.no_grad()
def plan_many(model: PlannerModel, inputs: Sequence[PlannerInput], batch: int = 64,
              max_boxes: int | None = None) -> list[tuple[list[Aabb], bool]]:
    """Greedy plans for many objects, batched; order follows ``inputs``."""
    model.eval()
    out = []
    for s in range(0, len(inputs), batch):
        prefix = model.prefix_for(inputs[s:s + batch])
        out.extend(sample_boxes_batch(model, prefix, max_boxes))
    return out
