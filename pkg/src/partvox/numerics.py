"""Network building blocks, seeded initialization, Adam, gradient checking and checkpoints.

Reverse-mode gradients come from ``torch.autograd``; ``grad_check`` compares them against
central finite differences computed here.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyInput, Malformed, NumericalError, ShapeError

CHECKPOINT_MAGIC = b"PVXCKPT\x00"
CHECKPOINT_VERSION = 1


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {where}")
    return t


# --------------------------------------------------------------------------- init

def seeded_init(module: nn.Module, seed: int) -> nn.Module:
    """Deterministic scaled-uniform initialization of every parameter, in name order.

    Matrices get U(-1/sqrt(fan_in), 1/sqrt(fan_in)); vectors named ``bias`` or
    belonging to a LayerNorm get their identity values; everything else (embeddings,
    learned queries) gets U(-0.5, 0.5) * 0.1.
    """
    gen = torch.Generator().manual_seed(int(seed))
    norms = {id(m.weight) for m in module.modules() if isinstance(m, nn.LayerNorm) and m.weight is not None}
    tables = {id(m.weight) for m in module.modules() if isinstance(m, nn.Embedding)}
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            leaf = name.rsplit(".", 1)[-1]
            if id(p) in norms:
                p.fill_(1.0)
            elif leaf == "bias":
                p.zero_()
            elif p.dim() == 2 and leaf == "weight" and id(p) not in tables:
                bound = 1.0 / math.sqrt(p.shape[1])
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
            else:
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) - 0.5) * 0.1)
    return module


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------- layers

def sinusoidal(x: torch.Tensor, dim: int, max_period: float = 100.0) -> torch.Tensor:
    """Sinusoidal features of the trailing scalar ``x`` (shape ``(...,)``) -> ``(..., dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=x.dtype, device=x.device) / half)
    ang = x[..., None] * freqs * (2 * math.pi)
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def attention_weights(q: torch.Tensor, k: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax attention weights ``(..., Tq, Tk)``; ``mask`` is True where attention is allowed."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ShapeError(f"width {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, t, _ = x.shape
        return x.reshape(*lead, t, self.heads, self.d // self.heads).transpose(-2, -3)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor | None = None, mask: torch.Tensor | None = None,
                causal: bool = False):
        """``mask`` is True where attention is allowed; ``causal`` applies a lower-triangular mask."""
        ctx = x if ctx is None else ctx
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        if mask is not None and mask.dim() == q.dim() - 1:
            mask = mask.unsqueeze(-3)
        if causal:
            y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        else:
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        y = y.transpose(-2, -3)
        y = y.reshape(*y.shape[:-2], self.d)
        return self.out(y)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + GELU feed-forward, both residual."""

    def __init__(self, d: int, heads: int, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ff_mult * d)
        self.ff2 = nn.Linear(ff_mult * d, d)

    def forward(self, x: torch.Tensor, causal: bool = False, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``mask`` (``(..., 1, T)`` or ``(..., T, T)``) is True where attention is allowed."""
        if x.shape[-1] != self.attn.d:
            raise ShapeError(f"expected width {self.attn.d}, got {x.shape[-1]}")
        x = x + self.attn(self.norm1(x), mask=mask, causal=causal)
        x = x + self.ff2(F.gelu(self.ff1(self.norm2(x))))
        return x


def transformer_block(x: torch.Tensor, block: TransformerBlock, causal: bool) -> torch.Tensor:
    return check_finite(block(x, causal=causal), "transformer_block")


class CrossAttentionPool(nn.Module):
    """``L`` learned queries attend once over a variable-size token set."""

    def __init__(self, d: int, heads: int, num_queries: int):
        super().__init__()
        self.queries = nn.Parameter(torch.zeros(num_queries, d))
        self.norm_kv = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.norm_out = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, 2 * d)
        self.ff2 = nn.Linear(2 * d, d)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``tokens``: ``(..., M, d)``; ``mask``: ``(..., M)`` True for real tokens."""
        if tokens.shape[-2] == 0:
            raise EmptyInput("cross-attention pooling needs at least one input token")
        q = self.queries.expand(*tokens.shape[:-2], *self.queries.shape)
        attn_mask = None if mask is None else mask[..., None, :].expand(*mask.shape[:-1], q.shape[-2], mask.shape[-1])
        y = q + self.attn(q, ctx=self.norm_kv(tokens), mask=attn_mask)
        return y + self.ff2(F.gelu(self.ff1(self.norm_out(y))))


def cross_attention_pool(queries_from: CrossAttentionPool, tokens: torch.Tensor, mask=None) -> torch.Tensor:
    return check_finite(queries_from(tokens, mask), "cross_attention_pool")


# --------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)


@torch.no_grad()
def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: AdamState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """In-place bias-corrected Adam update of ``params``; returns the advanced state."""
    b1, b2 = betas
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


class Adam:
    """Thin stateful wrapper around ``adam_step`` for training loops."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = 1.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.betas, self.eps, self.clip = lr, betas, eps, clip
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        grads = [p.grad for p in self.params]
        if self.clip is not None:
            present = [g for g in grads if g is not None]
            total = torch.sqrt(sum((g.double() ** 2).sum() for g in present)) if present else torch.tensor(0.0)
            if not torch.isfinite(total):
                raise NumericalError("non-finite gradient norm")
            if total > self.clip:
                grads = [None if g is None else g * (self.clip / total).to(g.dtype) for g in grads]
        adam_step(self.params, grads, self.state, self.lr if lr is None else lr, self.betas, self.eps)


# --------------------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    tolerance: float
    worst: tuple[str, int] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[tuple[str, torch.Tensor]] | nn.Module,
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    samples: int = 200,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients with central differences on random coordinates.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.  Parameters
    should be float64 for the comparison to be meaningful.
    """
    named = list(params.named_parameters()) if isinstance(params, nn.Module) else list(params)
    named = [(n, p) for n, p in named if p.requires_grad]
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    if loss.numel() != 1 or not torch.isfinite(loss):
        raise NumericalError("grad_check needs a finite scalar loss")
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for (_, p), g in zip(named, grads)]
    sizes = np.array([p.numel() for _, p in named])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(total, size=min(samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst_rel, worst_abs, worst = 0.0, 0.0, None
    with torch.no_grad():
        for fid in np.sort(flat_ids):
            pi = int(np.searchsorted(offsets, fid, side="right") - 1)
            local = int(fid - offsets[pi])
            name, p = named[pi]
            flat = p.view(-1)
            orig = flat[local].item()
            flat[local] = orig + epsilon
            up = loss_fn().item()
            flat[local] = orig - epsilon
            down = loss_fn().item()
            flat[local] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericalError(f"non-finite loss while perturbing {name}[{local}]")
            numeric = (up - down) / (2 * epsilon)
            analytic = grads[pi].reshape(-1)[local].item()
            err = abs(analytic - numeric)
            rel = err / max(abs(analytic), abs(numeric), floor)
            worst_abs = max(worst_abs, err)
            if rel > worst_rel:
                worst_rel, worst = rel, (name, local)
    return GradCheckReport(worst_rel, worst_abs, len(flat_ids), tolerance, worst)


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(module: nn.Module | dict, path: str | Path) -> None:
    """Binary checkpoint: magic, version, count, then (name, shape, float32 values) per tensor."""
    state = module.state_dict() if isinstance(module, nn.Module) else module
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(state))]
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise Malformed(f"{path}: not a checkpoint file")
    try:
        return _parse_checkpoint(data, len(CHECKPOINT_MAGIC), path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise Malformed(f"{path}: truncated or corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(data: bytes, pos: int, path) -> dict[str, torch.Tensor]:
    version, count = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise Malformed(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(data):
        raise Malformed(f"{path}: trailing bytes after {count} tensors")
    return state
