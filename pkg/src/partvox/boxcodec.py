"""Canonical ordering and token encoding of bounding-box sets.

Vocabulary for a resolution-``N`` grid: ``PAD=0``, ``BOS=1``, ``EOS=2`` and coordinate
value ``c`` in ``0..N-1`` maps to token ``3 + c``.  Each box contributes six tokens in
the order ``x_min, y_min, z_min, x_max, y_max, z_max``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidBox, Malformed, OutOfBounds
from .voxels import Aabb

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3
TOKENS_PER_BOX = 6

ROLE_BOS = "BOS"
ROLE_EOS = "EOS"
ROLE_MIN = "MIN"
ROLE_MAX = "MAX"


def vocab_size(resolution: int) -> int:
    return int(resolution) + N_SPECIAL


def coord_token(c: int) -> int:
    return int(c) + N_SPECIAL


def canonical_key(box: Aabb) -> tuple:
    (x0, y0, z0), (x1, y1, z1) = box.min, box.max
    return (z0, y0, x0, z1, y1, x1)


def canonicalize(boxes: Sequence[Aabb]) -> list[Aabb]:
    """Sort by min corner in z-y-x order, ties by max corner in z-y-x order (stable)."""
    return sorted(boxes, key=canonical_key)


@dataclass(frozen=True)
class BoxTokenSequence:
    tokens: tuple[int, ...]
    resolution: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def num_boxes(self) -> int:
        return (len(self.tokens) - 2) // TOKENS_PER_BOX

    def as_array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)

    def validate(self) -> "BoxTokenSequence":
        t = self.tokens
        if len(t) < 2 or t[0] != BOS or t[-1] != EOS:
            raise Malformed("token sequence must start with BOS and end with EOS")
        interior = t[1:-1]
        if len(interior) % TOKENS_PER_BOX:
            raise Malformed(f"interior length {len(interior)} is not a multiple of {TOKENS_PER_BOX}")
        hi = vocab_size(self.resolution)
        for pos, tok in enumerate(interior, start=1):
            if not N_SPECIAL <= tok < hi:
                raise Malformed(f"token {tok} at position {pos} is not a coordinate token")
        return self

    def to_text(self) -> str:
        return f"N={self.resolution}\n" + " ".join(str(t) for t in self.tokens) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BoxTokenSequence":
        lines = text.strip().splitlines()
        if not lines or not lines[0].startswith("N="):
            raise Malformed("token stream must start with a line 'N=<resolution>'")
        n = int(lines[0][2:])
        toks = [int(tok) for line in lines[1:] for tok in line.split()]
        return cls(tuple(toks), n)


def tokenize(boxes: Sequence[Aabb], resolution: int) -> BoxTokenSequence:
    n = int(resolution)
    toks = [BOS]
    for i, b in enumerate(boxes):
        coords = b.min + b.max
        if min(coords) < 0 or max(coords) >= n:
            raise OutOfBounds(f"box {i} {b.min}-{b.max} exceeds resolution {n}")
        toks.extend(c + N_SPECIAL for c in coords)
    toks.append(EOS)
    return BoxTokenSequence(tuple(toks), n)


def detokenize(seq: BoxTokenSequence) -> list[Aabb]:
    seq.validate()
    interior = np.asarray(seq.tokens[1:-1], dtype=np.int64).reshape(-1, TOKENS_PER_BOX) - N_SPECIAL
    boxes = []
    for i, row in enumerate(interior):
        lo, hi = tuple(row[:3]), tuple(row[3:])
        if any(a > b for a, b in zip(lo, hi)):
            raise InvalidBox(f"box {i} has min {lo} > max {hi}", box_index=i)
        boxes.append(Aabb(lo, hi))
    return boxes


@dataclass(frozen=True)
class TokenRoleMap:
    """Per-position role of a token sequence plus the owning box index (``-1`` for BOS/EOS)."""

    roles: tuple[str, ...]
    axes: tuple[int, ...]
    box_index: tuple[int, ...]

    @property
    def min_positions(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == ROLE_MIN]

    @property
    def max_positions(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == ROLE_MAX]


def role_map(seq: BoxTokenSequence) -> TokenRoleMap:
    seq.validate()
    roles, axes, owner = [ROLE_BOS], [-1], [-1]
    for b in range(seq.num_boxes):
        for slot in range(TOKENS_PER_BOX):
            roles.append(ROLE_MIN if slot < 3 else ROLE_MAX)
            axes.append(slot % 3)
            owner.append(b)
    roles.append(ROLE_EOS)
    axes.append(-1)
    owner.append(-1)
    return TokenRoleMap(tuple(roles), tuple(axes), tuple(owner))


def load_boxes(path: str | Path) -> list[Aabb]:
    return [Aabb.from_json(b) for b in json.loads(Path(path).read_text())]


def save_boxes(boxes: Sequence[Aabb], path: str | Path) -> None:
    Path(path).write_text(json.dumps([b.to_json() for b in boxes]))
