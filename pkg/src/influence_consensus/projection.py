"""Seeded Rademacher random projection and row normalization.

Entry ``(row, col)`` of the implied projection matrix is ``+-1/sqrt(out_dim)``;
the sign is the low bit of ``splitmix64(seed ^ (row * in_dim + col))``
(bit 0 -> +, bit 1 -> -), computed modulo 2**64.  Entries are generated in
column chunks on demand, never as a full ``out_dim x in_dim`` matrix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numba
import numpy as np

from ._parallel import run_row_chunks
from .datastore import FeatureShard
from .errors import DimensionMismatchError, ValidationError

logger = logging.getLogger(__name__)

DESK_OUT_DIM = 64
FULL_SCALE_OUT_DIM = 5120
FAMILIES = ("rademacher",)

_MASK64 = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_COL_CHUNK = 512


def splitmix64(x):
    """Vectorized splitmix64 finalizer over uint64 arrays (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class ProjectionSpec:
    seed: int
    in_dim: int
    out_dim: int = DESK_OUT_DIM
    family: str = "rademacher"

    def __post_init__(self) -> None:
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValidationError("in_dim and out_dim must be >= 1")
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown projection family {self.family!r}")
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.out_dim)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "in_dim": self.in_dim, "out_dim": self.out_dim, "family": self.family}

    @classmethod
    def from_dict(cls, data: dict) -> "ProjectionSpec":
        return cls(int(data["seed"]), int(data["in_dim"]), int(data["out_dim"]), str(data.get("family", "rademacher")))


def _sign_chunk(spec: ProjectionSpec, col_lo: int, col_hi: int) -> np.ndarray:
    """Signs (+-1.0) for columns [col_lo, col_hi), laid out (cols, out_dim)."""
    rows = np.arange(spec.out_dim, dtype=np.uint64)
    cols = np.arange(col_lo, col_hi, dtype=np.uint64)
    idx = rows[None, :] * np.uint64(spec.in_dim) + cols[:, None]
    bits = splitmix64(np.uint64(spec.seed) ^ idx) & np.uint64(1)
    return 1.0 - 2.0 * bits.astype(np.float64)


def projection_entry(spec: ProjectionSpec, row: int, col: int) -> float:
    if not (0 <= row < spec.out_dim and 0 <= col < spec.in_dim):
        raise IndexError(f"entry ({row}, {col}) outside {spec.out_dim}x{spec.in_dim}")
    idx = (row * spec.in_dim + col) & _MASK64
    bit = int(splitmix64(np.uint64(spec.seed ^ idx))) & 1
    return -spec.scale if bit else spec.scale


@numba.njit(cache=True, nogil=True)
def _accumulate(x, signs, acc, col0, lo, hi):
    n_cols = signs.shape[0]
    out_dim = signs.shape[1]
    for r in range(lo, hi):
        for c in range(n_cols):
            v = np.float64(x[r, col0 + c])
            for o in range(out_dim):
                acc[r, o] += signs[c, o] * v


def project_block(spec: ProjectionSpec, block: FeatureShard, n_workers: Optional[int] = None) -> FeatureShard:
    """Apply the implied projection to every row of ``block``.

    Accumulation is float64 and sequential over input columns for every
    output coordinate, so results are identical for any row partitioning or
    worker count.
    """
    if block.dim != spec.in_dim:
        raise DimensionMismatchError(f"block dim {block.dim} != projection in_dim {spec.in_dim}")
    x = block.values
    acc = np.zeros((block.count, spec.out_dim), dtype=np.float64)
    for col_lo in range(0, spec.in_dim, _COL_CHUNK):
        col_hi = min(col_lo + _COL_CHUNK, spec.in_dim)
        signs = _sign_chunk(spec, col_lo, col_hi)
        run_row_chunks(lambda lo, hi: _accumulate(x, signs, acc, col_lo, lo, hi), block.count, n_workers)
    return FeatureShard((acc * spec.scale).astype(np.float32), base_id=block.base_id)


@numba.njit(cache=True, nogil=True)
def _row_norms(x):
    out = np.zeros(x.shape[0], dtype=np.float64)
    for r in range(x.shape[0]):
        s = 0.0
        for c in range(x.shape[1]):
            v = np.float64(x[r, c])
            s += v * v
        out[r] = np.sqrt(s)
    return out


def normalize_rows(block: FeatureShard) -> Tuple[FeatureShard, int]:
    """Scale each nonzero row to unit Euclidean norm.

    Returns the normalized shard and the number of all-zero rows, which are
    left as zeros.
    """
    norms = _row_norms(block.values)
    zero = norms == 0.0
    n_zero = int(zero.sum())
    if n_zero:
        logger.warning("%d zero row(s) left unnormalized (first id %d)", n_zero, block.base_id + int(np.argmax(zero)))
    safe = np.where(zero, 1.0, norms)
    out = (block.values.astype(np.float64) / safe[:, None]).astype(np.float32)
    return FeatureShard(out, base_id=block.base_id), n_zero


def project_and_normalize(spec: ProjectionSpec, block: FeatureShard, n_workers: Optional[int] = None) -> Tuple[FeatureShard, int]:
    return normalize_rows(project_block(spec, block, n_workers))
