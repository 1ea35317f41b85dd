"""Train x validation gradient-similarity influence and per-task mean scores.

With unit-normalized inputs the kernel is a plain dot product, i.e. cosine
similarity.  The constant learning-rate factor of the first-order influence
estimate is dropped: it scales every score of a task equally and so cannot
change any ranking, threshold membership or vote.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Union

import numba
import numpy as np

from ._parallel import run_row_chunks
from .datastore import FeatureShard, Manifest, ScoreTable
from .errors import DimensionMismatchError, NormalizationError, ValidationError

UNIT_NORM_TOL = 1e-5


@dataclass
class InfluenceMatrix:
    entries: np.ndarray
    task_name: str = ""

    @property
    def n_train(self) -> int:
        return self.entries.shape[0]

    @property
    def n_val(self) -> int:
        return self.entries.shape[1]


@dataclass
class TaskScores:
    task_name: str
    scores: np.ndarray


@numba.njit(cache=True, nogil=True)
def _dot_kernel(train, val, out, lo, hi):
    for i in range(lo, hi):
        for j in range(val.shape[0]):
            acc = 0.0
            for c in range(train.shape[1]):
                acc += np.float64(train[i, c]) * np.float64(val[j, c])
            out[i, j] = acc


@numba.njit(cache=True, nogil=True)
def _row_means(entries):
    out = np.empty(entries.shape[0], dtype=np.float64)
    for i in range(entries.shape[0]):
        s = 0.0
        for j in range(entries.shape[1]):
            s += entries[i, j]
        out[i] = s / entries.shape[1]
    return out


def check_unit_rows(shard: FeatureShard, what: str = "rows") -> None:
    """Raise unless every row has norm 1 (within tolerance) or is all-zero."""
    norms = np.sqrt(np.square(shard.values, dtype=np.float64).sum(axis=1))
    bad = (norms != 0.0) & (np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.any():
        i = int(np.argmax(bad))
        raise NormalizationError(
            f"{what}: row {shard.base_id + i} has norm {norms[i]:.6g}; "
            "normalize first or pass raw=True for raw inner products"
        )


def _as_blocks(train: Union[FeatureShard, Iterable[FeatureShard]]) -> Iterable[FeatureShard]:
    return [train] if isinstance(train, FeatureShard) else train


def _block_matrix(block: FeatureShard, val: FeatureShard, raw: bool, n_workers: Optional[int]) -> np.ndarray:
    if block.dim != val.dim:
        raise DimensionMismatchError(f"train dim {block.dim} != validation dim {val.dim}")
    if not raw:
        check_unit_rows(block, "train")
    out = np.empty((block.count, val.count), dtype=np.float64)
    run_row_chunks(lambda lo, hi: _dot_kernel(block.values, val.values, out, lo, hi), block.count, n_workers)
    return out


def influence_matrix(
    train: Union[FeatureShard, Iterable[FeatureShard]],
    val: FeatureShard,
    *,
    task_name: str = "",
    raw: bool = False,
    n_workers: Optional[int] = None,
) -> InfluenceMatrix:
    """Materialize entry (i, j) = <train_i, val_j> for a shard or a block stream.

    Unless ``raw`` is set, both sides must be unit-normalized so that entries
    are cosine similarities.
    """
    if not raw:
        check_unit_rows(val, "validation")
    parts = [_block_matrix(b, val, raw, n_workers) for b in _as_blocks(train)]
    if not parts:
        raise ValidationError("empty training stream")
    return InfluenceMatrix(np.concatenate(parts, axis=0), task_name)


def task_mean_scores(matrix: InfluenceMatrix) -> TaskScores:
    if matrix.n_val < 1:
        raise ValidationError(f"task {matrix.task_name!r} has an empty validation set")
    return TaskScores(matrix.task_name, _row_means(matrix.entries))


def stream_task_scores(
    train: Union[FeatureShard, Iterable[FeatureShard]],
    val: FeatureShard,
    *,
    task_name: str = "",
    raw: bool = False,
    n_workers: Optional[int] = None,
) -> TaskScores:
    """Per-task mean influence without holding the full N x V matrix."""
    if val.count < 1:
        raise ValidationError(f"task {task_name!r} has an empty validation set")
    if not raw:
        check_unit_rows(val, "validation")
    parts = [_row_means(_block_matrix(b, val, raw, n_workers)) for b in _as_blocks(train)]
    if not parts:
        raise ValidationError("empty training stream")
    return TaskScores(task_name, np.concatenate(parts))


def vds_delta_features(clean_grads: FeatureShard, noise_grads: FeatureShard) -> FeatureShard:
    """Row-wise ``clean - noise`` gradient difference (visual-dependency variant).

    Feed the result through ``normalize_rows`` and then ``influence_matrix``
    against validation gradients.
    """
    if (clean_grads.count, clean_grads.dim, clean_grads.base_id) != (
        noise_grads.count,
        noise_grads.dim,
        noise_grads.base_id,
    ):
        raise DimensionMismatchError("clean and noise gradient shards are not aligned")
    return FeatureShard(clean_grads.values - noise_grads.values, base_id=clean_grads.base_id)


def build_all_task_scores(
    manifest: Manifest,
    *,
    block_rows: int = 4096,
    raw: bool = False,
    n_workers: Optional[int] = None,
) -> ScoreTable:
    """Score every training example against every task in manifest order."""
    if not raw and not manifest.normalized:
        raise NormalizationError("manifest is not flagged normalized; pass raw=True to override")
    columns: List[np.ndarray] = []
    for task in manifest.tasks:
        val = manifest.read_val(task)
        scores = stream_task_scores(
            manifest.iter_train_blocks(block_rows), val, task_name=task.name, raw=raw, n_workers=n_workers
        )
        if scores.scores.shape[0] != manifest.n_train:
            raise ValidationError("train stream length disagrees with manifest")
        columns.append(scores.scores)
    return ScoreTable(np.stack(columns, axis=1), manifest.task_names)
