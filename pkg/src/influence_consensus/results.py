"""Result records shared by aggregation, selection and the CLI."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .datastore import PathLike, _atomic_write


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dump_json(obj, path: PathLike) -> None:
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"
    _atomic_write(Path(path), [text.encode("utf-8")])


@dataclass
class SelectionResult:
    """Selected example ids in selection order, plus how they were chosen.

    ``provenance`` maps a key name (e.g. ``"votes"``) to an array aligned
    with ``selected_ids``.
    """

    strategy: str
    ratio: Optional[float]
    selected_ids: np.ndarray
    provenance: Dict[str, np.ndarray] = field(default_factory=dict)
    thresholds: Optional[List[float]] = None
    boundary_level: Optional[int] = None
    vote_histogram: Optional[List[int]] = None
    seed: Optional[int] = None

    @property
    def m(self) -> int:
        return int(len(self.selected_ids))

    def to_report(self) -> dict:
        return _jsonable(
            {
                "strategy": self.strategy,
                "p": self.ratio,
                "M": self.m,
                "thresholds": self.thresholds,
                "vote_histogram": self.vote_histogram,
                "boundary_level": self.boundary_level,
                "seed": self.seed,
            }
        )

    def write(self, ids_path: PathLike, report_path: PathLike) -> None:
        text = "".join(f"{int(i)}\n" for i in self.selected_ids)
        _atomic_write(Path(ids_path), [text.encode("ascii")])
        dump_json(self.to_report(), report_path)


def read_ids(path: PathLike) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=np.int64)


@dataclass
class VoteStatsRow:
    ratio: float
    mean: float
    std: float
    median: int
    max_votes: int
    zero_vote_fraction: float
    threshold: int  # smallest vote level admitted into the final selection


@dataclass
class VoteStats:
    k: int
    n: int
    rows: List[VoteStatsRow]

    def to_dict(self) -> dict:
        return _jsonable({"k": self.k, "n": self.n, "rows": [vars(r) for r in self.rows]})

    def format_table(self) -> str:
        lines = ["Ratio | Mean (+-Std) | Median | Max Votes | Zero-Vote | Threshold"]
        for r in self.rows:
            lines.append(
                f"{r.ratio * 100:g}% | {r.mean:.2f} (+-{r.std:.2f}) | {r.median} | {r.max_votes} | "
                f"{r.zero_vote_fraction * 100:.1f}% | {r.threshold} votes"
            )
        return "\n".join(lines)


@dataclass
class OverlapReport:
    task_names: List[str]
    pairwise: np.ndarray  # K x K, row-normalized by |S_row|
    vs_generalist: np.ndarray  # length K, |S_k & S_gen| / |S_gen|

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "task_names": self.task_names,
                "pairwise": self.pairwise,
                "specialist_vs_generalist": dict(zip(self.task_names, self.vs_generalist.tolist())),
            }
        )


@dataclass
class EvalReport:
    task_names: List[str]
    subset_scores: np.ndarray
    full_scores: np.ndarray
    rel: np.ndarray
    mean_rel: float

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "task_names": self.task_names,
                "subset_scores": self.subset_scores,
                "full_scores": self.full_scores,
                "rel": dict(zip(self.task_names, self.rel.tolist())),
                "mean_rel": self.mean_rel,
            }
        )
