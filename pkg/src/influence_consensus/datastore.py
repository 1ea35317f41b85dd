"""Checksummed on-disk storage for per-example feature vectors and score tables.

Container layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"ICONFEAT"
    8       4     u32 version  (1)
    12      4     u32 dtype    (1 = binary32, 2 = binary64)
    16      4     u32 dim
    20      4     u32 reserved (0)
    24      8     u64 count
    32      ...   payload, count x dim values, row-major
    end-8   8     u64 FNV-1a (64-bit) of the payload bytes

Feature shards use dtype 1; score tables use dtype 2 plus a JSON sidecar
naming the task columns.  Manifests are UTF-8 JSON.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, List, Optional, Sequence, Union

import numba
import numpy as np

from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    HeaderValidationError,
    NonFiniteValueError,
    TruncatedShardError,
    UnsupportedFormatError,
    ValidationError,
)

PathLike = Union[str, "os.PathLike[str]"]

MAGIC = b"ICONFEAT"
VERSION = 1
DTYPE_F32 = 1
DTYPE_F64 = 2
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}
_HEADER = struct.Struct("<8sIIIIQ")
HEADER_SIZE = _HEADER.size  # 32
CHECKSUM_SIZE = 8

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

MANIFEST_VERSION = 1


@numba.njit(cache=True, nogil=True)
def _fnv1a_update(h, data):
    prime = np.uint64(FNV_PRIME)
    for i in range(data.shape[0]):
        h = (h ^ np.uint64(data[i])) * prime
    return h


def fnv1a64(data: Union[bytes, bytearray, memoryview, np.ndarray], h: int = FNV_OFFSET) -> int:
    """64-bit FNV-1a of ``data``; pass ``h`` to continue a running digest."""
    buf = np.frombuffer(data, dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    buf = np.ascontiguousarray(buf).view(np.uint8).reshape(-1)
    return int(_fnv1a_update(np.uint64(h), buf))


# ---------------------------------------------------------------------------
# Feature shards


@dataclass
class FeatureShard:
    """A dense block of per-example feature vectors.

    ``values`` is a ``(count, dim)`` float32 array; row ``r`` belongs to the
    example with global id ``base_id + r``.
    """

    values: np.ndarray
    base_id: int = 0

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValidationError(f"shard values must be 2-D, got shape {values.shape}")
        if values.shape[1] < 1:
            raise ValidationError("shard dim must be >= 1")
        if self.base_id < 0:
            raise ValidationError("base_id must be non-negative")
        self.values = np.ascontiguousarray(values, dtype=np.float32)
        self.base_id = int(self.base_id)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.base_id, self.base_id + self.count, dtype=np.int64)

    def check_finite(self) -> None:
        if not np.isfinite(self.values).all():
            bad = int(np.argwhere(~np.isfinite(self.values))[0, 0])
            raise NonFiniteValueError(f"non-finite value in row {bad} (global id {self.base_id + bad})")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureShard):
            return NotImplemented
        return (
            self.base_id == other.base_id
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )


def _atomic_write(destination: Path, chunks: Sequence[bytes]) -> None:
    destination = Path(destination)
    fd, tmp = tempfile.mkstemp(prefix=destination.name + ".", suffix=".tmp", dir=destination.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, destination)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_container(array: np.ndarray, dtype_code: int, destination: PathLike) -> None:
    if not np.isfinite(array).all():
        raise NonFiniteValueError("refusing to write non-finite values")
    payload = np.ascontiguousarray(array, dtype=_DTYPES[dtype_code]).tobytes()
    count, dim = array.shape
    header = _HEADER.pack(MAGIC, VERSION, dtype_code, dim, 0, count)
    checksum = struct.pack("<Q", fnv1a64(payload))
    _atomic_write(Path(destination), [header, payload, checksum])


@dataclass(frozen=True)
class _Header:
    dtype_code: int
    dim: int
    count: int

    @property
    def payload_size(self) -> int:
        return self.dim * self.count * _DTYPES[self.dtype_code].itemsize


def _read_header(fh, file_size: int) -> _Header:
    raw = fh.read(HEADER_SIZE)
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not a feature container (bad magic)")
    if len(raw) < HEADER_SIZE:
        raise TruncatedShardError("file ends inside the header")
    _, version, dtype_code, dim, reserved, count = _HEADER.unpack(raw)
    if version != VERSION:
        raise UnsupportedFormatError(f"unsupported container version {version}")
    if dtype_code not in _DTYPES:
        raise UnsupportedFormatError(f"unsupported dtype code {dtype_code}")
    if dim < 1:
        raise HeaderValidationError("header dim must be >= 1")
    if reserved != 0:
        raise HeaderValidationError("reserved header field must be 0")
    header = _Header(dtype_code, dim, count)
    expected = HEADER_SIZE + header.payload_size + CHECKSUM_SIZE
    if file_size < expected:
        raise TruncatedShardError(f"expected {expected} bytes, file has {file_size}")
    if file_size > expected:
        raise HeaderValidationError(f"{file_size - expected} trailing bytes after checksum")
    return header


def _read_container(source: PathLike, dtype_code: Optional[int]) -> np.ndarray:
    path = Path(source)
    with open(path, "rb") as fh:
        header = _read_header(fh, os.fstat(fh.fileno()).st_size)
        if dtype_code is not None and header.dtype_code != dtype_code:
            raise UnsupportedFormatError(
                f"expected dtype code {dtype_code}, file has {header.dtype_code}"
            )
        payload = fh.read(header.payload_size)
        (stored,) = struct.unpack("<Q", fh.read(CHECKSUM_SIZE))
    if fnv1a64(payload) != stored:
        raise ChecksumMismatchError(f"checksum mismatch in {path}")
    array = np.frombuffer(payload, dtype=_DTYPES[header.dtype_code]).reshape(header.count, header.dim)
    if not np.isfinite(array).all():
        raise NonFiniteValueError(f"non-finite value stored in {path}")
    return array


def write_shard(shard: FeatureShard, destination: PathLike) -> None:
    """Write ``shard`` to ``destination`` in the binary32 container format.

    ``base_id`` is not stored in the file; manifests carry it.
    """
    _write_container(shard.values, DTYPE_F32, destination)


def read_shard(source: PathLike, base_id: int = 0) -> FeatureShard:
    array = _read_container(source, DTYPE_F32)
    return FeatureShard(array.astype(np.float32, copy=True), base_id=base_id)


def read_header(source: PathLike) -> tuple:
    """Return ``(dtype_code, dim, count)`` without reading the payload."""
    with open(source, "rb") as fh:
        h = _read_header(fh, os.fstat(fh.fileno()).st_size)
    return h.dtype_code, h.dim, h.count


def stream_blocks(source: PathLike, block_rows: int, base_id: int = 0) -> Iterator[FeatureShard]:
    """Yield consecutive row blocks of at most ``block_rows`` rows.

    The checksum is verified in a first streaming pass, so no block is handed
    out from a corrupted file.  Memory use is O(block_rows * dim).
    """
    if block_rows < 1:
        raise ValidationError("block_rows must be >= 1")
    path = Path(source)
    with open(path, "rb") as fh:
        header = _read_header(fh, os.fstat(fh.fileno()).st_size)
        if header.dtype_code != DTYPE_F32:
            raise UnsupportedFormatError("feature shards must be binary32")
        row_bytes = header.dim * 4
        h = FNV_OFFSET
        remaining = header.payload_size
        while remaining:
            chunk = fh.read(min(remaining, block_rows * row_bytes))
            h = fnv1a64(chunk, h)
            remaining -= len(chunk)
        (stored,) = struct.unpack("<Q", fh.read(CHECKSUM_SIZE))
        if h != stored:
            raise ChecksumMismatchError(f"checksum mismatch in {path}")

        fh.seek(HEADER_SIZE)
        start = 0
        while start < header.count:
            rows = min(block_rows, header.count - start)
            block = np.frombuffer(fh.read(rows * row_bytes), dtype="<f4").reshape(rows, header.dim)
            if not np.isfinite(block).all():
                raise NonFiniteValueError(f"non-finite value stored in {path}")
            yield FeatureShard(block.copy(), base_id=base_id + start)
            start += rows


def concat_shards(blocks: Sequence[FeatureShard]) -> FeatureShard:
    """Concatenate contiguous blocks back into one shard."""
    if not blocks:
        raise ValidationError("no blocks to concatenate")
    expected = blocks[0].base_id
    for b in blocks:
        if b.base_id != expected:
            raise ValidationError(f"non-contiguous block at base_id {b.base_id}, expected {expected}")
        expected += b.count
    return FeatureShard(np.concatenate([b.values for b in blocks], axis=0), base_id=blocks[0].base_id)


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class ShardRef:
    path: str
    count: int
    base_id: int


@dataclass
class TaskRef:
    name: str
    val_shard: str
    count: int


@dataclass
class Manifest:
    """Index of a gradient datastore: training shards plus one validation shard per task.

    Relative shard paths resolve against ``root`` (the manifest's directory).
    """

    feature_dim: int
    train_shards: List[ShardRef]
    tasks: List[TaskRef]
    normalized: bool = False
    projection: Optional[dict] = None
    version: int = MANIFEST_VERSION
    root: Path = field(default_factory=Path, compare=False)

    def __post_init__(self) -> None:
        self.validate()

    @property
    def n_train(self) -> int:
        return sum(s.count for s in self.train_shards)

    @property
    def task_names(self) -> List[str]:
        return [t.name for t in self.tasks]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def validate(self) -> None:
        if self.version != MANIFEST_VERSION:
            raise ValidationError(f"unsupported manifest version {self.version}")
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be >= 1")
        expected = 0
        for ref in self.train_shards:
            if ref.base_id != expected:
                raise ValidationError(
                    f"train shard {ref.path} has base_id {ref.base_id}, expected {expected}"
                )
            if ref.count < 0:
                raise ValidationError(f"negative count for {ref.path}")
            expected += ref.count
        names = self.task_names
        if not names:
            raise ValidationError("manifest must declare at least one task")
        if len(set(names)) != len(names):
            raise ValidationError("task names must be unique")

    def check_shards(self) -> None:
        """Cross-check every referenced file header against the manifest."""
        refs = [(s.path, s.count) for s in self.train_shards] + [(t.val_shard, t.count) for t in self.tasks]
        for path, count in refs:
            dtype_code, dim, n = read_header(self.resolve(path))
            if dtype_code != DTYPE_F32:
                raise ValidationError(f"{path}: expected binary32 shard")
            if dim != self.feature_dim:
                raise ValidationError(f"{path}: dim {dim} != manifest feature_dim {self.feature_dim}")
            if n != count:
                raise ValidationError(f"{path}: header count {n} != manifest count {count}")

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "feature_dim": self.feature_dim,
            "projection": self.projection,
            "train_shards": [vars(s).copy() for s in self.train_shards],
            "tasks": [vars(t).copy() for t in self.tasks],
            "normalized": self.normalized,
        }

    @classmethod
    def from_dict(cls, data: dict, root: PathLike = ".") -> "Manifest":
        try:
            return cls(
                version=int(data["version"]),
                feature_dim=int(data["feature_dim"]),
                projection=data.get("projection"),
                train_shards=[ShardRef(str(s["path"]), int(s["count"]), int(s["base_id"])) for s in data["train_shards"]],
                tasks=[TaskRef(str(t["name"]), str(t["val_shard"]), int(t["count"])) for t in data["tasks"]],
                normalized=bool(data["normalized"]),
                root=Path(root),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed manifest: {exc!r}") from exc

    def save(self, path: PathLike) -> None:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        _atomic_write(Path(path), [text.encode("utf-8")])

    @classmethod
    def load(cls, path: PathLike) -> "Manifest":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls.from_dict(data, root=path.parent)

    def iter_train_blocks(self, block_rows: int) -> Iterator[FeatureShard]:
        for ref in self.train_shards:
            yield from stream_blocks(self.resolve(ref.path), block_rows, base_id=ref.base_id)

    def read_val(self, task: Union[str, TaskRef]) -> FeatureShard:
        ref = task if isinstance(task, TaskRef) else next(t for t in self.tasks if t.name == task)
        return read_shard(self.resolve(ref.val_shard))


# ---------------------------------------------------------------------------
# Score tables


@dataclass
class ScoreTable:
    """N x K table of per-task mean influence scores (column order = task order)."""

    scores: np.ndarray
    task_names: List[str]

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise ValidationError(f"score table must be 2-D, got shape {scores.shape}")
        if scores.shape[1] != len(self.task_names):
            raise ValidationError(
                f"{scores.shape[1]} score columns but {len(self.task_names)} task names"
            )
        if len(set(self.task_names)) != len(self.task_names):
            raise ValidationError("task names must be unique")
        if not np.isfinite(scores).all():
            raise NonFiniteValueError("score table contains non-finite entries")
        self.scores = np.ascontiguousarray(scores)
        self.task_names = [str(t) for t in self.task_names]

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    @property
    def k(self) -> int:
        return self.scores.shape[1]

    @classmethod
    def from_array(cls, scores: Any, task_names: Optional[Sequence[str]] = None) -> "ScoreTable":
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim == 1:
            scores = scores[:, None]
        if task_names is None:
            task_names = [f"task{k}" for k in range(scores.shape[1])]
        return cls(scores, list(task_names))


def score_sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def write_score_table(table: ScoreTable, destination: PathLike) -> None:
    """Write the binary64 container plus ``<stem>.json`` naming the columns."""
    if table.k < 1:
        raise ValidationError("score table needs at least one task column")
    _write_container(table.scores, DTYPE_F64, destination)
    meta = {"n": table.n, "k": table.k, "task_names": table.task_names}
    text = json.dumps(meta, indent=2) + "\n"
    _atomic_write(score_sidecar_path(destination), [text.encode("utf-8")])


def read_score_table(source: PathLike) -> ScoreTable:
    scores = _read_container(source, DTYPE_F64)
    with open(score_sidecar_path(source), encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("n") != scores.shape[0] or meta.get("k") != scores.shape[1]:
        raise ValidationError("score table sidecar disagrees with container header")
    return ScoreTable(scores.copy(), list(meta["task_names"]))
