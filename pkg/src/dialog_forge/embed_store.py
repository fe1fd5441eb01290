"""Binary embedding store: bit-exact storage of dense float32 vector collections.

On-disk layout of ``<name>.embs``:

    bytes 0-3    magic ``EMBS``
    bytes 4-7    u32 little-endian format version (currently 1)
    bytes 8-11   u32 little-endian vector dimensionality
    bytes 12-19  u64 little-endian vector count
    bytes 20-    count x dim IEEE-754 binary32 little-endian, row-major

Row ids live in a companion ``<name>.ids`` file: newline-delimited UTF-8,
exactly one line per row, line i naming row i. Keeping ids out of the vector
payload leaves a pure rectangular block that can be memory-mapped and read
with constant stride.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"EMBS"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")

NON_FINITE = "NON_FINITE"
ZERO_NORM = "ZERO_NORM"
DUPLICATE_ID = "DUPLICATE_ID"


class StoreFormatError(ValueError):
    """A store file violates the on-disk layout or its companion manifest."""


@dataclass
class EmbeddingStore:
    """An immutable collection of float32 vectors with stable string ids.

    ``vectors`` may be a memory-mapped array; opened stores are safe to read
    from many threads concurrently.
    """

    dim: int
    count: int
    vectors: np.ndarray
    ids: list[str]
    path: Path | None = None
    _row_by_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.dim <= 0:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if self.vectors.shape != (self.count, self.dim):
            raise ValueError(
                f"vector block shape {self.vectors.shape} does not match "
                f"count={self.count}, dim={self.dim}"
            )
        if len(self.ids) != self.count:
            raise ValueError(f"{len(self.ids)} ids for {self.count} rows")
        # First occurrence wins; duplicates are surfaced by validate_store.
        index: dict[str, int] = {}
        for row, id_ in enumerate(self.ids):
            index.setdefault(id_, row)
        self._row_by_id = index

    @classmethod
    def from_arrays(cls, ids: Sequence[str], vectors) -> "EmbeddingStore":
        """Build an in-memory store, enforcing creation-time invariants."""
        ids = list(ids)
        _check_ids(ids)
        block = _as_rectangular_f32(vectors)
        if block.shape[0] != len(ids):
            raise ValueError(f"{len(ids)} ids for {block.shape[0]} vectors")
        return cls(dim=block.shape[1], count=block.shape[0], vectors=block, ids=ids)

    def row(self, id_: str) -> int:
        try:
            return self._row_by_id[id_]
        except KeyError:
            raise KeyError(f"id {id_!r} not in store") from None

    def __contains__(self, id_: str) -> bool:
        return id_ in self._row_by_id

    def vector(self, id_: str) -> np.ndarray:
        return self.vectors[self.row(id_)]

    def select(self, ids: Sequence[str]) -> "EmbeddingStore":
        """New in-memory store holding the given ids, in the given order."""
        ids = list(ids)
        rows = [self.row(i) for i in ids]
        block = np.ascontiguousarray(self.vectors[rows])
        return EmbeddingStore(dim=self.dim, count=len(ids), vectors=block, ids=ids)


@dataclass
class ValidationReport:
    ok: bool
    issues: list[tuple[int, str, str]]


def _check_ids(ids: Sequence[str]) -> None:
    seen = set()
    for id_ in ids:
        if not id_:
            raise ValueError("empty id")
        if "\n" in id_ or "\r" in id_:
            raise ValueError(f"id {id_!r} contains a newline")
        if id_ in seen:
            raise ValueError(f"duplicate id {id_!r}")
        seen.add(id_)


def _as_rectangular_f32(vectors) -> np.ndarray:
    try:
        block = np.asarray(vectors, dtype=np.float32)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"ragged or non-numeric vector matrix: {exc}") from exc
    if block.ndim != 2 or block.dtype == object:
        raise ValueError(f"expected a rectangular matrix, got shape {block.shape}")
    if block.shape[1] == 0:
        raise ValueError("dim must be positive")
    return np.ascontiguousarray(block)


def _ids_path(path: str | Path) -> Path:
    path = Path(path)
    if path.suffix == ".embs":
        return path.with_suffix(".ids")
    return path.parent / (path.name + ".ids")


def _store_path(path: str | Path) -> Path:
    path = Path(path)
    if path.suffix == ".embs":
        return path
    return path.parent / (path.name + ".embs")


def write_store(ids: Sequence[str], vectors, path: str | Path) -> None:
    """Write a store file plus its id manifest.

    ``path`` may be given with or without the ``.embs`` suffix. The write is
    single-writer: concurrent writers to the same path are not supported.

    Raises:
        ValueError: duplicate/ill-formed ids or a ragged vector matrix.
        OSError: I/O failure.
    """
    ids = list(ids)
    _check_ids(ids)
    block = _as_rectangular_f32(vectors)
    if block.shape[0] != len(ids):
        raise ValueError(f"{len(ids)} ids for {block.shape[0]} vectors")
    count, dim = block.shape

    store_path = _store_path(path)
    with open(store_path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, dim, count))
        f.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
    data = "".join(id_ + "\n" for id_ in ids)
    _ids_path(path).write_text(data, encoding="utf-8")


def open_store(path: str | Path) -> EmbeddingStore:
    """Open a store read-only with O(1) random row access (memory-mapped).

    Raises:
        StoreFormatError: bad magic, version mismatch, truncated payload, or
            an id manifest whose line count disagrees with the header.
        FileNotFoundError: either file is missing.
    """
    store_path = _store_path(path)
    ids_path = _ids_path(path)

    with open(store_path, "rb") as f:
        header = f.read(_HEADER.size)
    if len(header) < _HEADER.size:
        raise StoreFormatError(f"{store_path}: truncated header")
    magic, version, dim, count = _HEADER.unpack(header)
    if magic != MAGIC:
        raise StoreFormatError(f"{store_path}: bad magic {magic!r}")
    if version != VERSION:
        raise StoreFormatError(f"{store_path}: unsupported version {version}")
    if dim == 0:
        raise StoreFormatError(f"{store_path}: dim must be positive")

    expected = _HEADER.size + count * dim * 4
    actual = store_path.stat().st_size
    if actual != expected:
        raise StoreFormatError(
            f"{store_path}: payload length mismatch "
            f"(expected {expected} bytes for {count}x{dim}, found {actual})"
        )

    if count > 0:
        vectors = np.memmap(
            store_path, dtype="<f4", mode="r", offset=_HEADER.size, shape=(count, dim)
        )
    else:
        vectors = np.empty((0, dim), dtype=np.float32)

    text = ids_path.read_text(encoding="utf-8")
    if text.endswith("\n"):
        text = text[:-1]
    ids = text.split("\n") if text else []
    if len(ids) != count:
        raise StoreFormatError(
            f"{ids_path}: {len(ids)} manifest lines for header count {count}"
        )

    return EmbeddingStore(
        dim=int(dim), count=int(count), vectors=vectors, ids=ids, path=store_path
    )


def validate_store(store: EmbeddingStore) -> ValidationReport:
    """Report NaN/Inf rows, zero-norm rows, and duplicate ids.

    Issues are reported, never raised; an unhealthy store stays openable so
    it can be inspected.
    """
    issues: list[tuple[int, str, str]] = []

    if store.count > 0:
        finite = np.isfinite(store.vectors).all(axis=1)
        for row in np.flatnonzero(~finite):
            issues.append((int(row), NON_FINITE, "vector contains NaN or infinity"))
        norms = np.linalg.norm(store.vectors.astype(np.float64), axis=1)
        for row in np.flatnonzero(finite & (norms == 0.0)):
            issues.append((int(row), ZERO_NORM, "vector has zero norm"))

    seen: dict[str, int] = {}
    for row, id_ in enumerate(store.ids):
        if id_ in seen:
            issues.append((row, DUPLICATE_ID, f"id {id_!r} first seen at row {seen[id_]}"))
        else:
            seen[id_] = row

    issues.sort(key=lambda item: (item[0], item[1]))
    return ValidationReport(ok=not issues, issues=issues)


def cosine(a, b) -> float:
    """Cosine similarity dot(a,b) / (|a||b|), accumulated in float64.

    Raises:
        ValueError: dimension mismatch or a zero-norm operand. Zero norms are
            a hard error rather than a silent 0 score: they almost always
            mean an exporter wrote garbage.
    """
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape or va.ndim != 1:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    norm_a = float(np.linalg.norm(va))
    norm_b = float(np.linalg.norm(vb))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("cosine undefined for zero-norm operand")
    value = float(np.dot(va, vb) / (norm_a * norm_b))
    return max(-1.0, min(1.0, value))
