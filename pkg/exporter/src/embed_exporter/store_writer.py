"""Writer for the engine's binary embedding store format.

Layout of ``<name>.embs``: magic ``EMBS``, u32 LE version 1, u32 LE dim,
u64 LE count, then count x dim float32 LE row-major. Ids go to ``<name>.ids``
as newline-delimited UTF-8, one line per row. The format is duplicated here
on purpose: the exporter and the engine meet at a bit-exact file boundary,
never at a code dependency.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"EMBS"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


def store_paths(out: str | Path) -> tuple[Path, Path]:
    out = Path(out)
    if out.suffix == ".embs":
        return out, out.with_suffix(".ids")
    return out.parent / (out.name + ".embs"), out.parent / (out.name + ".ids")


def write_store(ids: Sequence[str], vectors: np.ndarray, out: str | Path) -> None:
    """Write vectors and the id manifest; single writer, input order kept."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids")
    for id_ in ids:
        if not id_ or "\n" in id_ or "\r" in id_:
            raise ValueError(f"id {id_!r} is empty or contains a newline")
    block = np.ascontiguousarray(np.asarray(vectors, dtype="<f4"))
    if block.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {block.shape}")
    if block.shape[0] != len(ids):
        raise ValueError(f"{len(ids)} ids for {block.shape[0]} rows")
    count, dim = block.shape
    if dim == 0:
        raise ValueError("dim must be positive")

    embs_path, ids_path = store_paths(out)
    with open(embs_path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, dim, count))
        f.write(block.tobytes())
    ids_path.write_text("".join(i + "\n" for i in ids), encoding="utf-8")
