"""Exact cosine retrieval over unit-norm shape embeddings.

Supports single-vector queries, joint two-vector queries ranked by the
minimum of the two similarities, and rescaling of embeddings for downstream
generators that expect a specific L2 norm.
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

from .errors import DegenerateInputError, DimensionMismatch, FormatError, ValidationError

INDEX_MAGIC = b"TRLINDEX"
INDEX_VERSION = 1

# Default conditioning scale: half the square root of the 768-dim image
# embedding width used by the downstream generator.
DEFAULT_CONDITIONING_NORM = 0.5 * math.sqrt(768.0)


class RetrievalIndex:
    """Immutable id-addressed store of unit-norm embeddings."""

    def __init__(self, ids: list[str], matrix: np.ndarray, metadata: dict | None = None):
        self.ids = list(ids)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.metadata = dict(metadata or {})
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("index ids must be unique")
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise DimensionMismatch("need one embedding row per id")
        norms = np.linalg.norm(self.matrix, axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValidationError("index rows must be unit-norm")
        self._row_of = {sid: i for i, sid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row_of(self, shape_id: str) -> int:
        if shape_id not in self._row_of:
            raise ValidationError(f"unknown shape id {shape_id!r}")
        return self._row_of[shape_id]

    def vector_of(self, shape_id: str) -> np.ndarray:
        return self.matrix[self.row_of(shape_id)]


def build_index(embeddings, metadata: dict | None = None) -> RetrievalIndex:
    """Normalize and store embeddings; insertion order is preserved.

    embeddings is a mapping id -> vector or an iterable of (id, vector) pairs.
    """
    pairs = embeddings.items() if isinstance(embeddings, dict) else embeddings
    ids, rows = [], []
    seen = set()
    for sid, vec in pairs:
        if sid in seen:
            raise ValidationError(f"duplicate id {sid!r}")
        seen.add(sid)
        v = np.asarray(vec, dtype=np.float64)
        if v.ndim != 1:
            raise DimensionMismatch(f"embedding for {sid!r} must be 1-D")
        nrm = float(np.linalg.norm(v))
        if nrm == 0.0:
            raise DegenerateInputError(f"zero vector for id {sid!r}")
        ids.append(str(sid))
        rows.append(v / nrm)
    if not ids:
        raise ValidationError("cannot build an empty index")
    dims = {r.shape[0] for r in rows}
    if len(dims) != 1:
        raise DimensionMismatch(f"inconsistent embedding dims: {sorted(dims)}")
    return RetrievalIndex(ids, np.stack(rows), metadata)


def _prepare_query(index: RetrievalIndex, q: np.ndarray) -> np.ndarray:
    v = np.asarray(q, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != index.dim:
        raise DimensionMismatch(
            f"query has shape {v.shape}, index dim is {index.dim}"
        )
    if not np.all(np.isfinite(v)):
        raise ValidationError("query vector must be finite")
    nrm = float(np.linalg.norm(v))
    if nrm == 0.0:
        raise DegenerateInputError("zero query vector")
    return v / nrm


def _ranked(index: RetrievalIndex, scores: np.ndarray, k: int):
    if k < 1:
        raise ValidationError("k must be >= 1")
    k = min(k, len(index))
    order = np.argsort(-scores, kind="stable")[:k]  # ties keep insertion order
    return [(index.ids[i], float(scores[i])) for i in order]


def _scores(index: RetrievalIndex, q_hat: np.ndarray) -> np.ndarray:
    # elementwise multiply + per-row sum: duplicate rows score bitwise-equal
    # regardless of position (BLAS matvec kernels do not guarantee that),
    # so exact ties resolve purely by insertion order
    return (index.matrix * q_hat).sum(axis=1)


def query(index: RetrievalIndex, q: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by cosine similarity, descending; k clamps to the index size."""
    return _ranked(index, _scores(index, _prepare_query(index, q)), k)


def query_joint(
    index: RetrievalIndex, a: np.ndarray, b: np.ndarray, k: int
) -> list[tuple[str, float]]:
    """Rank by min(cos(row, a), cos(row, b)): entries close to both queries."""
    sa = _scores(index, _prepare_query(index, a))
    sb = _scores(index, _prepare_query(index, b))
    return _ranked(index, np.minimum(sa, sb), k)


def renorm_for_conditioning(
    v: np.ndarray, target_norm: float = DEFAULT_CONDITIONING_NORM
) -> np.ndarray:
    """Rescale a vector to the L2 norm a downstream conditioning model expects."""
    if target_norm <= 0:
        raise ValidationError("target_norm must be positive")
    arr = np.asarray(v, dtype=np.float64)
    nrm = float(np.linalg.norm(arr))
    if nrm == 0.0:
        raise DegenerateInputError("cannot rescale a zero vector")
    return arr * (target_norm / nrm)


def save_index(index: RetrievalIndex, path: str) -> None:
    """Byte-exact persistence: ids, float64 rows, and the metadata JSON."""
    n, d = index.matrix.shape
    meta = json.dumps(index.metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sIIII", INDEX_MAGIC, INDEX_VERSION, n, d, len(meta)))
        for sid in index.ids:
            raw = sid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(index.matrix.astype("<f8").tobytes())
        fh.write(meta)


def load_index(path: str) -> RetrievalIndex:
    with open(path, "rb") as fh:
        header = fh.read(24)
        if len(header) != 24:
            raise FormatError(f"{path}: truncated index header")
        magic, version, n, d, meta_len = struct.unpack("<8sIIII", header)
        if magic != INDEX_MAGIC:
            raise FormatError(f"{path}: not a retrieval index file")
        if version != INDEX_VERSION:
            raise FormatError(f"{path}: unsupported index version {version}")
        ids = []
        for _ in range(n):
            raw_len = fh.read(4)
            if len(raw_len) != 4:
                raise FormatError(f"{path}: truncated id table")
            (length,) = struct.unpack("<I", raw_len)
            raw = fh.read(length)
            if len(raw) != length:
                raise FormatError(f"{path}: truncated id table")
            ids.append(raw.decode("utf-8"))
        rows_raw = fh.read(n * d * 8)
        if len(rows_raw) != n * d * 8:
            raise FormatError(f"{path}: truncated embedding rows")
        meta_raw = fh.read(meta_len)
        if len(meta_raw) != meta_len:
            raise FormatError(f"{path}: truncated metadata")
    matrix = np.frombuffer(rows_raw, dtype="<f8").reshape(n, d)
    return RetrievalIndex(ids, matrix.copy(), json.loads(meta_raw.decode("utf-8")))
