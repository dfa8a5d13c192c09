"""Offline hard-negative mining: exact cosine kNN, seeded batches, delta filter.

Batches are built from neighborhoods of randomly drawn seed shapes so that
confusable shapes co-occur as negatives; a directional threshold test on
text/image embeddings then masks out pairs that are semantically the same
shape (false negatives).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .alignloss import NegativeMask
from .errors import DimensionMismatch, FormatError, ValidationError

NEIGHBOR_MAGIC = b"TRLNEIGH"
NEIGHBOR_VERSION = 1


@dataclass(frozen=True)
class MiningConfig:
    """Seeded-batch geometry: seed_count x group_size shapes per batch."""

    seed_count: int = 40
    group_size: int = 5
    knn_depth: int = 20
    delta: float = 0.1
    refresh_interval: int | None = None

    def __post_init__(self):
        if self.seed_count < 1:
            raise ValidationError("seed_count must be >= 1")
        if self.group_size < 1:
            raise ValidationError("group_size must be >= 1")
        if self.knn_depth < self.group_size:
            raise ValidationError("knn_depth must be >= group_size")
        if self.delta < 0.0:
            raise ValidationError("delta must be non-negative")
        if self.refresh_interval is not None and self.refresh_interval < 1:
            raise ValidationError("refresh_interval must be >= 1 when set")

    @property
    def batch_size(self) -> int:
        return self.seed_count * self.group_size

    def to_dict(self) -> dict:
        return {
            "seed_count": self.seed_count,
            "group_size": self.group_size,
            "knn_depth": self.knn_depth,
            "delta": self.delta,
            "refresh_interval": self.refresh_interval,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MiningConfig":
        return cls(
            seed_count=int(obj.get("seed_count", 40)),
            group_size=int(obj.get("group_size", 5)),
            knn_depth=int(obj.get("knn_depth", 20)),
            delta=float(obj.get("delta", 0.1)),
            refresh_interval=obj.get("refresh_interval"),
        )


class NeighborTable:
    """Per shape, its k nearest neighbors by cosine similarity, descending."""

    def __init__(self, ids: list[str], neighbor_idx: np.ndarray, sims: np.ndarray):
        self.ids = list(ids)
        self.neighbor_idx = np.asarray(neighbor_idx, dtype=np.int32)
        self.sims = np.asarray(sims, dtype=np.float64)
        n = len(self.ids)
        if self.neighbor_idx.shape != self.sims.shape or self.neighbor_idx.ndim != 2:
            raise ValidationError("neighbor index and similarity blocks disagree")
        if self.neighbor_idx.shape[0] != n:
            raise ValidationError("neighbor table must cover every id")
        self._row_of = {sid: i for i, sid in enumerate(self.ids)}
        if len(self._row_of) != n:
            raise ValidationError("neighbor table ids must be unique")

    @property
    def depth(self) -> int:
        return self.neighbor_idx.shape[1]

    def row_of(self, shape_id: str) -> int:
        return self._row_of[shape_id]

    def neighbors_of(self, shape_id: str) -> list[tuple[str, float]]:
        row = self._row_of[shape_id]
        return [
            (self.ids[j], float(s))
            for j, s in zip(self.neighbor_idx[row], self.sims[row])
        ]

    def save(self, path: str) -> None:
        n, k = self.neighbor_idx.shape
        with open(path, "wb") as fh:
            fh.write(struct.pack("<8sIII", NEIGHBOR_MAGIC, NEIGHBOR_VERSION, n, k))
            for sid in self.ids:
                raw = sid.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
            fh.write(self.neighbor_idx.astype("<i4").tobytes())
            fh.write(self.sims.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "NeighborTable":
        with open(path, "rb") as fh:
            header = fh.read(20)
            if len(header) != 20:
                raise FormatError(f"{path}: truncated neighbor table header")
            magic, version, n, k = struct.unpack("<8sIII", header)
            if magic != NEIGHBOR_MAGIC:
                raise FormatError(f"{path}: not a neighbor table file")
            if version != NEIGHBOR_VERSION:
                raise FormatError(f"{path}: unsupported version {version}")
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
            idx_raw = fh.read(n * k * 4)
            sims_raw = fh.read(n * k * 8)
            if len(idx_raw) != n * k * 4 or len(sims_raw) != n * k * 8:
                raise FormatError(f"{path}: truncated neighbor rows")
        idx = np.frombuffer(idx_raw, dtype="<i4").reshape(n, k)
        sims = np.frombuffer(sims_raw, dtype="<f8").reshape(n, k)
        return cls(ids, idx.copy(), sims.copy())


def build_neighbor_table(embeddings: dict[str, np.ndarray], k: int) -> NeighborTable:
    """Exact kNN under cosine similarity; ties break by ascending id.

    Rows are laid out in ascending id order so the table is canonical
    regardless of the input dict's insertion order.
    """
    if len(embeddings) < 2:
        raise ValidationError("need at least 2 embeddings to build a neighbor table")
    if k < 1:
        raise ValidationError("k must be >= 1")
    ids = sorted(embeddings)
    matrix = np.stack([np.asarray(embeddings[sid], dtype=np.float64) for sid in ids])
    norms = np.linalg.norm(matrix, axis=1)
    if np.max(np.abs(norms - 1.0)) > 1e-6:
        raise ValidationError("embeddings must be unit-norm")
    n = len(ids)
    k_eff = min(k, n - 1)
    id_arr = np.array(ids)
    neighbor_idx = np.empty((n, k_eff), dtype=np.int32)
    neighbor_sims = np.empty((n, k_eff), dtype=np.float64)
    for i in range(n):
        # elementwise multiply + per-row sum keeps exact ties exact: identical
        # candidate rows get bitwise-equal scores regardless of row position,
        # which BLAS matmul/matvec kernels do not guarantee
        sims = (matrix * matrix[i]).sum(axis=1)
        sims[i] = -np.inf  # self is never a neighbor
        order = np.lexsort((id_arr, -sims))[:k_eff]
        neighbor_idx[i] = order
        neighbor_sims[i] = sims[order]
    return NeighborTable(ids, neighbor_idx, neighbor_sims)


@dataclass
class BatchPlan:
    """Ordered shape ids of one seeded batch plus their seed-group labels."""

    shape_ids: list[str]
    seed_of: np.ndarray

    def __post_init__(self):
        self.seed_of = np.asarray(self.seed_of, dtype=np.int64)
        if len(self.shape_ids) != len(self.seed_of):
            raise ValidationError("shape_ids and seed_of lengths disagree")
        if len(set(self.shape_ids)) != len(self.shape_ids):
            raise ValidationError("batch plan must contain distinct shapes")

    def __len__(self) -> int:
        return len(self.shape_ids)

    def groups(self) -> list[list[int]]:
        out = [[] for _ in range(int(self.seed_of.max()) + 1)]
        for pos, g in enumerate(self.seed_of):
            out[g].append(pos)
        return out


def build_seeded_batches(
    table: NeighborTable,
    config: MiningConfig,
    rng: np.random.Generator,
    epoch_size: int,
) -> list[BatchPlan]:
    """Plan epoch_size batches of seed_count groups with group_size members each.

    Each group is a uniformly drawn seed plus its top (group_size - 1) kNN
    neighbors not already taken within the batch; a neighbor list exhausted by
    collisions falls back to a uniform untaken shape, so every batch holds
    exactly seed_count * group_size distinct shapes.
    """
    n = len(table.ids)
    if config.batch_size > n:
        raise ValidationError(
            f"batch needs {config.batch_size} distinct shapes, only {n} available"
        )
    plans = []
    for _ in range(epoch_size):
        seeds = rng.choice(n, size=config.seed_count, replace=False)
        taken = set(int(s) for s in seeds)
        positions: list[int] = []
        seed_of: list[int] = []
        for g, seed in enumerate(seeds):
            members = [int(seed)]
            for j in table.neighbor_idx[int(seed)]:
                if len(members) == config.group_size:
                    break
                j = int(j)
                if j not in taken:
                    members.append(j)
                    taken.add(j)
            while len(members) < config.group_size:
                untaken = np.setdiff1d(np.arange(n), np.fromiter(taken, dtype=int))
                pick = int(untaken[rng.integers(len(untaken))])
                members.append(pick)
                taken.add(pick)
            positions.extend(members)
            seed_of.extend([g] * config.group_size)
        plans.append(
            BatchPlan(
                shape_ids=[table.ids[i] for i in positions],
                seed_of=np.asarray(seed_of),
            )
        )
    return plans


def false_negative_mask(
    plan: BatchPlan,
    HT: np.ndarray,
    HI: np.ndarray,
    delta: float,
    text_present: np.ndarray | None = None,
) -> NegativeMask:
    """Directional in-group filter: drop j from i's negatives when j's text
    matches i's image almost as well as i's own text does.

    excluded[i, j] = same seed group, i != j, and HT_j . HI_i + delta > HT_i . HI_i.
    """
    HT = np.asarray(HT, dtype=np.float64)
    HI = np.asarray(HI, dtype=np.float64)
    n = len(plan)
    if HT.shape != HI.shape or HT.shape[0] != n:
        raise DimensionMismatch(
            f"embeddings {HT.shape}/{HI.shape} do not cover the {n}-shape plan"
        )
    cross = HT @ HI.T  # cross[a, b] = HT_a . HI_b
    own = cross.diagonal()
    over = cross.T + delta > own[:, None]  # over[i, j]: HT_j . HI_i + delta > HT_i . HI_i
    same_group = plan.seed_of[:, None] == plan.seed_of[None, :]
    excluded = same_group & over
    np.fill_diagonal(excluded, False)
    if text_present is not None:
        present = np.asarray(text_present, dtype=bool)
        excluded &= present[:, None] & present[None, :]
    return NegativeMask(excluded)
