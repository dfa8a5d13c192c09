"""Dataset manifests, embedding caches, triplet assembly, and point-cloud ops.

Manifests are UTF-8 JSON-lines: one header object (cache path, optional split
labels) followed by one shape record per line. Embedding caches and point
sidecars are little-endian binary files, bit-exact across platforms.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateInputError,
    DimensionMismatch,
    FormatError,
    TextlessShapeError,
    ValidationError,
)

TEXT_CATEGORIES = ("raw", "caption", "retrieved")
DATASET_TAGS = ("objaverse", "shapenet", "3dfuture", "abo", "synthetic")

CACHE_MAGIC = b"TRLCACHE"
POINTS_MAGIC = b"TRLPOINT"
FORMAT_VERSION = 1
MANIFEST_FORMAT = "trialign-manifest"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class AugmentConfig:
    """Point-cloud augmentation ranges. The identity must be expressible."""

    scale_lo: float = 0.9
    scale_hi: float = 1.1
    translate: float = 0.05
    keep_lo: float = 0.875

    def __post_init__(self):
        if not (0.0 < self.scale_lo <= self.scale_hi):
            raise ValidationError(
                f"scale range invalid: [{self.scale_lo}, {self.scale_hi}]"
            )
        if self.translate < 0.0:
            raise ValidationError(f"translate must be >= 0, got {self.translate}")
        if not (0.0 < self.keep_lo <= 1.0):
            raise ValidationError(f"keep_lo must be in (0, 1], got {self.keep_lo}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(scale_lo=1.0, scale_hi=1.0, translate=0.0, keep_lo=1.0)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with per-vertex colors.

    vertices: (V, 3) float positions; triangles: (T, 3) int vertex indices;
    vertex_colors: (V, 3) float RGB in [0, 1].
    """

    vertices: np.ndarray
    triangles: np.ndarray
    vertex_colors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64)
        c = np.asarray(self.vertex_colors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) == 0:
            raise ValidationError("mesh vertices must be a non-empty (V, 3) array")
        if t.ndim != 2 or t.shape[1] != 3 or len(t) == 0:
            raise ValidationError("mesh triangles must be a non-empty (T, 3) array")
        if t.min() < 0 or t.max() >= len(v):
            raise ValidationError("triangle indices out of vertex range")
        if c.shape != v.shape:
            raise ValidationError("vertex_colors must match vertices in shape")
        if c.min() < 0.0 or c.max() > 1.0:
            raise ValidationError("vertex colors must lie in [0, 1]")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "vertex_colors", c)


def _as_point_array(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[1] != 6 or len(pts) == 0:
        raise ValidationError("points must be a non-empty (N, 6) xyzrgb array")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("points contain non-finite values")
    return pts


@dataclass
class ShapeRecord:
    """One 3D shape: colored points, grouped text candidates, image view keys."""

    id: str
    points: np.ndarray
    text_candidates: dict[str, list[str]]
    image_view_keys: list[str]
    dataset_tag: str = "synthetic"

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("record id must be a non-empty string")
        self.points = _as_point_array(self.points)
        colors = self.points[:, 3:6]
        if colors.min() < 0.0 or colors.max() > 1.0:
            raise ValidationError(f"record {self.id!r}: colors must lie in [0, 1]")
        extra = set(self.text_candidates) - set(TEXT_CATEGORIES)
        if extra:
            raise ValidationError(
                f"record {self.id!r}: unknown text categories {sorted(extra)}"
            )
        self.text_candidates = {
            cat: list(self.text_candidates.get(cat, ())) for cat in TEXT_CATEGORIES
        }
        self.image_view_keys = list(self.image_view_keys)
        if not self.image_view_keys:
            raise ValidationError(f"record {self.id!r}: needs at least one image view")
        if self.dataset_tag not in DATASET_TAGS:
            raise ValidationError(
                f"record {self.id!r}: unknown dataset_tag {self.dataset_tag!r}"
            )

    def nonempty_categories(self) -> list[str]:
        return [c for c in TEXT_CATEGORIES if self.text_candidates[c]]

    def __eq__(self, other):
        if not isinstance(other, ShapeRecord):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.points, other.points)
            and self.text_candidates == other.text_candidates
            and self.image_view_keys == other.image_view_keys
            and self.dataset_tag == other.dataset_tag
        )


class EmbeddingCache:
    """Frozen raw (pre-projection) text/image vectors, keyed by candidate/view."""

    def __init__(self, text_dim, image_dim, text_vectors, image_vectors):
        self.text_dim = int(text_dim)
        self.image_dim = int(image_dim)
        if self.text_dim < 1 or self.image_dim < 1:
            raise ValidationError("cache dims must be positive")
        self.text_vectors = self._check_block(text_vectors, self.text_dim, "text")
        self.image_vectors = self._check_block(image_vectors, self.image_dim, "image")

    @staticmethod
    def _check_block(vectors, dim, kind):
        out = {}
        for key, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float32)
            if arr.ndim != 1 or arr.shape[0] != dim:
                raise DimensionMismatch(
                    f"{kind} vector {key!r} has length {arr.shape}, expected ({dim},)"
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{kind} vector {key!r} is not finite")
            arr = arr.copy()
            arr.flags.writeable = False
            out[str(key)] = arr
        return out

    def __eq__(self, other):
        if not isinstance(other, EmbeddingCache):
            return NotImplemented
        if (self.text_dim, self.image_dim) != (other.text_dim, other.image_dim):
            return False
        for mine, theirs in (
            (self.text_vectors, other.text_vectors),
            (self.image_vectors, other.image_vectors),
        ):
            if mine.keys() != theirs.keys():
                return False
            if any(not np.array_equal(mine[k], theirs[k]) for k in mine):
                return False
        return True

    def save(self, path: str) -> None:
        save_cache(self, path)

    @classmethod
    def load(cls, path: str) -> "EmbeddingCache":
        return load_cache(path)


@dataclass
class DatasetManifest:
    """All shape records of a split plus the path of their embedding cache."""

    records: list[ShapeRecord]
    cache_path: str
    split_labels: dict[str, str] | None = None
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if not self.records:
            raise ValidationError("manifest must contain at least one record")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate record ids: {dupes}")
        if self.split_labels is not None:
            unknown = set(self.split_labels) - set(ids)
            if unknown:
                raise ValidationError(
                    f"split_labels reference unknown ids: {sorted(unknown)}"
                )

    def record_by_id(self, shape_id: str) -> ShapeRecord:
        for r in self.records:
            if r.id == shape_id:
                return r
        raise KeyError(shape_id)

    def resolved_cache_path(self) -> str:
        if os.path.isabs(self.cache_path):
            return self.cache_path
        return os.path.join(self.base_dir, self.cache_path)


@dataclass
class TripletSample:
    """One training triplet: points plus the chosen raw text/image vectors."""

    shape_id: str
    points: np.ndarray
    text_vector: np.ndarray | None
    image_vector: np.ndarray


# ---------------------------------------------------------------------------
# binary formats

_CACHE_HEADER = struct.Struct("<8sIIIII")
_POINTS_HEADER = struct.Struct("<8sII")


def _write_key_table(fh, keys):
    for key in keys:
        raw = key.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def _read_key_table(fh, count, path):
    keys = []
    for _ in range(count):
        header = fh.read(4)
        if len(header) != 4:
            raise FormatError(f"{path}: truncated key table")
        (length,) = struct.unpack("<I", header)
        raw = fh.read(length)
        if len(raw) != length:
            raise FormatError(f"{path}: truncated key table")
        keys.append(raw.decode("utf-8"))
    return keys


def _read_vector_block(fh, count, dim, path):
    nbytes = count * dim * 4
    raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise FormatError(f"{path}: truncated vector block")
    return np.frombuffer(raw, dtype="<f4").reshape(count, dim)


def save_cache(cache: EmbeddingCache, path: str) -> None:
    """Write a cache canonically (keys sorted) so identical inputs give identical bytes."""
    text_keys = sorted(cache.text_vectors)
    image_keys = sorted(cache.image_vectors)
    with open(path, "wb") as fh:
        fh.write(
            _CACHE_HEADER.pack(
                CACHE_MAGIC,
                FORMAT_VERSION,
                cache.text_dim,
                cache.image_dim,
                len(text_keys),
                len(image_keys),
            )
        )
        _write_key_table(fh, text_keys)
        _write_key_table(fh, image_keys)
        for key in text_keys:
            fh.write(cache.text_vectors[key].astype("<f4").tobytes())
        for key in image_keys:
            fh.write(cache.image_vectors[key].astype("<f4").tobytes())


def load_cache(path: str) -> EmbeddingCache:
    if not os.path.exists(path):
        raise FormatError(f"cache file not found: {path}")
    with open(path, "rb") as fh:
        header = fh.read(_CACHE_HEADER.size)
        if len(header) != _CACHE_HEADER.size:
            raise FormatError(f"{path}: truncated cache header")
        magic, version, text_dim, image_dim, n_text, n_image = _CACHE_HEADER.unpack(
            header
        )
        if magic != CACHE_MAGIC:
            raise FormatError(f"{path}: not a trialign cache file")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported cache version {version}")
        text_keys = _read_key_table(fh, n_text, path)
        image_keys = _read_key_table(fh, n_image, path)
        text_block = _read_vector_block(fh, n_text, text_dim, path)
        image_block = _read_vector_block(fh, n_image, image_dim, path)
    return EmbeddingCache(
        text_dim,
        image_dim,
        {k: text_block[i] for i, k in enumerate(text_keys)},
        {k: image_block[i] for i, k in enumerate(image_keys)},
    )


def save_points_file(points: np.ndarray, path: str) -> None:
    pts = _as_point_array(points)
    with open(path, "wb") as fh:
        fh.write(_POINTS_HEADER.pack(POINTS_MAGIC, FORMAT_VERSION, len(pts)))
        fh.write(pts.astype("<f4").tobytes())


def load_points_file(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise FormatError(f"points file not found: {path}")
    with open(path, "rb") as fh:
        header = fh.read(_POINTS_HEADER.size)
        if len(header) != _POINTS_HEADER.size:
            raise FormatError(f"{path}: truncated points header")
        magic, version, count = _POINTS_HEADER.unpack(header)
        if magic != POINTS_MAGIC:
            raise FormatError(f"{path}: not a trialign points file")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported points version {version}")
        raw = fh.read(count * 6 * 4)
        if len(raw) != count * 6 * 4:
            raise FormatError(f"{path}: truncated point rows")
    return np.frombuffer(raw, dtype="<f4").reshape(count, 6).copy()


# ---------------------------------------------------------------------------
# manifest IO


def _record_to_json(record: ShapeRecord) -> dict:
    return {
        "id": record.id,
        "dataset_tag": record.dataset_tag,
        "points": [[float(v) for v in row] for row in record.points],
        "text_candidates": record.text_candidates,
        "image_view_keys": record.image_view_keys,
    }


def _record_from_json(obj: dict, base_dir: str) -> ShapeRecord:
    if "points_file" in obj:
        points = load_points_file(os.path.join(base_dir, obj["points_file"]))
    else:
        points = obj["points"]
    return ShapeRecord(
        id=obj["id"],
        points=points,
        text_candidates=obj.get("text_candidates", {}),
        image_view_keys=obj.get("image_view_keys", []),
        dataset_tag=obj.get("dataset_tag", "synthetic"),
    )


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    """Write the manifest as JSON-lines with inline points."""
    header = {
        "format": MANIFEST_FORMAT,
        "version": FORMAT_VERSION,
        "cache_path": manifest.cache_path,
        "split_labels": manifest.split_labels,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for record in manifest.records:
            fh.write(json.dumps(_record_to_json(record), sort_keys=True) + "\n")


def load_manifest(path: str) -> DatasetManifest:
    """Load and eagerly validate a manifest together with its cache."""
    manifest, _ = load_manifest_with_cache(path)
    return manifest


def load_manifest_with_cache(path: str) -> tuple[DatasetManifest, EmbeddingCache]:
    if not os.path.exists(path):
        raise FormatError(f"manifest file not found: {path}")
    base_dir = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad header line: {exc}") from exc
    if header.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: missing manifest header line")
    if "cache_path" not in header:
        raise FormatError(f"{path}: header has no cache_path")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: bad record line: {exc}") from exc
        records.append(_record_from_json(obj, base_dir))
    manifest = DatasetManifest(
        records=records,
        cache_path=header["cache_path"],
        split_labels=header.get("split_labels"),
        base_dir=base_dir,
    )
    cache = load_cache(manifest.resolved_cache_path())
    validate_manifest_against_cache(manifest, cache)
    return manifest, cache


def validate_manifest_against_cache(
    manifest: DatasetManifest, cache: EmbeddingCache
) -> None:
    """Check that every candidate/view key of every record resolves in the cache."""
    for record in manifest.records:
        for cat in TEXT_CATEGORIES:
            for key in record.text_candidates[cat]:
                if key not in cache.text_vectors:
                    raise ValidationError(
                        f"record {record.id!r}: dangling text key {key!r}"
                    )
        for key in record.image_view_keys:
            if key not in cache.image_vectors:
                raise ValidationError(
                    f"record {record.id!r}: dangling image view key {key!r}"
                )


# ---------------------------------------------------------------------------
# operations


def sample_surface_points(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample n colored points uniformly from the mesh surface.

    Triangles are selected with probability proportional to area; the position
    and color are barycentric interpolations at a point uniform on the triangle.
    Returns a float64 (n, 6) xyzrgb array.
    """
    if n < 1:
        raise ValidationError(f"need n >= 1 points, got {n}")
    tri = mesh.vertices[mesh.triangles]  # (T, 3, 3)
    edge1 = tri[:, 1] - tri[:, 0]
    edge2 = tri[:, 2] - tri[:, 0]
    areas = 0.5 * np.linalg.norm(np.cross(edge1, edge2), axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise DegenerateInputError("mesh has zero total surface area")
    cum = np.cumsum(areas)
    picks = np.searchsorted(cum, rng.random(n) * total, side="right")
    picks = np.minimum(picks, len(areas) - 1)

    # Reflection trick: (u, v) uniform on the unit square folded onto u+v <= 1
    # is uniform on the triangle.
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    w = 1.0 - u - v

    verts = tri[picks]
    pos = (
        w[:, None] * verts[:, 0] + u[:, None] * verts[:, 1] + v[:, None] * verts[:, 2]
    )
    cols = mesh.vertex_colors[mesh.triangles][picks]
    rgb = w[:, None] * cols[:, 0] + u[:, None] * cols[:, 1] + v[:, None] * cols[:, 2]
    return np.concatenate([pos, rgb], axis=1)


def assemble_triplet(
    record: ShapeRecord,
    cache: EmbeddingCache,
    rng: np.random.Generator,
    points: np.ndarray | None = None,
) -> TripletSample:
    """Draw one (points, text vector, image vector) triplet for a record.

    The text source category is uniform among non-empty categories, the
    candidate uniform within the category, and the view uniform among views.
    """
    categories = record.nonempty_categories()
    if not categories:
        raise TextlessShapeError(
            f"record {record.id!r} has no text candidate in any category"
        )
    category = categories[rng.integers(len(categories))]
    candidates = record.text_candidates[category]
    text_key = candidates[rng.integers(len(candidates))]
    view_key = record.image_view_keys[rng.integers(len(record.image_view_keys))]
    return TripletSample(
        shape_id=record.id,
        points=record.points if points is None else points,
        text_vector=cache.text_vectors[text_key].copy(),
        image_vector=cache.image_vectors[view_key].copy(),
    )


def augment_points(
    points: np.ndarray, rng: np.random.Generator, config: AugmentConfig
) -> np.ndarray:
    """Apply uniform scale, per-axis translation, and random dropout, in order.

    Colors are untouched; the output keeps at least ceil(keep_lo * n) points.
    """
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 6 or len(pts) == 0:
        raise ValidationError("points must be a non-empty (N, 6) array")
    out = pts.copy()
    scale = rng.uniform(config.scale_lo, config.scale_hi)
    out[:, :3] = out[:, :3] * scale
    shift = rng.uniform(-config.translate, config.translate, size=3)
    out[:, :3] = out[:, :3] + shift.astype(out.dtype)
    keep_rate = rng.uniform(config.keep_lo, 1.0)
    keep_count = min(len(out), max(1, int(round(keep_rate * len(out)))))
    if keep_count < len(out):
        keep = rng.choice(len(out), size=keep_count, replace=False)
        keep.sort()
        out = out[keep]
    return out
