"""Synthetic aligned datasets for desk-scale experiments.

Each latent class gets a prototype text vector, noisy image vectors around an
image prototype, and point clouds from a class-specific generator (boxes,
spheres, cylinders with class-coded aspect ratios and colors). Classes are
separable by construction, so alignment quality is measurable without real
encoders.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import DatasetManifest, EmbeddingCache, ShapeRecord

SHAPE_KINDS = ("box", "sphere", "cylinder")


def _unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def sample_box(rng, n, aspect):
    return rng.uniform(-0.5, 0.5, size=(n, 3)) * aspect


def sample_sphere(rng, n, aspect):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = rng.random(n) ** (1.0 / 3.0)
    return v * r[:, None] * 0.5 * aspect


def sample_cylinder(rng, n, aspect):
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = 0.5 * np.sqrt(rng.random(n))
    z = rng.uniform(-0.5, 0.5, size=n)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return pts * aspect

_SAMPLERS = {"box": sample_box, "sphere": sample_sphere, "cylinder": sample_cylinder}


@dataclass
class ClassSpec:
    label: str
    kind: str
    aspect: np.ndarray
    color: np.ndarray
    text_prototype: np.ndarray
    image_prototype: np.ndarray


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    cache: EmbeddingCache
    labels: dict[str, str]
    class_template_keys: dict[str, list[str]]
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    specs: list[ClassSpec] = field(default_factory=list)


def _derive_spec(base: ClassSpec, rng, overlap: float, aspect_factor: float, label: str):
    """A class near an existing one: same kind, drifted aspect and prototypes."""
    t_off = rng.normal(size=base.text_prototype.shape[0])
    t_off /= np.linalg.norm(t_off)
    i_off = rng.normal(size=base.image_prototype.shape[0])
    i_off /= np.linalg.norm(i_off)
    t_proto = base.text_prototype + overlap * t_off
    i_proto = base.image_prototype + overlap * i_off
    return ClassSpec(
        label=label,
        kind=base.kind,
        aspect=base.aspect * aspect_factor,
        color=np.clip(base.color + rng.uniform(-0.06, 0.06, size=3), 0.0, 1.0),
        text_prototype=t_proto / np.linalg.norm(t_proto),
        image_prototype=i_proto / np.linalg.norm(i_proto),
    )


def make_class_specs(
    n_classes: int,
    rng: np.random.Generator,
    text_dim: int,
    image_dim: int,
    confusable_pairs: int = 0,
    prototype_overlap: float = 0.5,
    pair_aspect_factor: float = 1.08,
    family_size: int = 1,
    family_overlap: float = 1.0,
    family_aspect_factor: float = 1.2,
) -> list[ClassSpec]:
    """Class geometry and embedding prototypes.

    The first 2*confusable_pairs classes come in hard pairs: shared geometry
    kind, a small fixed aspect-ratio gap, and nearby text/image prototypes,
    so they separate only when contrasted against each other. The remaining
    classes are grouped into consecutive families of `family_size` with a
    milder resemblance (fine-grained subcategories); family_size=1 keeps them
    independent. Difficulty factors are deterministic so datasets of equal
    size are comparably hard across seeds.
    """
    specs = []
    for c in range(n_classes):
        if c < 2 * confusable_pairs and c % 2 == 1:
            specs.append(
                _derive_spec(
                    specs[-1], rng, prototype_overlap, pair_aspect_factor, f"class{c:02d}"
                )
            )
            continue
        in_family = (
            c >= 2 * confusable_pairs
            and family_size > 1
            and (c - 2 * confusable_pairs) % family_size != 0
        )
        if in_family:
            specs.append(
                _derive_spec(
                    specs[-1], rng, family_overlap, family_aspect_factor, f"class{c:02d}"
                )
            )
            continue
        kind = SHAPE_KINDS[c % len(SHAPE_KINDS)]
        aspect = np.array(
            [1.0 + 0.5 * ((c * 7) % 5), 1.0 + 0.5 * ((c * 3) % 4), 1.0 + 0.25 * (c % 3)]
        )
        specs.append(
            ClassSpec(
                label=f"class{c:02d}",
                kind=kind,
                aspect=aspect,
                color=rng.uniform(0.1, 0.9, size=3),
                text_prototype=_unit(rng, text_dim),
                image_prototype=_unit(rng, image_dim),
            )
        )
    return specs


def make_aligned_dataset(
    n_classes: int = 10,
    train_per_class: int = 60,
    test_per_class: int = 20,
    points_per_shape: int = 128,
    text_dim: int = 24,
    image_dim: int = 24,
    image_noise: float = 0.1,
    text_noise: float = 0.0,
    views_per_shape: int = 2,
    seed: int = 0,
    confusable_pairs: int = 0,
    prototype_overlap: float = 0.5,
    pair_aspect_factor: float = 1.08,
    family_size: int = 1,
    family_overlap: float = 1.0,
    family_aspect_factor: float = 1.2,
    class_sizes: list[int] | None = None,
    cache_path: str = "synthetic.cache",
) -> SyntheticDataset:
    """Build a fully in-memory synthetic manifest + cache.

    class_sizes overrides train_per_class per class (for imbalanced sets).
    Every shape of a class shares the class's prototype text vector; image
    views are the class image prototype plus Gaussian noise.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    specs = make_class_specs(
        n_classes,
        rng,
        text_dim,
        image_dim,
        confusable_pairs=confusable_pairs,
        prototype_overlap=prototype_overlap,
        pair_aspect_factor=pair_aspect_factor,
        family_size=family_size,
        family_overlap=family_overlap,
        family_aspect_factor=family_aspect_factor,
    )
    if class_sizes is None:
        class_sizes = [train_per_class] * n_classes
    if len(class_sizes) != n_classes:
        raise ValueError("class_sizes must have one entry per class")

    text_vectors = {}
    image_vectors = {}
    class_template_keys = {}
    for spec in specs:
        key = f"txt:{spec.label}"
        text_vectors[key] = spec.text_prototype.astype(np.float32)
        class_template_keys[spec.label] = [key]

    records = []
    labels = {}
    train_ids, test_ids = [], []
    for c, spec in enumerate(specs):
        for part, count, bucket in (
            ("train", class_sizes[c], train_ids),
            ("test", test_per_class, test_ids),
        ):
            for i in range(count):
                sid = f"{spec.label}:{part}:{i:03d}"
                xyz = _SAMPLERS[spec.kind](rng, points_per_shape, spec.aspect)
                rgb = np.clip(
                    spec.color + rng.normal(0.0, 0.03, size=(points_per_shape, 3)),
                    0.0,
                    1.0,
                )
                view_keys = []
                for v in range(views_per_shape):
                    vkey = f"img:{sid}:{v}"
                    vec = spec.image_prototype + image_noise * rng.normal(size=image_dim)
                    image_vectors[vkey] = vec.astype(np.float32)
                    view_keys.append(vkey)
                if text_noise > 0.0:
                    # per-shape noisy text, like user-written names in the wild
                    tkey = f"txt:{sid}"
                    tvec = spec.text_prototype + text_noise * rng.normal(size=text_dim)
                    text_vectors[tkey] = tvec.astype(np.float32)
                else:
                    tkey = f"txt:{spec.label}"
                records.append(
                    ShapeRecord(
                        id=sid,
                        points=np.concatenate([xyz, rgb], axis=1),
                        text_candidates={"raw": [tkey]},
                        image_view_keys=view_keys,
                        dataset_tag="synthetic",
                    )
                )
                labels[sid] = spec.label
                bucket.append(sid)

    cache = EmbeddingCache(text_dim, image_dim, text_vectors, image_vectors)
    manifest = DatasetManifest(
        records=records, cache_path=cache_path, split_labels=dict(labels)
    )
    return SyntheticDataset(
        manifest=manifest,
        cache=cache,
        labels=labels,
        class_template_keys=class_template_keys,
        train_ids=train_ids,
        test_ids=test_ids,
        specs=specs,
    )


def subset_manifest(dataset: SyntheticDataset, ids: list[str]) -> DatasetManifest:
    """A manifest restricted to the given ids (training vs held-out splits)."""
    wanted = set(ids)
    records = [r for r in dataset.manifest.records if r.id in wanted]
    return DatasetManifest(
        records=records,
        cache_path=dataset.manifest.cache_path,
        split_labels={sid: dataset.labels[sid] for sid in ids},
    )
