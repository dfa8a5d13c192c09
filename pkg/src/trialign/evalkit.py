"""Zero-shot classification, prompt-averaged class embeddings, linear probing.

Class names become unit class vectors by projecting a set of templated text
vectors and averaging; shapes are ranked against them by cosine similarity.
The few-shot probe fits an L2-regularized multinomial logistic classifier on
frozen embeddings by full-batch gradient descent (dependency-free and
deterministic).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .encoder import ModelState, normalize, project_text
from .errors import DegenerateInputError, DimensionMismatch, ValidationError


@dataclass
class ClassEmbeddingSet:
    """Unit-norm class vectors in the aligned space, one per label."""

    labels: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.labels = list(self.labels)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError("class labels must be unique")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.labels):
            raise DimensionMismatch("need one class vector per label")
        norms = np.linalg.norm(self.vectors, axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValidationError("class vectors must be unit-norm")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ProbeConfig:
    """Few-shot probe settings; accuracy is averaged over `seeds` resamples."""

    shots: int = 4
    seeds: int = 10
    regularization: float = 1e-3
    max_iterations: int = 500
    learning_rate: float = 0.5

    def __post_init__(self):
        if self.shots < 1:
            raise ValidationError("shots must be >= 1")
        if self.seeds < 1:
            raise ValidationError("seeds must be >= 1")
        if self.regularization < 0:
            raise ValidationError("regularization must be >= 0")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")


def load_default_templates() -> list[str]:
    """The sentence templates shipped with the package ("a 3D model of a {}." etc)."""
    raw = resources.files("trialign").joinpath("data/templates.json").read_text("utf-8")
    return json.loads(raw)


def prompt_average(
    template_vectors: list[np.ndarray],
    state: ModelState,
    normalize_each: bool = True,
) -> np.ndarray:
    """Project each raw template text vector, average, and re-normalize.

    With normalize_each (default) every projected template is normalized
    before the mean; the alternative averages raw projections.
    """
    if not len(template_vectors):
        raise ValidationError("need at least one template vector")
    projected = []
    for vec in template_vectors:
        h, ctx = project_text(vec, state, want_cache=True)
        projected.append(h if normalize_each else ctx[1] * ctx[2])
    mean = np.mean(projected, axis=0)
    nrm = float(np.linalg.norm(mean))
    if nrm == 0.0:
        raise DegenerateInputError("templates cancel out; zero-norm mean")
    return mean / nrm


def class_embeddings_from_templates(
    per_label: dict[str, list[np.ndarray]],
    state: ModelState,
    normalize_each: bool = True,
) -> ClassEmbeddingSet:
    labels = list(per_label)
    vectors = np.stack(
        [prompt_average(per_label[label], state, normalize_each) for label in labels]
    )
    return ClassEmbeddingSet(labels, vectors)


def zero_shot_classify(
    shape_embeddings: dict[str, np.ndarray],
    classes: ClassEmbeddingSet,
    k: int,
) -> dict[str, list[tuple[str, float]]]:
    """Top-k class labels per shape by cosine score, descending.

    Ties break deterministically by class index (stable sort).
    """
    if k < 1 or k > len(classes):
        raise ValidationError(f"k must be in [1, {len(classes)}], got {k}")
    out = {}
    d = classes.vectors.shape[1]
    for sid, h in shape_embeddings.items():
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (d,):
            raise DimensionMismatch(
                f"shape {sid!r} embedding has shape {h.shape}, classes have dim {d}"
            )
        scores = classes.vectors @ h
        order = np.argsort(-scores, kind="stable")[:k]
        out[sid] = [(classes.labels[j], float(scores[j])) for j in order]
    return out


def topk_accuracy(
    predictions: dict[str, list[tuple[str, float]]],
    ground_truth: dict[str, str],
    k: int,
) -> float:
    """Fraction of shapes whose true label appears among the first k predictions."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    if not predictions:
        raise ValidationError("no predictions given")
    hits = 0
    for sid, ranked in predictions.items():
        if sid not in ground_truth:
            raise ValidationError(f"shape {sid!r} has no ground-truth label")
        labels = [label for label, _ in ranked[:k]]
        hits += ground_truth[sid] in labels
    return hits / len(predictions)


@dataclass
class ProbeResult:
    mean_accuracy: float
    std_accuracy: float
    per_seed: list[float]


def _fit_logistic(X, y, n_classes, config: ProbeConfig) -> np.ndarray:
    """Full-batch GD on softmax cross-entropy with L2 on the weights (not bias)."""
    n, d = X.shape
    Xb = np.concatenate([X, np.ones((n, 1))], axis=1)
    W = np.zeros((d + 1, n_classes))
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(config.max_iterations):
        logits = Xb @ W
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = Xb.T @ (p - onehot) / n
        grad[:-1] += config.regularization * W[:-1]
        W -= config.learning_rate * grad
    return W


def linear_probe(
    train_pairs: list[tuple[np.ndarray, str]],
    test_pairs: list[tuple[np.ndarray, str]],
    config: ProbeConfig,
    rng: np.random.Generator,
) -> ProbeResult:
    """Few-shot linear probing on frozen embeddings.

    For each seed, `shots` training examples per class are drawn, a linear
    classifier is fitted, and test accuracy recorded; the mean and standard
    deviation over seeds are reported.
    """
    if not train_pairs or not test_pairs:
        raise ValidationError("train and test sets must be non-empty")
    labels = sorted({label for _, label in train_pairs})
    label_index = {label: i for i, label in enumerate(labels)}
    by_class = {label: [] for label in labels}
    for vec, label in train_pairs:
        by_class[label].append(np.asarray(vec, dtype=np.float64))
    for label, vecs in by_class.items():
        if len(vecs) < config.shots:
            raise ValidationError(
                f"class {label!r} has {len(vecs)} examples, fewer than {config.shots} shots"
            )
    X_test = np.stack([np.asarray(v, dtype=np.float64) for v, _ in test_pairs])
    y_test = np.array([label_index.get(label, -1) for _, label in test_pairs])
    Xb_test = np.concatenate([X_test, np.ones((len(X_test), 1))], axis=1)

    accuracies = []
    for child in rng.spawn(config.seeds):
        xs, ys = [], []
        for label in labels:
            vecs = by_class[label]
            picks = child.choice(len(vecs), size=config.shots, replace=False)
            xs.extend(vecs[i] for i in picks)
            ys.extend([label_index[label]] * config.shots)
        W = _fit_logistic(np.stack(xs), np.array(ys), len(labels), config)
        predicted = np.argmax(Xb_test @ W, axis=1)
        accuracies.append(float(np.mean(predicted == y_test)))
    return ProbeResult(
        mean_accuracy=float(np.mean(accuracies)),
        std_accuracy=float(np.std(accuracies)),
        per_seed=accuracies,
    )
