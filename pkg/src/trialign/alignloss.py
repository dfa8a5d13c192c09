"""Four-term tri-modal contrastive loss with directional negative masking.

The objective averages, over anchors and both directions, the InfoNCE terms
between shape/text and shape/image unit embeddings. A directional mask can
drop entries from an anchor's negative set (its positive is never dropped);
rows without a text candidate contribute only the two image terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, ValidationError

UNIT_ROW_ATOL = 1e-6


@dataclass
class NegativeMask:
    """Directional exclusion: excluded[i, j] removes j from anchor i's negatives."""

    excluded: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.excluded, dtype=bool)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValidationError(f"mask must be square, got {arr.shape}")
        if arr.diagonal().any():
            raise ValidationError("mask diagonal must be false (positives stay)")
        self.excluded = arr

    @classmethod
    def empty(cls, n: int) -> "NegativeMask":
        return cls(np.zeros((n, n), dtype=bool))

    @property
    def n(self) -> int:
        return self.excluded.shape[0]

    def symmetrized(self) -> "NegativeMask":
        return NegativeMask(self.excluded | self.excluded.T)


def _unit_rows(name, mat, rows=None):
    norms = np.linalg.norm(mat, axis=1)
    check = norms if rows is None else norms[rows]
    if check.size and np.max(np.abs(check - 1.0)) > UNIT_ROW_ATOL:
        raise ValidationError(f"{name} rows must be unit-norm within {UNIT_ROW_ATOL}")


@dataclass
class AlignedBatch:
    """Unit-norm shape/text/image embedding rows for one batch of triplets."""

    hp: np.ndarray
    ht: np.ndarray
    hi: np.ndarray
    text_present: np.ndarray | None = None

    def __post_init__(self):
        self.hp = np.asarray(self.hp, dtype=np.float64)
        self.ht = np.asarray(self.ht, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.hp.ndim != 2 or self.hp.shape[0] < 1:
            raise ValidationError("batch needs at least one row")
        if not (self.hp.shape == self.ht.shape == self.hi.shape):
            raise DimensionMismatch(
                f"embedding blocks disagree: {self.hp.shape}, {self.ht.shape}, {self.hi.shape}"
            )
        if self.text_present is None:
            self.text_present = np.ones(self.hp.shape[0], dtype=bool)
        else:
            self.text_present = np.asarray(self.text_present, dtype=bool)
            if self.text_present.shape != (self.hp.shape[0],):
                raise ValidationError("text_present must have one flag per row")
        _unit_rows("hp", self.hp)
        _unit_rows("hi", self.hi)
        _unit_rows("ht", self.ht, rows=self.text_present)

    @property
    def n(self) -> int:
        return self.hp.shape[0]


def batch_similarity(HA: np.ndarray, HB: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-scaled cosine logits: entry (i, j) = (HA_i . HB_j) / tau."""
    HA = np.asarray(HA, dtype=np.float64)
    HB = np.asarray(HB, dtype=np.float64)
    if HA.ndim != 2 or HB.ndim != 2 or HA.shape[1] != HB.shape[1]:
        raise DimensionMismatch(f"incompatible shapes {HA.shape} and {HB.shape}")
    if tau <= 0.0:
        raise ValidationError(f"tau must be positive, got {tau}")
    return (HA @ HB.T) / tau


def _check_mask(mask: NegativeMask, n: int) -> np.ndarray:
    if mask.n != n:
        raise DimensionMismatch(f"mask is {mask.n}x{mask.n}, batch has {n} rows")
    return mask.excluded


def _terms(batch: AlignedBatch):
    """Yield (anchor key, candidate key, active anchors, allowed columns)."""
    present = batch.text_present
    everyone = np.ones(batch.n, dtype=bool)
    yield "hp", "ht", present, present  # shape anchors vs text candidates
    yield "ht", "hp", present, everyone  # text anchors vs shape candidates
    yield "hp", "hi", everyone, everyone  # shape anchors vs image candidates
    yield "hi", "hp", everyone, everyone  # image anchors vs shape candidates


def _term_quantities(anchors, candidates, tau, excluded, active, columns):
    """Per-anchor negative-log-softmax values and the allowed-softmax matrix."""
    logits = (anchors @ candidates.T) / tau
    allowed = (~excluded) & columns[None, :]
    np.fill_diagonal(allowed, True)
    neg_inf = np.where(allowed, logits, -np.inf)
    m = neg_inf.max(axis=1, keepdims=True)
    stable = np.exp(neg_inf - m)
    denom = stable.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(denom[:, 0])
    terms = np.where(active, lse - logits.diagonal(), 0.0)
    probs = stable / denom
    return terms, probs, logits


def per_anchor_terms(
    batch: AlignedBatch, tau: float, mask: NegativeMask
) -> np.ndarray:
    """The (4, n) matrix of per-anchor loss terms; inactive anchors are zero.

    Row order: shape-to-text, text-to-shape, shape-to-image, image-to-shape.
    """
    if tau <= 0.0:
        raise ValidationError(f"tau must be positive, got {tau}")
    excluded = _check_mask(mask, batch.n)
    blocks = {"hp": batch.hp, "ht": batch.ht, "hi": batch.hi}
    rows = []
    for a_key, c_key, active, columns in _terms(batch):
        terms, _, _ = _term_quantities(
            blocks[a_key], blocks[c_key], tau, excluded, active, columns
        )
        rows.append(terms)
    return np.stack(rows)


def _divisor(batch: AlignedBatch) -> float:
    return float(2 * batch.n + 2 * int(batch.text_present.sum()))


def contrastive_loss(batch: AlignedBatch, tau: float, mask: NegativeMask) -> float:
    """Masked tri-modal contrastive loss, averaged over all included terms.

    With every text present this is exactly the mean of the four log-softmax
    terms over the batch (a 1/(4n) normalization).
    """
    terms = per_anchor_terms(batch, tau, mask)
    return float(terms.sum() / _divisor(batch))


def contrastive_loss_grad(
    batch: AlignedBatch, tau: float, mask: NegativeMask
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Gradients of the loss w.r.t. the unit-norm rows and log-temperature.

    Returns (dHP, dHT, dHI, d_log_tau). Rows excluded from every term (e.g.
    text rows of text-less shapes) receive exactly zero gradient.
    """
    if tau <= 0.0:
        raise ValidationError(f"tau must be positive, got {tau}")
    excluded = _check_mask(mask, batch.n)
    divisor = _divisor(batch)
    blocks = {"hp": batch.hp, "ht": batch.ht, "hi": batch.hi}
    grads = {key: np.zeros_like(block) for key, block in blocks.items()}
    diag = np.arange(batch.n)
    d_log_tau = 0.0
    for a_key, c_key, active, columns in _terms(batch):
        _, probs, logits = _term_quantities(
            blocks[a_key], blocks[c_key], tau, excluded, active, columns
        )
        g = probs.copy()
        g[diag, diag] -= 1.0
        g[~active] = 0.0
        grads[a_key] += (g @ blocks[c_key]) / (tau * divisor)
        grads[c_key] += (g.T @ blocks[a_key]) / (tau * divisor)
        # z = s / tau, so dz/dlog_tau = -z; excluded entries carry g = 0.
        d_log_tau -= float(np.sum(g * logits)) / divisor
    return grads["hp"], grads["ht"], grads["hi"], d_log_tau
