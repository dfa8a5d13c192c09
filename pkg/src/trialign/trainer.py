"""Two-round training loop: random batches, then mined batches with masking.

Round 1 trains on uniformly shuffled batches until validation loss stops
improving; the switch builds a neighbor table from current shape embeddings
and round 2 draws seeded batches with the false-negative mask. The frozen
text/image caches are never touched; only the shape encoder, the two
projections, and the log-temperature are updated.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .alignloss import AlignedBatch, NegativeMask, contrastive_loss, contrastive_loss_grad
from .datamodel import (
    AugmentConfig,
    DatasetManifest,
    EmbeddingCache,
    ShapeRecord,
    assemble_triplet,
    augment_points,
)
from .errors import TextlessShapeError, TriAlignError, ValidationError
from .mining import MiningConfig, build_neighbor_table, build_seeded_batches, false_negative_mask

save_checkpoint = enc.save_checkpoint
load_checkpoint = enc.load_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; lr decays exponentially per optimizer step."""

    batch_size: int = 200
    lr0: float = 1e-3
    lr_decay: float = 0.9995
    round1_patience: int = 3
    round1_max_epochs: int | None = None
    max_epochs: int = 30
    seed: int = 0
    mining: MiningConfig = field(default_factory=MiningConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    mask_symmetric: bool = False
    optimizer: str = "sgd"
    val_fraction: float = 0.05
    min_improvement: float = 1e-3
    checkpoint_policy: str = "best_val"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        # lr0 = 0 is allowed as an explicit no-op step size.
        if self.lr0 < 0:
            raise ValidationError("lr0 must be non-negative")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ValidationError("lr_decay must be in (0, 1]")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")
        if self.round1_patience < 1:
            raise ValidationError("round1_patience must be >= 1")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValidationError("val_fraction must be in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.checkpoint_policy not in ("best_val", "final"):
            raise ValidationError(f"unknown checkpoint_policy {self.checkpoint_policy!r}")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "lr0": self.lr0,
            "lr_decay": self.lr_decay,
            "round1_patience": self.round1_patience,
            "round1_max_epochs": self.round1_max_epochs,
            "max_epochs": self.max_epochs,
            "seed": self.seed,
            "mining": self.mining.to_dict(),
            "augment": {
                "scale_lo": self.augment.scale_lo,
                "scale_hi": self.augment.scale_hi,
                "translate": self.augment.translate,
                "keep_lo": self.augment.keep_lo,
            },
            "mask_symmetric": self.mask_symmetric,
            "optimizer": self.optimizer,
            "val_fraction": self.val_fraction,
            "min_improvement": self.min_improvement,
            "checkpoint_policy": self.checkpoint_policy,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        kwargs = dict(obj)
        unknown = set(kwargs) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        if "mining" in kwargs:
            kwargs["mining"] = MiningConfig.from_dict(kwargs["mining"])
        if "augment" in kwargs:
            kwargs["augment"] = AugmentConfig(**kwargs["augment"])
        return cls(**kwargs)


@dataclass
class TrainReport:
    """Per-epoch training history. Wall time is kept out of the canonical
    serialization so equal-seed runs serialize byte-identically."""

    epoch_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    tau_values: list[float] = field(default_factory=list)
    rounds: list[int] = field(default_factory=list)
    round_switch_epoch: int | None = None
    best_epoch: int | None = None
    wall_time_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "val_losses": self.val_losses,
            "tau_values": self.tau_values,
            "rounds": self.rounds,
            "round_switch_epoch": self.round_switch_epoch,
            "best_epoch": self.best_epoch,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def lr_at(step: int, config: TrainConfig) -> float:
    """Exponential schedule: lr0 * decay^step."""
    if step < 0:
        raise ValidationError("step must be >= 0")
    return config.lr0 * config.lr_decay**step


def split_by_hashed_id(ids: list[str], val_fraction: float) -> tuple[list[str], list[str]]:
    """Reproducible train/validation split keyed on a stable id hash."""
    train, val = [], []
    for sid in ids:
        digest = hashlib.sha1(sid.encode("utf-8")).digest()
        frac = int.from_bytes(digest[:8], "big") / 2**64
        (val if frac < val_fraction else train).append(sid)
    return train, val


def embed_records(records: list[ShapeRecord], state: enc.ModelState) -> dict[str, np.ndarray]:
    """Deterministic unit-norm embeddings of full (un-augmented) point clouds."""
    out = {}
    for record in records:
        pts = enc.model_inputs(record.points, state.config)
        out[record.id] = enc.embed_shape(pts, state)
    return out


class _Optimizer:
    def __init__(self, config: TrainConfig, n_params: int):
        self.config = config
        self.step_count = 0
        if config.optimizer == "adam":
            self.m = np.zeros(n_params)
            self.v = np.zeros(n_params)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        lr = lr_at(self.step_count, self.config)
        self.step_count += 1
        if self.config.optimizer == "sgd":
            params -= lr * grad
            return
        c = self.config
        self.m = c.adam_beta1 * self.m + (1.0 - c.adam_beta1) * grad
        self.v = c.adam_beta2 * self.v + (1.0 - c.adam_beta2) * grad * grad
        m_hat = self.m / (1.0 - c.adam_beta1**self.step_count)
        v_hat = self.v / (1.0 - c.adam_beta2**self.step_count)
        params -= lr * m_hat / (np.sqrt(v_hat) + c.adam_eps)


def _deterministic_triplet(record: ShapeRecord, cache: EmbeddingCache):
    """First candidate of the first non-empty category and the first view."""
    categories = record.nonempty_categories()
    text = None
    if categories:
        text = cache.text_vectors[record.text_candidates[categories[0]][0]]
    image = cache.image_vectors[record.image_view_keys[0]]
    return text, image


def _batch_forward(state, triplets, grad=None, mask=None, mask_symmetric=False,
                   delta=None, plan=None):
    """Forward a batch of (text_vec, image_vec, points) triplets; with a grad
    buffer, also backprop into it.

    Returns (loss, batch, mask). The mask is either the provided one, or the
    false-negative mask computed from the plan when delta/plan are given.
    """
    n = len(triplets)
    d = state.config.embed_dim
    hp = np.empty((n, d))
    ht = np.zeros((n, d))
    hi = np.empty((n, d))
    text_present = np.ones(n, dtype=bool)
    p_ctxs, t_ctxs, i_ctxs = [], [], []
    for row, (text_vec, image_vec, points) in enumerate(triplets):
        pts = enc.model_inputs(points, state.config)
        h, ctx = enc.embed_shape(pts, state, want_cache=True)
        hp[row] = h
        p_ctxs.append(ctx)
        if text_vec is None:
            text_present[row] = False
            ht[row, 0] = 1.0  # placeholder unit row; excluded from every term
            t_ctxs.append(None)
        else:
            h, ctx = enc.project_text(text_vec, state, want_cache=True)
            ht[row] = h
            t_ctxs.append(ctx)
        h, ctx = enc.project_image(image_vec, state, want_cache=True)
        hi[row] = h
        i_ctxs.append(ctx)

    batch = AlignedBatch(hp, ht, hi, text_present=text_present)
    if mask is None:
        if plan is not None:
            mask = false_negative_mask(plan, ht, hi, delta, text_present=text_present)
            if mask_symmetric:
                mask = mask.symmetrized()
        else:
            mask = NegativeMask.empty(n)
    tau = state.tau
    loss = contrastive_loss(batch, tau, mask)
    if grad is not None:
        d_hp, d_ht, d_hi, d_log_tau = contrastive_loss_grad(batch, tau, mask)
        for row in range(n):
            enc.embed_shape_backward(p_ctxs[row], state, d_hp[row], grad)
            if t_ctxs[row] is not None:
                enc.project_backward(t_ctxs[row], state, "gT", d_ht[row], grad)
            enc.project_backward(i_ctxs[row], state, "gI", d_hi[row], grad)
        grad[enc.log_tau_slice(state.config)] += d_log_tau
    return loss, batch, mask


def train(
    manifest: DatasetManifest,
    cache: EmbeddingCache,
    encoder_config: enc.EncoderConfig,
    config: TrainConfig,
    metrics_path: str | None = None,
    batch_probe=None,
    epoch_probe=None,
) -> tuple[enc.ModelState, TrainReport]:
    """Run the two-round loop and return the trained model state.

    batch_probe, if given, is called with a dict describing the first batch of
    every epoch (embeddings, mask, tau, loss) for external consistency checks;
    epoch_probe is called with (epoch, state) after each epoch.
    """
    t_start = time.monotonic()
    records_by_id = {r.id: r for r in manifest.records}
    train_ids, val_ids = split_by_hashed_id(
        [r.id for r in manifest.records], config.val_fraction
    )
    if not train_ids:
        raise ValidationError("validation split left no training shapes")
    if config.batch_size > len(train_ids):
        raise ValidationError(
            f"batch_size {config.batch_size} exceeds training-split size {len(train_ids)}"
        )

    ss = np.random.SeedSequence(config.seed)
    init_seed, data_seed, mining_seed = ss.spawn(3)
    init_rng = np.random.default_rng(init_seed)
    data_rng = np.random.default_rng(data_seed)
    mining_rng = np.random.default_rng(mining_seed)

    state = enc.init_model(encoder_config, init_rng)
    grad = state.zeros_like_params()
    optimizer = _Optimizer(config, state.params.size)
    log_tau_view = state.view("log_tau")

    report = TrainReport()
    best_val = math.inf
    best_params = state.params.copy()
    round_no = 1
    stall = 0
    round1_best = math.inf
    neighbor_table = None
    metrics_fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    def sample_batch_triplets(ids):
        triplets = []
        for sid in ids:
            record = records_by_id[sid]
            points = augment_points(record.points, data_rng, config.augment)
            try:
                t = assemble_triplet(record, cache, data_rng, points=points)
                text_vec, image_vec = t.text_vector, t.image_vector
            except TextlessShapeError:
                # Shapes with every text filtered stay in training; their text
                # terms are dropped from the loss, image terms kept.
                view = record.image_view_keys[
                    int(data_rng.integers(len(record.image_view_keys)))
                ]
                image_vec = cache.image_vectors[view]
                text_vec = None
            triplets.append((text_vec, image_vec, points))
        return triplets

    def validation_loss(current_state):
        ids = val_ids if val_ids else train_ids
        triplets = []
        for sid in ids:
            record = records_by_id[sid]
            text_vec, image_vec = _deterministic_triplet(record, cache)
            triplets.append((text_vec, image_vec, record.points))
        loss, _, _ = _batch_forward(current_state, triplets)
        return loss

    try:
        for epoch in range(config.max_epochs):
            if round_no == 1:
                order = data_rng.permutation(len(train_ids))
                n_batches = len(train_ids) // config.batch_size
                plans = [
                    ([train_ids[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]], None)
                    for b in range(n_batches)
                ]
            else:
                if neighbor_table is None or (
                    config.mining.refresh_interval
                    and (epoch - report.round_switch_epoch) > 0
                    and (epoch - report.round_switch_epoch) % config.mining.refresh_interval == 0
                ):
                    embeddings = embed_records(
                        [records_by_id[sid] for sid in train_ids], state
                    )
                    neighbor_table = build_neighbor_table(
                        embeddings, config.mining.knn_depth
                    )
                n_batches = max(1, len(train_ids) // config.mining.batch_size)
                seeded = build_seeded_batches(
                    neighbor_table, config.mining, mining_rng, n_batches
                )
                plans = [(plan.shape_ids, plan) for plan in seeded]

            epoch_losses = []
            for batch_index, (ids, plan) in enumerate(plans):
                triplets = sample_batch_triplets(ids)
                grad[:] = 0.0
                loss, batch, mask = _batch_forward(
                    state,
                    triplets,
                    grad=grad,
                    mask_symmetric=config.mask_symmetric,
                    delta=config.mining.delta,
                    plan=plan,
                )
                if not math.isfinite(loss):
                    raise TriAlignError(
                        f"non-finite loss {loss} at epoch {epoch} batch {batch_index} "
                        f"(tau={state.tau:.6g}, lr={lr_at(optimizer.step_count, config):.6g})"
                    )
                if batch_probe is not None and batch_index == 0:
                    batch_probe(
                        {
                            "epoch": epoch,
                            "round": round_no,
                            "loss": loss,
                            "tau": state.tau,
                            "batch": batch,
                            "mask": mask,
                            "plan": plan,
                        }
                    )
                optimizer.step(state.params, grad)
                log_tau_view[0] = min(
                    max(log_tau_view[0], math.log(enc.TAU_MIN)), math.log(enc.TAU_MAX)
                )
                epoch_losses.append(loss)

            val_loss = validation_loss(state)
            report.epoch_losses.append(float(np.mean(epoch_losses)))
            report.val_losses.append(val_loss)
            report.tau_values.append(state.tau)
            report.rounds.append(round_no)
            if metrics_fh:
                metrics_fh.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "round": round_no,
                            "loss": report.epoch_losses[-1],
                            "val_loss": val_loss,
                            "tau": state.tau,
                            "lr": lr_at(optimizer.step_count, config),
                            "seconds": time.monotonic() - t_start,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
                metrics_fh.flush()

            if epoch_probe is not None:
                epoch_probe(epoch, state)

            if val_loss < best_val:
                best_val = val_loss
                best_params = state.params.copy()
                report.best_epoch = epoch

            if round_no == 1:
                if val_loss < round1_best * (1.0 - config.min_improvement):
                    round1_best = val_loss
                    stall = 0
                else:
                    stall += 1
                cap_hit = (
                    config.round1_max_epochs is not None
                    and epoch + 1 >= config.round1_max_epochs
                )
                if (stall >= config.round1_patience or cap_hit) and epoch + 1 < config.max_epochs:
                    round_no = 2
                    report.round_switch_epoch = epoch + 1
                    neighbor_table = None  # built lazily from current embeddings
    finally:
        if metrics_fh:
            metrics_fh.close()

    report.wall_time_seconds = time.monotonic() - t_start
    if config.checkpoint_policy == "final":
        return state, report
    return enc.ModelState(encoder_config, best_params), report
