"""Tri-modal contrastive alignment of point clouds, text, and image embeddings."""

from .alignloss import (
    AlignedBatch,
    NegativeMask,
    batch_similarity,
    contrastive_loss,
    contrastive_loss_grad,
)
from .datamodel import (
    AugmentConfig,
    DatasetManifest,
    EmbeddingCache,
    Mesh,
    ShapeRecord,
    TripletSample,
    assemble_triplet,
    augment_points,
    load_cache,
    load_manifest,
    load_manifest_with_cache,
    sample_surface_points,
    save_cache,
    save_manifest,
)
from .encoder import (
    EncoderConfig,
    ModelState,
    embed_shape,
    encode,
    init_model,
    load_checkpoint,
    parameter_count,
    project_image,
    project_text,
    save_checkpoint,
)
from .evalkit import (
    ClassEmbeddingSet,
    ProbeConfig,
    linear_probe,
    prompt_average,
    topk_accuracy,
    zero_shot_classify,
)
from .mining import (
    BatchPlan,
    MiningConfig,
    NeighborTable,
    build_neighbor_table,
    build_seeded_batches,
    false_negative_mask,
)
from .retrieval import (
    RetrievalIndex,
    build_index,
    load_index,
    query,
    query_joint,
    renorm_for_conditioning,
    save_index,
)
from .trainer import TrainConfig, TrainReport, lr_at, train

__version__ = "0.1.0"
