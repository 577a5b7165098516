"""Touch-to-anchor alignment toolkit.

Trains a small vision-transformer touch encoder, with per-sensor prefix
tokens, against a frozen multimodal anchor space using a symmetric
contrastive objective, then evaluates zero-shot transfer: material
classification from text prompts, grasp-outcome prediction, linear probing
and cross-modal retrieval. Everything runs on numpy; datasets, checkpoints
and embedding tables use a deterministic binary+JSON format.
"""

from .anchor import (
    AnchorConfig,
    AnchorSpace,
    EmbeddingTable,
    anchor_audio,
    anchor_text,
    anchor_vision,
    build_anchor,
    load_anchor,
    load_embedding_table,
    material_names,
    save_anchor,
    write_embedding_table,
)
from .datagen import (
    Dataset,
    LatentSample,
    SensorProfile,
    TactileImage,
    WorldConfig,
    default_profiles,
    generate_world,
    read_dataset,
    render_touch,
    render_vision,
    write_dataset,
)
from .encoder import (
    EncoderConfig,
    compute_prototypes,
    encode_batch,
    encode_touch,
    forward_batch,
    init_params,
    resolve_sensor,
    resolve_sensors_batch,
)
from .evalsuite import (
    ProbeConfig,
    ProbeResult,
    PromptTemplateRegistry,
    RetrievalResult,
    RetrievalTask,
    average_precision,
    cross_modal_retrieval,
    linear_probe,
    run_ablation_grid,
    zero_shot_classify,
    zero_shot_grasp,
)
from .objective import (
    ContrastiveBatch,
    info_nce_t2v,
    info_nce_v2t,
    loss_gradient,
    total_loss,
)
from .sampler import SamplerConfig, dataset_probabilities, draw_batch
from .trainer import (
    Checkpoint,
    TrainConfig,
    fit,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorConfig",
    "AnchorSpace",
    "Checkpoint",
    "ContrastiveBatch",
    "Dataset",
    "EmbeddingTable",
    "EncoderConfig",
    "LatentSample",
    "ProbeConfig",
    "ProbeResult",
    "PromptTemplateRegistry",
    "RetrievalResult",
    "RetrievalTask",
    "SamplerConfig",
    "SensorProfile",
    "TactileImage",
    "TrainConfig",
    "WorldConfig",
    "anchor_audio",
    "anchor_text",
    "anchor_vision",
    "average_precision",
    "build_anchor",
    "compute_prototypes",
    "cross_modal_retrieval",
    "dataset_probabilities",
    "default_profiles",
    "draw_batch",
    "encode_batch",
    "encode_touch",
    "fit",
    "forward_batch",
    "generate_world",
    "info_nce_t2v",
    "info_nce_v2t",
    "init_params",
    "linear_probe",
    "load_anchor",
    "load_checkpoint",
    "load_embedding_table",
    "loss_gradient",
    "lr_at",
    "material_names",
    "read_dataset",
    "render_touch",
    "render_vision",
    "resolve_sensor",
    "resolve_sensors_batch",
    "run_ablation_grid",
    "save_anchor",
    "save_checkpoint",
    "total_loss",
    "train_step",
    "write_dataset",
    "write_embedding_table",
    "zero_shot_classify",
    "zero_shot_grasp",
    "__version__",
]
