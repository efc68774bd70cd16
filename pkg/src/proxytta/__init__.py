"""Online test-time adaptation for depth completion via sparse-depth proxy
embeddings, with baselines, a synthetic covariate-shift generator, and an
evaluation harness."""

from . import data, evaluate, losses, model, pipeline, proxy
from .data import (
    DepthMap,
    Image,
    Sample,
    SceneConfig,
    ShiftConfig,
    apply_domain_shift,
    generate_scene,
    make_null_inputs,
    sample_sparse_depth,
    stream_batches,
)
from .evaluate import MetricsRecord, centroid_analysis, compute_metrics, sensitivity_study
from .losses import LossReport, LossWeights, adapt_loss, local_smoothness, sparse_consistency, supervised_loss
from .model import (
    DepthCompletionModel,
    ModelConfig,
    init_model,
    insert_adaptation_layer,
    load_checkpoint,
    partition_params,
    save_checkpoint,
)
from .pipeline import (
    AdaptResult,
    StageConfig,
    baseline_bn_adapt,
    baseline_cotta,
    baseline_no_adapt,
    pretrain_backbone,
    stage_adapt,
    stage_initialize,
    stage_prepare,
)
from .proxy import ProxyHeads, cosine_loss, ema_update, make_source_pair, make_target_pair, pool_features

__version__ = "0.1.0"
