"""Attention-gated cross-modal image fusion with multi-task auxiliary training."""

from .attention import (
    AttentionWeights,
    FusionCriterion,
    attention_fuse,
    channel_attention,
    detect_attention,
    spatial_attention,
)
from .backbone import BackboneWeights, extract_pyramid, fuse_local_global, init_backbone, msrb
from .errors import ModelError, NumericError, ShapeError, StateError
from .imgcore import (
    bilinear_upsample,
    conv2d,
    downsample2,
    gaussian_pyramid,
    laplacian,
    load_image,
    save_image,
)
from .losses import (
    LossValue,
    SsimParams,
    edge_loss,
    fusion_loss,
    perceptual_loss,
    ssim_index,
    ssim_loss,
)
from .metrics import (
    MetricReport,
    avg_gradient,
    baseline_average,
    baseline_lp_fuse,
    entropy,
    eval_report,
    mutual_information,
    ssim_metric,
)
from .network import (
    FusionOutput,
    ModelGraph,
    enhance,
    fuse,
    init_model,
    load_model,
    multitask_layer,
    save_model,
)
from .training import SyntheticPair, TrainConfig, gen_synthetic, grad_check, train_phase

__version__ = "0.1.0"
