"""Multi-expert classification toolkit for highly imbalanced image data."""

from .losses import (
    LossBreakdown,
    LossWeights,
    arb_loss,
    balanced_softmax,
    center_loss,
    contrastive_loss,
    cross_entropy_loss,
    hard_category_set,
    hcm_loss,
    kd_all_loss,
    kd_hard_loss,
    topn_from_fraction,
    total_loss,
)
from .attention import (
    ChannelAttention,
    RegionalChannelAttention,
    merge_quadrants,
    split_quadrants,
)
from .model import (
    CosineHead,
    MultiExpertModel,
    cosine_logits,
    load_checkpoint,
    register_backbone,
    save_checkpoint,
)
from .datagen import DatasetSpec, Manifest, distribution_stats, generate_dataset, render_sample
from .evaluation import (
    EvalReport,
    SubgroupSpec,
    build_report,
    majority_minority,
    per_class_accuracy,
    subgroup_accuracy,
)
from .train import TrainingConfig, cosine_lr, train

__version__ = "0.1.0"
