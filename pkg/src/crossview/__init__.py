"""Cross-view contrastive pretraining for 3D skeleton action representations.

A desk-scale stack: a float64 reverse-mode tensor engine, skeleton data
views (joint, motion, bone), shear/crop augmentation, a slim
graph-convolution encoder with a momentum twin and FIFO memory banks,
single-view and cross-view contrastive losses, a two-stage trainer, and
the downstream evaluation protocols.
"""

from .augment import AugmentConfig, augment_pair, crop, shear
from .contrastive import (
    MemoryBank,
    ViewState,
    compute_context,
    loss_cross_directed,
    loss_cross_total,
    loss_infonce,
    loss_km,
    topk_mine,
)
from .data import (
    LabeledDataset,
    SkeletonGraph,
    SkeletonSequence,
    ViewKind,
    bone_view,
    heap_tree,
    load_dataset,
    make_view,
    motion_view,
    resample,
    save_dataset,
    synth_dataset,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    MomentumEncoderPair,
    load_checkpoint,
    make_pair,
    momentum_update,
    save_checkpoint,
)
from .evaluate import (
    EvalReport,
    ensemble_fuse,
    export_embeddings,
    finetune_eval,
    knn_eval,
    linear_eval,
    semi_supervised_eval,
)
from .train import TrainConfig, lr_at_epoch, pretrain, sgd_step

__version__ = "0.1.0"
