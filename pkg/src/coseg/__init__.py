"""Multimodal volumetric tumor co-segmentation toolkit."""

__version__ = "0.1.0"

from .volume import (
    BinaryMask,
    Modality,
    Spacing,
    Study,
    Volume,
    geometry_equal,
    load_study,
    load_volume,
    save_study,
    save_volume,
    validate_study,
)
from .preprocess import (
    ResamplePlan,
    crop,
    preprocess_study,
    resample_inplane,
    suv_normalize,
    zscore_normalize,
)
from .patches import Patch, PatchSpec, pad_to_min_depth, pad_to_min_shape, sample_patch
from .augment import AugmentParams, augment
from .model import (
    CoSegNet,
    DecoderSpec,
    DenseBlockSpec,
    EncoderSpec,
    ModelConfig,
    TABLE_VARIANTS,
    build_model,
    count_parameters,
    init_weights,
    load_checkpoint,
    save_checkpoint,
    swish,
)
from .losses import LossConfig, dice_loss, soft_dice
from .metrics import MetricResult, assd, dsc, nearest_distance_oracle
from .phantom import PhantomSpec, generate_studies, generate_study
from .training import PlateauHalving, TrainConfig, kfold_split, train
from .evaluation import FoldReport, crossval, evaluate, predict_volume

__all__ = [
    "AugmentParams",
    "BinaryMask",
    "CoSegNet",
    "DecoderSpec",
    "DenseBlockSpec",
    "EncoderSpec",
    "FoldReport",
    "LossConfig",
    "MetricResult",
    "Modality",
    "ModelConfig",
    "Patch",
    "PatchSpec",
    "PhantomSpec",
    "PlateauHalving",
    "ResamplePlan",
    "Spacing",
    "Study",
    "TABLE_VARIANTS",
    "TrainConfig",
    "Volume",
    "assd",
    "augment",
    "build_model",
    "count_parameters",
    "crop",
    "crossval",
    "dice_loss",
    "dsc",
    "evaluate",
    "generate_studies",
    "generate_study",
    "geometry_equal",
    "init_weights",
    "kfold_split",
    "load_checkpoint",
    "load_study",
    "load_volume",
    "nearest_distance_oracle",
    "pad_to_min_depth",
    "pad_to_min_shape",
    "predict_volume",
    "preprocess_study",
    "resample_inplane",
    "sample_patch",
    "save_checkpoint",
    "save_study",
    "save_volume",
    "soft_dice",
    "suv_normalize",
    "swish",
    "train",
    "validate_study",
    "zscore_normalize",
]
