"""Descriptor boosting for sparse image features.

A self-boosting MLP stage plus attention-free cross-boosting transform
existing keypoint descriptors into stronger real-valued or binary ones,
trained end to end with a differentiable average-precision objective.
Ships with a synthetic homography data generator, a matching/evaluation
harness, bit-exact file formats, and a CLI.
"""

from .booster import (BoosterParams, DescriptorVector, FeatureSet,
                      KeypointGeometry, boost)
from .datagen import LabeledPair, SceneSpec, generate_pair, verify_labels
from .diffkernel import GradTape, Tensor2, grad_check
# the per-anchor AP function itself lives at featboost.fastap.fastap
from .fastap import MatchLabels, QuantizationGrid, exact_ap_binary, pair_loss
from .fileio import load_checkpoint, load_features, save_checkpoint, save_features
from .matcher import (MatchSet, PlanarWarp, calibrate_threshold, filter_matches,
                      mma, mutual_check, nn_match)
from .trainer import AdamW, TrainConfig, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "AdamW", "BoosterParams", "DescriptorVector", "FeatureSet", "GradTape",
    "KeypointGeometry", "LabeledPair", "MatchLabels", "MatchSet", "PlanarWarp",
    "QuantizationGrid", "SceneSpec", "Tensor2", "TrainConfig", "boost",
    "calibrate_threshold", "exact_ap_binary", "filter_matches",
    "generate_pair", "grad_check", "load_checkpoint", "load_features",
    "lr_schedule", "mma", "mutual_check", "nn_match", "pair_loss",
    "save_checkpoint", "save_features", "train", "verify_labels",
]
