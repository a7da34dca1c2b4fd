"""Multilayer channel features detector.

Handcrafted HOG+LUV channels plus stacked convolutional feature layers feed
a multi-stage boosted soft cascade; detection scans the first layer
everywhere and computes deeper layers only for windows that survive.

Hot kernels run through a compiled extension when available; set
MCF_BACKEND=fallback to force the pure-numpy implementation.
"""

from ._backend import backend_name
from .cascade import (CascadeModel, DecisionTree, Stage, StagePlan,
                      TrainConfig, boost_stage, calibrate_soft_cascade,
                      desk_config, load_model, plan_stages, save_model, score,
                      train_multistage, train_tree)
from .channels import (ChannelStack, PyramidSpec, build_pyramid, compute_l1,
                       gradient_channels, rgb_to_luv)
from .convnet import (BackboneSpec, BackboneWeights, ConvLayerSpec,
                      MultiLayerChannels, compute_layer_for_window,
                      default_backbone, forward_layer, ingest_precomputed,
                      load_weights, random_weights, save_weights)
from .detector import (Detection, DetectorConfig, StageStats, detect,
                       early_nms, final_nms, overlap, scan_stage1)
from .errors import (ConfigError, DataError, IngestError, InvalidInputError,
                     McfError, ModelFormatError, SequencingError,
                     WeightsFormatError)
from .features import (FeaturePool, FeatureSpec, L1PoolConfig,
                       enumerate_pool_conv, enumerate_pool_l1, evaluate,
                       integral_image)
from .harness import (Dataset, EvalCurve, GTBox, bench, compute_curve,
                      evaluate_detections, load_annotations, load_dataset,
                      match_detections, save_dataset, synth_dataset)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
