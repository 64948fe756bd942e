"""Localize inpainted regions by decoding frozen CLIP features."""

from .backbone import BackboneSpec, FeatureSource, concat_features, extract_features, preprocess
from .data import (
    DatasetManifest,
    MaskGrid,
    PredictionMap,
    Sample,
    ValidationError,
    load_manifest,
    load_mask,
    save_mask,
)
from .decoder import DecoderSpec, build_decoder, count_parameters
from .metrics import CrossGenMatrix, aggregate_id_ood, average_precision, dataset_iou, iou
from .training import TrainConfig, TrainState, lr_schedule_step, pixel_bce_loss, train

__version__ = "0.1.0"
