"""Synthetic speckle images, classical DIC and CNN deformation estimation."""
from .fields import DisplacementField, GrayImage, Roi, StrainField
from .speckle import SpeckleParams, render_reference
from .deform import DeformationSpec, make_dataset, make_pair, sample_field, warp
from .dic import DicConfig, run_dic
from .models import DeformationCNN, ModelCheckpoint, ModelConfig, build_model
from .pipeline import TrainConfig, evaluate, fine_tune, infer_sequence, train

__version__ = "0.1.0"

__all__ = [
    "DeformationCNN", "DeformationSpec", "DicConfig", "DisplacementField", "GrayImage",
    "ModelCheckpoint", "ModelConfig", "Roi", "SpeckleParams", "StrainField", "TrainConfig",
    "build_model", "evaluate", "fine_tune", "infer_sequence", "make_dataset", "make_pair",
    "render_reference", "run_dic", "sample_field", "train", "warp",
]
