"""Simultaneous whole-brain and lesion segmentation of multi-contrast MRI.

An atlas-driven generative model (deformable tetrahedral mesh prior, Gaussian
mixture intensities with a smooth bias field) is fitted by generalized EM;
lesions are then segmented by Gibbs sampling under a learned
variational-autoencoder shape prior.
"""

from .atlas import AtlasMesh, build_atlas, load_atlas, save_atlas
from .estimators import LesionSegmenter, LesionShapeVAE, WholeBrainSegmenter
from .gem import FitConfig, FitResult, fit, fit_lesion_augmented
from .likelihood import AppearanceParams, ClassSharingMap, LesionIntensityPrior
from .metrics import dice, overlap_report, pearson, precision_recall, volumes
from .sampler import SamplerConfig, final_segmentation, lesion_posterior
from .shape_prior import ShapePriorModel, VaeTrainConfig, load_shape_prior, save_shape_prior
from .volume import (
    Contrast,
    LabelMap,
    LesionMask,
    MultiContrastImage,
    ProbabilityMap,
    VolumeGrid,
    load_volume,
    save_volume,
)

__version__ = "0.1.0"

__all__ = [
    "AtlasMesh", "build_atlas", "load_atlas", "save_atlas",
    "LesionSegmenter", "LesionShapeVAE", "WholeBrainSegmenter",
    "FitConfig", "FitResult", "fit", "fit_lesion_augmented",
    "AppearanceParams", "ClassSharingMap", "LesionIntensityPrior",
    "dice", "overlap_report", "pearson", "precision_recall", "volumes",
    "SamplerConfig", "final_segmentation", "lesion_posterior",
    "ShapePriorModel", "VaeTrainConfig", "load_shape_prior", "save_shape_prior",
    "Contrast", "LabelMap", "LesionMask", "MultiContrastImage", "ProbabilityMap", "VolumeGrid",
    "load_volume", "save_volume",
]
