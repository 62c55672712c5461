"""Adversarial patches for semantic segmentation: crafting, evaluation, detection."""
from .appearance import AppearanceConfig, AppearanceParams, apply_appearance, preset, sample_appearance
from .core import IGNORE_INDEX, ClassPalette, Image, LabelMap, Patch, PatchSet, PixelSet, validate_pair
from .datasets import Dataset, PatchMeta, Sample, __version__, load_dataset, load_patch, save_dataset, save_patch
from .detector import (
    DetectorCalibration,
    calibrate_decision_threshold,
    calibrate_stats,
    compress_features,
    detect,
    detection_scores,
)
from .errors import NumericalError, SegPatchError, ValidationError
from .losses import (
    LossConfig,
    activation_loss,
    adaptive_gamma,
    adv_gradient,
    build_target_label,
    defense_aware_gradient,
    nps,
    pixelwise_ce,
    smoothness,
    split_upsilon,
    total_gradient,
)
from .metrics import (
    ConfusionMatrix,
    accumulate_confusion,
    adversarial_effect,
    mask_patch_white,
    miou_macc,
    roc_auc,
)
from .model import SegModel, ToyNet, TorchSegAdapter, forward, input_gradient, load_model, predict_ss, pretrained_toynet
from .optimizer import OptimizeConfig, OptimizeReport, evaluate_patches, init_patch, init_patch_set, optimize_patch, patched_images
from .placement import (
    AffinePlacement,
    CameraIntrinsics,
    EOTConfig,
    Pose,
    ProjectivePlacement,
    apply_patches,
    estimate_homography,
    intrinsics_from_fov,
    project_surface_point,
    sample_eot_placement,
    warp_patch,
)
from .scenes import generate_projective_scene, generate_synthetic_scene
