"""
dpetki - Dynamic FDG-PET quantification with an image-derived input function.

Covers the path from a dynamic volume to regional Ki z-scores:
- Reference-frame selection and carotid segmentation
- Image-derived input and peri-carotid tissue curves
- Model-corrected input function fit (Feng input + two-tissue model with
  recovery, spill-over and blood-volume terms)
- Voxelwise Patlak Ki maps and regional z-scores
- Synthetic phantoms with known truth, and evaluation metrics

Example usage:
    from dpetki import generate_phantom, select_frame, segment_carotids

    bundle = generate_phantom(seed=7)
    selection = select_frame(bundle.volume)
    seg = segment_carotids(bundle.volume.frame(selection.index))
"""

__name__ = "dpetki"

from importlib.metadata import version
__version__ = version("dpetki")

from .errors import (
    DpetError,
    VolumeIOError,
    VolumeFormatError,
    BadMagic,
    UnsupportedDatatype,
    Truncated,
    SchedulingMismatch,
    EmptySchedule,
    NonMonotonicTimes,
    ParseError,
    GridMismatch,
    DegenerateInput,
    InsufficientPoints,
    LengthMismatch,
    CropOutOfBounds,
    ConfigError,
    EmptySegmentation,
)

from .volume import (
    FrameSchedule,
    DynVolume,
    Mask,
    Region,
    LabeledMask,
    TAC,
    Box,
    frame_mid_times,
    load_volume,
    save_volume,
    load_nifti,
    save_nifti,
    load_mask,
    save_mask,
    load_labels,
    save_labels,
    tac_to_csv,
    tac_from_csv,
)

from .blood import FengParams, feng_input

from .kinetics import (
    TwoTissueParams,
    MeasurementParams,
    MCIFParams,
    FitConfig,
    FitResult,
    solve_2tc,
    model_observations,
    fit_mcif,
)

from .phantom import (
    PhantomConfig,
    PhantomBundle,
    gaussian_blur,
    generate_phantom,
    write_bundle,
)

from .frames import (
    CropBox,
    FrameSelectConfig,
    FrameSelection,
    default_crop,
    summed_intensity,
    select_reference_frame,
    select_frame,
)

from .segment import (
    SegConfig,
    IdifConfig,
    SegResult,
    binarize_volume,
    threshold_mask,
    label_islands,
    filter_and_merge,
    segment_carotids,
    extract_idif,
    pericarotid_shell,
)

from .parametric import (
    PatlakConfig,
    ZScoreConfig,
    PatlakPoints,
    PatlakFit,
    KiMap,
    RegionReport,
    patlak_points,
    patlak_fit,
    ki_map,
    regional_zscores,
)

from .metrics import (
    dice_coefficient,
    dice_loss,
    bce,
    combined_loss,
    iou,
    precision,
    recall,
    specificity,
    mse,
    mae,
    rmse,
    regression_metrics,
    normalized_rmse,
    mask_report,
    tac_report,
    summarize_folds,
)

from .pipeline import (
    PipelineConfig,
    RunReport,
    run_pipeline,
)

from .terminal import bold, show_params

__all__ = [
    # errors.py
    "DpetError",
    "VolumeIOError",
    "VolumeFormatError",
    "BadMagic",
    "UnsupportedDatatype",
    "Truncated",
    "SchedulingMismatch",
    "EmptySchedule",
    "NonMonotonicTimes",
    "ParseError",
    "GridMismatch",
    "DegenerateInput",
    "InsufficientPoints",
    "LengthMismatch",
    "CropOutOfBounds",
    "ConfigError",
    "EmptySegmentation",
    # volume.py
    "FrameSchedule",
    "DynVolume",
    "Mask",
    "Region",
    "LabeledMask",
    "TAC",
    "Box",
    "frame_mid_times",
    "load_volume",
    "save_volume",
    "load_nifti",
    "save_nifti",
    "load_mask",
    "save_mask",
    "load_labels",
    "save_labels",
    "tac_to_csv",
    "tac_from_csv",
    # blood.py
    "FengParams",
    "feng_input",
    # kinetics.py
    "TwoTissueParams",
    "MeasurementParams",
    "MCIFParams",
    "FitConfig",
    "FitResult",
    "solve_2tc",
    "model_observations",
    "fit_mcif",
    # phantom.py
    "PhantomConfig",
    "PhantomBundle",
    "gaussian_blur",
    "generate_phantom",
    "write_bundle",
    # frames.py
    "CropBox",
    "FrameSelectConfig",
    "FrameSelection",
    "default_crop",
    "summed_intensity",
    "select_reference_frame",
    "select_frame",
    # segment.py
    "SegConfig",
    "IdifConfig",
    "SegResult",
    "binarize_volume",
    "threshold_mask",
    "label_islands",
    "filter_and_merge",
    "segment_carotids",
    "extract_idif",
    "pericarotid_shell",
    # parametric.py
    "PatlakConfig",
    "ZScoreConfig",
    "PatlakPoints",
    "PatlakFit",
    "KiMap",
    "RegionReport",
    "patlak_points",
    "patlak_fit",
    "ki_map",
    "regional_zscores",
    # metrics.py
    "dice_coefficient",
    "dice_loss",
    "bce",
    "combined_loss",
    "iou",
    "precision",
    "recall",
    "specificity",
    "mse",
    "mae",
    "rmse",
    "regression_metrics",
    "normalized_rmse",
    "mask_report",
    "tac_report",
    "summarize_folds",
    # pipeline.py
    "PipelineConfig",
    "RunReport",
    "run_pipeline",
    # terminal.py
    "bold",
    "show_params",
]
