"""Desk-scale bidirectional cross-modal 3D volume synthesis.

Paired-modality diffusion with pattern-aware noise estimation, tissue
refinement, tri-planar microstructure refinement, and a phantom data
generator for end-to-end verification on a single machine.
"""

import os as _os

# PDS_THREADS caps numeric-library parallelism; must land in the environment
# before numpy/numba first load, hence before any submodule import.
_threads = _os.environ.get("PDS_THREADS", "")
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMBA_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .config import (
    ConfigError,
    DataError,
    EvaluateConfig,
    PhantomCmdConfig,
    Stage1Config,
    Stage2Config,
    SynthesizeConfig,
    load_json_config,
)
from .manifest import RunManifest, config_hash, new_manifest
from .metrics import QualityReport, build_quality_report, psnr, region_l1, ssim
from .net import (
    AdamW,
    ArchConfig,
    BackboneNet,
    DenoiserNet,
    PerceptionNet,
    RefineNets,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from .nifti import NiftiParseError, load_nifti, save_nifti
from .pdm import (
    LossBreakdown,
    NonFiniteLossError,
    NumericalAbortError,
    Stage1Batch,
    build_stage1_nets,
    load_stage1,
    sample_chain,
    sample_pair,
    stage1_loss,
    stage1_loss_and_grads,
    train_stage1,
)
from .phantom import PhantomConfig, load_dataset, make_phantom_pair, write_dataset
from .refine import (
    TriPlanes,
    load_stage2,
    loss_mic,
    loss_mic_and_grad,
    plane_stack,
    stage2_loss,
    stage2_loss_and_grads,
    tissue_forward,
    train_stage2,
    tri_planar_means,
)
from .schedule import (
    NoiseSchedule,
    build_schedule,
    forward_marginal,
    forward_step,
    reverse_step,
)
from .volume import (
    AtlasMask,
    ModalityPair,
    Series4,
    Volume3,
    normalize,
    resample_trilinear,
    segment_time_axis,
)

__all__ = [
    "AdamW", "ArchConfig", "AtlasMask", "BackboneNet", "ConfigError",
    "DataError", "DenoiserNet", "EvaluateConfig", "LossBreakdown",
    "ModalityPair", "NiftiParseError", "NoiseSchedule", "NonFiniteLossError",
    "NumericalAbortError", "PerceptionNet", "PhantomCmdConfig",
    "PhantomConfig", "QualityReport", "RefineNets", "RunManifest",
    "Series4", "Stage1Batch", "Stage1Config", "Stage2Config",
    "SynthesizeConfig", "TriPlanes", "Volume3", "build_quality_report",
    "build_schedule", "build_stage1_nets", "config_hash", "forward_marginal",
    "forward_step", "grad_check", "load_checkpoint", "load_dataset",
    "load_json_config", "load_nifti", "load_stage1", "load_stage2",
    "loss_mic", "loss_mic_and_grad", "make_phantom_pair", "new_manifest",
    "normalize", "plane_stack", "psnr", "region_l1", "resample_trilinear",
    "reverse_step", "sample_chain", "sample_pair", "save_checkpoint",
    "save_nifti", "segment_time_axis", "ssim", "stage1_loss",
    "stage1_loss_and_grads", "stage2_loss", "stage2_loss_and_grads",
    "tissue_forward", "train_stage1", "train_stage2", "tri_planar_means",
    "write_dataset",
]
