"""Dynamic tomography reconstruction with joint optical-flow motion estimation."""

__version__ = "0.1.0"

from .driver import MethodSpec, ReconstructionReport, build_regularizer, mmgks_of, reconstruct
from .flow import FlowField, rescaled_solve_of, reverse_flow, solve_of
from .metrics import QualityScore, rre, score_sequences, ssim
from .mmgks import SolverConfig, mmgks
from .phantoms import ImageSequence, load_sequence, moving_blocks, pinball, save_sequence
from .tomo import (
    AngleSchedule,
    FanBeamGeometry,
    build_fan_beam_operator,
    equal_bins_schedule,
    fixed_schedule,
    random_schedule,
    shifted_interval_schedule,
    simulate_sinogram,
)

__all__ = [
    "AngleSchedule",
    "FanBeamGeometry",
    "FlowField",
    "ImageSequence",
    "MethodSpec",
    "QualityScore",
    "ReconstructionReport",
    "SolverConfig",
    "build_fan_beam_operator",
    "build_regularizer",
    "equal_bins_schedule",
    "fixed_schedule",
    "load_sequence",
    "mmgks",
    "mmgks_of",
    "moving_blocks",
    "pinball",
    "random_schedule",
    "reconstruct",
    "rescaled_solve_of",
    "reverse_flow",
    "rre",
    "save_sequence",
    "score_sequences",
    "shifted_interval_schedule",
    "simulate_sinogram",
    "solve_of",
    "ssim",
]
