"""Photon-number-resolving analysis toolkit for electron-multiplying CCDs."""

from .distributions import (
    DiscretePmf,
    GainRegister,
    NoiseParams,
    amplifier_pmf,
    convolve,
    noise_pmf,
    pgn_pmf,
    poisson_gamma_pmf,
)
from .simulator import (
    CameraConfig,
    Frame,
    FrameStack,
    SpdcSource,
    simulate_dark_stack,
    simulate_frames,
    simulate_spdc_frames,
)

__version__ = "0.1.0"

__all__ = [
    "DiscretePmf",
    "GainRegister",
    "NoiseParams",
    "amplifier_pmf",
    "convolve",
    "noise_pmf",
    "pgn_pmf",
    "poisson_gamma_pmf",
    "CameraConfig",
    "Frame",
    "FrameStack",
    "SpdcSource",
    "simulate_dark_stack",
    "simulate_frames",
    "simulate_spdc_frames",
    "__version__",
]
