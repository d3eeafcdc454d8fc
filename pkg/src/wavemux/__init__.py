"""Simulation and analysis toolkit for a wavevector-multiplexed photon-pair source."""
from ._accel import backend, set_backend, use_backend
from .frames import Arm, Frame, FrameBatch, Hit
from .model import DetectionParams, MemoryParams, SourceParams
from .simulator import SimConfig, run_simulation, sample_frame, simulate, wollaston_split

__version__ = "0.1.0"

__all__ = [
    "Arm", "DetectionParams", "Frame", "FrameBatch", "Hit", "MemoryParams", "SimConfig",
    "SourceParams", "backend", "run_simulation", "sample_frame", "set_backend", "simulate",
    "use_backend", "wollaston_split",
]
