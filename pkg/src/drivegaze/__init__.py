"""drivegaze: driver attention prediction, gaze calibration, and synthetic
driving scenarios for desk-scale experimentation."""

from .core import (
    AttentionMap,
    DriveMode,
    DriverState,
    Distraction,
    FrameSample,
    GazeEvent,
    GazeRecord,
    GazeSource,
    Intention,
    SessionRecord,
    StateKind,
    one_hot,
    validate_map,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionMap",
    "DriveMode",
    "DriverState",
    "Distraction",
    "FrameSample",
    "GazeEvent",
    "GazeRecord",
    "GazeSource",
    "Intention",
    "SessionRecord",
    "StateKind",
    "one_hot",
    "validate_map",
    "__version__",
]
