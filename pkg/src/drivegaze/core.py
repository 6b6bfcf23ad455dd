"""Shared domain types: attention maps, gaze samples, driver states, sessions.

All types here are immutable value objects and safe to share across threads.
Operations are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

#: Tolerance used everywhere a grid must sum to one.
NORMALIZATION_TOL = 1e-6

#: Sentinel distance for frames with no upcoming intersection.
OPEN_ROAD = math.inf

#: Default resolution of attention grids (rows, columns).
DEFAULT_MAP_SHAPE = (32, 64)

#: Default resolution of scene frames (rows, columns).
DEFAULT_FRAME_SHAPE = (256, 512)


class GazeEvent(str, Enum):
    FIXATION = "fixation"
    SACCADE = "saccade"
    BLINK = "blink"


class GazeSource(str, Enum):
    TRACKER = "tracker"
    WEBCAM = "webcam"


class DriveMode(str, Enum):
    AUTOPILOT = "autopilot"
    MANUAL = "manual"


class StateKind(str, Enum):
    INTENTION = "intention"
    DISTRACTION = "distraction"


class Intention(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    FORWARD = "forward"
    NONE = "none"


class Distraction(str, Enum):
    DISTRACTED = "distracted"
    ATTENTIVE = "attentive"
    NONE = "none"


#: Encoding order of the one-hot vectors (fixed, relied on by branch selection).
INTENTION_ORDER: Tuple[Intention, ...] = (Intention.LEFT, Intention.RIGHT, Intention.FORWARD)
DISTRACTION_ORDER: Tuple[Distraction, ...] = (Distraction.DISTRACTED, Distraction.ATTENTIVE)


@dataclass(frozen=True, eq=False)
class AttentionMap:
    """Non-negative attention mass on a 2-D grid over the driving scene.

    The normalized form (cells summing to one within ``NORMALIZATION_TOL``)
    is the only form exchanged between modules; raw densities stay inside
    preprocessing. The wrapped array is copied and made read-only. Row 0 is
    the top of the scene, column 0 the left edge.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"attention map must be a non-empty 2-D grid, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @classmethod
    def uniform(cls, height: int, width: int) -> "AttentionMap":
        return cls(np.full((height, width), 1.0 / (height * width)))

    @classmethod
    def delta(cls, height: int, width: int, row: int, col: int) -> "AttentionMap":
        grid = np.zeros((height, width))
        grid[row, col] = 1.0
        return cls(grid)

    @classmethod
    def from_density(cls, grid: np.ndarray) -> "AttentionMap":
        """Normalize a raw density grid into a valid map.

        Negative cells are clipped before normalizing; an all-zero density
        falls back to the uniform map (maximum-entropy non-commitment).
        """
        arr = np.clip(np.asarray(grid, dtype=np.float64), 0.0, None)
        total = arr.sum()
        if total <= 0.0:
            return cls.uniform(arr.shape[0], arr.shape[1])
        return cls(arr / total)

    def argmax_cell(self) -> Tuple[int, int]:
        """Peak cell, ties broken by smallest row then smallest column."""
        flat = int(np.argmax(self.values))
        return flat // self.width, flat % self.width


def validate_map(m: AttentionMap) -> bool:
    """True iff every cell is finite and non-negative and the mass sums to one.

    Pure predicate: never mutates its argument.
    """
    v = m.values
    if not np.all(np.isfinite(v)):
        return False
    if np.any(v < 0.0):
        return False
    return abs(float(v.sum()) - 1.0) <= NORMALIZATION_TOL


@dataclass(frozen=True)
class DriverState:
    """The conditioning variable: intersection intention or distraction state."""

    kind: StateKind
    intention: Intention = Intention.NONE
    distraction: Distraction = Distraction.NONE

    def __post_init__(self) -> None:
        if self.kind == StateKind.INTENTION:
            if self.intention == Intention.NONE or self.distraction != Distraction.NONE:
                raise ValueError(f"invalid intention state: {self.intention}/{self.distraction}")
        else:
            if self.distraction == Distraction.NONE or self.intention != Intention.NONE:
                raise ValueError(f"invalid distraction state: {self.intention}/{self.distraction}")

    @classmethod
    def of_intention(cls, value: str | Intention) -> "DriverState":
        return cls(kind=StateKind.INTENTION, intention=Intention(value))

    @classmethod
    def of_distraction(cls, value: str | Distraction) -> "DriverState":
        return cls(kind=StateKind.DISTRACTION, distraction=Distraction(value))

    @property
    def label(self) -> str:
        """The active value as a plain string, e.g. ``"left"`` or ``"attentive"``."""
        if self.kind == StateKind.INTENTION:
            return self.intention.value
        return self.distraction.value


def num_states(kind: StateKind) -> int:
    """Length of the one-hot encoding for the given condition type (3 or 2)."""
    return len(INTENTION_ORDER) if kind == StateKind.INTENTION else len(DISTRACTION_ORDER)


def states_for(kind: StateKind) -> Tuple[DriverState, ...]:
    """All valid states of one condition type, in one-hot encoding order."""
    if kind == StateKind.INTENTION:
        return tuple(DriverState.of_intention(v) for v in INTENTION_ORDER)
    return tuple(DriverState.of_distraction(v) for v in DISTRACTION_ORDER)


def one_hot(state: DriverState) -> np.ndarray:
    """One-hot encoding: length 3 for intentions (left, right, forward),
    length 2 for distraction states (distracted, attentive)."""
    if state.kind == StateKind.INTENTION:
        order: Sequence = INTENTION_ORDER
        idx = order.index(state.intention)
    else:
        order = DISTRACTION_ORDER
        idx = order.index(state.distraction)
    vec = np.zeros(len(order))
    vec[idx] = 1.0
    return vec


def state_from_one_hot(kind: StateKind, vec: np.ndarray) -> DriverState:
    """Decode a one-hot (or soft) encoding back to a state by argmax."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (num_states(kind),):
        raise ValueError(f"encoding length {vec.shape} does not match kind {kind.value}")
    return states_for(kind)[int(np.argmax(vec))]


@dataclass(frozen=True)
class GazeRecord:
    """One timestamped raw gaze sample with its event classification."""

    timestamp: float
    x: float
    y: float
    valid: bool
    event: GazeEvent
    source: GazeSource

    def __post_init__(self) -> None:
        if self.timestamp < 0.0:
            raise ValueError(f"timestamp must be >= 0, got {self.timestamp}")
        if self.valid and not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"valid sample out of [0,1]^2: ({self.x}, {self.y})")


@dataclass(frozen=True, eq=False)
class FrameSample:
    """Per-frame bundle: scene tensor, driver state, ground-truth gaze map."""

    frame: np.ndarray  # (H, W, 3) float32 in [0, 1]
    timestamp: float
    state: DriverState
    gt_map: AttentionMap
    webcam_map: Optional[AttentionMap] = None
    dist_to_intersection: float = OPEN_ROAD
    mode: DriveMode = DriveMode.MANUAL

    def __post_init__(self) -> None:
        frame = np.asarray(self.frame)
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise ValueError(f"scene tensor must be (H, W, 3), got {frame.shape}")
        if not (self.dist_to_intersection >= 0.0 or math.isinf(self.dist_to_intersection)):
            raise ValueError(f"dist_to_intersection must be >= 0 or open road, got {self.dist_to_intersection}")
        if self.webcam_map is not None and self.webcam_map.shape != self.gt_map.shape:
            raise ValueError("webcam map resolution differs from ground-truth map")


@dataclass(frozen=True, eq=False)
class SessionRecord:
    """An ordered drive session: frames plus optional ego world positions."""

    session_id: str
    fps: float
    mode: DriveMode
    frames: Tuple[FrameSample, ...]
    ego_positions: Optional[Tuple[Tuple[float, float], ...]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.ego_positions is not None:
            object.__setattr__(self, "ego_positions", tuple(tuple(p) for p in self.ego_positions))
            if len(self.ego_positions) != len(self.frames):
                raise ValueError("ego_positions must parallel frames")
        step = 1.0 / self.fps
        for i, fr in enumerate(self.frames):
            if fr.mode != self.mode:
                raise ValueError(f"frame {i} has mode {fr.mode.value}, session is {self.mode.value}")
            if i > 0:
                dt = fr.timestamp - self.frames[i - 1].timestamp
                if abs(dt - step) > 1e-6:
                    raise ValueError(f"frame {i} timestamp step {dt} inconsistent with fps {self.fps}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def distances(self) -> np.ndarray:
        return np.array([f.dist_to_intersection for f in self.frames])
