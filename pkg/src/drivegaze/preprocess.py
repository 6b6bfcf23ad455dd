"""Raw gaze streams to normalized attention maps.

Pipeline: drop blink/saccade samples, aggregate fixations in a small
temporal window around each frame, rasterize onto the target grid, smooth
with an isotropic Gaussian, renormalize.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import AttentionMap, GazeEvent, GazeRecord

#: The smoothing kernel is truncated at this many standard deviations.
GAUSSIAN_TRUNCATE = 4.0


@dataclass(frozen=True)
class PreprocessConfig:
    aggregation_halfwidth: float = 0.01  # seconds around the frame timestamp
    gaussian_sigma: float = 1.5  # pixels at the target resolution
    target_height: int = 32
    target_width: int = 64

    def __post_init__(self) -> None:
        if self.aggregation_halfwidth <= 0:
            raise ValueError(f"aggregation_halfwidth must be > 0, got {self.aggregation_halfwidth}")
        if self.gaussian_sigma <= 0:
            raise ValueError(f"gaussian_sigma must be > 0, got {self.gaussian_sigma}")
        if self.target_height < 1 or self.target_width < 1:
            raise ValueError("target resolution must be positive")


def filter_events(records: Sequence[GazeRecord]) -> List[GazeRecord]:
    """Keep only valid fixation samples, preserving order.

    Blink and saccade movements carry no attention signal and are dropped,
    as are samples flagged invalid by the capture device.
    """
    return [r for r in records if r.event == GazeEvent.FIXATION and r.valid]


def aggregate_fixations(
    records: Sequence[GazeRecord], t: float, halfwidth: float
) -> List[Tuple[float, float]]:
    """Coordinates of records within ``halfwidth`` seconds of ``t`` (inclusive)."""
    return [(r.x, r.y) for r in records if abs(r.timestamp - t) <= halfwidth]


def rasterize_and_smooth(
    points: Sequence[Tuple[float, float]], cfg: PreprocessConfig
) -> AttentionMap:
    """Deposit unit mass per point on the grid, blur, and renormalize.

    Each normalized point (x, y) lands on cell ``(floor(y*H), floor(x*W))``
    clamped to bounds. Smoothing is zero-padded so no mass wraps around; the
    renormalization afterwards restores a total of one. An empty point list
    yields the uniform map.
    """
    h, w = cfg.target_height, cfg.target_width
    if not points:
        return AttentionMap.uniform(h, w)
    grid = np.zeros((h, w))
    for x, y in points:
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"point out of the unit square: ({x}, {y})")
        row = min(int(y * h), h - 1)
        col = min(int(x * w), w - 1)
        grid[row, col] += 1.0
    smoothed = gaussian_filter(grid, cfg.gaussian_sigma, mode="constant", truncate=GAUSSIAN_TRUNCATE)
    return AttentionMap.from_density(smoothed)


def cumulative_heatmap(maps: Sequence[AttentionMap], clip_max: float) -> np.ndarray:
    """Cell-wise mean of the maps, renormalized, then clipped to [0, clip_max].

    The result is a visualization grid, not a valid attention map: the final
    clipping deliberately breaks normalization so that dominant cells do not
    wash out the rest of the rendering.
    """
    if not maps:
        raise ValueError("cannot aggregate an empty list of maps")
    if clip_max <= 0:
        raise ValueError(f"clip_max must be > 0, got {clip_max}")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ValueError(f"shape mismatch: {m.shape} vs {shape}")
    mean = np.mean([m.values for m in maps], axis=0)
    mean = mean / mean.sum()
    return np.clip(mean, 0.0, clip_max)
