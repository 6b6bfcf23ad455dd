"""Seeded synthetic driving scenarios with state-dependent ground truth.

Stands in for recorded drive data at desk scale: procedurally rendered
scene tensors, per-segment driver states, periodic intersections, attention
maps built from a forward-road base plus state-dependent components, and a
degraded low-resolution gaze channel (systematic center shift, per-frame
scatter, uniform noise floor).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .calibration import apply_shift
from .core import (
    AttentionMap,
    DriveMode,
    DriverState,
    Distraction,
    FrameSample,
    Intention,
    SessionRecord,
    StateKind,
)
from .preprocess import GAUSSIAN_TRUNCATE

#: Mixing weight of the uniform noise floor in the degraded webcam channel.
WEBCAM_NOISE_FLOOR = 0.1

#: Fraction of the map height occupied by the rear-mirror band (top rows).
MIRROR_BAND_FRACTION = 1.0 / 8.0


@dataclass(frozen=True)
class SynthScenarioConfig:
    seed: int = 0
    n_sessions: int = 1
    frames_per_session: int = 64
    mode: DriveMode = DriveMode.AUTOPILOT
    condition_type: StateKind = StateKind.DISTRACTION
    tunnel_strength: float = 1.0  # distraction-state contrast (center re-concentration)
    cross_gaze_strength: float = 1.0  # intention side bias toward the oncoming region
    webcam_shift: Tuple[int, int] = (0, 0)  # systematic (row, col) center shift, cells
    webcam_dispersion: float = 0.0  # per-frame scatter of the low-res channel, cells
    intersection_spacing: float = 100.0  # meters between intersections
    fps: float = 4.0
    speed_mps: float = 8.0
    map_height: int = 32
    map_width: int = 64
    mirror_strength: float = 0.5  # rear-mirror component weight for attentive frames
    uniform_floor: float = 0.05  # relative weight of the uniform support floor
    state_segment_frames: int = 16  # distraction-state segment length
    # Restrict state-dependent components to intersection approaches
    # (dist <= gate_radius); used for localized-divergence experiments.
    state_effects_near_intersections_only: bool = False
    gate_radius: float = 30.0

    def __post_init__(self) -> None:
        if self.frames_per_session < 1:
            raise ValueError("frames_per_session must be >= 1")
        if self.n_sessions < 1:
            raise ValueError("n_sessions must be >= 1")
        if self.webcam_dispersion < 0:
            raise ValueError("webcam_dispersion must be >= 0")
        if self.tunnel_strength < 0 or self.cross_gaze_strength < 0:
            raise ValueError("conditioning strengths must be >= 0")
        if self.map_height < 4 or self.map_width < 4:
            raise ValueError("map resolution too small")
        if self.intersection_spacing <= 0 or self.speed_mps <= 0 or self.fps <= 0:
            raise ValueError("spacing, speed, and fps must be positive")

    @property
    def frame_height(self) -> int:
        return self.map_height * 8

    @property
    def frame_width(self) -> int:
        return self.map_width * 8


def scenario_defaults(mode: DriveMode, condition_type: StateKind, **overrides) -> SynthScenarioConfig:
    """Config with mode-aware defaults (stronger tunnel contrast in autopilot)."""
    base = dict(mode=mode, condition_type=condition_type)
    if "tunnel_strength" not in overrides:
        base["tunnel_strength"] = 1.5 if mode == DriveMode.AUTOPILOT else 1.0
    base.update(overrides)
    return SynthScenarioConfig(**base)


def _gaussian_component(h: int, w: int, center: Tuple[float, float], sigma: Tuple[float, float]) -> np.ndarray:
    rows = np.exp(-0.5 * ((np.arange(h) - center[0]) / sigma[0]) ** 2)
    cols = np.exp(-0.5 * ((np.arange(w) - center[1]) / sigma[1]) ** 2)
    grid = np.outer(rows, cols)
    return grid / grid.sum()


def gt_attention_map(state: DriverState, dist_to_intersection: float, cfg: SynthScenarioConfig) -> AttentionMap:
    """Deterministic ground-truth map for one frame.

    Mixture of a forward-road Gaussian at the scene center, a uniform support
    floor, and a state-dependent component: a left (right) intention adds
    mass over the right (left) oncoming region, a distracted state re-
    concentrates mass at the center, and an attentive state adds mass on the
    rear-mirror band. The distraction contrast (both poles) scales with
    ``tunnel_strength``, the intention bias with ``cross_gaze_strength``, so
    zero strengths give state-independent maps.
    """
    h, w = cfg.map_height, cfg.map_width
    center = (h / 2.0, w / 2.0)
    grid = _gaussian_component(h, w, center, (0.08 * h, 0.05 * w)).copy()
    grid += cfg.uniform_floor / (h * w)
    gated = 1.0
    if cfg.state_effects_near_intersections_only and dist_to_intersection > cfg.gate_radius:
        gated = 0.0
    if state.kind == StateKind.INTENTION:
        weight = cfg.cross_gaze_strength * gated
        if weight > 0 and state.intention == Intention.LEFT:
            grid += weight * _gaussian_component(h, w, (h / 2.0, 0.78 * w), (0.08 * h, 0.05 * w))
        elif weight > 0 and state.intention == Intention.RIGHT:
            grid += weight * _gaussian_component(h, w, (h / 2.0, 0.22 * w), (0.08 * h, 0.05 * w))
        # forward: base attention only
    else:
        weight = cfg.tunnel_strength * gated
        if weight > 0 and state.distraction == Distraction.DISTRACTED:
            grid += weight * _gaussian_component(h, w, center, (0.04 * h, 0.025 * w))
        elif weight > 0 and state.distraction == Distraction.ATTENTIVE:
            band_center = (MIRROR_BAND_FRACTION * h / 2.0, w / 2.0)
            grid += weight * cfg.mirror_strength * _gaussian_component(
                h, w, band_center, (0.03 * h, 0.2 * w)
            )
    return AttentionMap(grid / grid.sum())


def degrade_to_webcam(
    gt: AttentionMap,
    shift: Tuple[int, int],
    dispersion: float,
    rng: Optional[np.random.Generator] = None,
) -> AttentionMap:
    """Low-cost-device view of a ground-truth map.

    Translates the map by the systematic ``shift`` (plus, when an rng is
    given and dispersion is positive, a per-frame integer jitter with that
    standard deviation), blurs with a Gaussian of sigma ``dispersion``, and
    mixes in a uniform noise floor. With zero dispersion and zero shift the
    result is exactly ``0.9 * gt + 0.1 * uniform``.
    """
    if dispersion < 0:
        raise ValueError("dispersion must be >= 0")
    dr, dc = int(shift[0]), int(shift[1])
    if rng is not None and dispersion > 0:
        dr += int(round(rng.normal(0.0, dispersion)))
        dc += int(round(rng.normal(0.0, dispersion)))
    h, w = gt.shape
    dr = int(np.clip(dr, -h, h))
    dc = int(np.clip(dc, -w, w))
    shifted = apply_shift(gt, (dr, dc))
    grid = shifted.values
    if dispersion > 0:
        grid = gaussian_filter(grid, dispersion, mode="constant", truncate=GAUSSIAN_TRUNCATE)
        total = grid.sum()
        grid = grid / total if total > 0 else np.full((h, w), 1.0 / (h * w))
    mixed = (1.0 - WEBCAM_NOISE_FLOOR) * grid + WEBCAM_NOISE_FLOOR / (h * w)
    return AttentionMap(mixed)


def _render_frame(
    dist: float, travelled: float, cfg: SynthScenarioConfig, rng: np.random.Generator
) -> np.ndarray:
    """Procedural scene tensor: sky, road trapezoid, lane dashes, mirror band,
    oncoming-car blobs, and a crossing-road band that appears on approach."""
    hf, wf = cfg.frame_height, cfg.frame_width
    img = np.empty((hf, wf, 3), dtype=np.float32)
    horizon = int(0.45 * hf)
    # sky gradient and ground
    sky = np.linspace(0.75, 0.55, horizon, dtype=np.float32)
    img[:horizon] = sky[:, None, None] * np.array([0.85, 0.9, 1.0], dtype=np.float32)
    img[horizon:] = 0.28
    # road trapezoid widening toward the bottom
    rows = np.arange(horizon, hf)
    progress = (rows - horizon) / max(1, hf - horizon)
    half = ((0.03 + 0.42 * progress) * wf).astype(int)
    for r, hw in zip(rows, half):
        img[r, wf // 2 - hw : wf // 2 + hw] = 0.35
    # dashed center line, phase tied to distance travelled
    dash_rows = rows[rows >= horizon + hf // 8]
    phase = int(travelled * 2.0)
    on = ((dash_rows + phase) % 16) < 8
    lane_hw = max(1, wf // 128)
    for r, o in zip(dash_rows, on):
        if o:
            img[r, wf // 2 - lane_hw : wf // 2 + lane_hw] = 0.8
    # crossing-road band grows as the intersection nears
    if dist <= cfg.gate_radius:
        band = 2 + int((1.0 - dist / cfg.gate_radius) * 0.1 * hf)
        img[horizon + 1 : horizon + 1 + band, int(0.1 * wf) : int(0.9 * wf)] = 0.55
    # oncoming cars: up to two random blobs below the band region
    for _ in range(int(rng.integers(0, 3))):
        cy = int(rng.integers(horizon + hf // 8, hf - hf // 8))
        cx = int(rng.integers(wf // 8, wf - wf // 8))
        size = int(rng.integers(max(2, hf // 40), max(3, hf // 16)))
        color = rng.uniform(0.45, 0.9, size=3).astype(np.float32)
        img[max(0, cy - size) : cy + size, max(0, cx - 2 * size) : cx + 2 * size] = color
    # rear-mirror band along the top
    band_h = max(1, int(hf * MIRROR_BAND_FRACTION))
    img[:band_h] = 0.18 + 0.02 * float(rng.uniform())
    return np.clip(img, 0.0, 1.0)


def _draw_states(cfg: SynthScenarioConfig, dists: np.ndarray, rng: np.random.Generator):
    n = len(dists)
    if cfg.condition_type == StateKind.INTENTION:
        # one intention per upcoming intersection, constant over its segment
        travelled = np.arange(n) * (cfg.speed_mps / cfg.fps)
        segment = (travelled // cfg.intersection_spacing).astype(int)
        choices = [DriverState.of_intention(v) for v in (Intention.LEFT, Intention.RIGHT, Intention.FORWARD)]
        draws = rng.integers(0, 3, size=int(segment.max()) + 1)
        return [choices[draws[s]] for s in segment]
    poles = (DriverState.of_distraction(Distraction.DISTRACTED),
             DriverState.of_distraction(Distraction.ATTENTIVE))
    seg_len = max(1, cfg.state_segment_frames)
    n_segments = (n + seg_len - 1) // seg_len
    draws = rng.integers(0, 2, size=n_segments)
    return [poles[draws[i // seg_len]] for i in range(n)]


def generate_session(cfg: SynthScenarioConfig, session_index: int) -> SessionRecord:
    """Deterministic session for ``(cfg.seed, session_index)``.

    Uses only a locally seeded generator, so sessions can be produced in
    parallel by index without any shared randomness.
    """
    rng = np.random.default_rng([cfg.seed, session_index])
    n = cfg.frames_per_session
    meters_per_frame = cfg.speed_mps / cfg.fps
    travelled = np.arange(n) * meters_per_frame
    dists = cfg.intersection_spacing - (travelled % cfg.intersection_spacing)
    states = _draw_states(cfg, dists, rng)
    frames = []
    ego = []
    for i in range(n):
        gt = gt_attention_map(states[i], float(dists[i]), cfg)
        webcam = degrade_to_webcam(gt, cfg.webcam_shift, cfg.webcam_dispersion, rng)
        scene = _render_frame(float(dists[i]), float(travelled[i]), cfg, rng)
        frames.append(
            FrameSample(
                frame=scene,
                timestamp=i / cfg.fps,
                state=states[i],
                gt_map=gt,
                webcam_map=webcam,
                dist_to_intersection=float(dists[i]),
                mode=cfg.mode,
            )
        )
        ego.append((float(travelled[i]), 0.0))
    return SessionRecord(
        session_id=f"synth-{cfg.seed}-{session_index}",
        fps=cfg.fps,
        mode=cfg.mode,
        frames=tuple(frames),
        ego_positions=tuple(ego),
    )
