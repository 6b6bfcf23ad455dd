"""Post-hoc analyses: per-condition cumulative heatmaps and the road-risk map.

The risk map scores each visited road position by how far apart a
distraction-conditioned model's attentive and distracted predictions are
under optimal transport, then median-filters the scores over a world grid.
"""

from __future__ import annotations

from typing import Dict, List, Sequence, Tuple

import numpy as np

from .core import DriverState, Distraction, SessionRecord, StateKind
from .metrics import downsample_map, emd
from .preprocess import cumulative_heatmap

#: Side of one world grid cell for the median filter, meters.
WORLD_CELL_METERS = 5.0


def _strided_frame_indices(session: SessionRecord, stride_m: float) -> List[int]:
    if session.ego_positions is None:
        raise ValueError(f"session {session.session_id!r} has no ego positions for strided sampling")
    pos = np.asarray(session.ego_positions)
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    cumdist = np.concatenate([[0.0], np.cumsum(steps)])
    keep = [0]
    for i in range(1, len(cumdist)):
        if int(cumdist[i] // stride_m) > int(cumdist[keep[-1]] // stride_m):
            keep.append(i)
    return keep


def condition_heatmaps(
    sessions: Sequence[SessionRecord],
    condition_type: StateKind,
    stride_m: float = 5.0,
    clip_max: float = 0.05,
) -> Dict[str, np.ndarray]:
    """One clipped cumulative heatmap per observed condition value.

    Frames are subsampled uniformly in ego distance (one per ``stride_m``
    meters) so slow segments do not dominate, bucketed by condition value,
    and aggregated with :func:`cumulative_heatmap`.
    """
    buckets: Dict[str, list] = {}
    for session in sessions:
        for i in _strided_frame_indices(session, stride_m):
            frame = session.frames[i]
            if frame.state.kind != condition_type:
                raise ValueError(
                    f"frame state kind {frame.state.kind.value} does not match {condition_type.value}"
                )
            buckets.setdefault(frame.state.label, []).append(frame.gt_map)
    if not buckets:
        raise ValueError("no frames to aggregate")
    return {label: cumulative_heatmap(maps, clip_max) for label, maps in sorted(buckets.items())}


def _median_filter_cells(
    base: Dict[Tuple[int, int], float], neighborhood: int
) -> Dict[Tuple[int, int], float]:
    radius = (neighborhood - 1) // 2
    if radius == 0:
        return dict(base)
    out = {}
    for (cx, cy) in base:
        vals = [
            base[(nx, ny)]
            for nx in range(cx - radius, cx + radius + 1)
            for ny in range(cy - radius, cy + radius + 1)
            if (nx, ny) in base
        ]
        out[(cx, cy)] = float(np.median(vals))
    return out


def risk_map(
    model,
    sessions: Sequence[SessionRecord],
    downsample_factor: int = 4,
    neighborhood: int = 3,
    cell_size_m: float = WORLD_CELL_METERS,
) -> List[Tuple[Tuple[float, float], float]]:
    """Location-wise divergence between attentive and distracted predictions.

    For every timestamp the model predicts one attention map per distraction
    pole; the transport distance between the (downsampled) pair is attached
    to the ego position. Positions are discretized onto a square world grid,
    each cell takes the median of its samples, and a median filter over the
    ``neighborhood x neighborhood`` cell window smooths the field. Returns
    ``((x, y), risk)`` pairs at cell centers, ordered by position.
    """
    if getattr(model, "condition_type", None) != StateKind.DISTRACTION:
        raise ValueError("risk mapping needs a distraction-conditioned model")
    if neighborhood < 1:
        raise ValueError("neighborhood must be >= 1")
    attentive = DriverState.of_distraction(Distraction.ATTENTIVE)
    distracted = DriverState.of_distraction(Distraction.DISTRACTED)
    samples: Dict[Tuple[int, int], list] = {}
    for session in sessions:
        if session.ego_positions is None:
            raise ValueError(f"session {session.session_id!r} has no ego positions")
        frames = np.stack([f.frame for f in session.frames])
        n = len(session.frames)
        preds_att = model.predict(frames, [attentive] * n)
        preds_dis = model.predict(frames, [distracted] * n)
        for (x, y), pa, pd in zip(session.ego_positions, preds_att, preds_dis):
            risk = emd(downsample_map(pa, downsample_factor), downsample_map(pd, downsample_factor))
            cell = (int(np.floor(x / cell_size_m)), int(np.floor(y / cell_size_m)))
            samples.setdefault(cell, []).append(risk)
    base = {cell: float(np.median(vals)) for cell, vals in samples.items()}
    filtered = _median_filter_cells(base, neighborhood)
    out = []
    for (cx, cy) in sorted(filtered):
        center = ((cx + 0.5) * cell_size_m, (cy + 0.5) * cell_size_m)
        out.append((center, filtered[(cx, cy)]))
    return out


def write_risk_table(entries, path, meta: dict) -> None:
    """Tab-delimited (position_x, position_y, risk) table with a meta header."""
    from pathlib import Path

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        header = " ".join(f"{k}={v}" for k, v in sorted(meta.items()))
        f.write(f"# {header}\n")
        f.write("position_x\tposition_y\trisk\n")
        for (x, y), risk in entries:
            f.write(f"{x:.3f}\t{y:.3f}\t{risk:.9f}\n")


def read_risk_table(path) -> List[Tuple[Tuple[float, float], float]]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.startswith("#") or line.startswith("position_x"):
                continue
            x, y, risk = line.split("\t")
            entries.append(((float(x), float(y)), float(risk)))
    return entries


def plot_risk(entries, path) -> None:
    """Static heat-scatter rendering of a risk table."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [e[0][0] for e in entries]
    ys = [e[0][1] for e in entries]
    risks = [e[1] for e in entries]
    fig, ax = plt.subplots(figsize=(8, 4))
    sc = ax.scatter(xs, ys, c=risks, cmap="inferno", s=60, marker="s")
    fig.colorbar(sc, ax=ax, label="distraction risk (transport distance)")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title("location-wise distraction risk")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
