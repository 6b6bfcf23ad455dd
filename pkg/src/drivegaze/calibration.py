"""Two-scale calibration of noisy low-resolution gaze maps.

The coarse stage re-centers each map by the offset between the scene center
and the density peak of a sliding window of recent maps. The fine stage runs
the re-centered maps, concatenated with encoded scene features, through a
recurrent convolution network with a softmax head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import AttentionMap, SessionRecord
from .models import ConvRNNCell, EncoderConfig, SmallConvEncoder


@dataclass(frozen=True)
class CalibrationConfig:
    window: int = 64  # frames aggregated for the coarse offset
    max_offset: int = 12  # clamp for each coarse-shift component, in cells
    fine_tune: bool = True
    coarse: bool = True
    # Compute one offset from the whole sequence instead of a causal
    # per-frame window (non-causal; off by default).
    per_sequence_offset: bool = False

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.max_offset < 0:
            raise ValueError(f"max_offset must be >= 0, got {self.max_offset}")


def coarse_offset(
    low_res_window: Sequence[AttentionMap], max_offset: int = 12
) -> Tuple[int, int]:
    """Offset from the window's density peak to the scene center, in cells.

    The window is aggregated cell-wise, the peak is its argmax (ties broken
    by smallest row, then smallest column), and the returned
    (row_delta, col_delta) moves the peak onto ``(H//2, W//2)``. Each
    component is clamped to ``[-max_offset, max_offset]`` so degenerate
    windows (e.g. near-uniform ones whose tie-broken peak sits in a corner)
    cannot produce pathological shifts.
    """
    if not low_res_window:
        raise ValueError("cannot compute an offset from an empty window")
    shape = low_res_window[0].shape
    for m in low_res_window:
        if m.shape != shape:
            raise ValueError(f"shape mismatch in window: {m.shape} vs {shape}")
    agg = np.mean([m.values for m in low_res_window], axis=0)
    h, w = shape
    flat = int(np.argmax(agg))
    peak = (flat // w, flat % w)
    center = (h // 2, w // 2)
    dr = int(np.clip(center[0] - peak[0], -max_offset, max_offset))
    dc = int(np.clip(center[1] - peak[1], -max_offset, max_offset))
    return dr, dc


def apply_shift(m: AttentionMap, offset: Tuple[int, int]) -> AttentionMap:
    """Translate a map by whole cells, dropping mass shifted out of bounds.

    Vacated cells are zero-filled and the result renormalized; if every cell
    of mass leaves the grid the uniform map is returned.
    """
    dr, dc = int(offset[0]), int(offset[1])
    h, w = m.shape
    if abs(dr) > h or abs(dc) > w:
        raise ValueError(f"offset {offset} exceeds map dimensions {(h, w)}")
    out = np.zeros((h, w))
    src_r = slice(max(0, -dr), min(h, h - dr))
    src_c = slice(max(0, -dc), min(w, w - dc))
    dst_r = slice(max(0, dr), min(h, h + dr))
    dst_c = slice(max(0, dc), min(w, w + dc))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[dst_r, dst_c] = m.values[src_r, src_c]
    return AttentionMap.from_density(out)


class CalibrationNet(nn.Module):
    """Recurrent convolution network refining re-centered gaze maps.

    Per frame, the encoded scene features are concatenated with the centered
    low-resolution map as one extra channel; a recurrent convolution carries
    context forward in time (causal) and a small head with a softmax over
    cells emits the calibrated map.
    """

    def __init__(self, encoder_cfg: Optional[EncoderConfig] = None, dropout: float = 0.5):
        super().__init__()
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.dropout_p = dropout
        self.encoder = SmallConvEncoder(self.encoder_cfg)
        c = self.encoder_cfg.feature_channels
        self.temporal = ConvRNNCell(c + 1)
        self.head = nn.Sequential(
            nn.Dropout2d(dropout),
            nn.Conv2d(c + 1, c, 3, padding=1),
            nn.BatchNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 1, 1),
        )

    def forward(self, frames: torch.Tensor, maps: torch.Tensor) -> torch.Tensor:
        """Log-probabilities over flattened cells; ``maps`` is (T, 1, h, w)."""
        cfg = self.encoder_cfg
        if frames.shape[0] != maps.shape[0]:
            raise ValueError(f"{frames.shape[0]} frames vs {maps.shape[0]} maps")
        if maps.shape[2] != cfg.map_height or maps.shape[3] != cfg.map_width:
            raise ValueError(
                f"map size {tuple(maps.shape[2:])} does not match config "
                f"({cfg.map_height}, {cfg.map_width})"
            )
        feats = self.encoder(frames)
        x = torch.cat([feats, maps.to(feats.dtype)], dim=1)
        x = self.temporal(x)
        logits = self.head(x)
        return F.log_softmax(logits.reshape(logits.shape[0], -1), dim=1)

    def calibrate(
        self,
        frames: Union[np.ndarray, Sequence[np.ndarray]],
        maps: Sequence[AttentionMap],
    ) -> List[AttentionMap]:
        """Inference over one sequence, returning normalized maps."""
        frames_arr = np.asarray(frames, dtype=np.float32)
        maps_arr = np.stack([m.values for m in maps]).astype(np.float32)[:, None]
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                logp = self.forward(
                    torch.from_numpy(frames_arr).permute(0, 3, 1, 2),
                    torch.from_numpy(maps_arr),
                )
        finally:
            self.train(was_training)
        probs = torch.exp(logp).cpu().numpy().astype(np.float64)
        h, w = self.encoder_cfg.map_height, self.encoder_cfg.map_width
        return [AttentionMap(row.reshape(h, w) / row.sum()) for row in probs]

    # Training-harness protocol: sequences carry the (already centered)
    # low-resolution inputs in ``aux_maps``.
    def sequence_log_probs(self, seq) -> torch.Tensor:
        if seq.aux_maps is None:
            raise ValueError("calibration training needs sequences with aux_maps")
        frames = torch.from_numpy(np.asarray(seq.frames, dtype=np.float32)).permute(0, 3, 1, 2)
        maps = torch.from_numpy(np.asarray(seq.aux_maps, dtype=np.float32))[:, None]
        return self.forward(frames, maps)

    def predict_sequence(self, seq) -> List[AttentionMap]:
        if seq.aux_maps is None:
            raise ValueError("calibration inference needs sequences with aux_maps")
        return self.calibrate(seq.frames, [AttentionMap(m) for m in seq.aux_maps])


def build_calibration_net(
    encoder_cfg: Optional[EncoderConfig] = None, seed: int = 0, dropout: float = 0.5
) -> CalibrationNet:
    torch.manual_seed(seed)
    return CalibrationNet(encoder_cfg, dropout=dropout)


def fine_calibrate(
    scene_frames: Union[np.ndarray, Sequence[np.ndarray]],
    centered_maps: Sequence[AttentionMap],
    net: CalibrationNet,
) -> List[AttentionMap]:
    """Refine centered maps against scene features with a trained network."""
    n_frames = len(scene_frames)
    if n_frames != len(centered_maps):
        raise ValueError(f"{n_frames} frames vs {len(centered_maps)} maps")
    return net.calibrate(scene_frames, centered_maps)


def calibrate_pipeline(
    session: SessionRecord,
    cfg: CalibrationConfig,
    net: Optional[CalibrationNet] = None,
) -> List[AttentionMap]:
    """Run the requested calibration stages over one session, causally.

    The offset at frame t uses only the most recent ``min(t+1, window)``
    low-resolution maps (shrinking window during warm-up), so the pipeline is
    defined from frame 0 and output at t never depends on later frames. With
    both stages disabled the raw low-resolution maps are returned unchanged.
    """
    webcams: List[AttentionMap] = []
    for i, fr in enumerate(session.frames):
        if fr.webcam_map is None:
            raise ValueError(f"frame {i} of session {session.session_id!r} has no low-res gaze map")
        webcams.append(fr.webcam_map)
    if cfg.coarse:
        if cfg.per_sequence_offset:
            off = coarse_offset(webcams, cfg.max_offset)
            centered = [apply_shift(m, off) for m in webcams]
        else:
            centered = []
            for t in range(len(webcams)):
                window = webcams[max(0, t + 1 - cfg.window) : t + 1]
                centered.append(apply_shift(webcams[t], coarse_offset(window, cfg.max_offset)))
    else:
        centered = list(webcams)
    if not cfg.fine_tune:
        return centered
    if net is None:
        raise ValueError("fine_tune=True requires a calibration network")
    frames = np.stack([fr.frame for fr in session.frames])
    return fine_calibrate(frames, centered, net)
