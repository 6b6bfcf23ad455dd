"""Attention-prediction baselines: unconditioned, multi-branch, and
state-routed conditional convolution.

All three share a small strided convolutional encoder (pluggable for an
externally supplied feature extractor) and an optional recurrent
convolution over per-frame features. The decoder head ends in a softmax
over flattened grid cells, so every prediction is a valid attention map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (
    AttentionMap,
    DriverState,
    StateKind,
    num_states,
    one_hot,
)

#: Spatial reduction of the encoder: frame rows/cols per feature-grid cell.
ENCODER_STRIDE = 8

KIND_UNCONDITIONED = "unconditioned"
KIND_MULTI_BRANCH = "multi_branch"
KIND_COND_CONV = "cond_conv"
MODEL_KINDS = (KIND_UNCONDITIONED, KIND_MULTI_BRANCH, KIND_COND_CONV)

#: Dropout used outside conditional-convolution decoders.
BASE_DROPOUT = 0.5


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "small_conv"  # or "pretrained_external"
    feature_channels: int = 16
    temporal: str = "recurrent_conv"  # or "none"
    frame_height: int = 256
    frame_width: int = 512

    def __post_init__(self) -> None:
        if self.backbone not in ("small_conv", "pretrained_external"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.temporal not in ("recurrent_conv", "none"):
            raise ValueError(f"unknown temporal mode {self.temporal!r}")
        if self.feature_channels < 1:
            raise ValueError("feature_channels must be positive")
        if self.frame_height % ENCODER_STRIDE or self.frame_width % ENCODER_STRIDE:
            raise ValueError(f"frame size must be divisible by {ENCODER_STRIDE}")

    @property
    def map_height(self) -> int:
        return self.frame_height // ENCODER_STRIDE

    @property
    def map_width(self) -> int:
        return self.frame_width // ENCODER_STRIDE


@dataclass(frozen=True)
class CondConvLayerConfig:
    num_experts: int = 4
    in_channels: int = 0  # 0 = derived from the encoder when building a model
    out_channels: int = 0
    kernel_size: int = 3
    dropout: float = 0.7

    def __post_init__(self) -> None:
        if self.num_experts < 2:
            raise ValueError("a conditioned layer needs at least two experts")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be positive")


@dataclass(frozen=True)
class ModelKind:
    kind: str
    condition_type: Optional[StateKind] = None

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == KIND_UNCONDITIONED:
            if self.condition_type is not None:
                raise ValueError("an unconditioned model takes no condition type")
        elif self.condition_type is None:
            raise ValueError(f"{self.kind} requires a condition type")

    @property
    def num_states(self) -> int:
        return 0 if self.condition_type is None else num_states(self.condition_type)


def multi_branch_select(state: DriverState, n_branches: int) -> int:
    """Index of the decoder branch owning this state (argmax of its one-hot)."""
    vec = one_hot(state)
    if len(vec) != n_branches:
        raise ValueError(f"state {state.label!r} encodes to length {len(vec)}, model has {n_branches} branches")
    return int(np.argmax(vec))


def states_to_onehot(states: Sequence[DriverState], kind: StateKind) -> np.ndarray:
    """Stack one-hot encodings, checking every state against the model's kind."""
    rows = []
    for s in states:
        if s.kind != kind:
            raise ValueError(f"state kind {s.kind.value} does not match condition type {kind.value}")
        rows.append(one_hot(s))
    return np.stack(rows)


class SmallConvEncoder(nn.Module):
    """Four-layer strided encoder: (T, 3, H, W) -> (T, C, H/8, W/8)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c = cfg.feature_channels
        mid = max(4, c)
        self.body = nn.Sequential(
            nn.Conv2d(3, mid, 3, stride=2, padding=1),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, stride=2, padding=1),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, c, 3, stride=2, padding=1),
            nn.BatchNorm2d(c),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x))


class ConvRNNCell(nn.Module):
    """Minimal recurrent convolution: h_t = tanh(conv(x_t) + conv(h_{t-1})).

    Scans causally over the leading (time) dimension.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.input_conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.state_conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        h = torch.zeros_like(feats[0:1])
        outs = []
        for t in range(feats.shape[0]):
            h = torch.tanh(self.input_conv(feats[t : t + 1]) + self.state_conv(h))
            outs.append(h)
        return torch.cat(outs, dim=0)


def _branch_head(channels: int, dropout: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Dropout2d(dropout),
        nn.Conv2d(channels, channels, 3, padding=1),
        nn.BatchNorm2d(channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(channels, 1, 1),
    )


class CondConv2d(nn.Module):
    """Convolution whose kernel is a routed linear combination of experts.

    The routing function maps the driver-state one-hot through a learned
    affine layer followed by a per-component sigmoid, giving one weight in
    (0, 1) per expert. The effective kernel (and bias) is the routed mixture,
    so the layer is exactly equivalent to convolving with each expert and
    mixing the outputs.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 num_experts: int, state_size: int):
        super().__init__()
        if num_experts < 2:
            raise ValueError("need at least two experts")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.num_experts = num_experts
        self.state_size = state_size
        self.experts = nn.Parameter(
            torch.empty(num_experts, out_channels, in_channels, kernel_size, kernel_size)
        )
        self.expert_bias = nn.Parameter(torch.empty(num_experts, out_channels))
        self.route_weight = nn.Parameter(torch.empty(num_experts, state_size))
        self.route_bias = nn.Parameter(torch.zeros(num_experts))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        with torch.no_grad():
            for k in range(self.num_experts):
                nn.init.kaiming_uniform_(self.experts[k], a=math.sqrt(5))
            fan_in = self.in_channels * self.kernel_size * self.kernel_size
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(self.expert_bias, -bound, bound)
            nn.init.normal_(self.route_weight, std=0.5)
            nn.init.zeros_(self.route_bias)

    def routing_weights(self, state: Union[DriverState, torch.Tensor]) -> torch.Tensor:
        """Per-expert mixing weights in (0, 1) for one driver state."""
        if isinstance(state, DriverState):
            vec = one_hot(state)
            if len(vec) != self.state_size:
                raise ValueError(
                    f"state {state.label!r} encodes to length {len(vec)}, layer routes on {self.state_size}"
                )
            onehot = torch.as_tensor(vec, dtype=self.route_weight.dtype)
        else:
            onehot = state.to(self.route_weight.dtype)
            if onehot.shape != (self.state_size,):
                raise ValueError(f"routing input must have shape ({self.state_size},)")
        return torch.sigmoid(self.route_weight @ onehot + self.route_bias)

    def mixed_kernel(self, routing: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Effective kernel and bias for one routing vector."""
        kernel = torch.tensordot(routing, self.experts, dims=([0], [0]))
        bias = routing @ self.expert_bias
        return kernel, bias

    def expert_output(self, x: torch.Tensor, expert_index: int) -> torch.Tensor:
        """Plain convolution with a single expert (reference for equivalence checks)."""
        return F.conv2d(
            x, self.experts[expert_index], self.expert_bias[expert_index],
            padding=self.kernel_size // 2,
        )

    def forward(
        self,
        x: torch.Tensor,
        onehots: torch.Tensor,
        routing_override: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Apply the routed convolution frame-wise.

        ``onehots`` is (T, state_size); ``routing_override`` (test hook)
        replaces the computed routing with a fixed (num_experts,) vector.
        """
        if x.shape[1] != self.in_channels:
            raise ValueError(f"input has {x.shape[1]} channels, layer expects {self.in_channels}")
        if onehots.shape != (x.shape[0], self.state_size):
            raise ValueError(f"routing input must be (T, {self.state_size})")
        out = x.new_empty((x.shape[0], self.out_channels, x.shape[2], x.shape[3]))
        if routing_override is not None:
            kernel, bias = self.mixed_kernel(routing_override.to(x.dtype))
            return F.conv2d(x, kernel, bias, padding=self.kernel_size // 2)
        # Frames sharing a state share a kernel; group to convolve once per state.
        seen: dict[tuple, list[int]] = {}
        for t in range(x.shape[0]):
            seen.setdefault(tuple(onehots[t].tolist()), []).append(t)
        for key, idxs in seen.items():
            routing = self.routing_weights(x.new_tensor(key))
            kernel, bias = self.mixed_kernel(routing)
            out[idxs] = F.conv2d(x[idxs], kernel, bias, padding=self.kernel_size // 2)
        return out


class AttentionModel(nn.Module):
    """Scene-sequence to attention-map predictor, optionally state-conditioned."""

    def __init__(
        self,
        model_kind: ModelKind,
        encoder_cfg: Optional[EncoderConfig] = None,
        condconv_cfg: Optional[CondConvLayerConfig] = None,
        external_backbone: Optional[nn.Module] = None,
        head_dropout: float = BASE_DROPOUT,
    ):
        super().__init__()
        self.model_kind = model_kind
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.condconv_cfg = condconv_cfg or CondConvLayerConfig()
        self.head_dropout = head_dropout
        if self.encoder_cfg.backbone == "pretrained_external":
            if external_backbone is None:
                raise ValueError("backbone 'pretrained_external' needs an externally supplied module")
            self.encoder: nn.Module = external_backbone
        else:
            self.encoder = SmallConvEncoder(self.encoder_cfg)
        c = self.encoder_cfg.feature_channels
        self.temporal = ConvRNNCell(c) if self.encoder_cfg.temporal == "recurrent_conv" else None
        if model_kind.kind == KIND_UNCONDITIONED:
            self.heads = nn.ModuleList([_branch_head(c, head_dropout)])
        elif model_kind.kind == KIND_MULTI_BRANCH:
            self.heads = nn.ModuleList(
                [_branch_head(c, head_dropout) for _ in range(model_kind.num_states)]
            )
        else:
            cc_cfg = self.condconv_cfg
            s = model_kind.num_states
            self.cond_drop1 = nn.Dropout2d(cc_cfg.dropout)
            self.cond1 = CondConv2d(c, c, cc_cfg.kernel_size, cc_cfg.num_experts, s)
            self.cond_norm = nn.BatchNorm2d(c)
            self.cond_drop2 = nn.Dropout2d(cc_cfg.dropout)
            self.cond2 = CondConv2d(c, 1, 1, cc_cfg.num_experts, s)

    @property
    def condition_type(self) -> Optional[StateKind]:
        return self.model_kind.condition_type

    def _features(self, frames: torch.Tensor) -> torch.Tensor:
        cfg = self.encoder_cfg
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ValueError(f"frames must be (T, 3, H, W), got {tuple(frames.shape)}")
        if frames.shape[2] != cfg.frame_height or frames.shape[3] != cfg.frame_width:
            raise ValueError(
                f"frame size {tuple(frames.shape[2:])} does not match config "
                f"({cfg.frame_height}, {cfg.frame_width})"
            )
        feats = self.encoder(frames)
        if self.temporal is not None:
            feats = self.temporal(feats)
        return feats

    def _onehots(self, states: Optional[Sequence[DriverState]], t: int) -> Optional[torch.Tensor]:
        if self.model_kind.kind == KIND_UNCONDITIONED:
            return None
        if states is None:
            raise ValueError(f"{self.model_kind.kind} needs one driver state per frame")
        if len(states) != t:
            raise ValueError(f"got {len(states)} states for {t} frames")
        arr = states_to_onehot(states, self.model_kind.condition_type)  # type: ignore[arg-type]
        return torch.as_tensor(arr, dtype=torch.float32)

    def forward(
        self, frames: torch.Tensor, states: Optional[Sequence[DriverState]] = None
    ) -> torch.Tensor:
        """Log-probabilities over flattened grid cells, shape (T, H*W/64)."""
        feats = self._features(frames)
        onehots = self._onehots(states, feats.shape[0])
        if self.model_kind.kind == KIND_UNCONDITIONED:
            logits = self.heads[0](feats)
        elif self.model_kind.kind == KIND_MULTI_BRANCH:
            assert states is not None
            idxs = [multi_branch_select(s, len(self.heads)) for s in states]
            logits = feats.new_empty((feats.shape[0], 1, feats.shape[2], feats.shape[3]))
            for b in range(len(self.heads)):
                sel = [t for t, i in enumerate(idxs) if i == b]
                if sel:
                    logits[sel] = self.heads[b](feats[sel])
        else:
            assert onehots is not None
            onehots = onehots.to(feats.dtype)
            x = self.cond_drop1(feats)
            x = self.cond1(x, onehots)
            x = F.relu(self.cond_norm(x))
            x = self.cond_drop2(x)
            logits = self.cond2(x, onehots)
        return F.log_softmax(logits.reshape(logits.shape[0], -1), dim=1)

    # ------------------------------------------------------------------
    # Inference helpers (numpy in, domain types out)
    # ------------------------------------------------------------------

    def _frames_tensor(self, frames: Union[np.ndarray, Sequence[np.ndarray]]) -> torch.Tensor:
        arr = np.asarray(frames, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        return torch.from_numpy(arr).permute(0, 3, 1, 2).to(next(self.parameters()).dtype)

    def encode(self, frames: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
        """Per-frame feature grids (T, C, h, w) for a sequence of scene tensors."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                feats = self._features(self._frames_tensor(frames))
        finally:
            self.train(was_training)
        return feats.cpu().numpy()

    def predict(
        self,
        frames: Union[np.ndarray, Sequence[np.ndarray]],
        states: Optional[Sequence[DriverState]] = None,
    ) -> List[AttentionMap]:
        """One normalized attention map per input frame."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                logp = self.forward(self._frames_tensor(frames), states)
        finally:
            self.train(was_training)
        probs = torch.exp(logp).cpu().numpy().astype(np.float64)
        h, w = self.encoder_cfg.map_height, self.encoder_cfg.map_width
        return [AttentionMap(row.reshape(h, w) / row.sum()) for row in probs]

    # ------------------------------------------------------------------
    # Training-harness protocol
    # ------------------------------------------------------------------

    def sequence_log_probs(self, seq) -> torch.Tensor:
        """Forward pass for one training sequence (keeps gradients)."""
        return self.forward(self._frames_tensor(seq.frames), list(seq.states))

    def predict_sequence(self, seq) -> List[AttentionMap]:
        return self.predict(seq.frames, list(seq.states))


class GroundTruthPredictor:
    """Evaluation baseline that replays the recorded ground truth.

    Serves as the gold-standard upper bound in evaluation reports; it cannot
    be trained and only works where ground truth is available.
    """

    condition_type: Optional[StateKind] = None

    def predict_sequence(self, seq) -> List[AttentionMap]:
        return [AttentionMap(g) for g in seq.gt]


def attention_loss(pred, gt) -> Union[float, torch.Tensor]:
    """Cross-entropy ``-sum(gt * ln pred)`` between two cell distributions.

    With torch tensors the result stays differentiable; numpy grids and
    :class:`AttentionMap` inputs return a float. The prediction must be
    strictly positive (a softmax output always is).
    """
    if isinstance(pred, torch.Tensor) and isinstance(gt, torch.Tensor):
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
        return -(gt * torch.log(pred)).sum()
    p = pred.values if isinstance(pred, AttentionMap) else np.asarray(pred, dtype=np.float64)
    g = gt.values if isinstance(gt, AttentionMap) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if np.any(p <= 0.0):
        raise ValueError("prediction must be strictly positive for cross-entropy")
    return float(-(g * np.log(p)).sum())


def build_model(
    model_kind: ModelKind,
    encoder_cfg: Optional[EncoderConfig] = None,
    condconv_cfg: Optional[CondConvLayerConfig] = None,
    seed: int = 0,
    external_backbone: Optional[nn.Module] = None,
    head_dropout: float = BASE_DROPOUT,
) -> AttentionModel:
    """Construct a model with reproducible, seeded initialization."""
    torch.manual_seed(seed)
    return AttentionModel(model_kind, encoder_cfg, condconv_cfg, external_backbone, head_dropout)
