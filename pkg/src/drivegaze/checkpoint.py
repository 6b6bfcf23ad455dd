"""Self-describing weight checkpoints for every model class in the toolkit.

A checkpoint carries a format version, the model class discriminator, the
configs needed to rebuild the architecture, and the named parameter tensors.
Loading rebuilds the model from the stored configs and validates every
parameter shape against them. Bit-exactness across platforms is not
guaranteed.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Union

import torch

from .calibration import CalibrationNet
from .core import StateKind
from .models import (
    AttentionModel,
    CondConvLayerConfig,
    EncoderConfig,
    GroundTruthPredictor,
    ModelKind,
)

CHECKPOINT_FORMAT_VERSION = 1

AnyModel = Union[AttentionModel, CalibrationNet, GroundTruthPredictor]


class CheckpointError(ValueError):
    """Raised for unreadable, mismatched, or future-version checkpoints."""


def save_checkpoint(model: AnyModel, path) -> None:
    container: dict = {"format_version": CHECKPOINT_FORMAT_VERSION}
    if isinstance(model, AttentionModel):
        kind = model.model_kind
        container.update(
            model_class="attention",
            model_kind={
                "kind": kind.kind,
                "condition_type": kind.condition_type.value if kind.condition_type else None,
            },
            encoder_config=asdict(model.encoder_cfg),
            condconv_config=asdict(model.condconv_cfg),
            head_dropout=model.head_dropout,
            state_dict=model.state_dict(),
        )
    elif isinstance(model, CalibrationNet):
        container.update(
            model_class="calibration",
            encoder_config=asdict(model.encoder_cfg),
            dropout=model.dropout_p,
            state_dict=model.state_dict(),
        )
    elif isinstance(model, GroundTruthPredictor):
        container.update(model_class="gt_oracle")
    else:
        raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(container, path)


def load_checkpoint(path) -> AnyModel:
    try:
        container = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # unreadable or tampered file
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(container, dict) or "format_version" not in container:
        raise CheckpointError(f"{path} is not a model checkpoint")
    version = container["format_version"]
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} (supported: {CHECKPOINT_FORMAT_VERSION})"
        )
    model_class = container.get("model_class")
    if model_class == "gt_oracle":
        return GroundTruthPredictor()
    if model_class == "attention":
        kind_raw = container["model_kind"]
        kind = ModelKind(
            kind=kind_raw["kind"],
            condition_type=StateKind(kind_raw["condition_type"]) if kind_raw["condition_type"] else None,
        )
        model: Union[AttentionModel, CalibrationNet] = AttentionModel(
            kind,
            EncoderConfig(**container["encoder_config"]),
            CondConvLayerConfig(**container["condconv_config"]),
            head_dropout=container.get("head_dropout", 0.5),
        )
    elif model_class == "calibration":
        model = CalibrationNet(
            EncoderConfig(**container["encoder_config"]), dropout=container["dropout"]
        )
    else:
        raise CheckpointError(f"unknown model class {model_class!r}")
    try:
        model.load_state_dict(container["state_dict"], strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint parameters do not match stored config: {e}") from e
    model.eval()
    return model
