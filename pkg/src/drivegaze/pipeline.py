"""Experiment harness: sequence extraction, splits, balanced sampling,
training with early stopping, evaluation reports, and session files.
"""

from __future__ import annotations

import copy
import io
import json
import math
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence as Seq, Tuple

import numpy as np
import torch

from .core import (
    AttentionMap,
    DriveMode,
    DriverState,
    FrameSample,
    SessionRecord,
    StateKind,
    states_for,
)
from .metrics import MetricReport, mean_report

SCENARIO_INTERSECTION = "intersection"
SCENARIO_LANE_FOLLOWING = "lane_following"


@dataclass(frozen=True)
class SplitSpec:
    """Parameters of the train/val/test split.

    ``split`` names which subset a downstream consumer should read; the
    splitting itself always produces all three.
    """

    intersection_radius: float = 30.0
    sequences_per_intention_per_split: int = 20
    split: str = "train"

    def __post_init__(self) -> None:
        if self.intersection_radius <= 0:
            raise ValueError("intersection_radius must be positive")
        if self.sequences_per_intention_per_split < 1:
            raise ValueError("sequences_per_intention_per_split must be >= 1")
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 100
    early_stop_patience: int = 10

    def __post_init__(self) -> None:
        for name in ("learning_rate", "beta1", "beta2", "eps_opt", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("batch_size, max_epochs, and early_stop_patience must be >= 1")


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


class SessionFormatError(ValueError):
    """Raised on malformed, truncated, or unsupported session files."""


@dataclass(frozen=True, eq=False)
class Sequence:
    """One contiguous, single-state run of frames cut from a session."""

    session_id: str
    start: int  # index of the first frame within the source session
    frames: np.ndarray  # (T, H, W, 3) float32
    states: Tuple[DriverState, ...]
    gt: np.ndarray  # (T, h, w) float64
    scenario: str
    label: str
    mode: DriveMode
    aux_maps: Optional[np.ndarray] = None  # (T, h, w) low-res gaze inputs

    def __len__(self) -> int:
        return len(self.states)

    def frame_keys(self) -> set:
        return {(self.session_id, self.start + i) for i in range(len(self))}


# ----------------------------------------------------------------------
# Sequence extraction
# ----------------------------------------------------------------------

def extract_intersection_sequences(
    session: SessionRecord, radius: float = 30.0
) -> List[Tuple[int, int]]:
    """Half-open frame ranges covering intersection approaches.

    An approach starts at the first frame with distance <= radius and ends
    at (and includes) the frame of minimum distance for that approach; the
    distance must actually descend into that minimum (driving away from an
    intersection is not an approach). Frames after the minimum, while still
    inside the radius, belong to neither scenario.
    """
    d = session.distances
    n = len(d)
    ranges: List[Tuple[int, int]] = []
    i = 0
    while i < n:
        if d[i] <= radius and (i == 0 or d[i - 1] > radius):
            j = i
            while j + 1 < n and d[j + 1] < d[j]:
                j += 1
            if j > i:
                ranges.append((i, j + 1))
            i = j + 1
            while i < n and d[i] <= radius:
                i += 1
        else:
            i += 1
    return ranges


def extract_lane_following(
    session: SessionRecord, radius: float = 30.0
) -> List[Tuple[int, int]]:
    """Maximal half-open frame ranges with distance > radius."""
    d = session.distances
    ranges: List[Tuple[int, int]] = []
    start = None
    for i, dist in enumerate(d):
        if dist > radius:
            if start is None:
                start = i
        elif start is not None:
            ranges.append((start, i))
            start = None
    if start is not None:
        ranges.append((start, len(d)))
    return ranges


def _split_on_state_changes(
    session: SessionRecord, rng_range: Tuple[int, int]
) -> List[Tuple[int, int]]:
    start, stop = rng_range
    out = []
    seg_start = start
    for i in range(start + 1, stop):
        if session.frames[i].state != session.frames[i - 1].state:
            out.append((seg_start, i))
            seg_start = i
    out.append((seg_start, stop))
    return out


def _build_sequence(session: SessionRecord, rng_range: Tuple[int, int], scenario: str) -> Sequence:
    start, stop = rng_range
    frames = session.frames[start:stop]
    webcams = [f.webcam_map for f in frames]
    aux = None
    if all(m is not None for m in webcams):
        aux = np.stack([m.values for m in webcams])  # type: ignore[union-attr]
    return Sequence(
        session_id=session.session_id,
        start=start,
        frames=np.stack([f.frame for f in frames]),
        states=tuple(f.state for f in frames),
        gt=np.stack([f.gt_map.values for f in frames]),
        scenario=scenario,
        label=frames[0].state.label,
        mode=session.mode,
        aux_maps=aux,
    )


def sequences_from_session(
    session: SessionRecord,
    radius: float = 30.0,
    scenarios: Tuple[str, ...] = (SCENARIO_INTERSECTION, SCENARIO_LANE_FOLLOWING),
) -> List[Sequence]:
    """Cut a session into single-state sequences per scenario type."""
    out: List[Sequence] = []
    for scenario in scenarios:
        if scenario == SCENARIO_INTERSECTION:
            ranges = extract_intersection_sequences(session, radius)
        elif scenario == SCENARIO_LANE_FOLLOWING:
            ranges = extract_lane_following(session, radius)
        else:
            raise ValueError(f"unknown scenario {scenario!r}")
        for r in ranges:
            out.extend(_build_sequence(session, seg, scenario) for seg in _split_on_state_changes(session, r))
    return out


def default_scenarios(condition_type: StateKind) -> Tuple[str, ...]:
    """Scenario types used for each condition: intersection approaches for
    intentions, lane-following segments for distraction states."""
    if condition_type == StateKind.INTENTION:
        return (SCENARIO_INTERSECTION,)
    return (SCENARIO_LANE_FOLLOWING,)


def default_mode(condition_type: StateKind) -> DriveMode:
    """Drive mode paired with each condition type by default (overridable):
    manual for intention-conditioned runs, autopilot for distraction."""
    return DriveMode.MANUAL if condition_type == StateKind.INTENTION else DriveMode.AUTOPILOT


# ----------------------------------------------------------------------
# Splits and sampling
# ----------------------------------------------------------------------

def make_splits(
    sequences: Seq, spec: SplitSpec, rng: np.random.Generator
) -> Dict[str, List[int]]:
    """Disjoint train/val/test index sets with fixed per-label val/test counts.

    Val and test each receive exactly ``sequences_per_intention_per_split``
    sequences per label; the remainder goes to train. Deterministic given the
    generator state.
    """
    by_label: Dict[str, List[int]] = {}
    for i, seq in enumerate(sequences):
        by_label.setdefault(seq.label, []).append(i)
    need = spec.sequences_per_intention_per_split
    splits: Dict[str, List[int]] = {"train": [], "val": [], "test": []}
    for label in sorted(by_label):
        idxs = by_label[label]
        if len(idxs) < 2 * need:
            raise ValueError(
                f"label {label!r} has {len(idxs)} sequences, needs at least {2 * need} for val+test"
            )
        order = rng.permutation(len(idxs))
        shuffled = [idxs[k] for k in order]
        splits["val"].extend(shuffled[:need])
        splits["test"].extend(shuffled[need : 2 * need])
        splits["train"].extend(shuffled[2 * need :])
    return {k: sorted(v) for k, v in splits.items()}


def reweighted_sampler(sequences: Seq, rng: np.random.Generator) -> Iterator[int]:
    """Infinite index stream with equal expected frequency per label.

    Each draw picks a label uniformly, then a sequence uniformly within the
    label, so imbalanced label counts still yield balanced training batches.
    """
    if not sequences:
        raise ValueError("cannot sample from an empty sequence list")
    by_label: Dict[str, List[int]] = {}
    for i, seq in enumerate(sequences):
        by_label.setdefault(seq.label, []).append(i)
    labels = sorted(by_label)
    while True:
        label = labels[int(rng.integers(len(labels)))]
        pool = by_label[label]
        yield pool[int(rng.integers(len(pool)))]


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------

def make_optimizer(params: Iterable, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        params,
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps_opt,
        weight_decay=cfg.weight_decay,
    )


def _sequence_loss(model, seq: Sequence) -> torch.Tensor:
    logp = model.sequence_log_probs(seq)
    gt = torch.as_tensor(seq.gt.reshape(len(seq), -1), dtype=logp.dtype)
    return -(gt * logp).sum(dim=1).mean()


def _validation_report(model, val_data: Seq) -> MetricReport:
    preds: List[AttentionMap] = []
    gts: List[np.ndarray] = []
    for seq in val_data:
        preds.extend(model.predict_sequence(seq))
        gts.extend(seq.gt)
    return mean_report(preds, gts)


def train(
    model,
    train_data: Seq,
    val_data: Seq,
    cfg: TrainConfig,
    seed: int = 0,
) -> Tuple[object, List[dict]]:
    """Adam-with-weight-decay training with early stopping on validation KL.

    One epoch draws ``len(train_data)`` sequences through the label-balanced
    sampler. The model with the best validation KL is restored at the end.
    History holds one record per epoch: train loss and validation metrics.
    Raises :class:`TrainingDivergedError` if the loss stops being finite.
    """
    if not train_data or not val_data:
        raise ValueError("train and validation data must be non-empty")
    torch.manual_seed(seed)
    sampler = reweighted_sampler(train_data, np.random.default_rng(seed))
    optimizer = make_optimizer(model.parameters(), cfg)
    steps = max(1, math.ceil(len(train_data) / cfg.batch_size))
    history: List[dict] = []
    best_kl = math.inf
    best_state = copy.deepcopy(model.state_dict())
    epochs_since_best = 0
    for epoch in range(cfg.max_epochs):
        model.train()
        epoch_losses = []
        for _ in range(steps):
            batch = [train_data[next(sampler)] for _ in range(cfg.batch_size)]
            optimizer.zero_grad()
            loss = torch.stack([_sequence_loss(model, seq) for seq in batch]).mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        report = _validation_report(model, val_data)
        if not math.isfinite(report.kl):
            raise TrainingDivergedError(f"non-finite validation divergence at epoch {epoch}")
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_kl": report.kl,
                "val_cc": report.cc,
                "val_entropy": report.entropy,
            }
        )
        if report.kl < best_kl:
            best_kl = report.kl
            best_state = copy.deepcopy(model.state_dict())
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.early_stop_patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model, history


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------

def evaluate(model, test_data: Seq) -> Dict[Tuple[str, str], MetricReport]:
    """Per-(scenario, condition) metric means over the test sequences."""
    if not test_data:
        raise ValueError("cannot evaluate on an empty test set")
    grouped: Dict[Tuple[str, str], Tuple[list, list]] = {}
    for seq in test_data:
        key = (seq.scenario, seq.label)
        preds, gts = grouped.setdefault(key, ([], []))
        preds.extend(model.predict_sequence(seq))
        gts.extend(seq.gt)
    return {key: mean_report(p, g) for key, (p, g) in sorted(grouped.items())}


def report_records(reports: Dict[Tuple[str, str], MetricReport], meta: dict) -> dict:
    """Machine-readable evaluation document: run metadata plus one record per
    (scenario, condition, metric) triple. Key names are stable."""
    records = []
    for (scenario, condition), rep in sorted(reports.items()):
        for metric, value in (("cc", rep.cc), ("kl", rep.kl), ("entropy", rep.entropy)):
            records.append(
                {
                    "scenario": scenario,
                    "condition": condition,
                    "metric": metric,
                    "value": value,
                    "count": rep.count,
                }
            )
    return {"meta": dict(meta), "records": records}


def format_report_table(reports: Dict[Tuple[str, str], MetricReport]) -> str:
    """Fixed-width table with the headline metric columns (arrow = better)."""
    lines = [f"{'scenario':<16} {'condition':<12} {'CC(+)':>8} {'H(-)':>8} {'KL(-)':>8} {'frames':>7}"]
    for (scenario, condition), rep in sorted(reports.items()):
        lines.append(
            f"{scenario:<16} {condition:<12} {rep.cc:>8.4f} {rep.entropy:>8.4f} {rep.kl:>8.4f} {rep.count:>7d}"
        )
    return "\n".join(lines)


# ----------------------------------------------------------------------
# Session serialization
# ----------------------------------------------------------------------

SESSION_MAGIC = b"DGSF"
SESSION_FORMAT_VERSION = 1

_KIND_CODES = {StateKind.INTENTION: 0, StateKind.DISTRACTION: 1}
_KIND_FROM_CODE = {v: k for k, v in _KIND_CODES.items()}


def _state_codes(state: DriverState) -> Tuple[int, int]:
    order = states_for(state.kind)
    return _KIND_CODES[state.kind], order.index(state)


def _state_from_codes(kind_code: int, value_code: int) -> DriverState:
    kind = _KIND_FROM_CODE.get(kind_code)
    if kind is None:
        raise SessionFormatError(f"unknown state kind code {kind_code}")
    order = states_for(kind)
    if not 0 <= value_code < len(order):
        raise SessionFormatError(f"state value code {value_code} out of range for {kind.value}")
    return order[value_code]


def save_session(session: SessionRecord, path) -> None:
    """Write a session as a little-endian binary container.

    Layout: magic, u32 version, length-prefixed JSON header, then one
    length-prefixed block per frame (timestamp, distance, state, maps, scene
    tensor), then the optional ego-position section.
    """
    first = session.frames[0]
    h, w = first.gt_map.shape
    fh, fw = first.frame.shape[:2]
    header = {
        "session_id": session.session_id,
        "fps": session.fps,
        "mode": session.mode.value,
        "map_height": h,
        "map_width": w,
        "frame_height": fh,
        "frame_width": fw,
        "frame_count": len(session.frames),
        "has_ego": session.ego_positions is not None,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(SESSION_MAGIC)
        f.write(struct.pack("<I", SESSION_FORMAT_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for fr in session.frames:
            kind_code, value_code = _state_codes(fr.state)
            buf = io.BytesIO()
            buf.write(struct.pack("<ddBBB", fr.timestamp, fr.dist_to_intersection,
                                  kind_code, value_code, 1 if fr.webcam_map is not None else 0))
            buf.write(np.ascontiguousarray(fr.gt_map.values, dtype="<f8").tobytes())
            if fr.webcam_map is not None:
                buf.write(np.ascontiguousarray(fr.webcam_map.values, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(fr.frame, dtype="<f4").tobytes())
            payload = buf.getvalue()
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)
        if session.ego_positions is not None:
            f.write(struct.pack("<Q", len(session.ego_positions)))
            f.write(np.asarray(session.ego_positions, dtype="<f8").tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise SessionFormatError(f"truncated session file: wanted {n} bytes, got {len(data)}")
    return data


def load_session(path) -> SessionRecord:
    """Read a session container written by :func:`save_session`."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != SESSION_MAGIC:
            raise SessionFormatError(f"not a session file (magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != SESSION_FORMAT_VERSION:
            raise SessionFormatError(
                f"unsupported session format version {version} (supported: {SESSION_FORMAT_VERSION})"
            )
        (header_len,) = struct.unpack("<I", _read_exact(f, 4))
        try:
            header = json.loads(_read_exact(f, header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise SessionFormatError(f"bad session header: {e}") from e
        h, w = int(header["map_height"]), int(header["map_width"])
        fh, fw = int(header["frame_height"]), int(header["frame_width"])
        mode = DriveMode(header["mode"])
        map_bytes = h * w * 8
        frame_bytes = fh * fw * 3 * 4
        frames: List[FrameSample] = []
        for _ in range(int(header["frame_count"])):
            (block_len,) = struct.unpack("<Q", _read_exact(f, 8))
            block = _read_exact(f, block_len)
            fixed = struct.calcsize("<ddBBB")
            ts, dist, kind_code, value_code, has_webcam = struct.unpack("<ddBBB", block[:fixed])
            expected = fixed + map_bytes * (1 + has_webcam) + frame_bytes
            if block_len != expected:
                raise SessionFormatError(
                    f"frame block of {block_len} bytes does not match header dimensions ({expected})"
                )
            off = fixed
            gt = np.frombuffer(block, dtype="<f8", count=h * w, offset=off).reshape(h, w)
            off += map_bytes
            webcam = None
            if has_webcam:
                webcam = np.frombuffer(block, dtype="<f8", count=h * w, offset=off).reshape(h, w)
                off += map_bytes
            scene = np.frombuffer(block, dtype="<f4", count=fh * fw * 3, offset=off).reshape(fh, fw, 3)
            frames.append(
                FrameSample(
                    frame=scene.copy(),
                    timestamp=ts,
                    state=_state_from_codes(kind_code, value_code),
                    gt_map=AttentionMap(gt),
                    webcam_map=AttentionMap(webcam) if webcam is not None else None,
                    dist_to_intersection=dist,
                    mode=mode,
                )
            )
        ego = None
        if header["has_ego"]:
            (count,) = struct.unpack("<Q", _read_exact(f, 8))
            raw = np.frombuffer(_read_exact(f, count * 16), dtype="<f8").reshape(count, 2)
            ego = tuple((float(x), float(y)) for x, y in raw)
    return SessionRecord(
        session_id=str(header["session_id"]),
        fps=float(header["fps"]),
        mode=mode,
        frames=tuple(frames),
        ego_positions=ego,
    )
