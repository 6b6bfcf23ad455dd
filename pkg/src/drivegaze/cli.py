"""Command-line surface: synthetic data generation, training, evaluation,
gaze calibration, and risk mapping.

Every command is deterministic given its --seed in single-threaded mode and
writes results to files (stdout carries a one-line summary). Each output
embeds a hash of the invocation config. Exit codes: 0 success, 1 usage
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .analysis import plot_risk, read_risk_table, risk_map, write_risk_table
from .calibration import CalibrationConfig, CalibrationNet, build_calibration_net, calibrate_pipeline
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core import AttentionMap, DriveMode, StateKind
from .metrics import mean_report
from .models import (
    CondConvLayerConfig,
    EncoderConfig,
    KIND_COND_CONV,
    KIND_MULTI_BRANCH,
    KIND_UNCONDITIONED,
    ModelKind,
    build_model,
)
from .pipeline import (
    SessionFormatError,
    SplitSpec,
    TrainConfig,
    TrainingDivergedError,
    default_mode,
    default_scenarios,
    evaluate,
    format_report_table,
    load_session,
    make_splits,
    report_records,
    save_session,
    sequences_from_session,
    train,
)
from .synth import generate_session, scenario_defaults

#: Environment variable giving the default --data directory.
DATA_ENV_VAR = "DRIVEGAZE_DATA"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

_MODEL_FLAGS = {
    "unconditioned": KIND_UNCONDITIONED,
    "multi-branch": KIND_MULTI_BRANCH,
    "cond-conv": KIND_COND_CONV,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems via UsageError (exit 1)."""

    def error(self, message):
        raise UsageError(message)


def config_hash(config: dict) -> str:
    """Stable short hash of an invocation config."""
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_json(path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _resolve_data_dir(value: Optional[str]) -> Path:
    if value is None:
        value = os.environ.get(DATA_ENV_VAR)
    if not value:
        raise UsageError(f"--data not given and {DATA_ENV_VAR} is unset")
    path = Path(value)
    if not path.is_dir():
        raise UsageError(f"data directory {path} does not exist")
    return path


def _load_sessions(data_dir: Path):
    paths = sorted(data_dir.glob("*.dgs"))
    if not paths:
        raise UsageError(f"no session files (*.dgs) in {data_dir}")
    return [load_session(p) for p in paths]


def _encoder_cfg_for_sessions(sessions, features: int) -> EncoderConfig:
    first = sessions[0].frames[0]
    fh, fw = first.frame.shape[:2]
    return EncoderConfig(feature_channels=features, frame_height=fh, frame_width=fw)


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------

def _cmd_synth_generate(args) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    if args.sessions < 1:
        raise UsageError("--sessions must be >= 1")
    condition = StateKind(args.condition)
    mode = DriveMode(args.mode) if args.mode else default_mode(condition)
    cfg = scenario_defaults(
        mode,
        condition,
        seed=args.seed,
        n_sessions=args.sessions,
        frames_per_session=args.frames,
        webcam_shift=(args.webcam_shift_row, args.webcam_shift_col),
        webcam_dispersion=args.webcam_dispersion,
        map_height=args.map_height,
        map_width=args.map_width,
        intersection_spacing=args.intersection_spacing,
        state_effects_near_intersections_only=args.localized_states,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash({"command": "synth-generate", **vars(args)})
    files: List[str] = []
    for i in range(cfg.n_sessions):
        session = generate_session(cfg, i)
        name = f"{session.session_id}.dgs"
        save_session(session, out_dir / name)
        files.append(name)
    manifest = {
        "config_hash": chash,
        "seed": args.seed,
        "tool_version": __version__,
        "config": {k: (list(v) if isinstance(v, tuple) else getattr(v, "value", v)) for k, v in vars(cfg).items()},
        "files": files,
    }
    _write_json(out_dir / "manifest.json", manifest)
    print(f"wrote {len(files)} sessions to {out_dir} (config {chash})")
    return EXIT_OK


def _cmd_train(args) -> int:
    kind_name = _MODEL_FLAGS[args.model]
    if kind_name == KIND_UNCONDITIONED:
        if args.condition is not None:
            raise UsageError("--model unconditioned does not take --condition")
        # The unconditioned baseline still trains on one condition subset;
        # infer it from the data below.
        condition = None
    else:
        if args.condition is None:
            raise UsageError(f"--model {args.model} requires --condition")
        condition = StateKind(args.condition)
    data_dir = _resolve_data_dir(args.data)
    sessions = _load_sessions(data_dir)
    data_condition = sessions[0].frames[0].state.kind
    if condition is not None and condition != data_condition:
        raise UsageError(
            f"--condition {condition.value} but data carries {data_condition.value} states"
        )
    if not args.all_modes:
        # default pairing: intention runs on manual drives, distraction on autopilot
        wanted = default_mode(data_condition)
        filtered = [s for s in sessions if s.mode == wanted]
        if not filtered:
            raise UsageError(
                f"{data_condition.value} training defaults to {wanted.value}-mode sessions and the "
                f"data directory has none; pass --all-modes to train on every session"
            )
        sessions = filtered
    scenarios = default_scenarios(data_condition)
    sequences = []
    for s in sessions:
        sequences.extend(sequences_from_session(s, radius=args.radius, scenarios=scenarios))
    if not sequences:
        raise UsageError("no usable sequences in the data directory")
    spec = SplitSpec(intersection_radius=args.radius, sequences_per_intention_per_split=args.split_count)
    splits = make_splits(sequences, spec, np.random.default_rng(args.seed))
    train_data = [sequences[i] for i in splits["train"]] or [sequences[i] for i in splits["val"]]
    val_data = [sequences[i] for i in splits["val"]]
    model_kind = ModelKind(kind=kind_name, condition_type=condition)
    enc_cfg = _encoder_cfg_for_sessions(sessions, args.features)
    model = build_model(
        model_kind,
        enc_cfg,
        CondConvLayerConfig(dropout=args.cond_dropout),
        seed=args.seed,
        head_dropout=args.head_dropout,
    )
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        early_stop_patience=args.patience,
    )
    chash = config_hash({"command": "train", **vars(args)})
    try:
        model, history = train(model, train_data, val_data, cfg, seed=args.seed)
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(model, args.out)
    history_path = args.history or (str(args.out) + ".history.json")
    _write_json(
        history_path,
        {"config_hash": chash, "seed": args.seed, "tool_version": __version__, "epochs": history},
    )
    final = history[-1]
    print(
        f"trained {args.model} for {len(history)} epochs, "
        f"val divergence {final['val_kl']:.4f} -> {args.out} (config {chash})"
    )
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    data_dir = _resolve_data_dir(args.data)
    sessions = _load_sessions(data_dir)
    model = load_checkpoint(args.ckpt)
    condition = sessions[0].frames[0].state.kind
    model_condition = getattr(model, "condition_type", None)
    if model_condition is not None and model_condition != condition:
        raise UsageError(
            f"checkpoint is {model_condition.value}-conditioned but data carries {condition.value} states"
        )
    sequences = []
    for s in sessions:
        sequences.extend(sequences_from_session(s, radius=args.radius))
    reports = evaluate(model, sequences)
    chash = config_hash({"command": "evaluate", **vars(args)})
    meta = {"config_hash": chash, "seed": args.seed, "tool_version": __version__, "checkpoint": str(args.ckpt)}
    _write_json(args.report, report_records(reports, meta))
    print(format_report_table(reports))
    print(f"wrote evaluation report to {args.report} (config {chash})")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    data_dir = _resolve_data_dir(args.data)
    sessions = _load_sessions(data_dir)
    coarse = args.coarse == "on"
    fine = args.fine == "on"
    net: Optional[CalibrationNet] = None
    if fine:
        if args.ckpt is None:
            raise UsageError("--fine on requires --ckpt")
        loaded = load_checkpoint(args.ckpt)
        if not isinstance(loaded, CalibrationNet):
            raise UsageError("--ckpt must point to a calibration checkpoint")
        net = loaded
    cfg = CalibrationConfig(window=args.window, max_offset=args.max_offset, coarse=coarse, fine_tune=fine)
    preds: List[AttentionMap] = []
    gts = []
    for session in sessions:
        preds.extend(calibrate_pipeline(session, cfg, net))
        gts.extend(f.gt_map for f in session.frames)
    report = mean_report(preds, gts)
    chash = config_hash({"command": "calibrate", **vars(args)})
    payload = {
        "meta": {"config_hash": chash, "seed": args.seed, "tool_version": __version__},
        "cell": {"coarse": coarse, "fine_tune": fine},
        "records": [
            {"metric": "kl", "value": report.kl, "count": report.count},
            {"metric": "cc", "value": report.cc, "count": report.count},
            {"metric": "entropy", "value": report.entropy, "count": report.count},
        ],
    }
    _write_json(args.report, payload)
    print(
        f"calibrate coarse={args.coarse} fine={args.fine}: divergence {report.kl:.4f} "
        f"over {report.count} frames -> {args.report} (config {chash})"
    )
    return EXIT_OK


def _cmd_calibrate_train(args) -> int:
    data_dir = _resolve_data_dir(args.data)
    sessions = _load_sessions(data_dir)
    coarse_cfg = CalibrationConfig(window=args.window, max_offset=args.max_offset, coarse=True, fine_tune=False)
    sequences = []
    for session in sessions:
        centered = calibrate_pipeline(session, coarse_cfg)
        for seq in sequences_from_session(session, radius=args.radius):
            seq_maps = np.stack([centered[seq.start + i].values for i in range(len(seq))])
            sequences.append(dataclasses.replace(seq, aux_maps=seq_maps))
    if len(sequences) < 2:
        raise UsageError("need at least two sequences to train the calibration network")
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(sequences))
    n_val = max(1, len(sequences) // 5)
    val_data = [sequences[i] for i in order[:n_val]]
    train_data = [sequences[i] for i in order[n_val:]]
    enc_cfg = _encoder_cfg_for_sessions(sessions, args.features)
    net = build_calibration_net(enc_cfg, seed=args.seed, dropout=args.dropout)
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        early_stop_patience=args.patience,
    )
    chash = config_hash({"command": "calibrate-train", **vars(args)})
    try:
        net, history = train(net, train_data, val_data, cfg, seed=args.seed)
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(net, args.out)
    _write_json(
        str(args.out) + ".history.json",
        {"config_hash": chash, "seed": args.seed, "tool_version": __version__, "epochs": history},
    )
    print(
        f"trained calibration net for {len(history)} epochs, "
        f"val divergence {history[-1]['val_kl']:.4f} -> {args.out} (config {chash})"
    )
    return EXIT_OK


def _cmd_risk_map(args) -> int:
    data_dir = _resolve_data_dir(args.data)
    sessions = _load_sessions(data_dir)
    model = load_checkpoint(args.ckpt)
    entries = risk_map(
        model,
        sessions,
        downsample_factor=args.downsample,
        neighborhood=args.neighborhood,
        cell_size_m=args.cell_size,
    )
    chash = config_hash({"command": "risk-map", **vars(args)})
    write_risk_table(entries, args.out, {"config_hash": chash, "seed": args.seed, "tool_version": __version__})
    print(f"wrote {len(entries)} risk cells to {args.out} (config {chash})")
    return EXIT_OK


def _cmd_risk_plot(args) -> int:
    entries = read_risk_table(args.table)
    plot_risk(entries, args.out)
    print(f"rendered {len(entries)} risk cells to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# Parser wiring
# ----------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="drivegaze", description=__doc__)
    parser.add_argument("--version", action="version", version=f"drivegaze {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-generate", help="write seeded synthetic sessions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sessions", type=int, default=4)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--condition", choices=[k.value for k in StateKind], default="distraction")
    p.add_argument("--mode", choices=[m.value for m in DriveMode], default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--map-height", type=int, default=32)
    p.add_argument("--map-width", type=int, default=64)
    p.add_argument("--webcam-shift-row", type=int, default=0)
    p.add_argument("--webcam-shift-col", type=int, default=0)
    p.add_argument("--webcam-dispersion", type=float, default=0.0)
    p.add_argument("--intersection-spacing", type=float, default=100.0)
    p.add_argument("--localized-states", action="store_true",
                   help="apply state-dependent gaze components only near intersections")
    p.set_defaults(func=_cmd_synth_generate)

    p = sub.add_parser("train", help="train an attention model")
    p.add_argument("--model", choices=sorted(_MODEL_FLAGS), required=True)
    p.add_argument("--condition", choices=[k.value for k in StateKind], default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--features", type=int, default=8)
    p.add_argument("--radius", type=float, default=30.0)
    p.add_argument("--split-count", type=int, default=2)
    p.add_argument("--head-dropout", type=float, default=0.5)
    p.add_argument("--cond-dropout", type=float, default=0.7)
    p.add_argument("--all-modes", action="store_true",
                   help="train on every drive mode instead of the default pairing")
    p.add_argument("--history", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on session data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius", type=float, default=30.0)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("calibrate", help="run one calibration ablation cell")
    p.add_argument("--data", default=None)
    p.add_argument("--coarse", choices=["on", "off"], required=True)
    p.add_argument("--fine", choices=["on", "off"], required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--max-offset", type=int, default=12)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("calibrate-train", help="train the fine calibration network")
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--features", type=int, default=8)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--radius", type=float, default=30.0)
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--max-offset", type=int, default=12)
    p.set_defaults(func=_cmd_calibrate_train)

    p = sub.add_parser("risk-map", help="location-wise distraction-risk table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--downsample", type=int, default=4)
    p.add_argument("--neighborhood", type=int, default=3)
    p.add_argument("--cell-size", type=float, default=5.0)
    p.set_defaults(func=_cmd_risk_map)

    p = sub.add_parser("risk-plot", help="render a risk table as an image")
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_risk_plot)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, SessionFormatError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
