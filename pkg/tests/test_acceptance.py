"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines; tolerances are fixed here, not calibrated elsewhere.
"""

import dataclasses
import math

import numpy as np
import torch

from drivegaze.calibration import CalibrationConfig, build_calibration_net, calibrate_pipeline, coarse_offset
from drivegaze.core import AttentionMap, DriveMode, DriverState, StateKind
from drivegaze.metrics import cc, emd, entropy, kl
from drivegaze.models import (
    CondConv2d,
    CondConvLayerConfig,
    EncoderConfig,
    ModelKind,
    attention_loss,
    build_model,
)
from drivegaze.pipeline import (
    SplitSpec,
    TrainConfig,
    _sequence_loss,
    evaluate,
    load_session,
    make_splits,
    reweighted_sampler,
    save_session,
    sequences_from_session,
    train,
)
from drivegaze.synth import SynthScenarioConfig, degrade_to_webcam, generate_session, gt_attention_map
from drivegaze.analysis import risk_map

from ot_reference import grid_transport_cost
from support import (
    RuleBasedDistractionPredictor,
    TINY_ENC,
    build_kink_free_model,
    distraction_states,
    intention_states,
    make_sequence,
)

LN_2048 = math.log(2048)


def test_criterion_1_metric_identities():
    uniform = AttentionMap.uniform(32, 64)
    delta = AttentionMap.delta(32, 64, 7, 11)
    assert abs(entropy(uniform) - LN_2048) <= 1e-6
    assert entropy(delta) == 0.0
    rng = np.random.default_rng(0)
    grid = rng.uniform(0.01, 1.0, size=(32, 64))
    p = AttentionMap(grid / grid.sum())
    assert kl(p, p) <= 2e-6
    assert abs(cc(p, p) - 1.0) <= 1e-9
    smoothed = np.zeros((32, 64))
    smoothed[7, 11] = 0.999
    smoothed += 0.001 / 2048
    gt = AttentionMap(smoothed / smoothed.sum())
    assert attention_loss(gt, gt) - entropy(gt) <= 1e-3
    print("ACCEPTANCE 1 PASS: metric identities at stated tolerances")


def test_criterion_2_emd_oracle_equivalence():
    rng = np.random.default_rng(2024)

    def random_map():
        grid = rng.uniform(0.0, 1.0, size=(4, 4))
        return AttentionMap(grid / grid.sum())

    worst = 0.0
    for _ in range(100):
        p, q = random_map(), random_map()
        worst = max(worst, abs(emd(p, q) - grid_transport_cost(p.values, q.values)))
    assert worst <= 1e-6
    for _ in range(200):
        a, b, c = random_map(), random_map(), random_map()
        assert abs(emd(a, b) - emd(b, a)) <= 1e-9
        assert emd(a, c) <= emd(a, b) + emd(b, c) + 1e-9
    print(f"ACCEPTANCE 2 PASS: transport oracle agreement (worst |diff| {worst:.2e}), "
          "symmetry and triangle inequality on 200 seeded triples")


def test_criterion_3_cond_conv_equivalence():
    rng = np.random.default_rng(3)
    worst_select = 0.0
    worst_mix = 0.0
    with torch.no_grad():
        for seed in range(50):
            torch.manual_seed(seed)
            in_c, out_c = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            k = int(rng.choice([1, 3]))
            layer = CondConv2d(in_c, out_c, k, 4, 2).double()
            x = torch.from_numpy(rng.normal(size=(2, in_c, 6, 10)))
            zeros = torch.zeros(2, 2)
            for expert in range(4):
                onehot = torch.zeros(4, dtype=torch.float64)
                onehot[expert] = 1.0
                diff = layer(x, zeros, routing_override=onehot) - layer.expert_output(x, expert)
                worst_select = max(worst_select, float(diff.abs().max()))
            routing = torch.from_numpy(rng.uniform(0.05, 0.95, size=4))
            mixed = layer(x, zeros, routing_override=routing)
            summed = sum(routing[j] * layer.expert_output(x, j) for j in range(4))
            worst_mix = max(worst_mix, float((mixed - summed).abs().max()))
    assert worst_select <= 1e-5
    assert worst_mix <= 1e-5
    print(f"ACCEPTANCE 3 PASS: one-hot routing selects experts (|diff| {worst_select:.2e}), "
          f"mix-then-convolve linearity (|diff| {worst_mix:.2e}) on 50 seeded layers")


def test_criterion_4_gradient_check():
    rng = np.random.default_rng(4)
    step = 1e-4
    cases = [
        (ModelKind(kind="unconditioned"), distraction_states("attentive", "distracted")),
        (ModelKind(kind="multi_branch", condition_type=StateKind.INTENTION),
         intention_states("left", "forward")),
        (ModelKind(kind="cond_conv", condition_type=StateKind.DISTRACTION),
         distraction_states("distracted", "attentive")),
    ]
    checked_groups = 0
    for kind, states in cases:
        seq = make_sequence(TINY_ENC, states, seed=11)
        model = build_kink_free_model(kind, seq)
        model.zero_grad()
        loss = _sequence_loss(model, seq)
        loss.backward()
        for name, param in model.named_parameters():
            grad = param.grad if param.grad is not None else torch.zeros_like(param)
            flat = param.detach().reshape(-1)
            gflat = grad.reshape(-1)
            idxs = rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False)
            for i in idxs:
                orig = flat[i].item()
                with torch.no_grad():
                    flat[i] = orig + step
                    up = _sequence_loss(model, seq).item()
                    flat[i] = orig - step
                    down = _sequence_loss(model, seq).item()
                    flat[i] = orig
                fd = (up - down) / (2 * step)
                an = gflat[i].item()
                assert abs(an - fd) <= 1e-9 + 1e-3 * max(abs(an), abs(fd)), (
                    f"{kind.kind}/{name}[{i}]: analytic {an} vs finite difference {fd}"
                )
            checked_groups += 1
    print(f"ACCEPTANCE 4 PASS: analytic gradients match central differences "
          f"(step {step}) across {checked_groups} parameter groups, all model kinds")


def test_criterion_5_coarse_calibration_recovery():
    cfg = SynthScenarioConfig(seed=0)
    gt = gt_attention_map(DriverState.of_distraction("attentive"), 100.0, cfg)
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng(5000 + trial)
        shift = (int(rng.integers(-8, 9)), int(rng.integers(-8, 9)))
        dispersion = float(rng.uniform(0.0, 2.0))
        window = [degrade_to_webcam(gt, shift, dispersion, rng) for _ in range(64)]
        recovered = coarse_offset(window, max_offset=12)
        if max(abs(recovered[0] + shift[0]), abs(recovered[1] + shift[1])) <= 1:
            hits += 1
    assert hits >= 95
    print(f"ACCEPTANCE 5 PASS: coarse offset recovered within 1 cell in {hits}/100 seeded trials")


def test_criterion_6_calibration_ablation_ordering():
    cfg = SynthScenarioConfig(
        seed=31, n_sessions=10, frames_per_session=48, mode=DriveMode.AUTOPILOT,
        condition_type=StateKind.DISTRACTION, tunnel_strength=1.5,
        map_height=8, map_width=16, state_segment_frames=8,
        webcam_shift=(2, 3), webcam_dispersion=1.0, intersection_spacing=200.0,
    )
    sessions = [generate_session(cfg, i) for i in range(cfg.n_sessions)]
    train_sessions, test_sessions = sessions[:8], sessions[8:]
    window = 16
    coarse_cfg = CalibrationConfig(window=window, coarse=True, fine_tune=False)

    def centered_sequences(session):
        centered = calibrate_pipeline(session, coarse_cfg)
        out = []
        for seq in sequences_from_session(session):
            maps = np.stack([centered[seq.start + i].values for i in range(len(seq))])
            out.append(dataclasses.replace(seq, aux_maps=maps))
        return out

    train_seqs = [q for s in train_sessions[:-1] for q in centered_sequences(s)]
    val_seqs = centered_sequences(train_sessions[-1])
    # reduced scale per the criterion: 8x16 maps, 2 feature channels
    enc = EncoderConfig(feature_channels=2, frame_height=64, frame_width=128)
    net = build_calibration_net(enc, seed=3, dropout=0.0)
    tcfg = TrainConfig(learning_rate=0.03, batch_size=4, max_epochs=120, early_stop_patience=120)
    net, _ = train(net, train_seqs, val_seqs, tcfg, seed=3)

    cells = {}
    for coarse in (False, True):
        for fine in (False, True):
            cell_cfg = CalibrationConfig(window=window, coarse=coarse, fine_tune=fine)
            kls = []
            for s in test_sessions:
                outs = calibrate_pipeline(s, cell_cfg, net if fine else None)
                kls.extend(kl(out, fr.gt_map) for out, fr in zip(outs, s.frames))
            cells[(coarse, fine)] = float(np.mean(kls))
    raw = cells[(False, False)]
    coarse_only = cells[(True, False)]
    fine_only = cells[(False, True)]
    both = cells[(True, True)]
    assert raw > coarse_only, cells
    assert fine_only > both, cells
    assert both < min(raw, coarse_only, fine_only), cells
    print(
        "ACCEPTANCE 6 PASS: ablation divergence pattern "
        f"raw {raw:.3f} > coarse {coarse_only:.3f}; fine {fine_only:.3f} > "
        f"coarse+fine {both:.3f} (minimum of all four cells)"
    )


def _train_and_score(kind, condition, sequences, splits, seed):
    enc = EncoderConfig(feature_channels=6, frame_height=64, frame_width=128)
    model = build_model(
        ModelKind(kind=kind, condition_type=condition),
        enc,
        CondConvLayerConfig(dropout=0.1),
        seed=seed,
        head_dropout=0.1,
    )
    cfg = TrainConfig(learning_rate=0.03, batch_size=4, max_epochs=150, early_stop_patience=150)
    model, _ = train(
        model,
        [sequences[i] for i in splits["train"]],
        [sequences[i] for i in splits["val"]],
        cfg,
        seed=seed,
    )
    reports = evaluate(model, [sequences[i] for i in splits["test"]])
    frames = sum(r.count for r in reports.values())
    mean_kl = sum(r.kl * r.count for r in reports.values()) / frames
    mean_h = sum(r.entropy * r.count for r in reports.values()) / frames
    return mean_kl, mean_h


def test_criterion_7_conditioning_benefit():
    arms = {
        StateKind.DISTRACTION: SynthScenarioConfig(
            seed=11, n_sessions=8, frames_per_session=48, mode=DriveMode.AUTOPILOT,
            condition_type=StateKind.DISTRACTION, tunnel_strength=2.0,
            cross_gaze_strength=2.0, map_height=8, map_width=16,
            state_segment_frames=8, intersection_spacing=200.0,
        ),
        StateKind.INTENTION: SynthScenarioConfig(
            seed=21, n_sessions=18, frames_per_session=60, mode=DriveMode.MANUAL,
            condition_type=StateKind.INTENTION, tunnel_strength=2.0,
            cross_gaze_strength=2.0, map_height=8, map_width=16,
            intersection_spacing=100.0,
        ),
    }
    summaries = []
    for condition, cfg in arms.items():
        sessions = [generate_session(cfg, i) for i in range(cfg.n_sessions)]
        scenarios = ("intersection",) if condition == StateKind.INTENTION else ("lane_following",)
        sequences = [q for s in sessions for q in sequences_from_session(s, scenarios=scenarios)]
        need = 3 if condition == StateKind.DISTRACTION else 1
        splits = make_splits(sequences, SplitSpec(sequences_per_intention_per_split=need),
                             np.random.default_rng(0))
        baseline_kl, baseline_h = _train_and_score("unconditioned", None, sequences, splits, seed=5)
        for kind in ("multi_branch", "cond_conv"):
            model_kl, model_h = _train_and_score(kind, condition, sequences, splits, seed=5)
            assert model_kl <= 0.9 * baseline_kl, (
                f"{condition.value}/{kind}: divergence {model_kl:.4f} "
                f"not 10% under baseline {baseline_kl:.4f}"
            )
            assert model_h < baseline_h, (
                f"{condition.value}/{kind}: entropy {model_h:.4f} not below baseline {baseline_h:.4f}"
            )
            summaries.append(f"{condition.value}/{kind}: KL {model_kl:.3f} vs {baseline_kl:.3f}, "
                             f"H {model_h:.3f} vs {baseline_h:.3f}")
    print("ACCEPTANCE 7 PASS: conditioned models beat the unconditioned baseline; "
          + "; ".join(summaries))


def test_criterion_8_risk_map_sanity():
    # degenerate routing: predictions are state-independent so risk is zero
    enc = EncoderConfig(feature_channels=2, frame_height=128, frame_width=256)
    degenerate = build_model(
        ModelKind(kind="cond_conv", condition_type=StateKind.DISTRACTION),
        enc, CondConvLayerConfig(), seed=0,
    )
    with torch.no_grad():
        degenerate.cond1.route_weight.zero_()
        degenerate.cond1.route_bias.zero_()
        degenerate.cond2.route_weight.zero_()
        degenerate.cond2.route_bias.zero_()
    flat_cfg = SynthScenarioConfig(seed=1, frames_per_session=16, map_height=16, map_width=32,
                                   condition_type=StateKind.DISTRACTION)
    entries = risk_map(degenerate, [generate_session(flat_cfg, 0)], downsample_factor=2, neighborhood=3)
    assert entries and all(r == 0.0 for _, r in entries)

    passes = 0
    runs = 10
    for run in range(runs):
        cfg = SynthScenarioConfig(
            seed=800 + run, n_sessions=2, frames_per_session=60, mode=DriveMode.AUTOPILOT,
            condition_type=StateKind.DISTRACTION, tunnel_strength=2.0,
            map_height=16, map_width=32, state_segment_frames=8,
            intersection_spacing=120.0, state_effects_near_intersections_only=True,
        )
        sessions = [generate_session(cfg, i) for i in range(cfg.n_sessions)]
        oracle = RuleBasedDistractionPredictor(cfg)
        entries = risk_map(oracle, sessions, downsample_factor=2, neighborhood=3)

        def near(x):
            return cfg.intersection_spacing - (x % cfg.intersection_spacing) <= cfg.gate_radius

        int_risk = [r for (x, _), r in entries if near(x)]
        mid_risk = [r for (x, _), r in entries if not near(x)]
        if int_risk and mid_risk and np.mean(int_risk) > np.mean(mid_risk):
            passes += 1
    assert passes >= 9
    print(f"ACCEPTANCE 8 PASS: zero risk under degenerate routing; intersection risk "
          f"above mid-segment risk in {passes}/{runs} seeded runs")


def test_criterion_9_pipeline_invariants(tmp_path):
    # split disjointness over 50 seeded shuffles
    from types import SimpleNamespace

    labeled = [SimpleNamespace(label="a")] * 12 + [SimpleNamespace(label="b")] * 9
    spec = SplitSpec(sequences_per_intention_per_split=2)
    for seed in range(50):
        splits = make_splits(labeled, spec, np.random.default_rng(seed))
        merged = splits["train"] + splits["val"] + splits["test"]
        assert len(merged) == len(set(merged)) == len(labeled)

    # balanced sampling despite a 9:1 label imbalance
    skewed = [SimpleNamespace(label="big")] * 90 + [SimpleNamespace(label="small")] * 10
    sampler = reweighted_sampler(skewed, np.random.default_rng(9))
    draws = [next(sampler) for _ in range(10000)]
    freq = np.mean([skewed[i].label == "small" for i in draws])
    assert abs(freq - 0.5) <= 0.02

    # lossless session round trip
    cfg = SynthScenarioConfig(seed=99, frames_per_session=12, map_height=8, map_width=16,
                              webcam_shift=(1, 1), webcam_dispersion=0.7)
    session = generate_session(cfg, 0)
    path = tmp_path / "roundtrip.dgs"
    save_session(session, path)
    loaded = load_session(path)
    for a, b in zip(session.frames, loaded.frames):
        assert np.max(np.abs(a.gt_map.values - b.gt_map.values)) <= 1e-9
        assert np.max(np.abs(a.webcam_map.values - b.webcam_map.values)) <= 1e-9
        assert a.timestamp == b.timestamp and a.state == b.state
        assert a.dist_to_intersection == b.dist_to_intersection
    assert loaded.ego_positions == session.ego_positions
    print(f"ACCEPTANCE 9 PASS: 50 disjoint splits, sampler frequency {freq:.3f} within 0.02 of 0.5, "
          "lossless session round trip")
