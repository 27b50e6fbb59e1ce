"""Acceptance gate: one test per release criterion, desk-scale.

Every test trains or measures against the synthetic teacher, whose wiring is
known exactly, so each bar below is checkable without external data. Each
test appends a PASS/FAIL line to REPORT_LINES; conftest prints the block at
the end of the run.

Budget note: the whole gate retrains many small models and takes a few
minutes of CPU; the recovery test is the long pole and is bounded at 10
minutes by its own assertion.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

import test_gradients as gradients

from tribe.alignment import LayerGroupSpec, WindowConfig
from tribe.datastore import load_bold_series, load_manifest
from tribe.ensembler import EnsembleConfig, collect_val_scores, fit_weights, predict_ensemble, sample_grid, train_members
from tribe.evaluator import (
    assemble_split,
    noise_ceiling,
    normalized_scores,
    pearson_columns,
    probe_modalities,
    run_ablation,
    score_sessions,
)
from tribe.synthgen import TeacherSpec, generate, load_teacher_record
from tribe.trainer import TrainConfig, lr_at, make_net_config, train
from tribe.tribenet import adaptive_avg_pool

REPORT_LINES: list[str] = []

GS_AVG = LayerGroupSpec(anchors=(1.0,), aggregation="average")


def criterion(num: int, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d}: {detail}"
    REPORT_LINES.append(line)
    print(line)
    assert ok, line


def small_window(n_trs):
    return WindowConfig(
        trs_per_window=n_trs, tr_seconds=1.49, frequency_hz=2.0, jitter_s=0.0
    )


def small_net(n_trs):
    # shared desk-scale trunk for the ablation suites
    return dict(
        proj_dim=12,
        num_layers=1,
        num_heads=4,
        window=small_window(n_trs),
    )


def small_train(epochs, lr=2e-2, seed=0):
    return TrainConfig(
        epochs=epochs,
        batch_size=8,
        lr_peak=lr,
        modality_dropout_p=0.2,
        swa_start_epoch=max(1, epochs - 2),
        early_stop_patience=epochs,
        loss="mse",
        seed=seed,
    )


# ---------------------------------------------------------------------------
# shared synthetic datasets
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def interaction_data(tmp_path_factory):
    """Noiseless teacher with solo and pair parcels, 6 videos x 2 subjects."""
    out = tmp_path_factory.mktemp("accept_interaction")
    generate(TeacherSpec(noise_std=0.0), 2, 6, 300, seed=21, out_dir=out,
             num_repeat_videos=1)
    return load_manifest(out / "manifest.json"), out


@pytest.fixture(scope="module")
def scaling_data(tmp_path_factory):
    """Noisy teacher, 20 videos x 1 subject, for the data-scaling sweep."""
    out = tmp_path_factory.mktemp("accept_scaling")
    generate(TeacherSpec(noise_std=1.0), 1, 20, 200, seed=22, out_dir=out,
             num_repeat_videos=1)
    return load_manifest(out / "manifest.json"), out


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------

def test_c01_gradient_check_all_parameters():
    t0 = time.perf_counter()
    gradients.check_all_params(gradients.tiny_config(), rtol=1e-4)
    took = time.perf_counter() - t0
    criterion(
        1,
        took < 60.0,
        f"all parameter gradients match central differences within 1e-4 "
        f"(64-bit tiny config, {took:.1f}s < 60s)",
    )


# ---------------------------------------------------------------------------
# 2. closed-form oracle equivalences
# ---------------------------------------------------------------------------

def test_c02_closed_form_oracles():
    checks = []

    rho = pearson_columns(
        np.array([[1.0], [2.0], [3.0], [4.0]]),
        np.array([[1.0], [3.0], [2.0], [4.0]]),
    )[0]
    checks.append(abs(rho - 0.8) < 1e-10)

    pooled = adaptive_avg_pool(np.array([[1.0], [2.0], [3.0]]), 2)
    checks.append(np.allclose(pooled.ravel(), [1.5, 2.5], atol=1e-10, rtol=0))

    cfg = TrainConfig(lr_peak=1e-3, warmup_fraction=0.1)
    total = 1000
    warmup = round(0.1 * total)
    for step in (0, 37, warmup, 400, total - 1):
        if step <= warmup:
            want = 1e-3 * step / warmup
        else:
            frac = (step - warmup) / (total - warmup)
            want = 1e-3 * 0.5 * (1.0 + math.cos(math.pi * frac))
        checks.append(abs(lr_at(step, total, cfg) - want) < 1e-10)

    w = fit_weights(np.array([[0.3], [0.0]]), temperature=0.3).weights[:, 0]
    checks.append(abs(w[0] - 0.7310585786300049) < 1e-10)
    checks.append(abs(w[1] - 0.2689414213699951) < 1e-10)

    ceiling = _ceiling_for_rho_self(1.0 / 3.0)
    checks.append(abs(ceiling - 0.7071067811865476) < 1e-10)

    criterion(
        2,
        all(checks),
        "pearson 0.8, pool [1.5, 2.5], warmup/cosine lr, softmax "
        "(0.73106, 0.26894), ceiling sqrt(1/2) all exact to 1e-10",
    )


def _ceiling_for_rho_self(rho_self: float) -> float:
    # exercise the public path: two series whose sample correlation is exact
    rng = np.random.default_rng(0)
    x = rng.normal(size=4000)
    x = (x - x.mean()) / x.std()
    y = rng.normal(size=4000)
    y = y - y.mean()
    y = y - x * (x @ y) / (x @ x)  # orthogonalize
    y = y / y.std()
    mixed = rho_self * x + math.sqrt(1.0 - rho_self**2) * y
    c = noise_ceiling(x[:, None], mixed[:, None])
    return float(c.rho_max[0])


# ---------------------------------------------------------------------------
# 3. synthetic teacher recovery
# ---------------------------------------------------------------------------

def test_c03_noiseless_teacher_recovery(tmp_path):
    t0 = time.perf_counter()
    spec = TeacherSpec(
        noise_std=0.0,
        driver_counts={"text": 4, "audio": 4, "video": 4},
    )
    m = generate(spec, 2, 8, 600, seed=11, out_dir=tmp_path, num_repeat_videos=1)

    net_cfg = make_net_config(
        m, GS_AVG, proj_dim=16, num_layers=2, num_heads=4, window=small_window(50)
    )
    tc = TrainConfig(
        epochs=50, batch_size=8, lr_peak=2e-2, modality_dropout_p=0.2,
        swa_start_epoch=45, early_stop_patience=50, loss="mse", seed=0,
    )
    result = train(m, GS_AVG, net_cfg, tc)

    table = score_sessions(result.net, assemble_split(m, "val", GS_AVG))
    rec = load_teacher_record(tmp_path)
    a_id, b_id = rec["repeat_pairs"][0]
    by_id = {s.session_id: s for s in m.sessions}
    ceiling = noise_ceiling(
        load_bold_series(m, by_id[a_id]).data, load_bold_series(m, by_id[b_id]).data
    )
    normed = normalized_scores(table, ceiling)
    took = time.perf_counter() - t0
    criterion(
        3,
        normed.mean_score >= 0.9 and took < 600.0,
        f"noiseless linear teacher (8 videos x 2 subjects): mean normalized "
        f"val pearson {normed.mean_score:.3f} >= 0.9 in {took:.0f}s < 600s",
    )


# ---------------------------------------------------------------------------
# 4. noise-ceiling calibration
# ---------------------------------------------------------------------------

def test_c04_noise_ceiling_calibration(tmp_path):
    counts = {
        "text": 60, "audio": 60, "video": 60,
        "text+audio": 20, "text+video": 20, "audio+video": 20,
    }
    m = generate(
        TeacherSpec(noise_std=1.0, driver_counts=counts), 1, 2, 300,
        seed=41, out_dir=tmp_path, num_repeat_videos=1,
    )
    rec = load_teacher_record(tmp_path)
    a_id, b_id = rec["repeat_pairs"][0]
    by_id = {s.session_id: s for s in m.sessions}
    ceiling = noise_ceiling(
        load_bold_series(m, by_id[a_id]).data, load_bold_series(m, by_id[b_id]).data
    )
    num_parcels = ceiling.rho_self.shape[0]
    measured = float(np.nanmean(ceiling.rho_self))
    criterion(
        4,
        num_parcels >= 200 and 0.45 <= measured <= 0.55,
        f"unit signal + unit noise: mean rho_self {measured:.4f} in "
        f"[0.45, 0.55] over {num_parcels} parcels",
    )


# ---------------------------------------------------------------------------
# 5. multimodal ordering
# ---------------------------------------------------------------------------

def test_c05_multimodal_ordering(interaction_data):
    m, _ = interaction_data
    report = run_ablation(
        "modality_subsets", m, GS_AVG, small_net(30), small_train(20)
    )
    s = report["summary"]
    tri = s["text+audio+video"]
    best_bi = max(s["text+audio"], s["text+video"], s["audio+video"])
    best_uni = max(s["text"], s["audio"], s["video"])
    criterion(
        5,
        tri >= best_bi + 0.01 and best_bi >= best_uni + 0.01,
        f"trimodal {tri:.3f} >= best bimodal {best_bi:.3f} + 0.01 >= best "
        f"unimodal {best_uni:.3f} + 0.02 (3-seed means)",
    )


# ---------------------------------------------------------------------------
# 6. architecture ablations
# ---------------------------------------------------------------------------

def test_c06_architecture_ablation(interaction_data):
    m, _ = interaction_data
    arch = run_ablation(
        "no_transformer", m, GS_AVG, small_net(30), small_train(20)
    )["summary"]
    subj = run_ablation(
        "single_subject", m, GS_AVG, small_net(30), small_train(20)
    )["summary"]
    gap = arch["full"] - arch["no_transformer"]
    criterion(
        6,
        gap >= 0.02 and subj["multi"] >= subj["single"] - 0.005,
        f"transformer gap {gap:.3f} >= 0.02; multi-subject {subj['multi']:.3f} "
        f">= single-subject {subj['single']:.3f} - 0.005",
    )


# ---------------------------------------------------------------------------
# 7. data scaling
# ---------------------------------------------------------------------------

def test_c07_sessions_scaling(scaling_data):
    m, _ = scaling_data
    counts = (2, 4, 8, 16)
    report = run_ablation(
        "sessions_scaling", m, GS_AVG, small_net(25), small_train(10),
        session_counts=counts,
    )
    means = [report["summary"][f"sessions={c}"] for c in counts]
    drops = [means[i] - means[i + 1] for i in range(len(means) - 1)
             if means[i + 1] < means[i]]
    ok = len(drops) <= 1 and all(d <= 0.005 for d in drops)
    criterion(
        7,
        ok,
        "mean score over {2,4,8,16} sessions = "
        + ", ".join(f"{v:.3f}" for v in means)
        + f" (3-seed means, {len(drops)} inversion(s), all <= 0.005)",
    )


# ---------------------------------------------------------------------------
# 8. ensembling
# ---------------------------------------------------------------------------

def test_c08_ensemble_beats_best_member(tmp_path):
    data_dir = tmp_path / "data"
    spec = TeacherSpec(
        noise_std=0.5,
        feature_shapes={"text": (8, 12), "audio": (8, 10), "video": (8, 8)},
    )
    m = generate(spec, 1, 5, 250, seed=31, out_dir=data_dir, num_repeat_videos=1)

    cfg = EnsembleConfig(num_models=8, temperature=0.3, seed=5)
    base_tc = TrainConfig(
        epochs=10, batch_size=8, lr_peak=2e-2, modality_dropout_p=0.2,
        swa_start_epoch=8, early_stop_patience=10, loss="mse", seed=100,
    )
    members = sample_grid(cfg, m, small_net(25), base_tc)
    entries = train_members(m, members, tmp_path / "ensemble")
    weights = fit_weights(collect_val_scores(entries), cfg.temperature)
    _, table = predict_ensemble(entries, weights, m, "val", allow_fit_split=True)

    best = max(e["mean_val_score"] for e in entries)
    col_sums = weights.weights.sum(axis=0)
    sums_ok = bool(np.all(np.abs(col_sums - 1.0) <= 1e-6))
    criterion(
        8,
        table.mean_score >= best - 0.005 and sums_ok,
        f"8-member ensemble {table.mean_score:.3f} >= best member "
        f"{best:.3f} - 0.005; weight columns sum to 1 within 1e-6",
    )


# ---------------------------------------------------------------------------
# 9. probing
# ---------------------------------------------------------------------------

def test_c09_probe_assigns_solo_parcels(interaction_data):
    m, out = interaction_data
    net_cfg = make_net_config(m, GS_AVG, **small_net(30))
    result = train(m, GS_AVG, net_cfg, small_train(20))
    probe = probe_modalities(
        result.net, assemble_split(m, "val", GS_AVG), trained_with_dropout=True
    )
    drivers = load_teacher_record(out)["parcel_drivers"]
    solo = [(i, d) for i, d in enumerate(drivers) if "+" not in d]
    hits = sum(1 for i, d in solo if probe.argmax[i] == d)
    criterion(
        9,
        hits >= 0.9 * len(solo),
        f"probe argmax matches the wired modality on {hits}/{len(solo)} "
        f"single-modality parcels (>= 90%)",
    )


# ---------------------------------------------------------------------------
# 10. determinism
# ---------------------------------------------------------------------------

def test_c10_identical_seeds_identical_checkpoints(interaction_data, tmp_path):
    m, _ = interaction_data
    net_cfg = make_net_config(m, GS_AVG, **small_net(30))
    tc = small_train(3, seed=7)
    train(m, GS_AVG, net_cfg, tc, out_dir=tmp_path / "a")
    train(m, GS_AVG, net_cfg, tc, out_dir=tmp_path / "b")
    same = all(
        (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        for name in ("final.f32", "swa.f32", "final.json", "swa.json")
    )
    criterion(
        10,
        same,
        "two identically-seeded training runs wrote bit-identical final and "
        "averaged checkpoints",
    )
