import numpy as np
import pytest

from tests.conftest import build_dataset
from tribe.alignment import WindowConfig
from tribe.ensembler import (
    BASE_DRAW,
    EnsembleConfig,
    EnsembleError,
    collect_val_scores,
    fit_weights,
    load_registry,
    load_weights,
    predict_ensemble,
    sample_grid,
    save_weights,
    train_members,
)
from tribe.trainer import TrainConfig

WINDOW = WindowConfig(trs_per_window=8, tr_seconds=1.49, frequency_hz=2.0, jitter_s=1.0)
DEEP_SHAPES = {"text": (8, 6), "audio": (8, 5), "video": (8, 4)}  # full grid legal


def base_train_config(**over):
    base = dict(epochs=2, batch_size=4, lr_peak=1e-3, swa_start_epoch=2, seed=0)
    base.update(over)
    return TrainConfig(**base)


def base_overrides():
    return dict(proj_dim=6, num_layers=1, num_heads=2, feedforward_mult=2, window=WINDOW)


# -- weights --------------------------------------------------------------------

def test_equal_scores_give_uniform_weights():
    w = fit_weights(np.array([[0.5, 0.1], [0.5, 0.1]]), temperature=0.3)
    np.testing.assert_allclose(w.weights, 0.5, atol=1e-12)


def test_softmax_arithmetic_oracle():
    w = fit_weights(np.array([[0.3], [0.0]]), temperature=0.3)
    assert w.weights[0, 0] == pytest.approx(0.7310585786300049, abs=1e-10)
    assert w.weights[1, 0] == pytest.approx(0.2689414213699951, abs=1e-10)


def test_weights_shift_invariant():
    scores = np.random.default_rng(0).uniform(-0.2, 0.8, size=(5, 7))
    shifted = scores + 10.0
    a = fit_weights(scores, 0.3).weights
    b = fit_weights(shifted, 0.3).weights
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_weight_columns_sum_to_one():
    scores = np.random.default_rng(1).uniform(-1, 1, size=(9, 20))
    w = fit_weights(scores, 0.3).weights
    np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-6)
    assert (w >= 0).all()


def test_low_temperature_approaches_argmax():
    scores = np.array([[0.5, 0.1], [0.4, 0.3]])
    w = fit_weights(scores, temperature=1e-4).weights
    assert w[0, 0] > 0.999 and w[1, 1] > 0.999


def test_fit_weights_rejects_nan():
    with pytest.raises(EnsembleError):
        fit_weights(np.array([[0.5], [np.nan]]), 0.3)


def test_collect_val_scores_zeroes_nan(tmp_path):
    from tribe import tensorio

    path = tensorio.write_tensor(tmp_path / "s.f32", np.array([0.5, np.nan], dtype=np.float32))
    out = collect_val_scores([{"score_file": str(path)}])
    np.testing.assert_array_equal(out, [[0.5, 0.0]])


def test_weights_round_trip(tmp_path):
    w = fit_weights(np.random.default_rng(2).uniform(0, 1, (4, 6)), 0.3)
    save_weights(w, tmp_path)
    again = load_weights(tmp_path)
    np.testing.assert_array_equal(
        w.weights.astype(np.float32), again.weights.astype(np.float32)
    )


# -- grid sampling ------------------------------------------------------------------

def test_single_member_is_exactly_base(tmp_path):
    m = build_dataset(tmp_path, modality_shapes=DEEP_SHAPES, num_trs=24, num_parcels=5)
    members = sample_grid(
        EnsembleConfig(num_models=1), m, base_overrides(), base_train_config()
    )
    assert len(members) == 1
    assert members[0].draw == BASE_DRAW
    assert members[0].train_config.loss == "mse"
    assert members[0].net_config.modality_aggregation == "concatenate"


def test_sample_grid_reproducible(tmp_path):
    m = build_dataset(tmp_path, modality_shapes=DEEP_SHAPES, num_trs=24, num_parcels=5)
    a = sample_grid(EnsembleConfig(num_models=8, seed=4), m, base_overrides(), base_train_config())
    b = sample_grid(EnsembleConfig(num_models=8, seed=4), m, base_overrides(), base_train_config())
    assert [x.draw for x in a] == [y.draw for y in b]


def test_member_seeds_offset_from_base(tmp_path):
    m = build_dataset(tmp_path, modality_shapes=DEEP_SHAPES, num_trs=24, num_parcels=5)
    members = sample_grid(
        EnsembleConfig(num_models=4, seed=0), m, base_overrides(), base_train_config(seed=100)
    )
    assert [x.train_config.seed for x in members] == [100, 101, 102, 103]


def test_draw_frequencies_uniform_within_3_sigma(tmp_path):
    m = build_dataset(tmp_path, modality_shapes=DEEP_SHAPES, num_trs=24, num_parcels=5)
    n = 10_001  # member 0 is base; 10^4 random draws
    members = sample_grid(
        EnsembleConfig(num_models=n, seed=7), m, base_overrides(), base_train_config()
    )
    draws = [x.draw for x in members[1:]]
    axes = {
        "loss": ("mse", "pearson", "smooth_l1", "huber"),
        "dropout": (0.0, 0.2, 0.4),
        "anchors": tuple(EnsembleConfig().anchor_sets),
        "layer_mode": ("group_by_intervals", "single_layers"),
        "modality_agg": ("concatenate", "average"),
    }
    for axis, values in axes.items():
        k = len(values)
        expected = (n - 1) / k
        sigma = np.sqrt((n - 1) * (1 / k) * (1 - 1 / k))
        for v in values:
            count = sum(1 for d in draws if d[axis] == v)
            assert abs(count - expected) < 3 * sigma, (axis, v, count)


def test_unsupported_anchor_set_raises_instead_of_redrawing(tmp_path):
    # 2-layer features cannot host the 5-interval anchor set
    from tribe.alignment import AlignmentError

    m = build_dataset(tmp_path, num_trs=24, num_parcels=5)  # L_m = 2..3
    cfg = EnsembleConfig(num_models=2, seed=1, anchor_sets=((0.0, 0.2, 0.4, 0.6, 0.8, 1.0),))
    with pytest.raises(AlignmentError):
        sample_grid(cfg, m, base_overrides(), base_train_config())


# -- training and blending -------------------------------------------------------------

def _trained_ensemble(tmp_path, num_models=2):
    m = build_dataset(
        tmp_path, modality_shapes=DEEP_SHAPES, num_trs=24, num_parcels=5,
        videos_per_split=(3, 1),
    )
    members = sample_grid(
        EnsembleConfig(num_models=num_models, seed=3), m, base_overrides(), base_train_config()
    )
    entries = train_members(m, members, tmp_path / "ens", jobs=1)
    return m, members, entries


def test_train_members_writes_relative_registry(tmp_path):
    m, members, entries = _trained_ensemble(tmp_path)
    reg_text = (tmp_path / "ens" / "registry.json").read_text()
    assert str(tmp_path) not in reg_text
    assert len(entries) == 2
    assert collect_val_scores(entries).shape == (2, 5)


def test_train_members_resumes_from_disk(tmp_path):
    m, members, first = _trained_ensemble(tmp_path)
    stamp = (tmp_path / "ens" / "member000" / "swa.f32").stat().st_mtime_ns
    again = train_members(m, members, tmp_path / "ens", jobs=1)
    assert (tmp_path / "ens" / "member000" / "swa.f32").stat().st_mtime_ns == stamp
    np.testing.assert_array_equal(collect_val_scores(first), collect_val_scores(again))
    assert [a["mean_val_score"] for a in first] == [b["mean_val_score"] for b in again]


def test_single_member_ensemble_equals_member(tmp_path):
    m, members, entries = _trained_ensemble(tmp_path, num_models=1)
    weights = fit_weights(collect_val_scores(entries)[:, :], 0.3)
    blended, table = predict_ensemble(
        entries, weights, m, "val", allow_fit_split=True
    )
    from tribe.ensembler import _load_member_net
    from tribe.alignment import assemble_split
    from tribe.evaluator import predict_session

    net, gs = _load_member_net(entries[0])
    sessions = assemble_split(m, "val", gs)
    for sess in sessions:
        solo = predict_session(net, sess)
        np.testing.assert_allclose(
            blended[sess.session_id], solo.astype(np.float64), atol=1e-6
        )


def test_all_mass_on_one_member_reproduces_it(tmp_path):
    m, members, entries = _trained_ensemble(tmp_path, num_models=2)
    w = np.zeros((2, 5))
    w[1, :] = 1.0
    from tribe.ensembler import EnsembleWeights, _load_member_net
    from tribe.alignment import assemble_split
    from tribe.evaluator import predict_session

    weights = EnsembleWeights(weights=w, member_ids=[e["index"] for e in entries])
    blended, _ = predict_ensemble(entries, weights, m, "val", allow_fit_split=True)
    net, gs = _load_member_net(entries[1])
    sessions = assemble_split(m, "val", gs)
    for sess in sessions:
        solo = predict_session(net, sess)
        np.testing.assert_allclose(
            blended[sess.session_id], solo.astype(np.float64), atol=1e-6
        )


def test_predict_ensemble_refuses_fit_split(tmp_path):
    m, members, entries = _trained_ensemble(tmp_path, num_models=1)
    weights = fit_weights(collect_val_scores(entries), 0.3)
    with pytest.raises(EnsembleError, match="fit"):
        predict_ensemble(entries, weights, m, "val")


def test_registry_round_trip(tmp_path):
    from pathlib import Path

    m, members, entries = _trained_ensemble(tmp_path, num_models=2)
    loaded = load_registry(tmp_path / "ens")
    assert len(loaded) == 2
    for e in loaded:
        assert Path(e["checkpoint"] + ".json").exists()
        assert Path(e["score_file"]).exists()
