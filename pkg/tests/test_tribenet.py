import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tribe.alignment import WindowConfig
from tribe.tribenet import (
    ModalityMask,
    NetConfig,
    NetError,
    TribeNet,
    adaptive_avg_pool,
    count_params,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
    softmax_lastaxis,
)

TOY_WINDOW = WindowConfig(trs_per_window=3, tr_seconds=1.0, frequency_hz=2.0)  # S=6


def toy_config(**over):
    base = dict(
        feature_dims={"text": 2, "audio": 2, "video": 2},
        proj_dim=8,
        num_layers=1,
        num_heads=1,
        feedforward_mult=4,
        num_parcels=5,
        num_subjects=2,
        modality_aggregation="concatenate",
        use_subject_embedding=True,
        window=TOY_WINDOW,
    )
    base.update(over)
    return NetConfig(**base)


def toy_inputs(cfg, batch=2, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    s = cfg.window.window_steps
    return {
        m: (scale * rng.standard_normal((batch, s, cfg.feature_dims[m]))).astype(np.float32)
        for m in cfg.modality_names
    }


# -- parameter registry --------------------------------------------------------

def test_count_params_hand_expanded_toy():
    # proj 3*(2*8+8+8+8)=120; pos 6*24=144; subj 2*24=48;
    # block: ln1 48 + attn 4*(576+24)=2400 + ln2 48 + ff (24*96+96+96*24+24)=4728
    # readout 2*24*5 + 2*5 = 250
    cfg = toy_config()
    assert cfg.hidden_size == 24
    assert count_params(cfg) == 120 + 144 + 48 + (48 + 2400 + 48 + 4728) + 250


def test_added_subject_costs_hidden_plus_readout_slab():
    c2 = toy_config(num_subjects=2)
    c4 = toy_config(num_subjects=4)
    h, p = c2.hidden_size, c2.num_parcels
    assert count_params(c4) - count_params(c2) == 2 * (h * p + p + h)


def test_average_fusion_is_smaller():
    assert count_params(toy_config(modality_aggregation="average")) < count_params(toy_config())


def test_hidden_must_divide_heads():
    with pytest.raises(NetError):
        toy_config(num_heads=5)


def test_registry_order_is_stable():
    names = [n for n, _ in param_shapes(toy_config())]
    assert names[0] == "proj.audio.W" or names[0] == "proj.text.W"
    assert names[-2:] == ["readout.W", "readout.b"]
    assert names.index("pos") < names.index("block0.ln1.gamma")


def test_no_transformer_drops_pos_and_subj():
    names = [n for n, _ in param_shapes(toy_config(num_layers=0))]
    assert "pos" not in names and "subj" not in names
    assert not any(n.startswith("block") for n in names)


# -- primitive layers ----------------------------------------------------------

def test_adaptive_pool_even_split():
    out = adaptive_avg_pool(np.array([[1.0], [2.0], [3.0], [4.0]]), 2)
    np.testing.assert_allclose(out[:, 0], [1.5, 3.5])


def test_adaptive_pool_overlapping_segments():
    out = adaptive_avg_pool(np.array([[1.0], [2.0], [3.0]]), 2)
    np.testing.assert_allclose(out[:, 0], [1.5, 2.5])


def test_adaptive_pool_identity():
    x = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_array_equal(adaptive_avg_pool(x, 5), x)


def test_adaptive_pool_spec_segments_298_to_100():
    # segment 0 covers steps [0, ceil(298/100)) = 0..2
    x = np.zeros((298, 1))
    x[:3, 0] = [1.0, 2.0, 3.0]
    out = adaptive_avg_pool(x, 100)
    assert out[0, 0] == pytest.approx(2.0)


@settings(max_examples=40, deadline=None)
@given(t_in=st.integers(1, 40), out_len=st.integers(1, 40), c=st.floats(-3, 3))
def test_pool_constant_stays_constant(t_in, out_len, c):
    from hypothesis import assume

    assume(out_len <= t_in)
    out = adaptive_avg_pool(np.full((t_in, 2), c), out_len)
    np.testing.assert_allclose(out, c, atol=1e-12)


def test_layer_norm_normalizes_last_axis():
    x = np.random.default_rng(1).standard_normal((4, 6))
    y, _ = layer_norm(x, np.ones(6), np.zeros(6))
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.std(-1), 1.0, atol=1e-3)


def test_gelu_matches_reference_values():
    # exact gaussian gelu: x * Phi(x)
    from scipy.stats import norm

    x = np.linspace(-3, 3, 13)
    y, _ = gelu(x)
    np.testing.assert_allclose(y, x * norm.cdf(x), rtol=1e-12)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(2).standard_normal((3, 4, 5))
    p = softmax_lastaxis(x)
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)
    assert (p > 0).all()


def test_softmax_shift_invariant():
    x = np.random.default_rng(3).standard_normal((2, 5))
    np.testing.assert_allclose(softmax_lastaxis(x), softmax_lastaxis(x + 100.0), rtol=1e-9)


# -- forward semantics -----------------------------------------------------------

def test_zero_input_identity_trunk_outputs_bias():
    cfg = toy_config()
    net = TribeNet.init(cfg, seed=0)
    net.params["pos"][:] = 0.0
    net.params["subj"][:] = 0.0
    bias = np.arange(10, dtype=np.float32).reshape(2, 5)
    net.params["readout.b"] = bias.copy()
    zeros = {m: np.zeros((2, 6, 2), dtype=np.float32) for m in cfg.modality_names}
    y, _ = net.forward(zeros, np.array([0, 1]))
    for n in range(3):
        np.testing.assert_allclose(y[0, n], bias[0], atol=1e-6)
        np.testing.assert_allclose(y[1, n], bias[1], atol=1e-6)


def test_masked_modality_input_is_ignored():
    cfg = toy_config()
    net = TribeNet.init(cfg, seed=0)
    net.randomize(seed=5)
    x1 = toy_inputs(cfg, seed=1)
    x2 = {m: (v * 2.0 if m == "audio" else v) for m, v in x1.items()}
    mask = ModalityMask(masked=frozenset({"audio"}))
    y1, _ = net.forward(x1, np.array([0, 1]), mask=mask)
    y2, _ = net.forward(x2, np.array([0, 1]), mask=mask)
    np.testing.assert_array_equal(y1, y2)


def test_all_masked_rejected():
    with pytest.raises(NetError):
        ModalityMask(masked=frozenset({"text", "audio", "video"})).validate_against(
            ("text", "audio", "video")
        )


def test_keep_only_masks_the_rest():
    mask = ModalityMask.keep_only("text")
    assert mask.is_masked("audio") and mask.is_masked("video")
    assert not mask.is_masked("text")


def test_subject_routing_changes_output():
    cfg = toy_config()
    net = TribeNet.init(cfg, seed=0)
    net.randomize(seed=6)
    x = toy_inputs(cfg, batch=1, seed=2)
    y0, _ = net.forward(x, np.array([0]))
    y1, _ = net.forward(x, np.array([1]))
    assert not np.allclose(y0, y1)


def test_permutation_equivariance_without_positions():
    # TR chosen so pooling is identity (S == N); pos zeroed; subj is uniform
    cfg = toy_config(window=WindowConfig(trs_per_window=6, tr_seconds=0.5, frequency_hz=2.0))
    net = TribeNet.init(cfg, seed=0)
    net.randomize(seed=7)
    net.params["pos"][:] = 0.0
    x = toy_inputs(cfg, batch=1, seed=3)
    perm = np.random.default_rng(4).permutation(6)
    xp = {m: v[:, perm] for m, v in x.items()}
    y, _ = net.forward(x, np.array([0]))
    yp, _ = net.forward(xp, np.array([0]))
    np.testing.assert_allclose(yp, y[:, perm], atol=1e-5)


def test_bad_input_shape_rejected():
    cfg = toy_config()
    net = TribeNet.init(cfg, seed=0)
    x = toy_inputs(cfg)
    x["text"] = x["text"][:, :4]
    with pytest.raises(NetError, match="text"):
        net.forward(x, np.array([0, 1]))


def test_subject_index_out_of_range_rejected():
    cfg = toy_config()
    net = TribeNet.init(cfg, seed=0)
    with pytest.raises(NetError, match="subject"):
        net.forward(toy_inputs(cfg), np.array([0, 9]))


def test_init_is_deterministic():
    a = TribeNet.init(toy_config(), seed=11)
    b = TribeNet.init(toy_config(), seed=11)
    for n in a.params:
        np.testing.assert_array_equal(a.params[n], b.params[n])


def test_init_zero_blocks():
    net = TribeNet.init(toy_config(), seed=0)
    np.testing.assert_array_equal(net.params["block0.attn.Wo"], 0.0)
    np.testing.assert_array_equal(net.params["block0.ff.W2"], 0.0)
    np.testing.assert_array_equal(net.params["block0.ln1.gamma"], 1.0)


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = TribeNet.init(toy_config(), seed=42)
    net.randomize(seed=8)
    save_checkpoint(net, tmp_path / "ck")
    again = load_checkpoint(tmp_path / "ck")
    assert again.config == net.config
    for n in net.params:
        assert np.array_equal(
            net.params[n].view(np.uint32), again.params[n].view(np.uint32)
        )


def test_checkpoint_no_absolute_paths(tmp_path):
    net = TribeNet.init(toy_config(), seed=0)
    save_checkpoint(net, tmp_path / "ck")
    text = (tmp_path / "ck.json").read_text()
    assert str(tmp_path) not in text


def test_flat_params_round_trip():
    net = TribeNet.init(toy_config(), seed=1)
    vec = net.flat_params()
    assert vec.size == count_params(net.config)
    net.load_flat(vec * 2.0)
    np.testing.assert_allclose(net.flat_params(), vec * 2.0, rtol=1e-6)
