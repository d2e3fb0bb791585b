import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gradcheck
from oracles import FD_RTOL, adam_scalar
from scarseg import nn


# -- layers -------------------------------------------------------------------


def test_conv_delta_kernel_is_identity(rng):
    x = rng.standard_normal((2, 3, 5, 4)).astype(np.float32)
    k = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        k[c, c, 1, 1] = 1
    b = np.array([0.5, -1.0, 2.0], np.float32)
    out = nn.conv2d_3x3_same_fwd(x, k, b)
    np.testing.assert_allclose(out, x + b[None, :, None, None], rtol=1e-6)


def test_conv_ones_kernel_neighborhood_sum():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = nn.conv2d_3x3_same_fwd(x, np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out[0, 0, 1, 1] == x[0, 0, 0:3, 0:3].sum() == 45
    assert out[0, 0, 2, 2] == x[0, 0, 1:4, 1:4].sum()
    assert out[0, 0, 0, 0] == x[0, 0, 0:2, 0:2].sum()  # zero padding at the corner


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    k = rng.standard_normal((3, 4, 3, 3))
    b = rng.standard_normal(4)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((2, 4, 6, 5))
    for i in range(6):
        for j in range(5):
            want[:, :, i, j] = np.einsum("nckl,cokl->no", xp[:, :, i:i + 3, j:j + 3], k) + b
    np.testing.assert_allclose(nn.conv2d_3x3_same_fwd(x, k, b), want, rtol=1e-10, atol=1e-10)


def test_conv_kernel_grad_fd_2x3x6x6(rng):
    from oracles import numeric_grad, rel_error

    x = rng.standard_normal((2, 3, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    b = np.zeros(2)
    r = rng.standard_normal((2, 2, 6, 6))
    _, gk, _ = nn.conv2d_3x3_same_bwd(r, x, k)
    num = numeric_grad(lambda: float(np.sum(r * nn.conv2d_3x3_same_fwd(x, k, b))), k)
    assert rel_error(gk, num) < FD_RTOL


def test_conv_channel_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.conv2d_3x3_same_fwd(np.zeros((1, 2, 4, 4)), np.zeros((3, 1, 3, 3)), np.zeros(1))


def test_maxpool_example():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert nn.maxpool2x2_fwd(x).item() == 4
    g = nn.maxpool2x2_bwd(np.array([[[[5.0]]]]), x)
    np.testing.assert_array_equal(g, [[[[0, 0], [0, 5]]]])


def test_maxpool_odd_dims():
    with pytest.raises(nn.ShapeError):
        nn.maxpool2x2_fwd(np.zeros((1, 1, 3, 4)))


def test_upsample_example():
    v = np.array([[[[7.0]]]])
    np.testing.assert_array_equal(nn.upsample2x2_nearest_fwd(v), np.full((1, 1, 2, 2), 7.0))
    g = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert nn.upsample2x2_nearest_bwd(g).item() == 10


def test_relu_negative_side():
    x = -np.array([0.5, 2.0, 3.0])
    assert (nn.relu_fwd(x) == 0).all()
    assert (nn.relu_bwd(np.ones(3), nn.relu_fwd(x)) == 0).all()


def test_concat_skip_first_and_mismatch():
    a, b = np.zeros((1, 2, 4, 4)), np.ones((1, 3, 4, 4))
    out = nn.concat_channels_fwd(a, b)
    assert out.shape == (1, 5, 4, 4)
    assert (out[:, :2] == 0).all() and (out[:, 2:] == 1).all()
    with pytest.raises(nn.ShapeError):
        nn.concat_channels_fwd(a, np.ones((1, 3, 2, 4)))


def test_sigmoid_extremes_finite():
    out = nn.sigmoid_fwd(np.array([-1000.0, 0.0, 1000.0]))
    assert np.isfinite(out).all()
    assert out[1] == 0.5


def test_bce_examples():
    y = (np.random.default_rng(0).random((2, 1, 4, 4)) < 0.5).astype(np.float64)
    loss, _ = nn.bce_loss(y.copy(), y)
    assert 0 < loss < 2e-7
    loss, _ = nn.bce_loss(np.full_like(y, 0.5), y)
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(nn.ShapeError):
        nn.bce_loss(np.full((1, 1, 2, 2), 0.5), np.zeros((1, 1, 2, 3)))


def test_bce_clamp_gradient_zero():
    p = np.array([0.0, 1.0, 0.5])
    _, g = nn.bce_loss(p, np.array([1.0, 0.0, 1.0]))
    assert g[0] == 0 and g[1] == 0 and g[2] != 0


@pytest.mark.parametrize("trial", gradcheck.TRIALS, ids=lambda t: t.__name__)
def test_layer_gradients(trial):
    rng = np.random.default_rng(42)
    for _ in range(3):
        assert trial(rng) < FD_RTOL


# -- network ------------------------------------------------------------------


def test_bottleneck_and_output_shape():
    cfg = nn.UNetConfig(5, 2, 4)
    w = nn.init_weights(cfg, 0)
    cache: dict = {}
    out = nn.unet_forward(cfg, w, np.zeros((1, 5, 32, 32), np.float32), cache)
    assert out.shape == (1, 1, 32, 32)
    assert cache["enc4.conv2"][3].shape[1:3] == (2, 2)


def test_encoder_channels_doubling_schedule():
    cfg = nn.UNetConfig(6, 16, 4)
    shapes = cfg.weight_shapes()
    assert [shapes[f"enc{i}.conv2.w"][1] for i in range(5)] == [16, 32, 64, 128, 256]
    # decoder level n consumes skip + upsampled channels and emits f*2^n
    for lvl in range(4):
        assert shapes[f"dec{lvl}.conv1.w"][:2] == (16 * 2**lvl + 16 * 2**(lvl + 1), 16 * 2**lvl)


def test_zero_weights_half():
    cfg = nn.UNetConfig(3, 2, 2)
    out = nn.unet_forward(cfg, nn.zero_weights(cfg), np.random.default_rng(0).random((2, 3, 8, 8)))
    assert (out == 0.5).all()


@given(st.integers(1, 3), st.integers(1, 6), st.integers(0, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_output_dims_equal_input(n, c, depth, mult, seed):
    side = 2 ** depth * mult
    cfg = nn.UNetConfig(c, 2, depth)
    x = np.random.default_rng(seed).random((n, c, side, side + 2 ** depth)).astype(np.float32)
    out = nn.unet_forward(cfg, nn.init_weights(cfg, seed), x)
    assert out.shape == (n, 1, side, side + 2 ** depth)
    assert ((out > 0) & (out < 1)).all()


def test_indivisible_and_channel_errors():
    cfg = nn.UNetConfig(5, 2, 2)
    w = nn.init_weights(cfg)
    with pytest.raises(nn.ShapeError, match="divisible"):
        nn.unet_forward(cfg, w, np.zeros((1, 5, 6, 8)))
    with pytest.raises(nn.ShapeError, match="channels"):
        nn.unet_forward(cfg, w, np.zeros((1, 6, 8, 8)))


def test_init_weights_contract():
    cfg = nn.UNetConfig(6, 16, 3)
    a, b = nn.init_weights(cfg, 5), nn.init_weights(cfg, 5)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    for k, v in a.items():
        if k.endswith(".b"):
            assert (v == 0).all()
        else:
            lim = nn.glorot_limit(v.shape)
            assert np.abs(v).max() < lim
    assert a["enc0.conv1.w"].dtype == np.float32


# -- adam ---------------------------------------------------------------------


def test_adam_zero_grad():
    w = {"a": np.ones((2, 2), np.float32)}
    s = nn.AdamState.for_weights(w)
    nn.adam_step(w, {"a": np.zeros((2, 2), np.float32)}, s, 1e-3)
    assert (w["a"] == 1).all() and s.t == 1


def test_adam_single_step_hand_value():
    w = {"a": np.zeros(1, np.float64)}
    s = nn.AdamState.for_weights(w)
    nn.adam_step(w, {"a": np.ones(1)}, s, 1e-3)
    assert w["a"][0] == pytest.approx(-0.001 / (1 + 1e-7), rel=1e-12)
    assert w["a"][0] == pytest.approx(-0.000999999, abs=1e-9)


def test_adam_two_step_trajectory():
    w = {"a": np.array([0.3])}
    s = nn.AdamState.for_weights(w)
    traj = []
    for g in (0.7, 0.7):
        nn.adam_step(w, {"a": np.array([g])}, s, 1e-3)
        traj.append(w["a"][0])
    np.testing.assert_allclose(traj, adam_scalar(0.3, [0.7, 0.7]), rtol=1e-14)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
def test_adam_matches_scalar_oracle(grads):
    w = {"a": np.array([1.0])}
    s = nn.AdamState.for_weights(w)
    out = []
    for g in grads:
        nn.adam_step(w, {"a": np.array([g])}, s, 1e-3)
        out.append(w["a"][0])
        assert (s.v["a"] >= 0).all()
    np.testing.assert_allclose(out, adam_scalar(1.0, grads), rtol=1e-12)


def test_adam_shape_mismatch():
    w = {"a": np.ones(2)}
    with pytest.raises(nn.ShapeError):
        nn.adam_step(w, {"a": np.ones(3)}, nn.AdamState.for_weights(w), 1e-3)


# -- determinism and checkpoints ----------------------------------------------


def _short_run(seed):
    cfg = nn.UNetConfig(3, 2, 2)
    w = nn.init_weights(cfg, seed)
    s = nn.AdamState.for_weights(w)
    rng = np.random.default_rng(seed)
    x = rng.random((4, 3, 8, 8)).astype(np.float32)
    y = (rng.random((4, 1, 8, 8)) < 0.3).astype(np.float32)
    losses = []
    with nn.sequential():
        for _ in range(5):
            loss, g = nn.loss_and_grads(cfg, w, x, y)
            nn.adam_step(w, g, s, 1e-2)
            losses.append(loss)
    return losses


def test_bit_identical_losses():
    assert _short_run(3) == _short_run(3)


def test_checkpoint_roundtrip(tmp_path):
    cfg = nn.UNetConfig(6, 4, 2)
    w = nn.init_weights(cfg, 1)
    nn.save_checkpoint(tmp_path / "a", cfg, w, epoch=3, val_loss=0.25, seed=1)
    cfg2, w2, man = nn.load_checkpoint(tmp_path / "a")
    assert cfg2 == cfg and man["epoch"] == 3
    assert all(np.array_equal(w[k], w2[k]) for k in w)
    nn.save_checkpoint(tmp_path / "b", cfg2, w2, epoch=3, val_loss=0.25, seed=1)
    assert (tmp_path / "a" / "weights.bin").read_bytes() == (tmp_path / "b" / "weights.bin").read_bytes()


def test_checkpoint_truncated(tmp_path):
    cfg = nn.UNetConfig(2, 2, 1)
    nn.save_checkpoint(tmp_path, cfg, nn.init_weights(cfg))
    p = tmp_path / "weights.bin"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError, match="bytes"):
        nn.load_checkpoint(tmp_path)


def test_nonfinite_is_error():
    cfg = nn.UNetConfig(1, 1, 1)
    w = nn.init_weights(cfg)
    w["out.b"][:] = np.nan
    with pytest.raises(FloatingPointError):
        nn.unet_forward(cfg, w, np.zeros((1, 1, 2, 2), np.float32))
