import numpy as np
import pytest

from distileak import modelzoo
from distileak.modelzoo import (
    ARCHITECTURES,
    build,
    flatten,
    forward_with_taps,
    load_checkpoint,
    make_spec,
    params_of,
    penultimate_features,
    save_checkpoint,
    state_forward,
    unflatten,
)

DIMS = (8, 8, 1)


def test_registry_is_closed_world():
    assert ARCHITECTURES == ("mlp_s", "mlp_d", "cnn_s", "cnn_d")
    with pytest.raises(ValueError):
        make_spec("resnet18", DIMS, 4)


def test_build_deterministic():
    a = build("mlp_s", DIMS, 4, seed=7)
    b = build("mlp_s", DIMS, 4, seed=7)
    np.testing.assert_array_equal(a.weights, b.weights)
    c = build("mlp_s", DIMS, 4, seed=8)
    assert not np.array_equal(a.weights, c.weights)


def test_mlp_s_parameter_count():
    # 64x64 + 64 + 64x4 + 4 = 4420 on 8x8x1 input with 4 classes
    assert make_spec("mlp_s", DIMS, 4).param_count == 4420


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_flatten_unflatten_round_trip(arch):
    state = build(arch, DIMS, 4, seed=3)
    params = unflatten(state.spec, state.weights)
    np.testing.assert_array_equal(flatten(params), state.weights)


@pytest.mark.parametrize("arch,n_layers", [("mlp_s", 2), ("mlp_d", 3), ("cnn_s", 2), ("cnn_d", 3)])
def test_tap_count_is_layers_plus_one(arch, n_layers):
    state = build(arch, DIMS, 4, seed=1)
    x = np.random.default_rng(0).uniform(size=(5, 64))
    taps = forward_with_taps(state, x)
    assert len(taps.entries) == n_layers + 1
    assert taps.entries[-1].shape == (5, 4)


def test_zero_weights_give_zero_logits():
    state = build("mlp_d", DIMS, 4, seed=0)
    state.weights = np.zeros_like(state.weights)
    x = np.random.default_rng(1).uniform(size=(3, 64))
    np.testing.assert_array_equal(state_forward(state, x), np.zeros((3, 4)))


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_taps_match_tapless_forward(arch):
    state = build(arch, DIMS, 4, seed=11)
    x = np.random.default_rng(2).uniform(size=(4, 64))
    taps = forward_with_taps(state, x)
    np.testing.assert_array_equal(taps.logits, state_forward(state, x))


def test_penultimate_feature_length():
    state = build("mlp_s", DIMS, 4, seed=5)
    x = np.random.default_rng(3).uniform(size=(6, 64))
    feats = penultimate_features(state, x)
    assert feats.shape == (6, 64)
    np.testing.assert_array_equal(feats, penultimate_features(state, x.copy()))


def test_penultimate_self_distance_zero():
    state = build("cnn_s", DIMS, 4, seed=5)
    x = np.random.default_rng(4).uniform(size=(1, 64))
    f1 = penultimate_features(state, x)
    f2 = penultimate_features(state, x.copy())
    assert np.linalg.norm(f1 - f2) == 0.0


def test_input_shape_mismatch():
    state = build("mlp_s", DIMS, 4, seed=5)
    with pytest.raises(ValueError):
        state_forward(state, np.zeros((2, 63)))


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_checkpoint_round_trip(tmp_path, arch):
    state = build(arch, DIMS, 4, seed=13)
    path = tmp_path / "model.ckpt"
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == state.spec
    assert loaded.seed == 13
    np.testing.assert_array_equal(loaded.weights, state.weights)


def test_same_seed_same_loss_trajectory_inputs():
    # same seed => same init => identical forward outputs on identical data
    x = np.random.default_rng(9).uniform(size=(8, 64))
    out1 = state_forward(build("cnn_d", DIMS, 4, seed=21), x)
    out2 = state_forward(build("cnn_d", DIMS, 4, seed=21), x)
    np.testing.assert_array_equal(out1, out2)
