import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from checks import check_fan_gradients
from fan import (
    AdamW,
    FanLayerParams,
    FanStack,
    adamw_step,
    fan_accuracy,
    fan_forward,
    gelu,
    init_fan_stack,
    split_width,
    train_fan,
)
from lib import InputError, ProtocolError, TrainingError


def single_layer(W_p, W_pbar, B_pbar, activation="relu", head_width=2):
    layer = FanLayerParams(np.atleast_2d(W_p), np.atleast_2d(W_pbar), np.asarray(B_pbar, float), activation)
    return FanStack(layers=[layer], head=np.zeros((layer.d_out, head_width)), normalize=False)


@pytest.mark.parametrize("width, p_ratio, expected", [(64, 0.25, (13, 38)), (10, 0.0, (0, 10))])
def test_split_width(width, p_ratio, expected):
    d_p, d_pbar = split_width(width, p_ratio)
    assert (d_p, d_pbar) == expected
    assert 2 * d_p + d_pbar == width


def test_zero_weights_give_cos_one_block(rng):
    stack = single_layer(np.zeros((3, 2)), np.zeros((3, 4)), np.zeros(4))
    out = fan_forward(stack, rng.normal(size=(5, 3)))
    assert_array_equal(out, np.hstack([np.ones((5, 2)), np.zeros((5, 2)), np.zeros((5, 4))]))


def test_full_turns_are_invisible_to_the_periodic_branch():
    stack = single_layer([[2 * np.pi]], [[1.0]], [0.0])
    out = fan_forward(stack, np.arange(-3.0, 4.0)[:, None])
    assert np.abs(out[:, 0] - 1.0).max() < 1e-12
    assert np.abs(out[:, 1]).max() < 1e-12


def test_shift_along_a_period_leaves_periodic_block_unchanged(rng):
    W_p = np.array([[1.0, 0.0], [0.0, 2.0]])
    stack = single_layer(W_p, rng.normal(size=(2, 3)), np.zeros(3))
    X = rng.normal(size=(4, 2))
    shift = np.array([2 * np.pi, np.pi])
    assert_allclose(fan_forward(stack, X + shift)[:, :4], fan_forward(stack, X)[:, :4], atol=1e-12)


def test_forward_matches_direct_evaluation(rng):
    stack = init_fan_stack(5, 3, width=16, layers=3, seed=4)
    X = rng.normal(size=(7, 5))
    stack.mean, stack.std = X.mean(axis=0), X.std(axis=0)
    H = (X - stack.mean) / stack.std
    for layer in stack.layers:
        Z = H @ layer.W_p
        pre = H @ layer.W_pbar + layer.B_pbar
        H = np.concatenate([np.cos(Z), np.sin(Z), gelu(pre)], axis=1)
    assert_allclose(fan_forward(stack, X), H, atol=1e-12)


def test_periodic_pairs_lie_on_the_unit_circle(rng):
    stack = init_fan_stack(4, 2, width=20, layers=2, seed=1, normalize=False)
    out = fan_forward(stack, rng.normal(size=(6, 4)))
    d_p = stack.layers[-1].d_p
    assert np.abs(out[:, :d_p] ** 2 + out[:, d_p : 2 * d_p] ** 2 - 1.0).max() < 1e-12


def test_width_mismatch(rng):
    stack = init_fan_stack(4, 2, seed=0, normalize=False)
    with pytest.raises(InputError):
        fan_forward(stack, rng.normal(size=(3, 5)))


def test_missing_normalization_statistics(rng):
    with pytest.raises(InputError, match="normalization"):
        fan_forward(init_fan_stack(4, 2, seed=0), rng.normal(size=(3, 4)))


def test_zero_epochs_only_freezes(rng):
    stack = init_fan_stack(4, 2, width=12, layers=2, seed=0)
    X, labels = rng.normal(size=(10, 4)), rng.integers(2, size=10)
    trained = train_fan(stack, X, labels, epochs=0)
    for before, after in zip(stack.arrays(), trained.arrays()):
        assert_array_equal(before, after)
    assert trained.frozen
    assert_allclose(trained.mean, X.mean(axis=0))


def test_frozen_stack_is_stable(rng):
    X, labels = rng.normal(size=(30, 4)), rng.integers(3, size=30)
    trained = train_fan(init_fan_stack(4, 3, width=12, layers=2, seed=0), X, labels, epochs=10)
    first = fan_forward(trained, X)
    with pytest.raises(ProtocolError):
        train_fan(trained, X, labels, epochs=1)
    with pytest.raises(ValueError):
        trained.layers[0].W_p[0, 0] = 0.0
    assert_array_equal(fan_forward(trained, X), first)


def test_training_reduces_loss(rng):
    X = rng.normal(size=(60, 4))
    labels = (X[:, 0] > 0).astype(int)
    trained = train_fan(init_fan_stack(4, 2, width=16, layers=2, seed=0), X, labels, epochs=100)
    assert trained.loss_history[-1] < trained.loss_history[0]
    assert fan_accuracy(trained, X, labels) >= 0.9


def test_divergent_training_is_reported(rng):
    X, labels = rng.normal(size=(10, 3)), rng.integers(2, size=10)
    stack = init_fan_stack(3, 2, width=8, layers=1, seed=0)
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="finite epochs"):
        train_fan(stack, X, labels, epochs=5, optimizer=AdamW(lr=1e300))


def test_adamw_weight_decay_is_decoupled():
    array = np.full(3, 2.0)
    optimizer = AdamW(lr=0.1, weight_decay=0.5)
    adamw_step(optimizer, [array], [np.zeros(3)], [np.zeros(3)], [np.zeros(3)], 1)
    assert_allclose(array, np.full(3, 2.0 * (1 - 0.05)))


def test_save_load(tmp_path, rng):
    X, labels = rng.normal(size=(20, 4)), rng.integers(2, size=20)
    trained = train_fan(init_fan_stack(4, 2, width=12, layers=2, seed=0), X, labels, epochs=3)
    path = str(tmp_path / "fan.npz")
    trained.save(path)
    loaded = FanStack.load(path)
    assert loaded.frozen
    assert_array_equal(fan_forward(loaded, X), fan_forward(trained, X))


def test_gradients_match_finite_differences():
    result = check_fan_gradients(seed=0)
    assert result.passed, result.detail


def test_harmonic_init_is_a_ladder_of_half_turns():
    stack = init_fan_stack(2, 2, width=20, layers=2, p_ratio=0.5, periodic_init="harmonic", normalize=False)
    assert_allclose(stack.layers[0].W_p, np.pi * np.array([[1, 0, 2, 0, 3, 0, 4], [0, 1, 0, 2, 0, 3, 0]]))
    assert np.count_nonzero(stack.layers[1].W_p) == stack.layers[1].W_p.size
    with pytest.raises(InputError, match="periodic init"):
        init_fan_stack(2, 2, periodic_init="uniform")


@pytest.mark.slow
def test_periodic_branch_fits_what_plain_activations_cannot(rng):
    X = rng.uniform(-1.0, 1.0, size=(600, 1))
    labels = (np.sin(10 * np.pi * X[:, 0]) > 0).astype(int)
    fan = init_fan_stack(
        1, 2, width=32, layers=1, p_ratio=0.5, activation="relu", seed=5,
        normalize=False, periodic_init="harmonic",
    )
    plain = init_fan_stack(1, 2, width=32, layers=1, p_ratio=0.0, activation="relu", seed=5, normalize=False)

    fan_acc = fan_accuracy(train_fan(fan, X, labels, epochs=300), X, labels)
    plain_acc = fan_accuracy(train_fan(plain, X, labels, epochs=300), X, labels)
    assert fan_acc >= 0.9
    assert plain_acc < 0.8
