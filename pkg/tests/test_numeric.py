import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from lib import InputError, SingularError
from numeric import ensure_spd, ridge_solve, sherman_morrison_update, woodbury_block_update


def spd(rng, d):
    M = rng.normal(size=(d, d))
    return M @ M.T / d + np.eye(d)


@pytest.mark.parametrize(
    "gamma, expected", [(0.0, np.diag([2.0, 3.0])), (1.0, np.diag([1.0, 1.5]))]
)
def test_ridge_identity_design(gamma, expected):
    assert_allclose(ridge_solve(np.eye(2), np.diag([2.0, 3.0]), gamma), expected, atol=1e-15)


def test_ridge_matches_gradient_descent(rng):
    X, Y, gamma = rng.normal(size=(8, 3)), rng.normal(size=(8, 2)), 0.1
    W = np.zeros((3, 2))
    step = 1.0 / (2 * (np.linalg.eigvalsh(X.T @ X).max() + gamma))
    for _ in range(20000):
        W -= step * 2 * (X.T @ (X @ W - Y) + gamma * W)
    assert_allclose(ridge_solve(X, Y, gamma), W, atol=1e-6)


def test_ridge_satisfies_normal_equations(rng):
    X, Y, gamma = rng.normal(size=(50, 10)), rng.normal(size=(50, 4)), 0.3
    W = ridge_solve(X, Y, gamma)
    residual = (X.T @ X + gamma * np.eye(10)) @ W - X.T @ Y
    assert np.abs(residual).max() < 1e-8 * (1 + np.abs(X.T @ Y).max())


def test_ridge_singular_without_regularization():
    X = np.array([[1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(SingularError, match="singular normal equations"):
        ridge_solve(X, np.ones((2, 1)), 0.0)


def test_ridge_rejects_mismatched_rows():
    with pytest.raises(InputError):
        ridge_solve(np.eye(3), np.ones((2, 1)), 1.0)


def test_ridge_rejects_nan():
    X = np.eye(2)
    X[0, 1] = np.nan
    with pytest.raises(InputError):
        ridge_solve(X, np.eye(2), 1.0)


def test_sherman_morrison_small_cases():
    e1 = np.array([1.0, 0.0])
    assert_allclose(sherman_morrison_update(np.eye(2), e1, e1), np.diag([0.5, 1.0]))
    assert_array_equal(sherman_morrison_update(np.eye(2), np.zeros(2), e1), np.eye(2))


def test_sherman_morrison_matches_direct_inverse(rng):
    A = spd(rng, 16)
    u, v = 0.3 * rng.normal(size=16), 0.3 * rng.normal(size=16)
    result = sherman_morrison_update(np.linalg.inv(A), u, v)
    assert np.abs(result - np.linalg.inv(A + np.outer(u, v))).max() < 1e-10


def test_sherman_morrison_singular():
    e1 = np.array([1.0, 0.0])
    with pytest.raises(SingularError, match="rank-one update singular"):
        sherman_morrison_update(np.eye(2), -e1, e1)


def test_sherman_morrison_leaves_input_untouched(rng):
    A_inv = np.linalg.inv(spd(rng, 4))
    before = A_inv.copy()
    sherman_morrison_update(A_inv, rng.normal(size=4), rng.normal(size=4))
    assert_array_equal(A_inv, before)


def test_repeated_rank_one_equals_direct_ridge_inverse(rng):
    X, gamma = rng.normal(size=(30, 6)), 0.5
    P = np.eye(6) / gamma
    for x in X:
        P = sherman_morrison_update(P, x, x)
    assert_allclose(P, np.linalg.inv(X.T @ X + gamma * np.eye(6)), atol=1e-8)


def test_woodbury_small_cases():
    assert_array_equal(woodbury_block_update(np.eye(3), np.zeros((2, 3)), 1.0), np.eye(3))
    assert_allclose(woodbury_block_update(np.array([[1.0]]), np.array([[1.0]]), 1.0), [[0.5]])


@pytest.mark.parametrize("beta", [1.0, 0.8])
def test_woodbury_matches_direct_inverse(rng, beta):
    A = spd(rng, 12)
    U = rng.normal(size=(5, 12))
    result = woodbury_block_update(np.linalg.inv(A), U, beta)
    assert np.abs(result - np.linalg.inv(beta * A + U.T @ U)).max() < 1e-9


def test_sequential_blocks_equal_one_shot(rng):
    blocks = [rng.normal(size=(4, 8)) for _ in range(3)]
    P = np.eye(8)
    for U in blocks:
        P = woodbury_block_update(P, U, 1.0)
    assert_allclose(P, woodbury_block_update(np.eye(8), np.vstack(blocks), 1.0), atol=1e-12)


@pytest.mark.parametrize(
    "U, beta", [(np.zeros((0, 3)), 1.0), (np.ones((1, 3)), 0.0), (np.ones((1, 3)), 1.5)]
)
def test_woodbury_rejects_bad_arguments(U, beta):
    with pytest.raises(InputError):
        woodbury_block_update(np.eye(3), U, beta)


def test_woodbury_singular_capacitance():
    A_inv = np.diag([1.0, -1.0])
    U = np.array([[0.0, 1.0]])
    with pytest.raises(SingularError, match="singular capacitance"):
        woodbury_block_update(A_inv, U, 1.0)


def test_operations_are_deterministic(rng):
    A_inv, U = np.linalg.inv(spd(rng, 6)), rng.normal(size=(3, 6))
    assert_array_equal(woodbury_block_update(A_inv, U, 0.9), woodbury_block_update(A_inv, U, 0.9))


def test_ensure_spd():
    ensure_spd(np.eye(3))
    with pytest.raises(SingularError):
        ensure_spd(np.diag([1.0, -1.0]))
