"""
Seeded oracle and invariant checks, run by `mcigle.py check`.

Every check returns a CheckResult instead of raising, so one failure does not
hide the others.
"""
import logging
import time
import typing as t
from dataclasses import dataclass

import numpy as np

from analytic import expand_labels, init_state, phase_update, predict_mainstream
from fan import init_fan_stack
from fan import loss_and_grads as fan_loss_and_grads
from lib import MciglError, get_rng, one_hot
from metrics import AccuracyMatrix, compute_metrics
from mmgraph import MultimodalGraph, init_gnn_params
from mmgraph import _gnn_forward_cached
from mmgraph import loss_and_grads as gnn_loss_and_grads
from numeric import ridge_solve, sherman_morrison_update, woodbury_block_update
from residual import (
    compensation_embed,
    compensation_update,
    expand_compensation,
    init_compensation,
    init_compensation_embed,
    predict_combined,
    residual_matrix,
)
from transport import TransportSettings, cosine_cost, structure_matrix

logger = logging.getLogger(__name__)

GRADIENT_FLOOR = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(GRADIENT_FLOOR, abs(analytic) + abs(numeric))


def gradient_check(
    loss_of: t.Callable[[], float],
    arrays: t.Sequence[np.ndarray],
    grads: t.Sequence[np.ndarray],
    rng: np.random.Generator,
    count: int = 100,
    step: float = 1e-5,
    pattern: t.Optional[t.Callable[[], np.ndarray]] = None,
) -> float:
    """
    Max relative error between analytic and central-difference gradients over
    `count` random coordinates. With `pattern`, coordinates whose perturbation
    flips the returned activation pattern sit on a kink and are redrawn.
    """
    sizes = np.array([a.size for a in arrays])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    checked = attempts = 0
    base = None if pattern is None else pattern()
    while checked < count and attempts < 20 * count:
        attempts += 1
        flat = int(rng.integers(offsets[-1]))
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        array = arrays[which]
        index = np.unravel_index(flat - offsets[which], array.shape)
        saved = array[index]

        array[index] = saved + step
        plus = loss_of()
        kinked = pattern is not None and not np.array_equal(pattern(), base)
        array[index] = saved - step
        minus = loss_of()
        kinked = kinked or (pattern is not None and not np.array_equal(pattern(), base))
        array[index] = saved
        if kinked:
            continue

        numeric = (plus - minus) / (2.0 * step)
        worst = max(worst, relative_error(float(grads[which][index]), numeric))
        checked += 1
    return worst


def check_recursive_equivalence(seed: int = 0) -> CheckResult:
    rng = get_rng(seed)
    phases, per_phase, d, classes = 5, 400, 128, 2
    started = time.perf_counter()
    state = init_state(d, gamma=1.0)
    X_all, labels_all = [], []
    for k in range(phases):
        X = rng.normal(size=(per_phase, d))
        labels = rng.integers(classes, size=per_phase) + k * classes
        state = phase_update(expand_labels(state, classes), X, one_hot(labels, classes, k * classes))
        X_all.append(X)
        labels_all.append(labels)
    batch = ridge_solve(np.vstack(X_all), one_hot(np.concatenate(labels_all), phases * classes), 1.0)
    elapsed = time.perf_counter() - started
    diff = float(np.abs(state.W - batch).max())
    return CheckResult(
        "recursive equals batch ridge",
        diff < 1e-8 and elapsed < 10.0,
        f"max |W - W_ridge| = {diff:.3e} in {elapsed:.2f}s",
    )


def check_rank_updates(seed: int = 0) -> CheckResult:
    rng = get_rng(seed)
    M = rng.normal(size=(64, 64))
    A = M @ M.T / 64 + np.eye(64)
    A_inv = np.linalg.inv(A)
    u, v = 0.1 * rng.normal(size=64), 0.1 * rng.normal(size=64)
    sm = np.abs(sherman_morrison_update(A_inv, u, v) - np.linalg.inv(A + np.outer(u, v))).max()
    U = rng.normal(size=(8, 64))
    wb = np.abs(woodbury_block_update(A_inv, U, 0.9) - np.linalg.inv(0.9 * A + U.T @ U)).max()

    states = {mode: init_state(16, gamma=0.5, beta=0.95, update_mode=mode) for mode in ("block", "sample")}
    for k in range(3):
        X = rng.normal(size=(30, 16))
        Y = one_hot(rng.integers(2, size=30), 2)
        for mode in states:
            states[mode] = phase_update(expand_labels(states[mode], 2), X, Y)
    paths = max(
        np.abs(states["block"].W - states["sample"].W).max(),
        np.abs(states["block"].Phi_inv - states["sample"].Phi_inv).max(),
    )
    return CheckResult(
        "rank-one and block updates",
        sm < 1e-10 and wb < 1e-10 and paths < 1e-9,
        f"sherman-morrison {sm:.2e}, woodbury {wb:.2e}, block vs sample {paths:.2e}",
    )


def check_transport(seed: int = 0) -> CheckResult:
    rng = get_rng(seed)
    vis, txt = rng.normal(size=(12, 5)), rng.normal(size=(10, 5))
    settings = TransportSettings(max_outer=50, max_sinkhorn=2000)
    problem = settings.problem(cosine_cost(vis, txt), structure_matrix(vis), structure_matrix(txt))
    result = settings.solve(problem)
    rows = np.abs(result.plan.sum(axis=1) - problem.marginal_src).max()
    cols = np.abs(result.plan.sum(axis=0) - problem.marginal_tgt).max()
    rises = np.diff(result.history).max() if len(result.history) > 1 else 0.0

    features = np.eye(4)
    perm = rng.permutation(4)
    matcher = TransportSettings(lambda1=0.5, epsilon=1e-3)
    planted = matcher.solve(
        matcher.problem(
            cosine_cost(features, features[perm]),
            structure_matrix(features),
            structure_matrix(features[perm]),
        )
    )
    recovered = np.array_equal(np.argmax(planted.plan, axis=1), np.argsort(perm))
    return CheckResult(
        "fused transport",
        max(rows, cols) < 1e-6 and rises <= 1e-9 and recovered,
        f"converged {result.converged}, marginals {max(rows, cols):.2e}, "
        f"largest rise {rises:.2e}, permutation recovered {recovered}",
    )


def check_fan_gradients(seed: int = 0) -> CheckResult:
    rng = get_rng(seed)
    stack = init_fan_stack(6, 3, width=12, layers=2, activation="gelu", seed=seed, normalize=False)
    X = rng.normal(size=(20, 6))
    labels = rng.integers(3, size=20)
    _, grads = fan_loss_and_grads(stack, X, labels)
    worst = gradient_check(lambda: fan_loss_and_grads(stack, X, labels)[0], stack.arrays(), grads, rng)
    return CheckResult("FAN gradients", worst < 1e-4, f"max relative error {worst:.2e}")


def small_graph(rng: np.random.Generator, n: int = 10, d_v: int = 5, d_t: int = 4, classes: int = 3):
    pairs = np.array([(i, j) for i in range(n) for j in range(i + 1, n)])
    edges = pairs[rng.random(len(pairs)) < 0.3]
    return MultimodalGraph(
        num_nodes=n,
        edges=edges,
        features_vis=rng.normal(size=(n, d_v)),
        features_txt=rng.normal(size=(n, d_t)),
        labels=rng.integers(classes, size=n),
    )


def check_gnn_gradients(seed: int = 0) -> CheckResult:
    rng = get_rng(seed)
    graph = small_graph(rng)
    params = init_gnn_params(graph.d_v, graph.d_t, 3, hidden=6, layers=2, seed=seed)
    _, grads, plan = gnn_loss_and_grads(graph, params)

    def pattern():
        signs = []
        for modality in ("v", "t"):
            for cache in _gnn_forward_cached(graph, params, modality)[1]:
                signs.append((cache[-1] > 0).ravel())
        return np.concatenate(signs)

    worst = gradient_check(
        lambda: gnn_loss_and_grads(graph, params, plan)[0],
        params.arrays(),
        grads,
        rng,
        pattern=pattern,
    )
    return CheckResult("GNN gradients", worst < 1e-4, f"max relative error {worst:.2e}")


def check_metrics() -> CheckResult:
    report = compute_metrics(AccuracyMatrix([[1.0], [0.8, 0.9]]))
    expected = (0.85, 0.2, 0.2, 0.2)
    got = (report.acc, report.forgetting, report.bwf, report.transfer)
    return CheckResult(
        "metric definitions",
        bool(np.allclose(got, expected, rtol=0.0, atol=1e-12)),
        f"acc, F, BwF, T_F = {', '.join(f'{x:.4f}' for x in got)}",
    )


def check_compensation(seed: int = 0) -> CheckResult:
    """
    PLC zeros, combined error on the new classes of each phase no worse than
    the mainstream's, and the compensation objective below its zero start
    """
    rng = get_rng(seed)
    d, classes = 20, 2
    embed = init_compensation_embed(d, d_c=32, seed=seed).freeze()
    state = init_state(d, gamma=1.0)
    compensation = init_compensation(embed, gamma=1.0, lambda2=0.6)
    centers = rng.normal(size=(6, d))
    problems = []

    for k in range(3):
        labels = rng.integers(classes, size=60) + k * classes
        X = centers[labels] + 0.8 * rng.normal(size=(60, d))
        Y = one_hot(labels, classes, k * classes)
        state = phase_update(expand_labels(state, classes), X, Y)
        compensation = expand_compensation(compensation, classes)
        target = residual_matrix(state, X, Y)
        if np.any(target.matrix[:, : target.old_width] != 0.0):
            problems.append(f"phase {k}: old-class residual columns not zero")
        X_C = compensation_embed(embed, X)
        compensation = compensation_update(compensation, X_C, target)

        new = slice(target.old_width, None)
        truth = np.hstack([np.zeros((60, target.old_width)), Y])[:, new]
        main_error = np.linalg.norm(truth - predict_mainstream(state, X)[:, new])
        combined_error = np.linalg.norm(truth - predict_combined(state, compensation, X)[:, new])
        if combined_error > main_error + 1e-9:
            problems.append(f"phase {k}: combined error {combined_error:.6f} > {main_error:.6f}")

        w = compensation.W[:, new]
        T = target.matrix[:, new]
        A = np.linalg.inv(compensation.R)
        objective = np.sum(T**2) - 2 * np.sum(T * (X_C @ w)) + np.sum(w * (A @ w))
        if np.abs(X_C.T @ T).max() > 0 and not objective < np.sum(T**2):
            problems.append(f"phase {k}: compensation objective did not decrease")
    return CheckResult("residual compensation", not problems, "; ".join(problems) or "3 phases")


CHECKS: t.List[t.Callable[[int], CheckResult]] = [
    check_recursive_equivalence,
    check_rank_updates,
    check_transport,
    check_fan_gradients,
    check_gnn_gradients,
    lambda seed: check_metrics(),
    check_compensation,
]


def run_checks(seed: int = 0) -> t.List[CheckResult]:
    results = []
    for check in CHECKS:
        try:
            result = check(seed)
        except MciglError as err:
            result = CheckResult(getattr(check, "__name__", "check"), False, f"raised {err!r}")
        logger.info("%s: %s (%s)", result.name, "ok" if result.passed else "FAILED", result.detail)
        results.append(result)
    return results
