"""
Concatenated recursive least squares over a growing label space.

The state keeps the mainstream weights, the inverse of the regularized
autocorrelation and (optionally) the cross-correlation. It never keeps a
sample: with beta == 1 the weights after any sequence of phases equal the
ridge solution over all phases' data at once.
"""
import logging
import typing as t
from dataclasses import dataclass, field, replace

import numpy as np

from lib import InputError, as_matrix, check_width
from numeric import ensure_spd, sherman_morrison_update, symmetrize, woodbury_block_update

logger = logging.getLogger(__name__)

UPDATE_MODES = ("block", "sample")
FORMAT_VERSION = 1


def rls_update(
    W: np.ndarray, P: np.ndarray, X: np.ndarray, Y: np.ndarray, beta: float, mode: str = "block"
) -> t.Tuple[np.ndarray, np.ndarray]:
    """
    One phase of the recursion: P <- (beta P^-1 + X'X)^-1, W <- W + P X'(Y - X W).

    The forgetting factor is applied once per phase. In sample mode the rows
    are folded in one at a time with rank-one updates; the first row carries
    beta in its gain denominator, the rest see beta = 1.
    """
    if mode not in UPDATE_MODES:
        raise InputError(f"unknown update mode {mode!r}")
    if len(X) == 0:
        return W, P

    if mode == "block":
        P = woodbury_block_update(P, X, beta)
        return W + P @ X.T @ (Y - X @ W), P

    W = W.copy()
    P = P / beta
    for x, y in zip(X, Y):
        P = symmetrize(sherman_morrison_update(P, x, x))
        gain = P @ x
        W += np.outer(gain, y - x @ W)
    return W, P


def pad_targets(Y: np.ndarray, width: int) -> np.ndarray:
    """
    Left-pad targets with zero columns for the classes of earlier phases
    """
    if Y.shape[1] > width:
        raise InputError(f"targets span {Y.shape[1]} classes but only {width} are known")
    return np.hstack([np.zeros((Y.shape[0], width - Y.shape[1])), Y])


@dataclass
class AnalyticState:
    W: np.ndarray
    Phi_inv: np.ndarray
    gamma: float
    beta: float = 1.0
    Z: t.Optional[np.ndarray] = None
    phase: int = 0
    class_increments: t.List[int] = field(default_factory=list)
    update_mode: str = "block"

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def seen_class_count(self) -> int:
        return self.W.shape[1]

    @property
    def old_width(self) -> int:
        """
        Classes known before the most recent expansion
        """
        return self.seen_class_count - (self.class_increments[-1] if self.class_increments else 0)

    @property
    def nbytes(self) -> int:
        return self.W.nbytes + self.Phi_inv.nbytes + (0 if self.Z is None else self.Z.nbytes)

    def save(self, filename: str):
        arrays = {
            "version": np.array(FORMAT_VERSION),
            "dims": np.array([self.d, self.seen_class_count, self.phase]),
            "gamma": np.array(self.gamma),
            "beta": np.array(self.beta),
            "update_mode": np.array(self.update_mode),
            "class_increments": np.array(self.class_increments, dtype=np.int64),
            "W": self.W,
            "Phi_inv": self.Phi_inv,
        }
        if self.Z is not None:
            arrays["Z"] = self.Z
        with open(filename, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, filename: str) -> "AnalyticState":
        with np.load(filename) as data:
            if int(data["version"]) != FORMAT_VERSION:
                raise InputError(f"unsupported checkpoint version {int(data['version'])}")
            return cls(
                W=data["W"],
                Phi_inv=data["Phi_inv"],
                gamma=float(data["gamma"]),
                beta=float(data["beta"]),
                Z=data["Z"] if "Z" in data.files else None,
                phase=int(data["dims"][2]),
                class_increments=[int(n) for n in data["class_increments"]],
                update_mode=str(data["update_mode"]),
            )


def init_state(
    d: int,
    gamma: float,
    beta: float = 1.0,
    update_mode: str = "block",
    track_cross_correlation: bool = True,
) -> AnalyticState:
    if gamma <= 0:
        raise InputError(f"gamma must be positive, got {gamma}")
    if not 0.0 < beta <= 1.0:
        raise InputError(f"beta must lie in (0, 1], got {beta}")
    if update_mode not in UPDATE_MODES:
        raise InputError(f"unknown update mode {update_mode!r}")
    return AnalyticState(
        W=np.zeros((d, 0)),
        Phi_inv=np.eye(d) / gamma,
        gamma=gamma,
        beta=beta,
        Z=np.zeros((d, 0)) if track_cross_correlation else None,
        update_mode=update_mode,
    )


def expand_labels(state: AnalyticState, new_class_count: int) -> AnalyticState:
    if new_class_count < 1:
        raise InputError("expansion needs at least one new class")
    tail = np.zeros((state.d, new_class_count))
    return replace(
        state,
        W=np.hstack([state.W, tail]),
        Z=None if state.Z is None else np.hstack([state.Z, tail]),
        class_increments=[*state.class_increments, new_class_count],
    )


def phase_update(
    state: AnalyticState, X_Mk, Y_k, mode: t.Optional[str] = None
) -> AnalyticState:
    """
    Fold one phase of features and one-hot targets into the state.

    Y_k may cover only the newest classes; it is padded with zero columns for
    every earlier class.
    """
    X = as_matrix(X_Mk, "X_Mk")
    Y = as_matrix(Y_k, "Y_k")
    check_width(X, state.d, "mainstream features")
    if X.shape[0] != Y.shape[0]:
        raise InputError(f"X_Mk has {X.shape[0]} rows, Y_k has {Y.shape[0]}")
    if len(X) == 0:
        return state

    Y = pad_targets(Y, state.seen_class_count)
    W, Phi_inv = rls_update(state.W, state.Phi_inv, X, Y, state.beta, mode or state.update_mode)
    ensure_spd(Phi_inv, "inverse autocorrelation")
    Z = None if state.Z is None else state.beta * state.Z + X.T @ Y
    logger.info(
        "mainstream phase %d: %d samples, %d classes", state.phase, len(X), Y.shape[1]
    )
    return replace(state, W=W, Phi_inv=Phi_inv, Z=Z, phase=state.phase + 1)


def predict_mainstream(state: AnalyticState, X) -> np.ndarray:
    X = as_matrix(X, "X")
    check_width(X, state.d, "mainstream features")
    return X @ state.W
