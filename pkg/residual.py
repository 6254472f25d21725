"""
Residual compensation stream.

A second embedding (1-d convolution over the backbone feature vector, a frozen
random buffer projection and a nonlinearity unlike the backbone's) fits what
the mainstream leaves unexplained on the current phase's classes, with the
same recursive least squares as the mainstream.
"""
import logging
import typing as t
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import correlate1d
from scipy.special import expit, softmax

from analytic import FORMAT_VERSION, AnalyticState, pad_targets, predict_mainstream, rls_update
from fan import AdamW, adamw_step
from lib import (
    InputError,
    ProtocolError,
    TrainingError,
    as_matrix,
    check_width,
    get_rng,
    one_hot,
)
from numeric import ensure_spd

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "mish")


def _softplus(x):
    return np.logaddexp(0.0, x)


def sigma_c(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(x)
    return x * np.tanh(_softplus(x))


def sigma_c_grad(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return 1.0 - np.tanh(x) ** 2
    squashed = np.tanh(_softplus(x))
    return squashed + x * (1.0 - squashed**2) * expit(x)


@dataclass
class CompensationEmbed:
    kernels: np.ndarray
    bias: np.ndarray
    B: np.ndarray
    activation: str = "tanh"
    frozen: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown compensation activation {self.activation!r}")
        if self.kernels.shape[1] % 2 != 1:
            raise InputError("convolution kernels must have odd width")
        if self.bias.shape != (self.channels,):
            raise InputError("one bias per channel is required")
        if self.B.shape[0] % self.channels:
            raise InputError("buffer projection does not match the channel count")

    @property
    def channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def d_in(self) -> int:
        return self.B.shape[0] // self.channels

    @property
    def d_c(self) -> int:
        return self.B.shape[1]

    def copy(self) -> "CompensationEmbed":
        return CompensationEmbed(
            self.kernels.copy(), self.bias.copy(), self.B.copy(), self.activation
        )

    def freeze(self) -> "CompensationEmbed":
        for array in (self.kernels, self.bias, self.B):
            array.flags.writeable = False
        self.frozen = True
        return self


def init_compensation_embed(
    d_in: int,
    d_c: int = 128,
    channels: int = 4,
    kernel_width: int = 3,
    activation: str = "tanh",
    seed: int = 0,
) -> CompensationEmbed:
    rng = get_rng(seed)
    kernels = rng.normal(0.0, 1.0 / np.sqrt(kernel_width), size=(channels, kernel_width))
    B = rng.normal(0.0, 1.0 / np.sqrt(channels * d_in), size=(channels * d_in, d_c))
    return CompensationEmbed(kernels, np.zeros(channels), B, activation)


def _convolve(embed: CompensationEmbed, X: np.ndarray) -> np.ndarray:
    maps = [
        correlate1d(X, kernel, axis=1, mode="constant", cval=0.0) + b
        for kernel, b in zip(embed.kernels, embed.bias)
    ]
    return np.hstack(maps)


def compensation_embed(embed: CompensationEmbed, X_raw) -> np.ndarray:
    """
    sigma_C(flat(conv(X)) B)
    """
    X = as_matrix(X_raw, "X_raw")
    check_width(X, embed.d_in, "compensation input")
    return sigma_c(_convolve(embed, X) @ embed.B, embed.activation)


def embed_loss_and_grads(embed: CompensationEmbed, head: np.ndarray, X, targets):
    """
    Cross-entropy through a linear head; grads for kernels, bias and head
    """
    flat = _convolve(embed, X)
    pre = flat @ embed.B
    features = sigma_c(pre, embed.activation)
    probs = softmax(features @ head, axis=1)
    n = len(X)
    loss = -np.mean(np.log(np.sum(probs * targets, axis=1)))

    d_scores = (probs - targets) / n
    d_head = features.T @ d_scores
    d_pre = (d_scores @ head.T) * sigma_c_grad(pre, embed.activation)
    d_flat = (d_pre @ embed.B.T).reshape(n, embed.channels, embed.d_in)

    half = embed.kernels.shape[1] // 2
    padded = np.pad(X, ((0, 0), (half, half)))
    d_kernels = np.empty_like(embed.kernels)
    for j in range(embed.kernels.shape[1]):
        window = padded[:, j : j + embed.d_in]
        d_kernels[:, j] = np.einsum("nci,ni->c", d_flat, window)
    d_bias = d_flat.sum(axis=(0, 2))
    return loss, [d_kernels, d_bias, d_head]


def train_compensation_embed(
    embed: CompensationEmbed,
    X,
    labels,
    num_classes: int,
    epochs: int = 60,
    optimizer: t.Optional[AdamW] = None,
    seed: int = 0,
) -> CompensationEmbed:
    """
    Fit the convolution on base-phase data through a temporary softmax head,
    then freeze. B stays at its random draw.
    """
    if embed.frozen:
        raise ProtocolError("compensation embedding is frozen")
    optimizer = optimizer or AdamW(weight_decay=0.0)
    X = as_matrix(X, "X")
    targets = one_hot(labels, num_classes)
    rng = get_rng(seed)
    trained = embed.copy()
    head = rng.normal(0.0, 1.0 / np.sqrt(embed.d_c), size=(embed.d_c, num_classes))

    arrays = [trained.kernels, trained.bias, head]
    first = [np.zeros_like(a) for a in arrays]
    second = [np.zeros_like(a) for a in arrays]
    for epoch in range(epochs):
        loss, grads = embed_loss_and_grads(trained, head, X, targets)
        if not np.isfinite(loss):
            raise TrainingError(f"compensation embedding loss became {loss} at epoch {epoch}")
        adamw_step(optimizer, arrays, grads, first, second, epoch + 1)
    logger.info("compensation embedding trained for %d epochs", epochs)
    return trained.freeze()


@dataclass(frozen=True)
class ResidualTarget:
    matrix: np.ndarray
    old_width: int

    def __post_init__(self):
        if np.any(self.matrix[:, : self.old_width] != 0.0):
            raise ProtocolError("residual target has non-zero old-class columns")


@dataclass
class CompensationState:
    embed: CompensationEmbed
    W: np.ndarray
    R: np.ndarray
    gamma: float
    beta: float = 1.0
    lambda2: float = 0.6
    phase: int = 0
    update_mode: str = "block"

    @property
    def d_c(self) -> int:
        return self.W.shape[0]

    @property
    def seen_class_count(self) -> int:
        return self.W.shape[1]

    def save(self, filename: str):
        with open(filename, "wb") as f:
            np.savez(
                f,
                version=np.array(FORMAT_VERSION),
                phase=np.array(self.phase),
                gamma=np.array(self.gamma),
                beta=np.array(self.beta),
                lambda2=np.array(self.lambda2),
                update_mode=np.array(self.update_mode),
                activation=np.array(self.embed.activation),
                kernels=self.embed.kernels,
                bias=self.embed.bias,
                B=self.embed.B,
                W=self.W,
                R=self.R,
            )

    @classmethod
    def load(cls, filename: str) -> "CompensationState":
        with np.load(filename) as data:
            if int(data["version"]) != FORMAT_VERSION:
                raise InputError(f"unsupported checkpoint version {int(data['version'])}")
            embed = CompensationEmbed(
                data["kernels"], data["bias"], data["B"], str(data["activation"])
            )
            return cls(
                embed=embed.freeze(),
                W=data["W"],
                R=data["R"],
                gamma=float(data["gamma"]),
                beta=float(data["beta"]),
                lambda2=float(data["lambda2"]),
                phase=int(data["phase"]),
                update_mode=str(data["update_mode"]),
            )


def init_compensation(
    embed: CompensationEmbed,
    gamma: float,
    beta: float = 1.0,
    lambda2: float = 0.6,
    update_mode: str = "block",
) -> CompensationState:
    if gamma <= 0:
        raise InputError(f"gamma must be positive, got {gamma}")
    if not 0.0 <= lambda2 <= 1.0:
        raise InputError(f"lambda2 must lie in [0, 1], got {lambda2}")
    return CompensationState(
        embed=embed,
        W=np.zeros((embed.d_c, 0)),
        R=np.eye(embed.d_c) / gamma,
        gamma=gamma,
        beta=beta,
        lambda2=lambda2,
        update_mode=update_mode,
    )


def expand_compensation(state: CompensationState, new_class_count: int) -> CompensationState:
    if new_class_count < 1:
        raise InputError("expansion needs at least one new class")
    return replace(state, W=np.hstack([state.W, np.zeros((state.d_c, new_class_count))]))


def residual_matrix(
    mainstream: AnalyticState, X_Mk, Y_k, old_width: t.Optional[int] = None
) -> ResidualTarget:
    """
    Mainstream residual on the current phase with the old-class columns cleansed
    """
    X = as_matrix(X_Mk, "X_Mk")
    Y = pad_targets(as_matrix(Y_k, "Y_k"), mainstream.seen_class_count)
    if X.shape[0] != Y.shape[0]:
        raise InputError(f"X_Mk has {X.shape[0]} rows, Y_k has {Y.shape[0]}")
    old_width = mainstream.old_width if old_width is None else old_width

    residual = Y - predict_mainstream(mainstream, X)
    residual[:, :old_width] = 0.0
    return ResidualTarget(matrix=residual, old_width=old_width)


def compensation_update(
    state: CompensationState, X_Ck, target: ResidualTarget
) -> CompensationState:
    X = as_matrix(X_Ck, "X_Ck")
    check_width(X, state.d_c, "compensation features")
    if target.matrix.shape != (X.shape[0], state.seen_class_count):
        raise InputError(
            f"residual target {target.matrix.shape} does not match "
            f"{X.shape[0]} samples and {state.seen_class_count} classes"
        )
    if len(X) == 0:
        return state
    W, R = rls_update(state.W, state.R, X, target.matrix, state.beta, state.update_mode)
    ensure_spd(R, "compensation inverse correlation")
    return replace(state, W=W, R=R, phase=state.phase + 1)


def check_streams_agree(mainstream: AnalyticState, compensation: CompensationState):
    if mainstream.seen_class_count != compensation.seen_class_count:
        raise ProtocolError(
            f"mainstream knows {mainstream.seen_class_count} classes, "
            f"compensation {compensation.seen_class_count}"
        )
    if mainstream.phase != compensation.phase:
        raise ProtocolError(
            f"mainstream is at phase {mainstream.phase}, compensation at {compensation.phase}"
        )


def compensation_scores(mainstream: AnalyticState, compensation: CompensationState, X) -> np.ndarray:
    """
    The compensation stream's own prediction: mainstream scores plus its residual fit
    """
    check_streams_agree(mainstream, compensation)
    correction = compensation_embed(compensation.embed, X) @ compensation.W
    return predict_mainstream(mainstream, X) + correction


def predict_combined(mainstream: AnalyticState, compensation: CompensationState, X) -> np.ndarray:
    """
    lambda2 * mainstream + (1 - lambda2) * compensation stream
    """
    check_streams_agree(mainstream, compensation)
    lambda2 = compensation.lambda2
    main = predict_mainstream(mainstream, X)
    if lambda2 == 1.0:
        return main
    return lambda2 * main + (1.0 - lambda2) * compensation_scores(mainstream, compensation, X)
