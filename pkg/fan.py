"""
Fourier analysis layers: every layer concatenates cos and sin of a linear
periodic branch with a standard activated branch. The stack is trained once on
base-phase data with a classifier head, then frozen and used as the feature
backbone of both analytic streams.
"""
import logging
import typing as t
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, softmax

from lib import InputError, ProtocolError, TrainingError, as_matrix, check_width, get_rng, one_hot

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
ACTIVATIONS = ("gelu", "relu")
PERIODIC_INITS = ("normal", "harmonic")


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x**2) / np.sqrt(2.0 * np.pi)


def activate(x: np.ndarray, activation: str) -> np.ndarray:
    return gelu(x) if activation == "gelu" else np.maximum(x, 0.0)


def activate_grad(x: np.ndarray, activation: str) -> np.ndarray:
    return gelu_grad(x) if activation == "gelu" else (x > 0).astype(np.float64)


def split_width(width: int, p_ratio: float) -> t.Tuple[int, int]:
    """
    Periodic and standard branch sizes for an output width of 2 d_p + d_pbar
    """
    if not 0.0 <= p_ratio < 1.0:
        raise InputError(f"p_ratio must lie in [0, 1), got {p_ratio}")
    d_p = int(round(width * p_ratio / (1.0 + p_ratio)))
    return d_p, width - 2 * d_p


@dataclass
class FanLayerParams:
    W_p: np.ndarray
    W_pbar: np.ndarray
    B_pbar: np.ndarray
    activation: str = "gelu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        if self.W_p.shape[0] != self.W_pbar.shape[0]:
            raise InputError("both branches must read the same input width")
        if self.B_pbar.shape != (self.W_pbar.shape[1],):
            raise InputError("bias does not match the standard branch width")

    @property
    def d_in(self) -> int:
        return self.W_p.shape[0]

    @property
    def d_p(self) -> int:
        return self.W_p.shape[1]

    @property
    def d_out(self) -> int:
        return 2 * self.W_p.shape[1] + self.W_pbar.shape[1]

    def forward(self, X: np.ndarray):
        Z = X @ self.W_p
        A = X @ self.W_pbar + self.B_pbar
        out = np.hstack([np.cos(Z), np.sin(Z), activate(A, self.activation)])
        return out, (X, Z, A)

    def backward(self, d_out: np.ndarray, cache):
        X, Z, A = cache
        d_p = self.d_p
        d_cos, d_sin, d_act = d_out[:, :d_p], d_out[:, d_p : 2 * d_p], d_out[:, 2 * d_p :]
        d_Z = -np.sin(Z) * d_cos + np.cos(Z) * d_sin
        d_A = d_act * activate_grad(A, self.activation)
        d_X = d_Z @ self.W_p.T + d_A @ self.W_pbar.T
        return d_X, [X.T @ d_Z, X.T @ d_A, d_A.sum(axis=0)]


@dataclass
class FanStack:
    layers: t.List[FanLayerParams]
    head: np.ndarray
    normalize: bool = True
    mean: t.Optional[np.ndarray] = None
    std: t.Optional[np.ndarray] = None
    frozen: bool = False
    loss_history: t.List[float] = field(default_factory=list)

    def __post_init__(self):
        for previous, current in zip(self.layers, self.layers[1:]):
            if previous.d_out != current.d_in:
                raise InputError("FAN layer widths do not chain")
        if self.head.shape[0] != self.d_out:
            raise InputError(f"head expects width {self.head.shape[0]}, stack gives {self.d_out}")

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    @property
    def num_classes(self) -> int:
        return self.head.shape[1]

    def arrays(self) -> t.List[np.ndarray]:
        arrays = []
        for layer in self.layers:
            arrays.extend([layer.W_p, layer.W_pbar, layer.B_pbar])
        arrays.append(self.head)
        return arrays

    def copy(self) -> "FanStack":
        return FanStack(
            layers=[
                FanLayerParams(
                    layer.W_p.copy(), layer.W_pbar.copy(), layer.B_pbar.copy(), layer.activation
                )
                for layer in self.layers
            ],
            head=self.head.copy(),
            normalize=self.normalize,
            mean=None if self.mean is None else self.mean.copy(),
            std=None if self.std is None else self.std.copy(),
            loss_history=list(self.loss_history),
        )

    def freeze(self) -> "FanStack":
        for array in self.arrays():
            array.flags.writeable = False
        for stat in (self.mean, self.std):
            if stat is not None:
                stat.flags.writeable = False
        self.frozen = True
        return self

    def normalized(self, X: np.ndarray) -> np.ndarray:
        if not self.normalize:
            return X
        if self.mean is None or self.std is None:
            raise InputError("normalization statistics are missing")
        return (X - self.mean) / self.std

    def save(self, filename: str):
        arrays = {
            "version": np.array(FORMAT_VERSION),
            "dims": np.array([len(self.layers), self.d_in, self.d_out, self.num_classes]),
            "activation": np.array(self.layers[0].activation),
            "normalize": np.array(self.normalize),
            "head": self.head,
        }
        if self.normalize:
            arrays["mean"] = self.mean
            arrays["std"] = self.std
        for i, layer in enumerate(self.layers):
            arrays[f"W_p_{i}"] = layer.W_p
            arrays[f"W_pbar_{i}"] = layer.W_pbar
            arrays[f"B_pbar_{i}"] = layer.B_pbar
        with open(filename, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, filename: str) -> "FanStack":
        with np.load(filename) as data:
            if int(data["version"]) != FORMAT_VERSION:
                raise InputError(f"unsupported FAN stack version {int(data['version'])}")
            num_layers = int(data["dims"][0])
            activation = str(data["activation"])
            normalize = bool(data["normalize"])
            stack = cls(
                layers=[
                    FanLayerParams(
                        data[f"W_p_{i}"], data[f"W_pbar_{i}"], data[f"B_pbar_{i}"], activation
                    )
                    for i in range(num_layers)
                ],
                head=data["head"],
                normalize=normalize,
                mean=data["mean"] if normalize else None,
                std=data["std"] if normalize else None,
            )
        return stack.freeze()


def harmonic_frequencies(d_in: int, d_p: int) -> np.ndarray:
    """
    Periodic weights reading one input coordinate each at pi, 2 pi, 3 pi, ...
    """
    W_p = np.zeros((d_in, d_p))
    for j in range(d_p):
        W_p[j % d_in, j] = np.pi * (j // d_in + 1)
    return W_p


def init_fan_stack(
    d_in: int,
    num_classes: int,
    width: int = 64,
    layers: int = 3,
    p_ratio: float = 0.25,
    activation: str = "gelu",
    seed: int = 0,
    periodic_scale: float = 1.0,
    normalize: bool = True,
    periodic_init: str = "normal",
) -> FanStack:
    if periodic_init not in PERIODIC_INITS:
        raise InputError(f"unknown periodic init {periodic_init!r}")
    rng = get_rng(seed)
    d_p, d_pbar = split_width(width, p_ratio)
    stack_layers = []
    fan_in = d_in
    for index in range(layers):
        W_p = rng.normal(0.0, periodic_scale / np.sqrt(fan_in), size=(fan_in, d_p))
        if periodic_init == "harmonic" and index == 0:
            W_p = harmonic_frequencies(fan_in, d_p)
        stack_layers.append(
            FanLayerParams(
                W_p=W_p,
                W_pbar=rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, d_pbar)),
                B_pbar=np.zeros(d_pbar),
                activation=activation,
            )
        )
        fan_in = 2 * d_p + d_pbar
    head = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, num_classes))
    return FanStack(layers=stack_layers, head=head, normalize=normalize)


def _forward_cached(stack: FanStack, X):
    X = as_matrix(X, "X")
    check_width(X, stack.d_in, "FAN input")
    H = stack.normalized(X)
    caches = []
    for layer in stack.layers:
        H, cache = layer.forward(H)
        caches.append(cache)
    return H, caches


def fan_forward(stack: FanStack, X) -> np.ndarray:
    return _forward_cached(stack, X)[0]


def loss_and_grads(stack: FanStack, X, labels):
    """
    Mean cross-entropy of softmax(X_FAN W_FCN); grads ordered like stack.arrays()
    """
    features, caches = _forward_cached(stack, X)
    targets = one_hot(labels, stack.num_classes)
    probs = softmax(features @ stack.head, axis=1)
    loss = -np.mean(np.log(np.sum(probs * targets, axis=1)))

    d_logits = (probs - targets) / len(targets)
    d_head = features.T @ d_logits
    d_H = d_logits @ stack.head.T
    layer_grads = []
    for layer, cache in zip(reversed(stack.layers), reversed(caches)):
        d_H, grads = layer.backward(d_H, cache)
        layer_grads = grads + layer_grads
    return loss, layer_grads + [d_head]


@dataclass(frozen=True)
class AdamW:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: t.Optional[int] = None


def adamw_step(optimizer: AdamW, arrays, grads, first, second, step: int):
    """
    In-place AdamW update with decoupled weight decay
    """
    for array, grad, m, v in zip(arrays, grads, first, second):
        m *= optimizer.beta1
        m += (1.0 - optimizer.beta1) * grad
        v *= optimizer.beta2
        v += (1.0 - optimizer.beta2) * grad**2
        m_hat = m / (1.0 - optimizer.beta1**step)
        v_hat = v / (1.0 - optimizer.beta2**step)
        array -= optimizer.lr * optimizer.weight_decay * array
        array -= optimizer.lr * m_hat / (np.sqrt(v_hat) + optimizer.eps)


def train_fan(
    stack: FanStack,
    X,
    labels,
    epochs: int = 200,
    optimizer: t.Optional[AdamW] = None,
    seed: int = 0,
) -> FanStack:
    """
    Joint training of layers and head with AdamW, returns a frozen copy
    """
    if stack.frozen:
        raise ProtocolError("FAN stack is frozen")
    optimizer = optimizer or AdamW()
    X = as_matrix(X, "X")
    labels = np.asarray(labels, dtype=np.int64)
    rng = get_rng(seed)

    trained = stack.copy()
    if trained.normalize:
        trained.mean = X.mean(axis=0)
        std = X.std(axis=0)
        trained.std = np.where(std > 1e-12, std, 1.0)

    arrays = trained.arrays()
    first = [np.zeros_like(a) for a in arrays]
    second = [np.zeros_like(a) for a in arrays]
    n = len(X)

    for epoch in range(epochs):
        if optimizer.batch_size is not None and optimizer.batch_size < n:
            batch = rng.choice(n, size=optimizer.batch_size, replace=False)
        else:
            batch = slice(None)
        loss, grads = loss_and_grads(trained, X[batch], labels[batch])
        if not np.isfinite(loss):
            raise TrainingError(
                f"FAN loss became {loss} at epoch {epoch} after {len(trained.loss_history)} finite epochs"
            )
        trained.loss_history.append(float(loss))
        adamw_step(optimizer, arrays, grads, first, second, epoch + 1)
        if epoch % 50 == 0:
            logger.debug("FAN epoch %d: loss %.6f", epoch, loss)

    logger.info("FAN training finished after %d epochs", epochs)
    return trained.freeze()


def fan_accuracy(stack: FanStack, X, labels) -> float:
    predicted = np.argmax(fan_forward(stack, X) @ stack.head, axis=1)
    return float(np.mean(predicted == np.asarray(labels)))
