# -*- coding: utf-8 -*-
import logging
import typing as t

import numpy as np


class MciglError(Exception):
    pass


class InputError(MciglError, ValueError):
    pass


class ConfigError(MciglError, ValueError):
    pass


class ProtocolError(MciglError, RuntimeError):
    pass


class NumericalError(MciglError, ArithmeticError):
    """
    Numerical failure, optionally tagged with the protocol phase it happened in
    """

    def __init__(self, message: str, phase: t.Optional[int] = None):
        super().__init__(message)
        self.message = message
        self.phase = phase

    def __str__(self) -> str:
        if self.phase is None:
            return self.message
        return f"phase {self.phase}: {self.message}"

    def at_phase(self, phase: int) -> "NumericalError":
        self.phase = phase
        return self


class SingularError(NumericalError):
    pass


class TrainingError(NumericalError):
    pass


def get_rng(seed: int) -> np.random.Generator:
    if seed is None:
        raise InputError("a seed is required")
    return np.random.default_rng(seed)


def as_matrix(value, name: str = "matrix") -> np.ndarray:
    """
    Coerce to a finite 2-d float64 array or raise InputError
    """
    array = np.asarray(value, dtype=np.float64)
    if array.ndim != 2:
        raise InputError(f"{name} must be 2-d, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise InputError(f"{name} has non-finite entries")
    return array


def as_vector(value, name: str = "vector") -> np.ndarray:
    array = np.asarray(value, dtype=np.float64).ravel()
    if not np.all(np.isfinite(array)):
        raise InputError(f"{name} has non-finite entries")
    return array


def check_width(matrix: np.ndarray, width: int, name: str = "input"):
    if matrix.shape[1] != width:
        raise InputError(f"{name} width {matrix.shape[1]} does not match {width}")


def one_hot(labels, width: int, offset: int = 0) -> np.ndarray:
    labels = np.asarray(labels, dtype=int) - offset
    if labels.size and (labels.min() < 0 or labels.max() >= width):
        raise InputError(f"labels out of range for width {width}")
    encoded = np.zeros((len(labels), width))
    encoded[np.arange(len(labels)), labels] = 1.0
    return encoded


def setup_logging(verbose: bool = False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
