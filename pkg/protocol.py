"""
Protocol configuration and the synthetic class-incremental graph stream.

Every class is a community of a stochastic block model. Textual features are
Gaussian around a class mean; coordinate 1 carries a per-node phase tau and
coordinate 0 a class-dependent sinusoid of it. Visual features are a fixed
linear image of the textual ones plus noise, so the two modalities can be
aligned.
"""
import logging
import os
import typing as t
from dataclasses import asdict, dataclass, fields

import networkx as nx
import numpy as np

from analytic import UPDATE_MODES
from fan import ACTIVATIONS as FAN_ACTIVATIONS
from lib import ConfigError, ProtocolError, get_rng
from mmgraph import MultimodalGraph
from residual import ACTIVATIONS as COMPENSATION_ACTIVATIONS

logger = logging.getLogger(__name__)

CONFIG_NAME = "config.cfg"


@dataclass(frozen=True)
class ProtocolConfig:
    # stream
    num_classes: int = 10
    classes_per_phase: int = 2
    nodes_per_class: int = 40
    test_nodes_per_class: int = 20
    d_v: int = 24
    d_t: int = 16
    noise: float = 0.5
    class_separation: float = 1.0
    p_in: float = 0.3
    p_out: float = 0.02
    periodic_amplitude: float = 1.0
    freq_min: float = 1.0
    freq_max: float = 4.0
    seed: int = 0
    # analytic streams and transport
    gamma: float = 1.0
    beta: float = 1.0
    update_mode: str = "block"
    lambda1: float = 0.5
    lambda2: float = 0.6
    epsilon: float = 0.05
    ot_max_outer: int = 20
    ot_max_sinkhorn: int = 500
    ot_tol: float = 1e-6
    # message passing backbone
    gnn_layers: int = 2
    gnn_hidden: int = 32
    gnn_epochs: int = 60
    gnn_lr: float = 0.05
    gnn_momentum: float = 0.9
    align_weight: float = 0.1
    plan_refresh: int = 10
    # FAN stack
    fan_layers: int = 3
    fan_width: int = 64
    p_ratio: float = 0.25
    fan_activation: str = "gelu"
    fan_epochs: int = 150
    fan_lr: float = 1e-2
    fan_weight_decay: float = 1e-4
    # compensation stream; gamma_c = 0 inherits gamma
    compensation: bool = True
    comp_channels: int = 4
    comp_kernel: int = 3
    comp_width: int = 128
    comp_activation: str = "tanh"
    comp_epochs: int = 60
    comp_lr: float = 1e-2
    gamma_c: float = 0.0
    # naive baseline
    naive_epochs: int = 100
    naive_lr: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type is float and isinstance(value, int) and not isinstance(value, bool):
                object.__setattr__(self, f.name, float(value))
            elif not isinstance(value, f.type) or (f.type is int and isinstance(value, bool)):
                raise ConfigError(f"{f.name} must be {f.type.__name__}, got {value!r}")

        positive_ints = (
            "num_classes", "classes_per_phase", "nodes_per_class", "test_nodes_per_class",
            "d_v", "d_t", "ot_max_outer", "ot_max_sinkhorn", "gnn_layers", "gnn_hidden",
            "fan_layers", "fan_width", "comp_channels", "comp_kernel", "comp_width",
        )
        for name in positive_ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("gnn_epochs", "fan_epochs", "comp_epochs", "naive_epochs", "plan_refresh"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must not be negative")
        for name in ("gamma", "epsilon", "ot_tol", "gnn_lr", "fan_lr", "comp_lr", "naive_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("noise", "class_separation", "periodic_amplitude", "gamma_c",
                     "fan_weight_decay", "align_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must not be negative")
        for name in ("p_in", "p_out", "lambda1", "lambda2", "gnn_momentum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

        if self.num_classes % self.classes_per_phase:
            raise ConfigError(
                f"{self.num_classes} classes do not split into phases of {self.classes_per_phase}"
            )
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if not 0.0 < self.freq_min <= self.freq_max:
            raise ConfigError("frequency range must satisfy 0 < freq_min <= freq_max")
        if not 0.0 <= self.p_ratio < 1.0:
            raise ConfigError(f"p_ratio must lie in [0, 1), got {self.p_ratio}")
        if self.comp_kernel % 2 != 1:
            raise ConfigError("comp_kernel must be odd")
        if self.update_mode not in UPDATE_MODES:
            raise ConfigError(f"update_mode must be one of {', '.join(UPDATE_MODES)}")
        if self.fan_activation not in FAN_ACTIVATIONS:
            raise ConfigError(f"fan_activation must be one of {', '.join(FAN_ACTIVATIONS)}")
        if self.comp_activation not in COMPENSATION_ACTIVATIONS:
            raise ConfigError(
                f"comp_activation must be one of {', '.join(COMPENSATION_ACTIVATIONS)}"
            )

    @property
    def num_phases(self) -> int:
        return self.num_classes // self.classes_per_phase

    @property
    def compensation_gamma(self) -> float:
        return self.gamma_c if self.gamma_c > 0 else self.gamma

    def phase_classes(self, phase: int) -> t.Tuple[int, ...]:
        start = phase * self.classes_per_phase
        return tuple(range(start, start + self.classes_per_phase))


def _parse_value(name: str, kind: type, text: str):
    if kind is bool:
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: {text!r} is not a boolean")
    try:
        return kind(text)
    except ValueError as err:
        raise ConfigError(f"{name}: {text!r} is not a valid {kind.__name__}") from err


def parse_config(text: str, source: str = "<config>", **overrides) -> ProtocolConfig:
    """
    Read flat `key = value` lines. Comments start with #.
    """
    kinds = {f.name: f.type for f in fields(ProtocolConfig)}
    values: t.Dict[str, t.Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"{source}:{number}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{number}: duplicate key {key!r}")
        values[key] = _parse_value(key, kinds[key], value)

    unknown = set(overrides) - set(kinds)
    if unknown:
        raise ConfigError(f"unknown override {', '.join(sorted(unknown))}")
    values.update(overrides)
    return ProtocolConfig(**values)


def load_config(filename: str, **overrides) -> ProtocolConfig:
    try:
        with open(filename) as f:
            text = f.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {filename}: {err}") from err
    return parse_config(text, source=filename, **overrides)


def dump_config(config: ProtocolConfig) -> str:
    lines = []
    for key, value in asdict(config).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


@dataclass
class PhaseClasses:
    phase: int
    classes: t.Tuple[int, ...]

    @property
    def class_offset(self) -> int:
        return self.classes[0]

    @property
    def class_count(self) -> int:
        return len(self.classes)


@dataclass
class PhaseSplit(PhaseClasses):
    train: MultimodalGraph
    test: MultimodalGraph


@dataclass
class Stream:
    config: ProtocolConfig
    phases: t.List[PhaseSplit]
    mixing: t.Optional[np.ndarray] = None

    def save(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, CONFIG_NAME), "w") as f:
            f.write(dump_config(self.config))
        for split in self.phases:
            split.train.save(os.path.join(directory, f"phase{split.phase}_train.graph"))
            split.test.save(os.path.join(directory, f"phase{split.phase}_test.graph"))


def load_stream(directory: str) -> Stream:
    config = load_config(os.path.join(directory, CONFIG_NAME))
    phases = []
    for phase in range(config.num_phases):
        phases.append(
            PhaseSplit(
                phase=phase,
                classes=config.phase_classes(phase),
                train=MultimodalGraph.load(os.path.join(directory, f"phase{phase}_train.graph")),
                test=MultimodalGraph.load(os.path.join(directory, f"phase{phase}_test.graph")),
            )
        )
    return Stream(config=config, phases=phases)


def _block_edges(sizes: t.List[int], p_in: float, p_out: float, seed: int) -> np.ndarray:
    probs = np.full((len(sizes), len(sizes)), p_out)
    np.fill_diagonal(probs, p_in)
    graph = nx.stochastic_block_model(sizes, probs.tolist(), seed=seed)
    return np.array(sorted(graph.edges()), dtype=np.int64).reshape(-1, 2)


def _sample_split(config: ProtocolConfig, rng, classes, per_class, means, freqs, mixing):
    labels = np.repeat(np.array(classes, dtype=np.int64), per_class)
    n = len(labels)
    txt = means[labels] + config.noise * rng.normal(size=(n, config.d_t))
    tau = rng.uniform(0.0, 1.0, size=n)
    if config.d_t > 1:
        txt[:, 1] = tau
    txt[:, 0] += config.periodic_amplitude * np.sin(2.0 * np.pi * freqs[labels] * tau)
    vis = txt @ mixing + config.noise * rng.normal(size=(n, config.d_v))
    edges = _block_edges(
        [per_class] * len(classes), config.p_in, config.p_out, int(rng.integers(2**31))
    )
    return MultimodalGraph(
        num_nodes=n, edges=edges, features_vis=vis, features_txt=txt, labels=labels
    )


def generate_stream(config: ProtocolConfig) -> Stream:
    rng = get_rng(config.seed)
    means = rng.normal(0.0, config.class_separation, size=(config.num_classes, config.d_t))
    freqs = rng.permutation(np.linspace(config.freq_min, config.freq_max, config.num_classes))
    mixing = rng.normal(0.0, 1.0 / np.sqrt(config.d_t), size=(config.d_t, config.d_v))

    phases = []
    for phase in range(config.num_phases):
        classes = config.phase_classes(phase)
        train = _sample_split(config, rng, classes, config.nodes_per_class, means, freqs, mixing)
        test = _sample_split(config, rng, classes, config.test_nodes_per_class, means, freqs, mixing)
        phases.append(PhaseSplit(phase=phase, classes=classes, train=train, test=test))
    logger.info(
        "generated %d phases of %d classes (seed %d)",
        config.num_phases,
        config.classes_per_phase,
        config.seed,
    )
    return Stream(config=config, phases=phases, mixing=mixing)


@dataclass(frozen=True)
class AccessRecord:
    current_phase: int
    phase: int
    purpose: str


class PhaseStream:
    """
    Hands out each training split during its own phase only; released splits
    are gone. Test splits stay readable for evaluation, and per-phase class
    metadata never carries training data.
    """

    def __init__(self, stream: Stream):
        self._classes = [PhaseClasses(split.phase, tuple(split.classes)) for split in stream.phases]
        self._train = {split.phase: split.train for split in stream.phases}
        self._test = [split.test for split in stream.phases]
        self.access_log: t.List[AccessRecord] = []

    @property
    def num_phases(self) -> int:
        return len(self._classes)

    def split(self, phase: int) -> PhaseClasses:
        return self._classes[phase]

    def take_train(self, phase: int, current_phase: int, purpose: str) -> MultimodalGraph:
        if phase != current_phase:
            raise ProtocolError(
                f"training data of phase {phase} requested during phase {current_phase}"
            )
        if phase not in self._train:
            raise ProtocolError(f"training data of phase {phase} has been released")
        self.access_log.append(AccessRecord(current_phase, phase, purpose))
        return self._train[phase]

    def release(self, phase: int):
        self._train.pop(phase, None)

    def test(self, phase: int) -> MultimodalGraph:
        return self._test[phase]
