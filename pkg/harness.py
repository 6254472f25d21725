"""
Class-incremental runs over a synthetic stream.

A backbone (message passing GNN with transport fusion, then the FAN stack,
plus the compensation embedding) is trained on the base phase and frozen.
MCIGLE then learns every phase in closed form; the naive baseline re-fits a
softmax head on current-phase data; the joint run fits all phases at once.
"""
import logging
import typing as t
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from analytic import AnalyticState, expand_labels, init_state, phase_update, predict_mainstream
from fan import AdamW, FanStack, fan_forward, init_fan_stack, train_fan
from lib import NumericalError, TrainingError, one_hot
from metrics import AccuracyMatrix, MetricsReport, compute_metrics
from mmgraph import GnnParams, MultimodalGraph, fused_features, init_gnn_params, train_base
from numeric import ridge_solve
from protocol import AccessRecord, PhaseStream, ProtocolConfig, Stream, generate_stream
from residual import (
    CompensationEmbed,
    CompensationState,
    ResidualTarget,
    compensation_embed,
    compensation_update,
    expand_compensation,
    init_compensation,
    init_compensation_embed,
    predict_combined,
    residual_matrix,
    train_compensation_embed,
)
from transport import TransportSettings

logger = logging.getLogger(__name__)


def transport_settings(config: ProtocolConfig) -> TransportSettings:
    return TransportSettings(
        lambda1=config.lambda1,
        epsilon=config.epsilon,
        max_outer=config.ot_max_outer,
        max_sinkhorn=config.ot_max_sinkhorn,
        tol=config.ot_tol,
    )


@dataclass
class Backbone:
    gnn: GnnParams
    fan: FanStack
    embed: t.Optional[CompensationEmbed]
    settings: TransportSettings

    @property
    def d(self) -> int:
        return self.fan.d_out

    def features(self, graph: MultimodalGraph) -> np.ndarray:
        """
        X_M for every node of the graph
        """
        return fan_forward(self.fan, fused_features(graph, self.gnn, self.settings))


def build_backbone(config: ProtocolConfig, base: MultimodalGraph) -> Backbone:
    settings = transport_settings(config)
    labels = base.labels - base.labels.min()
    num_classes = config.classes_per_phase
    base = MultimodalGraph(base.num_nodes, base.edges, base.features_vis, base.features_txt, labels)

    gnn = init_gnn_params(
        config.d_v, config.d_t, num_classes, config.gnn_hidden, config.gnn_layers, config.seed
    )
    gnn = train_base(
        base,
        gnn,
        epochs=config.gnn_epochs,
        lr=config.gnn_lr,
        seed=config.seed,
        momentum=config.gnn_momentum,
        settings=settings,
        align_weight=config.align_weight,
        plan_refresh=config.plan_refresh,
    )
    fused = fused_features(base, gnn, settings)

    fan = init_fan_stack(
        fused.shape[1],
        num_classes,
        width=config.fan_width,
        layers=config.fan_layers,
        p_ratio=config.p_ratio,
        activation=config.fan_activation,
        seed=config.seed + 1,
    )
    optimizer = AdamW(lr=config.fan_lr, weight_decay=config.fan_weight_decay)
    fan = train_fan(fan, fused, labels, config.fan_epochs, optimizer, config.seed)

    embed = None
    if config.compensation:
        embed = init_compensation_embed(
            fan.d_out,
            config.comp_width,
            config.comp_channels,
            config.comp_kernel,
            config.comp_activation,
            seed=config.seed + 2,
        )
        embed = train_compensation_embed(
            embed,
            fan_forward(fan, fused),
            labels,
            num_classes,
            config.comp_epochs,
            AdamW(lr=config.comp_lr, weight_decay=0.0),
            seed=config.seed,
        )
    logger.info("backbone frozen: %d features per node", fan.d_out)
    return Backbone(gnn=gnn, fan=fan, embed=embed, settings=settings)


def _accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(scores, axis=1) == labels))


class _TestFeatures:
    def __init__(self, phases: PhaseStream, backbone: Backbone):
        self.phases = phases
        self.backbone = backbone
        self.cache: t.Dict[int, t.Tuple[np.ndarray, np.ndarray]] = {}

    def __getitem__(self, phase: int) -> t.Tuple[np.ndarray, np.ndarray]:
        if phase not in self.cache:
            graph = self.phases.test(phase)
            self.cache[phase] = (self.backbone.features(graph), graph.labels)
        return self.cache[phase]


@dataclass
class RunResult:
    accuracy: AccuracyMatrix
    report: MetricsReport
    class_counts: t.List[int]
    mainstream_accuracy: t.Optional[AccuracyMatrix] = None
    mainstream: t.Optional[AnalyticState] = None
    compensation: t.Optional[CompensationState] = None
    residual_targets: t.List[ResidualTarget] = field(default_factory=list)
    access_log: t.List[AccessRecord] = field(default_factory=list)


def run_mcigle(
    config: ProtocolConfig,
    stream: t.Optional[Stream] = None,
    backbone: t.Optional[Backbone] = None,
) -> RunResult:
    stream = stream or generate_stream(config)
    phases = PhaseStream(stream)
    if backbone is None:
        try:
            backbone = build_backbone(config, phases.take_train(0, 0, "backbone"))
        except NumericalError as err:
            raise err.at_phase(0)

    state = init_state(backbone.d, config.gamma, config.beta, config.update_mode)
    compensation = None
    if config.compensation and backbone.embed is not None:
        compensation = init_compensation(
            backbone.embed, config.compensation_gamma, config.beta, config.lambda2, config.update_mode
        )
    tests = _TestFeatures(phases, backbone)
    rows, mainstream_rows, targets = [], [], []

    for k in range(phases.num_phases):
        split = phases.split(k)
        try:
            graph = phases.take_train(k, k, "update")
            X = backbone.features(graph)
            Y = one_hot(graph.labels, split.class_count, offset=split.class_offset)
            state = phase_update(expand_labels(state, split.class_count), X, Y)
            if compensation is not None:
                compensation = expand_compensation(compensation, split.class_count)
                target = residual_matrix(state, X, Y)
                targets.append(target)
                compensation = compensation_update(
                    compensation, compensation_embed(compensation.embed, X), target
                )
            phases.release(k)
        except NumericalError as err:
            raise err.at_phase(k)

        row, mainstream_row = [], []
        for j in range(k + 1):
            X_test, labels = tests[j]
            mainstream_row.append(_accuracy(predict_mainstream(state, X_test), labels))
            if compensation is None:
                row.append(mainstream_row[-1])
            else:
                row.append(_accuracy(predict_combined(state, compensation, X_test), labels))
        rows.append(row)
        mainstream_rows.append(mainstream_row)
        logger.info("phase %d: %d classes seen, accuracy %s", k, state.seen_class_count, row)

    class_counts = [split.class_count for split in stream.phases]
    accuracy = AccuracyMatrix(rows)
    return RunResult(
        accuracy=accuracy,
        report=compute_metrics(accuracy, class_counts),
        class_counts=class_counts,
        mainstream_accuracy=AccuracyMatrix(mainstream_rows),
        mainstream=state,
        compensation=compensation,
        residual_targets=targets,
        access_log=phases.access_log,
    )


def run_baseline_naive(
    config: ProtocolConfig,
    stream: t.Optional[Stream] = None,
    backbone: t.Optional[Backbone] = None,
) -> RunResult:
    """
    Softmax head re-fit by gradient descent on the current phase only
    """
    stream = stream or generate_stream(config)
    phases = PhaseStream(stream)
    if backbone is None:
        backbone = build_backbone(config, phases.take_train(0, 0, "backbone"))

    W = np.zeros((backbone.d, 0))
    b = np.zeros(0)
    tests = _TestFeatures(phases, backbone)
    rows = []
    for k in range(phases.num_phases):
        split = phases.split(k)
        graph = phases.take_train(k, k, "update")
        X = backbone.features(graph)
        W = np.hstack([W, np.zeros((backbone.d, split.class_count))])
        b = np.concatenate([b, np.zeros(split.class_count)])
        Y = one_hot(graph.labels, W.shape[1])
        for epoch in range(config.naive_epochs):
            probs = softmax(X @ W + b, axis=1)
            if not np.all(np.isfinite(probs)):
                raise TrainingError(f"naive head diverged at epoch {epoch}", phase=k)
            d_logits = (probs - Y) / len(X)
            W -= config.naive_lr * X.T @ d_logits
            b -= config.naive_lr * d_logits.sum(axis=0)
        phases.release(k)

        row = []
        for j in range(k + 1):
            X_test, labels = tests[j]
            row.append(_accuracy(X_test @ W + b, labels))
        rows.append(row)
        logger.info("naive phase %d: accuracy %s", k, row)

    class_counts = [split.class_count for split in stream.phases]
    accuracy = AccuracyMatrix(rows)
    return RunResult(
        accuracy=accuracy,
        report=compute_metrics(accuracy, class_counts),
        class_counts=class_counts,
        access_log=phases.access_log,
    )


def run_joint_upper(
    config: ProtocolConfig,
    stream: t.Optional[Stream] = None,
    backbone: t.Optional[Backbone] = None,
    num_phases: t.Optional[int] = None,
    train_phases: t.Optional[int] = None,
) -> float:
    """
    Ridge classifier on the first train_phases phases' data at once (all
    evaluated phases by default), averaged over the accuracies on the test
    splits of the first num_phases phases
    """
    stream = stream or generate_stream(config)
    if backbone is None:
        backbone = build_backbone(config, stream.phases[0].train)
    splits = stream.phases[: num_phases or len(stream.phases)]
    seen = splits[: train_phases or len(splits)]
    width = sum(split.class_count for split in seen)

    X = np.vstack([backbone.features(split.train) for split in seen])
    labels = np.concatenate([split.train.labels for split in seen])
    W = ridge_solve(X, one_hot(labels, width), config.gamma)

    accuracies = []
    for split in splits:
        X_test = backbone.features(split.test)
        accuracies.append(_accuracy(X_test @ W, split.test.labels))
    return float(np.mean(accuracies))


@dataclass
class ExperimentResult:
    mcigle: RunResult
    naive: RunResult
    joint_acc: float

    def summary(self) -> t.Dict[str, float]:
        values = dict(self.mcigle.report.scalars())
        values.update({f"naive_{k}": v for k, v in self.naive.report.scalars().items()})
        values["joint_acc"] = self.joint_acc
        return values


def run_experiment(config: ProtocolConfig, stream: t.Optional[Stream] = None) -> ExperimentResult:
    stream = stream or generate_stream(config)
    backbone = build_backbone(config, stream.phases[0].train)
    return ExperimentResult(
        mcigle=run_mcigle(config, stream, backbone),
        naive=run_baseline_naive(config, stream, backbone),
        joint_acc=run_joint_upper(config, stream, backbone),
    )
