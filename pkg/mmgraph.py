"""
Multimodal node graphs, correlation-weighted message passing, transport
fusion of the two modalities and the tanh-softmax node classifier.

Gradients are written out by hand. The transport plan is a constant inside
every backward pass; the visual-to-textual projection that shapes the
transport cost learns through the alignment term of the training loss.
"""
import logging
import typing as t
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from lib import (
    InputError,
    ProtocolError,
    TrainingError,
    as_matrix,
    check_width,
    get_rng,
    one_hot,
)
from transport import (
    TransportPlan,
    TransportSettings,
    apply_plan,
    concat_fuse,
    cosine_cost,
    structure_matrix,
    unit_rows,
)

logger = logging.getLogger(__name__)

GRAPH_HEADER = "# mcigle-graph v1"
MODALITIES = ("v", "t")


@dataclass
class MultimodalGraph:
    num_nodes: int
    edges: np.ndarray
    features_vis: np.ndarray
    features_txt: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = int(self.num_nodes)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise InputError("edge index out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise InputError("self-loops are not allowed in the edge list")
        edges = np.unique(np.sort(edges, axis=1), axis=0)

        self.num_nodes = n
        self.edges = edges
        self.features_vis = as_matrix(self.features_vis, "features_vis")
        self.features_txt = as_matrix(self.features_txt, "features_txt")
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        for name, rows in (
            ("features_vis", self.features_vis.shape[0]),
            ("features_txt", self.features_txt.shape[0]),
            ("labels", len(self.labels)),
        ):
            if rows != n:
                raise InputError(f"{name} has {rows} rows for {n} nodes")

    @property
    def d_v(self) -> int:
        return self.features_vis.shape[1]

    @property
    def d_t(self) -> int:
        return self.features_txt.shape[1]

    def features(self, modality: str) -> np.ndarray:
        if modality not in MODALITIES:
            raise InputError(f"unknown modality {modality!r}")
        return self.features_vis if modality == "v" else self.features_txt

    def neighborhood_mask(self) -> np.ndarray:
        """
        Boolean adjacency with every node in its own neighborhood
        """
        mask = np.eye(self.num_nodes, dtype=bool)
        mask[self.edges[:, 0], self.edges[:, 1]] = True
        mask[self.edges[:, 1], self.edges[:, 0]] = True
        return mask

    def neighbors(self, node: int) -> t.List[int]:
        return [int(v) for v in np.flatnonzero(self.neighborhood_mask()[node])]

    def subgraph(self, nodes) -> "MultimodalGraph":
        nodes = np.asarray(nodes, dtype=np.int64)
        index = -np.ones(self.num_nodes, dtype=np.int64)
        index[nodes] = np.arange(len(nodes))
        kept = self.edges[(index[self.edges[:, 0]] >= 0) & (index[self.edges[:, 1]] >= 0)]
        return MultimodalGraph(
            num_nodes=len(nodes),
            edges=index[kept],
            features_vis=self.features_vis[nodes],
            features_txt=self.features_txt[nodes],
            labels=self.labels[nodes],
        )

    def save(self, filename: str):
        with open(filename, "w") as f:
            f.write(GRAPH_HEADER + "\n")
            f.write(f"{self.num_nodes} {self.d_v} {self.d_t} {len(self.edges)}\n")
            for i, j in self.edges:
                f.write(f"{i} {j}\n")
            for row in self.features_vis:
                f.write(" ".join(repr(float(x)) for x in row) + "\n")
            for row in self.features_txt:
                f.write(" ".join(repr(float(x)) for x in row) + "\n")
            f.write(" ".join(str(int(label)) for label in self.labels) + "\n")

    @classmethod
    def load(cls, filename: str) -> "MultimodalGraph":
        with open(filename) as f:
            lines = [line.split() for line in f if line.strip() and not line.startswith("#")]
        try:
            n, d_v, d_t, num_edges = map(int, lines[0])
            body = lines[1:]
            edges = [tuple(map(int, line)) for line in body[:num_edges]]
            body = body[num_edges:]
            vis = [list(map(float, line)) for line in body[:n]]
            txt = [list(map(float, line)) for line in body[n : 2 * n]]
            labels = list(map(int, body[2 * n])) if n else []
        except (IndexError, ValueError) as err:
            raise InputError(f"malformed graph file {filename}") from err
        return cls(
            num_nodes=n,
            edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
            features_vis=np.array(vis, dtype=np.float64).reshape(n, d_v),
            features_txt=np.array(txt, dtype=np.float64).reshape(n, d_t),
            labels=np.array(labels, dtype=np.int64),
        )


@dataclass
class GnnParams:
    weights_vis: t.List[np.ndarray]
    weights_txt: t.List[np.ndarray]
    projection: np.ndarray
    head_weight: np.ndarray
    head_bias: np.ndarray
    frozen: bool = False
    loss_history: t.List[float] = field(default_factory=list)

    def __post_init__(self):
        for weights in (self.weights_vis, self.weights_txt):
            if not weights:
                raise InputError("at least one message passing layer is required")
            for previous, current in zip(weights, weights[1:]):
                if previous.shape[1] != current.shape[0]:
                    raise InputError("layer dimensions do not chain")
        h_v = self.weights_vis[-1].shape[1]
        h_t = self.weights_txt[-1].shape[1]
        if self.projection.shape != (h_v, h_t):
            raise InputError(f"projection must be {h_v}x{h_t}")
        if self.head_weight.shape[0] != h_v + h_t:
            raise InputError(f"classifier expects fused width {h_v + h_t}")
        if self.head_bias.shape != (self.head_weight.shape[1],):
            raise InputError("classifier bias does not match the class count")

    @property
    def num_layers(self) -> int:
        return len(self.weights_vis)

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[1]

    @property
    def fused_width(self) -> int:
        return self.head_weight.shape[0]

    def weights(self, modality: str) -> t.List[np.ndarray]:
        return self.weights_vis if modality == "v" else self.weights_txt

    def arrays(self) -> t.List[np.ndarray]:
        return [
            *self.weights_vis,
            *self.weights_txt,
            self.projection,
            self.head_weight,
            self.head_bias,
        ]

    def copy(self) -> "GnnParams":
        return GnnParams(
            weights_vis=[w.copy() for w in self.weights_vis],
            weights_txt=[w.copy() for w in self.weights_txt],
            projection=self.projection.copy(),
            head_weight=self.head_weight.copy(),
            head_bias=self.head_bias.copy(),
            loss_history=list(self.loss_history),
        )

    def freeze(self) -> "GnnParams":
        for array in self.arrays():
            array.flags.writeable = False
        self.frozen = True
        return self


def init_gnn_params(
    d_v: int, d_t: int, num_classes: int, hidden: int = 32, layers: int = 2, seed: int = 0
) -> GnnParams:
    rng = get_rng(seed)

    def stack(d_in: int) -> t.List[np.ndarray]:
        widths = [d_in] + [hidden] * layers
        return [
            rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(widths, widths[1:])
        ]

    weights_vis = stack(d_v)
    weights_txt = stack(d_t)
    return GnnParams(
        weights_vis=weights_vis,
        weights_txt=weights_txt,
        projection=rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, hidden)),
        head_weight=rng.normal(0.0, 1.0 / np.sqrt(2 * hidden), size=(2 * hidden, num_classes)),
        head_bias=np.zeros(num_classes),
    )


def correlation_weights(h_prev, node: int, neighbors: t.Sequence[int]) -> np.ndarray:
    """
    Softmax over the neighbors of the cosine similarity to the center node
    """
    if len(neighbors) == 0:
        raise InputError("correlation weights need at least one neighbor")
    h_prev = as_matrix(h_prev, "h_prev")
    unit, _ = unit_rows(h_prev[[node, *neighbors]])
    return softmax(unit[1:] @ unit[0])


def _correlation_matrix(H: np.ndarray, mask: np.ndarray):
    unit, norms = unit_rows(H)
    similarity = unit @ unit.T
    return softmax(np.where(mask, similarity, -np.inf), axis=1), unit, norms


def _layer_forward(H, W, mask):
    E, unit, norms = _correlation_matrix(H, mask)
    aggregated = E @ H
    pre = aggregated @ W
    return np.maximum(pre, 0.0), (H, unit, norms, E, aggregated, pre)


def _normalize_backward(d_unit, unit, norms):
    radial = np.sum(d_unit * unit, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)[:, None]
    return np.where(norms[:, None] > 0, (d_unit - unit * radial) / safe, 0.0)


def _layer_backward(d_out, W, cache):
    H, unit, norms, E, aggregated, pre = cache
    d_pre = d_out * (pre > 0)
    d_W = aggregated.T @ d_pre
    d_aggregated = d_pre @ W.T
    d_H = E.T @ d_aggregated
    d_E = d_aggregated @ H.T
    d_similarity = E * (d_E - np.sum(d_E * E, axis=1, keepdims=True))
    d_unit = (d_similarity + d_similarity.T) @ unit
    return d_H + _normalize_backward(d_unit, unit, norms), d_W


def _gnn_forward_cached(graph: MultimodalGraph, params: GnnParams, modality: str):
    H = graph.features(modality)
    weights = params.weights(modality)
    check_width(H, weights[0].shape[0], f"modality {modality}")
    mask = graph.neighborhood_mask()
    caches = []
    for W in weights:
        H, cache = _layer_forward(H, W, mask)
        caches.append(cache)
    return H, caches


def gnn_forward(graph: MultimodalGraph, params: GnnParams, modality: str) -> np.ndarray:
    return _gnn_forward_cached(graph, params, modality)[0]


def _fuse(graph, params, settings, plan):
    H_v, caches_v = _gnn_forward_cached(graph, params, "v")
    H_t, caches_t = _gnn_forward_cached(graph, params, "t")
    if plan is None:
        cost = cosine_cost(H_v @ params.projection, H_t)
        problem = settings.problem(cost, structure_matrix(H_v), structure_matrix(H_t))
        plan = settings.solve(problem)
    fused = concat_fuse(apply_plan(plan, H_v), H_t)
    return fused, plan, (H_v, caches_v, H_t, caches_t)


def fused_features(
    graph: MultimodalGraph,
    params: GnnParams,
    settings: t.Optional[TransportSettings] = None,
    plan: t.Optional[TransportPlan] = None,
) -> np.ndarray:
    """
    h'_u: transported visual embedding concatenated with the textual one
    """
    return _fuse(graph, params, settings or TransportSettings(), plan)[0]


def fuse_and_classify(
    graph: MultimodalGraph,
    params: GnnParams,
    settings: t.Optional[TransportSettings] = None,
    plan: t.Optional[TransportPlan] = None,
) -> np.ndarray:
    fused = fused_features(graph, params, settings, plan)
    return softmax(np.tanh(fused @ params.head_weight + params.head_bias), axis=1)


def loss_and_grads(
    graph: MultimodalGraph,
    params: GnnParams,
    plan: t.Optional[TransportPlan] = None,
    settings: t.Optional[TransportSettings] = None,
    align_weight: float = 0.1,
    nodes: t.Optional[np.ndarray] = None,
):
    """
    Cross-entropy of the node classifier plus the plan-weighted alignment cost.

    Returns (loss, grads, plan) with grads ordered like params.arrays().
    """
    settings = settings or TransportSettings()
    fused, plan, (H_v, caches_v, H_t, caches_t) = _fuse(graph, params, settings, plan)
    P = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan)
    nodes = np.arange(graph.num_nodes) if nodes is None else np.asarray(nodes)
    targets = one_hot(graph.labels[nodes], params.num_classes)

    squashed = np.tanh(fused[nodes] @ params.head_weight + params.head_bias)
    probs = softmax(squashed, axis=1)
    cross_entropy = -np.mean(np.log(np.sum(probs * targets, axis=1)))

    A = H_v @ params.projection
    A_unit, A_norms = unit_rows(A)
    T_unit, T_norms = unit_rows(H_t)
    align = align_weight * settings.lambda1
    cost = np.clip(1.0 - A_unit @ T_unit.T, 0.0, 2.0)
    loss = cross_entropy + align * float(np.sum(P * cost))

    d_squashed = (probs - targets) / len(nodes)
    d_logits = d_squashed * (1.0 - squashed**2)
    d_head_weight = fused[nodes].T @ d_logits
    d_head_bias = d_logits.sum(axis=0)
    d_fused = np.zeros_like(fused)
    d_fused[nodes] = d_logits @ params.head_weight.T

    h_v = H_v.shape[1]
    mass = P.sum(axis=0)
    d_H_v = P @ (d_fused[:, :h_v] / mass[:, None])
    d_H_t = d_fused[:, h_v:].copy()

    G = align * P
    d_A = _normalize_backward(-G @ T_unit, A_unit, A_norms)
    d_H_t += _normalize_backward(-G.T @ A_unit, T_unit, T_norms)
    d_projection = H_v.T @ d_A
    d_H_v += d_A @ params.projection.T

    grads_per_modality = {}
    for modality, d_H, caches in (("v", d_H_v, caches_v), ("t", d_H_t, caches_t)):
        weights = params.weights(modality)
        d_weights = [None] * len(weights)
        for index in reversed(range(len(weights))):
            d_H, d_weights[index] = _layer_backward(d_H, weights[index], caches[index])
        grads_per_modality[modality] = d_weights

    grads = [
        *grads_per_modality["v"],
        *grads_per_modality["t"],
        d_projection,
        d_head_weight,
        d_head_bias,
    ]
    return loss, grads, plan


def train_base(
    graph: MultimodalGraph,
    params: GnnParams,
    epochs: int = 100,
    lr: float = 0.05,
    seed: int = 0,
    momentum: float = 0.9,
    batch_size: t.Optional[int] = None,
    settings: t.Optional[TransportSettings] = None,
    align_weight: float = 0.1,
    plan_refresh: int = 10,
) -> GnnParams:
    """
    Gradient descent with momentum on the base graph, returns a frozen copy
    """
    if params.frozen:
        raise ProtocolError("GNN parameters are frozen")
    settings = settings or TransportSettings()
    rng = get_rng(seed)
    trained = params.copy()
    arrays = trained.arrays()
    velocity = [np.zeros_like(array) for array in arrays]
    plan = None

    for epoch in range(epochs):
        if plan_refresh > 0 and epoch % plan_refresh == 0:
            plan = None
        nodes = None
        if batch_size is not None and batch_size < graph.num_nodes:
            nodes = rng.choice(graph.num_nodes, size=batch_size, replace=False)
        loss, grads, plan = loss_and_grads(graph, trained, plan, settings, align_weight, nodes)
        if not np.isfinite(loss):
            raise TrainingError(
                f"GNN loss became {loss} at epoch {epoch} "
                f"after {len(trained.loss_history)} finite epochs"
            )
        trained.loss_history.append(float(loss))
        for array, grad, v in zip(arrays, grads, velocity):
            v *= momentum
            v += grad
            array -= lr * v
        if epoch % 20 == 0:
            logger.debug("GNN epoch %d: loss %.6f", epoch, loss)

    logger.info("GNN base training finished after %d epochs", epochs)
    return trained.freeze()


def predict_labels(graph, params, settings=None) -> np.ndarray:
    return np.argmax(fuse_and_classify(graph, params, settings), axis=1)
