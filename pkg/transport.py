"""
Entropic fused optimal transport between the visual and textual node sets.

The objective of a coupling P is

    lambda1 <P, C> + (1 - lambda1) sum_ijkl (Dv_ik - Dt_jl)^2 P_ij P_kl
        + epsilon sum_ij P_ij (log P_ij - 1)

with the square-loss structure term expanded by POT around the prescribed
marginals. The outer loop linearizes that term at the current plan, solves
the resulting entropic problem with POT's log-domain Sinkhorn and moves along
the segment towards that solution with an exact line search, so the objective
never goes up between outer iterations. A final scaling pass puts the plan
back on its marginals; only a plan that meets them is reported converged.
"""
import logging
import typing as t
from dataclasses import dataclass, field

import numpy as np
import ot
from ot.gromov import gwggrad, gwloss, init_matrix
from scipy.optimize import minimize_scalar
from scipy.spatial.distance import pdist, squareform
from scipy.special import xlogy

from lib import InputError, as_matrix, as_vector

logger = logging.getLogger(__name__)

MARGINAL_TOL = 1e-12

StructureTerms = t.Tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass(frozen=True)
class OtProblem:
    cost: np.ndarray
    structure_vis: np.ndarray
    structure_txt: np.ndarray
    lambda1: float = 0.5
    epsilon: float = 0.05
    marginal_src: t.Optional[np.ndarray] = None
    marginal_tgt: t.Optional[np.ndarray] = None

    def __post_init__(self):
        cost = np.asarray(self.cost, dtype=np.float64)
        if cost.ndim != 2:
            raise InputError(f"cost must be 2-d, got shape {cost.shape}")
        if not np.all(np.isfinite(cost)):
            raise InputError("cost has non-finite entries")
        if np.any(cost < 0):
            raise InputError("cost entries must be non-negative")
        n, m = cost.shape

        vis = as_matrix(self.structure_vis, "structure_vis")
        txt = as_matrix(self.structure_txt, "structure_txt")
        for name, structure, size in (("structure_vis", vis, n), ("structure_txt", txt, m)):
            if structure.shape != (size, size):
                raise InputError(f"{name} must be {size}x{size}, got {structure.shape}")
            if not np.allclose(structure, structure.T, rtol=0.0, atol=1e-12):
                raise InputError(f"{name} must be symmetric")
            if np.any(np.diag(structure) != 0.0):
                raise InputError(f"{name} must have a zero diagonal")

        if not 0.0 <= self.lambda1 <= 1.0:
            raise InputError(f"lambda1 must lie in [0, 1], got {self.lambda1}")
        if not self.epsilon > 0.0:
            raise InputError(f"epsilon must be positive, got {self.epsilon}")

        src = ot.unif(n) if self.marginal_src is None else as_vector(self.marginal_src, "marginal_src")
        tgt = ot.unif(m) if self.marginal_tgt is None else as_vector(self.marginal_tgt, "marginal_tgt")
        for name, marginal, size in (("marginal_src", src, n), ("marginal_tgt", tgt, m)):
            if marginal.shape != (size,):
                raise InputError(f"{name} must have length {size}")
            if np.any(marginal < 0) or abs(marginal.sum() - 1.0) > MARGINAL_TOL:
                raise InputError(f"{name} must be a probability vector")

        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "structure_vis", vis)
        object.__setattr__(self, "structure_txt", txt)
        object.__setattr__(self, "marginal_src", src)
        object.__setattr__(self, "marginal_tgt", tgt)

    @property
    def shape(self) -> t.Tuple[int, int]:
        return self.cost.shape


@dataclass
class TransportPlan:
    plan: np.ndarray
    objective: float
    iterations: int
    converged: bool
    history: t.List[float] = field(default_factory=list)


@dataclass(frozen=True)
class TransportSettings:
    lambda1: float = 0.5
    epsilon: float = 0.05
    max_outer: int = 20
    max_sinkhorn: int = 500
    tol: float = 1e-6

    def problem(self, cost, structure_vis, structure_txt) -> OtProblem:
        return OtProblem(
            cost=cost,
            structure_vis=structure_vis,
            structure_txt=structure_txt,
            lambda1=self.lambda1,
            epsilon=self.epsilon,
        )

    def solve(self, problem: OtProblem) -> "TransportPlan":
        return fused_ot_solve(problem, self.max_outer, self.max_sinkhorn, self.tol)


def structure_matrix(features) -> np.ndarray:
    """
    Pairwise Euclidean distances within one modality, scaled to max 1
    """
    features = as_matrix(features, "features")
    if features.shape[0] < 2:
        return np.zeros((features.shape[0], features.shape[0]))
    distances = squareform(pdist(features, "euclidean"))
    top = distances.max()
    return distances / top if top > 0 else distances


def unit_rows(A: np.ndarray) -> t.Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(A, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return A / safe[:, None], norms


def cosine_cost(A, B) -> np.ndarray:
    """
    1 - cosine similarity between the rows of A and B; zero rows have similarity 0
    """
    A_hat, _ = unit_rows(as_matrix(A, "A"))
    B_hat, _ = unit_rows(as_matrix(B, "B"))
    return np.clip(1.0 - A_hat @ B_hat.T, 0.0, 2.0)


def structure_terms(problem: OtProblem) -> StructureTerms:
    return init_matrix(
        problem.structure_vis,
        problem.structure_txt,
        problem.marginal_src,
        problem.marginal_tgt,
        "square_loss",
    )


def transport_cost(
    problem: OtProblem, P: np.ndarray, terms: t.Optional[StructureTerms] = None
) -> float:
    """
    Fused cost of a coupling without the entropy term
    """
    value = problem.lambda1 * float(np.sum(P * problem.cost))
    if problem.lambda1 < 1.0:
        terms = structure_terms(problem) if terms is None else terms
        value += (1.0 - problem.lambda1) * float(gwloss(*terms, P))
    return value


def fused_objective(
    problem: OtProblem, P: np.ndarray, terms: t.Optional[StructureTerms] = None
) -> float:
    return transport_cost(problem, P, terms) + problem.epsilon * float(np.sum(xlogy(P, P) - P))


def marginal_error(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float(max(np.abs(P.sum(axis=1) - a).max(), np.abs(P.sum(axis=0) - b).max()))


def sinkhorn_log(
    cost: np.ndarray, a: np.ndarray, b: np.ndarray, epsilon: float, max_iter: int, tol: float
):
    """
    Entropic plan for a linear cost. Rows match a exactly, the plan counts as
    converged once both marginals are within tol.
    """
    P, log = ot.sinkhorn(
        a,
        b,
        cost,
        epsilon,
        method="sinkhorn_log",
        numItermax=max_iter,
        stopThr=tol,
        log=True,
        warn=False,
    )
    return P, int(log["niter"]) + 1, marginal_error(P, a, b) < tol


def project_marginals(
    P: np.ndarray, a: np.ndarray, b: np.ndarray, max_iter: int, tol: float
) -> np.ndarray:
    """
    Diagonal rescaling of P onto the marginals (a, b), i.e. Sinkhorn with P as
    its kernel. Zero entries stay zero.
    """
    with np.errstate(divide="ignore"):
        kernel_cost = -np.log(P)
    return sinkhorn_log(kernel_cost, a, b, 1.0, max_iter, tol)[0]


def _line_search(problem: OtProblem, P: np.ndarray, candidate: np.ndarray, terms):
    direction = candidate - P

    def along(step: float) -> float:
        return fused_objective(problem, P + step * direction, terms)

    inner = minimize_scalar(along, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-10})
    steps = (0.0, float(inner.x), 1.0)
    values = [along(step) for step in steps]
    best = min(range(3), key=lambda i: (values[i], -steps[i]))
    return steps[best], values[best]


def fused_ot_solve(
    problem: OtProblem,
    max_outer: int = 20,
    max_sinkhorn: int = 500,
    tol: float = 1e-6,
) -> TransportPlan:
    if tol <= 0:
        raise InputError("tol must be positive")
    a, b = problem.marginal_src, problem.marginal_tgt
    terms = structure_terms(problem) if problem.lambda1 < 1.0 else None
    P = np.outer(a, b)
    objective = fused_objective(problem, P, terms)
    history = [objective]
    stalled = False
    outer = 0

    for outer in range(1, max_outer + 1):
        linear = problem.lambda1 * problem.cost
        if terms is not None:
            linear = linear + (1.0 - problem.lambda1) * gwggrad(*terms, P)
        candidate, sweeps, _ = sinkhorn_log(linear, a, b, problem.epsilon, max_sinkhorn, tol)
        step, value = _line_search(problem, P, candidate, terms)
        if step > 0.0:
            P = P + step * (candidate - P)
        improvement = objective - value
        objective = value
        history.append(objective)
        logger.debug(
            "outer %d: sinkhorn %d sweeps, step %.4g, objective %.10g", outer, sweeps, step, objective
        )
        if improvement <= tol * max(1.0, abs(objective)):
            stalled = True
            break

    P = project_marginals(P, a, b, max_sinkhorn, tol)
    error = marginal_error(P, a, b)
    converged = stalled and error < tol
    if not converged:
        logger.warning(
            "transport did not converge within %d outer iterations, marginal error %.2e",
            max_outer,
            error,
        )
    return TransportPlan(
        plan=P,
        objective=fused_objective(problem, P, terms),
        iterations=outer,
        converged=converged,
        history=history,
    )


def apply_plan(plan, features_vis) -> np.ndarray:
    """
    Barycentric projection of the source rows onto the target nodes
    """
    P = plan.plan if isinstance(plan, TransportPlan) else as_matrix(plan, "plan")
    features_vis = as_matrix(features_vis, "features_vis")
    if P.shape[0] != features_vis.shape[0]:
        raise InputError(
            f"plan has {P.shape[0]} source rows, features have {features_vis.shape[0]}"
        )
    mass = P.sum(axis=0)
    if np.any(mass <= 0):
        raise InputError("plan has a target node with zero marginal mass")
    return (P.T @ features_vis) / mass[:, None]


def concat_fuse(projected, features_txt) -> np.ndarray:
    projected = as_matrix(projected, "projected")
    features_txt = as_matrix(features_txt, "features_txt")
    if projected.shape[0] != features_txt.shape[0]:
        raise InputError(
            f"projected has {projected.shape[0]} rows, textual features {features_txt.shape[0]}"
        )
    return np.hstack([projected, features_txt])
