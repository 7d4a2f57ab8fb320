#
# Copyright (c) 2024 hvc-tools contributors.
#
# This file is part of hvc-tools-ppdmpc
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU Lesser General Public License as published by
# the Free Software Foundation, version 3 of the License.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU Lesser General Public License for more details.
#
# You should have received a copy of the GNU Lesser General Public License
# along with this program. If not, see <http://www.gnu.org/licenses/>.
#
"""Local solution of the per-controller NLP by sequential quadratic programming.

The SQP engine is SciPy's SLSQP: quasi-Newton (BFGS) Hessian updates, an l1 merit line search
and a least-squares active-set QP subproblem, with the analytic Jacobians of :mod:`.ocp`.
"""
import json
import logging
from dataclasses import dataclass
from typing import IO, NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import Bounds, lsq_linear, minimize

from .models import InvalidArgumentError
from .ocp import CONVERGED, INFEASIBLE_RELAXED, MAX_ITER, NlpInstance, NlpSolution

logger = logging.getLogger(__name__)

__all__ = ["SolverConfig", "KktMultipliers", "solve", "kkt_residual", "estimate_multipliers",
           "constraint_violation", "CONVERGED", "MAX_ITER", "INFEASIBLE_RELAXED"]

_SLSQP_ITERATION_LIMIT = 9
_SLSQP_INCOMPATIBLE = 4


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances of the SQP run.

    A solution counts as converged when its KKT residual is at most ``optimality_tolerance``
    and its constraint violation at most ``feasibility_tolerance``. ``optimality_tolerance`` is
    also SLSQP's stopping accuracy; when SLSQP stops short of the KKT tolerance the run is
    continued with stopping accuracy ``polish_ftol`` for at most ``polish_iterations`` more
    iterations, never exceeding ``max_iterations`` in total.
    ``active_set_tolerance`` decides which inequalities and bounds count as active when
    multipliers are estimated.
    """
    feasibility_tolerance: float = 1e-6
    optimality_tolerance: float = 1e-6
    max_iterations: int = 200
    active_set_tolerance: float = 1e-5
    polish_ftol: float = 1e-14
    polish_iterations: int = 50

    def __post_init__(self):
        if min(self.feasibility_tolerance, self.optimality_tolerance, self.active_set_tolerance,
               self.polish_ftol) <= 0:
            raise InvalidArgumentError("Solver tolerances must be positive")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be at least 1")
        if self.polish_iterations < 0:
            raise InvalidArgumentError("polish_iterations must be nonnegative")


class KktMultipliers(NamedTuple):
    equality: np.ndarray
    inequality: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def constraint_violation(nlp, z) -> float:
    """Largest violation of the equality, inequality and bound constraints at ``z``."""
    z = np.asarray(z, dtype=float)
    return float(max(np.max(np.abs(nlp.equality(z)), initial=0.0),
                     np.max(nlp.inequality(z), initial=0.0),
                     np.max(nlp.lower - z, initial=0.0),
                     np.max(z - nlp.upper, initial=0.0)))


def _bound_gaps(nlp, z):
    lower_gap = np.where(np.isfinite(nlp.lower), z - nlp.lower, np.inf)
    upper_gap = np.where(np.isfinite(nlp.upper), nlp.upper - z, np.inf)
    return lower_gap, upper_gap


def estimate_multipliers(nlp, z, active_tolerance: float = 1e-5) -> KktMultipliers:
    """Least-squares multipliers of the stationarity condition on the active set.

    Equality multipliers are free, inequality and bound multipliers are restricted to be
    nonnegative and vanish off the active set. The unconstrained least-squares solution is used
    when its active multipliers already have the right sign, bounded least squares otherwise.
    """
    z = np.asarray(z, dtype=float)
    gradient = nlp.objective_gradient(z)
    J_eq = nlp.equality_jacobian(z)
    J_in = nlp.inequality_jacobian(z)
    active_in = np.flatnonzero(nlp.inequality(z) >= -active_tolerance)
    lower_gap, upper_gap = _bound_gaps(nlp, z)
    active_lower = np.flatnonzero(lower_gap <= active_tolerance)
    active_upper = np.flatnonzero(upper_gap <= active_tolerance)

    n = z.size
    columns = [J_eq.T, J_in[active_in].T, -np.eye(n)[:, active_lower], np.eye(n)[:, active_upper]]
    A = np.hstack(columns)
    n_eq = J_eq.shape[0]
    lb = np.concatenate([np.full(n_eq, -np.inf), np.zeros(A.shape[1] - n_eq)])
    ub = np.full(A.shape[1], np.inf)
    if A.shape[1]:
        y = np.linalg.lstsq(A, -gradient, rcond=None)[0]
        if np.any(y[n_eq:] < 0.0):
            y = lsq_linear(A, -gradient, bounds=(lb, ub), method="bvls").x
    else:
        y = np.zeros(0)

    inequality = np.zeros(J_in.shape[0])
    lower = np.zeros(n)
    upper = np.zeros(n)
    offset = n_eq
    inequality[active_in] = y[offset:offset + active_in.size]
    offset += active_in.size
    lower[active_lower] = y[offset:offset + active_lower.size]
    offset += active_lower.size
    upper[active_upper] = y[offset:]
    return KktMultipliers(y[:n_eq], inequality, lower, upper)


def kkt_residual(nlp, point, multipliers: KktMultipliers) -> float:
    """Norm of the Lagrangian gradient plus complementarity, primal and dual feasibility violations.

    ``nlp`` may be any object exposing the :class:`~.ocp.NlpInstance` evaluation interface.
    """
    z = np.asarray(point, dtype=float)
    lam, mu, nu_lower, nu_upper = (np.asarray(m, dtype=float) for m in multipliers)
    inequality = nlp.inequality(z)
    equality = nlp.equality(z)
    stationarity = nlp.objective_gradient(z) + nlp.equality_jacobian(z).T @ lam - nu_lower + nu_upper
    if inequality.size:
        stationarity = stationarity + nlp.inequality_jacobian(z).T @ mu
    lower_gap, upper_gap = _bound_gaps(nlp, z)
    complementarity = (np.sum(np.abs(mu * inequality))
                       + np.sum(np.abs(nu_lower[nu_lower != 0] * lower_gap[nu_lower != 0]))
                       + np.sum(np.abs(nu_upper[nu_upper != 0] * upper_gap[nu_upper != 0])))
    feasibility = (np.sum(np.abs(equality)) + np.sum(np.maximum(inequality, 0.0))
                   + np.sum(np.maximum(-lower_gap, 0.0)) + np.sum(np.maximum(-upper_gap, 0.0)))
    dual = np.sum(np.maximum(-mu, 0.0)) + np.sum(np.maximum(-nu_lower, 0.0)) + np.sum(np.maximum(-nu_upper, 0.0))
    return float(np.linalg.norm(stationarity) + complementarity + feasibility + dual)


class _IterateTracker:
    """SLSQP callback keeping the best feasible iterate and optionally logging each iteration."""

    def __init__(self, nlp: NlpInstance, z0: np.ndarray, tolerance: float, stream: Optional[IO[str]]):
        self.nlp = nlp
        self.tolerance = tolerance
        self.stream = stream
        self.previous = z0
        self.iteration = 0
        self.best = None
        self.best_cost = np.inf

    def __call__(self, z):
        z = np.array(z, dtype=float)
        self.iteration += 1
        cost = self.nlp.objective(z)
        violation = constraint_violation(self.nlp, z)
        if violation <= self.tolerance and cost < self.best_cost:
            self.best, self.best_cost = z, cost
        if self.stream is not None:
            record = {"tag": self.nlp.tag, "iteration": self.iteration, "cost": cost,
                      "step_norm": float(np.linalg.norm(z - self.previous)), "violation": violation}
            self.stream.write(json.dumps(record) + "\n")
        self.previous = z


def _slsqp(nlp: NlpInstance, z0: np.ndarray, tracker: _IterateTracker, max_iterations: int, ftol: float):
    constraints = [{"type": "eq", "fun": nlp.equality, "jac": nlp.equality_jacobian}]
    if nlp.n_inequality:
        constraints.append({"type": "ineq", "fun": lambda z: -nlp.inequality(z),
                            "jac": lambda z: -nlp.inequality_jacobian(z)})
    with np.errstate(invalid="ignore", over="ignore"):
        return minimize(nlp.objective, z0, jac=nlp.objective_gradient, method="SLSQP",
                        bounds=Bounds(nlp.lower, nlp.upper), constraints=constraints, callback=tracker,
                        options={"maxiter": max_iterations, "ftol": ftol})


def _best_feasible(nlp: NlpInstance, candidates, tolerance: float):
    """Lowest-cost candidate within ``tolerance`` of feasibility, ``None`` if there is none."""
    feasible = [(nlp.objective(z), z) for z in candidates
                if z is not None and np.all(np.isfinite(z)) and constraint_violation(nlp, z) <= tolerance]
    return min(feasible, key=lambda pair: pair[0])[1] if feasible else None


def _certify(nlp: NlpInstance, z: np.ndarray, cfg: SolverConfig):
    multipliers = estimate_multipliers(nlp, z, cfg.active_set_tolerance)
    return multipliers, kkt_residual(nlp, z, multipliers)


def _solution(nlp: NlpInstance, z: np.ndarray, status: str, iterations: int, multipliers, kkt: float,
              message: str) -> NlpSolution:
    finite = bool(np.all(np.isfinite(z)))
    violation = constraint_violation(nlp, z) if finite else np.inf
    logger.debug("Controller %s: %s after %d iterations (%s), violation %.2e, kkt %.2e", nlp.tag, status,
                  iterations, message, violation, kkt)
    X, U, S = nlp.unpack(z)
    return NlpSolution(tag=nlp.tag, states=X.copy(), controls=U.copy(), slacks=np.maximum(S, 0.0),
                       cost=nlp.objective(z) if finite else float("inf"), status=status, iterations=int(iterations),
                       max_violation=float(violation), kkt=float(kkt), multipliers=multipliers, message=message)


def solve(nlp: NlpInstance, warm: Optional[Sequence] = None, cfg: Optional[SolverConfig] = None,
          iteration_log: Optional[IO[str]] = None) -> NlpSolution:
    """Solve an NLP instance to local optimality.

    The returned point is the feasible candidate with the lowest objective among the final SQP
    iterate, the best feasible iterate visited and the warm start, so the result never costs more
    than a feasible warm start. A starting point that already satisfies the KKT conditions is
    returned without iterating. The status is ``converged`` only if the KKT residual of the
    returned point is within ``cfg.optimality_tolerance``; when SLSQP stops short of that, the
    run continues with a tighter stopping accuracy and reports ``max-iter`` if the residual is
    still too large once the iteration budget is spent.

    .. code-block:: python
        :linenos:

        nlp = assemble_nlp("nc", x0, prediction, config)
        solution = solve(nlp, warm=(X_guess, U_guess))
        if solution.succeeded:
            u = solution.first_control

    :param nlp: the problem
    :type nlp: NlpInstance
    :param warm: optional ``(X, U)`` or ``(X, U, S)`` warm start; slacks are recomputed
    :param cfg: solver tolerances, defaults to :class:`SolverConfig`
    :param iteration_log: text stream receiving one JSON record per SQP iteration
    :return: solution with status ``converged``, ``max-iter`` or ``infeasible-relaxed``
    :rtype: NlpSolution
    """
    cfg = cfg if cfg is not None else SolverConfig()
    z0 = nlp.initial_guess(*warm[:2]) if warm is not None else nlp.initial_guess()
    if constraint_violation(nlp, z0) <= cfg.feasibility_tolerance:
        multipliers, kkt = _certify(nlp, z0, cfg)
        if kkt <= cfg.optimality_tolerance:
            return _solution(nlp, z0, CONVERGED, 0, multipliers, kkt, "Starting point satisfies the KKT conditions")

    tracker = _IterateTracker(nlp, z0, cfg.feasibility_tolerance, iteration_log)
    result = _slsqp(nlp, z0, tracker, cfg.max_iterations, cfg.optimality_tolerance)
    iterations = int(result.nit)
    message = str(result.message)
    z = _best_feasible(nlp, [np.asarray(result.x, dtype=float), tracker.best, z0], cfg.feasibility_tolerance)

    if z is None:
        return _solution(nlp, np.asarray(result.x, dtype=float), INFEASIBLE_RELAXED, iterations, None,
                         float("nan"), message)
    if result.status == _SLSQP_INCOMPATIBLE:
        status = INFEASIBLE_RELAXED
    elif result.status == _SLSQP_ITERATION_LIMIT:
        status = MAX_ITER
    else:
        status = CONVERGED

    multipliers, kkt = _certify(nlp, z, cfg)
    remaining = min(cfg.polish_iterations, cfg.max_iterations - iterations)
    if status == CONVERGED and kkt > cfg.optimality_tolerance and remaining > 0:
        polished = _slsqp(nlp, z, tracker, remaining, cfg.polish_ftol)
        iterations += int(polished.nit)
        message = str(polished.message)
        best = _best_feasible(nlp, [np.asarray(polished.x, dtype=float), tracker.best, z], cfg.feasibility_tolerance)
        if best is not z:
            z = best
            multipliers, kkt = _certify(nlp, z, cfg)
    if status == CONVERGED and (kkt > cfg.optimality_tolerance
                                or constraint_violation(nlp, z) > cfg.feasibility_tolerance):
        status = MAX_ITER
    return _solution(nlp, z, status, iterations, multipliers, kkt, message)
