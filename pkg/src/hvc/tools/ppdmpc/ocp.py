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
"""Per-controller optimal control problem, transcribed by direct multiple shooting into a
smooth NLP over states, controls and slacks with the surrounding-vehicle prediction held fixed.
"""
import logging
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import TYPE_CHECKING, Any, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .constraints import (LANE_KEEP, BoundaryConfig, ConstraintSet, SafetyParams, SmoothBoundaryParams,
                          boundary_params, build_constraint_set, check_tag, controller_corridor,
                          lane_change_residual, lane_keep_residual, smooth_boundary_gradient, target_lane)
from .models import (CONTROL_DIM, STATE_DIM, EgoControl, EgoGeometry, HorizonConfig, InvalidArgumentError,
                     ego_transition, ego_transition_jacobians)

if TYPE_CHECKING:
    from .config import SimulationConfig
    from .predictor import PredictionBundle

logger = logging.getLogger(__name__)

__all__ = ["RiccatiConvergenceError", "ObjectiveWeights", "ReferenceSignal", "BoxBounds", "NlpLayout",
           "NlpInstance", "NlpSolution", "objective_value", "objective_gradient", "stage_cost", "linearize",
           "riccati_weights", "solve_riccati", "terminal_weight", "assemble_nlp",
           "CONVERGED", "MAX_ITER", "INFEASIBLE_RELAXED"]

CONVERGED = "converged"
MAX_ITER = "max-iter"
INFEASIBLE_RELAXED = "infeasible-relaxed"

# states of the subsystem that does not see the longitudinal position
_REDUCED = np.array([1, 2, 3, 4])


class RiccatiConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectiveWeights:
    """Tracking, effort, comfort and slack weights. Controls are ordered ``(delta, av)``."""
    q_y: float = 0.5
    q_v: float = 1.0
    q_a: float = 0.1
    q_delta: float = 20.0
    q_da: float = 1.0
    q_ddelta: float = 50.0
    slack_weight: float = 1e4
    riccati_regularization: float = 1e-2
    riccati_fallback_scale: float = 10.0
    terminal: Optional[np.ndarray] = field(default=None, compare=False, hash=False, repr=False)

    def __post_init__(self):
        scalars = (self.q_y, self.q_v, self.q_a, self.q_delta, self.q_da, self.q_ddelta, self.slack_weight,
                   self.riccati_regularization)
        if min(scalars) < 0:
            raise InvalidArgumentError("Objective weights must be nonnegative")
        if self.riccati_fallback_scale <= 0:
            raise InvalidArgumentError("riccati_fallback_scale must be positive")
        if self.slack_weight < 1e3 * max(self.q_y, self.q_v):
            warnings.warn(f"slack_weight={self.slack_weight} is not substantially larger than the tracking "
                          "weights, slack may be used instead of avoiding neighbors", stacklevel=3)
        if self.terminal is not None:
            terminal = np.asarray(self.terminal, dtype=float)
            if terminal.shape != (STATE_DIM, STATE_DIM) or not np.allclose(terminal, terminal.T):
                raise InvalidArgumentError("The terminal weight must be a symmetric 5x5 matrix")
            object.__setattr__(self, "terminal", terminal)

    @property
    def Q(self) -> np.ndarray:
        return np.diag([0.0, self.q_y, self.q_v, 0.0, 0.0])

    @property
    def R(self) -> np.ndarray:
        return np.diag([self.q_delta, self.q_a])

    @property
    def Rd(self) -> np.ndarray:
        return np.diag([self.q_ddelta, self.q_da])

    @property
    def P(self) -> np.ndarray:
        return self.terminal if self.terminal is not None else self.Q

    def with_terminal(self, P) -> "ObjectiveWeights":
        return replace(self, terminal=np.asarray(P, dtype=float))


@dataclass(frozen=True)
class ReferenceSignal:
    """Time-invariant tracking reference; the control reference is zero."""
    py: float
    vx: float

    @property
    def state(self) -> np.ndarray:
        return np.array([0.0, self.py, self.vx, 0.0, 0.0])

    @classmethod
    def for_controller(cls, tag: str, x0, safety: SafetyParams, v_ref: float) -> "ReferenceSignal":
        lane = safety.lane_of(float(np.asarray(x0, dtype=float)[1]))
        return cls(py=safety.lane_centers[target_lane(tag, lane, safety)], vx=float(v_ref))


@dataclass(frozen=True)
class BoxBounds:
    delta_max: float = 0.5
    av_min: float = -4.0
    av_max: float = 2.0
    vx_max: float = 25.0
    theta_max: float = 1.0

    def __post_init__(self):
        if self.delta_max <= 0 or self.vx_max <= 0 or self.theta_max <= 0:
            raise InvalidArgumentError("Box bounds must be positive")
        if self.av_min >= self.av_max:
            raise InvalidArgumentError("av_min must be smaller than av_max")


def _check_trajectories(X, U, S):
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    N = U.shape[0]
    if X.shape != (N + 1, STATE_DIM) or U.shape != (N, CONTROL_DIM):
        raise InvalidArgumentError(f"Inconsistent trajectory shapes {X.shape}, {U.shape}")
    S = np.zeros((N, 0)) if S is None else np.asarray(S, dtype=float).reshape(N, -1)
    return X, U, S


def objective_value(X, U, S, refs: ReferenceSignal, w: ObjectiveWeights) -> float:
    """Terminal tracking, stage tracking, slack, control effort and comfort cost of a trajectory.

    :param X: states, shape ``(N+1, 5)``
    :param U: controls, shape ``(N, 2)``
    :param S: slacks, shape ``(N, Mc)`` (row ``k`` belongs to step ``k+1``) or ``None``
    :raises InvalidArgumentError: on inconsistent shapes
    """
    X, U, S = _check_trajectories(X, U, S)
    dx = X - refs.state
    q = np.diag(w.Q)
    cost = dx[-1] @ w.P @ dx[-1]
    cost += np.sum(dx[:-1] ** 2 * q)
    cost += w.slack_weight * np.sum(S ** 2)
    cost += np.sum(U ** 2 * np.diag(w.R))
    cost += np.sum(np.diff(U, axis=0) ** 2 * np.diag(w.Rd))
    return float(cost)


def objective_gradient(X, U, S, refs: ReferenceSignal, w: ObjectiveWeights) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    X, U, S = _check_trajectories(X, U, S)
    dx = X - refs.state
    gX = 2.0 * dx * np.diag(w.Q)
    gX[-1] = 2.0 * w.P @ dx[-1]
    gU = 2.0 * U * np.diag(w.R)
    dU = 2.0 * np.diff(U, axis=0) * np.diag(w.Rd)
    gU[1:] += dU
    gU[:-1] -= dU
    gS = 2.0 * w.slack_weight * S
    return gX, gU, gS


def stage_cost(x, u, u_prev, refs: ReferenceSignal, w: ObjectiveWeights) -> float:
    """Realized cost of one closed-loop step against ``refs``."""
    dx = np.asarray(x, dtype=float) - refs.state
    u = np.asarray(u, dtype=float)
    cost = np.sum(dx ** 2 * np.diag(w.Q)) + np.sum(u ** 2 * np.diag(w.R))
    if u_prev is not None:
        cost += np.sum((u - np.asarray(u_prev, dtype=float)) ** 2 * np.diag(w.Rd))
    return float(cost)


def linearize(refs: ReferenceSignal, g: EgoGeometry, h: HorizonConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Discrete dynamics Jacobians at the reference state under zero control."""
    return ego_transition_jacobians(refs.state, np.zeros(CONTROL_DIM), g, h.dt)


def riccati_weights(w: ObjectiveWeights) -> Tuple[np.ndarray, np.ndarray]:
    """Stage weights for the Riccati equation; unweighted states besides ``px`` get a small regularization."""
    Q = w.Q
    idle = np.flatnonzero(np.diag(Q) == 0)
    idle = idle[idle != 0]
    Q[idle, idle] = w.riccati_regularization
    return Q, w.R


def solve_riccati(A, B, Q, R, tol: float = 1e-10, max_iter: int = 10000) -> np.ndarray:
    """Fixed point of the discrete algebraic Riccati equation by value iteration from ``P = Q``.

    :raises RiccatiConvergenceError: if the update does not settle below ``tol`` within ``max_iter`` steps
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    P = Q.copy()
    for iteration in range(max_iter):
        BtPA = B.T @ P @ A
        P_next = A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Q
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise RiccatiConvergenceError("Riccati iteration diverged")
        if np.max(np.abs(P_next - P)) < tol:
            logger.debug("Riccati iteration converged after %d steps", iteration + 1)
            return P_next
        P = P_next
    raise RiccatiConvergenceError(f"Riccati iteration did not converge within {max_iter} steps")


@lru_cache(maxsize=64)
def _terminal_weight(refs: ReferenceSignal, g: EgoGeometry, w: ObjectiveWeights, h: HorizonConfig) -> np.ndarray:
    A, B = linearize(refs, g, h)
    Q, R = riccati_weights(w)
    reduced = np.ix_(_REDUCED, _REDUCED)
    P_reduced = solve_riccati(A[reduced], B[_REDUCED], Q[reduced], R)
    P = np.zeros((STATE_DIM, STATE_DIM))
    P[reduced] = P_reduced
    return P


def terminal_weight(refs: ReferenceSignal, g: EgoGeometry, w: ObjectiveWeights, h: HorizonConfig) -> np.ndarray:
    """Terminal weight from the Riccati equation of the dynamics linearized at the reference.

    Nothing in the dynamics depends on ``px``, so the equation is solved on the remaining four
    states and embedded with a zero ``px`` row and column. The result satisfies the full
    equation for the regularized weights of :func:`riccati_weights`.

    :raises RiccatiConvergenceError: if the fixed-point iteration does not converge
    """
    return _terminal_weight(refs, g, w, h).copy()


class NlpLayout:
    """Index map of the flat decision vector ``z = [X, U, S]``.

    State ``c`` of step ``k`` sits at ``5k + c``, controls follow all states and slacks follow
    the controls; slack row ``k`` belongs to step ``k+1``.
    """

    def __init__(self, N: int, n_constrained: int):
        self.N = N
        self.n_constrained = n_constrained
        self.n_states = STATE_DIM * (N + 1)
        self.n_controls = CONTROL_DIM * N
        self.n_slacks = N * n_constrained
        self.size = self.n_states + self.n_controls + self.n_slacks

    def state(self, k: int, c: int) -> int:
        return STATE_DIM * k + c

    def control(self, k: int, c: int) -> int:
        return self.n_states + CONTROL_DIM * k + c

    def slack(self, k: int, e: int) -> int:
        return self.n_states + self.n_controls + self.n_constrained * k + e

    def pack(self, X, U, S=None) -> np.ndarray:
        S = np.zeros(self.n_slacks) if S is None else np.asarray(S, dtype=float).ravel()
        return np.concatenate([np.asarray(X, dtype=float).ravel(), np.asarray(U, dtype=float).ravel(), S])

    def unpack(self, z) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.size,):
            raise InvalidArgumentError(f"Expected a decision vector of size {self.size}, got {z.shape}")
        X = z[:self.n_states].reshape(self.N + 1, STATE_DIM)
        U = z[self.n_states:self.n_states + self.n_controls].reshape(self.N, CONTROL_DIM)
        S = z[self.n_states + self.n_controls:].reshape(self.N, self.n_constrained)
        return X, U, S


class NlpInstance:
    """Smooth NLP of one controller: ``min f(z)`` s.t. ``h(z) = 0``, ``c(z) <= 0``, ``lower <= z <= upper``.

    Equality rows pin the initial state and close the shooting defects, inequality rows hold one
    neighbor residual per constrained vehicle and step ``k = 1..N``. Lane limits, speed and
    heading limits and control limits are simple bounds.
    """

    def __init__(self, tag: str, x0, horizon: HorizonConfig, geometry: EgoGeometry, prediction: "PredictionBundle",
                 constraint_set: ConstraintSet, weights: ObjectiveWeights, refs: ReferenceSignal,
                 bounds: BoxBounds, safety: SafetyParams, boundary: BoundaryConfig):
        check_tag(tag)
        self.tag = tag
        self.x0 = np.asarray(x0, dtype=float)
        self.horizon = horizon
        self.geometry = geometry
        self.prediction = prediction
        self.constraint_set = constraint_set
        self.weights = weights
        self.refs = refs
        self.box = bounds
        self.safety = safety
        self.layout = NlpLayout(horizon.N, len(constraint_set))

        low, high = controller_corridor(tag, constraint_set.ego_lane, safety)
        py0 = float(self.x0[1])
        self.corridor = (min(low, py0 - geometry.dwe), max(high, py0 + geometry.dwe))
        self._boundaries = []
        for entry in constraint_set.entries:
            if entry.kind == LANE_KEEP:
                self._boundaries.append(None)
                continue
            self._boundaries.append(boundary_params(
                prediction.states[entry.index, 1:, 1], prediction.widths[entry.index],
                prediction.lengths[entry.index], entry.beta, self.corridor, geometry, boundary))
        self.lower, self.upper = self._bounds()
        self._jacobian_indices()

    def _jacobian_indices(self):
        """Sparsity pattern of both constraint Jacobians, shared by every evaluation."""
        N, layout = self.horizon.N, self.layout
        k = np.arange(N)[:, None, None]
        rows = STATE_DIM * (k + 1) + np.arange(STATE_DIM)[None, :, None]
        self._a_index = (np.broadcast_to(rows, (N, STATE_DIM, STATE_DIM)),
                         np.broadcast_to(STATE_DIM * k + np.arange(STATE_DIM), (N, STATE_DIM, STATE_DIM)))
        self._b_index = (np.broadcast_to(rows, (N, STATE_DIM, CONTROL_DIM)),
                         np.broadcast_to(layout.n_states + CONTROL_DIM * k + np.arange(CONTROL_DIM),
                                         (N, STATE_DIM, CONTROL_DIM)))
        self._equality_template = np.zeros((self.n_equality, layout.size))
        diagonal = np.arange(layout.n_states)
        self._equality_template[diagonal, diagonal] = 1.0

        Mc = layout.n_constrained
        self._inequality_rows = np.arange(N)[:, None] * Mc + np.arange(Mc)[None, :]
        self._inequality_px = np.broadcast_to(STATE_DIM * (np.arange(N)[:, None] + 1), (N, Mc))
        self._inequality_slack = layout.n_states + layout.n_controls + self._inequality_rows

    def __repr__(self):
        return (f"NlpInstance(tag={self.tag!r}, N={self.horizon.N}, constrained={self.constraint_set.indices}, "
                f"variables={self.layout.size})")

    def _bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        N, g, box = self.horizon.N, self.geometry, self.box
        lower_x = np.tile([-np.inf, self.corridor[0] + g.dwe, 0.0, -box.theta_max, -box.theta_max], (N + 1, 1))
        upper_x = np.tile([np.inf, self.corridor[1] - g.dwe, box.vx_max, box.theta_max, box.theta_max], (N + 1, 1))
        lower_x[0] = np.minimum(lower_x[0], self.x0)
        upper_x[0] = np.maximum(upper_x[0], self.x0)
        lower_u = np.tile([-box.delta_max, box.av_min], (N, 1))
        upper_u = np.tile([box.delta_max, box.av_max], (N, 1))
        lower_s = np.zeros(self.layout.n_slacks)
        upper_s = np.full(self.layout.n_slacks, np.inf)
        return (self.layout.pack(lower_x, lower_u, lower_s), self.layout.pack(upper_x, upper_u, upper_s))

    @property
    def n_equality(self) -> int:
        return self.layout.n_states

    @property
    def n_inequality(self) -> int:
        return self.layout.n_slacks

    def pack(self, X, U, S=None) -> np.ndarray:
        return self.layout.pack(X, U, S)

    def unpack(self, z) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.layout.unpack(z)

    def objective(self, z) -> float:
        return objective_value(*self.unpack(z), self.refs, self.weights)

    def objective_gradient(self, z) -> np.ndarray:
        return self.pack(*objective_gradient(*self.unpack(z), self.refs, self.weights))

    def equality(self, z) -> np.ndarray:
        X, U, _ = self.unpack(z)
        defects = X[1:] - ego_transition(X[:-1], U, self.geometry, self.horizon.dt)
        return np.concatenate([X[0] - self.x0, defects.ravel()])

    def equality_jacobian(self, z) -> np.ndarray:
        X, U, _ = self.unpack(z)
        A, B = ego_transition_jacobians(X[:-1], U, self.geometry, self.horizon.dt)
        jac = self._equality_template.copy()
        jac[self._a_index] = -A
        jac[self._b_index] = -B
        return jac

    def _residual(self, e: int, X, S) -> np.ndarray:
        entry = self.constraint_set.entries[e]
        vehicle = self.prediction.states[entry.index, 1:]
        if entry.kind == LANE_KEEP:
            return lane_keep_residual(X[1:], vehicle, self.safety, self.geometry, S[:, e])
        return lane_change_residual(X[1:], vehicle, self._boundaries[e], self.geometry, S[:, e])

    def inequality(self, z) -> np.ndarray:
        """Neighbor residuals, row ``k*Mc + e`` for step ``k+1`` and constrained vehicle ``e``."""
        X, _, S = self.unpack(z)
        if not self.n_inequality:
            return np.zeros(0)
        return np.stack([self._residual(e, X, S) for e in range(self.layout.n_constrained)], axis=1).ravel()

    def inequality_jacobian(self, z) -> np.ndarray:
        X, _, _ = self.unpack(z)
        N, Mc = self.horizon.N, self.layout.n_constrained
        d_px = np.zeros((N, Mc))
        d_py = np.zeros((N, Mc))
        d_vx = np.zeros((N, Mc))
        for e, entry in enumerate(self.constraint_set.entries):
            if entry.kind == LANE_KEEP:
                d_px[:, e] = 1.0
                d_vx[:, e] = self.safety.Ts
            else:
                vehicle = self.prediction.states[entry.index, 1:]
                d_px[:, e] = entry.beta * smooth_boundary_gradient(X[1:], vehicle, self._boundaries[e])
                d_py[:, e] = -float(entry.beta)
        jac = np.zeros((self.n_inequality, self.layout.size))
        rows, px = self._inequality_rows, self._inequality_px
        jac[rows, px] = d_px
        jac[rows, px + 1] = d_py
        jac[rows, px + 2] = d_vx
        jac[rows, self._inequality_slack] = -1.0
        return jac

    def max_violation(self, z) -> float:
        z = np.asarray(z, dtype=float)
        violations = [np.max(np.abs(self.equality(z)), initial=0.0),
                      np.max(self.inequality(z), initial=0.0),
                      np.max(self.lower - z, initial=0.0),
                      np.max(z - self.upper, initial=0.0)]
        return float(max(violations))

    def rollout(self, U=None) -> np.ndarray:
        """States reached from ``x0`` under ``U`` (zero control by default)."""
        N = self.horizon.N
        U = np.zeros((N, CONTROL_DIM)) if U is None else np.asarray(U, dtype=float)
        X = np.empty((N + 1, STATE_DIM))
        X[0] = self.x0
        for k in range(N):
            X[k + 1] = ego_transition(X[k], U[k], self.geometry, self.horizon.dt)
        return X

    def initial_guess(self, X=None, U=None) -> np.ndarray:
        """Decision vector from a warm start, clipped into the bounds.

        Missing states are rolled out from ``x0``, missing controls are zero. Each slack is set to the
        smallest value that satisfies its row, any slack of the warm start is discarded.
        """
        N = self.horizon.N
        U = np.zeros((N, CONTROL_DIM)) if U is None else np.array(U, dtype=float)
        X = self.rollout(U) if X is None else np.array(X, dtype=float)
        X[0] = self.x0
        z = np.clip(self.pack(X, U), self.lower, self.upper)
        z = np.where(np.isfinite(z), z, 0.0)
        residual = self.inequality(z).reshape(N, self.layout.n_constrained)
        X, U, _ = self.unpack(z)
        return self.pack(X, U, np.maximum(residual, 0.0))


class NlpSolution(NamedTuple):
    tag: str
    states: np.ndarray
    controls: np.ndarray
    slacks: np.ndarray
    cost: float
    status: str
    iterations: int
    max_violation: float
    kkt: float = float("nan")
    multipliers: Any = None
    message: str = ""

    @property
    def first_control(self) -> EgoControl:
        return EgoControl(*(float(value) for value in self.controls[0]))

    @property
    def succeeded(self) -> bool:
        return self.status != INFEASIBLE_RELAXED


def assemble_nlp(j: str, x0, pred: "PredictionBundle", cfg: "SimulationConfig",
                 constraint_set: Optional[ConstraintSet] = None, v_ref: Optional[float] = None) -> NlpInstance:
    """Build the NLP of controller ``j`` around a fixed prediction.

    :param j: controller tag
    :param x0: current ego state
    :param pred: predicted surrounding traffic over the horizon
    :param cfg: resolved simulation configuration
    :param constraint_set: constrained neighbors, selected from ``pred`` at step 0 when omitted
    :param v_ref: reference speed, ``cfg.scenario.reference_speed`` when omitted
    :raises InvalidArgumentError: if the prediction horizon differs from ``cfg.horizon.N``
    :rtype: NlpInstance
    """
    check_tag(j)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (STATE_DIM,) or not np.all(np.isfinite(x0)):
        raise InvalidArgumentError(f"Invalid initial state {x0}")
    if pred.horizon != cfg.horizon.N:
        raise InvalidArgumentError(f"Prediction spans {pred.horizon} steps, the horizon has {cfg.horizon.N}")
    if constraint_set is None:
        constraint_set = build_constraint_set(j, x0, pred.snapshot(0), cfg.safety, cfg.boundary)
    v_ref = cfg.scenario.reference_speed if v_ref is None else v_ref
    refs = ReferenceSignal.for_controller(j, x0, cfg.safety, v_ref)
    weights = cfg.weights
    try:
        P = terminal_weight(refs, cfg.geometry, weights, cfg.horizon)
    except RiccatiConvergenceError as error:
        warnings.warn(f"{error}, falling back to a scaled stage weight", stacklevel=2)
        P = weights.riccati_fallback_scale * weights.Q
    return NlpInstance(j, x0, cfg.horizon, cfg.geometry, pred, constraint_set, weights.with_terminal(P), refs,
                       cfg.bounds, cfg.safety, cfg.boundary)
