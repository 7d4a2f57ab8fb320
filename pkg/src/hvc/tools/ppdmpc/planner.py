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
"""Coupled prediction and planning.

:func:`dmpc_iterate` alternates between solving the controller NLP against a fixed prediction
and re-predicting the traffic against a blended ego plan, until the change between iterates
stops shrinking or drops below a tolerance. :func:`decide` picks one of the three controllers.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import IO, TYPE_CHECKING, Iterable, Iterator, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .constraints import CONTROLLER_TAGS, LC, NC, RC, SafetyParams, check_tag
from .models import CONTROL_DIM, EgoControl, EgoGeometry, InvalidArgumentError, ego_step
from .nlp_solver import solve
from .ocp import NlpSolution, assemble_nlp
from .predictor import Observation, PredictionBundle, Predictor

if TYPE_CHECKING:
    from .config import SimulationConfig

logger = logging.getLogger(__name__)

__all__ = ["DecisionError", "DmpcConfig", "DecisionConfig", "DecisionHistory", "IterateState", "IterateRecord",
           "DmpcResult", "Decision", "shift", "convex_update", "loss", "dmpc_iterate", "dc_mpc_step",
           "switching_cost", "exit_directed_tag", "exit_cost", "decide"]

CAUSE_CONVERGED = "converged"
CAUSE_LOSS_INCREASE = "loss-increase"
CAUSE_MAX_ITER = "max-iter"
CAUSE_SOLVER_FAILURE = "solver-failure"
CAUSE_SINGLE_SHOT = "single-shot"
TERMINATION_CAUSES = (CAUSE_CONVERGED, CAUSE_LOSS_INCREASE, CAUSE_MAX_ITER, CAUSE_SOLVER_FAILURE, CAUSE_SINGLE_SHOT)


class DecisionError(RuntimeError):
    """No controller produced a usable solution."""
    pass


@dataclass(frozen=True)
class DmpcConfig:
    """Iteration budget, blend weights and loss tolerance.

    Weights left at ``None`` default to ``1/(M+1)`` for ``M`` surrounding vehicles.
    With ``normalize_loss`` every loss term is divided by the blend weight that produced it, so
    ``epsilon`` bounds the distance between the newest solver and predictor outputs and the
    current iterate instead of the damped step between iterates.
    """
    p_max: int = 15
    w: Optional[float] = None
    w_e: Optional[float] = None
    epsilon: float = 5.0
    normalize_loss: bool = True

    def __post_init__(self):
        if self.p_max < 1:
            raise InvalidArgumentError("p_max must be at least 1")
        if self.epsilon <= 0:
            raise InvalidArgumentError("epsilon must be positive")
        for weight in (self.w, self.w_e):
            if weight is not None and not 0.0 < weight < 1.0:
                raise InvalidArgumentError(f"Blend weights must lie in (0, 1), got {weight}")

    def blend_weights(self, n_vehicles: int) -> Tuple[float, float]:
        """``(w, w_e)``; open road counts as one vehicle so the default stays below one."""
        default = 1.0 / (max(n_vehicles, 1) + 1)
        return (self.w if self.w is not None else default,
                self.w_e if self.w_e is not None else default)


@dataclass(frozen=True)
class DecisionConfig:
    q_e: float = 1.0
    q_c: float = 10.0
    decision_scale_s: float = 2000.0
    memory: int = 10
    d_exit: float = 250.0
    d_max: Optional[float] = None
    gamma: float = 0.8
    exit_lane: int = 0
    target_tag: Optional[str] = None

    def __post_init__(self):
        if min(self.q_e, self.q_c, self.decision_scale_s) <= 0:
            raise InvalidArgumentError("Decision scales must be positive")
        if self.memory < 0:
            raise InvalidArgumentError("memory must be nonnegative")
        if self.d_exit <= 0:
            raise InvalidArgumentError("d_exit must be positive")
        if self.d_max is None:
            object.__setattr__(self, "d_max", 2.0 * self.d_exit)
        if self.d_max <= self.d_exit:
            raise InvalidArgumentError(f"d_max={self.d_max} must exceed d_exit={self.d_exit}")
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidArgumentError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.target_tag is not None:
            check_tag(self.target_tag)


class DecisionHistory:
    """Ring buffer of the last ``memory`` decisions, one entry per time step."""

    def __init__(self, memory: int = 10, entries: Iterable[str] = ()):
        self._entries = deque(maxlen=memory)
        for entry in entries:
            self.append(entry)

    def append(self, tag: str):
        check_tag(tag)
        self._entries.append(tag)

    @property
    def memory(self) -> int:
        return self._entries.maxlen

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self):
        return f"DecisionHistory({list(self._entries)!r}, memory={self.memory})"


class IterateState(NamedTuple):
    ego_states: np.ndarray
    ego_controls: np.ndarray
    pred_states: np.ndarray
    pred_accelerations: np.ndarray
    loss: float = math.inf
    p: int = 0


class IterateRecord(NamedTuple):
    p: int
    loss: float
    cost: float
    status: str
    accepted: bool


class DmpcResult(NamedTuple):
    tag: str
    solution: NlpSolution
    iterations: int
    converged: bool
    cause: str
    trace: Tuple[IterateRecord, ...] = ()


class Decision(NamedTuple):
    tag: str
    control: EgoControl
    totals: dict


def shift(prev, g: EgoGeometry, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Initial guess for the next time step: drop step 0 and pad with zero control."""
    X = np.asarray(prev.states, dtype=float)
    U = np.asarray(prev.controls, dtype=float)
    x_last = np.asarray(ego_step(X[-1], np.zeros(CONTROL_DIM), g, dt))
    return np.vstack([X[1:], x_last]), np.vstack([U[1:], np.zeros((1, CONTROL_DIM))])


def convex_update(opt, prev, weight: float):
    """``weight*opt + (1-weight)*prev``, applied to every array of a tuple pair.

    Evaluated as ``prev + weight*(opt - prev)``, which returns ``prev`` exactly when ``opt == prev``.

    :raises InvalidArgumentError: if ``weight`` is outside ``(0, 1)`` or the shapes differ
    """
    if not 0.0 < weight < 1.0:
        raise InvalidArgumentError(f"The blend weight must lie in (0, 1), got {weight}")
    if isinstance(opt, tuple):
        if not isinstance(prev, tuple) or len(opt) != len(prev):
            raise InvalidArgumentError("Blended trajectories must have the same structure")
        return tuple(convex_update(a, b, weight) for a, b in zip(opt, prev))
    opt = np.asarray(opt, dtype=float)
    prev = np.asarray(prev, dtype=float)
    if opt.shape != prev.shape:
        raise InvalidArgumentError(f"Cannot blend shapes {opt.shape} and {prev.shape}")
    return prev + weight * (opt - prev)


def loss(curr: IterateState, prev: IterateState, blend: Optional[Tuple[float, float]] = None) -> float:
    """Sum of the norms of the four iterate differences (prediction states and inputs, ego states and controls).

    :param blend: optional ``(w, w_e)``; prediction terms are divided by ``w`` and ego terms by ``w_e``
    """
    w, w_e = blend if blend is not None else (1.0, 1.0)
    pairs = ((curr.pred_states, prev.pred_states, w), (curr.pred_accelerations, prev.pred_accelerations, w),
             (curr.ego_states, prev.ego_states, w_e), (curr.ego_controls, prev.ego_controls, w_e))
    total = 0.0
    for a, b, scale in pairs:
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        if a.shape != b.shape:
            raise InvalidArgumentError(f"Iterate shapes differ: {a.shape} and {b.shape}")
        total += float(np.linalg.norm((a - b).ravel())) / scale
    return total


def _solve(tag: str, x0, prediction: PredictionBundle, cfg: "SimulationConfig", warm,
           iteration_log: Optional[IO[str]]) -> NlpSolution:
    nlp = assemble_nlp(tag, x0, prediction, cfg)
    return solve(nlp, warm=warm, cfg=cfg.solver, iteration_log=iteration_log)


def dmpc_iterate(j: str, x0, obs: Observation, predictor: Predictor, cfg: "SimulationConfig",
                 warm: Tuple[np.ndarray, np.ndarray], kappa: int = 0,
                 iteration_log: Optional[IO[str]] = None) -> DmpcResult:
    """Iterate planning and prediction for controller ``j`` at one time step.

    Each iterate solves the NLP against the current prediction, blends the solution into the
    ego iterate, re-predicts the traffic along the blended plan and blends the new prediction.
    The loop ends when the loss stops decreasing (returning the previous solver output), when it
    falls below ``epsilon`` (returning the current solver output) or after ``p_max`` solves.
    Blends only feed the predictor and the loss; the returned plan is always a solver output.

    :param j: controller tag
    :param x0: current ego state
    :param obs: current traffic
    :param predictor: traffic predictor, called with the time step and the iterate counter
    :param cfg: resolved simulation configuration
    :param warm: initial ego iterate ``(X, U)``, usually the shifted plan of the previous step
    :rtype: DmpcResult
    """
    check_tag(j)
    w, w_e = cfg.dmpc.blend_weights(len(obs.vehicles))
    ego = tuple(np.asarray(a, dtype=float) for a in warm[:2])
    prediction = predictor(obs, ego, kappa, 0)
    current = IterateState(ego[0], ego[1], prediction.states, prediction.accelerations)
    accepted: Optional[NlpSolution] = None
    trace = []
    for p in range(cfg.dmpc.p_max):
        solution = _solve(j, x0, prediction, cfg, (accepted.states, accepted.controls) if accepted else ego,
                          iteration_log)
        if not solution.succeeded:
            trace.append(IterateRecord(p + 1, math.nan, solution.cost, solution.status, False))
            logger.debug("Controller %s: solve failed at iterate %d", j, p)
            return DmpcResult(j, accepted if accepted is not None else solution, p + 1, False,
                              CAUSE_SOLVER_FAILURE, tuple(trace))

        ego = convex_update((solution.states, solution.controls), (current.ego_states, current.ego_controls), w_e)
        fresh = predictor(obs, ego, kappa, p + 1)
        blended_states, blended_accelerations = convex_update(
            (fresh.states, fresh.accelerations), (current.pred_states, current.pred_accelerations), w)
        prediction = prediction.with_trajectories(blended_states, blended_accelerations)
        candidate = IterateState(ego[0], ego[1], blended_states, blended_accelerations, p=p + 1)
        value = loss(candidate, current, (w, w_e) if cfg.dmpc.normalize_loss else None)

        if not math.isfinite(value) or value >= current.loss:
            trace.append(IterateRecord(p + 1, value, solution.cost, solution.status, False))
            return DmpcResult(j, accepted if accepted is not None else solution, p + 1, False,
                              CAUSE_LOSS_INCREASE, tuple(trace))
        trace.append(IterateRecord(p + 1, value, solution.cost, solution.status, True))
        accepted = solution
        current = candidate._replace(loss=value)
        if value < cfg.dmpc.epsilon:
            return DmpcResult(j, solution, p + 1, True, CAUSE_CONVERGED, tuple(trace))
    return DmpcResult(j, accepted, cfg.dmpc.p_max, False, CAUSE_MAX_ITER, tuple(trace))


def dc_mpc_step(j: str, x0, obs: Observation, predictor: Predictor, cfg: "SimulationConfig",
                warm: Tuple[np.ndarray, np.ndarray], kappa: int = 0,
                iteration_log: Optional[IO[str]] = None) -> DmpcResult:
    """Decoupled baseline: predict once along the warm start, solve once."""
    check_tag(j)
    ego = tuple(np.asarray(a, dtype=float) for a in warm[:2])
    prediction = predictor(obs, ego, kappa, 0)
    solution = _solve(j, x0, prediction, cfg, ego, iteration_log)
    return DmpcResult(j, solution, 1, False, CAUSE_SINGLE_SHOT, ())


def switching_cost(H: Iterable[str], j: str) -> int:
    return sum(1 for entry in H if entry != j)


def exit_directed_tag(x0, cfg: DecisionConfig, safety: Optional[SafetyParams] = None) -> str:
    """Controller steering towards the exit lane, unless ``cfg.target_tag`` fixes it."""
    if cfg.target_tag is not None:
        return cfg.target_tag
    safety = safety if safety is not None else SafetyParams()
    lane = safety.lane_of(float(np.asarray(x0, dtype=float)[1]))
    if lane > cfg.exit_lane:
        return RC
    if lane < cfg.exit_lane:
        return LC
    return NC


def exit_cost(x0, j: str, cfg: DecisionConfig, safety: Optional[SafetyParams] = None) -> float:
    """Penalty in ``[0, 1]`` for not choosing the exit-directed controller, growing towards the exit."""
    check_tag(j)
    if j == exit_directed_tag(x0, cfg, safety):
        return 0.0
    remaining = max(cfg.d_exit - float(np.asarray(x0, dtype=float)[0]), 0.0)
    return 1.0 - (remaining / cfg.d_max) ** cfg.gamma


def decide(candidates: Sequence[Tuple[str, Optional[NlpSolution]]], H: DecisionHistory, x0, cfg: DecisionConfig,
           safety: Optional[SafetyParams] = None) -> Decision:
    """Pick the controller with the lowest weighted sum of solver cost, switching cost and exit cost.

    Candidates that are missing or failed are skipped, ties go to the earlier of nc, lc, rc.
    The winner is appended to ``H``.

    :raises DecisionError: if no candidate is usable
    """
    solutions = dict(candidates)
    totals = {}
    best = None
    for tag in CONTROLLER_TAGS:
        solution = solutions.get(tag)
        if solution is None or not solution.succeeded or not math.isfinite(solution.cost):
            continue
        totals[tag] = (cfg.q_e * solution.cost + cfg.q_c * switching_cost(H, tag)
                       + cfg.decision_scale_s * exit_cost(x0, tag, cfg, safety))
        if best is None or totals[tag] < totals[best]:
            best = tag
    if best is None:
        raise DecisionError("All controller candidates failed")
    H.append(best)
    return Decision(best, solutions[best].first_control, totals)
