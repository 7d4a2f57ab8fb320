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
import io
import json

import numpy as np
import pytest
from scipy.optimize import OptimizeResult

from hvc.tools.ppdmpc import nlp_solver
from hvc.tools.ppdmpc.config import SimulationConfig
from hvc.tools.ppdmpc.constraints import NC, RC
from hvc.tools.ppdmpc.models import HorizonConfig, TrafficParams, TrafficVehicleState, ego_transition
from hvc.tools.ppdmpc.ocp import CONVERGED, INFEASIBLE_RELAXED, MAX_ITER, assemble_nlp, objective_value
from hvc.tools.ppdmpc.predictor import Observation, PredictorConfig, predict

V_REF = 30 / 3.6


def _nlp(N, x0, vehicles=(), params=None, dt=0.2):
    cfg = SimulationConfig(horizon=HorizonConfig(N=N, dt=dt))
    params = params if params is not None else [TrafficParams()] * len(vehicles)
    X = np.tile(np.asarray(x0, dtype=float), (N + 1, 1))
    prediction = predict(Observation(tuple(vehicles), tuple(params)), (X, np.zeros((N, 2))),
                         PredictorConfig(sigma_a=0.0), dt=dt)
    return assemble_nlp(NC, x0, prediction, cfg)


class _QuadraticInstance:
    """min z0^2 + z1^2 s.t. z0 + z1 = 1, z0 <= 2."""
    lower = np.full(2, -np.inf)
    upper = np.full(2, np.inf)

    def objective_gradient(self, z):
        return 2.0 * np.asarray(z)

    def equality(self, z):
        return np.array([z[0] + z[1] - 1.0])

    def equality_jacobian(self, z):
        return np.array([[1.0, 1.0]])

    def inequality(self, z):
        return np.array([z[0] - 2.0])

    def inequality_jacobian(self, z):
        return np.array([[1.0, 0.0]])


@pytest.fixture
def tracking_nlp():
    return _nlp(8, np.array([0.0, 3.5, V_REF, 0.0, 0.0]))


def test_tracking_from_reference(tracking_nlp):
    solution = nlp_solver.solve(tracking_nlp)
    assert solution.status == CONVERGED
    assert solution.cost == pytest.approx(0.0, abs=1e-8)
    assert np.allclose(solution.controls, 0.0, atol=1e-5)
    assert np.allclose(solution.states[:, 1:], tracking_nlp.refs.state[1:], atol=1e-5)
    assert solution.max_violation <= 1e-6


def test_kkt_residual_of_solution(tracking_nlp):
    solution = nlp_solver.solve(tracking_nlp)
    z = tracking_nlp.pack(solution.states, solution.controls, solution.slacks)
    residual = nlp_solver.kkt_residual(tracking_nlp, z, solution.multipliers)
    assert residual == pytest.approx(solution.kkt)
    assert residual < 1e-4
    perturbed = tracking_nlp.pack(solution.states, solution.controls + 0.1, solution.slacks)
    assert nlp_solver.kkt_residual(tracking_nlp, perturbed, solution.multipliers) > residual


def test_kkt_residual_of_hand_built_point():
    instance = _QuadraticInstance()
    multipliers = nlp_solver.KktMultipliers(np.array([-1.0]), np.zeros(1), np.zeros(2), np.zeros(2))
    assert nlp_solver.kkt_residual(instance, [0.5, 0.5], multipliers) < 1e-10
    estimated = nlp_solver.estimate_multipliers(instance, np.array([0.5, 0.5]))
    assert estimated.equality == pytest.approx([-1.0])
    assert estimated.inequality == pytest.approx([0.0])


def test_two_step_solution_matches_grid_search():
    x0 = np.array([0.0, 3.5, 5.0, 0.0, 0.0])
    nlp = _nlp(2, x0)
    solution = nlp_solver.solve(nlp)
    assert solution.succeeded
    # acceleration saturates, steering stays centered by symmetry
    assert solution.controls[:, 1] == pytest.approx([nlp.box.av_max] * 2, abs=1e-4)

    grid = np.linspace(nlp.box.av_min, nlp.box.av_max, 51)
    best = np.inf
    for a0 in grid:
        for a1 in grid:
            U = np.array([[0.0, a0], [0.0, a1]])
            X = np.empty((3, 5))
            X[0] = x0
            for k in range(2):
                X[k + 1] = ego_transition(X[k], U[k], nlp.geometry, nlp.horizon.dt)
            best = min(best, objective_value(X, U, None, nlp.refs, nlp.weights))
    assert solution.cost <= best + 1e-6
    assert best - solution.cost <= 1e-3 * max(1.0, best)


def test_lane_keep_behind_slow_leader():
    x0 = np.array([0.0, 3.5, V_REF, 0.0, 0.0])
    leader = TrafficVehicleState(22.0, 3.5, 3.0, lane=1)
    nlp = _nlp(10, x0, [leader], [TrafficParams(v_ref=3.0)])
    solution = nlp_solver.solve(nlp)
    assert solution.succeeded
    assert solution.states[-1, 2] < V_REF
    assert np.max(solution.slacks) < 5e-2
    z = nlp.pack(solution.states, solution.controls, solution.slacks)
    residual = nlp.inequality(z)
    assert np.max(residual) <= 1e-5
    assert np.max(residual) > -1e-2


def test_iteration_log(tracking_nlp):
    stream = io.StringIO()
    warm = (tracking_nlp.rollout(), np.full((8, 2), 0.05))
    nlp_solver.solve(tracking_nlp, warm=warm, iteration_log=stream)
    records = [json.loads(line) for line in stream.getvalue().splitlines()]
    assert records
    assert [r["iteration"] for r in records] == list(range(1, len(records) + 1))
    assert set(records[0]) == {"tag", "iteration", "cost", "step_norm", "violation"}


def test_never_worse_than_feasible_warm_start(tracking_nlp):
    warm = (tracking_nlp.rollout(), np.zeros((8, 2)))
    z0 = tracking_nlp.initial_guess(*warm)
    solution = nlp_solver.solve(tracking_nlp, warm=warm)
    assert solution.cost <= tracking_nlp.objective(z0) + 1e-12


def test_reference_start_skips_sqp(tracking_nlp, mocker):
    minimize = mocker.patch("hvc.tools.ppdmpc.nlp_solver.minimize")
    solution = nlp_solver.solve(tracking_nlp)
    minimize.assert_not_called()
    assert solution.status == CONVERGED
    assert solution.iterations == 0
    assert solution.kkt <= nlp_solver.SolverConfig().optimality_tolerance


@pytest.mark.parametrize("slsqp_status,expected", [
    (0, MAX_ITER),
    (9, MAX_ITER),
    (4, INFEASIBLE_RELAXED),
])
def test_status_mapping(mocker, slsqp_status, expected):
    # feasible but too slow, so the starting point is no KKT point
    nlp = _nlp(8, np.array([0.0, 3.5, 7.0, 0.0, 0.0]))
    z0 = nlp.initial_guess()
    minimize = mocker.patch("hvc.tools.ppdmpc.nlp_solver.minimize",
                            return_value=OptimizeResult(x=z0, status=slsqp_status, nit=3, message="mocked"))
    solution = nlp_solver.solve(nlp)
    assert solution.status == expected
    assert solution.succeeded == (expected != INFEASIBLE_RELAXED)
    # an SLSQP success short of the KKT tolerance is refined once before giving up
    assert minimize.call_count == (2 if slsqp_status == 0 else 1)
    assert solution.iterations <= nlp_solver.SolverConfig().max_iterations


def test_converged_only_within_kkt_tolerance(mocker):
    nlp = _nlp(8, np.array([0.0, 3.5, 7.0, 0.0, 0.0]))
    z0 = nlp.initial_guess()
    mocker.patch("hvc.tools.ppdmpc.nlp_solver.minimize",
                 return_value=OptimizeResult(x=z0, status=0, nit=3, message="mocked"))
    solution = nlp_solver.solve(nlp)
    assert solution.status == MAX_ITER
    assert solution.kkt > nlp_solver.SolverConfig().optimality_tolerance


def test_polish_respects_iteration_budget(mocker):
    nlp = _nlp(8, np.array([0.0, 3.5, 7.0, 0.0, 0.0]))
    z0 = nlp.initial_guess()
    minimize = mocker.patch("hvc.tools.ppdmpc.nlp_solver.minimize",
                            return_value=OptimizeResult(x=z0, status=0, nit=10, message="mocked"))
    nlp_solver.solve(nlp, cfg=nlp_solver.SolverConfig(max_iterations=10))
    minimize.assert_called_once()
    nlp_solver.solve(nlp, cfg=nlp_solver.SolverConfig(max_iterations=40, polish_iterations=5))
    assert minimize.call_args.kwargs["options"]["maxiter"] == 5


def test_warm_start_from_optimum_terminates_quickly():
    nlp = _nlp(2, np.array([0.0, 3.5, 5.0, 0.0, 0.0]))
    first = nlp_solver.solve(nlp)
    assert first.status == CONVERGED
    again = nlp_solver.solve(nlp, warm=(first.states, first.controls))
    assert again.status == CONVERGED
    assert again.iterations <= 3
    assert again.cost == pytest.approx(first.cost, rel=1e-9, abs=1e-12)


def _right_change_behind_leader(N):
    x0 = np.array([0.0, 3.5, V_REF, 0.0, 0.0])
    vehicles = [TrafficVehicleState(40.0, 3.5, 0.8 * V_REF, lane=1),
                TrafficVehicleState(-12.0, 0.0, V_REF, lane=0),
                TrafficVehicleState(25.0, 0.0, V_REF, lane=0)]
    cfg = SimulationConfig(horizon=HorizonConfig(N=N, dt=0.2))
    params = [TrafficParams()] * len(vehicles)
    X = np.tile(x0, (N + 1, 1))
    prediction = predict(Observation(tuple(vehicles), tuple(params)), (X, np.zeros((N, 2))),
                         PredictorConfig(sigma_a=0.0), dt=0.2)
    return assemble_nlp(RC, x0, prediction, cfg)


def test_kkt_bound_on_constrained_instance():
    nlp = _right_change_behind_leader(15)
    assert nlp.n_inequality > 0
    cfg = nlp_solver.SolverConfig()
    solution = nlp_solver.solve(nlp, cfg=cfg)
    assert solution.succeeded
    assert solution.status in (CONVERGED, MAX_ITER)
    assert solution.max_violation <= cfg.feasibility_tolerance
    if solution.status == CONVERGED:
        assert solution.kkt <= cfg.optimality_tolerance
    z = nlp.pack(solution.states, solution.controls, solution.slacks)
    assert nlp_solver.kkt_residual(nlp, z, solution.multipliers) == pytest.approx(solution.kkt)


@pytest.mark.slow
def test_kkt_bound_on_constrained_instance_full_horizon():
    nlp = _right_change_behind_leader(25)
    cfg = nlp_solver.SolverConfig()
    solution = nlp_solver.solve(nlp, cfg=cfg)
    assert solution.succeeded
    assert solution.status != CONVERGED or solution.kkt <= cfg.optimality_tolerance
    assert solution.iterations <= cfg.max_iterations


def test_infeasible_iterate_without_feasible_fallback(tracking_nlp, mocker):
    z0 = tracking_nlp.initial_guess()
    broken = z0.copy()
    broken[tracking_nlp.layout.state(3, 0)] += 5.0
    mocker.patch.object(tracking_nlp, "initial_guess", return_value=broken)
    mocker.patch("hvc.tools.ppdmpc.nlp_solver.minimize",
                 return_value=OptimizeResult(x=broken, status=9, nit=200, message="mocked"))
    solution = nlp_solver.solve(tracking_nlp)
    assert solution.status == INFEASIBLE_RELAXED
    assert solution.multipliers is None
    assert solution.max_violation == pytest.approx(5.0)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        nlp_solver.SolverConfig(max_iterations=0)
    with pytest.raises(ValueError):
        nlp_solver.SolverConfig(feasibility_tolerance=0.0)
    with pytest.raises(ValueError):
        nlp_solver.SolverConfig(polish_iterations=-1)
