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
import numpy as np
import pytest

from hvc.tools.ppdmpc import planner as pl
from hvc.tools.ppdmpc.config import SimulationConfig
from hvc.tools.ppdmpc.constraints import LC, NC, RC
from hvc.tools.ppdmpc.models import (EgoGeometry, InvalidArgumentError, TrafficParams, TrafficVehicleState,
                                     ego_transition)
from hvc.tools.ppdmpc.ocp import CONVERGED, INFEASIBLE_RELAXED, NlpSolution
from hvc.tools.ppdmpc.predictor import ModelPredictor, Observation, PredictionBundle, PredictorConfig

N = 3
V_REF = 30 / 3.6


def _solution(states, controls=None, cost=1.0, status=CONVERGED, tag=NC):
    controls = np.zeros((N, 2)) if controls is None else controls
    return NlpSolution(tag, np.asarray(states, dtype=float), np.asarray(controls, dtype=float), np.zeros((N, 0)),
                       cost, status, 5, 0.0)


def _empty_predictor(obs, ego_plan, kappa, iterate):
    return PredictionBundle(np.zeros((0, N + 1, 4)), np.zeros((0, N + 1)), [], [], [])


@pytest.fixture
def cfg():
    return SimulationConfig.from_dict({"horizon": {"N": N}, "dmpc": {"epsilon": 1e-3, "p_max": 5}})


@pytest.fixture
def warm():
    return np.zeros((N + 1, 5)), np.zeros((N, 2))


@pytest.fixture
def empty_obs():
    return Observation((), ())


def test_shift_constant_velocity():
    g, dt = EgoGeometry(), 0.2
    X = np.empty((N + 1, 5))
    X[0] = [0.0, 3.5, 10.0, 0.0, 0.0]
    for k in range(N):
        X[k + 1] = ego_transition(X[k], np.zeros(2), g, dt)
    X_next, U_next = pl.shift(_solution(X), g, dt)
    expected = np.empty((N + 1, 5))
    expected[0] = X[1]
    for k in range(N):
        expected[k + 1] = ego_transition(expected[k], np.zeros(2), g, dt)
    assert np.allclose(X_next, expected, rtol=0, atol=1e-12)
    assert np.array_equal(U_next, np.zeros((N, 2)))


def test_shift_appends_zero_control():
    U = np.array([[0.1, 1.0], [0.2, 0.5], [0.3, -1.0]])
    X = np.tile([0.0, 3.5, 10.0, 0.0, 0.0], (N + 1, 1))
    _, U_next = pl.shift(_solution(X, U), EgoGeometry(), 0.2)
    assert np.array_equal(U_next[:-1], U[1:])
    assert np.array_equal(U_next[-1], [0.0, 0.0])


def test_convex_update_limits():
    rng = np.random.default_rng(2)
    opt, prev = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    assert np.allclose(pl.convex_update(opt, prev, 1 - 1e-12), opt, atol=1e-10)
    assert np.array_equal(pl.convex_update(prev, prev, 0.3), prev)
    blended = pl.convex_update(opt, prev, 0.3)
    assert np.linalg.norm(blended - opt) == pytest.approx(0.7 * np.linalg.norm(prev - opt), rel=1e-12)


def test_convex_update_with_default_weight():
    w, w_e = pl.DmpcConfig().blend_weights(4)
    assert w == w_e == pytest.approx(0.2)
    assert pl.convex_update(np.array([10.0]), np.array([0.0]), w) == pytest.approx([2.0])
    assert pl.DmpcConfig().blend_weights(0) == (0.5, 0.5)


def test_convex_update_rejects_bad_input():
    with pytest.raises(InvalidArgumentError):
        pl.convex_update(np.zeros(2), np.zeros(2), 1.0)
    with pytest.raises(InvalidArgumentError):
        pl.convex_update(np.zeros(2), np.zeros(3), 0.5)
    with pytest.raises(InvalidArgumentError):
        pl.convex_update((np.zeros(2),), (np.zeros(2), np.zeros(2)), 0.5)


def _iterate(ego_states=None, pred_states=None):
    return pl.IterateState(np.zeros((N + 1, 5)) if ego_states is None else ego_states, np.zeros((N, 2)),
                           np.zeros((2, N + 1, 4)) if pred_states is None else pred_states, np.zeros((2, N + 1)))


def test_loss_identical_iterates():
    assert pl.loss(_iterate(), _iterate()) == 0.0


def test_loss_unit_ego_difference():
    X = np.zeros((N + 1, 5))
    X[2, 3] = 1.0
    assert pl.loss(_iterate(ego_states=X), _iterate()) == pytest.approx(1.0)


def test_loss_matches_direct_summation():
    rng = np.random.default_rng(4)
    a = pl.IterateState(rng.normal(size=(N + 1, 5)), rng.normal(size=(N, 2)), rng.normal(size=(2, N + 1, 4)),
                        rng.normal(size=(2, N + 1)))
    b = pl.IterateState(rng.normal(size=(N + 1, 5)), rng.normal(size=(N, 2)), rng.normal(size=(2, N + 1, 4)),
                        rng.normal(size=(2, N + 1)))
    expected = sum(np.sqrt(np.sum((np.ravel(x) - np.ravel(y)) ** 2)) for x, y in zip(a[:4], b[:4]))
    assert pl.loss(a, b) == pytest.approx(expected, rel=1e-12)


def test_loss_scaled_by_blend_weights():
    X = np.zeros((N + 1, 5))
    X[2, 3] = 1.0
    pred = np.zeros((2, N + 1, 4))
    pred[1, 0, 0] = 1.0
    assert pl.loss(_iterate(ego_states=X), _iterate(), (0.5, 0.25)) == pytest.approx(4.0)
    assert pl.loss(_iterate(pred_states=pred), _iterate(), (0.5, 0.25)) == pytest.approx(2.0)
    assert pl.loss(_iterate(ego_states=X), _iterate(), (1.0, 1.0)) == pl.loss(_iterate(ego_states=X), _iterate())


def test_unnormalized_loss_stops_earlier(warm, empty_obs, mocker):
    moved = _solution(np.full((N + 1, 5), 1.0))
    cfg = SimulationConfig.from_dict({"horizon": {"N": N}, "dmpc": {"epsilon": 3.0, "p_max": 5}})
    raw = SimulationConfig.from_dict({"horizon": {"N": N},
                                      "dmpc": {"epsilon": 3.0, "p_max": 5, "normalize_loss": False}})
    mocker.patch("hvc.tools.ppdmpc.planner._solve", return_value=moved)
    # ||moved - warm|| is sqrt(20) ~ 4.47, halved by the blend
    assert pl.dmpc_iterate(NC, warm[0][0], empty_obs, _empty_predictor, raw, warm).iterations == 1
    result = pl.dmpc_iterate(NC, warm[0][0], empty_obs, _empty_predictor, cfg, warm)
    assert result.iterations == 2
    assert result.trace[0].loss == pytest.approx(np.sqrt(20.0))
    assert result.converged


def test_dmpc_stops_when_loss_increases(cfg, warm, empty_obs, mocker):
    far = _solution(np.full((N + 1, 5), 10.0), cost=3.0)
    same = _solution(np.full((N + 1, 5), 10.0), cost=2.0)
    back = _solution(np.zeros((N + 1, 5)), cost=1.0)
    mocker.patch("hvc.tools.ppdmpc.planner._solve", side_effect=[far, same, back])
    result = pl.dmpc_iterate(NC, warm[0][0], empty_obs, _empty_predictor, cfg, warm)
    assert result.cause == pl.CAUSE_LOSS_INCREASE
    assert result.solution is same
    assert result.iterations == 3
    assert not result.converged
    accepted = [record.loss for record in result.trace if record.accepted]
    assert len(accepted) == 2
    assert accepted[1] < accepted[0]
    assert not result.trace[-1].accepted
    assert result.trace[-1].loss >= accepted[-1]


def test_dmpc_accepted_losses_strictly_decrease(cfg, warm, empty_obs, mocker):
    mocker.patch("hvc.tools.ppdmpc.planner._solve",
                 side_effect=[_solution(np.full((N + 1, 5), 8.0)) for _ in range(cfg.dmpc.p_max)])
    result = pl.dmpc_iterate(NC, warm[0][0], empty_obs, _empty_predictor, cfg, warm)
    assert result.cause == pl.CAUSE_MAX_ITER
    assert result.iterations == cfg.dmpc.p_max
    losses = [record.loss for record in result.trace]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_dmpc_converges(cfg, warm, empty_obs, mocker):
    solutions = [_solution(np.full((N + 1, 5), 1e-4)), _solution(np.full((N + 1, 5), 1e-4))]
    mocker.patch("hvc.tools.ppdmpc.planner._solve", side_effect=solutions)
    result = pl.dmpc_iterate(NC, warm[0][0], empty_obs, _empty_predictor, cfg, warm)
    assert result.converged
    assert result.cause == pl.CAUSE_CONVERGED
    assert result.iterations == 1
    assert result.solution is solutions[0]


def test_dmpc_solver_failure(cfg, warm, empty_obs, mocker):
    failed = _solution(np.zeros((N + 1, 5)), status=INFEASIBLE_RELAXED)
    mocker.patch("hvc.tools.ppdmpc.planner._solve", return_value=failed)
    result = pl.dmpc_iterate(NC, warm[0][0], empty_obs, _empty_predictor, cfg, warm)
    assert result.cause == pl.CAUSE_SOLVER_FAILURE
    assert not result.solution.succeeded
    assert result.iterations == 1


def test_dmpc_warm_starts_from_accepted_solution(cfg, warm, empty_obs, mocker):
    first = _solution(np.full((N + 1, 5), 10.0))
    solve = mocker.patch("hvc.tools.ppdmpc.planner._solve", side_effect=[first, first, first, first, first])
    pl.dmpc_iterate(NC, warm[0][0], empty_obs, _empty_predictor, cfg, warm)
    assert solve.call_args_list[0].args[4] is warm or np.array_equal(solve.call_args_list[0].args[4][0], warm[0])
    assert solve.call_args_list[1].args[4][0] is first.states


def test_dc_mpc_single_shot(cfg, warm, empty_obs, mocker):
    solution = _solution(np.zeros((N + 1, 5)))
    solve = mocker.patch("hvc.tools.ppdmpc.planner._solve", return_value=solution)
    result = pl.dc_mpc_step(NC, warm[0][0], empty_obs, _empty_predictor, cfg, warm)
    assert solve.call_count == 1
    assert result.cause == pl.CAUSE_SINGLE_SHOT
    assert result.solution is solution
    assert result.trace == ()


@pytest.mark.slow
def test_dmpc_fixed_point_at_reference():
    cfg = SimulationConfig.from_dict({"horizon": {"N": 8}})
    x0 = np.array([0.0, 3.5, V_REF, 0.0, 0.0])
    X = np.empty((9, 5))
    X[0] = x0
    for k in range(8):
        X[k + 1] = ego_transition(X[k], np.zeros(2), cfg.geometry, cfg.horizon.dt)
    predictor = ModelPredictor(PredictorConfig(sigma_a=0.0), cfg.horizon.dt)
    result = pl.dmpc_iterate(NC, x0, Observation((), ()), predictor, cfg, (X, np.zeros((8, 2))))
    assert result.converged
    assert result.iterations <= 2
    assert result.solution.first_control == pytest.approx((0.0, 0.0), abs=1e-5)
    again = pl.dmpc_iterate(NC, x0, Observation((), ()), predictor, cfg, pl.shift(result.solution, cfg.geometry,
                                                                                      cfg.horizon.dt))
    assert again.solution.first_control == pytest.approx(result.solution.first_control, abs=1e-5)


def _zero_control_warm(x0, cfg):
    N_h = cfg.horizon.N
    X = np.empty((N_h + 1, 5))
    X[0] = x0
    for k in range(N_h):
        X[k + 1] = ego_transition(X[k], np.zeros(2), cfg.geometry, cfg.horizon.dt)
    return X, np.zeros((N_h, 2))


@pytest.mark.slow
def test_lane_change_plan_iterates_to_fixed_point():
    cfg = SimulationConfig.from_dict({"horizon": {"N": 10}})
    x0 = np.array([0.0, 3.5, V_REF, 0.0, 0.0])
    predictor = ModelPredictor(PredictorConfig(sigma_a=0.0), cfg.horizon.dt)
    warm = _zero_control_warm(x0, cfg)
    pp = pl.dmpc_iterate(RC, x0, Observation((), ()), predictor, cfg, warm)
    dc = pl.dc_mpc_step(RC, x0, Observation((), ()), predictor, cfg, warm)
    assert pp.iterations > 1
    assert pp.cause == pl.CAUSE_CONVERGED
    losses = [record.loss for record in pp.trace if record.accepted]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert pp.trace[0].cost == pytest.approx(dc.solution.cost, rel=1e-9)
    assert pp.solution.cost <= dc.solution.cost * (1 + 1e-6) + 1e-6


@pytest.mark.slow
def test_coupled_plan_not_worse_than_decoupled():
    cfg = SimulationConfig.from_dict({"horizon": {"N": 15}})
    x0 = np.array([0.0, 3.5, V_REF, 0.0, 0.0])
    follower = TrafficVehicleState(-25.0, 0.0, V_REF, lane=0)
    obs = Observation((follower,), (TrafficParams(cooperativeness=1.0),))
    predictor = ModelPredictor(PredictorConfig(sigma_a=0.0), cfg.horizon.dt)
    warm = _zero_control_warm(x0, cfg)
    pp = pl.dmpc_iterate(RC, x0, obs, predictor, cfg, warm)
    dc = pl.dc_mpc_step(RC, x0, obs, predictor, cfg, warm)
    assert pp.solution.succeeded and dc.solution.succeeded
    assert pp.iterations > 1
    # the first iterate is the decoupled solve
    assert pp.trace[0].cost == pytest.approx(dc.solution.cost, rel=1e-9)
    assert pp.solution.cost <= dc.solution.cost * (1 + 1e-6) + 1e-6


@pytest.mark.parametrize("history,tag,expected", [
    ([NC, NC, NC], NC, 0),
    ([NC, NC, RC], RC, 2),
    ([], LC, 0),
])
def test_switching_cost(history, tag, expected):
    assert pl.switching_cost(pl.DecisionHistory(10, history), tag) == expected


def test_exit_cost():
    cfg = pl.DecisionConfig(d_exit=250.0, d_max=500.0, gamma=1.0, exit_lane=0)
    x0 = np.array([0.0, 3.5, V_REF, 0.0, 0.0])
    assert pl.exit_directed_tag(x0, cfg) == RC
    assert pl.exit_cost(x0, RC, cfg) == 0.0
    assert pl.exit_cost(x0, NC, cfg) == pytest.approx(0.5)
    assert pl.exit_cost(np.array([250.0, 3.5, V_REF, 0.0, 0.0]), LC, cfg) == pytest.approx(1.0)


def test_decision_config_defaults():
    cfg = pl.DecisionConfig(d_exit=100.0)
    assert cfg.d_max == 200.0
    with pytest.raises(InvalidArgumentError):
        pl.DecisionConfig(d_exit=100.0, d_max=50.0)


def test_decide_tie_break():
    cfg = pl.DecisionConfig(exit_lane=1)
    x0 = np.array([0.0, 3.5, V_REF, 0.0, 0.0])
    X = np.zeros((N + 1, 5))
    history = pl.DecisionHistory()
    decision = pl.decide([(RC, _solution(X, tag=RC)), (LC, _solution(X, tag=LC))], history, x0, cfg)
    assert decision.tag == LC
    assert list(history) == [LC]


def test_decide_argmin_and_scaling_invariance():
    x0 = np.array([0.0, 3.5, V_REF, 0.0, 0.0])
    controls = np.array([[0.1, -0.5], [0.0, 0.0], [0.0, 0.0]])
    candidates = [(NC, _solution(np.zeros((N + 1, 5)), cost=900.0)),
                  (LC, _solution(np.zeros((N + 1, 5)), cost=50.0, tag=LC)),
                  (RC, _solution(np.zeros((N + 1, 5)), controls, cost=100.0, tag=RC))]
    cfg = pl.DecisionConfig()
    decision = pl.decide(candidates, pl.DecisionHistory(), x0, cfg)
    assert decision.tag == RC
    assert decision.control == pytest.approx((0.1, -0.5))
    scaled = pl.DecisionConfig(q_e=7.0, q_c=70.0, decision_scale_s=14000.0)
    assert pl.decide(candidates, pl.DecisionHistory(), x0, scaled).tag == RC


def test_decide_skips_failed_candidates():
    x0 = np.array([0.0, 3.5, V_REF, 0.0, 0.0])
    candidates = [(NC, _solution(np.zeros((N + 1, 5)), cost=1.0)),
                  (RC, _solution(np.zeros((N + 1, 5)), cost=0.0, status=INFEASIBLE_RELAXED, tag=RC))]
    assert pl.decide(candidates, pl.DecisionHistory(), x0, pl.DecisionConfig()).tag == NC


def test_decide_all_failed():
    x0 = np.array([0.0, 3.5, V_REF, 0.0, 0.0])
    candidates = [(NC, _solution(np.zeros((N + 1, 5)), status=INFEASIBLE_RELAXED)), (LC, None)]
    history = pl.DecisionHistory()
    with pytest.raises(pl.DecisionError):
        pl.decide(candidates, history, x0, pl.DecisionConfig())
    assert len(history) == 0


def test_decision_history_memory():
    history = pl.DecisionHistory(3, [NC, NC, LC, RC])
    assert list(history) == [NC, LC, RC]
    with pytest.raises(InvalidArgumentError):
        history.append("left")
