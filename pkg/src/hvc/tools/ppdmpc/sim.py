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
"""Closed-loop simulation of the forced lane change: scenario sampling, world stepping,
collision detection, episode execution, episode log files and metric aggregation.
"""
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import IO, TYPE_CHECKING, Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from shapely import affinity
from shapely.geometry import Polygon, box

from .constraints import CONTROLLER_TAGS, LC, NC, RC, SafetyParams
from .models import (EgoGeometry, EgoState, InvalidArgumentError, ModelDomainError, TrafficParams,
                     TrafficVehicleState, advance_traffic, ego_step, ego_transition, traffic_policy)
from .ocp import ReferenceSignal, stage_cost
from .planner import (CAUSE_CONVERGED, CAUSE_SINGLE_SHOT, DecisionError, DecisionHistory, DmpcResult, dc_mpc_step,
                      decide, dmpc_iterate, shift)
from .predictor import Observation, ModelPredictor

if TYPE_CHECKING:
    from .config import SimulationConfig

logger = logging.getLogger(__name__)

__all__ = ["ScenarioSamplingError", "ScenarioConfig", "WorldState", "StepRecord", "EpisodeLog", "MetricsTable",
           "sample_scenario", "step_world", "ego_footprint", "vehicle_footprint", "detect_collision",
           "run_episode", "aggregate_metrics", "normalize_costs", "metrics_frame", "write_episode_log",
           "read_episode_log", "DC_MPC", "PP_DMPC", "CONTROLLER_KINDS"]

DC_MPC = "dc-mpc"
PP_DMPC = "pp-dmpc"
CONTROLLER_KINDS = (DC_MPC, PP_DMPC)

SUCCESS = "success"
COLLISION = "collision"
TIMEOUT = "timeout"
OUTCOMES = (SUCCESS, COLLISION, TIMEOUT)

EPISODE_FORMAT = "ppdmpc-episode"
EPISODE_FORMAT_VERSION = 1

_PHI_KEYS = ("v_ref", "time_headway", "standstill_gap", "cooperativeness")


class ScenarioSamplingError(RuntimeError):
    pass


def _phi(v_ref, time_headway, standstill_gap, cooperativeness):
    return {"v_ref": v_ref, "time_headway": time_headway, "standstill_gap": standstill_gap,
            "cooperativeness": cooperativeness}


@dataclass(frozen=True)
class ScenarioConfig:
    """Forced lane change scenario.

    The ego starts in ``ego_lane`` at the origin, one leader drives ahead in the ego lane and the
    remaining vehicles form a dense block in the lane below. Per-vehicle traffic parameters are
    ``phi_mean + Uniform(phi_min, phi_max)``. Gaps are bumper to bumper, ``block_front_offset``
    places the front vehicle of the block relative to the ego joint.
    """
    n_vehicles: int = 4
    exit_position: float = 250.0
    reference_speed: float = 30 / 3.6
    t_max: float = 30.0
    seed: int = 0
    ego_lane: int = 1
    leader_gap: Tuple[float, float] = (35.0, 60.0)
    block_gap: Tuple[float, float] = (4.0, 12.0)
    block_front_offset: Tuple[float, float] = (-5.0, 15.0)
    left_lane_vehicles: int = 0
    vehicle_length: float = 4.5
    vehicle_width: float = 2.0
    min_cooperativeness: float = 0.3
    max_attempts: int = 1000
    success_tolerance: float = 0.2
    phi_mean: Dict[str, float] = field(default_factory=lambda: _phi(30 / 3.6, 1.0, 2.0, 0.5))
    phi_min: Dict[str, float] = field(default_factory=lambda: _phi(-1.0, -0.3, -0.5, -0.5))
    phi_max: Dict[str, float] = field(default_factory=lambda: _phi(1.0, 0.3, 0.5, 0.5))

    def __post_init__(self):
        if self.n_vehicles < 1:
            raise InvalidArgumentError("A scenario needs at least one surrounding vehicle")
        if self.exit_position <= 0 or self.reference_speed <= 0 or self.t_max <= 0:
            raise InvalidArgumentError("exit_position, reference_speed and t_max must be positive")
        for name in ("leader_gap", "block_gap", "block_front_offset"):
            low, high = getattr(self, name)
            if low > high:
                raise InvalidArgumentError(f"{name} must be an interval (low, high)")
            object.__setattr__(self, name, (float(low), float(high)))
        if self.block_gap[0] <= 0:
            raise InvalidArgumentError("Block gaps must be positive")
        if not 0 <= self.left_lane_vehicles < self.n_vehicles:
            raise InvalidArgumentError("left_lane_vehicles must leave room for the leader")
        if self.max_attempts < 1 or self.success_tolerance <= 0:
            raise InvalidArgumentError("max_attempts and success_tolerance must be positive")
        for name in ("phi_mean", "phi_min", "phi_max"):
            if set(getattr(self, name)) != set(_PHI_KEYS):
                raise InvalidArgumentError(f"{name} must define exactly {_PHI_KEYS}")
        if any(self.phi_min[key] > self.phi_max[key] for key in _PHI_KEYS):
            raise InvalidArgumentError("phi_min must not exceed phi_max")


@dataclass(frozen=True)
class WorldState:
    t: float
    ego: EgoState
    vehicles: Tuple[TrafficVehicleState, ...]
    params: Tuple[TrafficParams, ...]
    kappa: int = 0
    seed: int = 0


class StepRecord(NamedTuple):
    kappa: int
    t: float
    ego: Tuple[float, ...]
    vehicles: Tuple[Tuple[float, float, float], ...]
    decision: str
    control: Tuple[float, float]
    cost: float
    controllers: Dict[str, Dict[str, Any]]
    totals: Dict[str, float]


@dataclass(frozen=True)
class EpisodeLog:
    controller: str
    sigma_a: float
    scenario_seed: int
    outcome: str
    diagnostic: Optional[str] = None
    completion_time: Optional[float] = None
    total_cost: float = 0.0
    steps: Tuple[StepRecord, ...] = ()

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise InvalidArgumentError(f"Unknown outcome {self.outcome!r}")

    @classmethod
    def failed(cls, controller: str, sigma_a: float, scenario_seed: int, diagnostic: str) -> "EpisodeLog":
        """Log of an episode that could not be run at all."""
        return cls(controller, sigma_a, scenario_seed, TIMEOUT, diagnostic)

    def dmpc_calls(self) -> List[Dict[str, Any]]:
        return [entry for step in self.steps for entry in step.controllers.values()]

    def header(self) -> Dict[str, Any]:
        return {"format": EPISODE_FORMAT, "version": EPISODE_FORMAT_VERSION, "controller": self.controller,
                "sigma_a": self.sigma_a, "scenario_seed": self.scenario_seed, "outcome": self.outcome,
                "diagnostic": self.diagnostic, "completion_time": self.completion_time,
                "total_cost": self.total_cost, "n_steps": len(self.steps)}


class MetricsTable(NamedTuple):
    episodes: int
    success_rate: float
    collision_rate: float
    timeout_rate: float
    mean_time: float
    total_cost: float
    relative_cost: float
    mean_iterations: float
    convergence_rate: float


def _uniform(rng: np.random.Generator, interval: Tuple[float, float]) -> float:
    return float(rng.uniform(interval[0], interval[1]))


def _sample_params(rng: np.random.Generator, cfg: ScenarioConfig, base: TrafficParams) -> TrafficParams:
    phi = {key: cfg.phi_mean[key] + rng.uniform(cfg.phi_min[key], cfg.phi_max[key]) for key in _PHI_KEYS}
    return replace(base, v_ref=max(phi["v_ref"], 0.1), time_headway=max(phi["time_headway"], 0.0),
                   standstill_gap=max(phi["standstill_gap"], 0.0),
                   cooperativeness=float(np.clip(phi["cooperativeness"], 0.0, 1.0)))


def _block(rng, cfg: ScenarioConfig, lane: int, py: float, count: int, speeds: List[float]):
    px = _uniform(rng, cfg.block_front_offset)
    vehicles = []
    for i in range(count):
        vehicles.append(TrafficVehicleState(px=px, py=py, vx=speeds[i], width=cfg.vehicle_width,
                                            length=cfg.vehicle_length, lane=lane))
        px -= cfg.vehicle_length + _uniform(rng, cfg.block_gap)
    return vehicles


def sample_scenario(seed: int, cfg: ScenarioConfig, safety: Optional[SafetyParams] = None,
                    traffic: Optional[TrafficParams] = None, geometry: Optional[EgoGeometry] = None) -> WorldState:
    """Sample a dense-traffic forced lane change.

    Rejection-samples layouts until some vehicle of the exit-side block sits at or behind the ego
    front with enough cooperativeness to open a gap, and nothing overlaps initially.

    :param seed: scenario seed, identical seeds give identical scenarios
    :param cfg: scenario layout
    :param traffic: base traffic parameters the randomized components are substituted into
    :raises InvalidArgumentError: if the layout does not fit the lanes or the ego
    :raises ScenarioSamplingError: if no admissible layout is found within ``cfg.max_attempts``
    :rtype: WorldState
    """
    safety = safety if safety is not None else SafetyParams()
    traffic = traffic if traffic is not None else TrafficParams()
    g = geometry if geometry is not None else EgoGeometry()
    if not 1 <= cfg.ego_lane < safety.n_lanes:
        raise InvalidArgumentError(f"The ego lane {cfg.ego_lane} needs a lane below it")
    if cfg.block_gap[1] >= g.length:
        raise InvalidArgumentError("Block gaps must stay below the ego length")
    left_lane = cfg.ego_lane + 1
    if cfg.left_lane_vehicles and left_lane >= safety.n_lanes:
        raise InvalidArgumentError("No lane left of the ego for left_lane_vehicles")

    rng = np.random.default_rng(seed)
    n_block = cfg.n_vehicles - 1 - cfg.left_lane_vehicles
    ego = EgoState(0.0, safety.lane_centers[cfg.ego_lane], cfg.reference_speed, 0.0, 0.0)
    for attempt in range(cfg.max_attempts):
        params = [_sample_params(rng, cfg, traffic) for _ in range(cfg.n_vehicles)]
        speeds = [p.v_ref for p in params]
        leader_px = g.front_offset + _uniform(rng, cfg.leader_gap) + 0.5 * cfg.vehicle_length
        vehicles = [TrafficVehicleState(px=leader_px, py=ego.py, vx=speeds[0], width=cfg.vehicle_width,
                                        length=cfg.vehicle_length, lane=cfg.ego_lane)]
        exit_side = cfg.ego_lane - 1
        vehicles += _block(rng, cfg, exit_side, safety.lane_centers[exit_side], n_block, speeds[1:])
        if cfg.left_lane_vehicles:
            vehicles += _block(rng, cfg, left_lane, safety.lane_centers[left_lane], cfg.left_lane_vehicles,
                               speeds[1 + n_block:])

        world = WorldState(0.0, ego, tuple(vehicles), tuple(params), 0, seed)
        block = [(v, p) for v, p in zip(vehicles, params) if v.lane == exit_side]
        yielding = any(v.px <= ego.px + g.front_offset and p.cooperativeness >= cfg.min_cooperativeness
                       for v, p in block)
        if (yielding or not block) and not detect_collision(world, g):
            logger.debug("Scenario %d accepted after %d attempts", seed, attempt + 1)
            return world
    raise ScenarioSamplingError(f"No admissible scenario for seed {seed} within {cfg.max_attempts} attempts "
                                f"(min_cooperativeness={cfg.min_cooperativeness}, block_front_offset="
                                f"{cfg.block_front_offset})")


def step_world(w: WorldState, ego_u, dt: float, lane_width: float = 3.5,
               g: Optional[EgoGeometry] = None) -> WorldState:
    """Advance the world by ``dt``: the ego under ``ego_u``, the traffic under its noiseless policy."""
    if dt <= 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    g = g if g is not None else EgoGeometry()
    accelerations = traffic_policy(w.vehicles, w.ego, w.params, lane_width, g)
    vehicles = advance_traffic(w.vehicles, accelerations, w.params, dt)
    return replace(w, t=w.t + dt, ego=ego_step(w.ego, ego_u, g, dt), vehicles=vehicles, kappa=w.kappa + 1)


def _posed(shape: Polygon, angle: float, px: float, py: float) -> Polygon:
    return affinity.translate(affinity.rotate(shape, angle, origin=(0.0, 0.0), use_radians=True), px, py)


def ego_footprint(ego, g: EgoGeometry) -> Tuple[Polygon, Polygon]:
    """Tractor and trailer rectangles posed at the joint by their headings."""
    px, py, _, theta1, theta2 = (float(value) for value in ego)
    half = 0.5 * g.width
    tractor = _posed(box(-g.rear_overhang, -half, g.front_offset, half), theta1, px, py)
    trailer = _posed(box(-g.rear_offset, -half, 0.0, half), theta2, px, py)
    return tractor, trailer


def vehicle_footprint(v: TrafficVehicleState) -> Polygon:
    shape = box(-0.5 * v.length, -0.5 * v.width, 0.5 * v.length, 0.5 * v.width)
    return _posed(shape, v.theta, v.px, v.py)


def detect_collision(w: WorldState, g: Optional[EgoGeometry] = None) -> bool:
    """Whether any ego body touches or overlaps a surrounding vehicle."""
    g = g if g is not None else EgoGeometry()
    parts = ego_footprint(w.ego, g)
    return any(part.intersects(vehicle_footprint(v)) for v in w.vehicles for part in parts)


def _zero_control_plan(x0, N: int, g: EgoGeometry, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    U = np.zeros((N, 2))
    X = np.empty((N + 1, 5))
    X[0] = np.asarray(x0, dtype=float)
    for k in range(N):
        X[k + 1] = ego_transition(X[k], U[k], g, dt)
    return X, U


def available_tags(ego, safety: SafetyParams) -> Tuple[str, ...]:
    lane = safety.lane_of(float(ego[1]))
    tags = [NC]
    if lane + 1 < safety.n_lanes:
        tags.append(LC)
    if lane > 0:
        tags.append(RC)
    return tuple(tag for tag in CONTROLLER_TAGS if tag in tags)


def _finite(value) -> Optional[float]:
    value = float(value)
    return value if math.isfinite(value) else None


def _call_summary(result: DmpcResult) -> Dict[str, Any]:
    return {"cost": _finite(result.solution.cost), "status": result.solution.status,
            "iterations": result.iterations, "cause": result.cause, "converged": result.converged,
            "trace": [[r.p, _finite(r.loss), _finite(r.cost), r.status, r.accepted] for r in result.trace]}


def run_episode(world: WorldState, controller: str, sigma_a: float, cfg: "SimulationConfig",
                scenario_seed: Optional[int] = None, iteration_log: Optional[IO[str]] = None) -> EpisodeLog:
    """Run one closed-loop episode until success, collision or timeout.

    Each step runs every available controller (iterated prediction and planning for ``pp-dmpc``,
    a single decoupled solve for ``dc-mpc``), lets the decision manager choose, applies the first
    control of the chosen plan and advances the world. The realized cost of a step is measured
    against the exit-lane reference.

    :param world: initial world, usually from :func:`sample_scenario`
    :param controller: ``"dc-mpc"`` or ``"pp-dmpc"``
    :param sigma_a: predictor noise level
    :param cfg: resolved simulation configuration
    :param scenario_seed: seed of the predictor noise streams, ``world.seed`` when omitted
    :rtype: EpisodeLog
    """
    if controller not in CONTROLLER_KINDS:
        raise InvalidArgumentError(f"Unknown controller {controller!r}, expected one of {CONTROLLER_KINDS}")
    scenario_seed = world.seed if scenario_seed is None else scenario_seed
    g, safety, scenario, dt, N = cfg.geometry, cfg.safety, cfg.scenario, cfg.horizon.dt, cfg.horizon.N
    safety.check_lanes(world.vehicles)
    predictor = ModelPredictor(replace(cfg.predictor, sigma_a=sigma_a), dt, safety.lane_width, g, scenario_seed)
    step = dmpc_iterate if controller == PP_DMPC else dc_mpc_step
    exit_center = safety.lane_centers[cfg.decision.exit_lane]
    exit_ref = ReferenceSignal(py=exit_center, vx=scenario.reference_speed)
    history = DecisionHistory(cfg.decision.memory)
    observed = deque(maxlen=10)
    warm: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    steps: List[StepRecord] = []
    total_cost = 0.0
    u_prev = None

    def finish(outcome: str, diagnostic: Optional[str] = None, completion_time: Optional[float] = None):
        logger.info("Episode %s sigma=%g seed=%d: %s%s at t=%.1f", controller, sigma_a, scenario_seed, outcome,
                    f" ({diagnostic})" if diagnostic else "", world.t)
        return EpisodeLog(controller, sigma_a, scenario_seed, outcome, diagnostic, completion_time, total_cost,
                          tuple(steps))

    while True:
        if detect_collision(world, g):
            return finish(COLLISION)
        if abs(world.ego.py - exit_center) < scenario.success_tolerance and world.ego.px < scenario.exit_position:
            return finish(SUCCESS, completion_time=world.t)
        if world.ego.px >= scenario.exit_position:
            return finish(TIMEOUT, "missed-exit")
        if world.t >= scenario.t_max - 1e-9:
            return finish(TIMEOUT)

        obs = Observation(world.vehicles, world.params, tuple(observed))
        results: Dict[str, DmpcResult] = {}
        try:
            for tag in available_tags(world.ego, safety):
                guess = warm.get(tag) or _zero_control_plan(world.ego, N, g, dt)
                results[tag] = step(tag, world.ego, obs, predictor, cfg, guess, world.kappa, iteration_log)
            decision = decide([(tag, r.solution) for tag, r in results.items()], history, world.ego,
                              cfg.decision, safety)
        except DecisionError as error:
            logger.warning("Decision failure at t=%.1f: %s", world.t, error)
            return finish(TIMEOUT, "decision-failure")
        except ModelDomainError as error:
            logger.warning("Model domain violation at t=%.1f: %s", world.t, error)
            return finish(TIMEOUT, "model-domain")

        u = decision.control
        cost = stage_cost(world.ego, u, u_prev, exit_ref, cfg.weights)
        total_cost += cost
        steps.append(StepRecord(world.kappa, world.t, tuple(world.ego),
                                tuple((v.px, v.py, v.vx) for v in world.vehicles), decision.tag, tuple(u), cost,
                                {tag: _call_summary(r) for tag, r in results.items()},
                                {tag: float(total) for tag, total in decision.totals.items()}))
        observed.append(world.vehicles)
        try:
            world = step_world(world, u, dt, safety.lane_width, g)
            warm = {tag: shift(r.solution, g, dt) for tag, r in results.items() if r.solution.succeeded}
        except ModelDomainError as error:
            logger.warning("Model domain violation at t=%.1f: %s", world.t, error)
            return finish(TIMEOUT, "model-domain")
        u_prev = u


def write_episode_log(log: EpisodeLog, path):
    """Write an episode as JSON lines: a header record followed by one record per step."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(log.header()) + "\n")
        for step in log.steps:
            f.write(json.dumps(step._asdict()) + "\n")


def read_episode_log(path) -> EpisodeLog:
    """Read a file written by :func:`write_episode_log`.

    :raises InvalidArgumentError: if the file is not an episode log of a supported version
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise InvalidArgumentError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != EPISODE_FORMAT or header.get("version") != EPISODE_FORMAT_VERSION:
        raise InvalidArgumentError(f"{path} is not a {EPISODE_FORMAT} v{EPISODE_FORMAT_VERSION} file")
    steps = []
    for line in lines[1:]:
        record = json.loads(line)
        steps.append(StepRecord(kappa=record["kappa"], t=record["t"], ego=tuple(record["ego"]),
                                vehicles=tuple(tuple(v) for v in record["vehicles"]), decision=record["decision"],
                                control=tuple(record["control"]), cost=record["cost"],
                                controllers=record["controllers"], totals=record["totals"]))
    return EpisodeLog(header["controller"], header["sigma_a"], header["scenario_seed"], header["outcome"],
                      header["diagnostic"], header["completion_time"], header["total_cost"], tuple(steps))


def aggregate_metrics(logs: Sequence[EpisodeLog]) -> MetricsTable:
    """Rates, mean completion time over successes, summed realized cost and DMPC call statistics.

    Iterations and convergence rate only count iterated calls; without any they are NaN.
    ``relative_cost`` is filled in by :func:`normalize_costs`.

    :raises InvalidArgumentError: if ``logs`` is empty
    """
    if not logs:
        raise InvalidArgumentError("Cannot aggregate an empty list of episodes")
    n = len(logs)
    outcomes = [log.outcome for log in logs]
    times = [log.completion_time for log in logs if log.outcome == SUCCESS and log.completion_time is not None]
    calls = [call for log in logs for call in log.dmpc_calls() if call["cause"] != CAUSE_SINGLE_SHOT]
    return MetricsTable(
        episodes=n,
        success_rate=100.0 * outcomes.count(SUCCESS) / n,
        collision_rate=100.0 * outcomes.count(COLLISION) / n,
        timeout_rate=100.0 * outcomes.count(TIMEOUT) / n,
        mean_time=float(np.mean(times)) if times else math.nan,
        total_cost=float(sum(log.total_cost for log in logs)),
        relative_cost=math.nan,
        mean_iterations=float(np.mean([call["iterations"] for call in calls])) if calls else math.nan,
        convergence_rate=(100.0 * sum(call["cause"] == CAUSE_CONVERGED for call in calls) / len(calls)
                          if calls else math.nan),
    )


def normalize_costs(tables: Mapping[Any, MetricsTable]) -> Dict[Any, MetricsTable]:
    """Relative cost of every cell in percent of the most expensive cell."""
    worst = max((table.total_cost for table in tables.values()), default=0.0)
    return {key: table._replace(relative_cost=100.0 * table.total_cost / worst if worst > 0 else 100.0)
            for key, table in tables.items()}


def metrics_frame(cells: Mapping[Tuple[str, float], MetricsTable]) -> pd.DataFrame:
    """One row per (controller, sigma) cell, sorted by controller and sigma."""
    rows = [{"controller": controller, "sigma_a": sigma, **table._asdict()}
            for (controller, sigma), table in cells.items()]
    columns = ["controller", "sigma_a"] + list(MetricsTable._fields)
    frame = pd.DataFrame(rows, columns=columns)
    return frame.sort_values(["controller", "sigma_a"], kind="mergesort").reset_index(drop=True)
