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
"""Prediction of the surrounding traffic conditioned on a planned ego trajectory.

The model-based predictor rolls the ground-truth traffic model forward along the ego plan and
perturbs every acceleration with Gaussian noise. Any callable following :class:`Predictor` can
replace it, for example a learned model that makes use of the observation history.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol, Sequence, Tuple

import numpy as np

from .models import (EgoGeometry, InvalidArgumentError, TrafficParams, TrafficVehicleState, advance_traffic,
                     traffic_policy)

logger = logging.getLogger(__name__)

__all__ = ["PredictorConfig", "Observation", "PredictionBundle", "Predictor", "ModelPredictor", "predict",
           "noise_generator"]


@dataclass(frozen=True)
class PredictorConfig:
    """Noise level and seeding of the model-based predictor.

    With ``redraw_per_iterate`` the noise changes with every DMPC iterate, otherwise it is fixed
    per time step.
    """
    sigma_a: float = 0.1
    seed: int = 0
    redraw_per_iterate: bool = True

    def __post_init__(self):
        if self.sigma_a < 0:
            raise InvalidArgumentError(f"sigma_a must be nonnegative, got {self.sigma_a}")
        if self.seed < 0:
            raise InvalidArgumentError("seed must be nonnegative")


@dataclass(frozen=True)
class Observation:
    """Current surrounding traffic plus past snapshots.

    ``history`` is carried for predictors that learn from past motion; the model-based
    predictor ignores it.
    """
    vehicles: Tuple[TrafficVehicleState, ...]
    params: Tuple[TrafficParams, ...]
    history: Tuple[Tuple[TrafficVehicleState, ...], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.vehicles) != len(self.params):
            raise InvalidArgumentError("Every observed vehicle needs its parameter set")


@dataclass(frozen=True, eq=False)
class PredictionBundle:
    """Predicted states ``(M, N+1, 4)`` as ``(px, py, vx, theta)`` and accelerations ``(M, N+1)``."""
    states: np.ndarray
    accelerations: np.ndarray
    widths: np.ndarray
    lengths: np.ndarray
    lanes: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        accelerations = np.asarray(self.accelerations, dtype=float)
        widths = np.asarray(self.widths, dtype=float).reshape(-1)
        if states.ndim != 3 or states.shape[2] != 4 or states.shape[0] != widths.size:
            raise InvalidArgumentError(f"Predicted states must have shape (M, N+1, 4), got {states.shape}")
        if accelerations.shape != states.shape[:2]:
            raise InvalidArgumentError(f"Accelerations {accelerations.shape} do not match states {states.shape}")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "accelerations", accelerations)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "lengths", np.asarray(self.lengths, dtype=float).reshape(-1))
        object.__setattr__(self, "lanes", np.asarray(self.lanes, dtype=int).reshape(-1))

    @property
    def n_vehicles(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1] - 1

    def snapshot(self, k: int) -> Tuple[TrafficVehicleState, ...]:
        return tuple(TrafficVehicleState(px=float(s[0]), py=float(s[1]), vx=max(float(s[2]), 0.0),
                                         theta=float(s[3]), width=float(w), length=float(l), lane=int(lane))
                     for s, w, l, lane in zip(self.states[:, k], self.widths, self.lengths, self.lanes))

    def with_trajectories(self, states, accelerations) -> "PredictionBundle":
        return replace(self, states=np.asarray(states, dtype=float), accelerations=np.asarray(accelerations, dtype=float))


class Predictor(Protocol):
    def __call__(self, obs: Observation, ego_plan: Tuple[np.ndarray, np.ndarray], kappa: int,
                 iterate: int) -> PredictionBundle:
        ...


def noise_generator(cfg: PredictorConfig, scenario: int, kappa: int, iterate: int) -> np.random.Generator:
    """Independent stream per (seed, scenario, time step[, iterate])."""
    entropy = [cfg.seed, scenario, kappa]
    if cfg.redraw_per_iterate:
        entropy.append(iterate)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def predict(obs: Observation, ego_plan: Tuple[np.ndarray, np.ndarray], cfg: PredictorConfig,
            rng: Optional[np.random.Generator] = None, dt: float = 0.2, lane_width: float = 3.5,
            ego_geometry: Optional[EgoGeometry] = None) -> PredictionBundle:
    """Roll the traffic model forward along an ego plan.

    At every step the policy sees the planned ego state of that step, the resulting acceleration
    is perturbed by ``Normal(0, sigma_a)`` noise and clamped to the vehicle's limits. The noise
    is drawn as one ``(M, N+1)`` block indexed by (vehicle, step), so plans sharing a prefix
    yield predictions sharing that prefix.

    :param obs: current traffic
    :param ego_plan: ego states ``(N+1, 5)`` and controls ``(N, 2)``
    :param cfg: noise configuration
    :param rng: noise source, derived from ``cfg.seed`` when omitted
    :raises InvalidArgumentError: if states and controls of the plan disagree on the horizon
    :rtype: PredictionBundle
    """
    X = np.asarray(ego_plan[0], dtype=float)
    U = np.asarray(ego_plan[1], dtype=float)
    if X.ndim != 2 or U.ndim != 2 or X.shape[0] != U.shape[0] + 1:
        raise InvalidArgumentError(f"Ego plan horizons disagree: states {X.shape}, controls {U.shape}")
    N = U.shape[0]
    g = ego_geometry if ego_geometry is not None else EgoGeometry()
    M = len(obs.vehicles)
    noise = None
    if cfg.sigma_a > 0 and M:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        noise = rng.normal(0.0, cfg.sigma_a, size=(M, N + 1))
    a_min = np.array([p.a_min for p in obs.params])
    a_max = np.array([p.a_max for p in obs.params])

    states = np.empty((M, N + 1, 4))
    accelerations = np.empty((M, N + 1))
    vehicles = tuple(obs.vehicles)
    for k in range(N + 1):
        states[:, k] = np.array([(v.px, v.py, v.vx, v.theta) for v in vehicles]).reshape(M, 4)
        a = traffic_policy(vehicles, X[k], obs.params, lane_width, g)
        if noise is not None:
            a = np.clip(a + noise[:, k], a_min, a_max)
        accelerations[:, k] = a
        if k < N:
            vehicles = advance_traffic(vehicles, a, obs.params, dt)
    return PredictionBundle(states=states, accelerations=accelerations,
                            widths=[v.width for v in obs.vehicles], lengths=[v.length for v in obs.vehicles],
                            lanes=[v.lane for v in obs.vehicles])


class ModelPredictor:
    """Model-based predictor with a noise stream per scenario, time step and DMPC iterate."""

    def __init__(self, cfg: PredictorConfig, dt: float, lane_width: float = 3.5,
                 ego_geometry: Optional[EgoGeometry] = None, scenario_seed: int = 0):
        self.cfg = cfg
        self.dt = dt
        self.lane_width = lane_width
        self.ego_geometry = ego_geometry if ego_geometry is not None else EgoGeometry()
        self.scenario_seed = scenario_seed

    def __call__(self, obs: Observation, ego_plan: Tuple[np.ndarray, np.ndarray], kappa: int = 0,
                 iterate: int = 0) -> PredictionBundle:
        rng = noise_generator(self.cfg, self.scenario_seed, kappa, iterate)
        return predict(obs, ego_plan, self.cfg, rng, self.dt, self.lane_width, self.ego_geometry)
