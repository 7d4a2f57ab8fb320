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
"""Vehicle models: tractor-trailer kinematics, surrounding-vehicle kinematics and the
cooperative car-following policy that drives the surrounding traffic.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

__all__ = ["InvalidArgumentError", "ModelDomainError", "EgoState", "EgoControl", "EgoGeometry",
           "TrafficVehicleState", "TrafficParams", "HorizonConfig", "ego_derivative", "ego_step",
           "ego_transition", "ego_transition_jacobians", "traffic_step", "traffic_policy",
           "advance_traffic"]

STATE_DIM = 5
CONTROL_DIM = 2


class InvalidArgumentError(ValueError):
    pass


class ModelDomainError(ValueError):
    """Raised when the tractor heading reaches +-pi/2 and the kinematics become singular."""
    pass


class EgoState(NamedTuple):
    """Tractor-trailer configuration, referenced at the joint.

    Being a tuple, an ``EgoState`` converts directly with ``np.asarray``.
    """
    px: float = 0.0
    py: float = 0.0
    vx: float = 0.0
    theta1: float = 0.0
    theta2: float = 0.0

    @property
    def is_admissible(self) -> bool:
        return (self.vx >= 0 and abs(self.theta1 - self.theta2) < math.pi / 2
                and all(math.isfinite(value) for value in self))


class EgoControl(NamedTuple):
    delta: float = 0.0
    av: float = 0.0


@dataclass(frozen=True)
class EgoGeometry:
    """Dimensions of the tractor-trailer.

    The tractor body spans ``[-rear_overhang, front_offset]`` along the tractor heading from the joint,
    the trailer body ``[-rear_offset, 0]`` along the trailer heading.
    """
    l1: float = 4.0
    l2: float = 8.0
    width: float = 2.5
    dwe: float = 1.4
    length: float = 16.0
    front_overhang: float = 1.0
    rear_overhang: float = 1.0

    def __post_init__(self):
        if min(self.l1, self.l2, self.width, self.dwe, self.length) <= 0:
            raise InvalidArgumentError("Ego dimensions must be positive")
        if self.dwe < self.width / 2:
            raise InvalidArgumentError(f"dwe={self.dwe} is smaller than half the vehicle width")
        if self.front_overhang < 0 or self.front_offset >= self.length:
            raise InvalidArgumentError("The tractor front must lie within the vehicle length")
        if not 0 <= self.rear_overhang < self.length:
            raise InvalidArgumentError(f"rear_overhang={self.rear_overhang} must lie in [0, length)")

    @property
    def front_offset(self) -> float:
        return self.l1 + self.front_overhang

    @property
    def rear_offset(self) -> float:
        return self.length - self.front_offset


@dataclass(frozen=True)
class TrafficVehicleState:
    px: float
    py: float
    vx: float
    theta: float = 0.0
    width: float = 2.0
    length: float = 4.5
    lane: int = 0

    def __post_init__(self):
        if self.vx < 0:
            raise InvalidArgumentError(f"Traffic speed must be nonnegative, got {self.vx}")
        if self.lane < 0:
            raise InvalidArgumentError(f"Invalid lane index {self.lane}")


@dataclass(frozen=True)
class TrafficParams:
    """Parameters of the cooperative car-following policy.

    ``headway_gain`` scales the gap-keeping term, ``gap_gain`` scales how strongly an
    encroaching ego translates into yielding, ``accel_gain`` and ``comfort_decel`` are the
    usual maximum acceleration and comfortable deceleration of the car-following model.
    """
    v_ref: float = 30 / 3.6
    headway_gain: float = 1.0
    gap_gain: float = 2.0
    cooperativeness: float = 0.5
    a_min: float = -4.0
    a_max: float = 4.0
    time_headway: float = 1.0
    standstill_gap: float = 2.0
    accel_gain: float = 1.5
    comfort_decel: float = 2.0
    encroachment_threshold: float = 0.1

    def __post_init__(self):
        if self.v_ref <= 0:
            raise InvalidArgumentError("v_ref must be positive")
        if not 0.0 <= self.cooperativeness <= 1.0:
            raise InvalidArgumentError(f"cooperativeness must lie in [0, 1], got {self.cooperativeness}")
        if self.a_min >= self.a_max:
            raise InvalidArgumentError("a_min must be smaller than a_max")
        if min(self.headway_gain, self.gap_gain, self.time_headway, self.standstill_gap,
               self.accel_gain) < 0 or self.comfort_decel <= 0:
            raise InvalidArgumentError("Policy gains must be nonnegative")
        if not 0.0 <= self.encroachment_threshold < 1.0:
            raise InvalidArgumentError("encroachment_threshold must lie in [0, 1)")


@dataclass(frozen=True)
class HorizonConfig:
    N: int = 25
    dt: float = 0.2

    def __post_init__(self):
        if self.N < 2:
            raise InvalidArgumentError(f"The horizon needs at least two steps, got N={self.N}")
        if self.dt <= 0:
            raise InvalidArgumentError(f"dt must be positive, got {self.dt}")


def _rhs(x: np.ndarray, u: np.ndarray, g: EgoGeometry) -> np.ndarray:
    vx, theta1, theta2 = x[..., 2], x[..., 3], x[..., 4]
    delta, av = u[..., 0], u[..., 1]
    cos1 = np.cos(theta1)
    return np.stack(np.broadcast_arrays(
        vx,
        vx * np.tan(theta1),
        av * cos1,
        vx * np.tan(delta) / (g.l1 * cos1),
        vx * np.sin(theta1 - theta2) / (g.l2 * cos1),
    ), axis=-1)


def _rhs_jacobians(x: np.ndarray, u: np.ndarray, g: EgoGeometry) -> Tuple[np.ndarray, np.ndarray]:
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    vx, theta1, theta2 = x[..., 2], x[..., 3], x[..., 4]
    delta, av = u[..., 0], u[..., 1]
    cos1, sin1 = np.cos(theta1), np.sin(theta1)
    tan_delta = np.tan(delta)
    fx = np.zeros(shape + (STATE_DIM, STATE_DIM))
    fu = np.zeros(shape + (STATE_DIM, CONTROL_DIM))
    fx[..., 0, 2] = 1.0
    fx[..., 1, 2] = np.tan(theta1)
    fx[..., 1, 3] = vx / cos1 ** 2
    fx[..., 2, 3] = -av * sin1
    fx[..., 3, 2] = tan_delta / (g.l1 * cos1)
    fx[..., 3, 3] = vx * tan_delta * sin1 / (g.l1 * cos1 ** 2)
    fx[..., 4, 2] = np.sin(theta1 - theta2) / (g.l2 * cos1)
    fx[..., 4, 3] = vx * np.cos(theta2) / (g.l2 * cos1 ** 2)
    fx[..., 4, 4] = -vx * np.cos(theta1 - theta2) / (g.l2 * cos1)
    fu[..., 2, 1] = cos1
    fu[..., 3, 0] = vx / (g.l1 * cos1 * np.cos(delta) ** 2)
    return fx, fu


def _check_domain(x: np.ndarray):
    if np.any(np.abs(x[..., 3]) >= math.pi / 2):
        raise ModelDomainError("Tractor heading |theta1| >= pi/2, the kinematic model is singular")


def ego_derivative(x, u, g: EgoGeometry) -> np.ndarray:
    """Time derivative of the tractor-trailer state.

    :param x: ego state, an :class:`EgoState` or an array whose last axis holds the 5 states
    :param u: ego control, an :class:`EgoControl` or an array whose last axis holds (delta, av)
    :param g: ego geometry
    :type g: EgoGeometry
    :raises ModelDomainError: if ``|theta1| >= pi/2``
    :return: state derivative with the broadcast shape of ``x`` and ``u``
    :rtype: numpy.ndarray
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_domain(x)
    return _rhs(x, u, g)


def ego_transition(x, u, g: EgoGeometry, dt: float) -> np.ndarray:
    """One explicit RK4 step of the ego kinematics on arrays, without domain checks.

    Broadcasts over leading axes, which the OCP uses to evaluate all shooting intervals at once.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = _rhs(x, u, g)
    k2 = _rhs(x + 0.5 * dt * k1, u, g)
    k3 = _rhs(x + 0.5 * dt * k2, u, g)
    k4 = _rhs(x + dt * k3, u, g)
    return x + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0


def ego_transition_jacobians(x, u, g: EgoGeometry, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians ``(A, B)`` of :func:`ego_transition` with respect to state and control.

    The continuous Jacobians are chained through the four RK4 stages.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    eye = np.eye(STATE_DIM)

    k1 = _rhs(x, u, g)
    a1, b1 = _rhs_jacobians(x, u, g)

    x2 = x + 0.5 * dt * k1
    k2 = _rhs(x2, u, g)
    fx, fu = _rhs_jacobians(x2, u, g)
    a2 = fx @ (eye + 0.5 * dt * a1)
    b2 = fx @ (0.5 * dt * b1) + fu

    x3 = x + 0.5 * dt * k2
    k3 = _rhs(x3, u, g)
    fx, fu = _rhs_jacobians(x3, u, g)
    a3 = fx @ (eye + 0.5 * dt * a2)
    b3 = fx @ (0.5 * dt * b2) + fu

    x4 = x + dt * k3
    fx, fu = _rhs_jacobians(x4, u, g)
    a4 = fx @ (eye + dt * a3)
    b4 = fx @ (dt * b3) + fu

    A = eye + dt * (a1 + 2 * a2 + 2 * a3 + a4) / 6.0
    B = dt * (b1 + 2 * b2 + 2 * b3 + b4) / 6.0
    return A, B


def ego_step(x, u, g: EgoGeometry, dt: float) -> EgoState:
    """Advance the ego one step of length ``dt`` with explicit fourth-order Runge-Kutta.

    .. code-block:: python
        :linenos:

        x = ego_step(EgoState(vx=10.0), EgoControl(), EgoGeometry(), 0.2)
        # x.px == 2.0, constant velocity is integrated exactly

    :raises InvalidArgumentError: if ``dt`` is not positive
    :raises ModelDomainError: if the heading is singular at any RK4 stage
    :rtype: EgoState
    """
    if dt <= 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_domain(x)
    x_next = ego_transition(x, u, g, dt)
    if not np.all(np.isfinite(x_next)):
        raise ModelDomainError("Ego state left the admissible domain during integration")
    _check_domain(x_next)
    return EgoState(*(float(value) for value in x_next))


def traffic_step(v: TrafficVehicleState, a: float, dt: float, a_min: float = -4.0,
                 a_max: float = 4.0) -> TrafficVehicleState:
    """Constant-acceleration update of a surrounding vehicle with zero steering.

    The acceleration is clamped to ``[a_min, a_max]``. A vehicle that would reach standstill
    within the step stops there instead of reversing.
    """
    a = float(np.clip(a, a_min, a_max))
    vx_next = v.vx + a * dt
    if vx_next < 0.0:
        return replace(v, px=v.px + v.vx ** 2 / (2.0 * -a), vx=0.0)
    return replace(v, px=v.px + v.vx * dt + 0.5 * a * dt ** 2, vx=vx_next)


def _leaders(vehicles: Sequence[TrafficVehicleState]) -> List[Optional[int]]:
    lanes: Dict[int, List[int]] = {}
    for i, vehicle in enumerate(vehicles):
        lanes.setdefault(vehicle.lane, []).append(i)
    leaders: List[Optional[int]] = [None] * len(vehicles)
    for members in lanes.values():
        members.sort(key=lambda i: vehicles[i].px)
        for position, i in enumerate(members):
            for j in members[position + 1:]:
                if vehicles[j].px > vehicles[i].px:
                    leaders[i] = j
                    break
    return leaders


def _free_road_term(v: float, p: TrafficParams) -> float:
    return p.accel_gain * (1.0 - (v / p.v_ref) ** 4)


def _interaction_term(v: float, v_lead: float, gap: float, p: TrafficParams) -> float:
    desired = p.standstill_gap + max(
        0.0, v * p.time_headway + v * (v - v_lead) / (2.0 * math.sqrt(p.accel_gain * p.comfort_decel)))
    gap = max(gap, 0.1)
    return -p.accel_gain * p.headway_gain * (desired / gap) ** 2


def _cooperation(acceleration: float, free: float, interaction: float, vehicle: TrafficVehicleState,
                 ego, p: TrafficParams, lane_width: float, g: EgoGeometry) -> float:
    if p.cooperativeness <= 0.0:
        return acceleration
    ego_px, ego_py, ego_vx = float(ego[0]), float(ego[1]), float(ego[2])
    encroachment = min(max((lane_width - abs(ego_py - vehicle.py)) / (0.5 * lane_width), 0.0), 1.0)
    if encroachment <= p.encroachment_threshold:
        return acceleration
    excess = (encroachment - p.encroachment_threshold) / (1.0 - p.encroachment_threshold)
    weight = min(max(p.cooperativeness * p.gap_gain * excess, 0.0), 1.0)
    if ego_px > vehicle.px:
        # ego rear acts as a virtual leader
        gap = ego_px - g.rear_offset - (vehicle.px + 0.5 * vehicle.length)
        yielding = free + _interaction_term(vehicle.vx, ego_vx, gap, p)
        return (1.0 - weight) * acceleration + weight * min(acceleration, yielding)
    if abs(ego_py - vehicle.py) < 0.25 * lane_width:
        # ego following in the same lane
        return acceleration
    room = max(0.0, 1.0 + interaction / p.accel_gain) if p.accel_gain > 0 else 0.0
    return acceleration + weight * p.accel_gain * room


def traffic_policy(vehicles: Sequence[TrafficVehicleState], ego_plan_point,
                   params: Sequence[TrafficParams], lane_width: float = 3.5,
                   ego_geometry: Optional[EgoGeometry] = None) -> np.ndarray:
    """Accelerations of all surrounding vehicles for one step.

    Each vehicle tracks its reference speed, keeps a gap to the nearest leader in its own
    lane and, depending on its cooperativeness, yields to an ego that encroaches on its lane
    ahead of it (or speeds up when the ego encroaches behind it). Only longitudinal
    differences enter, so the output is invariant to a common longitudinal offset.

    :param vehicles: all surrounding vehicles
    :param ego_plan_point: ego state used for the cooperation term
    :type ego_plan_point: EgoState
    :param params: one :class:`TrafficParams` per vehicle
    :param lane_width: lane width used to measure the encroachment (m)
    :raises InvalidArgumentError: if the number of parameter sets differs from the vehicles
    :return: clamped accelerations, one per vehicle
    :rtype: numpy.ndarray
    """
    if len(params) != len(vehicles):
        raise InvalidArgumentError(f"Got {len(params)} parameter sets for {len(vehicles)} vehicles")
    g = ego_geometry if ego_geometry is not None else EgoGeometry()
    leaders = _leaders(vehicles)
    accelerations = np.empty(len(vehicles))
    for i, (vehicle, p) in enumerate(zip(vehicles, params)):
        free = _free_road_term(vehicle.vx, p)
        interaction = 0.0
        if leaders[i] is not None:
            leader = vehicles[leaders[i]]
            gap = leader.px - vehicle.px - 0.5 * (leader.length + vehicle.length)
            interaction = _interaction_term(vehicle.vx, leader.vx, gap, p)
        acceleration = _cooperation(free + interaction, free, interaction, vehicle, ego_plan_point,
                                    p, lane_width, g)
        accelerations[i] = min(max(acceleration, p.a_min), p.a_max)
    return accelerations


def advance_traffic(vehicles: Sequence[TrafficVehicleState], accelerations,
                    params: Sequence[TrafficParams], dt: float) -> Tuple[TrafficVehicleState, ...]:
    """Step every surrounding vehicle with its (clamped) acceleration."""
    return tuple(traffic_step(vehicle, float(a), dt, p.a_min, p.a_max)
                 for vehicle, a, p in zip(vehicles, accelerations, params))
