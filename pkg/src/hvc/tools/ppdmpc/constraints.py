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
"""Collision avoidance residuals for the three controllers.

All residuals follow the convention ``residual <= 0`` means feasible. Slack enters as a
nonnegative magnitude that is always subtracted, so slack can only relax a constraint.
Residual functions broadcast: ego arguments may be arrays whose last axis holds the five ego
states, neighbor arguments arrays whose last axis holds ``(px, py, vx, theta)``.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .models import EgoGeometry, InvalidArgumentError, TrafficVehicleState

logger = logging.getLogger(__name__)

__all__ = ["NC", "LC", "RC", "CONTROLLER_TAGS", "SafetyParams", "BoundaryConfig", "SmoothBoundaryParams",
           "ConstrainedVehicle", "ConstraintSet", "lane_keep_residual", "smooth_boundary",
           "smooth_boundary_gradient", "lane_change_residual", "lane_limit_residuals",
           "controller_corridor", "target_lane", "boundary_params", "build_constraint_set"]

NC = "nc"
LC = "lc"
RC = "rc"
CONTROLLER_TAGS = (NC, LC, RC)

LANE_KEEP = "lane-keep"
LANE_CHANGE = "lane-change"


def check_tag(tag: str):
    if tag not in CONTROLLER_TAGS:
        raise InvalidArgumentError(f"Unknown controller tag {tag!r}, expected one of {CONTROLLER_TAGS}")


@dataclass(frozen=True)
class SafetyParams:
    """Longitudinal safety margin and lane layout.

    Lanes are indexed from the right road edge, lane 0 being the exit lane; ``lane_centers``
    are stored in ascending lateral order.
    """
    ds: float = 5.0
    Ts: float = 1.0
    lane_width: float = 3.5
    lane_centers: Tuple[float, ...] = (0.0, 3.5, 7.0)

    def __post_init__(self):
        if self.ds < 0 or self.Ts < 0:
            raise InvalidArgumentError("ds and Ts must be nonnegative")
        if self.lane_width <= 0:
            raise InvalidArgumentError("lane_width must be positive")
        if not self.lane_centers:
            raise InvalidArgumentError("At least one lane is required")
        object.__setattr__(self, "lane_centers", tuple(sorted(float(c) for c in self.lane_centers)))

    @property
    def n_lanes(self) -> int:
        return len(self.lane_centers)

    def lane_of(self, py: float) -> int:
        """Index of the lane whose center is closest to ``py``."""
        return int(np.argmin(np.abs(np.asarray(self.lane_centers) - py)))

    def lane_edges(self, lane: int) -> Tuple[float, float]:
        if not 0 <= lane < self.n_lanes:
            raise InvalidArgumentError(f"Lane {lane} does not exist")
        center = self.lane_centers[lane]
        return center - 0.5 * self.lane_width, center + 0.5 * self.lane_width

    def check_lanes(self, vehicles: Sequence[TrafficVehicleState]) -> None:
        """Raise :class:`InvalidArgumentError` if a vehicle sits on a lane this road does not have."""
        for v in vehicles:
            if v.lane >= self.n_lanes:
                raise InvalidArgumentError(f"Vehicle lane {v.lane} does not exist on a {self.n_lanes}-lane road")


@dataclass(frozen=True)
class BoundaryConfig:
    """Shape of the smooth lane-change boundary.

    ``transition_band`` is the longitudinal distance over which the tanh edges are allowed to
    deviate from the exact rectangle; the margins inflate the neighbor footprint.
    """
    sharpness: float = 0.5
    transition_band: float = 3.0
    lateral_margin: float = 0.3
    longitudinal_margin: float = 1.0
    window_behind: float = 40.0
    window_ahead: float = 60.0

    def __post_init__(self):
        if self.sharpness <= 0 or self.transition_band <= 0:
            raise InvalidArgumentError("sharpness and transition_band must be positive")
        if min(self.lateral_margin, self.longitudinal_margin, self.window_behind, self.window_ahead) < 0:
            raise InvalidArgumentError("Margins and window lengths must be nonnegative")


@dataclass(frozen=True)
class SmoothBoundaryParams:
    """Coefficients of one smooth lateral boundary.

    The alphas may be arrays (one value per horizon step). ``alpha0`` carries the sign of
    ``beta``: a lower bound (``beta=+1``) bulges upward over the neighbor, an upper bound
    (``beta=-1``) dips downward.
    """
    alpha0: float
    alpha1: float
    alpha2: float
    alpha3: float
    beta: int = 1
    sharpness: float = 0.5

    def __post_init__(self):
        if self.beta not in (-1, 1):
            raise InvalidArgumentError(f"beta must be -1 or +1, got {self.beta}")
        if not np.all(np.sign(self.alpha0) == self.beta):
            raise InvalidArgumentError("alpha0 must be nonzero with the sign of beta")
        if self.sharpness <= 0:
            raise InvalidArgumentError("sharpness must be positive")


@dataclass(frozen=True)
class ConstrainedVehicle:
    index: int
    beta: int
    kind: str = LANE_CHANGE


@dataclass(frozen=True)
class ConstraintSet:
    tag: str
    ego_lane: int
    target_lane: int
    entries: Tuple[ConstrainedVehicle, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.entries)

    @property
    def indices(self) -> Tuple[int, ...]:
        return tuple(entry.index for entry in self.entries)


def _vehicle_array(v) -> np.ndarray:
    if isinstance(v, TrafficVehicleState):
        return np.array([v.px, v.py, v.vx, v.theta])
    return np.asarray(v, dtype=float)


def lane_keep_residual(ego, lead_pred, p: SafetyParams, g: EgoGeometry, s=0.0):
    """Longitudinal distance-keeping residual towards a same-lane leader.

    .. code-block:: python

        lane_keep_residual(EgoState(vx=10.0), TrafficVehicleState(50.0, 0.0, 10.0),
                           SafetyParams(ds=2.0, Ts=1.5), EgoGeometry())   # -29.0
    """
    x = np.asarray(ego, dtype=float)
    v = _vehicle_array(lead_pred)
    return x[..., 0] - v[..., 0] + g.l1 + p.ds + p.Ts * x[..., 2] - s


def smooth_boundary(ego, veh_pred, p: SmoothBoundaryParams):
    """Lateral boundary value: a tanh plateau of height ``alpha0`` over the neighbor, ``alpha3`` away from it."""
    dx = np.asarray(ego, dtype=float)[..., 0] - _vehicle_array(veh_pred)[..., 0]
    return 0.5 * p.alpha0 * (np.tanh(p.sharpness * (dx + p.alpha1))
                             + np.tanh(p.sharpness * (p.alpha2 - dx))) + p.alpha3


def smooth_boundary_gradient(ego, veh_pred, p: SmoothBoundaryParams):
    """Derivative of :func:`smooth_boundary` with respect to the ego longitudinal position."""
    dx = np.asarray(ego, dtype=float)[..., 0] - _vehicle_array(veh_pred)[..., 0]
    sech2_front = 1.0 / np.cosh(p.sharpness * (dx + p.alpha1)) ** 2
    sech2_rear = 1.0 / np.cosh(p.sharpness * (p.alpha2 - dx)) ** 2
    return 0.5 * p.alpha0 * p.sharpness * (sech2_front - sech2_rear)


def lane_change_residual(ego, veh_pred, p: SmoothBoundaryParams, g: EgoGeometry, s=0.0):
    x = np.asarray(ego, dtype=float)
    return p.beta * (smooth_boundary(x, veh_pred, p) + g.dwe - x[..., 1]) - s


def target_lane(tag: str, lane: int, p: SafetyParams) -> int:
    """Lane a controller steers to; a target beyond the road edge falls back to ``lane``."""
    check_tag(tag)
    target = {NC: lane, LC: lane + 1, RC: lane - 1}[tag]
    return target if 0 <= target < p.n_lanes else lane


def controller_corridor(tag: str, lane: int, p: SafetyParams) -> Tuple[float, float]:
    """Lateral interval ``(low, high)`` the ego body may occupy under controller ``tag``."""
    target = target_lane(tag, lane, p)
    low, high = p.lane_edges(min(lane, target))[0], p.lane_edges(max(lane, target))[1]
    return low, high


def lane_limit_residuals(ego, p: SafetyParams, g: EgoGeometry, j: str) -> Tuple[float, float]:
    """Residual pair keeping the ego's lateral span inside the corridor of controller ``j``.

    The corridor is anchored at the lane the ego currently occupies.
    """
    x = np.asarray(ego, dtype=float)
    low, high = controller_corridor(j, p.lane_of(float(x[1])), p)
    return low + g.dwe - x[1], x[1] - (high - g.dwe)


def boundary_params(py, width, length, beta: int, corridor: Tuple[float, float], g: EgoGeometry,
                    cfg: BoundaryConfig) -> SmoothBoundaryParams:
    """Smooth boundary around one neighbor.

    Away from the neighbor the boundary coincides with the corridor edge. Over the neighbor it
    keeps the ego span clear of the inflated footprint; ``alpha0`` is scaled by
    ``1/tanh(sharpness*band)`` so the bound holds across the whole exact footprint.
    """
    low, high = corridor
    band = cfg.transition_band
    alpha1 = 0.5 * length + g.front_offset + cfg.longitudinal_margin + band
    alpha2 = 0.5 * length + g.rear_offset + cfg.longitudinal_margin + band
    py = np.asarray(py, dtype=float)
    if beta == 1:
        alpha3 = low
        height = py + 0.5 * width + cfg.lateral_margin - alpha3
    else:
        alpha3 = high - 2.0 * g.dwe
        height = py - 0.5 * width - cfg.lateral_margin - high
    # a neighbor outside the corridor still needs a nonzero height of the right sign
    height = beta * np.maximum(beta * height, 1e-3)
    alpha0 = height / np.tanh(cfg.sharpness * band)
    if alpha0.ndim == 0:
        alpha0 = float(alpha0)
    return SmoothBoundaryParams(alpha0=alpha0, alpha1=alpha1, alpha2=alpha2, alpha3=alpha3,
                                beta=beta, sharpness=cfg.sharpness)


def _nearest_leader(ego_px: float, lane: int, vehicles: Sequence[TrafficVehicleState],
                    limit: Optional[float] = None) -> Optional[int]:
    ahead = [(v.px, i) for i, v in enumerate(vehicles)
             if v.lane == lane and v.px > ego_px and (limit is None or v.px - ego_px <= limit)]
    return min(ahead)[1] if ahead else None


def build_constraint_set(j: str, ego, vehicles: Sequence[TrafficVehicleState], safety: SafetyParams,
                         boundary: Optional[BoundaryConfig] = None) -> ConstraintSet:
    """Select the neighbors that constrain controller ``j``.

    ``nc`` keeps distance to the nearest leader in the ego lane. ``lc``/``rc`` bound the ego
    laterally against every target-lane vehicle inside the longitudinal window and against the
    nearest ego-lane leader inside the window. A target lane below the ego lane yields lower
    bounds (``beta=+1``) from its vehicles, the ego-lane leader then gives an upper bound.

    :param j: controller tag
    :param ego: current ego state
    :type ego: EgoState
    :param vehicles: snapshot of all surrounding vehicles
    :rtype: ConstraintSet
    """
    check_tag(j)
    safety.check_lanes(vehicles)
    boundary = boundary if boundary is not None else BoundaryConfig()
    x = np.asarray(ego, dtype=float)
    ego_px = float(x[0])
    lane = safety.lane_of(float(x[1]))
    target = target_lane(j, lane, safety)
    if j == NC or target == lane:
        leader = _nearest_leader(ego_px, lane, vehicles)
        entries = () if leader is None else (ConstrainedVehicle(leader, 1, LANE_KEEP),)
        return ConstraintSet(j, lane, target, entries)

    target_beta = 1 if target < lane else -1
    entries = [ConstrainedVehicle(i, target_beta) for i, v in enumerate(vehicles)
               if v.lane == target and -boundary.window_behind <= v.px - ego_px <= boundary.window_ahead]
    leader = _nearest_leader(ego_px, lane, vehicles, boundary.window_ahead)
    if leader is not None:
        entries.append(ConstrainedVehicle(leader, -target_beta))
    logger.debug("Controller %s constrained by vehicles %s", j, [entry.index for entry in entries])
    return ConstraintSet(j, lane, target, tuple(entries))
