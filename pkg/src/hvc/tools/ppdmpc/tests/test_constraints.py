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

from hvc.tools.ppdmpc import constraints as cs
from hvc.tools.ppdmpc.models import EgoGeometry, EgoState, InvalidArgumentError, TrafficVehicleState


@pytest.fixture
def geometry():
    return EgoGeometry()


@pytest.fixture
def safety():
    return cs.SafetyParams()


def _sweep(rng, n, px_range, py_range):
    X = np.zeros((n, 5))
    X[:, 0] = rng.uniform(*px_range, size=n)
    X[:, 1] = rng.uniform(*py_range, size=n)
    X[:, 2] = 8.0
    return X


@pytest.mark.parametrize("px,s,expected", [
    (0.0, 0.0, -29.0),
    (29.0, 0.0, 0.0),
    (29.0, 1.0, -1.0),
])
def test_lane_keep_residual(geometry, px, s, expected):
    safety = cs.SafetyParams(ds=2.0, Ts=1.5)
    lead = TrafficVehicleState(50.0, 0.0, 10.0)
    residual = cs.lane_keep_residual(EgoState(px=px, vx=10.0), lead, safety, geometry, s)
    assert residual == pytest.approx(expected, abs=1e-12)


def test_smooth_boundary_limits():
    p = cs.SmoothBoundaryParams(alpha0=2.0, alpha1=50.0, alpha2=50.0, alpha3=1.0, beta=1, sharpness=0.5)
    vehicle = TrafficVehicleState(0.0, 0.0, 0.0)
    assert cs.smooth_boundary(EgoState(px=500.0), vehicle, p) == pytest.approx(1.0, abs=1e-9)
    assert cs.smooth_boundary(EgoState(px=-500.0), vehicle, p) == pytest.approx(1.0, abs=1e-9)
    assert cs.smooth_boundary(EgoState(px=0.0), vehicle, p) == pytest.approx(3.0, abs=1e-9)


def test_smooth_boundary_gradient_matches_finite_differences():
    p = cs.SmoothBoundaryParams(alpha0=-2.5, alpha1=9.0, alpha2=14.0, alpha3=4.0, beta=-1, sharpness=0.7)
    vehicle = np.array([3.0, 7.0, 8.0, 0.0])
    h = 1e-6
    for px in np.linspace(-30.0, 30.0, 61):
        x = np.array([px, 3.5, 8.0, 0.0, 0.0])
        e = np.array([h, 0.0, 0.0, 0.0, 0.0])
        fd = (cs.smooth_boundary(x + e, vehicle, p) - cs.smooth_boundary(x - e, vehicle, p)) / (2 * h)
        assert cs.smooth_boundary_gradient(x, vehicle, p) == pytest.approx(fd, rel=1e-5, abs=1e-8)


@pytest.mark.parametrize("beta,alphas", [(1, [0.5, 1.0, 2.0, 4.0]), (-1, [-4.0, -2.0, -1.0, -0.25])])
def test_smooth_boundary_monotone_in_height(beta, alphas):
    vehicle = np.array([0.0, 0.0, 8.0, 0.0])
    egos = np.zeros((41, 5))
    egos[:, 0] = np.linspace(-60.0, 60.0, 41)
    values = [cs.smooth_boundary(egos, vehicle, cs.SmoothBoundaryParams(a, 12.0, 6.0, 1.75, beta)) for a in alphas]
    for lower, higher in zip(values, values[1:]):
        assert np.all(higher >= lower)
    # strictly higher wherever the plateau is present
    assert np.all(values[-1][np.abs(egos[:, 0] + 3.0) < 9.0] > values[0][np.abs(egos[:, 0] + 3.0) < 9.0])


def test_smooth_boundary_monotone_in_offset():
    vehicle = np.array([5.0, 0.0, 8.0, 0.0])
    egos = np.zeros((41, 5))
    egos[:, 0] = np.linspace(-60.0, 60.0, 41)
    offsets = [-1.75, 0.0, 0.5, 3.5]
    values = [cs.smooth_boundary(egos, vehicle, cs.SmoothBoundaryParams(2.0, 12.0, 6.0, a3)) for a3 in offsets]
    for (a, lower), (b, higher) in zip(zip(offsets, values), zip(offsets[1:], values[1:])):
        assert np.allclose(higher - lower, b - a, rtol=0, atol=1e-12)


def test_smooth_boundary_rejects_inconsistent_sign():
    with pytest.raises(InvalidArgumentError):
        cs.SmoothBoundaryParams(alpha0=-1.0, alpha1=1.0, alpha2=1.0, alpha3=0.0, beta=1)
    with pytest.raises(InvalidArgumentError):
        cs.SmoothBoundaryParams(alpha0=1.0, alpha1=1.0, alpha2=1.0, alpha3=0.0, beta=0)


def test_lane_change_residual_signs(geometry):
    p = cs.SmoothBoundaryParams(alpha0=3.0, alpha1=10.0, alpha2=10.0, alpha3=-1.75, beta=1)
    vehicle = TrafficVehicleState(0.0, 0.0, 8.0)
    ego = EgoState(px=200.0, py=3.5, vx=8.0)
    assert cs.lane_change_residual(ego, vehicle, p, geometry) < 0
    boundary = cs.smooth_boundary(EgoState(px=0.0), vehicle, p)
    on_edge = EgoState(px=0.0, py=boundary + geometry.dwe, vx=8.0)
    assert cs.lane_change_residual(on_edge, vehicle, p, geometry) == pytest.approx(0.0, abs=1e-12)
    assert cs.lane_change_residual(on_edge, vehicle, p, geometry, s=0.5) == pytest.approx(-0.5, abs=1e-12)


@pytest.mark.parametrize("tag,obstacle_lane,beta", [(cs.RC, 0, 1), (cs.LC, 2, -1)])
def test_boundary_covers_exact_footprint(geometry, safety, tag, obstacle_lane, beta):
    cfg = cs.BoundaryConfig()
    corridor = cs.controller_corridor(tag, 1, safety)
    vehicle = TrafficVehicleState(0.0, safety.lane_centers[obstacle_lane], 8.0, lane=obstacle_lane)
    p = cs.boundary_params(vehicle.py, vehicle.width, vehicle.length, beta, corridor, geometry, cfg)
    assert p.beta == beta
    # ego body overlapping the vehicle footprint in both directions
    px_range = (-0.5 * vehicle.length - geometry.front_offset, 0.5 * vehicle.length + geometry.rear_offset)
    py_range = (vehicle.py - 0.5 * vehicle.width - geometry.dwe, vehicle.py + 0.5 * vehicle.width + geometry.dwe)
    X = _sweep(np.random.default_rng(3), 10_000, px_range, py_range)
    residual = cs.lane_change_residual(X, vehicle, p, geometry)
    assert residual.shape == (10_000,)
    assert np.all(residual > 0)


def test_boundary_follows_corridor_away_from_vehicle(geometry, safety):
    corridor = cs.controller_corridor(cs.RC, 1, safety)
    vehicle = TrafficVehicleState(0.0, 0.0, 8.0)
    p = cs.boundary_params(vehicle.py, vehicle.width, vehicle.length, 1, corridor, geometry, cs.BoundaryConfig())
    assert cs.smooth_boundary(EgoState(px=300.0), vehicle, p) == pytest.approx(corridor[0], abs=1e-9)


def test_lane_limit_residuals():
    geometry = EgoGeometry(dwe=1.25)
    safety = cs.SafetyParams()
    low, high = cs.lane_limit_residuals(EgoState(py=3.5), safety, geometry, cs.NC)
    assert low < 0 and high < 0
    low, high = cs.lane_limit_residuals(EgoState(py=3.0), safety, geometry, cs.NC)
    assert low == pytest.approx(0.0, abs=1e-12)
    assert high < 0


@pytest.mark.parametrize("tag,lane,expected", [
    (cs.NC, 1, 1), (cs.LC, 1, 2), (cs.RC, 1, 0), (cs.RC, 0, 0), (cs.LC, 2, 2),
])
def test_target_lane(safety, tag, lane, expected):
    assert cs.target_lane(tag, lane, safety) == expected


def test_controller_corridor(safety):
    assert cs.controller_corridor(cs.NC, 1, safety) == pytest.approx((1.75, 5.25))
    assert cs.controller_corridor(cs.RC, 1, safety) == pytest.approx((-1.75, 5.25))
    assert cs.controller_corridor(cs.LC, 1, safety) == pytest.approx((1.75, 8.75))


def test_unknown_tag(safety):
    with pytest.raises(InvalidArgumentError):
        cs.target_lane("xx", 1, safety)


def test_constraint_set_without_vehicles(safety):
    for tag in cs.CONTROLLER_TAGS:
        assert len(cs.build_constraint_set(tag, EgoState(py=3.5, vx=8.0), [], safety)) == 0


def test_constraint_set_single_leader(safety):
    vehicles = [TrafficVehicleState(40.0, 3.5, 8.0, lane=1)]
    constraint_set = cs.build_constraint_set(cs.NC, EgoState(py=3.5, vx=8.0), vehicles, safety)
    assert constraint_set.indices == (0,)
    assert constraint_set.entries[0].kind == cs.LANE_KEEP


def test_constraint_set_dense_block(safety):
    vehicles = [TrafficVehicleState(45.0, 3.5, 8.0, lane=1),
                TrafficVehicleState(8.0, 0.0, 8.0, lane=0),
                TrafficVehicleState(-4.0, 0.0, 8.0, lane=0),
                TrafficVehicleState(-15.0, 0.0, 8.0, lane=0),
                TrafficVehicleState(-90.0, 0.0, 8.0, lane=0)]
    constraint_set = cs.build_constraint_set(cs.RC, EgoState(py=3.5, vx=8.0), vehicles, safety)
    betas = {entry.index: entry.beta for entry in constraint_set.entries}
    assert betas == {1: 1, 2: 1, 3: 1, 0: -1}
    assert (constraint_set.ego_lane, constraint_set.target_lane) == (1, 0)


def test_constraint_set_falls_back_to_lane_keep_at_road_edge(safety):
    vehicles = [TrafficVehicleState(30.0, 7.0, 8.0, lane=2)]
    constraint_set = cs.build_constraint_set(cs.LC, EgoState(py=7.0, vx=8.0), vehicles, safety)
    assert constraint_set.target_lane == 2
    assert [entry.kind for entry in constraint_set.entries] == [cs.LANE_KEEP]


def test_safety_params_sorts_lanes():
    safety = cs.SafetyParams(lane_centers=(7.0, 0.0, 3.5))
    assert safety.lane_centers == (0.0, 3.5, 7.0)
    assert safety.lane_of(3.1) == 1
    with pytest.raises(InvalidArgumentError):
        safety.lane_edges(3)


def test_vehicle_on_missing_lane_rejected(safety):
    vehicles = [TrafficVehicleState(30.0, 3.5, 8.0, lane=1), TrafficVehicleState(30.0, 10.5, 8.0, lane=3)]
    with pytest.raises(InvalidArgumentError):
        safety.check_lanes(vehicles)
    with pytest.raises(InvalidArgumentError):
        cs.build_constraint_set(cs.NC, EgoState(py=3.5, vx=8.0), vehicles, safety)
    safety.check_lanes(vehicles[:1])
