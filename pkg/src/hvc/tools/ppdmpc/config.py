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
"""The resolved configuration tree and its JSON file format.

A configuration file is one JSON object whose keys are the section names below plus an optional
``run`` section read by the command line interface. Missing keys keep their defaults.
"""
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .constraints import BoundaryConfig, SafetyParams
from .models import EgoGeometry, HorizonConfig, InvalidArgumentError, TrafficParams
from .nlp_solver import SolverConfig
from .ocp import BoxBounds, ObjectiveWeights
from .planner import DecisionConfig, DmpcConfig
from .predictor import PredictorConfig
from .sim import ScenarioConfig

logger = logging.getLogger(__name__)

__all__ = ["ConfigurationError", "SimulationConfig", "load_config", "SECTIONS"]

SECTIONS = {
    "horizon": HorizonConfig,
    "geometry": EgoGeometry,
    "traffic": TrafficParams,
    "safety": SafetyParams,
    "boundary": BoundaryConfig,
    "bounds": BoxBounds,
    "weights": ObjectiveWeights,
    "solver": SolverConfig,
    "predictor": PredictorConfig,
    "dmpc": DmpcConfig,
    "decision": DecisionConfig,
    "scenario": ScenarioConfig,
}

# derived at run time, never read from a file
_INTERNAL_FIELDS = {"terminal"}


class ConfigurationError(InvalidArgumentError):
    pass


def _section_fields(cls) -> Dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in _INTERNAL_FIELDS}


def _build_section(name: str, values: Mapping[str, Any]):
    cls = SECTIONS[name]
    if not isinstance(values, Mapping):
        raise ConfigurationError(f"Section {name!r} must be an object, got {type(values).__name__}")
    known = _section_fields(cls)
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigurationError(f"Unknown keys in section {name!r}: {', '.join(unknown)}")
    kwargs = {key: tuple(value) if isinstance(value, list) else value for key, value in values.items()}
    try:
        return cls(**kwargs)
    except (InvalidArgumentError, TypeError, ValueError) as error:
        raise ConfigurationError(f"Invalid section {name!r}: {error}") from error


@dataclass(frozen=True)
class SimulationConfig:
    """All module configurations of one experiment."""
    horizon: HorizonConfig = field(default_factory=HorizonConfig)
    geometry: EgoGeometry = field(default_factory=EgoGeometry)
    traffic: TrafficParams = field(default_factory=TrafficParams)
    safety: SafetyParams = field(default_factory=SafetyParams)
    boundary: BoundaryConfig = field(default_factory=BoundaryConfig)
    bounds: BoxBounds = field(default_factory=BoxBounds)
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    solver: SolverConfig = field(default_factory=SolverConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    dmpc: DmpcConfig = field(default_factory=DmpcConfig)
    decision: DecisionConfig = field(default_factory=DecisionConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)

    def __post_init__(self):
        if not 0 <= self.decision.exit_lane < self.safety.n_lanes:
            raise ConfigurationError(f"exit_lane {self.decision.exit_lane} is not a lane of the road")
        if not self.scenario.ego_lane < self.safety.n_lanes:
            raise ConfigurationError(f"ego_lane {self.scenario.ego_lane} is not a lane of the road")

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]] = None) -> "SimulationConfig":
        """Build the configuration from nested mappings.

        ``decision.d_exit`` follows ``scenario.exit_position`` unless it is given explicitly.

        :raises ConfigurationError: on unknown sections or keys and on invalid values
        """
        data = dict(data or {})
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigurationError(f"Unknown configuration sections: {', '.join(unknown)}")
        sections = {name: _build_section(name, data.get(name, {})) for name in SECTIONS}
        decision_values = data.get("decision", {})
        if "d_exit" not in decision_values:
            d_exit = sections["scenario"].exit_position
            d_max = decision_values.get("d_max")
            sections["decision"] = _build_section("decision", {**decision_values, "d_exit": d_exit,
                                                               "d_max": d_max if d_max is not None else 2.0 * d_exit})
        return cls(**sections)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        result = {}
        for name in SECTIONS:
            section = getattr(self, name)
            result[name] = {key: _plain(getattr(section, key)) for key in _section_fields(type(section))}
        return result


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(item) for item in value]
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    return value


def load_config(path) -> Tuple[SimulationConfig, Dict[str, Any]]:
    """Read a JSON configuration file.

    :return: the simulation configuration and the raw ``run`` section
    :raises ConfigurationError: if the file cannot be parsed or holds invalid values
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as error:
        raise ConfigurationError(f"Cannot read configuration {path}: {error}") from error
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must hold a JSON object")
    run = data.pop("run", {})
    if not isinstance(run, dict):
        raise ConfigurationError("The run section must be an object")
    logger.debug("Loaded configuration from %s", path)
    return SimulationConfig.from_dict(data), run
