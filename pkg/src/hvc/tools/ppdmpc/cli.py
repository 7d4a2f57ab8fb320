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
"""Batch experiment driver.

``ppdmpc run`` executes the controller x noise x scenario matrix with matched scenario seeds
across controllers and noise levels, ``ppdmpc summarize`` recomputes metric tables and plot data
from the stored episode logs.
"""
import argparse
import json
import logging
import logging.handlers
import multiprocessing
import sys
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import pandas as pd
from sqlalchemy import select
from tqdm.auto import tqdm

from .config import ConfigurationError, SimulationConfig, load_config
from .constraints import CONTROLLER_TAGS
from .episode_cache import EpisodeMetadata, EpisodeMetadataCache
from .models import InvalidArgumentError
from .sim import (CONTROLLER_KINDS, EpisodeLog, ScenarioSamplingError, aggregate_metrics, metrics_frame,
                  normalize_costs, run_episode, sample_scenario, write_episode_log)

logger = logging.getLogger(__name__)

__all__ = ["RunManifest", "run_batch", "summarize", "emit_plot_data", "create_run_logger", "main"]

PACKAGE_LOGGER = "hvc.tools.ppdmpc"
LOG_FORMAT = '[%(asctime)s]:  %(levelname)s - %(message)s'
LOG_FILE_LIMIT = 10 * 1024 * 1024

EPISODES_DIR = "episodes"
CACHE_FILE = "episodes.sqlite"
RESOLVED_CONFIG = "resolved_config.json"
METRICS_FILE = "metrics.csv"
LOSS_FILE = "loss_distribution.csv"
TRAJECTORY_FILE = "trajectories.csv"
RUN_LOG = "run.log"

LOSS_COLUMNS = ["controller", "sigma_a", "scenario_seed", "kappa", "tag", "p", "loss", "gradient"]
TRAJECTORY_COLUMNS = ["controller", "sigma_a", "scenario_seed", "kappa", "t", "px", "py", "vx", "theta1",
                      "theta2", "decision", "delta", "av"]


@dataclass(frozen=True)
class RunManifest:
    """What to run and where to put it."""
    controllers: Tuple[str, ...] = CONTROLLER_KINDS
    sigmas: Tuple[float, ...] = (0.1, 0.5, 1.0)
    scenarios: int = 20
    base_seed: int = 0
    config_path: Optional[str] = None
    output_dir: str = "ppdmpc-run"
    workers: int = 1
    verbosity: int = 1
    overwrite: bool = False

    def __post_init__(self):
        object.__setattr__(self, "controllers", tuple(self.controllers))
        object.__setattr__(self, "sigmas", tuple(float(sigma) for sigma in self.sigmas))
        unknown = [c for c in self.controllers if c not in CONTROLLER_KINDS]
        if unknown or not self.controllers:
            raise ConfigurationError(f"Controllers must be taken from {CONTROLLER_KINDS}, got {self.controllers}")
        if not self.sigmas or any(sigma < 0 for sigma in self.sigmas):
            raise ConfigurationError(f"Noise levels must be nonnegative, got {self.sigmas}")
        if self.scenarios < 1:
            raise ConfigurationError("At least one scenario is required")
        if self.base_seed < 0 or self.workers < 1 or self.verbosity < 0:
            raise ConfigurationError("base_seed and verbosity must be nonnegative, workers positive")

    @classmethod
    def from_sources(cls, run_section: Mapping[str, Any], overrides: Mapping[str, Any]) -> "RunManifest":
        """Merge the ``run`` section of a configuration file with command line overrides (flags win)."""
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(run_section) - known)
        if unknown:
            raise ConfigurationError(f"Unknown keys in section 'run': {', '.join(unknown)}")
        values = dict(run_section)
        values.update({key: value for key, value in overrides.items() if value is not None})
        try:
            return cls(**values)
        except TypeError as error:
            raise ConfigurationError(f"Invalid run section: {error}") from error

    def cells(self) -> List[Tuple[str, float, int]]:
        """Every (controller, sigma, scenario seed), seeds shared across controllers and noise levels."""
        seeds = range(self.base_seed, self.base_seed + self.scenarios)
        return [(controller, sigma, seed) for sigma in self.sigmas for seed in seeds for controller in self.controllers]


def create_run_logger(output_dir, verbosity: int = 1) -> logging.Logger:
    """Install the handlers of a run on the package logger.

    A rotating ``run.log`` in ``output_dir`` records everything, stderr receives errors only at
    verbosity 0, progress at 1 and debug output from 2 on.
    """
    logger_obj = logging.getLogger(PACKAGE_LOGGER)
    for handler in list(logger_obj.handlers):
        logger_obj.removeHandler(handler)
        handler.close()
    logger_obj.setLevel(logging.DEBUG)
    rfh = logging.handlers.RotatingFileHandler(str(Path(output_dir) / RUN_LOG), maxBytes=LOG_FILE_LIMIT, backupCount=1)
    rfh.setLevel(logging.DEBUG)
    ch_stderr = logging.StreamHandler(sys.stderr)
    ch_stderr.setLevel({0: logging.ERROR, 1: logging.INFO}.get(verbosity, logging.DEBUG))
    formatter = logging.Formatter(LOG_FORMAT)
    rfh.setFormatter(formatter)
    ch_stderr.setFormatter(formatter)
    logger_obj.addHandler(rfh)
    logger_obj.addHandler(ch_stderr)
    return logger_obj


def _worker_init():
    # only the coordinating process writes the run log
    logger_obj = logging.getLogger(PACKAGE_LOGGER)
    for handler in list(logger_obj.handlers):
        logger_obj.removeHandler(handler)
    logger_obj.addHandler(logging.NullHandler())


def episode_filename(controller: str, sigma: float, seed: int) -> str:
    return f"{controller}_s{sigma:g}_{seed:04d}.jsonl"


def _run_cell(task: Tuple[str, float, int, SimulationConfig]) -> EpisodeLog:
    controller, sigma, seed, cfg = task
    try:
        world = sample_scenario(seed, cfg.scenario, cfg.safety, cfg.traffic, cfg.geometry)
    except ScenarioSamplingError as error:
        warnings.warn(f"Scenario {seed} skipped: {error}")
        return EpisodeLog.failed(controller, sigma, seed, "sampling-failure")
    try:
        return run_episode(world, controller, sigma, cfg, seed)
    except Exception as error:
        logger.exception("Episode %s sigma=%g seed=%d failed", controller, sigma, seed)
        return EpisodeLog.failed(controller, sigma, seed, f"error: {type(error).__name__}: {error}")


def _prepare_output(output_dir: Path, overwrite: bool):
    if output_dir.exists() and any(output_dir.iterdir()):
        if not overwrite:
            raise ConfigurationError(f"Output directory {output_dir} is not empty, use --overwrite to replace it")
        for name in (RESOLVED_CONFIG, METRICS_FILE, LOSS_FILE, TRAJECTORY_FILE, CACHE_FILE):
            (output_dir / name).unlink(missing_ok=True)
        for path in output_dir.glob(RUN_LOG + "*"):
            path.unlink()
        for path in (output_dir / EPISODES_DIR).glob("*.jsonl"):
            path.unlink()
    (output_dir / EPISODES_DIR).mkdir(parents=True, exist_ok=True)


def run_batch(manifest: RunManifest, cfg: Optional[SimulationConfig] = None) -> int:
    """Run the full matrix of a manifest and write logs, metrics and plot data.

    Failing episodes are recorded in their log and never abort the batch.

    :param manifest: the run
    :param cfg: simulation configuration, read from ``manifest.config_path`` or defaults when omitted
    :raises ConfigurationError: if the configuration or the output directory are unusable
    :return: exit status
    :rtype: int
    """
    if cfg is None:
        cfg = load_config(manifest.config_path)[0] if manifest.config_path else SimulationConfig()
    output_dir = Path(manifest.output_dir)
    _prepare_output(output_dir, manifest.overwrite)
    create_run_logger(output_dir, manifest.verbosity)
    resolved = {**cfg.to_dict(), "run": {**asdict(manifest), "controllers": list(manifest.controllers),
                                         "sigmas": list(manifest.sigmas)}}
    with open(output_dir / RESOLVED_CONFIG, "w", encoding="utf-8") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)

    tasks = [(controller, sigma, seed, cfg) for controller, sigma, seed in manifest.cells()]
    logger.info("Running %d episodes with %d worker(s) into %s", len(tasks), manifest.workers, output_dir)
    episodes_dir = output_dir / EPISODES_DIR

    def store(logs: Iterable[EpisodeLog]):
        for log in tqdm(logs, total=len(tasks), desc="Episodes", disable=manifest.verbosity == 0):
            write_episode_log(log, episodes_dir / episode_filename(log.controller, log.sigma_a, log.scenario_seed))
            logger.debug("Stored %s sigma=%g seed=%d: %s", log.controller, log.sigma_a, log.scenario_seed,
                         log.outcome)

    if manifest.workers > 1:
        with multiprocessing.Pool(manifest.workers, initializer=_worker_init) as pool:
            store(pool.imap(_run_cell, tasks))
    else:
        store(map(_run_cell, tasks))
    summarize(output_dir, manifest.verbosity)
    return 0


def _write_table(frame: pd.DataFrame, path: Path, kind: str):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# format: ppdmpc-{kind}/1\n")
        frame.to_csv(f, index=False, lineterminator="\n")


def summarize(output_dir, verbosity: int = 1) -> pd.DataFrame:
    """Recompute the metric table and plot data of a run directory from its episode logs.

    :return: the metric table written to ``metrics.csv``
    """
    output_dir = Path(output_dir)
    cache = EpisodeMetadataCache(db_url=f"sqlite:///{(output_dir / CACHE_FILE).resolve()}")
    cache.synchronize_directory(str(output_dir / EPISODES_DIR), sync_subdirectories=False,
                                verbose=1 if verbosity > 1 else 0, delete_stale_entries=True)
    with cache.Session() as session:
        keys = session.execute(select(EpisodeMetadata.controller, EpisodeMetadata.sigma_a)
                               .filter(EpisodeMetadata.opening_error.is_(None))
                               .distinct().order_by(EpisodeMetadata.controller, EpisodeMetadata.sigma_a)).all()
    cells = {}
    all_logs = []
    for controller, sigma in keys:
        logs = cache.get_matching_logs(select(EpisodeMetadata).filter(
            EpisodeMetadata.controller == controller, EpisodeMetadata.sigma_a == sigma,
            EpisodeMetadata.opening_error.is_(None)).order_by(EpisodeMetadata.scenario_seed))
        if logs:
            cells[(controller, sigma)] = aggregate_metrics(logs)
            all_logs.extend(logs)
    frame = metrics_frame(normalize_costs(cells))
    _write_table(frame, output_dir / METRICS_FILE, "metrics")
    emit_plot_data(all_logs, output_dir)
    logger.info("Summarized %d episodes in %d cells", len(all_logs), len(cells))
    return frame


def emit_plot_data(logs: Sequence[EpisodeLog], output_dir) -> Tuple[Path, Path]:
    """Write the loss distribution and the realized trajectories as delimited columns.

    The loss file holds one row per accepted iterate. ``gradient`` is the change of the loss from
    the previous accepted iterate of the same call and stays empty for the first one.

    :return: paths of the loss file and the trajectory file
    """
    output_dir = Path(output_dir)
    loss_rows = []
    trajectory_rows = []
    for log in logs:
        for step in log.steps:
            for tag in CONTROLLER_TAGS:
                call = step.controllers.get(tag)
                if call is None:
                    continue
                previous = None
                for p, value, _, _, accepted in call["trace"]:
                    if not accepted or value is None:
                        continue
                    gradient = value - previous if previous is not None else None
                    loss_rows.append((log.controller, log.sigma_a, log.scenario_seed, step.kappa, tag, p, value,
                                      gradient))
                    previous = value
            trajectory_rows.append((log.controller, log.sigma_a, log.scenario_seed, step.kappa, step.t,
                                    *step.ego, step.decision, *step.control))
    loss_path = output_dir / LOSS_FILE
    trajectory_path = output_dir / TRAJECTORY_FILE
    _write_table(pd.DataFrame(loss_rows, columns=LOSS_COLUMNS), loss_path, "loss")
    _write_table(pd.DataFrame(trajectory_rows, columns=TRAJECTORY_COLUMNS), trajectory_path, "trajectories")
    return loss_path, trajectory_path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppdmpc", description="Coupled prediction and planning lane change study")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run a controller x noise x scenario batch")
    run.add_argument("--config", dest="config_path", help="JSON configuration file")
    run.add_argument("--controllers", nargs="+", choices=CONTROLLER_KINDS, help="controllers to compare")
    run.add_argument("--sigmas", nargs="+", type=float, help="predictor noise levels (m/s^2)")
    run.add_argument("--scenarios", type=int, help="scenarios per noise level")
    run.add_argument("--seed", dest="base_seed", type=int, help="seed of the first scenario")
    run.add_argument("--output", dest="output_dir", help="output directory")
    run.add_argument("--workers", type=int, help="worker processes")
    run.add_argument("--overwrite", action="store_true", default=None, help="replace the results of a previous run")
    run.add_argument("-v", "--verbose", dest="verbosity", action="count", help="more output, repeatable")
    run.add_argument("-q", "--quiet", dest="verbosity", action="store_const", const=0, help="errors only")

    summary = commands.add_parser("summarize", help="recompute metrics and plot data of a run directory")
    summary.add_argument("output_dir", help="run directory")
    summary.add_argument("-v", "--verbose", dest="verbosity", action="count", default=1)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "summarize":
            output_dir = Path(args.output_dir)
            if not (output_dir / EPISODES_DIR).is_dir():
                raise ConfigurationError(f"{output_dir} holds no episode logs")
            create_run_logger(output_dir, args.verbosity)
            summarize(output_dir, args.verbosity)
            return 0
        overrides = {key: value for key, value in vars(args).items() if key != "command"}
        run_section: Dict[str, Any] = {}
        cfg = None
        if args.config_path:
            cfg, run_section = load_config(args.config_path)
        manifest = RunManifest.from_sources(run_section, overrides)
        return run_batch(manifest, cfg)
    except InvalidArgumentError as error:
        print(f"ppdmpc: configuration error: {error}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
