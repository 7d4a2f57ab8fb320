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
import logging
import os
import warnings
from pathlib import Path
from typing import Callable, Iterable, List, Tuple

from sqlalchemy import Boolean, Column, Float, Identity, Index, Integer, String, create_engine, select
from sqlalchemy.ext.hybrid import hybrid_property
from sqlalchemy.orm import declarative_base, sessionmaker
from sqlalchemy.sql.selectable import Select
from tqdm.auto import tqdm

from .planner import CAUSE_CONVERGED, CAUSE_SINGLE_SHOT
from .sim import EPISODE_FORMAT_VERSION, EpisodeLog, read_episode_log

logger = logging.getLogger(__name__)

__all__ = ["EpisodeMetadataCache", "EpisodeMetadata"]

__Base = declarative_base()


class EpisodeMetadata(__Base):
    """Summary of one stored episode log. Instances double as rows of the ``episode_metadata``
    table and as the result type of cache queries.
    """
    __tablename__ = "episode_metadata"

    id = Column(Integer, Identity(start=1), primary_key=True)
    directory_path = Column(String, nullable=False, index=True)
    filename = Column(String, nullable=False)
    format_version = Column(Integer)
    controller = Column(String, index=True)
    sigma_a = Column(Float, index=True)
    scenario_seed = Column(Integer, index=True)
    outcome = Column(String, index=True)
    diagnostic = Column(String, nullable=True)
    completion_time = Column(Float, nullable=True)
    total_cost = Column(Float)
    steps = Column(Integer)
    dmpc_calls = Column(Integer)
    converged_calls = Column(Integer)
    iterations_total = Column(Integer)
    single_shot = Column(Boolean)

    opening_error = Column(String, nullable=True)

    @hybrid_property
    def filepath(self):
        return self.directory_path + self.filename

    @staticmethod
    def from_log(log: EpisodeLog, filepath: str) -> "EpisodeMetadata":
        """Summarize an episode log stored at ``filepath``."""
        directory_path, filename = EpisodeMetadataCache.split_filepath(filepath)
        calls = log.dmpc_calls()
        iterated = [call for call in calls if call["cause"] != CAUSE_SINGLE_SHOT]
        return EpisodeMetadata(directory_path=directory_path, filename=filename,
                               format_version=EPISODE_FORMAT_VERSION, controller=log.controller,
                               sigma_a=log.sigma_a, scenario_seed=log.scenario_seed, outcome=log.outcome,
                               diagnostic=log.diagnostic, completion_time=log.completion_time,
                               total_cost=log.total_cost, steps=len(log.steps), dmpc_calls=len(iterated),
                               converged_calls=sum(call["cause"] == CAUSE_CONVERGED for call in iterated),
                               iterations_total=sum(call["iterations"] for call in iterated),
                               single_shot=bool(calls) and not iterated)


Index("controller_sigma_index", EpisodeMetadata.controller, EpisodeMetadata.sigma_a)
Index("controller_sigma_seed_index", EpisodeMetadata.controller, EpisodeMetadata.sigma_a,
      EpisodeMetadata.scenario_seed)


class EpisodeMetadataCache:
    """Index of episode log files. Querying the cache is a lot faster than opening every log of a
    large batch, and the full logs are only read for the matching files.
    """
    EpisodeMetadata = EpisodeMetadata

    def __init__(self, db_url: str = "sqlite:///:memory:", log_reader: Callable[[str], EpisodeLog] = read_episode_log):
        self.engine = create_engine(db_url)
        EpisodeMetadata.metadata.create_all(self.engine)
        self.Session = sessionmaker(bind=self.engine)
        self.log_reader = log_reader

    def synchronize_directory(self, *paths, sync_subdirectories: bool = True, pattern: str = "*.jsonl",
                              verbose: int = 1, delete_stale_entries: bool = False):
        """Synchronize the episode logs in the given directories with the cache.

        :param paths: directories holding episode logs
        :param sync_subdirectories: also search all subdirectories, defaults to True
        :param pattern: glob pattern of episode log files
        :param verbose: verbosity level. 0 = no feedback, 1 = progress bar
        :param delete_stale_entries: remove entries whose file no longer exists
        """
        for path in paths:
            candidates = Path(path).rglob(pattern) if sync_subdirectories else Path(path).glob(pattern)
            files = (str(file) for file in candidates if os.path.isfile(file))
            unsynchronized_files, synchronized_missing_files = self.get_non_synchronized_files(files)
            if delete_stale_entries:
                self.remove_files_from_cache(synchronized_missing_files, verbose=verbose)
            self.add_files_to_cache(sorted(unsynchronized_files), verbose=verbose)

    def get_non_synchronized_files(self, files: Iterable[str]) -> Tuple[set, set]:
        """Difference between a set of files and the files known to the cache.

        :return: the files that are not synchronized and the entries whose file is not part of ``files``
        """
        file_set = set(files)
        with self.Session() as session:
            synchronized_files = set(entry.filepath for entry in session.query(self.EpisodeMetadata).all())
        return file_set.difference(synchronized_files), synchronized_files.difference(file_set)

    def add_files_to_cache(self, files, verbose: int = 0, batch_size: int = 1000):
        """Read episode logs and add their summaries to the cache.

        Files that cannot be read are stored with their ``opening_error`` and reported with a warning.
        """
        with self.Session() as session:
            files = tqdm(files, desc="Adding episodes") if verbose > 0 and len(files) > 0 else files
            for i, file in enumerate(files):
                try:
                    session.add(EpisodeMetadata.from_log(self.log_reader(file), file))
                except Exception as e:
                    directory_path, filename = self.split_filepath(file)
                    session.add(EpisodeMetadata(directory_path=directory_path, filename=filename,
                                                opening_error=str(e)))
                    warnings.warn(f"Episode log could not be read: {file}", UserWarning)
                if i % batch_size == 0:
                    session.commit()
            session.commit()

    def remove_files_from_cache(self, files, verbose: int = 0):
        with self.Session() as session:
            files = tqdm(files, desc="Removing episode entries") if verbose > 0 and len(files) > 0 else files
            for file in files:
                try:
                    directory_path, filename = self.split_filepath(file)
                    entry = session.query(EpisodeMetadata).filter_by(directory_path=directory_path,
                                                                     filename=filename).one_or_none()
                    if entry is None:
                        continue
                    session.delete(entry)
                except Exception:
                    session.rollback()
                    raise
            session.commit()

    def get_matching_metadata(self, query: Select = None) -> List[EpisodeMetadata]:
        """Query the cache for episode summaries.

        :param query: a sqlalchemy select statement on :class:`EpisodeMetadata`; all readable episodes when omitted
        :type query: Select
        """
        if query is None:
            query = select(EpisodeMetadata).filter(EpisodeMetadata.opening_error.is_(None))
        with self.Session() as session:
            return session.scalars(query).all()

    def get_matching_files(self, query: Select = None) -> List[str]:
        """Paths of the episode logs matching the query.

        .. code-block:: python
                :linenos:

                EM = EpisodeMetadataCache.EpisodeMetadata
                cache.get_matching_files(
                    select(EM).filter(EM.controller == "pp-dmpc", EM.sigma_a == 0.1).order_by(EM.scenario_seed)
                )
                # all PP-DMPC episodes at the lowest noise level, ordered by scenario seed

        :rtype: list[str]
        """
        return [m.filepath for m in self.get_matching_metadata(query)]

    def get_matching_logs(self, query: Select = None) -> List[EpisodeLog]:
        """Calls get_matching_files and reads the full logs; unreadable files are skipped with a warning."""
        logs = []
        for file in self.get_matching_files(query):
            try:
                logs.append(self.log_reader(file))
            except Exception:
                warnings.warn(f"An error occurred while reading an episode log, this file will be skipped: {file}")
        return logs

    @staticmethod
    def split_filepath(filepath: str) -> Tuple[str, str]:
        """Splits a filepath to folder and filename and returns them as a tuple

        :return: A tuple containing (directory_path, filename) as strings
        :rtype: tuple(str)
        """
        filepath = str(filepath)
        separator = max(filepath.rfind("/"), filepath.rfind("\\"))
        return filepath[:separator + 1], filepath[separator + 1:]
