import csv
import json
import logging
import os
import threading
from typing import Any, Dict, Iterable, List, Sequence

from engine.simulator import RunRecord

# Column set of the per-seed CSVs; fixed and documented in docs/api_documentation.md
RUN_COLUMNS = ('seed', 't', 'episode', 'cost', 'regret', 'cum_regret',
               'lambda_min', 'theta_err', 'ula_steps', 'attempts')
EPISODE_COLUMNS = ('seed', 'episode', 't_start', 'length', 'lambda_min', 'lambda_max',
                   'theta_err', 'attempts', 'ula_steps', 'naive_steps')


class OutputError(OSError):
    """Writing an output file failed"""


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class DataManager:
    """Manages result files of an experiment batch

    Layout under the output directory:
        runs/seed_<seed>.csv            per-step rows
        runs/seed_<seed>_episodes.csv   per-episode rows
        aggregate.csv, aggregate_episodes.csv, failures.json, summary.json
    """

    def __init__(self, output_dir: str = 'results'):
        """Initialize the data manager

        Args:
            output_dir (str): Directory for result files
        """
        self.output_dir = output_dir
        self.runs_dir = os.path.join(output_dir, 'runs')
        self.lock = threading.Lock()  # Writers may be called from worker callbacks
        self.logger = logging.getLogger('DataManager')

        try:
            os.makedirs(self.runs_dir, exist_ok=True)
        except OSError as e:
            self.logger.error(f"Error creating output directory {output_dir}: {str(e)}")
            raise OutputError(f"Cannot create output directory {output_dir}: {e}")

    def run_path(self, seed: int) -> str:
        return os.path.join(self.runs_dir, f"seed_{seed}.csv")

    def episodes_path(self, seed: int) -> str:
        return os.path.join(self.runs_dir, f"seed_{seed}_episodes.csv")

    def clear_runs(self) -> int:
        """Remove per-seed CSVs left by an earlier batch in the same directory

        Returns:
            int: Number of files removed
        """
        removed = 0
        try:
            with self.lock:
                for name in sorted(os.listdir(self.runs_dir)):
                    if name.startswith('seed_') and name.endswith('.csv'):
                        os.remove(os.path.join(self.runs_dir, name))
                        removed += 1
        except OSError as e:
            self.logger.error(f"Error clearing {self.runs_dir}: {str(e)}")
            raise OutputError(f"Cannot clear {self.runs_dir}: {e}")
        if removed:
            self.logger.info(f"Removed {removed} stale run file(s) from {self.runs_dir}")
        return removed

    def _write_csv(self, path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
        try:
            with self.lock:
                with open(path, 'w', newline='') as f:
                    writer = csv.writer(f, lineterminator='\n')
                    writer.writerow(header)
                    for row in rows:
                        writer.writerow([_fmt(v) for v in row])
            return path
        except OSError as e:
            self.logger.error(f"Error writing {path}: {str(e)}")
            raise OutputError(f"Cannot write {path}: {e}")

    def save_run(self, record: RunRecord) -> List[str]:
        """Write the per-step and per-episode CSVs of one run

        Args:
            record (RunRecord): Completed run

        Returns:
            List[str]: Paths written
        """
        seed = record.seed
        steps = ((seed, r.t, r.episode, r.cost, r.regret, r.cum_regret, r.lambda_min,
                  r.theta_err, r.ula_steps, r.attempts) for r in record.rows)
        episodes = ((seed, e.k, e.t_start, e.length, e.lambda_min, e.lambda_max, e.theta_err,
                     e.attempts, e.ula_steps, e.naive_steps) for e in record.episodes)
        paths = [self._write_csv(self.run_path(seed), RUN_COLUMNS, steps),
                 self._write_csv(self.episodes_path(seed), EPISODE_COLUMNS, episodes)]
        self.logger.info(f"Saved {len(record.rows)} rows for seed {seed} to {paths[0]}")
        return paths

    def save_table(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
        return self._write_csv(os.path.join(self.output_dir, name), header, rows)

    def save_json(self, name: str, payload: Dict[str, Any]) -> str:
        path = os.path.join(self.output_dir, name)
        try:
            with self.lock:
                with open(path, 'w') as f:
                    json.dump(payload, f, indent=2, sort_keys=True)
            return path
        except (OSError, TypeError) as e:
            self.logger.error(f"Error saving {path}: {str(e)}")
            raise OutputError(f"Cannot write {path}: {e}")

    def load_table(self, path: str) -> List[Dict[str, str]]:
        """Read a CSV written by this manager as a list of string-valued rows"""
        try:
            with open(path, 'r', newline='') as f:
                return list(csv.DictReader(f))
        except OSError as e:
            self.logger.error(f"Error loading {path}: {str(e)}")
            raise OutputError(f"Cannot read {path}: {e}")
