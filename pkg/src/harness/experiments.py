import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from engine.errors import TsldError
from engine.noise import NoiseModel
from engine.simulator import RunRecord, run_psrl_baseline, run_tsld
from harness.config import ExperimentConfig, ValidationError, build_noise, build_simulation
from harness.data_manager import DataManager, OutputError
from harness.utils.logger import get_event_logger

logger = logging.getLogger('Experiments')

RUNNERS = {'tsld': run_tsld, 'psrl': run_psrl_baseline}

AGGREGATE_COLUMNS = ('t', 'mean_cum_regret', 'se_cum_regret', 'normalized_regret', 'n_seeds')
AGGREGATE_EPISODE_COLUMNS = ('episode', 't_start', 'mean_lambda_min', 'median_lambda_min',
                             'mean_theta_err', 'median_theta_err', 'mean_ula_steps', 'mean_naive_steps')
ITERATION_COLUMNS = ('horizon', 'preconditioned', 'naive', 'ratio', 'n_seeds')


class BatchFailure(TsldError):
    """Every seed of a batch failed"""


class SeedResult(NamedTuple):
    seed: int
    record: Optional[RunRecord]
    error_kind: Optional[str]
    message: str


@dataclass
class AggregateReport:
    """Across-seed summary of a batch; every field is recomputable from the per-seed CSVs"""

    name: str
    algorithm: str
    seeds: List[int]
    succeeded: List[int]
    failures: Dict[int, str]
    J_star: float
    t: np.ndarray
    mean_cum_regret: np.ndarray
    se_cum_regret: np.ndarray
    normalized_regret: np.ndarray
    episode: np.ndarray
    episode_t_start: np.ndarray
    mean_lambda_min: np.ndarray
    median_lambda_min: np.ndarray
    mean_theta_err: np.ndarray
    median_theta_err: np.ndarray
    mean_ula_steps: np.ndarray
    mean_naive_steps: np.ndarray
    records: Dict[int, RunRecord] = field(default_factory=dict, repr=False, compare=False)

    @property
    def horizon(self) -> int:
        return int(self.t.size)

    @property
    def total_ula_steps(self) -> float:
        """Preconditioned ULA steps of a whole run, averaged over seeds"""
        return float(np.sum(self.mean_ula_steps))

    @property
    def total_naive_steps(self) -> float:
        return float(np.sum(self.mean_naive_steps))

    def summary(self) -> Dict[str, object]:
        final = float(self.mean_cum_regret[-1]) if self.horizon else 0.0
        return {
            'name': self.name,
            'algorithm': self.algorithm,
            'seeds': list(self.seeds),
            'succeeded': list(self.succeeded),
            'failures': {str(seed): kind for seed, kind in sorted(self.failures.items())},
            'J_star': self.J_star,
            'horizon': self.horizon,
            'final_cum_regret': final,
            'final_normalized_regret': final / math.sqrt(self.horizon) if self.horizon else 0.0,
            'episodes': int(self.episode.size),
            'total_ula_steps': self.total_ula_steps,
            'total_naive_steps': self.total_naive_steps,
        }


@dataclass(frozen=True)
class IterationCount:
    horizon: int
    preconditioned: float
    naive: float

    @property
    def ratio(self) -> float:
        return self.naive / self.preconditioned if self.preconditioned > 0 else math.inf


# Per-worker state; set once by the pool initializer so the noise reservoir is shipped once per process
_worker_cfg: Optional[ExperimentConfig] = None
_worker_noise: Optional[NoiseModel] = None


def _init_worker(cfg: ExperimentConfig, noise: NoiseModel):
    global _worker_cfg, _worker_noise
    _worker_cfg, _worker_noise = cfg, noise


def run_seed(cfg: ExperimentConfig, noise: NoiseModel, seed: int) -> SeedResult:
    """Execute one seed; failures are returned, not raised"""
    try:
        sim = build_simulation(cfg, noise)
        record = RUNNERS[cfg.algorithm](sim, np.random.default_rng(seed), seed)
        return SeedResult(seed, record, None, '')
    except (TsldError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        logger.error(f"Seed {seed} failed with {type(e).__name__}: {str(e)}")
        return SeedResult(seed, None, type(e).__name__, str(e))


def _run_in_worker(seed: int) -> SeedResult:
    return run_seed(_worker_cfg, _worker_noise, seed)


def _mean_se(stack: np.ndarray):
    mean = stack.mean(axis=0)
    if stack.shape[0] < 2:
        return mean, np.zeros_like(mean)
    return mean, stack.std(axis=0, ddof=1) / math.sqrt(stack.shape[0])


def aggregate(cfg: ExperimentConfig, results: Sequence[SeedResult]) -> AggregateReport:
    """Combine per-seed results in seed order

    Args:
        cfg (ExperimentConfig): The batch configuration
        results (Sequence[SeedResult]): One result per seed, any order

    Returns:
        AggregateReport: Means, standard errors and medians over succeeded seeds
    """
    ordered = sorted(results, key=lambda r: r.seed)
    records = {r.seed: r.record for r in ordered if r.record is not None}
    failures = {r.seed: r.error_kind for r in ordered if r.record is None}
    runs = list(records.values())

    horizon = min((run.horizon for run in runs), default=0)
    n_episodes = min((len(run.episodes) for run in runs), default=0)
    J_star = runs[0].J_star if runs else float('nan')

    if runs and horizon:
        # Same values as the cum_regret column of the per-seed CSVs
        mean, se = _mean_se(np.stack([run.cum_regret[:horizon] for run in runs]))
    else:
        mean = se = np.zeros(0)
    t = np.arange(1, mean.size + 1)

    def per_episode(attr: str) -> np.ndarray:
        return np.array([[getattr(ep, attr) for ep in run.episodes[:n_episodes]] for run in runs], dtype=float)

    def column(values: np.ndarray, reduce) -> np.ndarray:
        return reduce(values, axis=0) if n_episodes else np.zeros(0)

    lam_min, theta_err = per_episode('lambda_min'), per_episode('theta_err')
    ula, naive = per_episode('ula_steps'), per_episode('naive_steps')

    return AggregateReport(
        name=cfg.name, algorithm=cfg.algorithm, seeds=[r.seed for r in ordered],
        succeeded=list(records), failures=failures, J_star=J_star,
        t=t, mean_cum_regret=mean, se_cum_regret=se,
        normalized_regret=mean / np.sqrt(t) if t.size else mean,
        episode=np.arange(1, n_episodes + 1),
        episode_t_start=np.array([ep.t_start for ep in runs[0].episodes[:n_episodes]]) if runs else np.zeros(0),
        mean_lambda_min=column(lam_min, np.mean), median_lambda_min=column(lam_min, np.median),
        mean_theta_err=column(theta_err, np.mean), median_theta_err=column(theta_err, np.median),
        mean_ula_steps=column(ula, np.mean), mean_naive_steps=column(naive, np.mean),
        records=records)


def _write_aggregates(manager: DataManager, report: AggregateReport) -> List[str]:
    n_seeds = len(report.succeeded)
    rows = zip(report.t.tolist(), report.mean_cum_regret.tolist(), report.se_cum_regret.tolist(),
               report.normalized_regret.tolist(), [n_seeds] * report.horizon)
    episodes = zip(report.episode.tolist(), report.episode_t_start.tolist(),
                   report.mean_lambda_min.tolist(), report.median_lambda_min.tolist(),
                   report.mean_theta_err.tolist(), report.median_theta_err.tolist(),
                   report.mean_ula_steps.tolist(), report.mean_naive_steps.tolist())
    return [manager.save_table('aggregate.csv', AGGREGATE_COLUMNS, rows),
            manager.save_table('aggregate_episodes.csv', AGGREGATE_EPISODE_COLUMNS, episodes),
            manager.save_json('failures.json', {str(s): k for s, k in sorted(report.failures.items())}),
            manager.save_json('summary.json', report.summary())]


def run_batch(cfg: ExperimentConfig, parallelism: Optional[int] = None,
              noise: Optional[NoiseModel] = None) -> AggregateReport:
    """Run every seed of the configuration and persist per-seed and aggregate CSVs

    Args:
        cfg (ExperimentConfig): Validated configuration
        parallelism (Optional[int]): Worker processes; all hardware threads by default, 1 runs inline
        noise (Optional[NoiseModel]): Prebuilt noise model, built (and calibrated) once otherwise

    Returns:
        AggregateReport: Summary over the succeeded seeds

    Raises:
        ValidationError: If the seed list is empty
        BatchFailure: If every seed failed
    """
    if not cfg.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in cfg.seeds):
        raise ValidationError('seeds', "must be a non-empty list of integers")
    seeds = list(cfg.seeds)
    workers = max(1, min(parallelism or os.cpu_count() or 1, len(seeds)))
    manager = DataManager(cfg.output_dir)
    manager.clear_runs()
    events = get_event_logger(os.path.join(cfg.output_dir, 'logs'))
    noise = noise if noise is not None else build_noise(cfg)

    started = time.perf_counter()
    events.log_event('batch_started', {'algorithm': cfg.algorithm, 'seeds': len(seeds),
                                       'horizon': cfg.horizon, 'workers': workers}, run_id=cfg.name)
    logger.info(f"Running {cfg.name} ({cfg.algorithm}) on {len(seeds)} seed(s) with {workers} worker(s)")

    results: List[SeedResult] = []

    def collect(result: SeedResult):
        if result.record is not None:
            try:
                manager.save_run(result.record)
            except OutputError as e:
                logger.error(f"Seed {result.seed} finished but its CSVs could not be written: {str(e)}")
                result = SeedResult(result.seed, None, type(e).__name__, str(e))
        results.append(result)
        if result.record is not None:
            events.log_event('seed_finished', {'seed': result.seed,
                                               'cum_regret': result.record.cum_regret[-1] if result.record.horizon else 0.0,
                                               'wall_clock': f"{result.record.wall_clock:.2f}"}, run_id=cfg.name)
        else:
            events.log_event('seed_failed', {'seed': result.seed, 'error': result.error_kind,
                                             'message': result.message}, run_id=cfg.name)

    if workers == 1:
        for seed in seeds:
            collect(run_seed(cfg, noise, seed))
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(cfg, noise)) as pool:
            futures = [pool.submit(_run_in_worker, seed) for seed in seeds]
            for future in as_completed(futures):
                collect(future.result())

    report = aggregate(cfg, results)
    elapsed = time.perf_counter() - started
    events.log_event('batch_finished', {'succeeded': len(report.succeeded), 'failed': len(report.failures),
                                        'wall_clock': f"{elapsed:.2f}"}, run_id=cfg.name)

    if not report.succeeded:
        logger.error(f"All {len(seeds)} seed(s) of {cfg.name} failed: {report.failures}")
        raise BatchFailure(f"All {len(seeds)} seeds failed", {'failures': report.failures})
    if report.failures:
        logger.warning(f"{len(report.failures)} seed(s) failed and are excluded: {report.failures}")

    _write_aggregates(manager, report)
    logger.info(f"Batch {cfg.name} done in {elapsed:.1f}s: R(T)={report.summary()['final_cum_regret']:.6g} "
                f"over {len(report.succeeded)} seed(s)")
    return report


def iteration_counts(report: AggregateReport, horizons: Sequence[int]) -> List[IterationCount]:
    """Cumulative ULA steps of episodes started by each horizon, averaged over seeds"""
    table = []
    runs = list(report.records.values())
    for horizon in horizons:
        precond = [sum(ep.ula_steps for ep in run.episodes if ep.t_start <= horizon) for run in runs]
        naive = [sum(ep.naive_steps for ep in run.episodes if ep.t_start <= horizon) for run in runs]
        table.append(IterationCount(horizon=int(horizon), preconditioned=float(np.mean(precond)),
                                    naive=float(np.mean(naive))))
    return table


def compare_iteration_counts(cfg: ExperimentConfig, horizons: Sequence[int],
                             parallelism: Optional[int] = None,
                             noise: Optional[NoiseModel] = None) -> List[IterationCount]:
    """Preconditioned vs naive ULA step totals at each horizon

    One TSLD batch is run to the largest horizon; the counts at smaller
    horizons are read off the same trajectories.

    Args:
        cfg (ExperimentConfig): Validated configuration
        horizons (Sequence[int]): Ascending horizons; non-positive entries are skipped
        parallelism (Optional[int]): As in run_batch
        noise (Optional[NoiseModel]): As in run_batch

    Returns:
        List[IterationCount]: One row per positive horizon, empty if there is none

    Raises:
        ValidationError: If the horizons are not ascending
        BatchFailure: As run_batch
    """
    horizons = [int(h) for h in horizons]
    if any(b < a for a, b in zip(horizons, horizons[1:])):
        raise ValidationError('horizons', f"must be ascending, got {horizons}")
    horizons = [h for h in horizons if h > 0]
    if not horizons:
        logger.info("No positive horizon requested; iteration table is empty")
        return []

    report = run_batch(cfg.replace(horizon=horizons[-1], algorithm='tsld'), parallelism, noise)
    table = iteration_counts(report, horizons)
    DataManager(cfg.output_dir).save_table(
        'iterations.csv', ITERATION_COLUMNS,
        ((row.horizon, row.preconditioned, row.naive, row.ratio, len(report.succeeded)) for row in table))
    for row in table:
        logger.info(f"T={row.horizon}: preconditioned={row.preconditioned:.4g}, naive={row.naive:.4g}, "
                    f"ratio={row.ratio:.1f}")
    return table
