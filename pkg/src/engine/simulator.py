import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.linalg as la

from engine import config
from engine.errors import InvalidModel, RejectionExhausted, StateBlowup
from engine.langevin import SampleOutcome, naive_schedule, sample_with_rejection, step_schedule
from engine.lqr import AdmissibleSet, CostSpec, SystemParams, in_admissible_set, solve_riccati
from engine.noise import GaussianNoise, NoiseModel
from engine.posterior import PotentialState

logger = logging.getLogger('Simulator')


@dataclass(frozen=True)
class EpisodeSchedule:
    k: int
    t_start: int
    length: int

    @property
    def t_last(self) -> int:
        return self.t_start + self.length - 1


def episode_schedule(k: int) -> EpisodeSchedule:
    """Episode k starts at t_k = k(k+1)/2 and lasts T_k = k + 1 steps"""
    if k < 1:
        raise ValueError(f"Episodes are numbered from 1, got {k}")
    return EpisodeSchedule(k=k, t_start=k * (k + 1) // 2, length=k + 1)


@dataclass(frozen=True)
class ExcitationSpec:
    """Gaussian input perturbation injected at the last step of every episode"""

    covariance: np.ndarray

    def __post_init__(self):
        cov = np.atleast_2d(np.array(self.covariance, dtype=float))
        if cov.shape[0] != cov.shape[1] or np.max(np.abs(cov - cov.T)) > 1e-12:
            raise InvalidModel("Excitation covariance must be a symmetric square matrix")
        try:
            chol = la.cholesky(cov, lower=True)
        except la.LinAlgError as e:
            raise InvalidModel(f"Excitation covariance is not positive definite: {e}")
        object.__setattr__(self, 'covariance', cov)
        object.__setattr__(self, '_chol', chol)

    @classmethod
    def isotropic(cls, n_u: int, variance: float = config.EXCITATION_VARIANCE) -> 'ExcitationSpec':
        return cls(variance * np.eye(n_u))

    @classmethod
    def matched(cls, W: np.ndarray, n_u: int) -> 'ExcitationSpec':
        """Diagonal covariance whose extreme eigenvalues equal those of W"""
        eig = la.eigvalsh(W)
        if n_u == 1:
            return cls(np.array([[eig[-1]]]))
        return cls(np.diag(np.linspace(eig[0], eig[-1], n_u)))

    @property
    def n_u(self) -> int:
        return self.covariance.shape[0]

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self._chol @ rng.standard_normal(self.n_u)


def excitation(spec: ExcitationSpec, t: int, schedule: EpisodeSchedule,
               rng: np.random.Generator) -> np.ndarray:
    """Zero except at the final step of the episode"""
    if t == schedule.t_last:
        return spec.draw(rng)
    return np.zeros(spec.n_u)


@dataclass
class SimulationConfig:
    system: SystemParams
    noise: NoiseModel
    cost: CostSpec
    admissible: AdmissibleSet
    lam: float
    prior_mean: np.ndarray
    horizon: int
    excitation: ExcitationSpec
    riccati_tol: float = config.RICCATI_TOL
    riccati_max_iter: int = config.RICCATI_MAX_ITER
    newton_tol: float = config.NEWTON_TOL
    newton_max_iter: int = config.NEWTON_MAX_ITER
    max_attempts: int = config.REJECTION_MAX_ATTEMPTS
    state_limit: float = config.STATE_BLOWUP_NORM

    def __post_init__(self):
        n, n_u = self.system.n, self.system.n_u
        if self.noise.dim != n:
            raise InvalidModel(f"Noise dimension {self.noise.dim} does not match n={n}")
        if self.cost.Q.shape[0] != n or self.cost.R.shape[0] != n_u:
            raise InvalidModel("Cost matrices do not match the system dimensions")
        if self.excitation.n_u != n_u:
            raise InvalidModel(f"Excitation dimension {self.excitation.n_u} does not match n_u={n_u}")
        if self.horizon < 0:
            raise InvalidModel(f"Horizon must be non-negative, got {self.horizon}")


@dataclass(frozen=True)
class StepRow:
    t: int
    episode: int
    x: np.ndarray
    u: np.ndarray
    nu: np.ndarray
    cost: float
    regret: float
    cum_regret: float
    lambda_min: float
    lambda_max: float
    theta_err: float
    ula_steps: int
    attempts: int


@dataclass(frozen=True)
class EpisodeLog:
    k: int
    t_start: int
    length: int
    theta_tilde: np.ndarray
    theta_err: float
    lambda_min: float
    lambda_max: float
    attempts: int
    ula_steps: int
    naive_steps: int
    gamma: float
    floored: bool


@dataclass
class RunRecord:
    algorithm: str
    seed: Optional[int]
    J_star: float
    theta_star: np.ndarray
    rows: List[StepRow] = field(default_factory=list)
    episodes: List[EpisodeLog] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def horizon(self) -> int:
        return len(self.rows)

    @property
    def costs(self) -> np.ndarray:
        return np.array([row.cost for row in self.rows], dtype=float)

    @property
    def cum_regret(self) -> np.ndarray:
        return np.array([row.cum_regret for row in self.rows], dtype=float)

    @property
    def excitation_count(self) -> int:
        return sum(1 for row in self.rows if np.any(row.nu != 0))


@dataclass(frozen=True)
class RegretSeries:
    t: np.ndarray
    cum_regret: np.ndarray
    normalized: np.ndarray


def regret_series(record: RunRecord, J_star: float) -> RegretSeries:
    """Cumulative regret sum_{s<=t} (c_s - J*) and R(t)/sqrt(t)"""
    t = np.arange(1, record.horizon + 1)
    cum = np.cumsum(record.costs - J_star)
    return RegretSeries(t=t, cum_regret=cum, normalized=cum / np.sqrt(t) if t.size else cum)


Sampler = Callable[[PotentialState, np.ndarray, int, np.random.Generator], Tuple[SampleOutcome, np.ndarray]]


def _curvature(noise: NoiseModel) -> Tuple[float, float]:
    m_lower, m_upper = noise.hessian_bounds()
    return min(m_lower, 1.0), max(m_upper, 1.0)


def _simulate(cfg: SimulationConfig, rng: np.random.Generator, algorithm: str,
              draw: Sampler, seed: Optional[int]) -> RunRecord:
    started = time.perf_counter()
    system, cost = cfg.system, cfg.cost
    n, n_u = system.n, system.n_u
    W = cfg.noise.W
    m, M = _curvature(cfg.noise)
    noise_rng, excitation_rng, sampler_rng = rng.spawn(3)

    J_star = solve_riccati(system, cost, cfg.riccati_tol, cfg.riccati_max_iter, W=W).J
    theta_star = system.theta
    record = RunRecord(algorithm=algorithm, seed=seed, J_star=J_star, theta_star=theta_star)
    logger.info(f"Starting {algorithm} run (seed={seed}, T={cfg.horizon}, n={n}, n_u={n_u}, J*={J_star:.6g})")

    state = PotentialState(cfg.lam, cfg.prior_mean, cfg.noise, n_u)
    buffer: List[Tuple[np.ndarray, np.ndarray]] = []
    theta_min = state.prior_mean.copy()
    x = np.zeros(n)
    t = 1
    cum = 0.0
    k = 0

    while t <= cfg.horizon:
        k += 1
        schedule = episode_schedule(k)
        state.ingest(buffer)
        buffer = []
        lambda_min, lambda_max = state.precond_spectrum()

        outcome, theta_min = draw(state, theta_min, t, sampler_rng)
        # Gain of the accepted sample, from the Riccati solve done by the admissibility test
        K = outcome.membership.solution.K
        theta_err = float(np.linalg.norm(outcome.theta_tilde - theta_star))
        naive = outcome.attempts * naive_schedule(m * lambda_min, M * lambda_max)[1]
        executed = min(schedule.length, cfg.horizon - t + 1)
        record.episodes.append(EpisodeLog(
            k=k, t_start=schedule.t_start, length=executed, theta_tilde=outcome.theta_tilde,
            theta_err=theta_err, lambda_min=lambda_min, lambda_max=lambda_max,
            attempts=outcome.attempts, ula_steps=outcome.total_ula_steps, naive_steps=naive,
            gamma=outcome.schedule.gamma if outcome.schedule else float('nan'),
            floored=bool(outcome.schedule and outcome.schedule.floored)))
        logger.debug(f"Episode {k}: t={t}, lambda_min={lambda_min:.4g}, attempts={outcome.attempts}, "
                     f"ula_steps={outcome.total_ula_steps}, |theta-theta*|={theta_err:.4g}")

        while t <= schedule.t_last and t <= cfg.horizon:
            nu = excitation(cfg.excitation, t, schedule, excitation_rng)
            u = K @ x + nu
            stage = cost.stage_cost(x, u)
            regret = stage - J_star
            cum += regret
            record.rows.append(StepRow(
                t=t, episode=k, x=x, u=u, nu=nu, cost=stage, regret=regret, cum_regret=cum,
                lambda_min=lambda_min, lambda_max=lambda_max, theta_err=theta_err,
                ula_steps=outcome.total_ula_steps, attempts=outcome.attempts))

            x_next = system.A @ x + system.B @ u + cfg.noise.sample(noise_rng)
            norm = float(np.linalg.norm(x_next))
            if not np.isfinite(norm) or norm > cfg.state_limit:
                logger.error(f"State blew up at t={t} (|x|={norm:.3e}, episode {k}, "
                             f"||A+BK||_2 on sample={outcome.membership.spectral_norm:.4g})")
                raise StateBlowup(f"State norm {norm:.3e} exceeded {cfg.state_limit:.1e}",
                                  {'t': t, 'norm': norm, 'episode': k})
            buffer.append((np.concatenate((x, u)), x_next))
            x = x_next
            t += 1

    record.wall_clock = time.perf_counter() - started
    logger.info(f"Finished {algorithm} run (seed={seed}): {k} episodes, R(T)={cum:.6g}, "
                f"{record.wall_clock:.2f}s")
    return record


def run_tsld(cfg: SimulationConfig, rng: np.random.Generator, seed: Optional[int] = None) -> RunRecord:
    """Thompson sampling with preconditioned Langevin dynamics

    Per episode: ingest the previous episode's data, Newton-minimize the
    potential, build the schedule from the preconditioner spectrum,
    rejection-sample an admissible parameter and act with its LQR gain.

    Args:
        cfg (SimulationConfig): True system, noise, cost, prior and horizon
        rng (np.random.Generator): Run stream, split into process-noise,
            excitation and sampler streams
        seed (Optional[int]): Recorded in the RunRecord

    Returns:
        RunRecord: Per-step and per-episode log
    """
    m, M = _curvature(cfg.noise)

    def draw(state, theta_min, t, sampler_rng):
        theta_min = state.newton_minimize(theta_min, cfg.newton_tol, cfg.newton_max_iter)
        lambda_min, _ = state.precond_spectrum()
        schedule = step_schedule(lambda_min, t, m, M)
        outcome = sample_with_rejection(state, theta_min, schedule, cfg.admissible,
                                        cfg.noise.W, sampler_rng, cfg.max_attempts,
                                        cfg.riccati_tol, cfg.riccati_max_iter)
        return outcome, theta_min

    return _simulate(cfg, rng, 'tsld', draw, seed)


def run_psrl_baseline(cfg: SimulationConfig, rng: np.random.Generator,
                      seed: Optional[int] = None) -> RunRecord:
    """Posterior sampling with the exact conjugate Gaussian posterior

    Each block of theta is drawn from N(gram^{-1}(lam mu_i + sum z x_i), gram^{-1}),
    the posterior under unit Gaussian noise, behind the same admissible-set gate.
    """
    if not isinstance(cfg.noise, GaussianNoise) or not np.allclose(cfg.noise.W, np.eye(cfg.noise.dim)):
        logger.warning(f"PSRL baseline assumes unit Gaussian noise; running misspecified on {cfg.noise!r}")

    def draw(state, theta_min, t, sampler_rng):
        mean = state.ridge_mean()
        for attempt in range(1, cfg.max_attempts + 1):
            theta = mean + state.precond_apply(sampler_rng.standard_normal(state.dn), 'inverse-sqrt')
            verdict = in_admissible_set(SystemParams.from_theta(theta, state.n, state.n_u),
                                        cfg.admissible, cfg.noise.W,
                                        tol=cfg.riccati_tol, max_iter=cfg.riccati_max_iter)
            if verdict.admitted:
                return SampleOutcome(theta_tilde=theta, attempts=attempt, total_ula_steps=0,
                                     schedule=None, membership=verdict), mean
        logger.error(f"PSRL rejection sampling exhausted {cfg.max_attempts} attempts at t={t}")
        raise RejectionExhausted(f"No admissible sample in {cfg.max_attempts} attempts",
                                 {'attempts': cfg.max_attempts, 't': t})

    return _simulate(cfg, rng, 'psrl', draw, seed)

