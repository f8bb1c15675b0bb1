import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from engine import config
from engine.errors import NumericalBlowup, RejectionExhausted
from engine.lqr import AdmissibleSet, MembershipResult, SystemParams, in_admissible_set
from engine.posterior import PotentialState

logger = logging.getLogger('Langevin')


@dataclass(frozen=True)
class UlaSchedule:
    """Stepsize and iteration count of one preconditioned ULA chain.

    `raw_n_steps` is the count given by the schedule formula; `n_steps` is
    what the chain actually runs, a raw count of 0 floored at one relaxation time.
    """

    gamma: float
    n_steps: int
    raw_n_steps: int
    lambda_min: float
    t: int
    m: float
    M: float

    @property
    def floored(self) -> bool:
        return self.n_steps != self.raw_n_steps


@dataclass(frozen=True)
class SampleOutcome:
    theta_tilde: np.ndarray
    attempts: int
    total_ula_steps: int
    schedule: Optional[UlaSchedule]
    membership: MembershipResult


def step_schedule(lambda_min: float, t: int, m: float, M: float) -> UlaSchedule:
    """Preconditioned schedule

        gamma = m lambda_min / (16 M^2 max(lambda_min, t))
        N     = ceil(4 log2(max(lambda_min, t) / lambda_min) / (m gamma))

    A raw count of 0 (max(lambda_min, t) = lambda_min) is floored at
    ceil(1 / (m gamma)), one relaxation time, so the chain still moves.
    """
    if lambda_min <= 0 or t < 1 or not 0 < m <= M:
        raise ValueError(f"Invalid schedule inputs: lambda_min={lambda_min}, t={t}, m={m}, M={M}")
    scale = max(lambda_min, t)
    gamma = m * lambda_min / (16.0 * M ** 2 * scale)
    raw = math.ceil(4.0 * math.log2(scale / lambda_min) / (m * gamma))
    n_steps = raw if raw > 0 else math.ceil(1.0 / (m * gamma))
    return UlaSchedule(gamma=gamma, n_steps=n_steps, raw_n_steps=raw,
                       lambda_min=lambda_min, t=t, m=m, M=M)


def naive_schedule(lambda_min_H: float, lambda_max_H: float) -> Tuple[float, int]:
    """Unpreconditioned schedule: gamma = l_min / (16 l_max^2), N = 64 (l_max / l_min)^2"""
    if not 0 < lambda_min_H <= lambda_max_H:
        raise ValueError(f"Need 0 < lambda_min <= lambda_max, got {lambda_min_H}, {lambda_max_H}")
    gamma = lambda_min_H / (16.0 * lambda_max_H ** 2)
    n_steps = math.ceil(64.0 * (lambda_max_H / lambda_min_H) ** 2)
    return gamma, n_steps


def ula_chain(state: PotentialState, theta0: np.ndarray, schedule: UlaSchedule,
              rng: np.random.Generator) -> np.ndarray:
    """Run N preconditioned ULA steps

        theta <- theta - gamma P^{-1} grad U(theta) + sqrt(2 gamma) P^{-1/2} g

    Args:
        state (PotentialState): Potential and preconditioner
        theta0 (np.ndarray): Start, a single vector or a batch (C, dn) of independent chains
        schedule (UlaSchedule): Stepsize and step count
        rng (np.random.Generator): Stream for the Gaussian increments

    Returns:
        np.ndarray: Final iterate(s), same shape as theta0

    Raises:
        NumericalBlowup: If an iterate leaves the finite range
    """
    theta = np.array(theta0, dtype=float)
    gamma = schedule.gamma
    noise_scale = math.sqrt(2.0 * gamma)

    for step in range(schedule.n_steps):
        drift = state.precond_apply(state.grad_potential(theta), 'inverse')
        kick = state.precond_apply(rng.standard_normal(theta.shape), 'inverse-sqrt')
        theta = theta - gamma * drift + noise_scale * kick
        size = np.max(np.abs(theta))
        if not np.isfinite(size) or size > config.ULA_BLOWUP_NORM:
            logger.error(f"ULA iterate blew up at step {step} (gamma={gamma:.3e}, t={schedule.t})")
            raise NumericalBlowup("Langevin iterate exceeded the blowup threshold",
                                  {'step': step, 'gamma': gamma, 't': schedule.t})
    return theta


def sample_with_rejection(state: PotentialState, theta_min: np.ndarray, schedule: UlaSchedule,
                          admissible: AdmissibleSet, W: np.ndarray, rng: np.random.Generator,
                          max_attempts: int = config.REJECTION_MAX_ATTEMPTS,
                          riccati_tol: float = config.RICCATI_TOL,
                          riccati_max_iter: int = config.RICCATI_MAX_ITER) -> SampleOutcome:
    """Restart the chain from theta_min until its output is admissible

    The Riccati tolerances are those of the membership test.

    Returns:
        SampleOutcome: Accepted sample with attempt and step counts

    Raises:
        RejectionExhausted: After max_attempts rejected chains
    """
    clauses = {}
    for attempt in range(1, max_attempts + 1):
        theta = ula_chain(state, theta_min, schedule, rng)
        verdict = in_admissible_set(SystemParams.from_theta(theta, state.n, state.n_u), admissible, W,
                                    tol=riccati_tol, max_iter=riccati_max_iter)
        if verdict.admitted:
            if attempt > 10:
                logger.warning(f"Accepted after {attempt} attempts (rejections by clause: {clauses})")
            return SampleOutcome(theta_tilde=theta, attempts=attempt,
                                 total_ula_steps=attempt * schedule.n_steps,
                                 schedule=schedule, membership=verdict)
        clauses[verdict.failed_clause] = clauses.get(verdict.failed_clause, 0) + 1

    logger.error(f"Rejection sampling exhausted {max_attempts} attempts at t={schedule.t}: {clauses}")
    raise RejectionExhausted(f"No admissible sample in {max_attempts} attempts",
                             {'attempts': max_attempts, 'clauses': clauses, 't': schedule.t})
