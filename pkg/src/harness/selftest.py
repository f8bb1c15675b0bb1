"""Fast acceptance battery behind the `selftest` command.

Each check returns a CheckResult instead of raising so the CLI can report
every failure in one pass.
"""
import dataclasses
import logging
import math
from typing import Callable, List, NamedTuple, Tuple

import numpy as np
import scipy.linalg as la

from engine.langevin import naive_schedule, step_schedule, ula_chain
from engine.lqr import CostSpec, SystemParams, closed_loop, solve_riccati, spectral_radius
from engine.noise import GaussianMixtureNoise, GaussianNoise
from engine.posterior import PotentialState
from engine.simulator import run_tsld
from harness.config import PRESETS, build_simulation, from_dict

logger = logging.getLogger('Selftest')

CLOSED_LOOP_RADIUS = {'paper-3x3': 0.3365, 'paper-5x5': 0.3187, 'paper-10x10': 0.3839}


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def _random_state(rng: np.random.Generator, noise, n_u: int, lam: float, size: int) -> PotentialState:
    state = PotentialState(lam, np.zeros((noise.dim + n_u) * noise.dim), noise, n_u)
    batch = [(rng.standard_normal(noise.dim + n_u), rng.standard_normal(noise.dim)) for _ in range(size)]
    return state.ingest(batch)


def check_riccati_fidelity() -> Tuple[bool, str]:
    worst = 0.0
    for name, target in CLOSED_LOOP_RADIUS.items():
        preset = PRESETS[name]
        params = SystemParams(np.array(preset['A']), np.array(preset['B']))
        cost = CostSpec(2.0 * np.eye(params.n), np.eye(params.n_u))
        K = solve_riccati(params, cost).K
        worst = max(worst, abs(spectral_radius(closed_loop(params, K)) - target))
    return worst <= 5e-4, f"max |rho - target| = {worst:.2e}"


def check_sandwich(rng: np.random.Generator) -> Tuple[bool, str]:
    noise = GaussianMixtureNoise(np.full(3, 0.5))
    lo, hi = min(noise.m_lower, 1.0), max(noise.m_upper, 1.0)
    extremes = [math.inf, -math.inf]
    for _ in range(10):
        state = _random_state(rng, noise, 3, 5.0, int(rng.integers(1, 60)))
        P = state.dense_preconditioner()
        for _ in range(5):
            theta = 2.0 * rng.standard_normal(state.dn)
            eig = la.eigh(state.hessian_potential(theta), P, eigvals_only=True)
            extremes = [min(extremes[0], eig[0]), max(extremes[1], eig[-1])]
    ok = extremes[0] >= lo - 1e-8 and extremes[1] <= hi + 1e-8
    return ok, f"eigenvalues in [{extremes[0]:.6f}, {extremes[1]:.6f}], bounds [{lo}, {hi}]"


def check_schedules() -> Tuple[bool, str]:
    schedule = step_schedule(4.0, 10, 1.0, 1.0)
    gamma, n_naive = naive_schedule(4.0, 40.0)
    ok = (math.isclose(schedule.gamma, 0.025, rel_tol=1e-12) and schedule.n_steps == 212
          and math.isclose(gamma, 4.0 / 25600.0, rel_tol=1e-12) and n_naive == 6400)
    return ok, f"gamma={schedule.gamma}, N={schedule.n_steps}, naive N={n_naive}"


def _central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return grad


def check_gradients(rng: np.random.Generator) -> Tuple[bool, str]:
    noise = GaussianMixtureNoise(np.full(3, 0.5))
    state = _random_state(rng, noise, 2, 2.0, 20)
    worst = 0.0
    for _ in range(20):
        w = rng.standard_normal(3)
        fd = _central_difference(lambda v: float(noise.log_pdf(v)), w)
        worst = max(worst, np.max(np.abs(fd - noise.log_pdf_grad(w))) / max(1.0, np.max(np.abs(fd))))
        theta = rng.standard_normal(state.dn)
        fd = _central_difference(lambda v: float(state.potential(v)), theta)
        worst = max(worst, np.max(np.abs(fd - state.grad_potential(theta))) / max(1.0, np.max(np.abs(fd))))
    return worst <= 1e-4, f"max relative error {worst:.2e}"


def check_conjugate_mean(rng: np.random.Generator, chains: int = 4096) -> Tuple[bool, str]:
    noise = GaussianNoise.standard(1)
    state = PotentialState(1.0, np.zeros(2), noise, 1)
    truth = np.array([0.7, -0.4])
    batch = []
    for _ in range(200):
        z = rng.standard_normal(2)
        batch.append((z, np.array([truth @ z + rng.standard_normal()])))
    state.ingest(batch)

    mean = state.ridge_mean()
    theta_min = state.newton_minimize()
    lambda_min, _ = state.precond_spectrum()
    schedule = step_schedule(lambda_min, state.t, 1.0, 1.0)
    # Five relaxation times so the start point is forgotten
    schedule = dataclasses.replace(schedule, n_steps=5 * math.ceil(1.0 / schedule.gamma))
    draws = ula_chain(state, np.tile(theta_min, (chains, 1)), schedule, rng)

    cov = la.inv(state.dense_preconditioner())
    z_scores = np.abs(draws.mean(axis=0) - mean) / np.sqrt(np.diag(cov) / chains)
    cov_err = np.linalg.norm(np.cov(draws, rowvar=False) - cov) / np.linalg.norm(cov)
    passed = bool(np.all(z_scores < 3.0)) and cov_err < 0.15
    return passed, f"max |z| = {np.max(z_scores):.2f}, covariance error {cov_err:.1%}"


def check_determinism() -> Tuple[bool, str]:
    cfg = from_dict({'preset': 'paper-3x3', 'horizon': 15, 'seeds': [0]})
    sim = build_simulation(cfg)
    first = run_tsld(sim, np.random.default_rng(7), 7)
    second = run_tsld(sim, np.random.default_rng(7), 7)
    same = (np.array_equal(first.cum_regret, second.cum_regret)
            and all(np.array_equal(a.theta_tilde, b.theta_tilde)
                    for a, b in zip(first.episodes, second.episodes)))
    return same, f"{first.horizon} steps, {len(first.episodes)} episodes"


def run_selftest(seed: int = 0) -> List[CheckResult]:
    """Run every check and log a line per result

    Args:
        seed (int): Seed of the random trajectories and chains

    Returns:
        List[CheckResult]: One entry per check, in execution order
    """
    rng = np.random.default_rng(seed)
    checks = [
        ('riccati-fidelity', check_riccati_fidelity),
        ('preconditioned-hessian-sandwich', lambda: check_sandwich(rng)),
        ('schedule-exactness', check_schedules),
        ('finite-difference-gradients', lambda: check_gradients(rng)),
        ('conjugate-posterior-mean', lambda: check_conjugate_mean(rng)),
        ('determinism', check_determinism),
    ]
    results = []
    for name, check in checks:
        try:
            passed, detail = check()
        except Exception as e:
            logger.error(f"Check {name} raised {type(e).__name__}: {str(e)}")
            passed, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(passed), detail))
        log = logger.info if passed else logger.error
        log(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return results
