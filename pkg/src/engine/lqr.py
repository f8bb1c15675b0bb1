import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as la

from engine import config
from engine.errors import DimensionMismatch, InvalidModel, NonConvergence, SingularInnerMatrix

logger = logging.getLogger('LQR')


@dataclass(frozen=True)
class SystemParams:
    """System matrices (A, B) of x_{t+1} = A x_t + B u_t + w_t.

    The parameter vector theta stacks the columns of Theta = [A B]^T, so
    block i of theta (length d = n + n_u) is row i of [A B].
    """

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        B = np.array(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"A must be square, got shape {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise DimensionMismatch(f"B has {B.shape[0]} rows but A is {A.shape[0]}x{A.shape[0]}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise InvalidModel("System matrices contain non-finite entries")
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'B', B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def d(self) -> int:
        return self.n + self.n_u

    @property
    def theta(self) -> np.ndarray:
        return np.hstack((self.A, self.B)).ravel()

    @classmethod
    def from_theta(cls, theta: np.ndarray, n: int, n_u: int) -> 'SystemParams':
        """Rebuild (A, B) from a parameter vector of length (n + n_u) * n"""
        theta = np.asarray(theta, dtype=float)
        d = n + n_u
        if theta.shape != (d * n,):
            raise DimensionMismatch(f"theta has shape {theta.shape}, expected ({d * n},)")
        rows = theta.reshape(n, d)
        return cls(rows[:, :n], rows[:, n:])


@dataclass(frozen=True)
class CostSpec:
    """Stage cost c(x, u) = x^T Q x + u^T R u"""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.array(self.Q, dtype=float))
        R = np.atleast_2d(np.array(self.R, dtype=float))
        for name, M in (('Q', Q), ('R', R)):
            if M.shape[0] != M.shape[1]:
                raise DimensionMismatch(f"{name} must be square, got shape {M.shape}")
            if np.max(np.abs(M - M.T)) > 1e-12:
                raise InvalidModel(f"{name} is not symmetric")
        if np.min(la.eigvalsh(Q)) < -1e-12:
            raise InvalidModel("Q is not positive semidefinite")
        if np.min(la.eigvalsh(R)) < 1e-12:
            raise InvalidModel("R is not positive definite")
        object.__setattr__(self, 'Q', Q)
        object.__setattr__(self, 'R', R)

    def stage_cost(self, x: np.ndarray, u: np.ndarray) -> float:
        return float(x @ self.Q @ x + u @ self.R @ u)


@dataclass(frozen=True)
class AdmissibleSet:
    """Rejection region {|theta| <= S, ||A + B K(theta)||_2 <= rho, J(theta) <= M_J}"""

    S: float
    rho: float
    M_J: float
    cost: CostSpec

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise InvalidModel(f"rho must lie in (0, 1), got {self.rho}")
        if self.S <= 0 or self.M_J <= 0:
            raise InvalidModel(f"S and M_J must be positive, got S={self.S}, M_J={self.M_J}")


@dataclass(frozen=True)
class RiccatiSolution:
    P_star: np.ndarray
    K: np.ndarray
    residual: float
    iterations: int
    J: Optional[float] = None


@dataclass(frozen=True)
class MembershipResult:
    """Outcome of an admissible-set test; `failed_clause` is None on success"""

    admitted: bool
    failed_clause: Optional[str]
    norm: float
    spectral_norm: float = float('nan')
    spectral_radius: float = float('nan')
    J: float = float('nan')
    detail: str = ''
    solution: Optional[RiccatiSolution] = field(default=None, repr=False)

    def __bool__(self) -> bool:
        return self.admitted


def _inner_matrix(params: SystemParams, P: np.ndarray, R: np.ndarray) -> np.ndarray:
    inner = R + params.B.T @ P @ params.B
    if not np.all(np.isfinite(inner)) or np.linalg.cond(inner) > config.INNER_MATRIX_MAX_COND:
        raise SingularInnerMatrix("R + B^T P B is numerically singular",
                                  {'cond': float(np.linalg.cond(inner)) if np.all(np.isfinite(inner)) else float('inf')})
    return inner


def riccati_map(params: SystemParams, cost: CostSpec, P: np.ndarray) -> np.ndarray:
    """One application of the Riccati map, symmetrized"""
    A, B = params.A, params.B
    inner = _inner_matrix(params, P, cost.R)
    BtPA = B.T @ P @ A
    nxt = cost.Q + A.T @ P @ A - BtPA.T @ la.solve(inner, BtPA, assume_a='sym')
    return 0.5 * (nxt + nxt.T)


def gain(params: SystemParams, P_star: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Optimal feedback gain K = -(R + B^T P B)^{-1} B^T P A.

    Args:
        params (SystemParams): System matrices
        P_star (np.ndarray): Symmetric positive definite Riccati solution
        R (np.ndarray): Input cost matrix

    Returns:
        np.ndarray: n_u x n gain matrix
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    inner = _inner_matrix(params, P_star, R)
    return -la.solve(inner, params.B.T @ P_star @ params.A, assume_a='sym')


def average_cost(P_star: np.ndarray, W: np.ndarray) -> float:
    """Optimal average cost J = tr(W P*)"""
    W = np.atleast_2d(W)
    P_star = np.atleast_2d(P_star)
    if W.shape != P_star.shape:
        raise DimensionMismatch(f"W has shape {W.shape} but P* has shape {P_star.shape}")
    return float(np.sum(W * P_star.T))


def solve_riccati(params: SystemParams, cost: CostSpec,
                  tol: float = config.RICCATI_TOL,
                  max_iter: int = config.RICCATI_MAX_ITER,
                  W: Optional[np.ndarray] = None) -> RiccatiSolution:
    """Solve the discrete-time ARE by fixed-point iteration from P_0 = Q.

    Args:
        params (SystemParams): System matrices
        cost (CostSpec): Cost matrices
        tol (float): Frobenius bound on ||P - Ric(P)|| for the returned P
        max_iter (int): Maximum number of Riccati map applications
        W (Optional[np.ndarray]): Noise covariance; when given J is filled in

    Returns:
        RiccatiSolution: P*, gain, residual and iteration count

    Raises:
        NonConvergence: If the residual stays above tol or the iterates diverge
        SingularInnerMatrix: If R + B^T P B cannot be inverted
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if cost.Q.shape[0] != params.n or cost.R.shape[0] != params.n_u:
        raise DimensionMismatch("Cost matrices do not match the system dimensions")

    P = cost.Q.copy()
    residual = float('inf')
    for iteration in range(max_iter + 1):
        nxt = riccati_map(params, cost, P)
        residual = float(np.linalg.norm(nxt - P, 'fro'))
        if not np.isfinite(residual) or np.linalg.norm(nxt) > config.RICCATI_DIVERGENCE_NORM:
            logger.debug(f"Riccati iterates diverged after {iteration} iterations")
            raise NonConvergence("Riccati iteration diverged",
                                 {'residual': residual, 'iterations': iteration})
        if residual <= tol:
            K = gain(params, P, cost.R)
            J = average_cost(P, W) if W is not None else None
            return RiccatiSolution(P_star=P, K=K, residual=residual, iterations=iteration, J=J)
        P = nxt

    raise NonConvergence(f"Riccati residual {residual:.3e} above tolerance after {max_iter} iterations",
                         {'residual': residual, 'iterations': max_iter})


def closed_loop(params: SystemParams, K: np.ndarray) -> np.ndarray:
    return params.A + params.B @ K


def spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(la.eigvals(M))))


def in_admissible_set(theta: SystemParams, admissible: AdmissibleSet, W: np.ndarray,
                      tol: float = config.RICCATI_TOL,
                      max_iter: int = config.RICCATI_MAX_ITER) -> MembershipResult:
    """Test membership of a parameter in the admissible set.

    A Riccati failure is reported as a rejection, never raised.

    Args:
        theta (SystemParams): Candidate parameter
        admissible (AdmissibleSet): Set bounds and cost matrices
        W (np.ndarray): Noise covariance used for J(theta)

    Returns:
        MembershipResult: Verdict with the failing clause and diagnostics
    """
    norm = float(np.linalg.norm(theta.theta))
    if norm > admissible.S:
        return MembershipResult(False, 'norm', norm, detail=f"|theta|={norm:.4g} > S={admissible.S}")

    try:
        solution = solve_riccati(theta, admissible.cost, tol=tol, max_iter=max_iter, W=W)
    except (NonConvergence, SingularInnerMatrix) as e:
        return MembershipResult(False, 'riccati', norm, detail=str(e))

    loop = closed_loop(theta, solution.K)
    spectral_norm = float(np.linalg.norm(loop, 2))
    radius = spectral_radius(loop)
    J = float(solution.J)
    if spectral_norm > admissible.rho:
        return MembershipResult(False, 'closed_loop_norm', norm, spectral_norm, radius, J,
                                detail=f"||A+BK||_2={spectral_norm:.4g} > rho={admissible.rho}",
                                solution=solution)
    if J > admissible.M_J:
        return MembershipResult(False, 'average_cost', norm, spectral_norm, radius, J,
                                detail=f"J={J:.4g} > M_J={admissible.M_J}", solution=solution)
    return MembershipResult(True, None, norm, spectral_norm, radius, J, solution=solution)
