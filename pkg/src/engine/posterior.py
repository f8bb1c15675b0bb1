import logging
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import scipy.linalg as la

from engine import config
from engine.errors import DimensionMismatch, InvalidLambda, NonConvergence
from engine.noise import NoiseModel


class PotentialState:
    """Running posterior potential

        U_t(theta) = (lam / 2) |theta - prior_mean|^2 - sum_s log p_w(x_{s+1} - Theta^T z_s)

    together with the d x d Gram block of the preconditioner
    P_t = I_n (x) (lam I_d + sum_s z_s z_s^T).

    Only `ingest` mutates the state. The dataset is retained in full because
    non-Gaussian scores are nonlinear in theta.
    """

    def __init__(self, lam: float, prior_mean: np.ndarray, noise: NoiseModel, n_u: Optional[int] = None):
        """Initialize the potential with the prior only

        Args:
            lam (float): Prior stiffness, at least 1
            prior_mean (np.ndarray): Prior center, length (n + n_u) * n
            noise (NoiseModel): Process noise law of dimension n
            n_u (Optional[int]): Input dimension, inferred from prior_mean when omitted
        """
        if lam < 1.0:
            raise InvalidLambda(f"Prior stiffness must be at least 1, got {lam}", {'lam': lam})
        self.lam = float(lam)
        self.noise = noise
        self.n = noise.dim

        prior_mean = np.asarray(prior_mean, dtype=float)
        if n_u is None:
            if prior_mean.ndim != 1 or prior_mean.size % self.n or prior_mean.size <= self.n ** 2:
                raise DimensionMismatch(f"Cannot infer the input dimension from a prior mean of shape {prior_mean.shape}")
            n_u = prior_mean.size // self.n - self.n
        self.n_u = n_u
        self.d = self.n + n_u
        self.dn = self.d * self.n
        if prior_mean.ndim == 0:
            prior_mean = np.full(self.dn, float(prior_mean))
        if prior_mean.shape != (self.dn,):
            raise DimensionMismatch(f"Prior mean has shape {prior_mean.shape}, expected ({self.dn},)")
        self.prior_mean = prior_mean

        self.gram = self.lam * np.eye(self.d)
        self.t = 1
        self._z: List[np.ndarray] = []
        self._x: List[np.ndarray] = []
        self._Z = np.empty((0, self.d))
        self._X = np.empty((0, self.n))
        self._factor: Optional[Tuple[np.ndarray, np.ndarray]] = None
        self._ops: Dict[str, np.ndarray] = {}
        self.logger = logging.getLogger('PotentialState')

    @property
    def size(self) -> int:
        return len(self._z)

    @property
    def data(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return list(zip(self._z, self._x))

    def ingest(self, batch: Iterable[Tuple[np.ndarray, np.ndarray]]) -> 'PotentialState':
        """Append (z_s, x_{s+1}) pairs and rank-one update the Gram block

        Args:
            batch: Pairs of a length-d regressor and a length-n next state

        Returns:
            PotentialState: This state, updated in place
        """
        pairs = [(np.asarray(z, dtype=float), np.asarray(x, dtype=float)) for z, x in batch]
        for z, x in pairs:
            if z.shape != (self.d,) or x.shape != (self.n,):
                raise DimensionMismatch(f"Pair shapes {z.shape}, {x.shape} do not match d={self.d}, n={self.n}")
        if not pairs:
            return self

        for z, x in pairs:
            self.gram += np.outer(z, z)
            self._z.append(z)
            self._x.append(x)
        self.gram = 0.5 * (self.gram + self.gram.T)
        self._Z = np.vstack(self._z)
        self._X = np.vstack(self._x)
        self.t += len(pairs)
        self._factor = None
        self._ops = {}
        self.logger.debug(f"Ingested {len(pairs)} pairs, dataset size {self.size}")
        return self

    def recompute_gram(self) -> np.ndarray:
        """Gram block rebuilt from the stored regressors"""
        return self.lam * np.eye(self.d) + self._Z.T @ self._Z

    def dense_preconditioner(self) -> np.ndarray:
        return np.kron(np.eye(self.n), self.gram)

    def _residuals(self, theta: np.ndarray) -> np.ndarray:
        # w_s = x_{s+1} - Theta^T z_s for every stored pair, shape (..., size, n)
        rows = theta.reshape(theta.shape[:-1] + (self.n, self.d))
        return self._X - np.einsum('...id,sd->...si', rows, self._Z)

    def _check_theta(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1:] != (self.dn,):
            raise DimensionMismatch(f"theta has trailing dimension {theta.shape[-1:]}, expected {self.dn}")
        return theta

    def potential(self, theta: np.ndarray) -> np.ndarray:
        theta = self._check_theta(theta)
        delta = theta - self.prior_mean
        value = 0.5 * self.lam * np.sum(delta * delta, axis=-1)
        if self.size:
            value = value - np.sum(self.noise.log_pdf(self._residuals(theta)), axis=-1)
        return value

    def grad_potential(self, theta: np.ndarray) -> np.ndarray:
        """Gradient of U_t; accepts a single theta or a batch of shape (C, dn)"""
        theta = self._check_theta(theta)
        grad = self.lam * (theta - self.prior_mean)
        if self.size:
            scores = self.noise.log_pdf_grad(self._residuals(theta))
            grad = grad + np.einsum('...si,sd->...id', scores, self._Z).reshape(theta.shape)
        return grad

    def hessian_potential(self, theta: np.ndarray) -> np.ndarray:
        """lam I - sum_s Hess log p_w(w_s) (x) z_s z_s^T"""
        theta = self._check_theta(theta)
        if theta.ndim != 1:
            raise DimensionMismatch("hessian_potential expects a single theta")
        hess = self.lam * np.eye(self.dn)
        if self.size:
            H = self.noise.log_pdf_hessian(self._residuals(theta))
            blocks = np.einsum('sij,sa,sb->iajb', H, self._Z, self._Z, optimize=True)
            hess = hess - blocks.reshape(self.dn, self.dn)
        return 0.5 * (hess + hess.T)

    def ridge_mean(self) -> np.ndarray:
        """Posterior mean under unit Gaussian noise: per block, gram^{-1}(lam mu_i + sum_s z_s x_i)"""
        rhs = self.lam * self.prior_mean.reshape(self.n, self.d) + self._X.T @ self._Z
        return self.precond_apply(rhs.ravel(), 'inverse')

    def newton_minimize(self, theta0: Optional[np.ndarray] = None,
                        tol: float = config.NEWTON_TOL,
                        max_iter: int = config.NEWTON_MAX_ITER) -> np.ndarray:
        """Damped Newton with Armijo backtracking on the potential value

        Args:
            theta0 (Optional[np.ndarray]): Starting point, prior mean by default
            tol (float): Target gradient norm
            max_iter (int): Newton iteration budget

        Returns:
            np.ndarray: Minimizer theta_min with |grad U(theta_min)| <= tol

        Raises:
            NonConvergence: If the budget is exhausted
        """
        theta = self.prior_mean.copy() if theta0 is None else self._check_theta(theta0).copy()
        value = float(self.potential(theta))
        grad = self.grad_potential(theta)
        grad_norm = float(np.linalg.norm(grad))

        for iteration in range(max_iter):
            if grad_norm <= tol:
                self.logger.debug(f"Newton converged in {iteration} iterations, |grad|={grad_norm:.2e}")
                return theta
            direction = -la.solve(self.hessian_potential(theta), grad, assume_a='pos')
            slope = float(grad @ direction)

            step = 1.0
            for _ in range(config.ARMIJO_MAX_BACKTRACKS):
                candidate = theta + step * direction
                cand_value = float(self.potential(candidate))
                if cand_value <= value + config.ARMIJO_SLOPE * step * slope:
                    break
                step *= config.ARMIJO_FACTOR
            else:
                # Potential differences are below float resolution; take the full step
                step = 1.0
                candidate = theta + direction
                cand_value = float(self.potential(candidate))

            theta, value = candidate, cand_value
            grad = self.grad_potential(theta)
            grad_norm = float(np.linalg.norm(grad))

        if grad_norm <= tol:
            return theta
        self.logger.error(f"Newton did not converge: |grad|={grad_norm:.3e} after {max_iter} iterations")
        raise NonConvergence("Newton minimization of the potential did not converge",
                             {'grad_norm': grad_norm, 'iterations': max_iter})

    def _eig(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._factor is None:
            self._factor = la.eigh(self.gram)
        return self._factor

    def precond_spectrum(self) -> Tuple[float, float]:
        """Extreme eigenvalues of the Gram block, equal to those of P_t"""
        vals, _ = self._eig()
        return float(vals[0]), float(vals[-1])

    def precond_apply(self, v: np.ndarray, mode: str = 'inverse') -> np.ndarray:
        """Apply P_t^{-1} or P_t^{-1/2} blockwise through one d x d eigendecomposition

        Args:
            v (np.ndarray): Vector of length dn, or a batch (C, dn)
            mode (str): 'inverse' or 'inverse-sqrt'

        Returns:
            np.ndarray: The transformed vector(s)
        """
        v = self._check_theta(v)
        op = self._ops.get(mode)
        if op is None:
            vals, vecs = self._eig()
            if mode == 'inverse':
                scale = 1.0 / vals
            elif mode == 'inverse-sqrt':
                scale = 1.0 / np.sqrt(vals)
            else:
                raise ValueError(f"Unknown preconditioner mode: {mode}")
            op = self._ops[mode] = (vecs * scale) @ vecs.T
        blocks = v.reshape(v.shape[:-1] + (self.n, self.d))
        return (blocks @ op).reshape(v.shape)


def init_potential(lam: float, prior_mean: np.ndarray, noise: NoiseModel,
                   n_u: Optional[int] = None) -> PotentialState:
    return PotentialState(lam, prior_mean, noise, n_u)
