import logging
import os
import struct
from abc import ABC, abstractmethod
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la

from engine import config
from engine.errors import CalibrationFailure, DimensionMismatch, InvalidModel, ReservoirEmpty

logger = logging.getLogger('NoiseModel')

# Reservoir cache: two little-endian uint32 (dim, count) followed by float64 rows
_RESERVOIR_HEADER = struct.Struct('<II')


class NoiseModel(ABC):
    """A strongly log-concave, zero-mean noise law on R^n.

    Scores and Hessians accept arrays of shape (..., n) and act on the last
    axis, so a whole dataset or a batch of chains is evaluated in one call.
    Normalization constants never enter.
    """

    kind: str = ''

    def __init__(self, dim: int):
        if dim < 1:
            raise InvalidModel(f"Noise dimension must be positive, got {dim}")
        self.dim = dim

    def _check(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape[-1:] != (self.dim,):
            raise DimensionMismatch(f"Expected trailing dimension {self.dim}, got shape {w.shape}")
        return w

    @abstractmethod
    def log_pdf(self, w: np.ndarray) -> np.ndarray:
        """Unnormalized log density"""

    @abstractmethod
    def log_pdf_grad(self, w: np.ndarray) -> np.ndarray:
        """Score: gradient of log p_w"""

    @abstractmethod
    def log_pdf_hessian(self, w: np.ndarray) -> np.ndarray:
        """Hessian of log p_w, shape (..., n, n)"""

    @abstractmethod
    def hessian_bounds(self) -> Tuple[float, float]:
        """Certified (m_lower, m_upper) with m_lower I <= -Hess log p_w <= m_upper I"""

    @abstractmethod
    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        """Draw one vector, or `size` rows"""

    @property
    @abstractmethod
    def W(self) -> np.ndarray:
        """Covariance matrix of the law"""

    @property
    def m_lower(self) -> float:
        return self.hessian_bounds()[0]

    @property
    def m_upper(self) -> float:
        return self.hessian_bounds()[1]

    def __repr__(self) -> str:
        m_lo, m_hi = self.hessian_bounds()
        return f"{type(self).__name__}(dim={self.dim}, m_lower={m_lo:.4g}, m_upper={m_hi:.4g})"


class GaussianNoise(NoiseModel):
    """Zero-mean Gaussian with covariance Sigma"""

    kind = 'gaussian'

    def __init__(self, cov: np.ndarray):
        cov = np.atleast_2d(np.array(cov, dtype=float))
        super().__init__(cov.shape[0])
        if cov.shape != (self.dim, self.dim) or np.max(np.abs(cov - cov.T)) > 1e-12:
            raise InvalidModel("Gaussian covariance must be a symmetric square matrix")
        try:
            self._chol = la.cholesky(cov, lower=True)
        except la.LinAlgError as e:
            raise InvalidModel(f"Gaussian covariance is not positive definite: {e}")
        self._cov = cov
        self._precision = la.cho_solve((self._chol, True), np.eye(self.dim))
        self._precision = 0.5 * (self._precision + self._precision.T)
        eig = la.eigvalsh(self._precision)
        self._bounds = (float(eig[0]), float(eig[-1]))

    @classmethod
    def standard(cls, dim: int) -> 'GaussianNoise':
        return cls(np.eye(dim))

    def log_pdf(self, w):
        w = self._check(w)
        return -0.5 * np.einsum('...i,ij,...j->...', w, self._precision, w)

    def log_pdf_grad(self, w):
        w = self._check(w)
        return -w @ self._precision

    def log_pdf_hessian(self, w):
        w = self._check(w)
        return np.broadcast_to(-self._precision, w.shape[:-1] + (self.dim, self.dim)).copy()

    def hessian_bounds(self):
        return self._bounds

    def sample(self, rng, size=None):
        g = rng.standard_normal(self.dim if size is None else (size, self.dim))
        return g @ self._chol.T

    @property
    def W(self):
        return self._cov


class GaussianMixtureNoise(NoiseModel):
    """Equal-weight mixture of N(a, I) and N(-a, I).

    Strongly log-concave as long as |a| < 1, with
    (1 - |a|^2) I <= -Hess log p_w <= I.
    """

    kind = 'gaussian-mixture'

    def __init__(self, a: np.ndarray):
        a = np.atleast_1d(np.array(a, dtype=float))
        super().__init__(a.shape[0])
        sq = float(a @ a)
        if sq >= 1.0:
            raise InvalidModel(f"Mixture offset must satisfy |a|^2 < 1 for log-concavity, got {sq:.4g}")
        self.a = a
        self._bounds = (1.0 - sq, 1.0)

    def log_pdf(self, w):
        w = self._check(w)
        return -0.5 * np.sum(w * w, axis=-1) + np.logaddexp(w @ self.a, -(w @ self.a))

    def log_pdf_grad(self, w):
        # -(w - a + 2a / (1 + e^{2 w^T a})) = -w + a tanh(w^T a)
        w = self._check(w)
        return -w + np.asarray(np.tanh(w @ self.a))[..., None] * self.a

    def log_pdf_hessian(self, w):
        w = self._check(w)
        sech2 = np.asarray(1.0 / np.cosh(np.clip(w @ self.a, -350.0, 350.0)) ** 2)
        outer = np.outer(self.a, self.a)
        return -np.eye(self.dim) + sech2[..., None, None] * outer

    def hessian_bounds(self):
        return self._bounds

    def sample(self, rng, size=None):
        shape = self.dim if size is None else (size, self.dim)
        signs = rng.choice([-1.0, 1.0], size=None if size is None else (size, 1))
        return signs * self.a + rng.standard_normal(shape)

    @property
    def W(self):
        return np.eye(self.dim) + np.outer(self.a, self.a)


def _piecewise_pieces(x: np.ndarray, alpha: float, beta: float) -> Tuple[np.ndarray, np.ndarray]:
    return np.clip(x, alpha, beta) - alpha, np.maximum(x - beta, 0.0)


class AsymmetricNoise(NoiseModel):
    """Independent coordinates; masked coordinates have a piecewise-linear
    negative log-Hessian (m below alpha, M above beta, linear in between),
    the others are standard Gaussian.

    The law is sampled from an offline ULA reservoir that is recentered to
    zero mean; `shift` folds that recentering into the score.
    """

    kind = 'asymmetric-piecewise'

    def __init__(self, dim: int, m: float, M: float, alpha: float, beta: float,
                 mask: Optional[Sequence[bool]] = None):
        super().__init__(dim)
        if not alpha < beta:
            raise InvalidModel(f"Knots must satisfy alpha < beta, got {alpha}, {beta}")
        if not 0.0 < m <= M:
            raise InvalidModel(f"Curvatures must satisfy 0 < m <= M, got {m}, {M}")
        if mask is None:
            mask = [False] * (dim - 1) + [True]
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (dim,):
            raise DimensionMismatch(f"Mask has shape {mask.shape}, expected ({dim},)")
        self.m, self.M, self.alpha, self.beta = float(m), float(M), float(alpha), float(beta)
        self.mask = mask
        self._slope = (self.M - self.m) / (self.beta - self.alpha)
        self.shift = np.zeros(dim)
        self._raw_reservoir: Optional[np.ndarray] = None
        self._reservoir: Optional[np.ndarray] = None
        self._cov: Optional[np.ndarray] = None

    # Antiderivatives of the curvature h(x): G' = h, F' = G
    def _G(self, x):
        lo, hi = _piecewise_pieces(x, self.alpha, self.beta)
        return self.m * x + 0.5 * self._slope * lo ** 2 + (self.M - self.m) * hi

    def _F(self, x):
        lo, hi = _piecewise_pieces(x, self.alpha, self.beta)
        return (0.5 * self.m * x ** 2 + self._slope * lo ** 3 / 6.0
                + 0.5 * self._slope * (self.beta - self.alpha) ** 2 * hi
                + 0.5 * (self.M - self.m) * hi ** 2)

    def _curvature(self, x):
        return np.clip(self.m + self._slope * (x - self.alpha), self.m, self.M)

    def _potential(self, x):
        # V(0) = V'(0) = 0 and V'' = h
        g0 = self._G(np.zeros(()))
        return self._F(x) - self._F(np.zeros(())) - g0 * x

    def _raw_log_pdf(self, v):
        return -np.sum(np.where(self.mask, self._potential(v), 0.5 * v ** 2), axis=-1)

    def _raw_score(self, v):
        return -np.where(self.mask, self._G(v) - self._G(np.zeros(())), v)

    def log_pdf(self, w):
        return self._raw_log_pdf(self._check(w) + self.shift)

    def log_pdf_grad(self, w):
        return self._raw_score(self._check(w) + self.shift)

    def log_pdf_hessian(self, w):
        v = self._check(w) + self.shift
        diag = -np.where(self.mask, self._curvature(v), 1.0)
        out = np.zeros(v.shape + (self.dim,))
        idx = np.arange(self.dim)
        out[..., idx, idx] = diag
        return out

    def hessian_bounds(self):
        if np.all(self.mask):
            return (self.m, self.M)
        return (min(self.m, 1.0), max(self.M, 1.0))

    @property
    def calibrated(self) -> bool:
        return self._reservoir is not None

    @property
    def reservoir(self) -> np.ndarray:
        if self._reservoir is None:
            raise ReservoirEmpty("Asymmetric noise model has not been calibrated")
        return self._reservoir

    def attach_reservoir(self, raw: np.ndarray):
        """Install raw chain output: recenter it, fold the mean into the score
        and estimate the covariance from the recentered rows."""
        raw = np.asarray(raw, dtype=float)
        if raw.ndim != 2 or raw.shape[1] != self.dim or raw.shape[0] < 2:
            raise DimensionMismatch(f"Reservoir must have shape (count, {self.dim}), got {raw.shape}")
        mean = raw.mean(axis=0)
        self._raw_reservoir = raw
        self._reservoir = raw - mean
        self.shift = mean
        self._cov = np.cov(self._reservoir, rowvar=False).reshape(self.dim, self.dim)

    def sample(self, rng, size=None):
        reservoir = self.reservoir
        idx = rng.integers(reservoir.shape[0], size=size)
        return reservoir[idx].copy()

    @property
    def W(self):
        if self._cov is None:
            raise ReservoirEmpty("Covariance of the asymmetric law is estimated during calibration")
        return self._cov

    def save_reservoir(self, path: str):
        """Write the raw reservoir as little-endian float64 rows behind a (dim, count) header"""
        if self._raw_reservoir is None:
            raise ReservoirEmpty("Nothing to save: model has not been calibrated")
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        rows = np.ascontiguousarray(self._raw_reservoir, dtype='<f8')
        with open(path, 'wb') as f:
            f.write(_RESERVOIR_HEADER.pack(self.dim, rows.shape[0]))
            f.write(rows.tobytes(order='C'))
        logger.info(f"Saved {rows.shape[0]} reservoir rows to {path}")


def load_reservoir(path: str) -> np.ndarray:
    """Read a reservoir cache file written by `AsymmetricNoise.save_reservoir`"""
    with open(path, 'rb') as f:
        header = f.read(_RESERVOIR_HEADER.size)
        if len(header) != _RESERVOIR_HEADER.size:
            raise ReservoirEmpty(f"Reservoir cache {path} is truncated")
        dim, count = _RESERVOIR_HEADER.unpack(header)
        data = np.frombuffer(f.read(), dtype='<f8')
    if data.size != dim * count:
        raise ReservoirEmpty(f"Reservoir cache {path} holds {data.size} values, header promises {dim * count}")
    return data.reshape(count, dim).astype(float)


def _offline_ula(model: AsymmetricNoise, reservoir_size: int, rng: np.random.Generator,
                 burn_in: int, thinning: int, n_chains: int) -> np.ndarray:
    # Lock-step independent chains on the raw (unshifted) potential
    gamma = model.m / (16.0 * model.M ** 2)
    noise_scale = np.sqrt(2.0 * gamma)
    n_chains = max(1, min(n_chains, reservoir_size))
    draws_per_chain = -(-reservoir_size // n_chains)
    v = np.zeros((n_chains, model.dim))

    for _ in range(burn_in):
        v = v + gamma * model._raw_score(v) + noise_scale * rng.standard_normal(v.shape)

    out = np.empty((draws_per_chain, n_chains, model.dim))
    for i in range(draws_per_chain):
        for _ in range(thinning):
            v = v + gamma * model._raw_score(v) + noise_scale * rng.standard_normal(v.shape)
        out[i] = v
    return out.reshape(-1, model.dim)[:reservoir_size]


def _check_drift(raw: np.ndarray, max_drift: float):
    half = raw.shape[0] // 2
    drift = np.abs(raw[:half].mean(axis=0) - raw[half:].mean(axis=0))
    scale = raw.std(axis=0)
    bad = drift > max_drift * scale
    if np.any(bad):
        logger.error(f"Calibration drift {drift} exceeds {max_drift:.0%} of std {scale}")
        raise CalibrationFailure("Mean drift between reservoir halves too large",
                                 {'drift': drift.tolist(), 'std': scale.tolist()})


def build_asymmetric(n: int, m: float, M: float,
                     alpha: float = config.ASYMMETRIC_ALPHA,
                     beta: float = config.ASYMMETRIC_BETA,
                     reservoir_size: int = config.CALIBRATION_RESERVOIR,
                     rng: Optional[np.random.Generator] = None,
                     mask: Optional[Sequence[bool]] = None,
                     burn_in: int = config.CALIBRATION_BURN_IN,
                     thinning: int = config.CALIBRATION_THINNING,
                     n_chains: int = config.CALIBRATION_CHAINS,
                     cache_path: Optional[str] = None,
                     max_drift: float = config.CALIBRATION_MAX_DRIFT) -> AsymmetricNoise:
    """Construct and calibrate the asymmetric noise law.

    Args:
        n (int): Noise dimension
        m (float): Curvature below alpha
        M (float): Curvature above beta
        alpha (float): Lower knot
        beta (float): Upper knot
        reservoir_size (int): Number of stored draws
        rng (Optional[np.random.Generator]): Stream driving the offline chains
        mask (Optional[Sequence[bool]]): Coordinates with piecewise curvature
        cache_path (Optional[str]): Reservoir cache; read when present, written otherwise

    Returns:
        AsymmetricNoise: Calibrated model with zero-mean reservoir and estimated W

    Raises:
        CalibrationFailure: If the drift diagnostic fails
    """
    model = AsymmetricNoise(n, m, M, alpha, beta, mask)

    if cache_path and os.path.exists(cache_path):
        raw = load_reservoir(cache_path)
        if raw.shape[1] == n and raw.shape[0] == reservoir_size:
            model.attach_reservoir(raw)
            logger.info(f"Loaded asymmetric reservoir from {cache_path}")
            return model
        logger.warning(f"Ignoring reservoir cache {cache_path} with shape {raw.shape}")

    rng = rng if rng is not None else np.random.default_rng(0)
    logger.info(f"Calibrating asymmetric noise (n={n}, m={m}, M={M}, alpha={alpha}, beta={beta}) "
                f"with {reservoir_size} draws")
    raw = _offline_ula(model, reservoir_size, rng, burn_in, thinning, n_chains)
    _check_drift(raw, max_drift)
    model.attach_reservoir(raw)

    if cache_path:
        model.save_reservoir(cache_path)
    return model


def log_density_hessian_spectrum(model: NoiseModel, w: np.ndarray) -> np.ndarray:
    """Eigenvalues of -Hess log p_w at each row of w"""
    return np.linalg.eigvalsh(-model.log_pdf_hessian(w))
