import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Union

import numpy as np

from engine import config as defaults
from engine.errors import TsldError
from engine.lqr import AdmissibleSet, CostSpec, SystemParams
from engine.noise import GaussianMixtureNoise, GaussianNoise, NoiseModel, build_asymmetric
from engine.simulator import ExcitationSpec, SimulationConfig

logger = logging.getLogger('ExperimentConfig')

Matrix = List[List[float]]

ALGORITHMS = ('tsld', 'psrl')
NOISE_KINDS = ('gaussian', 'gaussian-mixture', 'asymmetric-piecewise')

PRESETS: Dict[str, Dict[str, Any]] = {
    'paper-3x3': {
        'A': [[0.3, 0.1, 0.2],
              [0.1, 0.4, 0.0],
              [0.0, 0.7, 0.6]],
        'B': [[0.5, 0.4, 0.5],
              [0.6, 0.3, 0.0],
              [0.3, 0.0, 0.2]],
        'mixture_offset': 0.5,
        'lam': 5.0,
        'asymmetric': {'m': 1.0, 'M': 10.0, 'mask': [False, False, True]},
    },
    'paper-5x5': {
        'A': [[0.3, 0.6, 0.2, 0.3, 0.1],
              [0.0, 0.1, 0.4, 0.0, 0.6],
              [0.1, 0.5, 0.3, 0.0, 0.2],
              [0.4, 0.0, 0.3, 0.3, 0.0],
              [0.3, 0.3, 0.1, 0.4, 0.4]],
        'B': [[0.5, 0.4, 0.2, 0.5, 0.4],
              [0.6, 0.0, 0.3, 0.1, 0.3],
              [0.5, 0.0, 0.0, 0.1, 0.2],
              [0.1, 0.5, 0.0, 0.2, 0.4],
              [0.2, 0.1, 0.6, 0.0, 0.0]],
        'mixture_offset': 0.25,
        'lam': 5.0,
        'asymmetric': {'m': 1.0, 'M': 10.0, 'mask': [False] * 4 + [True]},
    },
    'paper-10x10': {
        'A': [[0.6, 0.6, 0.5, 0.0, 0.1, 0.4, 0.3, 0.3, 0.3, 0.4],
              [0.3, 0.2, 0.6, 0.0, 0.1, 0.0, 0.2, 0.5, 0.2, 0.0],
              [0.0, 0.6, 0.0, 0.3, 0.4, 0.0, 0.5, 0.4, 0.1, 0.3],
              [0.4, 0.1, 0.5, 0.6, 0.6, 0.5, 0.1, 0.1, 0.6, 0.0],
              [0.5, 0.1, 0.2, 0.0, 0.1, 0.1, 0.1, 0.0, 0.6, 0.4],
              [0.1, 0.2, 0.2, 0.1, 0.2, 0.0, 0.5, 0.2, 0.5, 0.7],
              [0.3, 0.6, 0.1, 0.6, 0.1, 0.0, 0.3, 0.4, 0.6, 0.3],
              [0.3, 0.0, 0.5, 0.2, 0.2, 0.7, 0.4, 0.1, 0.4, 0.3],
              [0.0, 0.3, 0.3, 0.5, 0.3, 0.5, 0.1, 0.0, 0.1, 0.5],
              [0.3, 0.0, 0.0, 0.5, 0.0, 0.2, 0.4, 0.4, 0.0, 0.5]],
        'B': [[0.5, 0.4, 0.2, 0.5, 0.4, 0.0, 0.8, 0.1, 0.3, 0.7],
              [0.1, 0.4, 0.6, 0.0, 0.5, 0.0, 0.3, 0.1, 0.3, 0.2],
              [0.0, 0.5, 0.0, 0.6, 0.6, 0.5, 0.0, 0.0, 0.1, 0.2],
              [0.4, 0.4, 0.3, 0.5, 0.0, 0.1, 0.5, 0.0, 0.2, 0.4],
              [0.2, 0.1, 0.4, 0.0, 0.0, 0.7, 0.1, 0.1, 0.5, 0.3],
              [0.4, 0.5, 0.0, 0.6, 0.0, 0.4, 0.6, 0.1, 0.4, 0.5],
              [0.3, 0.5, 0.0, 0.3, 0.1, 0.7, 0.2, 0.0, 0.4, 0.6],
              [0.2, 0.0, 0.1, 0.6, 0.2, 0.7, 0.0, 0.1, 0.4, 0.4],
              [0.0, 0.2, 0.2, 0.2, 0.0, 0.0, 0.0, 0.3, 0.1, 0.4],
              [0.2, 0.5, 0.1, 0.3, 0.0, 0.5, 0.4, 0.4, 0.2, 0.3]],
        'mixture_offset': 0.125,
        'lam': 10.0,
        'asymmetric': {'m': 1.0, 'M': 2.0, 'mask': [False] * 5 + [True] * 5},
    },
}


class ConfigError(Exception):
    """Base class for configuration failures"""


class ParseError(ConfigError):
    """The configuration file is not valid JSON"""

    def __init__(self, message: str, path: str = '', line: Optional[int] = None,
                 column: Optional[int] = None, field_name: Optional[str] = None):
        where = path
        if line is not None:
            where += f":{line}:{column}"
        if field_name:
            where += f" (field '{field_name}')"
        super().__init__(f"{where}: {message}" if where else message)
        self.path, self.line, self.column, self.field_name = path, line, column, field_name


class ValidationError(ConfigError):
    """A configuration field violates an invariant"""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


@dataclass
class NoiseConfig:
    kind: str = 'gaussian-mixture'
    cov: Optional[Matrix] = None
    a: Optional[List[float]] = None
    m: float = 1.0
    M: float = 10.0
    alpha: float = defaults.ASYMMETRIC_ALPHA
    beta: float = defaults.ASYMMETRIC_BETA
    mask: Optional[List[bool]] = None
    reservoir_size: int = defaults.CALIBRATION_RESERVOIR
    burn_in: int = defaults.CALIBRATION_BURN_IN
    thinning: int = defaults.CALIBRATION_THINNING
    n_chains: int = defaults.CALIBRATION_CHAINS
    calibration_seed: int = 0
    cache_path: Optional[str] = None


@dataclass
class ExperimentConfig:
    """A fully expanded, validated experiment description"""

    A: Matrix
    B: Matrix
    noise: NoiseConfig
    Q: Matrix
    R: Matrix
    lam: float
    prior_mean: List[float]
    name: str = 'experiment'
    preset: Optional[str] = None
    S: float = defaults.ADMISSIBLE_S
    rho: float = defaults.ADMISSIBLE_RHO
    M_J: float = defaults.ADMISSIBLE_M_J
    horizon: int = 2000
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    excitation_cov: Union[float, str, Matrix] = defaults.EXCITATION_VARIANCE
    algorithm: str = 'tsld'
    output_dir: str = 'results'
    riccati_tol: float = defaults.RICCATI_TOL
    riccati_max_iter: int = defaults.RICCATI_MAX_ITER
    newton_tol: float = defaults.NEWTON_TOL
    newton_max_iter: int = defaults.NEWTON_MAX_ITER
    max_attempts: int = defaults.REJECTION_MAX_ATTEMPTS

    @property
    def n(self) -> int:
        return len(self.A)

    @property
    def n_u(self) -> int:
        return len(self.B[0])

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def replace(self, **changes) -> 'ExperimentConfig':
        data = self.to_dict()
        data.update(changes)
        return from_dict(data)


def _as_matrix(value: Any, name: str, rows: Optional[int] = None, cols: Optional[int] = None) -> Matrix:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ValidationError(name, "must be a numeric matrix")
    if arr.ndim != 2:
        raise ValidationError(name, f"must be two-dimensional, got {arr.ndim} dimension(s)")
    if rows is not None and arr.shape[0] != rows:
        raise ValidationError(name, f"expected {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ValidationError(name, f"expected {cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(name, "contains non-finite entries")
    return arr.tolist()


def _as_number(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(name, f"must be a number, got {value!r}")
    if not np.isfinite(value):
        raise ValidationError(name, "must be finite")
    return float(value)


def _as_int(value: Any, name: str) -> int:
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(name, f"must be an integer, got {value!r}")
    return value


def _as_vector(value: Any, name: str, length: int) -> List[float]:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ValidationError(name, "must be a number or a numeric vector")
    if arr.ndim == 0:
        arr = np.full(length, float(arr))
    if arr.shape != (length,):
        raise ValidationError(name, f"expected length {length}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(name, "contains non-finite entries")
    return arr.tolist()


def _noise_from_dict(raw: Dict[str, Any], n: int, preset: Optional[Dict[str, Any]]) -> NoiseConfig:
    if not isinstance(raw, dict):
        raise ValidationError('noise', "must be a JSON object")
    known = {f.name for f in fields(NoiseConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError('noise', f"unknown field(s) {sorted(unknown)}")
    kind = raw.get('kind', 'gaussian-mixture')
    if kind not in NOISE_KINDS:
        raise ValidationError('noise.kind', f"must be one of {NOISE_KINDS}, got {kind!r}")

    merged = dict(raw)
    if preset is not None and kind == 'asymmetric-piecewise':
        for key, value in preset['asymmetric'].items():
            merged.setdefault(key, value)
    for key in ('m', 'M', 'alpha', 'beta'):
        if key in merged:
            merged[key] = _as_number(merged[key], f"noise.{key}")
    for key in ('reservoir_size', 'burn_in', 'thinning', 'n_chains', 'calibration_seed'):
        if key in merged:
            merged[key] = _as_int(merged[key], f"noise.{key}")
            if merged[key] < (0 if key in ('burn_in', 'calibration_seed') else 1):
                raise ValidationError(f"noise.{key}", "out of range")
    if merged.get('mask') is not None:
        mask = merged['mask']
        if not isinstance(mask, list) or not all(isinstance(v, bool) for v in mask):
            raise ValidationError('noise.mask', "must be a list of booleans")
    if merged.get('cache_path') is not None and not isinstance(merged['cache_path'], str):
        raise ValidationError('noise.cache_path', "must be a path string")
    if kind == 'gaussian':
        merged['cov'] = _as_matrix(merged.get('cov', np.eye(n)), 'noise.cov', n, n)
    elif kind == 'gaussian-mixture':
        offset = merged.get('a', preset['mixture_offset'] if preset else None)
        if offset is None:
            raise ValidationError('noise.a', "mixture offset is required without a preset")
        merged['a'] = _as_vector(offset, 'noise.a', n)
        if float(np.dot(merged['a'], merged['a'])) >= 1.0:
            raise ValidationError('noise.a', "|a|^2 must be below 1 for strong log-concavity")
    else:
        if not merged.get('alpha', defaults.ASYMMETRIC_ALPHA) < merged.get('beta', defaults.ASYMMETRIC_BETA):
            raise ValidationError('noise.alpha', "alpha must be below beta")
        if not 0 < merged.get('m', 1.0) <= merged.get('M', 10.0):
            raise ValidationError('noise.m', "curvatures must satisfy 0 < m <= M")
        if merged.get('mask') is not None and len(merged['mask']) != n:
            raise ValidationError('noise.mask', f"expected length {n}")
    return NoiseConfig(**merged)


def from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    """Validate a configuration mapping and expand its preset

    Args:
        raw (Dict[str, Any]): Parsed JSON document

    Returns:
        ExperimentConfig: Validated configuration

    Raises:
        ValidationError: Naming the offending field
    """
    if not isinstance(raw, dict):
        raise ValidationError('<root>', "configuration must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError('<root>', f"unknown field(s) {sorted(unknown)}")

    data = dict(raw)
    preset = None
    if data.get('preset') is not None:
        if not isinstance(data['preset'], str) or data['preset'] not in PRESETS:
            raise ValidationError('preset', f"must be one of {sorted(PRESETS)}, got {data['preset']!r}")
        preset = PRESETS[data['preset']]
        data.setdefault('A', preset['A'])
        data.setdefault('B', preset['B'])
        data.setdefault('lam', preset['lam'])
        data.setdefault('name', data['preset'])

    if 'A' not in data or 'B' not in data:
        raise ValidationError('A' if 'A' not in data else 'B', "system matrices are required without a preset")
    A = _as_matrix(data['A'], 'A')
    n = len(A)
    if len(A[0]) != n:
        raise ValidationError('A', f"must be square, got {n}x{len(A[0])}")
    B = _as_matrix(data['B'], 'B', rows=n)
    n_u = len(B[0])
    d = n + n_u

    data['A'], data['B'] = A, B
    data['Q'] = _as_matrix(data.get('Q', (2.0 * np.eye(n)).tolist()), 'Q', n, n)
    data['R'] = _as_matrix(data.get('R', np.eye(n_u).tolist()), 'R', n_u, n_u)
    data['noise'] = _noise_from_dict(data.get('noise', {}), n, preset)
    data.setdefault('lam', 5.0)
    data['prior_mean'] = _as_vector(data.get('prior_mean', 0.5), 'prior_mean', d * n)

    for key in ('lam', 'S', 'rho', 'M_J', 'riccati_tol', 'newton_tol'):
        if key in data:
            data[key] = _as_number(data[key], key)
    for key in ('horizon', 'max_attempts', 'riccati_max_iter', 'newton_max_iter'):
        if key in data:
            data[key] = _as_int(data[key], key)

    if data['lam'] < 1.0:
        raise ValidationError('lam', "prior stiffness must be at least 1")
    if not 0.0 < data.get('rho', defaults.ADMISSIBLE_RHO) < 1.0:
        raise ValidationError('rho', "must lie in (0, 1)")
    for key in ('S', 'M_J', 'riccati_tol', 'newton_tol'):
        if key in data and data[key] <= 0:
            raise ValidationError(key, "must be positive")
    if data.get('horizon', 0) < 0:
        raise ValidationError('horizon', "must be non-negative")
    for key in ('max_attempts', 'riccati_max_iter', 'newton_max_iter'):
        if data.get(key, 1) < 1:
            raise ValidationError(key, "must be at least 1")
    if 'seeds' in data:
        if not isinstance(data['seeds'], list) or not data['seeds']:
            raise ValidationError('seeds', "must be a non-empty list of integers")
        data['seeds'] = [_as_int(s, 'seeds') for s in data['seeds']]
        if any(s < 0 for s in data['seeds']):
            raise ValidationError('seeds', "seeds must be non-negative")
    for key in ('name', 'output_dir'):
        if key in data and not isinstance(data[key], str):
            raise ValidationError(key, "must be a string")
    if data.get('algorithm', 'tsld') not in ALGORITHMS:
        raise ValidationError('algorithm', f"must be one of {ALGORITHMS}")

    excitation = data.get('excitation_cov', defaults.EXCITATION_VARIANCE)
    if isinstance(excitation, str):
        if excitation != 'matched':
            raise ValidationError('excitation_cov', "string value must be 'matched'")
    elif isinstance(excitation, (int, float)) and not isinstance(excitation, bool):
        if not 0 < excitation < float("inf"):
            raise ValidationError('excitation_cov', "variance must be positive")
        excitation = float(excitation)
    else:
        excitation = _as_matrix(excitation, 'excitation_cov', n_u, n_u)
    data['excitation_cov'] = excitation

    try:
        cfg = ExperimentConfig(**data)
        CostSpec(cfg.Q, cfg.R)
    except TsldError as e:
        raise ValidationError('Q/R', str(e))
    except TypeError as e:
        raise ValidationError('<root>', str(e))
    return cfg


def load_config(path: str) -> ExperimentConfig:
    """Load and validate a JSON experiment configuration

    Args:
        path (str): Path to the JSON file

    Returns:
        ExperimentConfig: Validated configuration with presets expanded

    Raises:
        ParseError: If the file cannot be read or is not valid JSON
        ValidationError: If a field violates an invariant
    """
    try:
        with open(path, 'r') as f:
            text = f.read()
    except OSError as e:
        logger.error(f"Error reading config {path}: {str(e)}")
        raise ParseError(str(e), path)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        logger.error(f"Invalid JSON in {path}: {e.msg} at line {e.lineno}")
        raise ParseError(e.msg, path, e.lineno, e.colno)
    cfg = from_dict(raw)
    logger.info(f"Loaded config {path} ({cfg.name}, n={cfg.n}, n_u={cfg.n_u}, T={cfg.horizon})")
    return cfg


def save_config(cfg: ExperimentConfig, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w') as f:
        json.dump(cfg.to_dict(), f, indent=2)


def build_noise(cfg: ExperimentConfig) -> NoiseModel:
    spec = cfg.noise
    if spec.kind == 'gaussian':
        return GaussianNoise(np.array(spec.cov))
    if spec.kind == 'gaussian-mixture':
        return GaussianMixtureNoise(np.array(spec.a))
    return build_asymmetric(cfg.n, spec.m, spec.M, spec.alpha, spec.beta,
                            reservoir_size=spec.reservoir_size,
                            rng=np.random.default_rng(spec.calibration_seed),
                            mask=spec.mask, burn_in=spec.burn_in, thinning=spec.thinning,
                            n_chains=spec.n_chains, cache_path=spec.cache_path)


def build_simulation(cfg: ExperimentConfig, noise: Optional[NoiseModel] = None) -> SimulationConfig:
    """Materialize the engine-level configuration of a single run"""
    system = SystemParams(np.array(cfg.A), np.array(cfg.B))
    cost = CostSpec(np.array(cfg.Q), np.array(cfg.R))
    noise = noise if noise is not None else build_noise(cfg)
    if cfg.excitation_cov == 'matched':
        excitation = ExcitationSpec.matched(noise.W, cfg.n_u)
    elif isinstance(cfg.excitation_cov, float):
        excitation = ExcitationSpec.isotropic(cfg.n_u, cfg.excitation_cov)
    else:
        excitation = ExcitationSpec(np.array(cfg.excitation_cov))
    return SimulationConfig(
        system=system, noise=noise, cost=cost,
        admissible=AdmissibleSet(cfg.S, cfg.rho, cfg.M_J, cost),
        lam=cfg.lam, prior_mean=np.array(cfg.prior_mean), horizon=cfg.horizon,
        excitation=excitation, riccati_tol=cfg.riccati_tol, riccati_max_iter=cfg.riccati_max_iter,
        newton_tol=cfg.newton_tol, newton_max_iter=cfg.newton_max_iter, max_attempts=cfg.max_attempts)
