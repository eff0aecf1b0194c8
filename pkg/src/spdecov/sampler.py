"""Path simulation for ``dX + A X dt = dW`` on (0, 1).

Two routes are available:

* exact spectral recursion of the mode coefficients, valid when the noise
  covariance shares eigenfunctions with ``A``;
* backward Euler in time with P1 finite elements in space, driven by Gaussian
  field increments (circulant embedding for Matern noise on uniform grids).
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, NumericalError
from .estimator import PathObservations
from .kernels import KernelSpec, Matern
from .observation import ObservationScheme, observation_matrix
from .spectral import Boundary, SpectralOperator

log = logging.getLogger(__name__)


def replication_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream identified by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def _steps_between(span: float, step: float, what: str) -> int:
    n = span / step
    k = int(round(n))
    if k < 1 or abs(n - k) > 1e-12 * max(1.0, n):
        raise ConfigurationError(f"{what}: {span} is not an integer multiple of {step}")
    return k


@dataclass(frozen=True, eq=False)
class SimulationConfig:
    horizon: float = 1.0
    sim_step: float = 2.0 ** -18
    fine_grid: np.ndarray | None = None
    seed: int = 0
    initial_condition: np.ndarray | None = None

    def __post_init__(self):
        if self.horizon <= 0 or self.sim_step <= 0:
            raise ConfigurationError("horizon and sim_step must be positive")
        _steps_between(self.horizon, self.sim_step, "horizon")
        if self.fine_grid is not None:
            g = np.asarray(self.fine_grid, dtype=float)
            if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
                raise ConfigurationError("fine grid must be strictly increasing")
            if abs(g[0]) > 1e-14 or abs(g[-1] - 1) > 1e-14:
                raise ConfigurationError("fine grid must start at 0 and end at 1")
            object.__setattr__(self, "fine_grid", g)

    @property
    def n_steps(self) -> int:
        return _steps_between(self.horizon, self.sim_step, "horizon")


class Representation(str, enum.Enum):
    MODES = "modes"
    NODAL = "nodal"


@dataclass(frozen=True, eq=False)
class PathLattice:
    """Simulated path on a (time x space) lattice; row ``n`` is time ``n * sim_step``."""

    values: np.ndarray
    sim_step: float
    representation: Representation
    grid: np.ndarray | None = None
    operator: SpectralOperator | None = None

    @property
    def horizon(self) -> float:
        return (self.values.shape[0] - 1) * self.sim_step

    def to_csv(self, path):
        from .estimator import write_observations_csv

        write_observations_csv(path, self.values)


# ---------------------------------------------------------------- spectral route

def transition_std(op: SpectralOperator, mu, dt: float) -> np.ndarray:
    """Standard deviation of the exact OU transition noise per mode."""
    lam = op.eigenvalues()
    # (1 - exp(-2 lam dt)) / (2 lam) without cancellation for small lam*dt
    return np.sqrt(np.asarray(mu, dtype=float) * -np.expm1(-2.0 * lam * dt) / (2.0 * lam))


def _check_mu(op, mu):
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (op.mode_count,):
        raise ConfigurationError(f"need {op.mode_count} noise eigenvalues, got {mu.shape}")
    if np.any(mu < 0) or not np.all(np.isfinite(mu)):
        raise ValueError("noise eigenvalues must be finite and nonnegative")
    return mu


def ou_modes(op: SpectralOperator, mu, dt: float, n_steps: int, rng: np.random.Generator,
             x0=None, block: int = 1024) -> np.ndarray:
    """Mode coefficients at times ``0, dt, ..., n_steps*dt``; shape ``(n_steps+1, N)``."""
    mu = _check_mu(op, mu)
    phi = op.semigroup_factors(dt)
    sd = transition_std(op, mu, dt)
    m = op.mode_count
    out = np.empty((n_steps + 1, m))
    a = np.zeros(m) if x0 is None else np.asarray(x0, dtype=float).copy()
    if a.shape != (m,):
        raise ConfigurationError("initial condition must be one coefficient per mode")
    out[0] = a
    n = 0
    while n < n_steps:
        b = min(block, n_steps - n)
        eta = rng.standard_normal((b, m)) * sd
        for i in range(b):
            a = phi * a + eta[i]
            out[n + 1 + i] = a
        n += b
    return out


def simulate_spectral(op: SpectralOperator, q_eigs, cfg: SimulationConfig, n_paths: int = 1
                      ) -> list[PathLattice]:
    """Exact OU simulation of each mode; path ``r`` uses the stream ``(cfg.seed, r)``."""
    _check_mu(op, q_eigs)
    paths = []
    for r in range(n_paths):
        rng = replication_rng(cfg.seed, r)
        vals = ou_modes(op, q_eigs, cfg.sim_step, cfg.n_steps, rng, cfg.initial_condition)
        paths.append(PathLattice(vals, cfg.sim_step, Representation.MODES, operator=op))
    return paths


def modes_to_grid(path: PathLattice, op: SpectralOperator | None, grid) -> PathLattice:
    """Evaluate ``sum_j a_j(t) e_j(x)`` at the given points."""
    if path.representation is not Representation.MODES:
        raise ValueError("path is already nodal")
    op = op or path.operator
    grid = np.asarray(grid, dtype=float)
    vals = path.values @ op.basis_matrix(grid).T
    return PathLattice(vals, path.sim_step, Representation.NODAL, grid=grid)


def modal_observation_matrix(op: SpectralOperator, scheme: ObservationScheme) -> np.ndarray:
    """Map mode coefficients to observed values (vertex values or exact cell averages)."""
    if scheme.uses_hat_basis:
        return op.basis_matrix(scheme.points)
    t = scheme.subdivision.breakpoints
    a, b = t[:-1, None], t[1:, None]
    j = op.indices[None, :].astype(float)
    w = b - a
    with np.errstate(divide="ignore", invalid="ignore"):
        if op.boundary is Boundary.DIRICHLET:
            avg = np.sqrt(2.0) * (np.cos(j * np.pi * a) - np.cos(j * np.pi * b)) / (j * np.pi * w)
        else:
            avg = np.sqrt(2.0) * (np.sin(j * np.pi * b) - np.sin(j * np.pi * a)) / (j * np.pi * w)
            avg = np.where(j == 0, 1.0, avg)
    return avg


# ---------------------------------------------------------------- Gaussian fields

class CirculantEmbedding:
    """Exact sampler of a stationary Gaussian vector on a uniform grid.

    The covariance Toeplitz matrix is embedded in a circulant of size
    ``2 (n - 1)``; if that is not nonnegative definite the padding is doubled
    up to twice, after which negative eigenvalues are clipped with a warning.
    """

    def __init__(self, kernel: Matern, n_points: int, spacing: float, max_doublings: int = 2,
                 tol: float = 1e-10):
        if n_points < 2:
            raise ConfigurationError("need at least two grid points")
        self.kernel = kernel
        self.n = int(n_points)
        self.spacing = float(spacing)
        self.clipped_mass = 0.0
        size = 2 * (self.n - 1)
        for attempt in range(max_doublings + 1):
            half = size // 2
            lags = np.arange(half + 1) * self.spacing
            c = kernel.variance * _stationary_corr(kernel, lags)
            row = np.concatenate([c, c[-2:0:-1]])
            eig = np.fft.fft(row).real
            if eig.min() >= -tol:
                break
            if attempt < max_doublings:
                size *= 2
        self.size = size
        self.min_eigenvalue = float(eig.min())
        if self.min_eigenvalue < -tol:
            neg = -eig[eig < 0].sum()
            self.clipped_mass = float(neg / np.abs(eig).sum())
            msg = (f"circulant embedding not nonnegative definite after {max_doublings} doublings "
                   f"(smallest eigenvalue {self.min_eigenvalue:.3e}); clipped mass {self.clipped_mass:.3e}")
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            log.warning(msg)
        self._scale = np.sqrt(np.clip(eig, 0.0, None) / size)

    def sample(self, rng: np.random.Generator, count: int = 1) -> np.ndarray:
        """``count`` independent draws, shape ``(count, n)``."""
        pairs = (count + 1) // 2
        z = rng.standard_normal((pairs, self.size)) + 1j * rng.standard_normal((pairs, self.size))
        y = np.fft.fft(self._scale * z, axis=-1)[:, : self.n]
        return np.concatenate([y.real, y.imag], axis=0)[:count]


def _stationary_corr(kernel: Matern, lags):
    from .kernels import matern_correlation

    return matern_correlation(lags, kernel.smoothness, kernel.range)


class FactorSampler:
    """Gaussian vector sampler through a symmetric square root of the covariance matrix."""

    def __init__(self, cov: np.ndarray):
        w, v = np.linalg.eigh(0.5 * (cov + cov.T))
        self.n = cov.shape[0]
        self.min_eigenvalue = float(w.min())
        self._root = v * np.sqrt(np.clip(w, 0.0, None))

    def sample(self, rng: np.random.Generator, count: int = 1) -> np.ndarray:
        return rng.standard_normal((count, self.n)) @ self._root.T


def field_sampler(kernel: KernelSpec, grid):
    """Pick circulant embedding for Matern noise on uniform grids, else a matrix square root."""
    grid = np.asarray(grid, dtype=float)
    h = np.diff(grid)
    if isinstance(kernel, Matern) and np.allclose(h, h[0], rtol=1e-10, atol=0):
        return CirculantEmbedding(kernel, grid.size, h[0])
    return FactorSampler(kernel.matrix(grid))


def sample_matern_field(params: Matern, grid, rng: np.random.Generator) -> np.ndarray:
    """One draw of the centered Gaussian vector with covariance ``[q(x_i, x_j)]``."""
    grid = np.asarray(grid, dtype=float)
    h = np.diff(grid)
    if not np.allclose(h, h[0], rtol=1e-10, atol=0):
        raise ConfigurationError("circulant embedding needs a uniform grid")
    return CirculantEmbedding(params, grid.size, h[0]).sample(rng, 1)[0]


# ---------------------------------------------------------------- finite elements

def p1_mass_matrix(grid) -> np.ndarray:
    w = np.diff(np.asarray(grid, dtype=float))
    n = w.size + 1
    m = np.zeros((n, n))
    i = np.arange(w.size)
    m[i, i] += w / 3
    m[i + 1, i + 1] += w / 3
    m[i, i + 1] += w / 6
    m[i + 1, i] += w / 6
    return m


def p1_stiffness_matrix(grid) -> np.ndarray:
    """Stiffness matrix of ``-u''`` with natural (Neumann) boundary conditions."""
    w = np.diff(np.asarray(grid, dtype=float))
    n = w.size + 1
    k = np.zeros((n, n))
    i = np.arange(w.size)
    k[i, i] += 1 / w
    k[i + 1, i + 1] += 1 / w
    k[i, i + 1] -= 1 / w
    k[i + 1, i] -= 1 / w
    return k


class BackwardEulerFEM:
    """Step ``(M + dt K) x_n = M (x_{n-1} + xi_n)`` with ``K = c M + a S``."""

    def __init__(self, op: SpectralOperator, grid, dt: float):
        if op.boundary is not Boundary.NEUMANN:
            raise ConfigurationError("the FEM route implements Neumann boundary conditions only")
        grid = np.asarray(grid, dtype=float)
        self.grid = grid
        self.dt = float(dt)
        mass = p1_mass_matrix(grid)
        stiff = op.base_shift * mass + op.diffusivity * p1_stiffness_matrix(grid)
        system = mass + self.dt * stiff
        try:
            factor = linalg.cho_factor(system)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"backward Euler system not positive definite: {exc}") from exc
        # dense propagator; grids here are small enough that this beats banded solves
        self.propagator = linalg.cho_solve(factor, mass)

    def step(self, x, forcing=None):
        """Advance states stored as rows of ``x``."""
        rhs = x if forcing is None else x + forcing
        return rhs @ self.propagator.T


def fem_paths(op: SpectralOperator, noise: KernelSpec, grid, dt: float, n_steps: int,
              rngs, record_every: int = 1, x0=None, block: int = 256) -> np.ndarray:
    """Nodal states recorded every ``record_every`` steps; shape ``(paths, records, nodes)``.

    ``rngs`` is one generator per path (a single generator means one path), so
    a batch reproduces the paths that would be simulated one at a time.
    """
    if isinstance(rngs, np.random.Generator):
        rngs = [rngs]
    grid = np.asarray(grid, dtype=float)
    stepper = BackwardEulerFEM(op, grid, dt)
    if n_steps % record_every:
        raise ConfigurationError("record_every must divide the number of steps")
    sampler = field_sampler(noise, grid)
    n = grid.size
    n_paths = len(rngs)
    x = np.zeros((n_paths, n)) if x0 is None else np.broadcast_to(np.asarray(x0, float), (n_paths, n)).copy()
    out = np.empty((n_paths, n_steps // record_every + 1, n))
    out[:, 0] = x
    sq = np.sqrt(dt)
    done = 0
    while done < n_steps:
        b = min(block, n_steps - done)
        xi = sq * np.stack([sampler.sample(g, b) for g in rngs], axis=1)
        for i in range(b):
            x = stepper.step(x, xi[i])
            k = done + i + 1
            if k % record_every == 0:
                out[:, k // record_every] = x
        done += b
    return out


def simulate_fem(op: SpectralOperator, matern: KernelSpec | None, cfg: SimulationConfig) -> PathLattice:
    """Single backward-Euler P1 path on ``cfg.fine_grid`` (stream ``(cfg.seed, 0)``).

    ``matern=None`` runs the deterministic scheme without noise.
    """
    if cfg.fine_grid is None:
        raise ConfigurationError("FEM simulation needs a fine grid")
    grid = cfg.fine_grid
    if matern is not None:
        rng = replication_rng(cfg.seed, 0)
        vals = fem_paths(op, matern, grid, cfg.sim_step, cfg.n_steps, rng, 1, cfg.initial_condition)[0]
        return PathLattice(vals, cfg.sim_step, Representation.NODAL, grid=grid)
    stepper = BackwardEulerFEM(op, grid, cfg.sim_step)
    x = np.zeros(grid.size) if cfg.initial_condition is None else np.asarray(cfg.initial_condition, float)
    vals = np.empty((cfg.n_steps + 1, grid.size))
    vals[0] = x
    for k in range(cfg.n_steps):
        x = stepper.step(x)
        vals[k + 1] = x
    return PathLattice(vals, cfg.sim_step, Representation.NODAL, grid=grid)


# ---------------------------------------------------------------- subsampling

def subsample(path: PathLattice, obs_step: float, scheme: ObservationScheme) -> PathObservations:
    """Observe a simulated path every ``obs_step`` through ``scheme``."""
    stride = _steps_between(obs_step, path.sim_step, "observation step")
    rows = path.values[::stride]
    horizon = path.horizon
    n_obs = int(np.floor(horizon / obs_step + 1e-9))
    rows = rows[: n_obs + 1]
    if path.representation is Representation.MODES:
        mat = modal_observation_matrix(path.operator, scheme)
    else:
        mat = observation_matrix(scheme, path.grid)
    return PathObservations(rows @ mat.T, obs_step, horizon, scheme)


def modal_observations(path: PathLattice, obs_step: float) -> PathObservations:
    """Observe the mode coefficients themselves (identity setting, orthonormal basis)."""
    if path.representation is not Representation.MODES:
        raise ValueError("path is not in mode coordinates")
    stride = _steps_between(obs_step, path.sim_step, "observation step")
    n_obs = int(np.floor(path.horizon / obs_step + 1e-9))
    rows = path.values[::stride][: n_obs + 1]
    return PathObservations(rows, obs_step, path.horizon, None, path.operator)
