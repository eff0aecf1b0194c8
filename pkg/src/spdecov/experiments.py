"""Monte-Carlo studies: RMSE convergence rates and test rejection rates.

Every replication draws from its own stream ``(seed, r, ...)`` so results do
not depend on how replications are split among workers.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError
from .estimator import PathObservations, hs_distance_sq, prolongation_matrix
from .gof import FixedNullTest, test_parametric
from .kernels import (FAMILY_PARAMETERS, InverseFractionalLaplacian, KernelSpec, Matern, ParameterBox,
                      coefficient_matrix, kernel_from_dict)
from .observation import ObservationScheme, observation_matrix
from .sampler import fem_paths, modal_observation_matrix, ou_modes, replication_rng
from .spectral import Boundary, SpectralOperator

log = logging.getLogger(__name__)

DEFAULT_SMOOTHNESS = (0.125, 0.25, 0.375, 0.5, 0.75)
# h = delta ** exponent
COUPLINGS = {"sqrt": 0.5, "pointwise_optimal": 0.75}
DESK_SIM_STEP = 2.0 ** -14
PAPER_SIM_STEP = 2.0 ** -18
FEM_OPERATOR = SpectralOperator(Boundary.NEUMANN, 1.0, 1.0 / 20.0, mode_count=1)

RATE_COLUMNS = ("nu", "delta", "h", "rmse", "stderr")
REJECTION_COLUMNS = ("truth", "null", "rate", "stderr", "replications")


# ---------------------------------------------------------------- accumulation

@dataclass
class RunningMoments:
    """Welford mean/variance accumulator; ``merge`` is associative."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def push(self, x: float):
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self.m2 += d * (x - self.mean)

    def extend(self, xs):
        for x in xs:
            self.push(float(x))
        return self

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        n = self.count + other.count
        if n == 0:
            return RunningMoments()
        d = other.mean - self.mean
        mean = self.mean + d * other.count / n
        m2 = self.m2 + other.m2 + d * d * self.count * other.count / n
        return RunningMoments(n, mean, m2)

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else float("nan")

    @property
    def stderr(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count > 1 else float("nan")


def fit_loglog_slope(points):
    """Least-squares line through ``(log2 delta, log2 value)``.

    Returns ``(slope, intercept, residual)`` with ``residual`` the root mean
    squared deviation in log2 units.
    """
    pts = [(float(d), float(v)) for d, v in points]
    if any(d <= 0 or v <= 0 or not (math.isfinite(d) and math.isfinite(v)) for d, v in pts):
        raise ValueError("log-log fit needs positive finite resolutions and values")
    if len({d for d, _ in pts}) < 2:
        raise ValueError("log-log fit needs at least two distinct resolutions")
    x = np.log2([d for d, _ in pts])
    y = np.log2([v for _, v in pts])
    a = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(a, y, rcond=None)
    resid = float(np.sqrt(np.mean((a @ [slope, intercept] - y) ** 2)))
    return float(slope), float(intercept), resid


def _map(fn, tasks, threads: int):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


def _chunks(n: int, threads: int):
    k = max(1, min(n, 4 * threads)) if threads > 1 else 1
    edges = np.linspace(0, n, k + 1).round().astype(int)
    return [range(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _dyadic_cells(h: float) -> int:
    level = math.log2(1.0 / h)
    return 2 ** int(round(level))


def _scheme(kind: str, n_cells: int) -> ObservationScheme:
    kind = kind.lower()
    if kind == "pointwise":
        return ObservationScheme.pointwise(n_cells)
    if kind == "local_average":
        return ObservationScheme.local_average(n_cells)
    raise ConfigurationError(f"unknown scheme {kind!r} (pointwise or local_average)")


def _check_dyadic(deltas):
    for d in deltas:
        lv = math.log2(1.0 / d)
        if d <= 0 or abs(lv - round(lv)) > 1e-9:
            raise ConfigurationError(f"resolution {d} is not dyadic")


# ---------------------------------------------------------------- data generation

def _spectral_observations(kernel: InverseFractionalLaplacian, scheme, delta, horizon, rng, scale=1.0):
    op = kernel.operator
    n = int(round(horizon / delta))
    modes = ou_modes(op, scale * kernel.eigenvalues(), delta, n, rng)
    return modes @ modal_observation_matrix(op, scheme).T


def _fem_observations(kernel: KernelSpec, scheme, delta, horizon, sim_step, rngs, operator, scale=1.0,
                      refinement: int = 0):
    """Batched FEM paths observed every ``delta``.

    The FEM grid is the scheme's vertex set, bisected ``refinement`` times.
    """
    grid = scheme.subdivision.breakpoints
    for _ in range(refinement):
        grid = np.sort(np.concatenate([grid, 0.5 * (grid[1:] + grid[:-1])]))
    every = int(round(delta / sim_step))
    if every < 1 or abs(every * sim_step - delta) > 1e-12 * delta:
        raise ConfigurationError(f"delta {delta} is not a multiple of the simulation step {sim_step}")
    n_steps = int(round(horizon / sim_step))
    if scale == 0.0:
        return np.zeros((len(rngs), n_steps // every + 1, scheme.size))
    noise = kernel if scale == 1.0 else _scaled(kernel, scale)
    paths = fem_paths(operator, noise, grid, sim_step, n_steps, rngs, record_every=every)
    return paths @ observation_matrix(scheme, grid).T


def _scaled(kernel, scale):
    if isinstance(kernel, Matern):
        return Matern(kernel.variance * scale, kernel.smoothness, kernel.range)
    raise ConfigurationError("noise scaling is only supported for Matern FEM noise")


# ---------------------------------------------------------------- rate study

@dataclass
class RateStudyConfig:
    model: str = "commuting_spectral"  # or "matern_fem"
    scheme: str = "pointwise"
    smoothness: tuple = DEFAULT_SMOOTHNESS
    deltas: tuple = tuple(2.0 ** -k for k in (4, 6, 8, 10, 12))
    coupling: float | str = 0.5
    replications: int = 100
    seed: int = 0
    expected_rate: float | None = None
    horizon: float = 1.0
    mode_count: int = 512
    fine_cells: int = 512
    sim_step: float = DESK_SIM_STEP
    matern_variance: float = 1.0
    matern_range: float = 0.5
    noise_scale: float = 1.0

    def __post_init__(self):
        self.model = self.model.lower()
        if self.model not in ("commuting_spectral", "matern_fem"):
            raise ConfigurationError(f"unknown model {self.model!r}")
        if isinstance(self.coupling, str):
            if self.coupling not in COUPLINGS:
                raise ConfigurationError(f"unknown coupling preset {self.coupling!r}")
            self.coupling = COUPLINGS[self.coupling]
        self.smoothness = tuple(float(v) for v in self.smoothness)
        self.deltas = tuple(float(d) for d in self.deltas)
        if not self.smoothness:
            raise ConfigurationError("need at least one smoothness value")
        _check_dyadic(self.deltas)
        if len(self.deltas) < 2 or any(b >= a for a, b in zip(self.deltas, self.deltas[1:])):
            raise ConfigurationError("deltas must be at least two strictly decreasing values")
        if self.replications < 2:
            raise ConfigurationError("need at least two replications")
        if self.coupling <= 0:
            raise ConfigurationError("coupling exponent must be positive")
        if self.noise_scale < 0:
            raise ConfigurationError("noise_scale must be nonnegative")
        _scheme(self.scheme, 1)

    @classmethod
    def from_dict(cls, d: dict) -> "RateStudyConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown rate-study keys: {sorted(unknown)}")
        return cls(**d)

    def true_kernel(self, nu: float) -> KernelSpec:
        if self.model == "commuting_spectral":
            return InverseFractionalLaplacian(nu, SpectralOperator(mode_count=self.mode_count))
        return Matern(self.matern_variance, nu, self.matern_range)

    def h(self, delta: float) -> float:
        return 1.0 / _dyadic_cells(delta ** self.coupling)


@dataclass(frozen=True)
class _RateCell:
    cfg: RateStudyConfig
    i_nu: int
    i_delta: int
    reps: range


class _RateContext:
    """Per-cell quantities shared by all replications of one ``(nu, delta)``."""

    def __init__(self, cfg: RateStudyConfig, nu: float, delta: float):
        self.cfg = cfg
        self.kernel = cfg.true_kernel(nu)
        self.scheme = _scheme(cfg.scheme, _dyadic_cells(delta ** cfg.coupling))
        self.fine = _scheme(cfg.scheme, cfg.fine_cells)
        self.prolong = prolongation_matrix(self.scheme, self.fine)
        self.c_ref = coefficient_matrix(self.kernel, self.fine)
        self.delta = delta

    def errors(self, observations) -> np.ndarray:
        out = []
        for y in observations:
            inc = np.diff(y, axis=0)
            c = inc.T @ inc / self.cfg.horizon
            cf = self.prolong @ c @ self.prolong.T
            out.append(hs_distance_sq(cf, self.c_ref, self.fine.gram))
        return np.array(out)

    def simulate(self, rngs):
        cfg = self.cfg
        if cfg.model == "commuting_spectral":
            return [_spectral_observations(self.kernel, self.scheme, self.delta, cfg.horizon, g,
                                           cfg.noise_scale) for g in rngs]
        return _fem_observations(self.kernel, self.scheme, self.delta, cfg.horizon, cfg.sim_step,
                                 rngs, FEM_OPERATOR, cfg.noise_scale)


def _rate_rng(cfg, i_nu, i_delta, r):
    return replication_rng(cfg.seed, r, i_nu, i_delta)


def _run_rate_cell(cell: _RateCell) -> RunningMoments:
    cfg = cell.cfg
    nu, delta = cfg.smoothness[cell.i_nu], cfg.deltas[cell.i_delta]
    try:
        ctx = _RateContext(cfg, nu, delta)
        rngs = [_rate_rng(cfg, cell.i_nu, cell.i_delta, r) for r in cell.reps]
        sq = ctx.errors(ctx.simulate(rngs))
    except ConfigurationError as exc:
        raise ConfigurationError(f"rate study nu={nu}, delta={delta}, replications "
                                 f"{cell.reps.start}..{cell.reps.stop - 1}: {exc}") from exc
    except (ArithmeticError, np.linalg.LinAlgError, NumericalError, ValueError) as exc:
        raise NumericalError(f"rate study nu={nu}, delta={delta}, replications "
                             f"{cell.reps.start}..{cell.reps.stop - 1}: {exc}") from exc
    bad = np.flatnonzero(~np.isfinite(sq))
    if bad.size:
        raise NumericalError(f"rate study nu={nu}, delta={delta}, replication "
                             f"{cell.reps[bad[0]]}: non-finite estimation error")
    return RunningMoments().extend(sq)


def rate_replication(cfg: RateStudyConfig, i_nu: int, i_delta: int, r: int) -> float:
    """Squared estimation error of one replication (reproducible in isolation)."""
    return _run_rate_cell(_RateCell(cfg, i_nu, i_delta, range(r, r + 1))).mean


@dataclass
class RateStudyResult:
    rows: list
    slopes: dict = field(default_factory=dict)
    expected_rate: float | None = None

    def slope_rows(self):
        return [{"nu": nu, "slope": s, "intercept": b, "residual": e, "expected_rate": self.expected_rate}
                for nu, (s, b, e) in self.slopes.items()]


def run_rate_study(cfg: RateStudyConfig, threads: int = 1) -> RateStudyResult:
    """RMSE of the realized-covariation estimate for every ``(nu, delta)``.

    ``stderr`` is the Monte-Carlo standard error of the RMSE (delta method on
    the mean squared error).
    """
    tasks = [_RateCell(cfg, i, j, reps)
             for i in range(len(cfg.smoothness)) for j in range(len(cfg.deltas))
             for reps in _chunks(cfg.replications, threads)]
    results = _map(_run_rate_cell, tasks, threads)
    acc: dict = {}
    for t, m in zip(tasks, results):
        key = (t.i_nu, t.i_delta)
        acc[key] = acc.get(key, RunningMoments()).merge(m)
    rows = []
    slopes = {}
    for i, nu in enumerate(cfg.smoothness):
        pts = []
        for j, delta in enumerate(cfg.deltas):
            m = acc[(i, j)]
            rmse = math.sqrt(m.mean)
            se = m.stderr / (2.0 * rmse) if rmse > 0 else 0.0
            rows.append({"nu": nu, "delta": delta, "h": cfg.h(delta), "rmse": rmse, "stderr": se})
            pts.append((delta, rmse))
            log.info("rate nu=%g delta=%g rmse=%.4g", nu, delta, rmse)
        slopes[nu] = fit_loglog_slope(pts)
    return RateStudyResult(rows, slopes, cfg.expected_rate)


# ---------------------------------------------------------------- rejection study

@dataclass(frozen=True)
class FamilyNull:
    """Composite null: a parametric family restricted to a parameter box."""

    family: str
    box: ParameterBox
    operator: SpectralOperator | None = None

    def __post_init__(self):
        if self.family not in FAMILY_PARAMETERS:
            raise ConfigurationError(f"unknown family {self.family!r}")
        if self.box.dim != len(FAMILY_PARAMETERS[self.family]):
            raise ConfigurationError(f"{self.family} needs a {len(FAMILY_PARAMETERS[self.family])}-d box")

    @property
    def label(self) -> str:
        bounds = ";".join(f"{a:g}-{b:g}" for a, b in zip(self.box.lower, self.box.upper))
        return f"{self.family}[{bounds}]"


def _parse_null(d):
    if isinstance(d, (KernelSpec, FamilyNull)):
        return d
    if "family" in d:
        op = d.get("operator")
        op = SpectralOperator(Boundary(op.get("boundary", "dirichlet")), float(op.get("base_shift", 0.0)),
                              float(op.get("diffusivity", 1.0)), int(op.get("mode_count", 300))) if op else None
        return FamilyNull(d["family"], ParameterBox(tuple(d["lower"]), tuple(d["upper"])), op)
    return kernel_from_dict(d)


def default_kernels(smoothness=DEFAULT_SMOOTHNESS, mode_count: int = 300):
    """Commuting and Matern(1, nu, 0.5) kernels for each smoothness value."""
    op = SpectralOperator(mode_count=mode_count)
    return ([InverseFractionalLaplacian(nu, op) for nu in smoothness]
            + [Matern(1.0, nu, 0.5) for nu in smoothness])


@dataclass
class RejectionStudyConfig:
    truths: list = field(default_factory=default_kernels)
    nulls: list | None = None  # default: the truths, tested as fixed kernels
    delta: float = 2.0 ** -8
    h: float = 2.0 ** -4
    alpha: float = 0.05
    replications: int = 2000
    seed: int = 0
    scheme: str = "pointwise"
    horizon: float = 1.0
    sim_step: float = DESK_SIM_STEP
    null_refinement: int = 0  # extra dyadic levels for the null discretization
    sim_refinement: int = 0  # extra dyadic levels for the FEM grid of non-commuting truths
    n_scan: int = 64
    budget: int = 400

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.replications < 1:
            raise ConfigurationError("need at least one replication")
        _check_dyadic([self.delta, self.h])
        self.truths = [_parse_null(t) for t in self.truths]
        if any(isinstance(t, FamilyNull) for t in self.truths):
            raise ConfigurationError("truths must be concrete kernels")
        self.nulls = list(self.truths) if self.nulls is None else [_parse_null(n) for n in self.nulls]
        if not self.truths or not self.nulls:
            raise ConfigurationError("need at least one truth and one null")
        _scheme(self.scheme, 1)
        if self.null_refinement < 0 or self.sim_refinement < 0:
            raise ConfigurationError("refinement levels must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "RejectionStudyConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown rejection-study keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def observation_scheme(self) -> ObservationScheme:
        return _scheme(self.scheme, _dyadic_cells(self.h))

    @property
    def null_scheme(self) -> ObservationScheme | None:
        if not self.null_refinement:
            return None
        return _scheme(self.scheme, _dyadic_cells(self.h) * 2 ** self.null_refinement)


@dataclass(frozen=True)
class _RejectionCell:
    cfg: RejectionStudyConfig
    i_truth: int
    reps: range


def simulate_truth(cfg: RejectionStudyConfig, truth: KernelSpec, rngs):
    """Observations for each generator: exact spectral paths for commuting kernels, FEM otherwise."""
    scheme = cfg.observation_scheme
    if isinstance(truth, InverseFractionalLaplacian):
        return [_spectral_observations(truth, scheme, cfg.delta, cfg.horizon, g) for g in rngs]
    return _fem_observations(truth, scheme, cfg.delta, cfg.horizon, cfg.sim_step, rngs, FEM_OPERATOR,
                             refinement=cfg.sim_refinement)


def _run_rejection_cell(cell: _RejectionCell) -> np.ndarray:
    cfg = cell.cfg
    truth = cfg.truths[cell.i_truth]
    scheme = cfg.observation_scheme
    tests = [n if isinstance(n, FamilyNull) else FixedNullTest(n, scheme, cfg.alpha, cfg.null_scheme)
             for n in cfg.nulls]
    counts = np.zeros(len(tests), dtype=int)
    rngs = [replication_rng(cfg.seed, r, cell.i_truth) for r in cell.reps]
    try:
        data = simulate_truth(cfg, truth, rngs)
    except (ArithmeticError, np.linalg.LinAlgError, NumericalError) as exc:
        raise NumericalError(f"rejection study truth={truth.label}, replications "
                             f"{cell.reps.start}..{cell.reps.stop - 1}: {exc}") from exc
    for r, y in zip(cell.reps, data):
        obs = PathObservations(y, cfg.delta, cfg.horizon, scheme)
        for k, t in enumerate(tests):
            try:
                if isinstance(t, FamilyNull):
                    rep = test_parametric(obs, t.family, t.box, cfg.alpha, t.operator, cfg.null_scheme,
                                          n_scan=cfg.n_scan, budget=cfg.budget, seed=r)
                else:
                    rep = t(obs)
            except (ArithmeticError, np.linalg.LinAlgError, NumericalError) as exc:
                raise NumericalError(f"rejection study truth={truth.label}, null={cfg.nulls[k].label}, "
                                     f"replication {r}: {exc}") from exc
            counts[k] += rep.reject
    return counts


def run_rejection_study(cfg: RejectionStudyConfig, threads: int = 1) -> list:
    """Rows ``{truth, null, rate, stderr, replications}`` for every truth/null pair.

    All nulls are applied to the same simulated data of a given truth.
    """
    tasks = [_RejectionCell(cfg, i, reps) for i in range(len(cfg.truths))
             for reps in _chunks(cfg.replications, threads)]
    results = _map(_run_rejection_cell, tasks, threads)
    totals = np.zeros((len(cfg.truths), len(cfg.nulls)), dtype=int)
    for t, c in zip(tasks, results):
        totals[t.i_truth] += c
    n = cfg.replications
    rows = []
    for i, truth in enumerate(cfg.truths):
        for k, null in enumerate(cfg.nulls):
            p = totals[i, k] / n
            rows.append({"truth": truth.label, "null": null.label, "rate": float(p),
                         "stderr": math.sqrt(p * (1.0 - p) / n), "replications": n})
    return rows


def rejection_matrix(rows):
    """Pivot rejection rows into ``(truth labels, null labels, rates)``."""
    truths = list(dict.fromkeys(r["truth"] for r in rows))
    nulls = list(dict.fromkeys(r["null"] for r in rows))
    m = np.full((len(truths), len(nulls)), np.nan)
    for r in rows:
        m[truths.index(r["truth"]), nulls.index(r["null"])] = r["rate"]
    return truths, nulls, m


# ---------------------------------------------------------------- reports

def _columns(rows):
    keys = set(rows[0])
    if set(RATE_COLUMNS) <= keys:
        return RATE_COLUMNS
    if set(REJECTION_COLUMNS) <= keys:
        return REJECTION_COLUMNS
    return tuple(rows[0])


def emit_report(rows, fmt: str, path, **plot_options):
    """Write study rows as ``csv`` or as an ``svg`` chart."""
    rows = list(rows)
    if not rows:
        raise ValueError("cannot emit a report without rows")
    fmt = fmt.lower()
    if fmt == "csv":
        cols = _columns(rows)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in rows:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
        return path
    if fmt == "svg":
        from . import plotting

        if _columns(rows) == RATE_COLUMNS:
            return plotting.rate_chart(rows, path, **plot_options)
        if _columns(rows) == REJECTION_COLUMNS:
            return plotting.rejection_heatmap(rows, path, **plot_options)
        raise ValueError("svg output needs rate or rejection rows")
    raise ValueError(f"unknown report format {fmt!r} (csv or svg)")


def read_report(path):
    """Parse a CSV written by ``emit_report`` back into typed rows."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for r in reader:
            rows.append({k: _parse_cell(k, v) for k, v in r.items()})
    return rows


def _parse_cell(key, value):
    if key in ("truth", "null"):
        return value
    if key == "replications":
        return int(value)
    try:
        return float(value)
    except ValueError:
        return value
