"""Goodness-of-fit tests for the noise covariance kernel.

``test_fixed`` checks ``H0: q = q0``; ``test_parametric`` checks membership in
a parametric family by minimizing the statistic over a parameter box and
calibrating with the fitted member (a conservative test).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from . import gcq
from .errors import ConfigurationError
from .estimator import PathObservations, hs_distance_sq, prolongation_matrix, realized_covariation
from .kernels import FAMILY_PARAMETERS, KernelSpec, ParameterBox, coefficient_matrix, family_member
from .observation import ObservationScheme, SchemeKind
from .spectral import SpectralOperator


@dataclass
class TestReport:
    statistic: float
    p_value: float
    alpha: float
    reject: bool
    weights_used: int
    null_descriptor: str
    theta_star: list | None = None
    warnings: list = field(default_factory=list)

    __test__ = False  # not a pytest class

    def to_record(self) -> dict:
        rec = {"statistic": self.statistic, "p_value": self.p_value, "alpha": self.alpha,
               "reject": self.reject, "weights_used": self.weights_used, "null": self.null_descriptor}
        if self.theta_star is not None:
            rec["theta_star"] = list(self.theta_star)
        rec["warnings"] = list(self.warnings)
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), separators=(",", ":"))


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")


@dataclass(frozen=True, eq=False)
class _Discretization:
    """RV coefficients and Gram matrix on the basis used for the HS norm."""

    rv: np.ndarray
    gram: np.ndarray
    scheme: ObservationScheme
    delta: float

    def statistic(self, c0) -> float:
        return hs_distance_sq(self.rv, c0, self.gram) / self.delta


def _discretize(obs: PathObservations, null_scheme: ObservationScheme | None):
    if obs.scheme is None:
        raise ConfigurationError("tests need observations on a spatial scheme")
    if obs.n_increments < 2:
        raise ConfigurationError("tests need at least two increments")
    scheme = _hat_if_identity(obs.scheme)
    rv = realized_covariation(obs).rescaled()
    if null_scheme is not None:
        null_scheme = _hat_if_identity(null_scheme)
        p = prolongation_matrix(scheme, null_scheme)
        rv = p @ rv @ p.T
        scheme = null_scheme
    return _Discretization(rv, scheme.gram, scheme, obs.delta)


def _report(stat, dist, alpha, descriptor, theta=None, notes=()):
    p = gcq.tail_probability(dist, stat)
    return TestReport(float(stat), float(p), float(alpha), bool(p < alpha), int(dist.weights.size),
                      descriptor, None if theta is None else [float(t) for t in theta], list(notes))


def _null_law(gram, c0, k):
    dist = gcq.null_distribution(gram, c0, k=k)
    if dist.weights.size == 0:
        raise ConfigurationError("null covariance has no positive eigenvalues on this scheme")
    return dist


class FixedNullTest:
    """Fixed-kernel test with the null discretization and weights computed once.

    Reuse one instance for many data sets observed on the same scheme.
    """

    def __init__(self, q0: KernelSpec, scheme: ObservationScheme, alpha: float = 0.05,
                 null_scheme: ObservationScheme | None = None, k: int | None = None):
        _check_alpha(alpha)
        self.q0 = q0
        self.alpha = alpha
        self.scheme = scheme
        self.null_scheme = null_scheme
        target = _hat_if_identity(null_scheme or scheme)
        self.c0 = coefficient_matrix(q0, target)
        self.gram = target.gram
        self.dist = _null_law(self.gram, self.c0, k)

    def statistic(self, obs: PathObservations) -> float:
        return _discretize(obs, self.null_scheme).statistic(self.c0)

    def __call__(self, obs: PathObservations) -> TestReport:
        return _report(self.statistic(obs), self.dist, self.alpha, self.q0.label)


def _hat_if_identity(scheme):
    if scheme.kind is SchemeKind.IDENTITY:
        return ObservationScheme.pointwise(scheme.subdivision)
    return scheme


def test_fixed(obs: PathObservations, q0: KernelSpec, alpha: float = 0.05,
               null_scheme: ObservationScheme | None = None, k: int | None = None) -> TestReport:
    """Test ``q = q0`` at level ``alpha``.

    By default the null kernel is discretized on the observation scheme; pass a
    finer ``null_scheme`` (nested, same basis type) to prolong the estimate and
    discretize ``q0`` there instead.
    """
    if obs.scheme is None:
        raise ConfigurationError("tests need observations on a spatial scheme")
    return FixedNullTest(q0, obs.scheme, alpha, null_scheme, k)(obs)


@dataclass
class FitResult:
    theta: np.ndarray
    value: float
    converged: bool
    evaluations: int
    history: list


def fit_family(objective, box: ParameterBox, n_scan: int = 64, budget: int = 400, seed: int = 0,
               xtol: float = 1e-6) -> FitResult:
    """Latin-hypercube scan of the box followed by bounded Nelder-Mead from the best point.

    The search runs in unit-box coordinates so ``xtol`` is relative to box width.
    """
    history = []

    def f_unit(u):
        theta = box.from_unit(u)
        val = float(objective(theta))
        history.append((theta.copy(), val))
        return val

    scan = qmc.LatinHypercube(d=box.dim, seed=seed).random(n_scan)
    values = np.array([f_unit(u) for u in scan])
    start = scan[np.argmin(values)]
    res = optimize.minimize(
        f_unit, start, method="Nelder-Mead", bounds=[(0.0, 1.0)] * box.dim,
        options={"maxfev": budget, "xatol": xtol, "fatol": np.inf, "adaptive": False},
    )
    best = min(history, key=lambda hv: hv[1])
    return FitResult(best[0], best[1], bool(res.success), len(history), history)


def test_parametric(obs: PathObservations, family: str, box: ParameterBox, alpha: float = 0.05,
                    operator: SpectralOperator | None = None,
                    null_scheme: ObservationScheme | None = None, k: int | None = None,
                    n_scan: int = 64, budget: int = 400, seed: int = 0,
                    return_fit: bool = False):
    """Test whether ``q`` belongs to ``family`` with parameters in ``box``.

    ``family`` is ``"matern"`` (parameters variance, smoothness, range) or
    ``"inverse_fractional_laplacian"`` (smoothness; ``operator`` fixes the eigenbasis).
    The p-value is computed from the eigenvalues of the fitted member.
    """
    _check_alpha(alpha)
    family = "inverse_fractional_laplacian" if family == "ifl" else family
    if family not in FAMILY_PARAMETERS:
        raise ConfigurationError(f"unknown family {family!r}")
    if box.dim != len(FAMILY_PARAMETERS[family]):
        raise ConfigurationError(f"{family} needs a {len(FAMILY_PARAMETERS[family])}-dimensional box")
    disc = _discretize(obs, null_scheme)

    def objective(theta):
        return disc.statistic(coefficient_matrix(family_member(family, theta, operator), disc.scheme))

    fit = fit_family(objective, box, n_scan=n_scan, budget=budget, seed=seed)
    notes = [] if fit.converged else ["optimizer did not converge within the evaluation budget"]
    if not fit.converged:
        warnings.warn(notes[0], RuntimeWarning, stacklevel=2)
    member = family_member(family, fit.theta, operator)
    dist = _null_law(disc.gram, coefficient_matrix(member, disc.scheme), k)
    report = _report(fit.value, dist, alpha, member.label, fit.theta, notes)
    return (report, fit) if return_fit else report
