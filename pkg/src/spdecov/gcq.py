"""Weighted sums of independent chi-square(1) variables.

The limiting null law of the test statistic is ``V = sum_m w_m zeta_m^2`` with
pair weights ``w = 2 mu_i mu_j`` (``j <= i``) built from the eigenvalues ``mu``
of the null covariance. Tail probabilities come from Imhof's inversion formula

    P(V > x) = 1/2 + (1/pi) int_0^inf sin(theta(u)) / (u rho(u)) du,
    theta(u) = 1/2 sum arctan(w_m u) - x u / 2,
    rho(u)   = prod (1 + w_m^2 u^2)^(1/4).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, linalg

from .errors import NumericalError

# Gauss-Kronrod 7/15 abscissae and weights on [-1, 1] (nonnegative half)
_XGK = np.array([
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.0,
])
_WGK = np.array([
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327,
])
GK_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
GK_WEIGHTS = np.concatenate([_WGK[:-1], _WGK[::-1]])
G_WEIGHTS = np.zeros(15)
G_WEIGHTS[1:7:2] = _WG[:3]
G_WEIGHTS[7] = _WG[3]
G_WEIGHTS[9:15:2] = _WG[2::-1]


def adaptive_gk15(f, edges, tol: float = 1e-9, max_panels: int = 20000):
    """Integrate vectorized ``f`` over consecutive panels, bisecting until ``|K15 - G7|`` fits.

    The absolute tolerance ``tol`` is shared among panels in proportion to width.
    Returns ``(value, error_estimate)``.
    """
    edges = np.asarray(edges, dtype=float)
    a, b = edges[:-1], edges[1:]
    total_width = edges[-1] - edges[0]
    value = 0.0
    error = 0.0
    evaluated = 0
    while a.size:
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        fx = f(mid[:, None] + half[:, None] * GK_NODES[None, :])
        k = half * (fx @ GK_WEIGHTS)
        g = half * (fx @ G_WEIGHTS)
        err = np.abs(k - g)
        evaluated += a.size
        ok = err <= tol * (b - a) / total_width
        value += k[ok].sum()
        error += err[ok].sum()
        if evaluated > max_panels:
            value += k[~ok].sum()
            error += err[~ok].sum()
            warnings.warn(f"adaptive quadrature hit the panel budget (error {error:.2e})",
                          RuntimeWarning, stacklevel=2)
            break
        a, b, mid = a[~ok], b[~ok], mid[~ok]
        a, b = np.concatenate([a, mid]), np.concatenate([mid, b])
    return value, error


@dataclass(frozen=True, eq=False)
class WeightedChiSquare:
    """``sum_m w_m zeta_m^2`` with i.i.d. standard normal ``zeta_m``."""

    weights: np.ndarray
    source_count: int = 0

    def __post_init__(self):
        w = np.sort(np.asarray(self.weights, dtype=float).ravel())[::-1]
        if w.size and (not np.all(np.isfinite(w)) or w[-1] <= 0):
            raise ValueError("weights must be finite and strictly positive")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def mean(self) -> float:
        return float(self.weights.sum())

    @property
    def variance(self) -> float:
        return float(2.0 * np.sum(self.weights ** 2))

    def tail_probability(self, x: float, tol: float = 1e-9) -> float:
        return tail_probability(self, x, tol)

    def quantile(self, level: float) -> float:
        return quantile(self, level)

    def sample(self, rng: np.random.Generator, n: int, chunk: int = 2 ** 22) -> np.ndarray:
        out = np.empty(n)
        per = max(1, chunk // max(1, self.weights.size))
        for start in range(0, n, per):
            stop = min(n, start + per)
            z = rng.standard_normal((stop - start, self.weights.size))
            out[start:stop] = (z * z) @ self.weights
        return out


def gamma_weights(mu) -> np.ndarray:
    """Pair weights ``{2 mu_i mu_j : j <= i}``, sorted nonincreasing."""
    mu = np.asarray(mu, dtype=float).ravel()
    if np.any(mu < 0) or not np.all(np.isfinite(mu)):
        raise ValueError("eigenvalues must be finite and nonnegative")
    i, j = np.tril_indices(mu.size)
    return np.sort(2.0 * mu[i] * mu[j])[::-1]


def null_eigenvalues(gram, c0, k: int | None = None, floor: float | None = None) -> np.ndarray:
    """Eigenvalues of ``G C0`` via the congruent symmetric matrix ``L^T C0 L`` (``G = L L^T``).

    Values below ``floor`` (default ``1e-12`` times the largest) are dropped;
    at most ``k`` (default ``min(N, 100)``) are returned, nonincreasing.
    """
    g = np.asarray(gram, dtype=float)
    c = np.asarray(c0, dtype=float)
    try:
        low = linalg.cholesky(g, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"Gram matrix is not positive definite: {exc}") from exc
    s = low.T @ (0.5 * (c + c.T)) @ low
    ev = np.sort(linalg.eigvalsh(0.5 * (s + s.T)))[::-1]
    if k is None:
        k = min(ev.size, 100)
    if ev.size == 0 or ev[0] <= 0:
        return np.zeros(0)
    if floor is None:
        floor = 1e-12 * ev[0]
    ev = ev[ev > floor]
    return ev[:k]


def null_distribution(gram, c0, k: int | None = None, floor: float | None = None) -> WeightedChiSquare:
    mu = null_eigenvalues(gram, c0, k, floor)
    return WeightedChiSquare(gamma_weights(mu), source_count=mu.size)


def _imhof_parts(w, x):
    """Vectorized pieces of the Imhof integrand for scaled weights ``w``."""

    def beta(u):
        return 0.5 * _sum_over_weights(u, w, np.arctan)

    def log_rho(u):
        return 0.25 * _sum_over_weights(u, w, lambda z: np.log1p(z * z))

    def integrand(u):
        u = np.asarray(u, dtype=float)
        out = np.empty_like(u)
        small = u < 1e-300
        us = np.where(small, 1.0, u)
        out[...] = np.sin(beta(us) - 0.5 * x * us) / us * np.exp(-log_rho(us))
        out[small] = 0.5 * (w.sum() - x)
        return out

    return beta, log_rho, integrand


def _sum_over_weights(u, w, fn, budget: int = 2 ** 21):
    flat = u.ravel()
    out = np.empty(flat.size)
    step = max(1, budget // max(1, w.size))
    for s in range(0, flat.size, step):
        out[s : s + step] = fn(np.multiply.outer(flat[s : s + step], w)).sum(axis=1)
    return out.reshape(u.shape)


def _envelope_cutoff(log_rho, level: float = 1e-10) -> float:
    """Smallest ``U`` (up to a factor 2) with ``1 / (U rho(U)) < level``."""
    u = 1.0
    log_level = np.log(level)
    while -np.log(u) - log_rho(np.array([u]))[0] >= log_level:
        u *= 2.0
        if u > 1e300:
            raise NumericalError("Imhof envelope does not decay")
    return u


def tail_probability(dist: WeightedChiSquare, x: float, tol: float = 1e-9) -> float:
    """``P(V > x)`` by Imhof's formula, clipped into ``[0, 1]``.

    ``[0, U]`` is covered by adaptive Gauss-Kronrod panels, ``U`` being where
    the integrand envelope ``1 / (u rho(u))`` drops below ``1e-10``. When that
    point lies beyond 20 oscillation periods the remainder is computed as a
    Fourier integral with QUADPACK's QAWF instead of panel by panel.
    """
    if dist.weights.size == 0:
        raise ValueError("degenerate distribution: no weights")
    if not np.isfinite(x):
        if x > 0:
            return 0.0
        raise ValueError("threshold must be finite")
    if x <= 0:
        return 1.0
    scale = dist.weights[0]
    w = dist.weights / scale
    xs = x / scale
    beta, log_rho, integrand = _imhof_parts(w, xs)
    u_env = _envelope_cutoff(log_rho)
    period = 4.0 * np.pi / xs
    u1 = min(u_env, 20.0 * period)
    n_panels = max(8, int(np.ceil(8 * u1 / period)))
    edges = np.linspace(0.0, u1, n_panels + 1)
    head, _ = adaptive_gk15(integrand, edges, tol=tol)
    tail = 0.0
    if u1 < u_env:
        def amp_cos(u):
            u = np.atleast_1d(u)
            return (np.sin(beta(u)) * np.exp(-log_rho(u)) / u)[0]

        def amp_sin(u):
            u = np.atleast_1d(u)
            return (np.cos(beta(u)) * np.exp(-log_rho(u)) / u)[0]

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            tc, _ = integrate.quad(amp_cos, u1, np.inf, weight="cos", wvar=0.5 * xs,
                                   epsabs=tol, limlst=200)
            ts, _ = integrate.quad(amp_sin, u1, np.inf, weight="sin", wvar=0.5 * xs,
                                   epsabs=tol, limlst=200)
        # sin(beta - x u/2) = sin(beta) cos(x u/2) - cos(beta) sin(x u/2)
        tail = tc - ts
    p = 0.5 + (head + tail) / np.pi
    return float(min(1.0, max(0.0, p)))


def quantile(dist: WeightedChiSquare, level: float, tol: float = 1e-6) -> float:
    """``level`` quantile by bisection on the Imhof tail, ``|p - (1 - level)| <= tol``."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    alpha = 1.0 - level
    lo = 0.0
    hi = dist.mean + 20.0 * np.sqrt(dist.variance)
    for attempt in range(2):
        if tail_probability(dist, hi) <= alpha:
            break
        if attempt == 1:
            raise NumericalError("quantile bracket failed after widening")
        hi *= 4.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        p = tail_probability(dist, mid)
        if abs(p - alpha) <= tol:
            return mid
        if p > alpha:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            return 0.5 * (lo + hi)
    return 0.5 * (lo + hi)


def mc_tail_oracle(dist: WeightedChiSquare, x: float, n: int, seed: int = 0) -> float:
    """Monte-Carlo exceedance frequency of ``V > x`` from ``n`` draws."""
    if n < 1:
        raise ValueError("need at least one draw")
    v = dist.sample(np.random.default_rng(seed), n)
    return float(np.mean(v > x))
