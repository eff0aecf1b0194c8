"""Covariance kernels ``q(x, y)`` on the unit square and their discrete coefficient matrices."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from .observation import ObservationScheme, SchemeKind
from .spectral import Boundary, SpectralOperator

_DIAG_EPS = 1e-14


def _check_points(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("kernel arguments must be finite")
        if np.any((a < 0) | (a > 1)):
            raise ValueError("kernel arguments must lie in [0, 1]")


def matern_correlation(r, nu: float, rho: float):
    """Unit-variance Matern correlation at distance ``r``.

    ``2^(1-nu)/Gamma(nu) * z^nu * K_nu(z)`` with ``z = sqrt(2 nu) r / rho``;
    returns exactly 1 for ``r < 1e-14``.
    """
    r = np.abs(np.asarray(r, dtype=float))
    z = np.sqrt(2.0 * nu) * r / rho
    out = np.ones_like(z)
    pos = r >= _DIAG_EPS
    zp = z[pos]
    with np.errstate(under="ignore", over="ignore", invalid="ignore"):
        val = np.exp((1.0 - nu) * np.log(2.0) - special.gammaln(nu) + nu * np.log(zp)) * special.kv(nu, zp)
    # K_nu underflows to 0 for large z, which is the correct limit
    out[pos] = np.where(np.isfinite(val), val, 0.0)
    return out


class KernelSpec:
    """Common interface of the kernel families."""

    family: str = ""

    def value(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        _check_points(x, y)
        return self._value(*np.broadcast_arrays(x, y))

    def matrix(self, x, y=None) -> np.ndarray:
        """``[q(x_i, y_j)]`` for coordinate vectors ``x`` and ``y``."""
        x = np.asarray(x, dtype=float).ravel()
        y = x if y is None else np.asarray(y, dtype=float).ravel()
        _check_points(x, y)
        return self._matrix(x, y)

    def _matrix(self, x, y):
        return self._value(x[:, None], y[None, :])

    def to_dict(self) -> dict:
        raise NotImplementedError

    @property
    def label(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class Matern(KernelSpec):
    variance: float = 1.0
    smoothness: float = 0.5
    range: float = 1.0
    family = "matern"

    def __post_init__(self):
        for name in ("variance", "smoothness", "range"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"Matern {name} must be positive, got {v}")

    def _value(self, x, y):
        return self.variance * matern_correlation(x - y, self.smoothness, self.range)

    def _matrix(self, x, y):
        # stationary: evaluate the Bessel function once per distinct distance
        d = np.abs(x[:, None] - y[None, :])
        key = np.round(d, 13)
        uniq, inv = np.unique(key, return_inverse=True)
        vals = self.variance * matern_correlation(uniq, self.smoothness, self.range)
        return vals[inv].reshape(d.shape)

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.variance, self.smoothness, self.range])

    def to_dict(self) -> dict:
        return {"type": "matern", "variance": self.variance, "smoothness": self.smoothness,
                "range": self.range}

    @property
    def label(self) -> str:
        return f"matern(s2={self.variance:g},nu={self.smoothness:g},rho={self.range:g})"


@dataclass(frozen=True)
class InverseFractionalLaplacian(KernelSpec):
    """Kernel ``sum_j lambda_j^{-(nu + 1/2)} e_j(x) e_j(y)`` sharing eigenpairs with ``A``.

    The series is truncated at ``operator.mode_count`` terms.
    """

    smoothness: float = 0.5
    operator: SpectralOperator = field(default_factory=SpectralOperator)
    family = "inverse_fractional_laplacian"

    def __post_init__(self):
        if not (np.isfinite(self.smoothness) and self.smoothness > 0):
            raise ValueError(f"smoothness must be positive, got {self.smoothness}")

    @property
    def truncation(self) -> int:
        return self.operator.mode_count

    def eigenvalues(self) -> np.ndarray:
        """Kernel eigenvalues in operator mode order (nonincreasing)."""
        return self.operator.eigenvalues() ** (-(self.smoothness + 0.5))

    def _value(self, x, y):
        ex = self.operator.basis_matrix(x.ravel())
        ey = self.operator.basis_matrix(y.ravel())
        return np.einsum("km,km,m->k", ex, ey, self.eigenvalues()).reshape(x.shape)

    def _matrix(self, x, y):
        ex = self.operator.basis_matrix(x)
        ey = ex if y is x else self.operator.basis_matrix(y)
        return (ex * self.eigenvalues()) @ ey.T

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.smoothness])

    def to_dict(self) -> dict:
        op = self.operator
        return {"type": "inverse_fractional_laplacian", "smoothness": self.smoothness,
                "operator": {"boundary": op.boundary.value, "base_shift": op.base_shift,
                             "diffusivity": op.diffusivity, "mode_count": op.mode_count}}

    @property
    def label(self) -> str:
        return f"ifl(nu={self.smoothness:g})"


def _hat_weights(grid, x):
    """Piecewise-linear interpolation weights on ``grid`` (constant extrapolation)."""
    x = np.clip(x, grid[0], grid[-1])
    k = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, grid.size - 2)
    s = (x - grid[k]) / (grid[k + 1] - grid[k])
    w = np.zeros((x.size, grid.size))
    rows = np.arange(x.size)
    w[rows, k] = 1.0 - s
    w[rows, k + 1] += s
    return w


@dataclass(frozen=True, eq=False)
class Tabulated(KernelSpec):
    """Kernel given by values on a tensor grid, bilinearly interpolated."""

    grid: np.ndarray
    values: np.ndarray
    family = "tabulated"

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float).ravel()
        v = np.asarray(self.values, dtype=float)
        if g.size < 2 or np.any(np.diff(g) <= 0):
            raise ValueError("tabulated grid must be strictly increasing with >= 2 points")
        _check_points(g)
        if v.shape != (g.size, g.size):
            raise ValueError(f"value matrix shape {v.shape} does not match grid size {g.size}")
        if not np.allclose(v, v.T, rtol=0.0, atol=1e-10):
            raise ValueError("tabulated kernel values must be symmetric (tolerance 1e-10)")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", 0.5 * (v + v.T))

    def _value(self, x, y):
        wx = _hat_weights(self.grid, x.ravel())
        wy = _hat_weights(self.grid, y.ravel())
        return np.einsum("ki,ij,kj->k", wx, self.values, wy).reshape(x.shape)

    def _matrix(self, x, y):
        return _hat_weights(self.grid, x) @ self.values @ _hat_weights(self.grid, y).T

    @classmethod
    def from_csv(cls, path) -> "Tabulated":
        """Read ``x,g_1,...,g_n`` header then ``n`` rows ``g_i,q_i1,...,q_in``.

        Rows without the leading coordinate (exactly ``n`` values) are accepted too.
        """
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
        header = rows[0]
        if header[0].strip().lower() != "x":
            raise ValueError("tabulated kernel CSV must start with an 'x' header cell")
        grid = np.array([float(c) for c in header[1:]])
        vals = []
        for r in rows[1:]:
            nums = [float(c) for c in r]
            vals.append(nums[1:] if len(nums) == grid.size + 1 else nums)
        return cls(grid, np.array(vals))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x"] + [repr(float(g)) for g in self.grid])
            for g, row in zip(self.grid, self.values):
                w.writerow([repr(float(g))] + [repr(float(v)) for v in row])

    def to_dict(self) -> dict:
        return {"type": "tabulated", "grid": self.grid.tolist(), "values": self.values.tolist()}

    @property
    def label(self) -> str:
        return f"tabulated(n={self.grid.size})"


@dataclass(frozen=True)
class ParameterBox:
    """Compact box ``[lower, upper]`` of admissible parameters."""

    lower: tuple
    upper: tuple
    names: tuple = ()

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise ValueError("box bounds must be nonempty vectors of equal length")
        if np.any(lo <= 0):
            raise ValueError("box lower bounds must be strictly positive")
        if np.any(lo >= hi):
            raise ValueError("box requires lower < upper componentwise")
        if self.names and len(self.names) != lo.size:
            raise ValueError("one name per parameter")
        object.__setattr__(self, "lower", tuple(lo.tolist()))
        object.__setattr__(self, "upper", tuple(hi.tolist()))
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    def to_unit(self, theta):
        return (np.asarray(theta, dtype=float) - self.lo) / (self.hi - self.lo)

    def from_unit(self, u):
        return self.lo + np.clip(u, 0.0, 1.0) * (self.hi - self.lo)

    def contains(self, theta) -> bool:
        t = np.asarray(theta, dtype=float)
        return bool(np.all(t >= self.lo) and np.all(t <= self.hi))


FAMILY_PARAMETERS = {
    "matern": ("variance", "smoothness", "range"),
    "inverse_fractional_laplacian": ("smoothness",),
}


def family_member(family: str, theta: Sequence[float], operator: SpectralOperator | None = None
                  ) -> KernelSpec:
    """Instantiate a member of a parametric family from its parameter vector."""
    theta = [float(t) for t in np.ravel(theta)]
    if family == "matern":
        return Matern(*theta)
    if family in ("inverse_fractional_laplacian", "ifl"):
        return InverseFractionalLaplacian(theta[0], operator or SpectralOperator())
    raise ValueError(f"unknown kernel family {family!r}")


def kernel_value(spec: KernelSpec, x, y):
    return spec.value(x, y)


def coefficient_matrix(spec: KernelSpec, scheme: ObservationScheme) -> np.ndarray:
    """Discrete null-kernel coefficients on the scheme's basis.

    Pointwise schemes sample the kernel at vertices, local-average schemes at
    cell centroids.
    """
    if scheme.kind is SchemeKind.IDENTITY:
        raise ValueError("coefficient_matrix is not defined for the identity scheme; "
                         "use a fine pointwise scheme instead")
    c = spec.matrix(scheme.points)
    return 0.5 * (c + c.T)


def reference_eigenvalues(spec: KernelSpec, k: int) -> np.ndarray:
    """Analytic kernel eigenvalues (only for kernels commuting with ``A``)."""
    if not isinstance(spec, InverseFractionalLaplacian):
        raise TypeError(f"{type(spec).__name__} has no closed-form eigenvalues; "
                        "use gcq.null_eigenvalues on a discretization")
    if k < 0 or k > spec.truncation:
        raise ValueError(f"k must be in [0, {spec.truncation}], got {k}")
    return np.sort(spec.eigenvalues())[::-1][:k]


def kernel_from_dict(d: dict) -> KernelSpec:
    kind = d.get("type", "").lower()
    if kind == "matern":
        return Matern(float(d.get("variance", 1.0)), float(d["smoothness"]), float(d.get("range", 1.0)))
    if kind in ("inverse_fractional_laplacian", "ifl", "commuting"):
        op = d.get("operator", {})
        return InverseFractionalLaplacian(
            float(d["smoothness"]),
            SpectralOperator(Boundary(op.get("boundary", "dirichlet")), float(op.get("base_shift", 0.0)),
                             float(op.get("diffusivity", 1.0)), int(op.get("mode_count", 512))),
        )
    if kind == "tabulated":
        if "path" in d:
            return Tabulated.from_csv(d["path"])
        return Tabulated(np.array(d["grid"]), np.array(d["values"]))
    raise ValueError(f"unknown kernel type {kind!r}")
