"""Spatial sampling schemes on (0, 1).

Three observation operators are supported:

* ``IDENTITY``       -- dense sampling, realized as pointwise sampling on a fine grid;
* ``LOCAL_AVERAGE``  -- cell averages, basis = cell indicators (projection ``P_h``);
* ``POINTWISE``      -- vertex values, basis = hat functions (interpolant ``I_h``).

Each scheme carries the Gram matrix of its basis, which turns discrete
coefficient matrices into L2 kernel inner products.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np


class SchemeKind(str, enum.Enum):
    IDENTITY = "identity"
    LOCAL_AVERAGE = "local_average"
    POINTWISE = "pointwise"


@dataclass(frozen=True, eq=False)
class Subdivision:
    """Partition ``0 = t_0 < t_1 < ... < t_K = 1`` of the unit interval."""

    breakpoints: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.breakpoints, dtype=float).ravel()
        if t.size < 2:
            raise ValueError("a subdivision needs at least one cell")
        if not np.all(np.isfinite(t)):
            raise ValueError("breakpoints must be finite")
        if abs(t[0]) > 1e-14 or abs(t[-1] - 1.0) > 1e-14:
            raise ValueError(f"breakpoints must start at 0 and end at 1, got [{t[0]}, {t[-1]}]")
        w = np.diff(t)
        if np.any(w <= 0):
            raise ValueError("degenerate subdivision: breakpoints must be strictly increasing")
        t[0], t[-1] = 0.0, 1.0
        t.setflags(write=False)
        object.__setattr__(self, "breakpoints", t)

    @classmethod
    def uniform(cls, n_cells: int) -> "Subdivision":
        if n_cells < 1:
            raise ValueError(f"n_cells must be >= 1, got {n_cells}")
        return cls(np.linspace(0.0, 1.0, int(n_cells) + 1))

    @classmethod
    def from_csv(cls, path) -> "Subdivision":
        """Read a one-column CSV of breakpoints (an optional non-numeric header is skipped)."""
        values = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or not row[0].strip():
                    continue
                try:
                    values.append(float(row[0]))
                except ValueError:
                    if values:
                        raise
        return cls(np.array(values))

    @property
    def n_cells(self) -> int:
        return self.breakpoints.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    @property
    def h(self) -> float:
        return float(self.widths.max())

    @property
    def quasi_uniformity(self) -> float:
        w = self.widths
        return float(w.max() / w.min())

    @property
    def centroids(self) -> np.ndarray:
        t = self.breakpoints
        return 0.5 * (t[1:] + t[:-1])

    def is_uniform(self, rtol: float = 1e-12) -> bool:
        w = self.widths
        return bool(np.all(np.abs(w - w[0]) <= rtol * w[0]))


@dataclass(frozen=True, eq=False)
class ObservationScheme:
    kind: SchemeKind
    subdivision: Subdivision
    _cache: dict = field(default_factory=dict, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind(self.kind))

    @classmethod
    def pointwise(cls, n_cells_or_subdivision) -> "ObservationScheme":
        return cls(SchemeKind.POINTWISE, _as_subdivision(n_cells_or_subdivision))

    @classmethod
    def local_average(cls, n_cells_or_subdivision) -> "ObservationScheme":
        return cls(SchemeKind.LOCAL_AVERAGE, _as_subdivision(n_cells_or_subdivision))

    @classmethod
    def identity(cls, n_cells_or_subdivision) -> "ObservationScheme":
        return cls(SchemeKind.IDENTITY, _as_subdivision(n_cells_or_subdivision))

    @property
    def uses_hat_basis(self) -> bool:
        return self.kind in (SchemeKind.POINTWISE, SchemeKind.IDENTITY)

    @property
    def size(self) -> int:
        k = self.subdivision.n_cells
        return k + 1 if self.uses_hat_basis else k

    @property
    def points(self) -> np.ndarray:
        """Representative coordinates: vertices (hat basis) or cell centroids."""
        if self.uses_hat_basis:
            return self.subdivision.breakpoints
        return self.subdivision.centroids

    @property
    def gram(self) -> np.ndarray:
        if "gram" not in self._cache:
            g = gram_matrix(self)
            g.setflags(write=False)
            self._cache["gram"] = g
        return self._cache["gram"]

    def basis_at(self, x) -> np.ndarray:
        """Evaluate all basis functions at points ``x``; shape ``(len(x), size)``.

        Indicator cells are half-open ``[t_j, t_{j+1})`` with the last one closed.
        """
        x = np.asarray(x, dtype=float)
        _check_unit(x)
        t = self.subdivision.breakpoints
        k = self.subdivision.n_cells
        cell = np.clip(np.searchsorted(t, x, side="right") - 1, 0, k - 1)
        out = np.zeros((x.size, self.size))
        rows = np.arange(x.size)
        if self.uses_hat_basis:
            s = (x - t[cell]) / (t[cell + 1] - t[cell])
            out[rows, cell] = 1.0 - s
            out[rows, cell + 1] += s
        else:
            out[rows, cell] = 1.0
        return out


def _as_subdivision(arg) -> Subdivision:
    if isinstance(arg, Subdivision):
        return arg
    if np.ndim(arg) == 0:
        return Subdivision.uniform(int(arg))
    return Subdivision(np.asarray(arg, dtype=float))


def _check_unit(x):
    if not np.all(np.isfinite(x)) or np.any((x < 0) | (x > 1)):
        raise ValueError("points must lie in [0, 1]")


def gram_matrix(scheme: ObservationScheme) -> np.ndarray:
    """Inner products ``<psi_j, psi_k>`` of the scheme's basis functions.

    Indicator basis gives ``diag(|T_j|)``. The hat basis is assembled from the
    per-cell mass matrix ``w/6 [[2, 1], [1, 2]]``, exact on any subdivision.
    """
    w = scheme.subdivision.widths
    if not scheme.uses_hat_basis:
        return np.diag(w.astype(float))
    n = w.size + 1
    g = np.zeros((n, n))
    idx = np.arange(w.size)
    g[idx, idx] += w / 3.0
    g[idx + 1, idx + 1] += w / 3.0
    g[idx, idx + 1] += w / 6.0
    g[idx + 1, idx] += w / 6.0
    return g


def interpolate(scheme: ObservationScheme, nodal_values, x):
    """Piecewise-linear interpolant of vertex values evaluated at ``x``."""
    if not scheme.uses_hat_basis:
        raise ValueError("interpolation needs a pointwise (hat-function) scheme")
    v = np.asarray(nodal_values, dtype=float)
    if v.shape[-1] != scheme.size:
        raise ValueError(f"expected {scheme.size} nodal values, got {v.shape[-1]}")
    x = np.asarray(x, dtype=float)
    _check_unit(x)
    return np.interp(x, scheme.subdivision.breakpoints, v)


def _locate_on_grid(points, grid, what="point"):
    idx = np.searchsorted(grid, points - 1e-12)
    idx = np.clip(idx, 0, grid.size - 1)
    ok = np.abs(grid[idx] - points) <= 1e-10
    if not np.all(ok):
        bad = np.asarray(points)[~ok]
        raise ValueError(f"{what} {bad[:3]} not on the fine grid")
    return idx


def average_matrix(subdivision: Subdivision, fine_grid) -> np.ndarray:
    """Matrix mapping fine-grid nodal values to composite-trapezoid cell averages."""
    grid = np.asarray(fine_grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("fine grid must be strictly increasing")
    edges = _locate_on_grid(subdivision.breakpoints, grid, what="cell boundary")
    out = np.zeros((subdivision.n_cells, grid.size))
    for c in range(subdivision.n_cells):
        a, b = edges[c], edges[c + 1]
        dx = np.diff(grid[a : b + 1])
        out[c, a:b] += 0.5 * dx
        out[c, a + 1 : b + 1] += 0.5 * dx
        out[c] /= subdivision.widths[c]
    return out


def project_average(scheme: ObservationScheme, fine_values, fine_grid) -> np.ndarray:
    """Cell averages of a function given on a fine grid (last axis = space)."""
    if scheme.kind is not SchemeKind.LOCAL_AVERAGE:
        raise ValueError("project_average needs a local-average scheme")
    m = average_matrix(scheme.subdivision, fine_grid)
    return np.asarray(fine_values, dtype=float) @ m.T


def restriction_indices(scheme: ObservationScheme, fine_grid) -> np.ndarray:
    """Indices of the scheme's vertices inside ``fine_grid``."""
    if not scheme.uses_hat_basis:
        raise ValueError("vertex restriction needs a pointwise scheme")
    return _locate_on_grid(scheme.subdivision.breakpoints, np.asarray(fine_grid, dtype=float),
                           what="vertex")


def observation_matrix(scheme: ObservationScheme, fine_grid) -> np.ndarray:
    """Linear map from fine-grid nodal values to the scheme's observed vector."""
    grid = np.asarray(fine_grid, dtype=float)
    if scheme.uses_hat_basis:
        out = np.zeros((scheme.size, grid.size))
        out[np.arange(scheme.size), restriction_indices(scheme, grid)] = 1.0
        return out
    return average_matrix(scheme.subdivision, grid)
