"""Realized covariation and discretized Hilbert-Schmidt distances."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .kernels import InverseFractionalLaplacian, KernelSpec, coefficient_matrix
from .observation import ObservationScheme, SchemeKind
from .spectral import SpectralOperator


@dataclass(frozen=True, eq=False)
class PathObservations:
    """Observed values ``X_{i delta}`` at the coordinates of a sampling scheme.

    ``values`` has one row per observation time ``0, delta, ..., floor(T/delta) delta``.
    When ``scheme`` is ``None`` the columns are spectral mode coefficients with
    respect to ``operator`` (the identity observation setting in an orthonormal
    basis, whose Gram matrix is the identity).
    """

    values: np.ndarray
    delta: float
    horizon: float
    scheme: ObservationScheme | None = None
    operator: SpectralOperator | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ConfigurationError("observations must be a (time x space) matrix")
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("observations contain non-finite values")
        if self.delta <= 0 or self.horizon <= 0:
            raise ConfigurationError("delta and horizon must be positive")
        expected = int(np.floor(self.horizon / self.delta + 1e-9)) + 1
        if v.shape[0] != expected:
            raise ConfigurationError(f"expected floor(T/delta)+1 = {expected} rows, got {v.shape[0]}")
        if self.scheme is None and self.operator is None:
            raise ConfigurationError("observations need either a scheme or a spectral operator")
        if self.scheme is not None and v.shape[1] != self.scheme.size:
            raise ConfigurationError(f"scheme has {self.scheme.size} coordinates, values have {v.shape[1]}")
        if self.scheme is None and v.shape[1] != self.operator.mode_count:
            raise ConfigurationError("mode observations must have one column per operator mode")
        object.__setattr__(self, "values", v)

    @property
    def n_increments(self) -> int:
        return self.values.shape[0] - 1

    @property
    def t_delta(self) -> float:
        return self.n_increments * self.delta

    @property
    def gram(self) -> np.ndarray:
        if self.scheme is None:
            return np.eye(self.values.shape[1])
        return self.scheme.gram

    @property
    def is_modal(self) -> bool:
        return self.scheme is None


@dataclass(frozen=True, eq=False)
class RealizedCovariation:
    """Coefficient matrix ``C`` of ``RV_T / T`` in the scheme's basis."""

    matrix: np.ndarray
    delta: float
    horizon: float
    t_delta: float
    scheme: ObservationScheme | None = None
    operator: SpectralOperator | None = None

    @property
    def gram(self) -> np.ndarray:
        if self.scheme is None:
            return np.eye(self.matrix.shape[0])
        return self.scheme.gram

    def rescaled(self) -> np.ndarray:
        """Coefficients normalized by ``t_delta`` instead of ``T``."""
        return self.matrix * (self.horizon / self.t_delta)

    def to_csv(self, path):
        np.savetxt(path, self.matrix, delimiter=",", fmt="%.17g")


def realized_covariation(obs: PathObservations) -> RealizedCovariation:
    """``C_jk = (1/T) sum_i dX_i(j) dX_i(k)`` over the ``floor(T/delta)`` observed increments."""
    if obs.values.shape[0] < 2:
        raise ConfigurationError("realized covariation needs at least two observation times")
    inc = np.diff(obs.values, axis=0)
    c = inc.T @ inc / obs.horizon
    c = 0.5 * (c + c.T)
    return RealizedCovariation(c, obs.delta, obs.horizon, obs.t_delta, obs.scheme, obs.operator)


def hs_distance_sq(c1, c2, gram) -> float:
    """Squared L2 distance of two kernels in coefficient form: ``tr(G E^T G E)``, ``E = C1 - C2``."""
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    g = np.asarray(gram, dtype=float)
    if c1.shape != c2.shape or c1.ndim != 2 or c1.shape[0] != c1.shape[1] or g.shape != c1.shape:
        raise ValueError(f"shape mismatch: {c1.shape}, {c2.shape}, gram {g.shape}")
    e = c1 - c2
    ge = g @ e
    # G symmetric: tr(G E^T G E) = sum((E G) .* (G E))
    val = float(np.sum((e @ g) * ge))
    return max(val, 0.0)


def sarcv(obs: PathObservations, op: SpectralOperator | None = None) -> np.ndarray:
    """Semigroup-adjusted realized covariation in mode coordinates.

    Uses ``a(i delta) - exp(-lambda delta) a((i-1) delta)`` in place of plain increments.
    """
    if not obs.is_modal:
        raise ValueError("SARCV needs spectral mode-coefficient observations")
    op = op or obs.operator
    a = obs.values
    factor = op.semigroup_factors(obs.delta)
    adj = a[1:] - factor * a[:-1]
    c = adj.T @ adj / obs.horizon
    return 0.5 * (c + c.T)


def prolongation_matrix(coarse: ObservationScheme, fine: ObservationScheme) -> np.ndarray:
    """Map coarse basis coefficients to fine basis coefficients (exact for nested schemes)."""
    if coarse.uses_hat_basis != fine.uses_hat_basis:
        raise ConfigurationError("coarse and fine schemes must use the same basis type")
    tc = coarse.subdivision.breakpoints
    tf = fine.subdivision.breakpoints
    idx = np.searchsorted(tf, tc - 1e-12)
    idx = np.clip(idx, 0, tf.size - 1)
    if not np.all(np.abs(tf[idx] - tc) <= 1e-10):
        raise ConfigurationError("coarse subdivision is not nested in the fine subdivision")
    return coarse.basis_at(fine.points)


def estimation_error(rv: RealizedCovariation, reference: KernelSpec,
                     fine_scheme: ObservationScheme | None = None) -> float:
    """L2 distance between the estimated kernel and ``reference``.

    For scheme observations the estimated kernel is prolonged to ``fine_scheme``
    and compared with the reference sampled there. For mode observations the
    reference must commute with the operator and the error is exact.
    """
    if rv.scheme is None:
        if not isinstance(reference, InverseFractionalLaplacian):
            raise ConfigurationError("mode-coordinate error needs a kernel commuting with A")
        if reference.operator.mode_count != rv.matrix.shape[0]:
            raise ConfigurationError("reference truncation differs from the observed mode count")
        return float(np.sqrt(hs_distance_sq(rv.matrix, np.diag(reference.eigenvalues()),
                                            np.eye(rv.matrix.shape[0]))))
    fine = fine_scheme or rv.scheme
    if fine.kind is SchemeKind.IDENTITY:
        fine = ObservationScheme.pointwise(fine.subdivision)
    p = prolongation_matrix(rv.scheme, fine)
    c_fine = p @ rv.matrix @ p.T
    c_ref = coefficient_matrix(reference, fine)
    return float(np.sqrt(hs_distance_sq(c_fine, c_ref, fine.gram)))


def read_observations_csv(path):
    """Read ``step,node,value`` rows into a dense (steps x nodes) matrix."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for r in reader:
            if not r:
                continue
            try:
                rows.append((int(r[0]), int(r[1]), float(r[2])))
            except ValueError:
                if rows:
                    raise
    if not rows:
        raise ConfigurationError(f"no observations in {path}")
    arr = np.array(rows)
    steps = arr[:, 0].astype(int)
    nodes = arr[:, 1].astype(int)
    out = np.full((steps.max() + 1, nodes.max() + 1), np.nan)
    out[steps, nodes] = arr[:, 2]
    if np.isnan(out).any():
        raise ConfigurationError("observation file does not cover a full (step, node) grid")
    return out


def write_observations_csv(path, values):
    values = np.asarray(values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "node", "value"])
        for i, row in enumerate(values):
            for j, v in enumerate(row):
                w.writerow([i, j, repr(float(v))])
