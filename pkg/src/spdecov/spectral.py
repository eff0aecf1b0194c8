"""Spectral representation of the elliptic operator ``A = c - a * d^2/dx^2`` on (0, 1).

Only Dirichlet and Neumann boundary conditions are supported; both have
closed-form eigenpairs, which is all the simulator and kernel code needs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Boundary(str, enum.Enum):
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"


@dataclass(frozen=True)
class SpectralOperator:
    """Eigen-decomposition of ``A = base_shift - diffusivity * Laplacian``.

    Parameters
    ----------
    boundary : Boundary
        Dirichlet modes are ``sqrt(2) sin(j pi x)``, ``j >= 1``. Neumann modes
        are the constant ``1`` (``j = 0``) and ``sqrt(2) cos(j pi x)``, ``j >= 1``.
    base_shift : float
        The constant ``c >= 0``. Neumann requires ``c > 0`` so that ``A`` is
        positive definite.
    diffusivity : float
        The coefficient ``a > 0``.
    mode_count : int
        Truncation level ``N``; modes ``first_index .. first_index + N - 1``.
    """

    boundary: Boundary = Boundary.DIRICHLET
    base_shift: float = 0.0
    diffusivity: float = 1.0
    mode_count: int = 512

    def __post_init__(self):
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        if self.diffusivity <= 0:
            raise ValueError(f"diffusivity must be positive, got {self.diffusivity}")
        if self.base_shift < 0:
            raise ValueError(f"base_shift must be nonnegative, got {self.base_shift}")
        if self.boundary is Boundary.NEUMANN and self.base_shift <= 0:
            raise ValueError("Neumann operator needs base_shift > 0 (constant mode eigenvalue)")
        if int(self.mode_count) < 1:
            raise ValueError(f"mode_count must be positive, got {self.mode_count}")
        object.__setattr__(self, "mode_count", int(self.mode_count))

    @property
    def first_index(self) -> int:
        return 0 if self.boundary is Boundary.NEUMANN else 1

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.first_index, self.first_index + self.mode_count)

    def _check_index(self, j):
        j = np.asarray(j)
        if np.any(j < self.first_index) or np.any(j >= self.first_index + self.mode_count):
            raise IndexError(
                f"mode index {j} outside [{self.first_index}, "
                f"{self.first_index + self.mode_count - 1}] for {self.boundary.value} operator"
            )
        return j

    def eigenvalue(self, j):
        j = self._check_index(j)
        return self.base_shift + self.diffusivity * (j * np.pi) ** 2

    def eigenvalues(self) -> np.ndarray:
        return self.eigenvalue(self.indices).astype(float)

    def eigenfunction_value(self, j, x):
        j = self._check_index(j)
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)) or np.any((x < 0) | (x > 1)):
            raise ValueError("eigenfunctions are defined on [0, 1] only")
        if self.boundary is Boundary.DIRICHLET:
            return np.sqrt(2.0) * np.sin(j * np.pi * x)
        return np.where(j == 0, 1.0, np.sqrt(2.0) * np.cos(j * np.pi * x))

    def basis_matrix(self, x) -> np.ndarray:
        """Matrix ``E[k, m] = e_m(x_k)`` for all retained modes."""
        x = np.asarray(x, dtype=float)
        return self.eigenfunction_value(self.indices[None, :], x[:, None])

    def semigroup_factor(self, j, t):
        """``exp(-lambda_j t)``, the action of ``S(t)`` on mode ``j``."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise ValueError(f"semigroup time must be nonnegative, got {t}")
        return np.exp(-self.eigenvalue(j) * t)

    def semigroup_factors(self, t: float) -> np.ndarray:
        return self.semigroup_factor(self.indices, t)
