"""Orthogonal polynomial basis over a daily time grid, with exact extrapolation.

Column 0 is the raw constant 1; columns 1..Q are orthonormal with zero sum.
Each column also carries its monomial coefficients in raw time so it can be
continued exactly beyond the fitted grid (needed to evaluate the time-varying
autoregressive coefficient at forecast dates).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial


class RankError(ValueError):
    """More basis columns requested than grid points can support."""


@dataclass(frozen=True)
class OrthoBasis:
    t_count: int
    degree: int
    columns: np.ndarray  # T x (Q+1)
    monomial_coeffs: np.ndarray  # (Q+1) x (Q+1), row q = ascending powers of raw t

    def __post_init__(self):
        object.__setattr__(self, "columns", np.asarray(self.columns, dtype=float))
        object.__setattr__(self, "monomial_coeffs", np.asarray(self.monomial_coeffs, dtype=float))
        self.columns.setflags(write=False)
        self.monomial_coeffs.setflags(write=False)


def build_orthogonal_basis(t_count: int, degree: int) -> OrthoBasis:
    """Build the basis on the grid t = 1..t_count via QR on a centered Vandermonde.

    Requires ``t_count >= degree + 1``; otherwise the columns cannot be
    linearly independent and a :class:`RankError` is raised.
    """
    if degree < 0:
        raise ValueError("degree must be >= 0")
    if t_count < degree + 1:
        raise RankError(f"degree {degree} needs at least {degree + 1} grid points, got {t_count}")

    t = np.arange(1, t_count + 1, dtype=float)
    centered = t - t.mean()  # centering keeps the Vandermonde well-conditioned
    vander = np.vander(centered, degree + 1, increasing=True)
    q, _ = np.linalg.qr(vander)

    columns = np.empty_like(q)
    columns[:, 0] = 1.0  # the constant column stays on the natural scale
    for j in range(1, degree + 1):
        col = q[:, j]
        # Fix signs so the leading monomial coefficient is positive.
        lead = Polynomial.fit(t, col, deg=j).convert().coef[-1]
        columns[:, j] = -col if lead < 0 else col

    coeffs = np.zeros((degree + 1, degree + 1))
    for j in range(degree + 1):
        raw = Polynomial.fit(t, columns[:, j], deg=j).convert().coef
        coeffs[j, : len(raw)] = raw
    return OrthoBasis(t_count, degree, columns, coeffs)


def evaluate_beyond(basis: OrthoBasis, t: int) -> np.ndarray:
    """Evaluate every basis column at raw time t >= 1 by polynomial continuation.

    For 1 <= t <= t_count this reproduces the stored matrix row.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    powers = float(t) ** np.arange(basis.degree + 1)
    return basis.monomial_coeffs @ powers


def evaluate_grid(basis: OrthoBasis, times: np.ndarray) -> np.ndarray:
    """Vectorized continuation: rows of basis values for an array of raw times."""
    times = np.asarray(times, dtype=float)
    powers = times[:, None] ** np.arange(basis.degree + 1)[None, :]
    return powers @ basis.monomial_coeffs.T
