"""Cubic B-spline basis and the 12-column regression design.

The basis is a clamped cubic with two interior knots, giving six basis
functions. A subject design row holds the basis evaluated at the subject's
time in columns 1-6 and the condition interaction z * basis in columns 7-12,
so the second block is the patient offset curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

DEGREE = 3
NUM_BASIS = 6
DESIGN_COLS = 2 * NUM_BASIS


@dataclass(frozen=True)
class SplineBasis:
    interior_knots: tuple[float, float]
    boundary: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.boundary
        k1, k2 = self.interior_knots
        if not (lo < hi):
            raise ValueError(f"boundary must be increasing, got {self.boundary}")
        if not (lo < k1 <= k2 < hi):
            raise ValueError(
                f"interior knots {self.interior_knots} must lie inside {self.boundary}"
            )

    @property
    def knot_vector(self) -> np.ndarray:
        lo, hi = self.boundary
        return np.concatenate(
            ([lo] * (DEGREE + 1), list(self.interior_knots), [hi] * (DEGREE + 1))
        )

    def to_dict(self) -> dict:
        return {
            "degree": DEGREE,
            "interior_knots": list(self.interior_knots),
            "boundary": list(self.boundary),
        }


def quantile_basis(times) -> SplineBasis:
    """Basis with interior knots at the 1/3 and 2/3 quantiles of observed times."""
    t = np.asarray(times, dtype=float)
    lo, hi = float(np.min(t)), float(np.max(t))
    k1, k2 = np.quantile(t, [1.0 / 3.0, 2.0 / 3.0])
    if not (lo < k1 <= k2 < hi):
        # Degenerate quantiles (few unique times); fall back to equal spacing.
        k1, k2 = lo + (hi - lo) / 3.0, lo + 2.0 * (hi - lo) / 3.0
    return SplineBasis(interior_knots=(float(k1), float(k2)), boundary=(lo, hi))


def eval_basis_matrix(basis: SplineBasis, t) -> np.ndarray:
    """Evaluate the six basis functions at each point of t (inside the boundary)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = basis.boundary
    if np.any(t < lo) or np.any(t > hi):
        bad = t[(t < lo) | (t > hi)][0]
        raise ValueError(f"time {bad} outside spline boundary [{lo}, {hi}]")
    return BSpline.design_matrix(t, basis.knot_vector, DEGREE, extrapolate=False).toarray()


def eval_basis(basis: SplineBasis, t: float) -> np.ndarray:
    return eval_basis_matrix(basis, [t])[0]


def build_design(ages, conditions, basis: SplineBasis) -> np.ndarray:
    """Stack per-subject design rows: basis columns then condition interactions."""
    ages = np.asarray(ages, dtype=float)
    z = np.asarray(conditions)
    if ages.shape != z.shape or ages.ndim != 1:
        raise ValueError(
            f"ages and conditions must be equal-length vectors, got {ages.shape} vs {z.shape}"
        )
    if not np.all(np.isin(z, (0, 1))):
        raise ValueError("conditions must be 0 (control) or 1 (patient)")
    B = eval_basis_matrix(basis, ages)
    return np.hstack([B, z[:, None] * B])


@dataclass(frozen=True)
class StudyDesign:
    """Design matrix plus the time indexing the regression model needs.

    x is the (J, 12) design, t_idx maps each subject to one of n_times unique
    time points, and corner subject indices (z, t) = (0, first), (0, last),
    (1, first), (1, last) are cached for slope-difference contrasts.
    """

    x: np.ndarray
    z: np.ndarray
    ages: np.ndarray
    t_idx: np.ndarray
    n_times: int
    basis: SplineBasis
    corners: dict = field(default_factory=dict)

    @property
    def n_subjects(self) -> int:
        return self.x.shape[0]

    @classmethod
    def from_inputs(cls, ages, conditions, basis: SplineBasis | None = None) -> "StudyDesign":
        ages = np.asarray(ages, dtype=float)
        z = np.asarray(conditions, dtype=np.int64)
        if basis is None:
            basis = quantile_basis(ages)
        x = build_design(ages, z, basis)
        unique_times, t_idx = np.unique(ages, return_inverse=True)
        corners = {}
        for cond in (0, 1):
            for side, tix in (("first", 0), ("last", unique_times.size - 1)):
                hits = np.flatnonzero((z == cond) & (t_idx == tix))
                if hits.size:
                    corners[(cond, side)] = int(hits[0])
        return cls(
            x=x,
            z=z,
            ages=ages,
            t_idx=t_idx.astype(np.int64),
            n_times=int(unique_times.size),
            basis=basis,
            corners=corners,
        )

    def slope_contrast(self) -> np.ndarray:
        """Contrast on the patient-offset block: basis at the last patient time
        minus basis at the first, the per-cluster slope-difference functional."""
        try:
            j_first = self.corners[(1, "first")]
            j_last = self.corners[(1, "last")]
        except KeyError:
            raise ValueError(
                "design lacks patient subjects at the first and last times; "
                "slope contrasts are unavailable"
            ) from None
        return self.x[j_last, NUM_BASIS:] - self.x[j_first, NUM_BASIS:]
