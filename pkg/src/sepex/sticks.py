"""Finite stick-breaking weights shared by both samplers.

Truncated construction with the last stick fixed to one: V_h ~ Beta(1, mass)
a priori for h < H, weights w_h = V_h * prod_{l<h} (1 - V_l). The conjugate
posterior given cluster counts n is V_h ~ Beta(1 + n_h, mass + sum_{l>h} n_l).
"""

from __future__ import annotations

import numpy as np


def weights_from_sticks(v) -> np.ndarray:
    """Map stick fractions (last entry must be 1) to mixture weights.

    The final weight is computed as one minus the rest so the vector sums to
    one exactly.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("sticks must be a nonempty 1-D vector")
    if v[-1] != 1.0:
        raise ValueError("last stick must equal 1")
    if np.any(v < 0) or np.any(v > 1):
        raise ValueError("sticks must lie in [0, 1]")
    w = np.empty_like(v)
    if v.size > 1:
        w[:-1] = v[:-1] * np.concatenate(([1.0], np.cumprod(1.0 - v[:-2])))
    w[-1] = max(1.0 - w[:-1].sum(), 0.0)
    return w


def sample_sticks(counts, mass: float, rng: np.random.Generator) -> np.ndarray:
    """Draw stick fractions from their conjugate conditional given counts.

    With all-zero counts this is the prior. Returns the full stick vector
    with the last entry fixed to 1.
    """
    n = np.asarray(counts, dtype=float)
    if n.ndim != 1 or n.size == 0:
        raise ValueError("counts must be a nonempty 1-D vector")
    if np.any(n < 0):
        raise ValueError("counts must be nonnegative")
    if not (np.isfinite(mass) and mass > 0):
        raise ValueError(f"mass must be positive, got {mass}")
    H = n.size
    v = np.ones(H)
    if H > 1:
        tail = np.concatenate((np.cumsum(n[::-1])[::-1][1:], [0.0]))[: H - 1]
        draws = rng.beta(1.0 + n[:-1], mass + tail)
        # beta draws can round to exactly 1; keep free sticks strictly inside
        # (0, 1) so stick log densities stay finite
        v[:-1] = np.minimum(draws, np.nextafter(1.0, 0.0))
    return v


def update_stick_weights(counts, mass: float, rng: np.random.Generator):
    """Resample sticks from their conditional and return (sticks, weights)."""
    v = sample_sticks(counts, mass, rng)
    return v, weights_from_sticks(v)


def sample_sticks_batch(counts: np.ndarray, mass: float, rng: np.random.Generator) -> np.ndarray:
    """Row-wise stick draws for a (groups, H) count matrix."""
    n = np.asarray(counts, dtype=float)
    G, H = n.shape
    v = np.ones((G, H))
    if H > 1:
        tail = np.concatenate(
            (np.cumsum(n[:, ::-1], axis=1)[:, ::-1][:, 1:], np.zeros((G, 1))), axis=1
        )[:, : H - 1]
        v[:, :-1] = np.minimum(
            rng.beta(1.0 + n[:, :-1], mass + tail), np.nextafter(1.0, 0.0)
        )
    return v


def weights_from_sticks_batch(v: np.ndarray) -> np.ndarray:
    w = np.empty_like(v)
    if v.shape[1] > 1:
        lead = np.concatenate(
            (np.ones((v.shape[0], 1)), np.cumprod(1.0 - v[:, :-2], axis=1)), axis=1
        )
        w[:, :-1] = v[:, :-1] * lead
    w[:, -1] = 1.0 - w[:, :-1].sum(axis=1)
    np.clip(w[:, -1], 0.0, None, out=w[:, -1])
    return w


def log_stick_prior(v, mass: float) -> float:
    """Log density of the free sticks (all but the fixed last one) under
    Beta(1, mass): log mass + (mass - 1) log(1 - v)."""
    v = np.asarray(v, dtype=float)
    free = v[..., :-1]
    if free.size == 0:
        return 0.0
    if mass == 1.0:  # uniform sticks; avoids 0 * log(0) at the boundary
        return 0.0
    return float(np.sum(np.log(mass) + (mass - 1.0) * np.log1p(-free)))
