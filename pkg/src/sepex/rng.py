"""Seeded random number generation and the distributions the samplers need.

All randomness flows through numpy Generators built from a (seed, stream)
pair, so multi-chain runs are reproducible bit-for-bit: the same pair always
replays the same draw sequence, and distinct streams are statistically
independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Build the generator for one chain from a user seed and a stream id."""
    if seed < 0 or stream < 0:
        raise ValueError(f"seed and stream must be nonnegative, got ({seed}, {stream})")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class NormalInvGammaParams:
    """Conjugate base measure for (mean, variance) atoms.

    sigma2 ~ InvGamma(a0, b0) and mu | sigma2 ~ Normal(m0, sigma2 / kappa0).
    """

    m0: float
    kappa0: float
    a0: float
    b0: float

    def __post_init__(self):
        if not np.isfinite(self.m0):
            raise ValueError(f"m0 must be finite, got {self.m0}")
        for name in ("kappa0", "a0", "b0"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value}")


def _check_finite(**params) -> None:
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise ValueError(f"{name} must be finite, got {value}")


def draw_normal(mean: float, sd: float, rng: np.random.Generator) -> float:
    _check_finite(mean=mean, sd=sd)
    if sd <= 0:
        raise ValueError(f"sd must be positive, got {sd}")
    return float(rng.normal(mean, sd))


def draw_beta(a: float, b: float, rng: np.random.Generator) -> float:
    _check_finite(a=a, b=b)
    if a <= 0 or b <= 0:
        raise ValueError(f"beta shapes must be positive, got ({a}, {b})")
    return float(rng.beta(a, b))


def draw_inverse_gamma(a, b, rng: np.random.Generator):
    """Inverse-gamma draw(s) with density proportional to x^-(a+1) exp(-b/x).

    Accepts scalars or arrays; shapes broadcast.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_finite(a=a, b=b)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("inverse-gamma shape and rate must be positive")
    out = b / rng.gamma(shape=a, scale=1.0)
    return float(out) if out.ndim == 0 else out


def draw_categorical(weights, rng: np.random.Generator, log: bool = False) -> int:
    """Sample an index proportional to (possibly unnormalized) weights.

    With log=True the weights are log scale; the max is subtracted before
    exponentiation so likelihood products over thousands of items do not
    underflow.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a nonempty 1-D vector")
    if log:
        if np.all(np.isneginf(w)) or np.any(np.isnan(w)) or np.any(np.isposinf(w)):
            raise ValueError("log-weights must not be NaN/+inf or all -inf")
        p = np.exp(w - np.max(w))
    else:
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        p = w
    total = p.sum()
    if total <= 0:
        raise ValueError("at least one weight must be positive")
    return int(np.searchsorted(np.cumsum(p), rng.random() * total, side="right"))


def draw_categorical_rows(log_weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of a matrix of log weights.

    Rows are normalized independently (max-subtracted); used for blocked
    updates of conditionally independent labels.
    """
    lw = np.asarray(log_weights, dtype=float)
    if lw.ndim != 2:
        raise ValueError("log_weights must be 2-D")
    if np.any(np.isnan(lw)) or np.any(np.isposinf(lw)):
        raise ValueError("log-weights must not contain NaN or +inf")
    m = np.max(lw, axis=1, keepdims=True)
    if np.any(np.isneginf(m)):
        bad = int(np.where(np.isneginf(m))[0][0])
        raise ValueError(f"all conditional log-weights are -inf in row {bad}")
    p = np.exp(lw - m)
    cum = np.cumsum(p, axis=1)
    u = rng.random(lw.shape[0]) * cum[:, -1]
    return (cum < u[:, None]).sum(axis=1).astype(np.int64)
