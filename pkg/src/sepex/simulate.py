"""Synthetic data generators: the protein-regression benchmark truth and a
prior-predictive generator for the nested model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nested import NestedModelConfig, NestedState, draw_prior_state
from .rng import draw_categorical_rows

# Per-cluster mean curves: alpha + lin * t + cub * t^3 (+ subject offset).
CLUSTER_CURVES = ((2.0, 3.0), (-2.0, 1.0), (1.0, -3.0))


@dataclass(frozen=True)
class ProteinSimTruth:
    n_subjects: int = 20
    n_proteins: int = 100
    pi: tuple = (0.25, 0.30, 0.45)
    alpha_tilde: tuple = (0.0, -3.0, 1.0)
    delta_sd: float = 0.1
    noise_sd: tuple = (0.2, 0.5, 1.0)

    def __post_init__(self):
        if abs(sum(self.pi) - 1.0) > 1e-12:
            raise ValueError(f"cluster weights must sum to 1, got {self.pi}")
        if len(self.pi) != 3 or len(self.alpha_tilde) != 3 or len(self.noise_sd) != 3:
            raise ValueError("the benchmark truth has exactly three clusters")

    def mean_curve(self, cluster: int, t) -> np.ndarray:
        lin, cub = CLUSTER_CURVES[cluster]
        t = np.asarray(t, dtype=float)
        return self.alpha_tilde[cluster] + lin * t + cub * t**3


@dataclass
class ProteinSim:
    data: np.ndarray  # (I, J)
    ages: np.ndarray  # (J,) in (0, 1)
    labels: np.ndarray  # (I,) true cluster of each protein
    delta: np.ndarray  # (J,) subject offsets
    alpha: np.ndarray  # (I,) protein offsets

    def to_truth_dict(self) -> dict:
        return {
            "labels": self.labels.tolist(),
            "ages": self.ages.tolist(),
            "delta": self.delta.tolist(),
            "alpha": self.alpha.tolist(),
        }


def simulate_protein(truth: ProteinSimTruth, rng: np.random.Generator,
                     delta_override=None) -> ProteinSim:
    """Draw the regression benchmark: uniform ages, three fixed mean curves,
    cluster-specific noise levels, and per-subject offsets (either normal
    draws or an explicit override vector)."""
    I, J = truth.n_proteins, truth.n_subjects
    ages = rng.uniform(0.0, 1.0, size=J)
    labels = draw_categorical_rows(
        np.log(np.tile(np.asarray(truth.pi), (I, 1))), rng
    )
    if delta_override is not None:
        delta = np.asarray(delta_override, dtype=float)
        if delta.shape != (J,):
            raise ValueError(f"delta override must have length {J}")
    else:
        delta = rng.normal(0.0, truth.delta_sd, size=J)
    alpha = np.asarray(truth.alpha_tilde)[labels]
    means = np.stack([truth.mean_curve(h, ages) for h in range(3)])  # (3, J)
    noise = rng.standard_normal((I, J)) * np.asarray(truth.noise_sd)[labels][:, None]
    data = means[labels] + delta[None, :] + noise
    return ProteinSim(data=data, ages=ages, labels=labels, delta=delta, alpha=alpha)


@dataclass
class NestedSim:
    data: np.ndarray  # (I, J)
    subject_labels: np.ndarray  # (J,)
    row_labels: np.ndarray  # (K, I)
    state: NestedState = field(repr=False, default=None)


def simulate_nested(config: NestedModelConfig, I: int, J: int,
                    rng: np.random.Generator, separation: float | None = None,
                    subject_labels=None, row_labels=None) -> NestedSim:
    """Prior-predictive draw from the nested model.

    With separation set, the atom means are replaced by an evenly spaced grid
    separation * sigma apart at a common variance, so separation = 0 collapses
    all atoms (fully exchangeable cells) and large values give well-separated
    clusters. Explicit label overrides fix the partition truth for recovery
    benchmarks.
    """
    prior = config.atom_prior
    if prior is None:
        raise ValueError("atom prior unset; construct the config with one")
    if separation is not None and separation < 0:
        raise ValueError(f"separation must be nonnegative, got {separation}")
    state = draw_prior_state(config, I, J, rng)
    if separation is not None:
        sigma = np.sqrt(prior.b0 / max(prior.a0 - 1.0, 0.5))
        state.sigma2 = np.full(config.L, sigma**2)
        state.mu = prior.m0 + (np.arange(config.L) - (config.L - 1) / 2.0) \
            * separation * sigma
    if subject_labels is not None:
        state.subject_labels = np.asarray(subject_labels, dtype=np.int64).copy()
        if state.subject_labels.shape != (J,) or np.any(state.subject_labels >= config.K):
            raise ValueError("subject label override inconsistent with J/K")
    if row_labels is not None:
        state.row_labels = np.asarray(row_labels, dtype=np.int64).copy()
        if state.row_labels.shape != (config.K, I) or np.any(state.row_labels >= config.L):
            raise ValueError("row label override inconsistent with K/I/L")
    lab = state.cell_atom_labels()
    data = rng.normal(state.mu[lab], np.sqrt(state.sigma2[lab]))
    return NestedSim(
        data=data,
        subject_labels=state.subject_labels.copy(),
        row_labels=state.row_labels.copy(),
        state=state,
    )
