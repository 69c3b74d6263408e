"""Nested-partition common-atoms mixture for data matrices.

The model clusters columns (subjects) and, nested within each column
cluster, rows (OTUs), with one shared row partition per column cluster. All
mixture components share a common pool of normal atoms, so row clusters are
comparable across column clusters. The joint factorizes as

    prod_ij N(y_ij; mu[M[S_j, i]], sigma2[M[S_j, i]])
    * prod_j pi[S_j] * prod_{k,i} w[k, M[k, i]]
    * p(pi) p(w) p(mu, sigma2)

with truncated stick-breaking priors on pi (K sticks, mass beta) and each
w_k (L sticks, mass alpha), and a normal-inverse-gamma base measure on the
atoms. Row labels are kept for every column cluster, including empty ones,
because the weight product above runs over all k.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln

from .io import ChainArchive
from .rng import NormalInvGammaParams, draw_categorical_rows, draw_inverse_gamma
from .sticks import log_stick_prior, sample_sticks_batch, update_stick_weights, \
    weights_from_sticks_batch

LOG_2PI = float(np.log(2.0 * np.pi))


def _log_invgamma(x, a: float, b: float):
    return a * np.log(b) - gammaln(a) - (a + 1.0) * np.log(x) - b / x


def _log_normal(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


@dataclass(frozen=True)
class NestedModelConfig:
    K: int = 20
    L: int = 30
    alpha: float = 1.0
    beta: float = 1.0
    atom_prior: NormalInvGammaParams | None = None

    def __post_init__(self):
        if self.K < 1 or self.L < 1:
            raise ValueError(f"truncations must be >= 1, got K={self.K}, L={self.L}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("stick-breaking masses must be positive")

    def resolve(self, data: np.ndarray) -> "NestedModelConfig":
        """Fill an unset atom prior empirically: location at the grand mean,
        rate at the sample variance, with kappa0=0.1 and a0=2."""
        if self.atom_prior is not None:
            return self
        data = np.asarray(data, dtype=float)
        prior = NormalInvGammaParams(
            m0=float(data.mean()),
            kappa0=0.1,
            a0=2.0,
            b0=float(max(data.var(), 1e-12)),
        )
        return replace(self, atom_prior=prior)

    def to_dict(self) -> dict:
        prior = self.atom_prior
        return {
            "K": self.K,
            "L": self.L,
            "alpha": self.alpha,
            "beta": self.beta,
            "m0": None if prior is None else prior.m0,
            "kappa0": None if prior is None else prior.kappa0,
            "a0": None if prior is None else prior.a0,
            "b0": None if prior is None else prior.b0,
        }


@dataclass
class NestedState:
    """Latent state: column labels S, per-cluster row labels M, stick weights,
    and the shared atom pool."""

    subject_labels: np.ndarray  # (J,) in [0, K)
    row_labels: np.ndarray  # (K, I) in [0, L)
    v_pi: np.ndarray  # (K,), last stick 1
    pi: np.ndarray  # (K,)
    v_w: np.ndarray  # (K, L), last column 1
    w: np.ndarray  # (K, L)
    mu: np.ndarray  # (L,)
    sigma2: np.ndarray  # (L,)

    def copy(self) -> "NestedState":
        return NestedState(
            subject_labels=self.subject_labels.copy(),
            row_labels=self.row_labels.copy(),
            v_pi=self.v_pi.copy(),
            pi=self.pi.copy(),
            v_w=self.v_w.copy(),
            w=self.w.copy(),
            mu=self.mu.copy(),
            sigma2=self.sigma2.copy(),
        )

    def cell_atom_labels(self) -> np.ndarray:
        """Atom index of each data cell: (I, J) with entry M[S_j, i]."""
        return self.row_labels[self.subject_labels, :].T


def draw_prior_state(config: NestedModelConfig, I: int, J: int,
                     rng: np.random.Generator) -> NestedState:
    prior = config.atom_prior
    if prior is None:
        raise ValueError("atom prior unset; call config.resolve(data) first")
    v_pi = sample_sticks_batch(np.zeros((1, config.K)), config.beta, rng)[0]
    pi = weights_from_sticks_batch(v_pi[None, :])[0]
    v_w = sample_sticks_batch(np.zeros((config.K, config.L)), config.alpha, rng)
    w = weights_from_sticks_batch(v_w)
    S = draw_categorical_rows(np.log(np.tile(pi, (J, 1)) + 1e-300), rng)
    M = draw_categorical_rows(
        np.log(np.repeat(w, I, axis=0) + 1e-300), rng
    ).reshape(config.K, I)
    sigma2 = draw_inverse_gamma(np.full(config.L, prior.a0), np.full(config.L, prior.b0), rng)
    mu = rng.normal(prior.m0, np.sqrt(sigma2 / prior.kappa0))
    return NestedState(
        subject_labels=S, row_labels=M, v_pi=v_pi, pi=pi, v_w=v_w, w=w,
        mu=mu, sigma2=sigma2,
    )


def _check_dims(state: NestedState, data: np.ndarray, config: NestedModelConfig) -> None:
    I, J = data.shape
    if state.subject_labels.shape != (J,) or state.row_labels.shape != (config.K, I):
        raise ValueError(
            f"state dims (J={state.subject_labels.shape}, M={state.row_labels.shape}) "
            f"inconsistent with data {data.shape} and K={config.K}"
        )
    if state.mu.shape != (config.L,) or state.sigma2.shape != (config.L,):
        raise ValueError("atom vectors inconsistent with truncation L")


def log_joint(state: NestedState, data: np.ndarray, config: NestedModelConfig) -> float:
    """Log of the joint density of data and latent state.

    The stick-breaking priors are evaluated on the stick variables, so this
    is the joint over (y, S, M, V_pi, V_w, mu, sigma2); every complete
    conditional below is a conditional of exactly this function.
    """
    data = np.asarray(data, dtype=float)
    _check_dims(state, data, config)
    prior = config.atom_prior
    lab = state.cell_atom_labels()
    mu_c, s2_c = state.mu[lab], state.sigma2[lab]
    loglik = -0.5 * np.sum(LOG_2PI + np.log(s2_c) + (data - mu_c) ** 2 / s2_c)
    lp = loglik
    lp += np.sum(np.log(state.pi[state.subject_labels]))
    lp += np.sum(np.log(np.take_along_axis(state.w, state.row_labels, axis=1)))
    lp += log_stick_prior(state.v_pi, config.beta)
    lp += log_stick_prior(state.v_w, config.alpha)
    lp += np.sum(_log_invgamma(state.sigma2, prior.a0, prior.b0))
    lp += np.sum(_log_normal(state.mu, prior.m0, state.sigma2 / prior.kappa0))
    return float(lp)


def subject_label_log_probs(state: NestedState, data: np.ndarray,
                            config: NestedModelConfig) -> np.ndarray:
    """Unnormalized log conditional of each column label: (J, K) matrix with
    entry log pi_k + sum_i log N(y_ij; atoms chosen by M[k, i])."""
    data = np.asarray(data, dtype=float)
    _check_dims(state, data, config)
    A = state.mu[state.row_labels]  # (K, I)
    B = state.sigma2[state.row_labels]
    inv = 1.0 / B
    const = np.sum(LOG_2PI + np.log(B), axis=1)  # (K,)
    quad = inv @ (data**2) - 2.0 * (A * inv) @ data + np.sum(A * A * inv, axis=1)[:, None]
    return (np.log(state.pi + 1e-300) - 0.5 * const)[None, :] - 0.5 * quad.T


def update_subject_labels(state: NestedState, data, config: NestedModelConfig,
                          rng: np.random.Generator) -> np.ndarray:
    state.subject_labels = draw_categorical_rows(
        subject_label_log_probs(state, data, config), rng
    )
    return state.subject_labels


def row_label_log_probs(state: NestedState, data: np.ndarray,
                        config: NestedModelConfig) -> np.ndarray:
    """Unnormalized log conditional of every row label: (K, I, L) tensor.

    For an empty column cluster the likelihood product is empty and the
    conditional reduces to the cluster's stick weights.
    """
    data = np.asarray(data, dtype=float)
    _check_dims(state, data, config)
    I = data.shape[0]
    out = np.empty((config.K, I, config.L))
    inv = 1.0 / state.sigma2
    base = np.log(state.w + 1e-300)  # (K, L)
    for k in range(config.K):
        members = state.subject_labels == k
        n_k = int(members.sum())
        if n_k == 0:
            out[k] = base[k][None, :]
            continue
        s1 = data[:, members].sum(axis=1)
        s2 = (data[:, members] ** 2).sum(axis=1)
        quad = s2[:, None] * inv[None, :] - 2.0 * np.outer(s1, state.mu * inv) \
            + n_k * (state.mu**2 * inv)[None, :]
        out[k] = base[k][None, :] - 0.5 * (
            n_k * (LOG_2PI + np.log(state.sigma2))[None, :] + quad
        )
    return out


def update_row_labels(state: NestedState, data, config: NestedModelConfig,
                      rng: np.random.Generator) -> np.ndarray:
    logp = row_label_log_probs(state, data, config)
    I = logp.shape[1]
    state.row_labels = draw_categorical_rows(
        logp.reshape(config.K * I, config.L), rng
    ).reshape(config.K, I)
    return state.row_labels


def update_weights(state: NestedState, config: NestedModelConfig,
                   rng: np.random.Generator) -> None:
    """Resample the column sticks from S counts and every row-weight vector
    from its column cluster's M counts."""
    n_cols = np.bincount(state.subject_labels, minlength=config.K).astype(float)
    state.v_pi, state.pi = update_stick_weights(n_cols, config.beta, rng)
    m_counts = np.stack(
        [np.bincount(state.row_labels[k], minlength=config.L) for k in range(config.K)]
    ).astype(float)
    state.v_w = sample_sticks_batch(m_counts, config.alpha, rng)
    state.w = weights_from_sticks_batch(state.v_w)


def atom_posterior_params(state: NestedState, data: np.ndarray,
                          config: NestedModelConfig):
    """Normal-inverse-gamma posterior parameters per atom from pooled cells.

    Returns (m_n, kappa_n, a_n, b_n) vectors of length L; atoms with no
    pooled observations keep the prior parameters.
    """
    data = np.asarray(data, dtype=float)
    prior = config.atom_prior
    lab = state.cell_atom_labels().ravel()
    y = data.ravel()
    n = np.bincount(lab, minlength=config.L).astype(float)
    s1 = np.bincount(lab, weights=y, minlength=config.L)
    s2 = np.bincount(lab, weights=y * y, minlength=config.L)
    kappa_n = prior.kappa0 + n
    m_n = (prior.kappa0 * prior.m0 + s1) / kappa_n
    a_n = prior.a0 + 0.5 * n
    occupied = n > 0
    ybar = np.where(occupied, s1 / np.maximum(n, 1.0), 0.0)
    ss = np.where(occupied, s2 - n * ybar**2, 0.0)
    shrink = prior.kappa0 * n * (ybar - prior.m0) ** 2 / kappa_n
    b_n = prior.b0 + 0.5 * np.where(occupied, ss + shrink, 0.0)
    return m_n, kappa_n, a_n, b_n


def update_atoms(state: NestedState, data, config: NestedModelConfig,
                 rng: np.random.Generator) -> None:
    """Blocked draw of each (mu, sigma2) pair from its exact conjugate
    posterior; unpooled atoms are refreshed from the base measure."""
    m_n, kappa_n, a_n, b_n = atom_posterior_params(state, data, config)
    state.sigma2 = draw_inverse_gamma(a_n, b_n, rng)
    state.mu = rng.normal(m_n, np.sqrt(state.sigma2 / kappa_n))


def gibbs_sweep(state: NestedState, data, config: NestedModelConfig,
                rng: np.random.Generator, freeze_subjects: bool = False) -> None:
    if not freeze_subjects:
        update_subject_labels(state, data, config, rng)
    update_row_labels(state, data, config, rng)
    update_weights(state, config, rng)
    update_atoms(state, data, config, rng)


def run_chain(data, config: NestedModelConfig, iters: int, burnin: int, thin: int,
              rng: np.random.Generator, seed: int | None = None, stream: int = 0,
              init_state: NestedState | None = None,
              freeze_subjects: np.ndarray | None = None) -> ChainArchive:
    """Run the Gibbs sampler and collect thinned post-burn-in draws.

    freeze_subjects pins the column partition (used to sample row structure
    conditional on a subject point estimate). The chain starts from a prior
    draw unless init_state is given.
    """
    data = np.asarray(data, dtype=float)
    if not (iters > burnin >= 0):
        raise ValueError(f"need iters > burnin >= 0, got iters={iters}, burnin={burnin}")
    if thin < 1:
        raise ValueError(f"thin must be >= 1, got {thin}")
    config = config.resolve(data)
    I, J = data.shape
    state = init_state.copy() if init_state is not None else draw_prior_state(config, I, J, rng)
    if freeze_subjects is not None:
        state.subject_labels = np.asarray(freeze_subjects, dtype=np.int64).copy()
        if state.subject_labels.shape != (J,) or np.any(state.subject_labels >= config.K):
            raise ValueError("frozen subject labels inconsistent with data/truncation")

    kept = []
    lj = []
    start = time.perf_counter()
    for it in range(iters):
        try:
            gibbs_sweep(state, data, config, rng, freeze_subjects=freeze_subjects is not None)
        except (ValueError, FloatingPointError) as exc:
            raise RuntimeError(f"nested sampler failed at iteration {it}: {exc}") from exc
        if it >= burnin and (it - burnin) % thin == 0:
            kept.append(
                (
                    state.subject_labels.copy(),
                    state.row_labels.ravel().copy(),
                    state.pi.copy(),
                    state.w.ravel().copy(),
                    state.mu.copy(),
                    state.sigma2.copy(),
                )
            )
            lj.append(log_joint(state, data, config))
    wall = time.perf_counter() - start

    draws = {
        "subject_labels": np.stack([k[0] for k in kept]).astype(np.int64),
        "row_labels": np.stack([k[1] for k in kept]).astype(np.int64),
        "pi": np.stack([k[2] for k in kept]),
        "w": np.stack([k[3] for k in kept]),
        "mu": np.stack([k[4] for k in kept]),
        "sigma2": np.stack([k[5] for k in kept]),
    }
    manifest = {
        "config": config.to_dict(),
        "seed": seed,
        "stream": stream,
        "iters": iters,
        "burnin": burnin,
        "thin": thin,
        "dims": {"I": I, "J": J, "K": config.K, "L": config.L},
        "frozen_subjects": freeze_subjects is not None,
    }
    return ChainArchive(
        model="nested",
        manifest=manifest,
        draws=draws,
        log_joint=np.asarray(lj),
        wall_time=wall,
    )
