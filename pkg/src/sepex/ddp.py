"""DP mixture of spline regressions (ANOVA DDP) for protein trajectories.

Each protein i carries a cluster label s_i picking one of H atoms, where an
atom is a 12-vector of spline coefficients plus a noise variance:

    y_ij | s_i = h  ~  N(alpha_i + delta_{t_j} + x_j' beta[h], sigma2[h])

with truncated stick-breaking weights pi (mass xi), normal priors on the
coefficient atoms, inverse-gamma on the noise variances, and normal priors
on the time effects delta_t and protein offsets alpha_i. The additive
protein- and time-indexed terms make the prior on the per-(i, t) regression
parameters invariant under separate permutations of proteins and times.

All conditionals are the exact conjugate updates implied by this likelihood:
linear residuals in the normal-normal updates for delta_t and alpha_i, and
mean alpha_i + x_j' beta[h] + delta_{t_j} in the variance update.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .io import ChainArchive
from .rng import draw_categorical_rows, draw_inverse_gamma
from .splines import DESIGN_COLS, NUM_BASIS, StudyDesign
from .sticks import log_stick_prior, update_stick_weights

LOG_2PI = float(np.log(2.0 * np.pi))


def _log_invgamma(x, a: float, b: float):
    return a * np.log(b) - gammaln(a) - (a + 1.0) * np.log(x) - b / x


def _log_normal(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


@dataclass(frozen=True)
class DdpConfig:
    H: int = 25
    xi: float = 1.0
    beta0: np.ndarray = field(default_factory=lambda: np.zeros(DESIGN_COLS))
    sigma_beta0: float = 1.0
    a0: float = 1.0
    b0: float = 1.0
    zeta: float = 0.0
    omega2: float = 0.01
    mu0: float = 3.0
    sigma02: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "beta0", np.asarray(self.beta0, dtype=float))
        if self.H < 1:
            raise ValueError(f"truncation H must be >= 1, got {self.H}")
        if self.beta0.shape != (DESIGN_COLS,):
            raise ValueError(f"beta0 must have length {DESIGN_COLS}")
        for name in ("xi", "sigma_beta0", "a0", "b0", "omega2", "sigma02"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "H": self.H,
            "xi": self.xi,
            "beta0": self.beta0.tolist(),
            "sigma_beta0": self.sigma_beta0,
            "a0": self.a0,
            "b0": self.b0,
            "zeta": self.zeta,
            "omega2": self.omega2,
            "mu0": self.mu0,
            "sigma02": self.sigma02,
        }


@dataclass
class DdpState:
    labels: np.ndarray  # (I,) in [0, H)
    v: np.ndarray  # (H,), last stick 1
    pi: np.ndarray  # (H,)
    beta: np.ndarray  # (H, 12) coefficient atoms
    sigma2: np.ndarray  # (H,) noise variance atoms
    delta: np.ndarray  # (T,) time effects
    alpha: np.ndarray  # (I,) protein offsets

    def copy(self) -> "DdpState":
        return DdpState(
            labels=self.labels.copy(),
            v=self.v.copy(),
            pi=self.pi.copy(),
            beta=self.beta.copy(),
            sigma2=self.sigma2.copy(),
            delta=self.delta.copy(),
            alpha=self.alpha.copy(),
        )


def draw_prior_state(config: DdpConfig, I: int, n_times: int,
                     rng: np.random.Generator) -> DdpState:
    v, pi = update_stick_weights(np.zeros(config.H), config.xi, rng)
    labels = draw_categorical_rows(np.log(np.tile(pi, (I, 1)) + 1e-300), rng)
    beta = config.beta0[None, :] + config.sigma_beta0 * rng.standard_normal(
        (config.H, DESIGN_COLS)
    )
    sigma2 = draw_inverse_gamma(np.full(config.H, config.a0), np.full(config.H, config.b0), rng)
    delta = rng.normal(config.zeta, np.sqrt(config.omega2), size=n_times)
    alpha = rng.normal(config.mu0, np.sqrt(config.sigma02), size=I)
    return DdpState(labels=labels, v=v, pi=pi, beta=beta, sigma2=sigma2,
                    delta=delta, alpha=alpha)


def _fitted_loads(state: DdpState, design: StudyDesign) -> np.ndarray:
    """x_j' beta[h] for every subject and atom: (J, H)."""
    return design.x @ state.beta.T


def log_prior_density(state: DdpState, config: DdpConfig) -> float:
    """Log prior of the latent state (sticks in stick parameterization, labels
    as point masses under pi). Invariant under separate permutations of the
    protein-indexed components (labels, alpha) and time-indexed delta."""
    lp = float(np.sum(np.log(state.pi[state.labels] + 1e-300)))
    lp += log_stick_prior(state.v, config.xi)
    lp += float(np.sum(_log_normal(state.beta, config.beta0[None, :],
                                   config.sigma_beta0**2)))
    lp += float(np.sum(_log_invgamma(state.sigma2, config.a0, config.b0)))
    lp += float(np.sum(_log_normal(state.delta, config.zeta, config.omega2)))
    lp += float(np.sum(_log_normal(state.alpha, config.mu0, config.sigma02)))
    return lp


def log_likelihood(state: DdpState, data: np.ndarray, design: StudyDesign) -> float:
    mean = state.alpha[:, None] + state.delta[design.t_idx][None, :] \
        + _fitted_loads(state, design)[:, state.labels].T
    s2 = state.sigma2[state.labels][:, None]
    return float(-0.5 * np.sum(LOG_2PI + np.log(s2) + (data - mean) ** 2 / s2))


def log_joint(state: DdpState, data: np.ndarray, design: StudyDesign,
              config: DdpConfig) -> float:
    return log_likelihood(state, np.asarray(data, dtype=float), design) \
        + log_prior_density(state, config)


def cluster_label_log_probs(state: DdpState, data: np.ndarray,
                            design: StudyDesign) -> np.ndarray:
    """Unnormalized log conditional of each protein label: (I, H)."""
    data = np.asarray(data, dtype=float)
    J = design.n_subjects
    R = data - state.alpha[:, None] - state.delta[design.t_idx][None, :]  # (I, J)
    loads = _fitted_loads(state, design)  # (J, H)
    sq = (
        (R**2).sum(axis=1)[:, None]
        - 2.0 * R @ loads
        + (loads**2).sum(axis=0)[None, :]
    )
    ll = -0.5 * (J * (LOG_2PI + np.log(state.sigma2))[None, :] + sq / state.sigma2[None, :])
    return np.log(state.pi + 1e-300)[None, :] + ll


def update_cluster_labels(state: DdpState, data, design: StudyDesign,
                          config: DdpConfig, rng: np.random.Generator) -> np.ndarray:
    logp = cluster_label_log_probs(state, data, design)
    try:
        state.labels = draw_categorical_rows(logp, rng)
    except ValueError as exc:
        raise ValueError(f"degenerate label conditional: {exc}") from exc
    return state.labels


def update_sticks(state: DdpState, config: DdpConfig, rng: np.random.Generator) -> None:
    counts = np.bincount(state.labels, minlength=config.H).astype(float)
    state.v, state.pi = update_stick_weights(counts, config.xi, rng)


def beta_posterior_params(state: DdpState, data: np.ndarray, design: StudyDesign,
                          config: DdpConfig, h: int):
    """Gaussian conditional of the coefficient atom for cluster h given the
    current noise variance: returns (mean, precision)."""
    data = np.asarray(data, dtype=float)
    members = np.flatnonzero(state.labels == h)
    prior_prec = np.eye(DESIGN_COLS) / config.sigma_beta0**2
    rhs = prior_prec @ config.beta0
    precision = prior_prec.copy()
    if members.size:
        R = data[members] - state.alpha[members, None] - state.delta[design.t_idx][None, :]
        precision += members.size * (design.x.T @ design.x) / state.sigma2[h]
        rhs = rhs + design.x.T @ R.sum(axis=0) / state.sigma2[h]
    mean = np.linalg.solve(precision, rhs)
    return mean, precision


def update_atoms_regression(state: DdpState, data, design: StudyDesign,
                            config: DdpConfig, rng: np.random.Generator) -> None:
    """Per cluster, draw the coefficient atom from its Gaussian conditional,
    then the noise variance from its inverse-gamma conditional given the new
    coefficients. Empty clusters refresh from the prior."""
    data = np.asarray(data, dtype=float)
    J = design.n_subjects
    for h in range(config.H):
        members = np.flatnonzero(state.labels == h)
        if members.size == 0:
            state.beta[h] = config.beta0 + config.sigma_beta0 * rng.standard_normal(DESIGN_COLS)
            state.sigma2[h] = draw_inverse_gamma(config.a0, config.b0, rng)
            continue
        mean, precision = beta_posterior_params(state, data, design, config, h)
        chol = np.linalg.cholesky(precision)
        state.beta[h] = mean + np.linalg.solve(chol.T, rng.standard_normal(DESIGN_COLS))
        resid = (
            data[members]
            - state.alpha[members, None]
            - state.delta[design.t_idx][None, :]
            - (design.x @ state.beta[h])[None, :]
        )
        a_n = config.a0 + 0.5 * members.size * J
        b_n = config.b0 + 0.5 * float(np.sum(resid**2))
        state.sigma2[h] = draw_inverse_gamma(a_n, b_n, rng)


def delta_posterior_params(state: DdpState, data: np.ndarray, design: StudyDesign,
                           config: DdpConfig):
    """Normal conditional of every time effect: returns (mean, variance) (T,)."""
    data = np.asarray(data, dtype=float)
    inv_s2 = 1.0 / state.sigma2[state.labels]  # (I,)
    resid = data - state.alpha[:, None] - _fitted_loads(state, design)[:, state.labels].T
    col_num = inv_s2 @ resid  # (J,) weighted residual sums
    per_time_num = np.bincount(design.t_idx, weights=col_num, minlength=design.n_times)
    m_t = np.bincount(design.t_idx, minlength=design.n_times)
    precision = 1.0 / config.omega2 + m_t * inv_s2.sum()
    mean = (config.zeta / config.omega2 + per_time_num) / precision
    return mean, 1.0 / precision


def update_time_effects(state: DdpState, data, design: StudyDesign,
                        config: DdpConfig, rng: np.random.Generator) -> np.ndarray:
    mean, var = delta_posterior_params(state, data, design, config)
    state.delta = rng.normal(mean, np.sqrt(var))
    return state.delta


def alpha_posterior_params(state: DdpState, data: np.ndarray, design: StudyDesign,
                           config: DdpConfig):
    """Normal conditional of every protein offset: returns (mean, variance) (I,)."""
    data = np.asarray(data, dtype=float)
    J = design.n_subjects
    inv_s2 = 1.0 / state.sigma2[state.labels]
    resid = data - state.delta[design.t_idx][None, :] \
        - _fitted_loads(state, design)[:, state.labels].T
    precision = 1.0 / config.sigma02 + J * inv_s2
    mean = (config.mu0 / config.sigma02 + resid.sum(axis=1) * inv_s2) / precision
    return mean, 1.0 / precision


def update_protein_offsets(state: DdpState, data, design: StudyDesign,
                           config: DdpConfig, rng: np.random.Generator) -> np.ndarray:
    mean, var = alpha_posterior_params(state, data, design, config)
    state.alpha = rng.normal(mean, np.sqrt(var))
    return state.alpha


def gamma_from_atoms(beta: np.ndarray, labels: np.ndarray, design: StudyDesign) -> np.ndarray:
    """Per-protein slope difference from the patient-offset coefficient block."""
    contrast = design.slope_contrast()  # length 6, acts on columns 7-12
    return (beta[:, NUM_BASIS:] @ contrast)[labels]


def gamma_i(state: DdpState, design: StudyDesign) -> np.ndarray:
    return gamma_from_atoms(state.beta, state.labels, design)


def gibbs_sweep(state: DdpState, data, design: StudyDesign, config: DdpConfig,
                rng: np.random.Generator, freeze_labels: bool = False) -> None:
    if not freeze_labels:
        update_cluster_labels(state, data, design, config, rng)
    update_sticks(state, config, rng)
    update_atoms_regression(state, data, design, config, rng)
    update_time_effects(state, data, design, config, rng)
    update_protein_offsets(state, data, design, config, rng)


def run_chain(data, design: StudyDesign, config: DdpConfig, iters: int, burnin: int,
              thin: int, rng: np.random.Generator, seed: int | None = None,
              stream: int = 0, init_state: DdpState | None = None,
              freeze_labels: np.ndarray | None = None) -> ChainArchive:
    """Run the sampler; archives labels, weights, atoms, time effects, offsets,
    the log joint trace, and slope differences when the design has the patient
    corner subjects."""
    data = np.asarray(data, dtype=float)
    if not (iters > burnin >= 0):
        raise ValueError(f"need iters > burnin >= 0, got iters={iters}, burnin={burnin}")
    if thin < 1:
        raise ValueError(f"thin must be >= 1, got {thin}")
    I, J = data.shape
    if J != design.n_subjects:
        raise ValueError(f"data has {J} columns but design has {design.n_subjects} subjects")
    state = init_state.copy() if init_state is not None else draw_prior_state(
        config, I, design.n_times, rng
    )
    if freeze_labels is not None:
        state.labels = np.asarray(freeze_labels, dtype=np.int64).copy()
        if state.labels.shape != (I,) or np.any(state.labels >= config.H):
            raise ValueError("frozen labels inconsistent with data/truncation")
    has_contrast = (1, "first") in design.corners and (1, "last") in design.corners

    kept, lj = [], []
    start = time.perf_counter()
    for it in range(iters):
        try:
            gibbs_sweep(state, data, design, config, rng,
                        freeze_labels=freeze_labels is not None)
        except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise RuntimeError(f"ddp sampler failed at iteration {it}: {exc}") from exc
        if it >= burnin and (it - burnin) % thin == 0:
            row = (
                state.labels.copy(),
                state.pi.copy(),
                state.beta.ravel().copy(),
                state.sigma2.copy(),
                state.delta.copy(),
                state.alpha.copy(),
                gamma_i(state, design) if has_contrast else None,
            )
            kept.append(row)
            lj.append(log_joint(state, data, design, config))
    wall = time.perf_counter() - start

    draws = {
        "labels": np.stack([k[0] for k in kept]).astype(np.int64),
        "pi": np.stack([k[1] for k in kept]),
        "beta": np.stack([k[2] for k in kept]),
        "sigma2": np.stack([k[3] for k in kept]),
        "delta": np.stack([k[4] for k in kept]),
        "alpha": np.stack([k[5] for k in kept]),
    }
    if has_contrast:
        draws["gamma"] = np.stack([k[6] for k in kept])
    manifest = {
        "config": config.to_dict(),
        "seed": seed,
        "stream": stream,
        "iters": iters,
        "burnin": burnin,
        "thin": thin,
        "dims": {"I": I, "J": J, "H": config.H, "T": design.n_times, "P": DESIGN_COLS},
        "design": {
            "ages": design.ages.tolist(),
            "conditions": design.z.tolist(),
            "basis": design.basis.to_dict(),
        },
        "frozen_labels": freeze_labels is not None,
        "has_gamma": has_contrast,
    }
    return ChainArchive(
        model="ddp",
        manifest=manifest,
        draws=draws,
        log_joint=np.asarray(lj),
        wall_time=wall,
    )
