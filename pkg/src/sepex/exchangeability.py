"""Monte Carlo checks of the correlation and co-clustering inequalities that
separate the exchangeability regimes.

Partial exchangeability forces within-column correlation to dominate
cross-cell correlation; separate exchangeability additionally allows same-row
correlation across columns to dominate; and only a genuinely separately
exchangeable nested partition lets co-clustering of two specific rows in one
column raise the odds of the same two rows co-clustering in another column.
Every report carries batch-mean standard errors and applies a 3-SE rule,
never a raw comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ddp import DdpConfig
from .nested import NestedModelConfig
from .splines import SplineBasis, eval_basis_matrix
from .sticks import sample_sticks_batch, weights_from_sticks_batch

ArraySampler = "Callable[[int, np.random.Generator], np.ndarray]"


@dataclass
class CorrelationReport:
    name: str
    corr_a: float
    se_a: float
    corr_b: float
    se_b: float
    diff: float
    se_diff: float
    n_draws: int
    n_batches: int
    rule: str
    passed: bool
    labels: tuple[str, str] = ("", "")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            self.labels[0] or "corr_a": self.corr_a,
            "se_a": self.se_a,
            self.labels[1] or "corr_b": self.corr_b,
            "se_b": self.se_b,
            "diff": self.diff,
            "se_diff": self.se_diff,
            "n_draws": self.n_draws,
            "rule": self.rule,
            "passed": bool(self.passed),
        }


@dataclass
class CoclusteringReport:
    p_same_pair: float
    se_same_pair: float
    p_other_pair: float
    se_other_pair: float
    diff: float
    se_diff: float
    n_draws: int
    n_batches: int
    rule: str
    passed: bool
    conditioned_on_shared_subjects: bool = False

    def to_dict(self) -> dict:
        return {
            "p_same_pair": self.p_same_pair,
            "se_same_pair": self.se_same_pair,
            "p_other_pair": self.p_other_pair,
            "se_other_pair": self.se_other_pair,
            "diff": self.diff,
            "se_diff": self.se_diff,
            "n_draws": self.n_draws,
            "rule": self.rule,
            "passed": bool(self.passed),
            "conditioned_on_shared_subjects": self.conditioned_on_shared_subjects,
        }


def _batch_corr_check(sampler, n_draws: int, rng: np.random.Generator,
                      cell_a: tuple, cell_b: tuple, cell_ref=(0, 0),
                      n_batches: int = 25, rule: str = "geq", name: str = "",
                      labels=("", "")) -> CorrelationReport:
    per_batch = max(n_draws // n_batches, 2)
    ca, cb, cd = [], [], []
    for _ in range(n_batches):
        x = sampler(per_batch, rng)
        ref = x[:, cell_ref[0], cell_ref[1]]
        a = np.corrcoef(ref, x[:, cell_a[0], cell_a[1]])[0, 1]
        b = np.corrcoef(ref, x[:, cell_b[0], cell_b[1]])[0, 1]
        ca.append(a)
        cb.append(b)
        cd.append(a - b)
    ca, cb, cd = map(np.asarray, (ca, cb, cd))
    se = lambda v: float(v.std(ddof=1) / np.sqrt(n_batches))  # noqa: E731
    diff, se_diff = float(cd.mean()), se(cd)
    if rule == "geq":
        passed = diff >= -3.0 * se_diff
    elif rule == "equal":
        passed = abs(diff) <= 3.0 * se_diff
    else:
        raise ValueError(f"rule must be 'geq' or 'equal', got {rule!r}")
    return CorrelationReport(
        name=name,
        corr_a=float(ca.mean()), se_a=se(ca),
        corr_b=float(cb.mean()), se_b=se(cb),
        diff=diff, se_diff=se_diff,
        n_draws=per_batch * n_batches, n_batches=n_batches,
        rule=rule, passed=passed, labels=labels,
    )


def check_partial_corr(sampler, n_draws: int, rng: np.random.Generator,
                       n_batches: int = 25, rule: str = "geq",
                       name: str = "partial") -> CorrelationReport:
    """Within-column correlation of two rows vs the all-different-cell
    correlation. Partially (and separately) exchangeable priors must give
    within >= cross, up to 3 Monte Carlo standard errors."""
    return _batch_corr_check(
        sampler, n_draws, rng, cell_a=(1, 0), cell_b=(1, 1),
        n_batches=n_batches, rule=rule, name=name,
        labels=("corr_within_column", "corr_cross"),
    )


def check_separate_corr(sampler, n_draws: int, rng: np.random.Generator,
                        n_batches: int = 25, rule: str = "geq",
                        name: str = "separate") -> CorrelationReport:
    """Same-row cross-column correlation vs the all-different-cell
    correlation; separate exchangeability preserves row identity, so
    same-row >= all-different."""
    return _batch_corr_check(
        sampler, n_draws, rng, cell_a=(0, 1), cell_b=(1, 1),
        n_batches=n_batches, rule=rule, name=name,
        labels=("corr_same_row", "corr_cross"),
    )


def check_coclustering_borrowing(partition_sampler, n_draws: int,
                                 rng: np.random.Generator, rule: str = "greater",
                                 condition_on_shared_subjects: bool = False,
                                 n_batches: int = 25) -> CoclusteringReport:
    """Does co-clustering of rows (1, 2) in one column raise the probability
    that the same pair co-clusters in another column, beyond what it does for
    the pair (1, 3)?

    The sampler must return (subject_labels (n, J), column_row_labels
    (n, J, I)) with I >= 3, J >= 2. rule="greater" passes when the first
    conditional probability exceeds the second by 3 SE (nested model);
    rule="equal" passes when they agree within 3 SE (partially exchangeable
    control).
    """
    per_batch = max(n_draws // n_batches, 2)
    p1s, p2s, pds = [], [], []
    for _ in range(n_batches):
        S, colM = partition_sampler(per_batch, rng)
        if colM.shape[2] < 3 or colM.shape[1] < 2:
            raise ValueError("need at least 3 rows and 2 columns")
        cond = colM[:, 0, 0] == colM[:, 0, 1]  # rows 1, 2 co-cluster in column j
        if condition_on_shared_subjects:
            cond &= S[:, 0] == S[:, 1]
        n_cond = int(cond.sum())
        if n_cond == 0:
            raise ValueError(
                "conditioning event never occurred in a batch; increase n_draws"
            )
        same = colM[cond, 1, 0] == colM[cond, 1, 1]  # same pair in column j'
        other = colM[cond, 1, 0] == colM[cond, 1, 2]  # pair (1, 3) in column j'
        p1s.append(same.mean())
        p2s.append(other.mean())
        pds.append(same.mean() - other.mean())
    p1s, p2s, pds = map(np.asarray, (p1s, p2s, pds))
    se = lambda v: float(v.std(ddof=1) / np.sqrt(n_batches))  # noqa: E731
    diff, se_diff = float(pds.mean()), se(pds)
    if rule == "greater":
        passed = diff > 3.0 * se_diff
    elif rule == "equal":
        passed = abs(diff) <= 3.0 * se_diff
    else:
        raise ValueError(f"rule must be 'greater' or 'equal', got {rule!r}")
    return CoclusteringReport(
        p_same_pair=float(p1s.mean()), se_same_pair=se(p1s),
        p_other_pair=float(p2s.mean()), se_other_pair=se(p2s),
        diff=diff, se_diff=se_diff,
        n_draws=per_batch * n_batches, n_batches=n_batches,
        rule=rule, passed=passed,
        conditioned_on_shared_subjects=condition_on_shared_subjects,
    )


# ---------------------------------------------------------------------------
# Reference samplers (analytic controls)


def iid_normal_sampler(I: int, J: int):
    def sample(n, rng):
        return rng.standard_normal((n, I, J))

    return sample


def column_effect_sampler(I: int, J: int, var_col: float = 1.0, var_noise: float = 1.0):
    """x_ij = m_j + noise: within-column correlation var_col / (var_col +
    var_noise), zero across columns."""

    def sample(n, rng):
        m = np.sqrt(var_col) * rng.standard_normal((n, 1, J))
        return m + np.sqrt(var_noise) * rng.standard_normal((n, I, J))

    return sample


def additive_sampler(I: int, J: int):
    """x_ij = xi_i + eta_j + noise with unit variances: same-row correlation
    1/3, same-column 1/3, all-different 0."""

    def sample(n, rng):
        xi = rng.standard_normal((n, I, 1))
        eta = rng.standard_normal((n, 1, J))
        return xi + eta + rng.standard_normal((n, I, J))

    return sample


# ---------------------------------------------------------------------------
# Model prior samplers (batched)


def _nested_prior_partitions(config: NestedModelConfig, I: int, J: int, n: int,
                             rng: np.random.Generator):
    """Batched draws of (subject labels, per-cluster row labels) from the
    nested prior. Returns (S (n, J), M (n, K, I))."""
    K, L = config.K, config.L
    v_pi = sample_sticks_batch(np.zeros((n, K)), config.beta, rng)
    pi = weights_from_sticks_batch(v_pi)
    cum_pi = np.cumsum(pi, axis=1)
    u = rng.random((n, J)) * cum_pi[:, -1][:, None]
    S = (cum_pi[:, None, :] < u[:, :, None]).sum(axis=2)
    v_w = sample_sticks_batch(np.zeros((n * K, L)), config.alpha, rng)
    w = weights_from_sticks_batch(v_w).reshape(n, K, L)
    cum_w = np.cumsum(w, axis=2)
    u = rng.random((n, K, I)) * cum_w[:, :, -1][:, :, None]
    M = (cum_w[:, :, None, :] < u[:, :, :, None]).sum(axis=3)
    return S.astype(np.int64), M.astype(np.int64), w, cum_w


def nested_partition_sampler(config: NestedModelConfig, I: int = 3, J: int = 2):
    """(S, per-column row labels) under the nested prior: columns in the same
    subject cluster share the row partition exactly."""

    def sample(n, rng):
        S, M, _, _ = _nested_prior_partitions(config, I, J, n, rng)
        colM = np.take_along_axis(M, S[:, :, None], axis=1)  # (n, J, I)
        return S, colM

    return sample


def control_partition_sampler(config: NestedModelConfig, I: int = 3, J: int = 2):
    """Partially exchangeable control: same subject clustering and weights,
    but each column draws its own row labels independently given the
    weights, so realized row partitions are not shared."""

    def sample(n, rng):
        S, _, w, cum_w = _nested_prior_partitions(config, I, J, n, rng)
        cw = cum_w[np.arange(n)[:, None], S, :]  # (n, J, L)
        u = rng.random((n, J, I)) * cw[:, :, -1][:, :, None]
        colM = (cw[:, :, None, :] < u[:, :, :, None]).sum(axis=3)
        return S, colM.astype(np.int64)

    return sample


def nested_data_sampler(config: NestedModelConfig, I: int = 2, J: int = 2):
    """Data arrays from the nested prior predictive (atoms included)."""
    prior = config.atom_prior
    if prior is None:
        raise ValueError("nested_data_sampler needs a config with a resolved atom prior")

    def sample(n, rng):
        S, M, _, _ = _nested_prior_partitions(config, I, J, n, rng)
        colM = np.take_along_axis(M, S[:, :, None], axis=1)  # (n, J, I)
        sigma2 = prior.b0 / rng.gamma(prior.a0, size=(n, config.L))
        mu = rng.normal(prior.m0, np.sqrt(sigma2 / prior.kappa0))
        flat = colM.reshape(n, -1)
        mu_cells = np.take_along_axis(mu, flat, axis=1).reshape(n, J, I)
        sd_cells = np.sqrt(np.take_along_axis(sigma2, flat, axis=1)).reshape(n, J, I)
        y = rng.normal(mu_cells, sd_cells)
        return np.swapaxes(y, 1, 2)  # (n, I, J)

    return sample


def ddp_theta_sampler(config: DdpConfig, I: int = 2, n_times: int = 2,
                      basis: SplineBasis | None = None):
    """Prior mean surfaces m_it = alpha_i + delta_t + x_t' beta[s_i] under the
    regression prior, as (n, I, n_times) arrays."""
    if basis is None:
        basis = SplineBasis((1.0 / 3.0, 2.0 / 3.0), (0.0, 1.0))
    times = np.linspace(basis.boundary[0], basis.boundary[1], n_times)
    B = eval_basis_matrix(basis, times)  # (T, 6), control rows: offset block zero
    xs = np.hstack([B, np.zeros_like(B)])

    def sample(n, rng):
        v = sample_sticks_batch(np.zeros((n, config.H)), config.xi, rng)
        pi = weights_from_sticks_batch(v)
        cum = np.cumsum(pi, axis=1)
        u = rng.random((n, I)) * cum[:, -1][:, None]
        s = (cum[:, None, :] < u[:, :, None]).sum(axis=2)
        beta = config.beta0[None, None, :] + config.sigma_beta0 * rng.standard_normal(
            (n, config.H, xs.shape[1])
        )
        loads = beta @ xs.T  # (n, H, T)
        picked = np.take_along_axis(loads, s[:, :, None], axis=1)  # (n, I, T)
        alpha = rng.normal(config.mu0, np.sqrt(config.sigma02), size=(n, I, 1))
        delta = rng.normal(config.zeta, np.sqrt(config.omega2), size=(n, 1, n_times))
        return alpha + delta + picked

    return sample


# ---------------------------------------------------------------------------
# Standard suite over the implemented priors


@dataclass
class ExchangeabilitySuite:
    reports: dict = field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.reports.values())

    def to_dict(self) -> dict:
        return {
            "all_passed": self.all_passed,
            "reports": {k: r.to_dict() for k, r in self.reports.items()},
        }


def run_standard_suite(n_draws: int, rng: np.random.Generator,
                       nested_config: NestedModelConfig | None = None,
                       ddp_config: DdpConfig | None = None) -> ExchangeabilitySuite:
    """The full verification battery on the implemented priors plus the
    partially exchangeable control."""
    from .rng import NormalInvGammaParams

    if nested_config is None:
        nested_config = NestedModelConfig(
            atom_prior=NormalInvGammaParams(m0=0.0, kappa0=0.1, a0=2.0, b0=1.0)
        )
    if ddp_config is None:
        ddp_config = DdpConfig()
    suite = ExchangeabilitySuite()
    suite.reports["partial_corr_nested_prior"] = check_partial_corr(
        nested_data_sampler(nested_config), n_draws, rng, name="nested prior data"
    )
    suite.reports["separate_corr_ddp_prior"] = check_separate_corr(
        ddp_theta_sampler(ddp_config), n_draws, rng, name="ddp prior mean surface"
    )
    suite.reports["cocluster_nested"] = check_coclustering_borrowing(
        nested_partition_sampler(nested_config), n_draws, rng, rule="greater"
    )
    suite.reports["cocluster_control_equal"] = check_coclustering_borrowing(
        control_partition_sampler(nested_config), n_draws, rng, rule="equal"
    )
    return suite
