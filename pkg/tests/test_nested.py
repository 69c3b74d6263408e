import numpy as np
import pytest
from scipy import stats

from _grid import discrete_joint_scan, log_integrate, quantile_grid, tv_continuous, \
    tv_discrete
from sepex.nested import (
    NestedModelConfig,
    atom_posterior_params,
    draw_prior_state,
    gibbs_sweep,
    log_joint,
    row_label_log_probs,
    run_chain,
    subject_label_log_probs,
    update_atoms,
    update_row_labels,
    update_subject_labels,
)
from sepex.partitions import induced_row_partitions
from sepex.rng import NormalInvGammaParams, make_rng
from sepex.simulate import simulate_nested
from sepex.sticks import weights_from_sticks
from sepex.summaries import map_cluster_count

PRIOR = NormalInvGammaParams(m0=0.5, kappa0=2.0, a0=3.0, b0=2.0)


def toy(I=2, J=2, K=2, L=2, seed=0, alpha=1.3, beta=0.8):
    cfg = NestedModelConfig(K=K, L=L, alpha=alpha, beta=beta, atom_prior=PRIOR)
    rng = make_rng(seed)
    data = rng.normal(size=(I, J))
    state = draw_prior_state(cfg, I, J, rng)
    return state, data, cfg


# ---------------------------------------------------------------------------
# log joint


def test_log_joint_degenerate_truncation_reduces_to_single_atom():
    cfg = NestedModelConfig(K=1, L=1, atom_prior=PRIOR)
    rng = make_rng(1)
    state = draw_prior_state(cfg, 1, 1, rng)
    y = np.array([[0.7]])
    expected = (
        stats.norm.logpdf(0.7, state.mu[0], np.sqrt(state.sigma2[0]))
        + stats.invgamma.logpdf(state.sigma2[0], PRIOR.a0, scale=PRIOR.b0)
        + stats.norm.logpdf(state.mu[0], PRIOR.m0, np.sqrt(state.sigma2[0] / PRIOR.kappa0))
    )
    assert log_joint(state, y, cfg) == pytest.approx(expected, abs=1e-12)


def test_log_joint_invariant_under_column_permutation_with_labels():
    state, data, cfg = toy(I=4, J=5, K=3, L=3, seed=2)
    base = log_joint(state, data, cfg)
    perm = np.array([3, 0, 4, 2, 1])
    permuted = state.copy()
    permuted.subject_labels = state.subject_labels[perm]
    assert log_joint(permuted, data[:, perm], cfg) == pytest.approx(base, abs=1e-10)


def test_log_joint_invariant_under_row_permutation_with_labels():
    state, data, cfg = toy(I=5, J=3, K=2, L=3, seed=3)
    base = log_joint(state, data, cfg)
    perm = np.array([2, 0, 1, 4, 3])
    permuted = state.copy()
    permuted.row_labels = state.row_labels[:, perm]
    assert log_joint(permuted, data[perm, :], cfg) == pytest.approx(base, abs=1e-10)


def test_log_joint_matches_term_by_term_oracle():
    # independent summation of every factor of the joint, written against
    # scipy densities rather than the library's vectorized forms
    state, data, cfg = toy(I=3, J=2, K=2, L=3, seed=4)
    total = 0.0
    for i in range(3):
        for j in range(2):
            lab = state.row_labels[state.subject_labels[j], i]
            total += stats.norm.logpdf(
                data[i, j], state.mu[lab], np.sqrt(state.sigma2[lab])
            )
    for j in range(2):
        total += np.log(state.pi[state.subject_labels[j]])
    for k in range(cfg.K):
        for i in range(3):
            total += np.log(state.w[k, state.row_labels[k, i]])
    for h in range(cfg.K - 1):
        total += stats.beta.logpdf(state.v_pi[h], 1.0, cfg.beta)
    for k in range(cfg.K):
        for col in range(cfg.L - 1):
            total += stats.beta.logpdf(state.v_w[k, col], 1.0, cfg.alpha)
    for ell in range(cfg.L):
        total += stats.invgamma.logpdf(state.sigma2[ell], PRIOR.a0, scale=PRIOR.b0)
        total += stats.norm.logpdf(
            state.mu[ell], PRIOR.m0, np.sqrt(state.sigma2[ell] / PRIOR.kappa0)
        )
    assert log_joint(state, data, cfg) == pytest.approx(total, abs=1e-10)


def test_log_joint_rejects_mismatched_dims():
    state, data, cfg = toy()
    with pytest.raises(ValueError):
        log_joint(state, np.zeros((3, 5)), cfg)


# ---------------------------------------------------------------------------
# conditional oracles: every update matches grid normalization of the joint


def test_subject_label_conditional_matches_joint():
    state, data, cfg = toy(I=2, J=2, K=2, L=2, seed=5)
    impl = subject_label_log_probs(state, data, cfg)
    for j in range(2):
        def joint_at(k, j=j):
            probe = state.copy()
            probe.subject_labels[j] = k
            return log_joint(probe, data, cfg)

        scan = discrete_joint_scan(joint_at, cfg.K)
        assert tv_discrete(impl[j], scan) < 1e-8


def test_row_label_conditional_matches_joint_single_observation():
    state, data, cfg = toy(I=1, J=1, K=2, L=3, seed=6)
    impl = row_label_log_probs(state, data, cfg)
    for k in range(cfg.K):
        def joint_at(ell, k=k):
            probe = state.copy()
            probe.row_labels[k, 0] = ell
            return log_joint(probe, data, cfg)

        scan = discrete_joint_scan(joint_at, cfg.L)
        assert tv_discrete(impl[k, 0], scan) < 1e-8


def test_row_label_conditional_empty_cluster_equals_weights():
    state, data, cfg = toy(I=3, J=2, K=3, L=4, seed=7)
    state.subject_labels = np.array([0, 0])  # clusters 1, 2 empty
    impl = row_label_log_probs(state, data, cfg)
    for k in (1, 2):
        p = np.exp(impl[k] - impl[k].max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        assert np.allclose(p, state.w[k] / state.w[k].sum(), atol=1e-12)


def test_stick_conditionals_match_joint():
    state, data, cfg = toy(I=3, J=4, K=3, L=3, seed=8)
    # column sticks: V_pi[h] | counts ~ Beta(1 + n_h, beta + tail counts)
    counts = np.bincount(state.subject_labels, minlength=cfg.K).astype(float)
    for h in range(cfg.K - 1):
        a = 1.0 + counts[h]
        b = cfg.beta + counts[h + 1:].sum()
        dist = stats.beta(a, b)
        grid = quantile_grid(dist, n=1200, tail=1e-9)
        impl = dist.logpdf(grid)
        scan = []
        for v in grid:
            probe = state.copy()
            probe.v_pi[h] = v
            probe.pi = weights_from_sticks(probe.v_pi)
            scan.append(log_joint(probe, data, cfg))
        assert tv_continuous(grid, impl, scan) < 1e-6
    # row sticks for one cluster
    k = int(state.subject_labels[0])
    m_counts = np.bincount(state.row_labels[k], minlength=cfg.L).astype(float)
    h = 0
    dist = stats.beta(1.0 + m_counts[h], cfg.alpha + m_counts[h + 1:].sum())
    grid = quantile_grid(dist, n=1200, tail=1e-9)
    impl = dist.logpdf(grid)
    scan = []
    for v in grid:
        probe = state.copy()
        probe.v_w[k, h] = v
        probe.w[k] = weights_from_sticks(probe.v_w[k])
        scan.append(log_joint(probe, data, cfg))
    assert tv_continuous(grid, impl, scan) < 1e-6


def test_atom_mean_conditional_given_variance_matches_joint():
    state, data, cfg = toy(I=3, J=3, K=2, L=2, seed=9)
    m_n, kappa_n, _, _ = atom_posterior_params(state, data, cfg)
    for ell in range(cfg.L):
        dist = stats.norm(m_n[ell], np.sqrt(state.sigma2[ell] / kappa_n[ell]))
        grid = quantile_grid(dist, n=1200, tail=1e-10)
        impl = dist.logpdf(grid)
        scan = []
        for v in grid:
            probe = state.copy()
            probe.mu[ell] = v
            scan.append(log_joint(probe, data, cfg))
        assert tv_continuous(grid, impl, scan) < 1e-6


def test_atom_mean_marginal_conditional_matches_integrated_joint():
    # the blocked draw implies mu | rest (variance integrated out) is a scaled
    # Student t; the oracle integrates exp(log_joint) over sigma2 numerically
    # on a five-point dataset
    state, data, cfg = toy(I=5, J=1, K=1, L=1, seed=10)
    state.subject_labels[:] = 0
    state.row_labels[:] = 0  # all five observations pooled on atom 0
    m_n, kappa_n, a_n, b_n = atom_posterior_params(state, data, cfg)
    scale = np.sqrt(b_n[0] / (a_n[0] * kappa_n[0]))
    tdist = stats.t(df=2.0 * a_n[0], loc=m_n[0], scale=scale)
    mu_grid = quantile_grid(tdist, n=200, tail=1e-9)
    # sigma2 grid wide enough for the rate at the extreme mu values
    rate_hi = b_n[0] + 0.5 * (
        PRIOR.kappa0 * (mu_grid[-1] - PRIOR.m0) ** 2
        + np.sum((data.ravel() - mu_grid[0]) ** 2)
    )
    s2_lo = stats.invgamma(a_n[0] + 0.5).ppf(1e-12) * b_n[0] / 50.0
    s2_hi = stats.invgamma(a_n[0] + 0.5, scale=rate_hi).ppf(1.0 - 1e-12) * 50.0
    s2_grid = np.geomspace(s2_lo, s2_hi, 400)
    impl = tdist.logpdf(mu_grid)
    scan = []
    for v in mu_grid:
        probe = state.copy()
        probe.mu[0] = v
        inner = []
        for s2 in s2_grid:
            probe.sigma2[0] = s2
            inner.append(log_joint(probe, data, cfg))
        scan.append(log_integrate(np.asarray(inner), s2_grid))
    assert tv_continuous(mu_grid, impl, scan) < 1e-6


def test_atom_variance_marginal_conditional_matches_integrated_joint():
    # sigma2 | rest (mean integrated out) is the inverse-gamma the blocked
    # draw samples from
    state, data, cfg = toy(I=4, J=2, K=2, L=2, seed=11)
    m_n, kappa_n, a_n, b_n = atom_posterior_params(state, data, cfg)
    ell = 0
    dist = stats.invgamma(a_n[ell], scale=b_n[ell])
    grid = quantile_grid(dist, n=200, tail=1e-10)
    impl = dist.logpdf(grid)
    scan = []
    probe = state.copy()
    for s2 in grid:
        probe.sigma2[ell] = s2
        # inner Gaussian integral over mu, grid adapted to this variance
        hw = 12.0 * np.sqrt(s2 / kappa_n[ell])
        mu_grid = np.linspace(m_n[ell] - hw, m_n[ell] + hw, 300)
        inner = []
        for v in mu_grid:
            probe.mu[ell] = v
            inner.append(log_joint(probe, data, cfg))
        scan.append(log_integrate(np.asarray(inner), mu_grid))
    assert tv_continuous(grid, impl, scan) < 1e-6


# ---------------------------------------------------------------------------
# update behavior


def test_subject_labels_degenerate_truncation():
    state, data, cfg = toy(I=3, J=4, K=1, L=2, seed=12)
    update_subject_labels(state, data, cfg, make_rng(0))
    assert np.all(state.subject_labels == 0)


def test_row_labels_degenerate_truncation():
    state, data, cfg = toy(I=3, J=2, K=2, L=1, seed=13)
    update_row_labels(state, data, cfg, make_rng(0))
    assert np.all(state.row_labels == 0)


def test_subject_conditional_equals_prior_when_likelihood_cancels():
    # identical atoms and identical row labels across clusters: the
    # likelihood is constant in k and the conditional reduces to pi
    state, data, cfg = toy(I=4, J=3, K=3, L=2, seed=14)
    state.mu[:] = 0.3
    state.sigma2[:] = 1.7
    state.row_labels[:] = state.row_labels[0][None, :]
    impl = subject_label_log_probs(state, data, cfg)
    p = np.exp(impl - impl.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    assert np.allclose(p, state.pi / state.pi.sum(), atol=1e-12)


def test_atom_update_single_datum_posterior_location():
    state, data, cfg = toy(I=1, J=1, K=1, L=1, seed=15)
    y = float(data[0, 0])
    m_n, kappa_n, a_n, b_n = atom_posterior_params(state, data, cfg)
    assert m_n[0] == pytest.approx((PRIOR.kappa0 * PRIOR.m0 + y) / (PRIOR.kappa0 + 1.0))
    assert kappa_n[0] == PRIOR.kappa0 + 1.0
    assert a_n[0] == PRIOR.a0 + 0.5


def test_atom_update_unpooled_falls_back_to_base_measure():
    state, data, cfg = toy(I=2, J=2, K=2, L=3, seed=16)
    state.row_labels[:] = 0  # atoms 1, 2 unpooled
    m_n, kappa_n, a_n, b_n = atom_posterior_params(state, data, cfg)
    for ell in (1, 2):
        assert m_n[ell] == PRIOR.m0
        assert kappa_n[ell] == PRIOR.kappa0
        assert a_n[ell] == PRIOR.a0
        assert b_n[ell] == PRIOR.b0
    # and the draws hit the prior moments statistically
    rng = make_rng(17)
    mus = []
    for _ in range(4000):
        probe = state.copy()
        update_atoms(probe, data, cfg, rng)
        mus.append(probe.mu[1])
    assert abs(np.mean(mus) - PRIOR.m0) < 0.05


def test_nested_partition_sharing_preserved_by_sweeps():
    state, data, cfg = toy(I=6, J=5, K=3, L=3, seed=18)
    rng = make_rng(19)
    for _ in range(25):
        gibbs_sweep(state, data, cfg, rng)
        per_col = induced_row_partitions(state.subject_labels, state.row_labels)
        for j in range(5):
            for jp in range(5):
                if state.subject_labels[j] == state.subject_labels[jp]:
                    assert np.array_equal(per_col[j], per_col[jp])


# ---------------------------------------------------------------------------
# chains


def test_run_chain_deterministic_with_seed():
    _, data, cfg = toy(I=5, J=4, K=3, L=3, seed=20)
    a = run_chain(data, cfg, iters=60, burnin=20, thin=2, rng=make_rng(99, 1), seed=99)
    b = run_chain(data, cfg, iters=60, burnin=20, thin=2, rng=make_rng(99, 1), seed=99)
    for name in a.draws:
        assert np.array_equal(a.draws[name], b.draws[name])
    assert np.array_equal(a.log_joint, b.log_joint)


def test_run_chain_validates_iteration_plan():
    _, data, cfg = toy()
    with pytest.raises(ValueError):
        run_chain(data, cfg, iters=10, burnin=10, thin=1, rng=make_rng(0))
    with pytest.raises(ValueError):
        run_chain(data, cfg, iters=10, burnin=2, thin=0, rng=make_rng(0))


def test_run_chain_frozen_subjects_stay_fixed():
    _, data, cfg = toy(I=4, J=4, K=3, L=2, seed=21)
    frozen = np.array([0, 1, 0, 2])
    arch = run_chain(data, cfg, iters=30, burnin=10, thin=1, rng=make_rng(5),
                     freeze_subjects=frozen)
    assert np.all(arch.draws["subject_labels"] == frozen[None, :])


@pytest.mark.slow
def test_log_joint_trace_finite_on_benchmark_scale_data():
    cfg = NestedModelConfig(K=20, L=30, atom_prior=None)
    sim = simulate_nested(
        NestedModelConfig(K=20, L=30, atom_prior=PRIOR), I=100, J=20,
        rng=make_rng(22), separation=3.0,
    )
    arch = run_chain(sim.data, cfg, iters=5000, burnin=0, thin=5, rng=make_rng(23))
    assert np.all(np.isfinite(arch.log_joint))


@pytest.mark.slow
def test_two_cluster_recovery_across_replicates():
    # well-separated two-cluster subject truth (atom gap 5 sd): the posterior
    # mode of the occupied subject-cluster count must be 2 in at least 90% of
    # 20 seeded replicates
    hits = 0
    n_rep = 20
    gen_cfg = NestedModelConfig(K=8, L=8, atom_prior=PRIOR)
    for rep in range(n_rep):
        rng = make_rng(1000 + rep)
        J, I = 10, 40
        subject_truth = np.array([0] * 5 + [1] * 5)
        row_truth = np.zeros((8, I), dtype=np.int64)
        row_truth[0, : I // 2] = 0
        row_truth[0, I // 2:] = 1
        row_truth[1, : I // 2] = 2
        row_truth[1, I // 2:] = 3
        sim = simulate_nested(gen_cfg, I, J, rng, separation=5.0,
                              subject_labels=subject_truth, row_labels=row_truth)
        fit_cfg = NestedModelConfig(K=8, L=8, atom_prior=None)
        arch = run_chain(sim.data, fit_cfg, iters=400, burnin=200, thin=2,
                         rng=make_rng(2000 + rep))
        if map_cluster_count(arch.draws["subject_labels"]) == 2:
            hits += 1
    assert hits >= 0.9 * n_rep
