import numpy as np
import pytest
from scipy import stats

from _grid import discrete_joint_scan, quantile_grid, tv_continuous, tv_discrete
from sepex.ddp import (
    DdpConfig,
    DdpState,
    alpha_posterior_params,
    beta_posterior_params,
    cluster_label_log_probs,
    delta_posterior_params,
    draw_prior_state,
    gamma_i,
    gibbs_sweep,
    log_joint,
    log_prior_density,
    run_chain,
    update_atoms_regression,
    update_cluster_labels,
)
from sepex.rng import make_rng
from sepex.splines import SplineBasis, StudyDesign

BASIS = SplineBasis((1.0 / 3.0, 2.0 / 3.0), (0.0, 1.0))


def paired_design(n_times=4):
    """One control and one patient at each time, boundary times included."""
    times = np.linspace(0.0, 1.0, n_times)
    ages = np.repeat(times, 2)
    z = np.tile([0, 1], n_times)
    return StudyDesign.from_inputs(ages, z, BASIS)


def toy(I=2, n_times=2, H=2, seed=0, **cfg_kwargs):
    cfg_kwargs.setdefault("a0", 3.0)
    cfg_kwargs.setdefault("b0", 2.0)
    config = DdpConfig(H=H, **cfg_kwargs)
    design = paired_design(n_times)
    rng = make_rng(seed)
    data = rng.normal(size=(I, design.n_subjects))
    state = draw_prior_state(config, I, design.n_times, rng)
    return state, data, design, config


# ---------------------------------------------------------------------------
# joint density and prior symmetry


def test_log_joint_matches_term_by_term_oracle():
    state, data, design, config = toy(I=3, n_times=3, H=2, seed=1)
    total = 0.0
    for i in range(3):
        for j in range(design.n_subjects):
            h = state.labels[i]
            mean = state.alpha[i] + state.delta[design.t_idx[j]] + design.x[j] @ state.beta[h]
            total += stats.norm.logpdf(data[i, j], mean, np.sqrt(state.sigma2[h]))
    total += np.sum(np.log(state.pi[state.labels]))
    for h in range(config.H - 1):
        total += stats.beta.logpdf(state.v[h], 1.0, config.xi)
    for h in range(config.H):
        total += np.sum(stats.norm.logpdf(state.beta[h], config.beta0, config.sigma_beta0))
        total += stats.invgamma.logpdf(state.sigma2[h], config.a0, scale=config.b0)
    total += np.sum(stats.norm.logpdf(state.delta, config.zeta, np.sqrt(config.omega2)))
    total += np.sum(stats.norm.logpdf(state.alpha, config.mu0, np.sqrt(config.sigma02)))
    assert log_joint(state, data, design, config) == pytest.approx(total, abs=1e-10)


def test_prior_density_separately_exchangeable_in_proteins_and_times():
    # permuting protein-indexed components together, and time-indexed ones,
    # leaves the prior density unchanged
    state, _, design, config = toy(I=5, n_times=4, H=3, seed=2)
    base = log_prior_density(state, config)
    rng = np.random.default_rng(3)
    for _ in range(5):
        perm_i = rng.permutation(5)
        perm_t = rng.permutation(design.n_times)
        probe = state.copy()
        probe.labels = state.labels[perm_i]
        probe.alpha = state.alpha[perm_i]
        probe.delta = state.delta[perm_t]
        assert log_prior_density(probe, config) == pytest.approx(base, abs=1e-10)


# ---------------------------------------------------------------------------
# conditional oracles


def test_cluster_label_conditional_matches_joint():
    state, data, design, config = toy(I=1, n_times=1, H=2, seed=4)
    impl = cluster_label_log_probs(state, data, design)[0]

    def joint_at(h):
        probe = state.copy()
        probe.labels[0] = h
        return log_joint(probe, data, design, config)

    scan = discrete_joint_scan(joint_at, config.H)
    assert tv_discrete(impl, scan) < 1e-8


def test_cluster_label_conditional_equals_weights_for_identical_atoms():
    state, data, design, config = toy(I=4, n_times=2, H=3, seed=5)
    state.beta[:] = state.beta[0][None, :]
    state.sigma2[:] = 1.1
    impl = cluster_label_log_probs(state, data, design)
    p = np.exp(impl - impl.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    assert np.allclose(p, state.pi / state.pi.sum(), atol=1e-12)


def test_stick_conditional_matches_joint():
    state, data, design, config = toy(I=6, n_times=2, H=3, seed=6)
    counts = np.bincount(state.labels, minlength=config.H).astype(float)
    for h in range(config.H - 1):
        dist = stats.beta(1.0 + counts[h], config.xi + counts[h + 1:].sum())
        grid = quantile_grid(dist, n=1000, tail=1e-9)
        impl = dist.logpdf(grid)
        scan = []
        probe = state.copy()
        from sepex.sticks import weights_from_sticks

        for v in grid:
            probe.v[h] = v
            probe.pi = weights_from_sticks(probe.v)
            scan.append(log_joint(probe, data, design, config))
        assert tv_continuous(grid, impl, scan) < 1e-6


def test_coefficient_coordinate_conditional_matches_joint():
    # conditional of one coordinate of a cluster's coefficient atom given all
    # other coordinates, from the Gaussian posterior via Schur complement
    state, data, design, config = toy(I=3, n_times=3, H=2, seed=7)
    h = int(state.labels[0])
    mean, precision = beta_posterior_params(state, data, design, config, h)
    for c in (0, 7, 11):
        var_c = 1.0 / precision[c, c]
        off = np.delete(precision[c], c)
        resid = np.delete(state.beta[h] - mean, c)
        mean_c = mean[c] - var_c * float(off @ resid)
        dist = stats.norm(mean_c, np.sqrt(var_c))
        grid = quantile_grid(dist, n=1000, tail=1e-10)
        impl = dist.logpdf(grid)
        scan = []
        probe = state.copy()
        for v in grid:
            probe.beta[h, c] = v
            scan.append(log_joint(probe, data, design, config))
        assert tv_continuous(grid, impl, scan) < 1e-6


def test_noise_variance_conditional_matches_joint():
    state, data, design, config = toy(I=3, n_times=2, H=2, seed=8)
    h = int(state.labels[0])
    members = np.flatnonzero(state.labels == h)
    resid = (
        data[members]
        - state.alpha[members, None]
        - state.delta[design.t_idx][None, :]
        - (design.x @ state.beta[h])[None, :]
    )
    a_n = config.a0 + 0.5 * members.size * design.n_subjects
    b_n = config.b0 + 0.5 * float(np.sum(resid**2))
    dist = stats.invgamma(a_n, scale=b_n)
    grid = quantile_grid(dist, n=1000, tail=1e-10)
    impl = dist.logpdf(grid)
    scan = []
    probe = state.copy()
    for v in grid:
        probe.sigma2[h] = v
        scan.append(log_joint(probe, data, design, config))
    assert tv_continuous(grid, impl, scan) < 1e-6


def test_time_effect_conditional_matches_joint_and_rejects_squared_residuals():
    state, data, design, config = toy(I=2, n_times=2, H=2, seed=9)
    mean, var = delta_posterior_params(state, data, design, config)
    t = 0
    dist = stats.norm(mean[t], np.sqrt(var[t]))
    grid = quantile_grid(dist, n=1000, tail=1e-10)
    impl = dist.logpdf(grid)
    scan = []
    probe = state.copy()
    for v in grid:
        probe.delta[t] = v
        scan.append(log_joint(probe, data, design, config))
    assert tv_continuous(grid, impl, scan) < 1e-6

    # the squared-residual variant of the conditional mean is not the
    # conditional of the joint: same grid, clearly nonzero total variation
    inv_s2 = 1.0 / state.sigma2[state.labels]
    resid = data - state.alpha[:, None] \
        - (design.x @ state.beta.T)[:, state.labels].T
    sq_num = np.bincount(design.t_idx, weights=inv_s2 @ resid**2,
                         minlength=design.n_times)
    wrong_mean = (config.zeta / config.omega2 + sq_num[t]) * var[t]
    wrong = stats.norm(wrong_mean, np.sqrt(var[t])).logpdf(grid)
    assert tv_continuous(grid, wrong, scan) > 1e-3


def test_protein_offset_conditional_matches_joint():
    state, data, design, config = toy(I=1, n_times=2, H=2, seed=10)
    mean, var = alpha_posterior_params(state, data, design, config)
    dist = stats.norm(mean[0], np.sqrt(var[0]))
    grid = quantile_grid(dist, n=1000, tail=1e-10)
    impl = dist.logpdf(grid)
    scan = []
    probe = state.copy()
    for v in grid:
        probe.alpha[0] = v
        scan.append(log_joint(probe, data, design, config))
    assert tv_continuous(grid, impl, scan) < 1e-6


# ---------------------------------------------------------------------------
# limits and degenerate cases


def test_empty_cluster_atoms_refresh_from_prior():
    state, data, design, config = toy(I=3, n_times=2, H=4, seed=11)
    state.labels[:] = 0
    rng = make_rng(12)
    betas, sig2s = [], []
    for _ in range(3000):
        probe = state.copy()
        update_atoms_regression(probe, data, design, config, rng)
        betas.append(probe.beta[2, 0])
        sig2s.append(probe.sigma2[2])
    assert abs(np.mean(betas) - config.beta0[0]) < 0.06
    assert abs(np.std(betas) - config.sigma_beta0) < 0.05
    # InvGa(3, 2) mean = 1
    assert abs(np.mean(sig2s) - 1.0) < 0.06


def test_flat_prior_limit_recovers_least_squares():
    # with a huge coefficient prior sd and one cluster, the conditional mean
    # equals ordinary least squares on the offset-corrected residuals
    state, data, design, config = toy(I=4, n_times=4, H=1, seed=13,
                                      sigma_beta0=1e3)
    state.labels[:] = 0
    mean, _ = beta_posterior_params(state, data, design, config, 0)
    R = data - state.alpha[:, None] - state.delta[design.t_idx][None, :]
    X = design.x
    ls, *_ = np.linalg.lstsq(
        np.kron(np.ones((4, 1)), X), R.reshape(-1), rcond=None
    )
    assert np.abs(mean - ls).max() < 1e-3


def test_flat_prior_limit_time_effect_mean_is_residual():
    state, data, design, config = toy(I=1, n_times=2, H=1, seed=14, omega2=1e8)
    # single protein, two subjects (one per condition) at each of two times
    mean, _ = delta_posterior_params(state, data, design, config)
    resid = data[0] - state.alpha[0] - design.x @ state.beta[0]
    for t in range(design.n_times):
        cols = np.flatnonzero(design.t_idx == t)
        assert mean[t] == pytest.approx(resid[cols].mean(), rel=1e-4)


def test_flat_prior_limit_offset_mean_is_average_residual():
    state, data, design, config = toy(I=2, n_times=3, H=2, seed=15, sigma02=1e8)
    mean, _ = alpha_posterior_params(state, data, design, config)
    for i in range(2):
        resid = data[i] - state.delta[design.t_idx] - design.x @ state.beta[state.labels[i]]
        assert mean[i] == pytest.approx(resid.mean(), rel=1e-4)


def test_no_subjects_at_time_gives_prior():
    # a time index with no subjects keeps its prior conditional
    ages = np.array([0.0, 0.0, 1.0, 1.0])
    z = np.array([0, 1, 0, 1])
    design = StudyDesign.from_inputs(ages, z, BASIS)
    config = DdpConfig(H=2, a0=3.0, b0=2.0)
    rng = make_rng(16)
    state = draw_prior_state(config, 2, 3, rng)  # three times, middle unused
    data = rng.normal(size=(2, 4))
    probe_design = StudyDesign(
        x=design.x, z=design.z, ages=design.ages,
        t_idx=np.array([0, 0, 2, 2]), n_times=3, basis=BASIS,
        corners=design.corners,
    )
    mean, var = delta_posterior_params(state, data, probe_design, config)
    assert mean[1] == pytest.approx(config.zeta)
    assert var[1] == pytest.approx(config.omega2)


def test_single_truncation_forces_single_cluster():
    state, data, design, config = toy(I=5, n_times=2, H=1, seed=17)
    update_cluster_labels(state, data, design, config, make_rng(0))
    assert np.all(state.labels == 0)


# ---------------------------------------------------------------------------
# slope differences


def test_gamma_zero_when_offset_block_zero():
    state, _, design, config = toy(I=3, n_times=3, H=2, seed=18)
    state.beta[:, 6:] = 0.0
    assert np.allclose(gamma_i(state, design), 0.0, atol=0)


def test_gamma_shared_within_cluster_and_boundary_formula():
    state, _, design, config = toy(I=6, n_times=3, H=2, seed=19)
    state.labels = np.array([0, 0, 1, 1, 0, 1])
    g = gamma_i(state, design)
    assert g[0] == g[1] == g[4]
    assert g[2] == g[3] == g[5]
    # clamped boundary basis: contrast reduces to last minus first offset coef
    expected = state.beta[:, 11] - state.beta[:, 6]
    assert g[0] == pytest.approx(expected[0], abs=1e-12)
    assert g[2] == pytest.approx(expected[1], abs=1e-12)


def test_gamma_requires_corner_subjects():
    ages = np.array([0.0, 0.5, 1.0])
    design = StudyDesign.from_inputs(ages, [0, 1, 0], BASIS)
    state, _, _, config = toy(I=2, n_times=3, H=2, seed=20)
    with pytest.raises(ValueError):
        gamma_i(state, design)


# ---------------------------------------------------------------------------
# chains


def test_run_chain_deterministic_and_shapes():
    _, data, design, config = toy(I=4, n_times=3, H=3, seed=21)
    a = run_chain(data, design, config, iters=40, burnin=10, thin=3,
                  rng=make_rng(7, 2), seed=7, stream=2)
    b = run_chain(data, design, config, iters=40, burnin=10, thin=3,
                  rng=make_rng(7, 2), seed=7, stream=2)
    assert a.n_draws == 10
    for name in a.draws:
        assert np.array_equal(a.draws[name], b.draws[name])
    assert np.array_equal(a.log_joint, b.log_joint)
    assert a.draws["gamma"].shape == (10, 4)


def test_run_chain_frozen_labels_stay_fixed():
    _, data, design, config = toy(I=5, n_times=2, H=3, seed=22)
    frozen = np.array([0, 1, 0, 2, 1])
    arch = run_chain(data, design, config, iters=30, burnin=10, thin=1,
                     rng=make_rng(3), freeze_labels=frozen)
    assert np.all(arch.draws["labels"] == frozen[None, :])


@pytest.mark.slow
def test_no_nans_over_5000_iterations_on_simulated_data():
    from sepex.simulate import ProteinSimTruth, simulate_protein

    truth = ProteinSimTruth(n_subjects=12, n_proteins=30)
    sim = simulate_protein(truth, make_rng(23))
    design = StudyDesign.from_inputs(sim.ages, np.zeros(12, dtype=int))
    config = DdpConfig(H=10)
    arch = run_chain(sim.data, design, config, iters=5000, burnin=0, thin=5,
                     rng=make_rng(24))
    for name, arr in arch.draws.items():
        assert np.all(np.isfinite(arr)), name
    assert np.all(np.isfinite(arch.log_joint))
