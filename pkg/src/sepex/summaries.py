"""Posterior summaries: partition point estimates, co-clustering maps,
Rao-Blackwellized slope differences, quantile ranking, naive baselines, and
fit diagnostics.

Everything here is pure post-processing over immutable chain archives. Ties
are always broken by ascending index so reports are reproducible.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .ddp import DdpConfig, DdpState, beta_posterior_params
from .io import ChainArchive
from .partitions import canonicalize, coclustering_matrix
from .splines import DESIGN_COLS, NUM_BASIS, StudyDesign


# ---------------------------------------------------------------------------
# Partition point estimation (Binder loss)


@dataclass
class PartitionEstimate:
    labels: np.ndarray
    loss: float
    source: str  # "sample" if a sampled draw won, "greedy" if refinement improved it


def _pair_objective(A: np.ndarray, labels: np.ndarray) -> float:
    """Sum over same-cluster unordered pairs of A = 1 - 2 * coclust."""
    total = 0.0
    for v in np.unique(labels):
        idx = np.flatnonzero(labels == v)
        block = A[np.ix_(idx, idx)].sum()
        total += 0.5 * (block + idx.size)  # diag of A is -1
    return total


def _greedy_binder(A: np.ndarray, start: np.ndarray, max_sweeps: int = 200) -> np.ndarray:
    """Local search on the Binder objective: single-item moves to any existing
    or new cluster, plus cluster merges, iterated to a fixed point."""
    n = start.size
    labels = canonicalize(start).copy()
    for _ in range(max_sweeps):
        moved = False
        # item moves
        for _ in range(max_sweeps):
            any_move = False
            cluster_ids = np.unique(labels)
            member_sum = np.stack([A[:, labels == c].sum(axis=1) for c in cluster_ids], axis=1)
            for i in range(n):
                cur_pos = int(np.searchsorted(cluster_ids, labels[i]))
                scores = member_sum[i].copy()
                scores[cur_pos] += 1.0  # exclude self: A[i, i] = -1
                best_pos = int(np.argmin(scores))
                best = min(scores[best_pos], 0.0)  # 0.0 = open a new singleton
                if best < scores[cur_pos] - 1e-12:
                    old = labels[i]
                    if scores[best_pos] <= 0.0 and scores[best_pos] == best:
                        new = cluster_ids[best_pos]
                    else:
                        new = labels.max() + 1
                    labels[i] = new
                    member_sum[:, cur_pos] -= A[:, i]
                    if new in cluster_ids:
                        member_sum[:, int(np.searchsorted(cluster_ids, new))] += A[:, i]
                    else:
                        member_sum = np.concatenate(
                            [member_sum, A[:, i][:, None]], axis=1
                        )
                        cluster_ids = np.append(cluster_ids, new)
                    if np.all(labels != old) and old != new:
                        keep = cluster_ids != old
                        cluster_ids = cluster_ids[keep]
                        member_sum = member_sum[:, keep]
                    any_move = moved = True
            if not any_move:
                break
        # merge phase
        cluster_ids = np.unique(labels)
        K = cluster_ids.size
        if K > 1:
            Z = (labels[:, None] == cluster_ids[None, :]).astype(float)
            cross = Z.T @ A @ Z
            np.fill_diagonal(cross, np.inf)
            c, d = np.unravel_index(np.argmin(cross), cross.shape)
            if cross[c, d] < -1e-12:
                labels[labels == cluster_ids[d]] = cluster_ids[c]
                moved = True
        if not moved:
            break
    return canonicalize(labels)


def _sequential_allocation(A: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Allocate items one at a time (in the given order) to the cluster that
    most reduces the pair objective, opening new clusters when profitable."""
    n = order.size
    labels = np.full(n, -1, dtype=np.int64)
    labels[order[0]] = 0
    n_clusters = 1
    for i in order[1:]:
        assigned = labels >= 0
        scores = np.array([
            A[i, assigned & (labels == c)].sum() for c in range(n_clusters)
        ])
        best = int(np.argmin(scores))
        if scores[best] < 0.0:
            labels[i] = best
        else:
            labels[i] = n_clusters
            n_clusters += 1
    return labels


def dahl_point_estimate(draws, n_restarts: int = 10) -> PartitionEstimate:
    """Minimize Binder loss against the posterior co-clustering matrix.

    Candidates: every sampled partition, a greedy refinement of the best
    sample, and greedy refinements of seeded random-order sequential
    allocations (restarts escape local minima of the single-start sweep).
    """
    arr = np.asarray(draws)
    coclust = coclustering_matrix(arr)
    A = 1.0 - 2.0 * coclust
    base = float(np.sum(np.triu(coclust, k=1) ** 2))
    sample_losses = np.array([base + _pair_objective(A, row) for row in arr])
    best_idx = int(np.argmin(sample_losses))
    best_sample = canonicalize(arr[best_idx])
    best_labels, best_loss, source = best_sample, float(sample_losses[best_idx]), "sample"

    starts = [best_sample]
    restart_rng = np.random.default_rng(0)
    for _ in range(n_restarts):
        order = restart_rng.permutation(arr.shape[1])
        starts.append(_sequential_allocation(A, order))
    for start in starts:
        refined = _greedy_binder(A, start)
        loss = base + _pair_objective(A, refined)
        if loss < best_loss - 1e-12:
            best_labels, best_loss, source = refined, float(loss), "greedy"
    return PartitionEstimate(labels=best_labels, loss=best_loss, source=source)


def map_cluster_count(draws) -> int:
    """Mode of the occupied-cluster count across draws, ties toward smaller."""
    arr = np.asarray(draws)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("draws must be a nonempty 2-D label array")
    counts = Counter(int(np.unique(row).size) for row in arr)
    top = max(counts.values())
    return min(k for k, v in counts.items() if v == top)


# ---------------------------------------------------------------------------
# Nested-model co-clustering, conditional on a subject partition


def nested_coclustering(archive: ChainArchive, subject_point_estimate) -> list[np.ndarray]:
    """Per subject cluster, the posterior co-clustering matrix of rows.

    Draws are filtered to those whose subject partition matches the point
    estimate (a cheap approximation to re-running the chain with the subject
    labels frozen; frozen-chain archives match by construction).
    """
    if archive.model != "nested":
        raise ValueError(f"expected a nested-model archive, got {archive.model!r}")
    point = canonicalize(subject_point_estimate)
    dims = archive.dims
    S = archive.draws["subject_labels"]
    M = archive.reshaped("row_labels", dims["K"], dims["I"])
    matches = [r for r in range(S.shape[0]) if np.array_equal(canonicalize(S[r]), point)]
    if not matches:
        raise ValueError(
            "no retained draws share the subject point estimate; re-run the chain "
            "with the subject partition frozen (fit-nested --freeze-subjects)"
        )
    out = []
    for c in range(int(point.max()) + 1):
        rep = int(np.flatnonzero(point == c)[0])
        rows = np.stack([M[r, S[r, rep], :] for r in matches])
        out.append(coclustering_matrix(rows))
    return out


# ---------------------------------------------------------------------------
# Slope-difference estimators


def _config_from_manifest(manifest: dict) -> DdpConfig:
    cfg = dict(manifest["config"])
    cfg["beta0"] = np.asarray(cfg["beta0"], dtype=float)
    return DdpConfig(**cfg)


def rao_blackwell_gamma(archive: ChainArchive, data, design: StudyDesign) -> np.ndarray:
    """Rao-Blackwellized posterior mean of the per-protein slope difference.

    Each retained draw contributes the conditional expectation of gamma given
    everything except the coefficient atoms, i.e. the contrast applied to the
    Gaussian conditional mean of each cluster's coefficients.
    """
    if archive.model != "ddp":
        raise ValueError(f"expected a ddp archive, got {archive.model!r}")
    data = np.asarray(data, dtype=float)
    config = _config_from_manifest(archive.manifest)
    dims = archive.dims
    contrast = design.slope_contrast()
    labels = archive.draws["labels"]
    sigma2 = archive.draws["sigma2"]
    delta = archive.draws["delta"]
    alpha = archive.draws["alpha"]
    n = archive.n_draws
    acc = np.zeros(dims["I"])
    state = DdpState(
        labels=labels[0].copy(),
        v=np.ones(config.H),
        pi=np.full(config.H, 1.0 / config.H),
        beta=np.zeros((config.H, DESIGN_COLS)),
        sigma2=sigma2[0].copy(),
        delta=delta[0].copy(),
        alpha=alpha[0].copy(),
    )
    for m in range(n):
        state.labels = labels[m]
        state.sigma2 = sigma2[m]
        state.delta = delta[m]
        state.alpha = alpha[m]
        gamma_h = {}
        for h in np.unique(state.labels):
            mean, _ = beta_posterior_params(state, data, design, config, int(h))
            gamma_h[int(h)] = float(contrast @ mean[NUM_BASIS:])
        acc += np.array([gamma_h[int(h)] for h in state.labels])
    return acc / n


def naive_gamma_hat(data, design: StudyDesign) -> np.ndarray:
    """Difference-of-differences baseline from the four corner subjects,
    scaled by the time span in index units."""
    data = np.asarray(data, dtype=float)
    needed = [(0, "first"), (0, "last"), (1, "first"), (1, "last")]
    if any(key not in design.corners for key in needed):
        raise ValueError("design lacks one of the four corner subjects")
    j01, j0t = design.corners[(0, "first")], design.corners[(0, "last")]
    j11, j1t = design.corners[(1, "first")], design.corners[(1, "last")]
    span = design.n_times - 1
    return ((data[:, j1t] - data[:, j11]) - (data[:, j0t] - data[:, j01])) / span


# ---------------------------------------------------------------------------
# Quantile ranking


@dataclass
class RankReport:
    c: float
    exceed_prob: np.ndarray  # p(P_i > c | y)
    r_star: np.ndarray  # optimal ranks, a permutation of 1..I
    selected: np.ndarray  # indices of the top ceil((1 - c) (I + 1)) items


def rank_with_index_ties(values) -> np.ndarray:
    """Ascending ranks 1..n; equal values are ordered by index."""
    values = np.asarray(values, dtype=float)
    n = values.size
    order = np.lexsort((np.arange(n), values))
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(1, n + 1)
    return ranks


def rank_quantile(gamma_draws, c: float) -> RankReport:
    """Optimal ranking for the 0-1 loss that reports the top (1 - c) fraction:
    rank items by their probability of exceeding the c-quantile of absolute
    slope differences."""
    g = np.atleast_2d(np.asarray(gamma_draws, dtype=float))
    if not (0.0 < c < 1.0):
        raise ValueError(f"c must lie in (0, 1), got {c}")
    M, I = g.shape
    exceed = np.zeros(I)
    for m in range(M):
        ranks = rank_with_index_ties(np.abs(g[m]))
        exceed += ranks / (I + 1.0) > c
    exceed /= M
    r_star = rank_with_index_ties(exceed)
    n_select = min(int(math.ceil((1.0 - c) * (I + 1))), I)
    selected = np.flatnonzero(r_star > I - n_select)
    return RankReport(c=c, exceed_prob=exceed, r_star=r_star, selected=selected)


# ---------------------------------------------------------------------------
# Fit diagnostics


@dataclass
class FitDiagnostics:
    r2_per_cluster: np.ndarray
    residual_sample: np.ndarray  # one y - yhat draw per retained iteration
    standardized_residuals: np.ndarray  # residuals over the draw's cluster sd
    fitted_by_cluster: np.ndarray  # (K, J) posterior-mean fits per point cluster


def fit_diagnostics(archive: ChainArchive, data, design: StudyDesign,
                    point_partition, rng: np.random.Generator) -> FitDiagnostics:
    """Posterior-predictive residual sample and per-cluster R-squared.

    Per retained draw, one randomly chosen cell's residual against the draw's
    fitted value is recorded. R-squared per cluster uses posterior-mean
    fitted values: cluster-average offset + mean time effects + design times
    the cluster's mean coefficients, with membership from the point partition.
    """
    if archive.model != "ddp":
        raise ValueError(f"expected a ddp archive, got {archive.model!r}")
    data = np.asarray(data, dtype=float)
    point = canonicalize(point_partition)
    dims = archive.dims
    I, J, H = dims["I"], dims["J"], dims["H"]
    n = archive.n_draws
    labels = archive.draws["labels"]
    beta = archive.reshaped("beta", H, DESIGN_COLS)
    sigma2 = archive.draws["sigma2"]
    delta = archive.draws["delta"]
    alpha = archive.draws["alpha"]

    resid = np.empty(n)
    z_std = np.empty(n)
    for m in range(n):
        i = int(rng.integers(I))
        j = int(rng.integers(J))
        h = labels[m, i]
        yhat = alpha[m, i] + delta[m, design.t_idx[j]] + design.x[j] @ beta[m, h]
        resid[m] = data[i, j] - yhat
        z_std[m] = resid[m] / np.sqrt(sigma2[m, h])

    alpha_bar = alpha.mean(axis=0)
    delta_bar = delta.mean(axis=0)
    K = int(point.max()) + 1
    r2 = np.empty(K)
    fitted = np.empty((K, J))
    for cidx in range(K):
        members = np.flatnonzero(point == cidx)
        member_atoms = beta[np.arange(n)[:, None], labels[:, members]]  # (n, |members|, 12)
        beta_bar = member_atoms.mean(axis=(0, 1))
        a_star = alpha_bar[members].mean()
        fitted[cidx] = a_star + delta_bar[design.t_idx] + design.x @ beta_bar
        block = data[members]
        ss_res = float(np.sum((block - fitted[cidx][None, :]) ** 2))
        ss_tot = float(np.sum((block - block.mean()) ** 2))
        r2[cidx] = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return FitDiagnostics(
        r2_per_cluster=r2,
        residual_sample=resid,
        standardized_residuals=z_std,
        fitted_by_cluster=fitted,
    )
