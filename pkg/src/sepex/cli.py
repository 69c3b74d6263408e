"""Command-line entry point: simulate, fit, summarize, rank, check-exch,
diagnose. Outputs land under --out; every fit writes a chain archive whose
manifest reproduces the run."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, ddp, nested
from .exchangeability import run_standard_suite
from .io import (
    FLOAT_FMT,
    ChainArchive,
    ValidationError,
    load_chain_archives,
    load_config,
    load_matrix_csv,
    load_otu_csv,
    load_protein_csv,
    pool_archives,
    write_matrix_csv,
)
from .rng import NormalInvGammaParams, make_rng
from .simulate import NestedSim, ProteinSimTruth, simulate_nested, simulate_protein
from .splines import SplineBasis, StudyDesign
from .summaries import (
    dahl_point_estimate,
    fit_diagnostics,
    map_cluster_count,
    nested_coclustering,
    rank_quantile,
)

NESTED_CONFIG_KEYS = ("K", "L", "alpha", "beta", "m0", "kappa0", "a0", "b0")
DDP_CONFIG_KEYS = ("H", "xi", "sigma_beta0", "a0", "b0", "zeta", "omega2",
                   "mu0", "sigma02", "beta0")
RUN_KEYS = ("iters", "burnin", "thin", "seed")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cfg(args) -> dict:
    return load_config(args.config) if args.config else {}


def _run_setting(args, cfg: dict, key: str, default):
    value = getattr(args, key, None)
    if value is not None:
        return value
    return cfg.get(key, default)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")


# ---------------------------------------------------------------------------
# simulate


def _cmd_simulate(args) -> int:
    out = _outdir(args)
    rng = make_rng(args.seed)
    if args.model == "protein":
        truth = ProteinSimTruth(n_subjects=args.subjects or 20,
                                n_proteins=args.proteins or 100)
        sim = simulate_protein(truth, rng)
        order = np.argsort(sim.ages)
        t_index = np.empty_like(order)
        t_index[order] = np.arange(1, sim.ages.size + 1)
        with (out / "data.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["protein_id", "subject_id", "y", "z", "t"])
            for i in range(truth.n_proteins):
                for j in range(truth.n_subjects):
                    writer.writerow(
                        [f"p{i:04d}", f"s{j:03d}", FLOAT_FMT % sim.data[i, j], 0, t_index[j]]
                    )
        _write_json(out / "truth.json", {"model": "protein", "seed": args.seed,
                                         **sim.to_truth_dict()})
    else:
        I = args.otus or 40
        J = args.subjects or 12
        config = nested.NestedModelConfig(
            atom_prior=NormalInvGammaParams(m0=0.0, kappa0=0.1, a0=3.0, b0=2.0)
        )
        sim: NestedSim = simulate_nested(config, I, J, rng, separation=args.separation)
        write_matrix_csv(out / "matrix.csv", sim.data,
                         [f"otu{i:04d}" for i in range(I)],
                         [f"s{j:03d}" for j in range(J)])
        _write_json(out / "truth.json", {
            "model": "nested",
            "seed": args.seed,
            "subject_labels": sim.subject_labels.tolist(),
            "row_labels": sim.row_labels.tolist(),
        })
    print(f"wrote simulated {args.model} data to {out}")
    return 0


# ---------------------------------------------------------------------------
# fit-nested


def _nested_worker(payload):
    data, cfg_dict, iters, burnin, thin, seed, stream = payload
    prior = None
    if all(cfg_dict.get(k) is not None for k in ("m0", "kappa0", "a0", "b0")):
        prior = NormalInvGammaParams(cfg_dict["m0"], cfg_dict["kappa0"],
                                     cfg_dict["a0"], cfg_dict["b0"])
    config = nested.NestedModelConfig(
        K=cfg_dict.get("K", 20), L=cfg_dict.get("L", 30),
        alpha=cfg_dict.get("alpha", 1.0), beta=cfg_dict.get("beta", 1.0),
        atom_prior=prior,
    )
    rng = make_rng(seed, stream)
    freeze = cfg_dict.get("freeze_subjects")
    return nested.run_chain(
        data, config, iters, burnin, thin, rng, seed=seed, stream=stream,
        freeze_subjects=None if freeze is None else np.asarray(freeze, dtype=np.int64),
    )


def _cmd_fit_nested(args) -> int:
    out = _outdir(args)
    cfg = _load_cfg(args)
    normalize = _run_setting(args, cfg, "normalize", "avg_library")
    log_transform = bool(_run_setting(args, cfg, "log_transform", False))
    if args.input_format == "counts":
        table = load_otu_csv(args.data, normalize=normalize, log_transform=log_transform)
        data, row_ids, col_ids = table.values, table.otu_ids, table.subject_ids
    else:
        data, row_ids, col_ids = load_matrix_csv(args.data)
    iters = int(_run_setting(args, cfg, "iters", 2000))
    burnin = int(_run_setting(args, cfg, "burnin", iters // 2))
    thin = int(_run_setting(args, cfg, "thin", 1))
    seed = int(_run_setting(args, cfg, "seed", 0))
    cfg_dict = {k: cfg.get(k) for k in NESTED_CONFIG_KEYS}
    cfg_dict["K"] = cfg.get("K", 20)
    cfg_dict["L"] = cfg.get("L", 30)
    cfg_dict["alpha"] = cfg.get("alpha", 1.0)
    cfg_dict["beta"] = cfg.get("beta", 1.0)
    if args.freeze_subjects:
        cfg_dict["freeze_subjects"] = np.loadtxt(
            args.freeze_subjects, delimiter=",", dtype=np.int64, ndmin=1
        ).tolist()
    payloads = [
        (data, cfg_dict, iters, burnin, thin, seed, chain)
        for chain in range(args.chains)
    ]
    archives = _run_chains(_nested_worker, payloads, args.chains)
    for chain, arch in enumerate(archives):
        arch.manifest["data_path"] = str(args.data)
        arch.manifest["otu_ids"] = row_ids
        arch.manifest["subject_ids"] = col_ids
        arch.manifest["normalize"] = normalize
        arch.manifest["log_transform"] = log_transform
        arch.save(out if args.chains == 1 else out / f"chain_{chain:02d}")
    print(f"nested fit complete: {args.chains} chain(s), "
          f"{archives[0].n_draws} retained draws each, archive at {out}")
    return 0


# ---------------------------------------------------------------------------
# fit-ddp


def _ddp_worker(payload):
    data, design_spec, cfg_dict, iters, burnin, thin, seed, stream = payload
    ages, conditions, interior = design_spec
    basis = None
    if interior is not None:
        ages_arr = np.asarray(ages, dtype=float)
        basis = SplineBasis(tuple(interior), (float(ages_arr.min()), float(ages_arr.max())))
    design = StudyDesign.from_inputs(ages, conditions, basis)
    cfg_dict = dict(cfg_dict)
    freeze = cfg_dict.pop("freeze_labels", None)
    config = ddp.DdpConfig(**cfg_dict)
    rng = make_rng(seed, stream)
    return ddp.run_chain(
        data, design, config, iters, burnin, thin, rng, seed=seed, stream=stream,
        freeze_labels=None if freeze is None else np.asarray(freeze, dtype=np.int64),
    )


def _cmd_fit_ddp(args) -> int:
    out = _outdir(args)
    cfg = _load_cfg(args)
    table = load_protein_csv(args.data)
    for warning in table.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    iters = int(_run_setting(args, cfg, "iters", 3000))
    burnin = int(_run_setting(args, cfg, "burnin", iters // 2))
    thin = int(_run_setting(args, cfg, "thin", 1))
    seed = int(_run_setting(args, cfg, "seed", 0))
    cfg_dict = {k: cfg[k] for k in DDP_CONFIG_KEYS if k in cfg}
    if "beta0" in cfg_dict:
        cfg_dict["beta0"] = np.asarray(cfg_dict["beta0"], dtype=float)
    if args.freeze_labels:
        cfg_dict["freeze_labels"] = np.loadtxt(
            args.freeze_labels, delimiter=",", dtype=np.int64, ndmin=1
        ).tolist()
    design_spec = (table.t.astype(float).tolist(), table.z.tolist(),
                   cfg.get("interior_knots"))
    payloads = [
        (table.y, design_spec, dict(cfg_dict), iters, burnin, thin, seed, chain)
        for chain in range(args.chains)
    ]
    archives = _run_chains(_ddp_worker, payloads, args.chains)
    for chain, arch in enumerate(archives):
        arch.manifest["data_path"] = str(args.data)
        arch.manifest["protein_ids"] = table.protein_ids
        arch.manifest["subject_ids"] = table.subject_ids
        arch.save(out if args.chains == 1 else out / f"chain_{chain:02d}")
    print(f"ddp fit complete: {args.chains} chain(s), "
          f"{archives[0].n_draws} retained draws each, archive at {out}")
    return 0


def _run_chains(worker, payloads, n_chains: int) -> list[ChainArchive]:
    if n_chains == 1:
        return [worker(payloads[0])]
    with ProcessPoolExecutor(max_workers=min(n_chains, 4)) as pool:
        return list(pool.map(worker, payloads))


# ---------------------------------------------------------------------------
# summarize


def _cmd_summarize(args) -> int:
    out = _outdir(args)
    archives = load_chain_archives(args.archive)
    if args.chain is not None:
        archives = [archives[args.chain]]
    arch = pool_archives(archives)
    if arch.model == "nested":
        label_draws = arch.draws["subject_labels"]
    else:
        label_draws = arch.draws["labels"]
    estimate = dahl_point_estimate(label_draws)
    k_star = map_cluster_count(label_draws)
    np.savetxt(out / "point_partition.csv", estimate.labels[None, :], fmt="%d",
               delimiter=",")
    summary = {
        "model": arch.model,
        "k_star": k_star,
        "binder_loss": estimate.loss,
        "winner": estimate.source,
        "cluster_sizes": np.bincount(estimate.labels).tolist(),
        "n_draws": arch.n_draws,
    }
    if arch.model == "nested":
        mats = nested_coclustering(arch, estimate.labels)
        for c, mat in enumerate(mats):
            np.savetxt(out / f"cocluster_cluster{c}.csv", mat, fmt=FLOAT_FMT,
                       delimiter=",")
        summary["n_subject_clusters"] = len(mats)
    _write_json(out / "summary.json", summary)
    print(f"summary written to {out}: K* = {k_star}, "
          f"Binder loss {estimate.loss:.4f} ({estimate.source})")
    return 0


# ---------------------------------------------------------------------------
# rank


def _cmd_rank(args) -> int:
    out = _outdir(args)
    arch = pool_archives(load_chain_archives(args.archive))
    if arch.model != "ddp" or "gamma" not in arch.draws:
        raise ValidationError(
            "ranking needs a ddp archive with slope-difference draws "
            "(the design must contain the patient corner subjects)"
        )
    gamma = arch.draws["gamma"]
    report = rank_quantile(gamma, args.c)
    ids = arch.manifest.get("protein_ids") or [str(i) for i in range(gamma.shape[1])]
    gamma_mean = gamma.mean(axis=0)
    selected_mask = np.zeros(gamma.shape[1], dtype=int)
    selected_mask[report.selected] = 1
    with (out / "rank.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["protein_id", "gamma_mean", "exceed_prob", "r_star", "selected"])
        for i in np.argsort(-report.r_star):
            writer.writerow([ids[i], FLOAT_FMT % gamma_mean[i],
                             FLOAT_FMT % report.exceed_prob[i],
                             int(report.r_star[i]), int(selected_mask[i])])
    _write_json(out / "rank_summary.json", {
        "c": args.c,
        "n_selected": int(report.selected.size),
        "selected_ids": [ids[i] for i in report.selected],
    })
    print(f"rank report written to {out}: {report.selected.size} proteins selected "
          f"at c = {args.c}")
    return 0


# ---------------------------------------------------------------------------
# check-exch


def _cmd_check_exch(args) -> int:
    out = _outdir(args)
    suite = run_standard_suite(args.draws, make_rng(args.seed))
    _write_json(out / "exch_report.json", suite.to_dict())
    for name, report in suite.reports.items():
        print(f"{'PASS' if report.passed else 'FAIL'} {name}: diff = "
              f"{report.diff:+.5f} (3 SE = {3 * report.se_diff:.5f}, rule {report.rule})")
    print(f"report written to {out / 'exch_report.json'}")
    return 0 if suite.all_passed else 1


# ---------------------------------------------------------------------------
# diagnose


def _design_from_manifest(manifest: dict) -> StudyDesign:
    spec = manifest["design"]
    basis = SplineBasis(tuple(spec["basis"]["interior_knots"]),
                        tuple(spec["basis"]["boundary"]))
    return StudyDesign.from_inputs(spec["ages"], spec["conditions"], basis)


def _cmd_diagnose(args) -> int:
    out = _outdir(args)
    arch = pool_archives(load_chain_archives(args.archive))
    if arch.model != "ddp":
        raise ValidationError("diagnostics are defined for ddp archives")
    table = load_protein_csv(args.data)
    design = _design_from_manifest(arch.manifest)
    estimate = dahl_point_estimate(arch.draws["labels"])
    diag = fit_diagnostics(arch, table.y, design, estimate.labels, make_rng(args.seed))
    np.savetxt(out / "residuals.csv",
               np.column_stack([diag.residual_sample, diag.standardized_residuals]),
               fmt=FLOAT_FMT, delimiter=",", header="residual,standardized", comments="")
    z = np.sort(diag.standardized_residuals)
    n = z.size
    from scipy import stats as sstats

    theo = sstats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    np.savetxt(out / "qq.csv", np.column_stack([theo, z]), fmt=FLOAT_FMT,
               delimiter=",", header="normal_quantile,residual_quantile", comments="")
    _write_json(out / "r2.json", {
        "r2_per_cluster": diag.r2_per_cluster.tolist(),
        "mean_r2": float(diag.r2_per_cluster.mean()),
        "k_star": int(diag.r2_per_cluster.size),
    })
    print(f"diagnostics written to {out}: mean R^2 = {diag.r2_per_cluster.mean():.3f} "
          f"over {diag.r2_per_cluster.size} clusters")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sepex",
        description="Separately exchangeable Bayesian nonparametric models: "
                    "nested-partition mixtures and DDP spline regression.",
    )
    parser.add_argument("--version", action="version", version=f"sepex {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, chains=False):
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="TOML/JSON config file")
        if chains:
            p.add_argument("--chains", type=int, default=1,
                           help="independent chains (separate RNG streams)")

    p = sub.add_parser("simulate", help="write synthetic benchmark data")
    p.add_argument("--model", choices=("protein", "nested"), required=True)
    p.add_argument("--subjects", type=int)
    p.add_argument("--proteins", type=int)
    p.add_argument("--otus", type=int)
    p.add_argument("--separation", type=float, default=None,
                   help="nested only: atom spacing in sd units")
    common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit-nested", help="fit the nested-partition mixture")
    p.add_argument("--data", required=True, help="OTU CSV (counts or values)")
    p.add_argument("--input-format", choices=("counts", "values"), default="counts")
    p.add_argument("--normalize", choices=("rel_freq", "avg_library", "none"))
    p.add_argument("--log-transform", action="store_true", default=None)
    p.add_argument("--iters", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--freeze-subjects",
                   help="CSV row of subject labels to condition on")
    common(p, chains=True)
    p.set_defaults(func=_cmd_fit_nested)

    p = sub.add_parser("fit-ddp", help="fit the DDP spline regression")
    p.add_argument("--data", required=True, help="long-format protein CSV")
    p.add_argument("--iters", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--freeze-labels",
                   help="CSV row of protein labels to condition on")
    common(p, chains=True)
    p.set_defaults(func=_cmd_fit_ddp)

    p = sub.add_parser("summarize", help="partition point estimate and co-clustering")
    p.add_argument("--archive", required=True)
    p.add_argument("--chain", type=int, help="use one chain instead of pooling")
    common(p)
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("rank", help="quantile ranking of slope differences")
    p.add_argument("--archive", required=True)
    p.add_argument("--c", type=float, default=0.975, help="quantile threshold")
    common(p)
    p.set_defaults(func=_cmd_rank)

    p = sub.add_parser("check-exch", help="Monte Carlo exchangeability checks")
    p.add_argument("--draws", type=int, default=100_000)
    common(p)
    p.set_defaults(func=_cmd_check_exch)

    p = sub.add_parser("diagnose", help="fit diagnostics: residuals, R^2, Q-Q data")
    p.add_argument("--archive", required=True)
    p.add_argument("--data", required=True, help="long-format protein CSV")
    common(p)
    p.set_defaults(func=_cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
