"""Command-line front end.

Subcommands: generate, fit-mf, assemble, calibrate-c, compare, sweep,
convergence, counterexample, grad-check.  Reports land in --out-dir as CSV
(tabular) plus JSON (full payloads); identical seeds and configs produce
byte-identical files.

Exit codes: 0 full success, 1 configuration error, 2 partial failures
(some user/policy cells failed, or a gradient gate exceeded its threshold).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .baselines import uniform_policy
from .data import (
    DEFAULT_PARAMS,
    MfModel,
    RatingsTable,
    SyntheticSpec,
    assemble_instances,
    calibrate_c,
    fit_mf,
    generate_batch,
    load_harm_labels,
)
from .errors import ConfigurationError, HarmrecError
from .experiments import (
    ExperimentConfig,
    run_compare,
    run_convergence,
    run_counterexample,
    run_sweep,
)
from .gradients import gradient_check
from .model import DynamicsParams
from .optimize import OptimizeConfig
from .serialize import load_instances, save_instances, save_json

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2


def _fmt(value):
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, float) and np.isnan(value):
        return "nan"
    return str(value)


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(col, "")) for col in columns])


def _parse_grid(text):
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad grid {text!r}: {exc}") from exc


def _params_from_args(args):
    return DynamicsParams(alpha_h=args.alpha_h, alpha_nh=args.alpha_nh,
                          beta=args.beta, c=args.c, lam=args.lam, k=args.k)


def _experiment_config(args):
    if args.config:
        optimizer = OptimizeConfig.from_file(args.config)
    else:
        optimizer = OptimizeConfig(seed=args.seed)
    n_samples = args.samples if args.policy_class == "independent" else None
    return ExperimentConfig(kind=args.policy_class, optimizer=optimizer,
                            workers=args.workers, n_samples=n_samples)


def _out(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    spec = SyntheticSpec(n_items=args.items, n_harmful=args.harmful, dim=args.dim,
                         k=args.k, alpha_h=args.alpha_h, alpha_nh=args.alpha_nh,
                         beta=args.beta, c=args.c, lam=args.lam,
                         lipschitz_margin=args.margin, n_sets=args.n_sets)
    batch = generate_batch(spec, n_users=args.users, seed=args.seed)
    path = _out(args, "instances.json")
    save_instances(path, batch)
    print(f"wrote {len(batch)} instances to {path}")
    return EXIT_OK


def cmd_fit_mf(args):
    table = RatingsTable.from_csv(args.ratings)
    model = fit_mf(table, epochs=args.epochs, lr=args.lr, reg=args.reg,
                   latent=args.latent, seed=args.seed)
    path = _out(args, "mf_model.json")
    save_json(path, model.to_dict())
    print(f"fit {table.n_users} users x {table.n_items} items; "
          f"train RMSE {model.train_rmse:.4f}; model at {path}")
    return EXIT_OK


def cmd_assemble(args):
    with open(args.model) as fh:
        model = MfModel.from_dict(json.load(fh))
    labels = load_harm_labels(args.labels)
    ratings = RatingsTable.from_csv(args.ratings) if args.ratings else None
    batch = assemble_instances(model, labels, top_items=args.top_items,
                               top_users=args.top_users,
                               params=_params_from_args(args), ratings=ratings,
                               lipschitz_margin=args.margin)
    path = _out(args, "instances.json")
    save_instances(path, batch)
    print(f"wrote {len(batch)} instances to {path}")
    return EXIT_OK


def cmd_calibrate(args):
    instances = load_instances(args.instances)
    result = calibrate_c(instances, _parse_grid(args.c_grid),
                         sample_size=args.sample_size, seed=args.seed,
                         kind=args.policy_class)
    write_csv(_out(args, "calibration.csv"), result.as_rows(),
              ["c", "p_clk_alt", "p_h_alt", "p_clk_unif", "p_h_unif"])
    save_json(_out(args, "calibration.json"), {"c": result.c, "rows": result.as_rows()})
    print(f"calibrated c = {result.c}")
    return EXIT_OK


COMPARE_COLUMNS = ["user", "policy", "f", "p_clk", "p_h", "residual",
                   "converged", "error"]
SUMMARY_COLUMNS = ["policy", "n", "f_mean", "f_std", "p_clk_mean", "p_clk_std",
                   "p_h_mean", "p_h_std"]


def cmd_compare(args):
    instances = load_instances(args.instances)
    report = run_compare(instances, _experiment_config(args))
    write_csv(_out(args, "compare.csv"), report.rows, COMPARE_COLUMNS)
    write_csv(_out(args, "compare_summary.csv"), report.summary, SUMMARY_COLUMNS)
    write_csv(_out(args, "compare_diffs.csv"), report.meta["diffs"],
              ["user", "policy", "f_diff"])
    payload = report.as_dict()
    payload["meta"].pop("policies", None)
    save_json(_out(args, "compare.json"), payload)
    print(f"compared {len(instances)} users; failures: {report.failures}")
    return EXIT_PARTIAL if report.failures else EXIT_OK


def cmd_sweep(args):
    instances = load_instances(args.instances)
    report = run_sweep(instances, args.axis, _parse_grid(args.grid),
                       _experiment_config(args), k_mode=args.k_mode)
    write_csv(_out(args, "sweep.csv"), report.rows,
              ["axis", "value"] + COMPARE_COLUMNS)
    write_csv(_out(args, "sweep_summary.csv"), report.summary,
              ["axis", "value"] + SUMMARY_COLUMNS)
    save_json(_out(args, "sweep.json"), report.as_dict())
    print(f"swept {args.axis} over {report.meta['grid']}; failures: {report.failures}")
    return EXIT_PARTIAL if report.failures else EXIT_OK


def cmd_convergence(args):
    instances = load_instances(args.instances)
    stochastic_seed = args.seed if args.stochastic else None
    report = run_convergence(instances, _experiment_config(args),
                             stochastic_seed=stochastic_seed)
    columns = ["user", "policy", "distance", "steps", "trajectory_converged", "error"]
    if args.stochastic:
        columns.insert(3, "stochastic_distance")
    write_csv(_out(args, "convergence.csv"), report.rows, columns)
    save_json(_out(args, "convergence.json"), report.as_dict())
    print(f"convergence over {len(instances)} users; failures: {report.failures}")
    return EXIT_PARTIAL if report.failures else EXIT_OK


def cmd_counterexample(args):
    config = ExperimentConfig(
        kind="bounded",
        optimizer=OptimizeConfig(seed=args.seed, solve_max_iter=400),
        workers=args.workers)
    report = run_counterexample(_parse_grid(args.lambda_grid), b1=args.b1,
                                b2=args.b2, config=config)
    write_csv(_out(args, "counterexample.csv"), report.rows,
              ["lambda", "f_grad", "f_alt", "gap", "p_clk_grad", "p_clk_alt",
               "p_h_grad", "p_h_alt", "alt_converged"])
    save_json(_out(args, "counterexample.json"), report.as_dict())
    meta = report.meta
    print(f"gap slope {meta['slope']:.6g} (R^2 {meta['r_squared']:.4f}); "
          f"alternating policy identical across grid: {meta['alt_policy_identical']}")
    return EXIT_OK


def cmd_grad_check(args):
    instances = load_instances(args.instances)
    results = []
    worst = 0.0
    for idx, instance in enumerate(instances):
        policy = uniform_policy(instance, kind=args.policy_class)
        report = gradient_check(instance, policy)
        results.append({"instance": idx,
                        "fd_max_rel_err": report.fd_max_rel_err,
                        "passed": report.fd_max_rel_err <= args.threshold})
        worst = max(worst, report.fd_max_rel_err)
    save_json(_out(args, "gradcheck.json"),
              {"threshold": args.threshold, "worst": worst, "results": results})
    print(f"gradient check on {len(instances)} instances; worst relative "
          f"error {worst:.3e} (threshold {args.threshold:g})")
    return EXIT_OK if worst <= args.threshold else EXIT_PARTIAL


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def _add_param_flags(parser):
    parser.add_argument("--alpha-h", dest="alpha_h", type=float,
                        default=DEFAULT_PARAMS["alpha_h"])
    parser.add_argument("--alpha-nh", dest="alpha_nh", type=float,
                        default=DEFAULT_PARAMS["alpha_nh"])
    parser.add_argument("--beta", type=float, default=DEFAULT_PARAMS["beta"])
    parser.add_argument("--c", type=float, default=DEFAULT_PARAMS["c"])
    parser.add_argument("--lam", "--lambda", dest="lam", type=float,
                        default=DEFAULT_PARAMS["lam"])
    parser.add_argument("--k", type=int, default=DEFAULT_PARAMS["k"])


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default=None, help="optimizer config (.json/.toml)")
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--out-dir", default="out")
    shared.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    shared.add_argument("--policy-class", choices=("bounded", "independent"),
                        default="bounded")
    shared.add_argument("--samples", type=int, default=1024,
                        help="sample count for large independent-sampling sets")

    parser = argparse.ArgumentParser(
        prog="harmrec",
        description="Harm-aware recommendation policies under preference dynamics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[shared],
                       help="synthetic per-user instances")
    p.add_argument("--users", type=int, default=20)
    p.add_argument("--items", type=int, default=12)
    p.add_argument("--harmful", type=int, default=3)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--n-sets", type=int, default=1)
    _add_param_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit-mf", parents=[shared],
                       help="matrix factorization from a ratings CSV")
    p.add_argument("--ratings", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--reg", type=float, default=0.01)
    p.add_argument("--latent", type=int, default=10)
    p.set_defaults(func=cmd_fit_mf)

    p = sub.add_parser("assemble", parents=[shared],
                       help="per-user instances from an MF model and harm labels")
    p.add_argument("--model", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--ratings", default=None)
    p.add_argument("--top-items", type=int, default=100)
    p.add_argument("--top-users", type=int, default=100)
    p.add_argument("--margin", type=float, default=0.5)
    _add_param_flags(p)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("calibrate-c", parents=[shared],
                       help="pick c from a grid by the click-threshold rule")
    p.add_argument("--instances", required=True)
    p.add_argument("--c-grid", required=True)
    p.add_argument("--sample-size", type=int, default=10)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("compare", parents=[shared],
                       help="gradient vs alternating vs static vs uniform")
    p.add_argument("--instances", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", parents=[shared], help="parameter sweeps")
    p.add_argument("--instances", required=True)
    p.add_argument("--axis", required=True,
                   choices=("lambda", "beta", "c", "alpha_ratio", "k"))
    p.add_argument("--grid", required=True)
    p.add_argument("--k-mode", choices=("fixed-c", "fixed-ratio"), default="fixed-c")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("convergence", parents=[shared],
                       help="trajectory-to-fixed-point distances")
    p.add_argument("--instances", required=True)
    p.add_argument("--stochastic", action="store_true",
                   help="add a seeded single-draw trajectory diagnostic")
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("counterexample", parents=[shared],
                       help="alternating-failure construction and gap fit")
    p.add_argument("--b1", type=float, default=53.0)
    p.add_argument("--b2", type=float, default=5.0)
    p.add_argument("--lambda-grid", default="10,100,1000,10000")
    p.set_defaults(func=cmd_counterexample)

    p = sub.add_parser("grad-check", parents=[shared],
                       help="finite-difference gate on the objective gradient")
    p.add_argument("--instances", required=True)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HarmrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
