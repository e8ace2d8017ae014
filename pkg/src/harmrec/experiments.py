"""Experiment orchestration: policy comparison across users, parameter
sweeps, trajectory-versus-fixed-point convergence, and the alternating
failure demonstration.

Per (user, policy) cells run independently: a failing cell is recorded and
skipped, never aborting the batch, and the failure count is surfaced so
the CLI can signal partial success.  All randomness flows through explicit
seeds, so two runs with the same inputs produce identical reports.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np

from .baselines import (
    alternating_optimization,
    alternating_trap_instance,
    static_optimal_policy,
    uniform_policy,
)
from .errors import ConfigurationError, HarmrecError
from .dynamics import simulate_evolution, solve_stationary
from .model import (
    BoundedPolicy,
    IndependentPolicy,
    click_and_harm_probs,
    selection_probs,
    subset_menu,
    with_params,
)
from .optimize import OptimizeConfig, multi_start

POLICY_FAMILIES = ("grad", "alt", "u0", "unif")
SWEEP_AXES = ("lambda", "beta", "c", "alpha_ratio", "k")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "bounded"
    optimizer: OptimizeConfig = field(default_factory=OptimizeConfig)
    eval_tol: float = 1e-9
    eval_max_iter: int = 400
    traj_tol_inf: float = 1e-3
    traj_max_steps: int = 2000
    workers: int = 1
    n_samples: int | None = None
    policies: tuple = POLICY_FAMILIES

    def __post_init__(self):
        if self.kind not in ("bounded", "independent"):
            raise ConfigurationError(f"unknown policy class {self.kind!r}")
        unknown = set(self.policies) - set(POLICY_FAMILIES)
        if unknown:
            raise ConfigurationError(f"unknown policy families {sorted(unknown)}")


@dataclass
class ExperimentReport:
    rows: list                 # per (user, policy) metric dicts
    summary: list              # per policy mean/std aggregates
    failures: int
    meta: dict = field(default_factory=dict)

    def as_dict(self):
        return {"rows": self.rows, "summary": self.summary,
                "failures": self.failures, "meta": self.meta}


def _policy_for(instance, family, config, extra_starts=()):
    if family == "grad":
        return multi_start(instance, config.kind, config.optimizer,
                           extra_starts=extra_starts).best_policy
    if family == "alt":
        policy, _ = alternating_optimization(
            instance, kind=config.kind,
            solve_tol=config.optimizer.solve_tol,
            solve_max_iter=config.optimizer.solve_max_iter)
        return policy
    if family == "u0":
        return static_optimal_policy(instance, kind=config.kind)
    if family == "unif":
        return uniform_policy(instance, kind=config.kind)
    raise ConfigurationError(f"unknown policy family {family!r}")


def _metrics_at_stationary(instance, policy, config):
    rng = None if config.n_samples is None \
        else np.random.default_rng(config.optimizer.sample_seed)
    result = solve_stationary(instance, policy, tol=config.eval_tol,
                              max_iter=config.eval_max_iter,
                              n_samples=config.n_samples, rng=rng)
    p_clk, p_h = click_and_harm_probs(instance, policy, result.u_bar,
                                      n_samples=config.n_samples, rng=rng)
    return {
        "f": p_clk - instance.params.lam * p_h,
        "p_clk": p_clk,
        "p_h": p_h,
        "residual": result.residual,
        "converged": result.converged,
    }, result


def _compare_one_user(args):
    user, instance, config, warm = args
    rows = []
    policies = {}
    for family in config.policies:
        row = {"user": user, "policy": family}
        try:
            extra = ()
            if family == "grad" and warm is not None:
                extra = (("warm", warm),)
            policy = _policy_for(instance, family, config, extra_starts=extra)
            metrics, _ = _metrics_at_stationary(instance, policy, config)
            row.update(metrics)
            row["error"] = ""
            policies[family] = policy
        except HarmrecError as exc:
            row.update({"f": np.nan, "p_clk": np.nan, "p_h": np.nan,
                        "residual": np.nan, "converged": False})
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows, policies


def run_compare(instances, config=None, warm_policies=None):
    """Evaluate every policy family on every user at its stationary profile.

    Returns per-cell rows, per-policy mean/std aggregates, and per-user
    objective differences relative to the gradient policy.
    """
    config = config or ExperimentConfig()
    tasks = [(user, inst, config,
              None if warm_policies is None else warm_policies.get(user))
             for user, inst in enumerate(instances)]
    if config.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_compare_one_user, tasks))
    else:
        outcomes = [_compare_one_user(t) for t in tasks]

    rows = [row for user_rows, _ in outcomes for row in user_rows]
    policies = {user: pols for user, (_, pols) in enumerate(outcomes)}
    failures = sum(1 for row in rows if row["error"])

    summary = []
    for family in config.policies:
        good = [row for row in rows if row["policy"] == family and not row["error"]]
        if good:
            fs = np.array([row["f"] for row in good])
            clks = np.array([row["p_clk"] for row in good])
            phs = np.array([row["p_h"] for row in good])
            summary.append({
                "policy": family, "n": len(good),
                "f_mean": float(fs.mean()), "f_std": float(fs.std()),
                "p_clk_mean": float(clks.mean()), "p_clk_std": float(clks.std()),
                "p_h_mean": float(phs.mean()), "p_h_std": float(phs.std()),
            })
        else:
            summary.append({"policy": family, "n": 0, "f_mean": np.nan,
                            "f_std": np.nan, "p_clk_mean": np.nan,
                            "p_clk_std": np.nan, "p_h_mean": np.nan,
                            "p_h_std": np.nan})

    report = ExperimentReport(rows=rows, summary=summary, failures=failures,
                              meta={"n_users": len(instances), "kind": config.kind})
    report.meta["diffs"] = _objective_diffs(rows, config)
    report.meta["policies"] = policies
    return report


def _objective_diffs(rows, config):
    """Per-user f(policy) - f(grad), the per-user difference distribution."""
    by_user = {}
    for row in rows:
        by_user.setdefault(row["user"], {})[row["policy"]] = row
    diffs = []
    for user in sorted(by_user):
        cells = by_user[user]
        grad = cells.get("grad")
        if grad is None or grad["error"]:
            continue
        for family in config.policies:
            if family == "grad" or family not in cells or cells[family]["error"]:
                continue
            diffs.append({"user": user, "policy": family,
                          "f_diff": cells[family]["f"] - grad["f"]})
    return diffs


# ---------------------------------------------------------------------------
# Convergence of the mean-field trajectory to the fixed point
# ---------------------------------------------------------------------------


def run_convergence(instances, config=None, stochastic_seed=None):
    """Distance between the simulated trajectory limit and the fixed point.

    With `stochastic_seed` set, a single-draw simulated trajectory (items
    sampled, not averaged) is added per cell as a diagnostic column.
    """
    config = config or ExperimentConfig()
    rows = []
    failures = 0
    for user, instance in enumerate(instances):
        for family in config.policies:
            row = {"user": user, "policy": family}
            try:
                policy = _policy_for(instance, family, config)
                result = solve_stationary(instance, policy, tol=config.eval_tol,
                                          max_iter=config.eval_max_iter)
                traj = simulate_evolution(instance, policy,
                                          tol_inf=config.traj_tol_inf,
                                          max_steps=config.traj_max_steps)
                row["distance"] = float(np.linalg.norm(traj.final - result.u_bar))
                row["steps"] = len(traj.profiles) - 1
                row["trajectory_converged"] = traj.converged_at is not None
                if stochastic_seed is not None:
                    draw = _stochastic_trajectory(
                        instance, policy,
                        seed=stochastic_seed + 7919 * user,
                        max_steps=config.traj_max_steps)
                    row["stochastic_distance"] = float(
                        np.linalg.norm(draw - result.u_bar))
                row["error"] = ""
            except HarmrecError as exc:
                row.update({"distance": np.nan, "steps": 0,
                            "trajectory_converged": False,
                            "error": f"{type(exc).__name__}: {exc}"})
                failures += 1
            rows.append(row)
    return ExperimentReport(rows=rows, summary=[], failures=failures,
                            meta={"n_users": len(instances)})


def _stochastic_trajectory(instance, policy, seed, max_steps=2000, tol_inf=1e-4,
                           patience=50):
    """Seeded single-draw profile walk: one item consumed per step.

    Diagnostic only; the mean-field trajectory is the modelled object.
    Stops once `patience` consecutive steps stay small in sup norm.
    """
    rng = np.random.default_rng(seed)
    u = np.array(instance.u0, dtype=float)
    params = instance.params
    harmful = instance.catalog.harmful_mask
    calm = 0
    for _ in range(max_steps):
        p = selection_probs(instance, policy, u)
        v = int(rng.choice(instance.n_items, p=np.clip(p, 0, None) / np.clip(p, 0, None).sum()))
        alpha = params.alpha_h if harmful[v] else params.alpha_nh
        step = alpha * (instance.catalog.items[v] - u) + params.beta * (instance.u0 - u)
        u = u + step
        calm = calm + 1 if np.max(np.abs(step)) < tol_inf else 0
        if calm >= patience:
            break
    return u


# ---------------------------------------------------------------------------
# Parameter sweeps
# ---------------------------------------------------------------------------


def _apply_axis(instance, axis, value, base, k_mode):
    if axis == "lambda":
        return with_params(instance, lam=float(value))
    if axis == "beta":
        return with_params(instance, beta=float(value))
    if axis == "c":
        return with_params(instance, c=float(value))
    if axis == "alpha_ratio":
        return with_params(instance, alpha_h=float(value) * instance.params.alpha_nh)
    if axis == "k":
        k = int(value)
        if k_mode == "fixed-ratio":
            scale = k / base.params.k
            return with_params(instance, k=k, c=base.params.c * scale)
        return with_params(instance, k=k)
    raise ConfigurationError(f"unknown sweep axis {axis!r} (pick from {SWEEP_AXES})")


def _lift_bounded_policy(old_policy, old_instance, new_instance):
    """Re-express a subset-table policy on a larger-k menu (zero padding)."""
    tables = []
    for i, table in enumerate(old_policy.tables):
        old_menu = subset_menu(old_instance.candidates.sets[i], old_instance.params.k)
        new_menu = new_instance.menu(i)
        lifted = np.zeros(len(new_menu))
        index = {subset: j for j, subset in enumerate(new_menu)}
        for subset, weight in zip(old_menu, table):
            lifted[index[subset]] = weight
        tables.append(lifted)
    return BoundedPolicy(tuple(tables))


def run_sweep(instances, axis, grid, config=None, k_mode="fixed-c"):
    """Re-run the comparison at every grid value of one parameter axis.

    The k axis supports "fixed-c" and "fixed-ratio" (c grows proportionally
    with k) modes, and chains each user's previous gradient policy in as a
    warm start so enlarging the feasible set never loses ground.
    """
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r} (pick from {SWEEP_AXES})")
    if k_mode not in ("fixed-c", "fixed-ratio"):
        raise ConfigurationError(f"unknown k mode {k_mode!r}")
    if len(list(grid)) == 0:
        raise ConfigurationError("sweep grid is empty")
    config = config or ExperimentConfig()
    all_rows, summaries = [], []
    failures = 0
    warm = None
    prev_instances = None
    for value in grid:
        current = [_apply_axis(inst, axis, value, inst, k_mode) for inst in instances]
        carried = None
        if warm is not None and axis == "k":
            carried = {}
            for user, policy in warm.items():
                if isinstance(policy, IndependentPolicy):
                    carried[user] = policy   # same parameterization, wider budget
                else:
                    carried[user] = _lift_bounded_policy(
                        policy, prev_instances[user], current[user])
        point = run_compare(current, config, warm_policies=carried)
        for row in point.rows:
            row["axis"] = axis
            row["value"] = float(value)
            all_rows.append(row)
        for s in point.summary:
            s["axis"] = axis
            s["value"] = float(value)
            summaries.append(s)
        failures += point.failures
        warm = {user: pols["grad"] for user, pols in point.meta["policies"].items()
                if "grad" in pols}
        prev_instances = current
    return ExperimentReport(rows=all_rows, summary=summaries, failures=failures,
                            meta={"axis": axis, "grid": [float(v) for v in grid],
                                  "k_mode": k_mode})


# ---------------------------------------------------------------------------
# Alternating-failure demonstration
# ---------------------------------------------------------------------------


def run_counterexample(lambda_grid, b1=53.0, b2=5.0, config=None):
    """Objective gap between the gradient policy and alternating on the
    trap instance, per harm penalty, with a linear fit of gap vs lambda."""
    config = config or ExperimentConfig(
        optimizer=OptimizeConfig(solve_max_iter=400))
    lambda_grid = [float(v) for v in lambda_grid]
    if not lambda_grid:
        raise ConfigurationError("lambda grid is empty")
    rows = []
    alt_tables = []
    for lam in lambda_grid:
        instance = alternating_trap_instance(b1=b1, b2=b2, lam=lam)
        alt_policy, trace = alternating_optimization(
            instance, kind="bounded",
            solve_tol=config.optimizer.solve_tol,
            solve_max_iter=config.optimizer.solve_max_iter)
        alt_metrics, _ = _metrics_at_stationary(instance, alt_policy, config)
        grad = multi_start(instance, "bounded", config.optimizer)
        grad_metrics, _ = _metrics_at_stationary(instance, grad.best_policy, config)
        rows.append({
            "lambda": lam,
            "f_grad": grad_metrics["f"], "f_alt": alt_metrics["f"],
            "gap": grad_metrics["f"] - alt_metrics["f"],
            "p_h_grad": grad_metrics["p_h"], "p_h_alt": alt_metrics["p_h"],
            "p_clk_grad": grad_metrics["p_clk"], "p_clk_alt": alt_metrics["p_clk"],
            "alt_converged": trace.converged,
        })
        alt_tables.append(np.concatenate([t for t in alt_policy.tables]))
    gaps = np.array([row["gap"] for row in rows])
    lams = np.array(lambda_grid)
    slope, intercept = np.polyfit(lams, gaps, 1)
    fitted = slope * lams + intercept
    ss_res = float(np.sum((gaps - fitted) ** 2))
    ss_tot = float(np.sum((gaps - gaps.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    alt_identical = all(np.array_equal(alt_tables[0], t) for t in alt_tables)
    meta = {"slope": float(slope), "intercept": float(intercept),
            "r_squared": float(r_squared), "alt_policy_identical": alt_identical,
            "b1": b1, "b2": b2}
    return ExperimentReport(rows=rows, summary=[], failures=0, meta=meta)
