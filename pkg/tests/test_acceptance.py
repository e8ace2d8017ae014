"""Acceptance suite: ten binding criteria, one test per criterion.

Each test pins its tolerances inline, uses oracles independent of the code
paths under test, and prints a PASS line with the measured quantities once
its assertions hold.  Criteria with runtime caps assert those too.
"""

import itertools
import sys
import time

import numpy as np
import pytest

from harmrec.baselines import (
    alternating_optimization,
    top_k_policy,
)
from harmrec.data import SyntheticSpec, generate_batch, generate_synthetic
from harmrec.dynamics import (
    contraction_condition,
    fixed_point_map,
    rescale_to_contraction,
    solve_stationary,
)
from harmrec.experiments import ExperimentConfig, run_compare, run_convergence, run_counterexample, run_sweep
from harmrec.gradients import (
    fd_jacobian,
    fixed_point_jacobians,
    gradient_check,
    max_rel_err,
    multilinear_estimate_stats,
    multilinear_grad_estimate,
    selection_jacobian_u,
)
from harmrec.model import (
    flatten_policy,
    policy_from_flat,
    selection_probs,
    static_objective,
)
from harmrec.optimize import OptimizeConfig, project_capped_simplex, project_simplex

from helpers import dirac_policy, random_bounded_policy


def report(number, message):
    # sys.__stdout__ bypasses pytest capture so the per-criterion line is
    # visible in a plain `pytest -v` run as well.
    print(f"[ACCEPTANCE {number:2d}] PASS - {message}", file=sys.__stdout__)


# ---------------------------------------------------------------------------
# Criterion 1: gradient correctness on 50 seeded random instances
# ---------------------------------------------------------------------------


def test_criterion_01_gradient_correctness():
    start = time.monotonic()
    worst_total, worst_component = 0.0, 0.0
    for seed in range(50):
        rng = np.random.default_rng(10_000 + seed)
        spec = SyntheticSpec(
            n_items=int(rng.integers(3, 9)), n_harmful=int(rng.integers(0, 3)),
            dim=int(rng.integers(2, 5)), k=1,
            alpha_h=(0.1, 0.4), alpha_nh=(0.1, 0.5), beta=(0.1, 0.3),
            c=(0.5, 2.0), lam=float(rng.uniform(0.0, 20.0)),
            lipschitz_margin=0.5, n_sets=int(rng.integers(1, 3)))
        inst = generate_synthetic(spec, seed=20_000 + seed)
        policy = random_bounded_policy(rng, inst)

        full = gradient_check(inst, policy)
        worst_total = max(worst_total, full.fd_max_rel_err)
        assert full.fd_max_rel_err <= 1e-4

        res = solve_stationary(inst, policy, tol=1e-12, max_iter=1000)
        u = res.u_bar
        grad_u_f, grad_pi_f = fixed_point_jacobians(inst, policy, u)
        fd_u = fd_jacobian(lambda w: fixed_point_map(inst, policy, w), u)
        fd_pi = fd_jacobian(
            lambda x: fixed_point_map(inst, policy_from_flat(inst, x, "bounded"), u),
            flatten_policy(policy))
        dp_du = selection_jacobian_u(inst, policy, u)
        fd_dp = fd_jacobian(lambda w: selection_probs(inst, policy, w), u)
        for analytic, numeric in ((grad_u_f, fd_u), (grad_pi_f, fd_pi), (dp_du, fd_dp)):
            err = max_rel_err(analytic, numeric)
            worst_component = max(worst_component, err)
            assert err <= 1e-5
    elapsed = time.monotonic() - start
    assert elapsed < 120.0
    report(1, f"50 instances; end-to-end grad err {worst_total:.2e} <= 1e-4, "
              f"component err {worst_component:.2e} <= 1e-5, {elapsed:.1f}s < 120s")


# ---------------------------------------------------------------------------
# Criterion 2: fixed-point solver under the contraction certificate
# ---------------------------------------------------------------------------


def test_criterion_02_fixed_point_solver():
    start = time.monotonic()
    worst_iters = 0
    for seed in range(100):
        rng = np.random.default_rng(30_000 + seed)
        spec = SyntheticSpec(
            n_items=int(rng.integers(3, 10)), n_harmful=int(rng.integers(1, 3)),
            dim=int(rng.integers(2, 5)), k=1,
            alpha_h=(0.25, 0.45), alpha_nh=(0.05, 0.25), beta=(0.1, 0.3),
            c=(0.5, 2.0), lipschitz_margin=float(rng.uniform(0.3, 0.9)))
        inst = generate_synthetic(spec, seed=40_000 + seed)
        cert = contraction_condition(inst)
        assert cert.holds
        policy = random_bounded_policy(rng, inst)

        res = solve_stationary(inst, policy)   # defaults: tol 1e-3, max 10 iters
        assert res.converged and res.residual <= 1e-3 and res.iterations <= 10
        worst_iters = max(worst_iters, res.iterations)

        tight = solve_stationary(inst, policy, tol=1e-14, max_iter=500)
        u_star = tight.u_bar
        u = np.array(inst.u0)
        err0 = np.linalg.norm(u - u_star)
        for step in range(1, 8):
            u = fixed_point_map(inst, policy, u)
            assert np.linalg.norm(u - u_star) <= cert.lipschitz ** step * err0 + 1e-12
    elapsed = time.monotonic() - start
    assert elapsed < 30.0
    report(2, f"100 instances converge <= 1e-3 within 10 iterations "
              f"(max seen {worst_iters}) and obey the geometric envelope; "
              f"{elapsed:.1f}s < 30s")


# ---------------------------------------------------------------------------
# Criterion 3: contraction soundness and rescaling
# ---------------------------------------------------------------------------


def test_criterion_03_contraction_soundness():
    total_ratios = 0
    for seed in range(20):
        rng = np.random.default_rng(50_000 + seed)
        spec = SyntheticSpec(
            n_items=int(rng.integers(3, 7)), n_harmful=1,
            dim=int(rng.integers(2, 4)), k=int(rng.integers(1, 4)),
            alpha_h=(0.25, 0.45), alpha_nh=(0.05, 0.25), beta=(0.1, 0.3),
            lipschitz_margin=float(rng.uniform(0.3, 0.95)))
        inst = generate_synthetic(spec, seed=60_000 + seed)
        cert = contraction_condition(inst)
        assert cert.holds
        for _ in range(50):
            policy = random_bounded_policy(rng, inst)
            u = rng.normal(size=inst.dim) * rng.uniform(0.05, 2.0)
            v = rng.normal(size=inst.dim) * rng.uniform(0.05, 2.0)
            gap = np.linalg.norm(u - v)
            if gap < 1e-9:
                continue
            ratio = np.linalg.norm(
                fixed_point_map(inst, policy, u) - fixed_point_map(inst, policy, v)) / gap
            total_ratios += 1
            assert ratio <= cert.lipschitz

        # Rescaling: inflate items so the condition fails while the
        # scale-invariant product ||u0|| * delta stays feasible, then
        # demand a strict certificate back.
        base = generate_synthetic(
            SyntheticSpec(n_items=5, n_harmful=1, dim=3,
                          alpha_h=0.35, alpha_nh=0.15, beta=0.2,
                          lipschitz_margin=0.5, u0_ratio=0.1),
            seed=70_000 + seed)
        from harmrec.model import CandidateCollection, Instance, ItemCatalog
        oversized = Instance(
            catalog=ItemCatalog(base.catalog.items * 3.0, base.catalog.harmful),
            candidates=CandidateCollection(base.candidates.sets, base.candidates.probs),
            params=base.params, u0=base.u0)
        assert not contraction_condition(oversized).holds
        rescaled, tau = rescale_to_contraction(oversized)
        assert contraction_condition(rescaled).holds
        before = oversized.catalog.items @ oversized.u0
        after = rescaled.catalog.items @ rescaled.u0
        assert np.max(np.abs(before - after)) <= 1e-12 * max(1.0, np.max(np.abs(before)))
    assert total_ratios >= 1000
    report(3, f"{total_ratios} sampled Lipschitz ratios all below the certificate; "
              f"rescaling restores the bound with score drift <= 1e-12")


# ---------------------------------------------------------------------------
# Criterion 4: frozen-profile optimality of top-k by enumeration
# ---------------------------------------------------------------------------


def test_criterion_04_topk_enumeration_oracle():
    start = time.monotonic()
    for seed in range(30):
        rng = np.random.default_rng(80_000 + seed)
        spec = SyntheticSpec(
            n_items=int(rng.integers(3, 7)), n_harmful=int(rng.integers(0, 3)),
            dim=int(rng.integers(2, 4)), k=int(rng.integers(1, 3)),
            alpha_h=0.3, alpha_nh=0.2, beta=0.2, c=(0.5, 2.0),
            lipschitz_margin=0.5, n_sets=int(rng.integers(1, 3)))
        inst = generate_synthetic(spec, seed=90_000 + seed)
        for u in (inst.u0, rng.normal(size=inst.dim) * 0.1):
            policy = top_k_policy(inst, u)
            menus = [inst.menu(i) for i in range(len(inst.candidates))]
            argmaxes = set()
            for lam in (0.0, 1.0, 100.0):
                best, best_choice = -np.inf, None
                for combo in itertools.product(*menus):
                    value = static_objective(inst, dirac_policy(inst, list(combo)),
                                             u, lam=lam)
                    if value > best:
                        best, best_choice = value, combo
                assert static_objective(inst, policy, u, lam=lam) >= best - 1e-12
                argmaxes.add(best_choice)
            assert len(argmaxes) == 1   # enumeration argmax is lambda-invariant
    elapsed = time.monotonic() - start
    assert elapsed < 60.0
    report(4, f"30 instances x 2 profiles x 3 lambdas: top-k matches exhaustive "
              f"enumeration, argmax lambda-invariant; {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# Criterion 5: alternating failure on the trap instance
# ---------------------------------------------------------------------------


def test_criterion_05_alternating_trap():
    lams = [10.0, 100.0, 1000.0, 10000.0]
    rep = run_counterexample(lams)
    assert rep.meta["alt_policy_identical"]
    # Alternating locks onto the v0 Dirac (menu order: (), (0,), (1,)).
    from harmrec.baselines import alternating_trap_instance
    inst = alternating_trap_instance(lam=10.0)
    alt_policy, _ = alternating_optimization(inst, solve_tol=1e-8, solve_max_iter=300)
    assert int(np.argmax(alt_policy.tables[0])) == inst.menu(0).index((0,))
    for row in rep.rows:
        assert row["gap"] > 0
        assert row["p_h_alt"] > 0.1
        assert row["p_h_grad"] < 0.01
    assert rep.meta["slope"] > 0
    assert rep.meta["r_squared"] > 0.99
    report(5, f"gap positive on lambda in {lams}, slope {rep.meta['slope']:.4f} > 0, "
              f"R^2 {rep.meta['r_squared']:.5f} > 0.99; "
              f"p_H(alt) {rep.rows[0]['p_h_alt']:.3f} > 0.1, "
              f"p_H(grad) {rep.rows[0]['p_h_grad']:.1e} < 0.01")


# ---------------------------------------------------------------------------
# Criterion 6: independent-sampling estimators within 3 standard errors
# ---------------------------------------------------------------------------


def enumerate_value_and_grad(weights, rho, c):
    """Vectorized brute-force multilinear value and partials."""
    m = len(weights)
    masks = (np.arange(2 ** m)[:, None] >> np.arange(m)) & 1
    probs = np.prod(np.where(masks == 1, rho, 1.0 - rho), axis=1)
    sums = masks @ weights
    values = sums / (sums + c)
    total = float(probs @ values)
    grads = np.empty(m)
    for j in range(m):
        with_j = sums + (1 - masks[:, j]) * weights[j]
        without_j = sums - masks[:, j] * weights[j]
        diff = with_j / (with_j + c) - without_j / (without_j + c)
        grads[j] = float(probs @ diff)
    return total, grads


def test_criterion_06_sampling_estimators():
    successes = 0
    for trial in range(100):
        rng = np.random.default_rng(100_000 + trial)
        m = int(rng.integers(4, 11))
        weights = rng.uniform(0.2, 2.0, size=m)
        rho = rng.uniform(0.1, 0.9, size=m)
        c = float(rng.uniform(0.5, 3.0))
        items = tuple(range(m))

        def z(subset):
            s = weights[list(subset)].sum() if subset else 0.0
            return s / (s + c)

        exact_value, exact_grad = enumerate_value_and_grad(weights, rho, c)
        est, se = multilinear_estimate_stats(items, rho, z, 1024,
                                             np.random.default_rng(200_000 + trial))
        grad, grad_se = multilinear_grad_estimate(items, rho, z, 1024,
                                                  np.random.default_rng(300_000 + trial),
                                                  with_stderr=True)
        value_ok = abs(est - exact_value) <= 3 * se + 1e-12
        grad_ok = np.all(np.abs(grad - exact_grad) <= 3 * grad_se + 1e-12)
        if value_ok and grad_ok:
            successes += 1
    assert successes >= 95
    report(6, f"{successes}/100 trials inside 3 standard errors (>= 95 required)")


# ---------------------------------------------------------------------------
# Criterion 7: projection oracles
# ---------------------------------------------------------------------------


def _simplex_oracle(x):
    m = len(x)
    best, best_d = None, np.inf
    for r in range(1, m + 1):
        for support in itertools.combinations(range(m), r):
            y = np.zeros(m)
            shift = (1.0 - x[list(support)].sum()) / r
            y[list(support)] = x[list(support)] + shift
            if np.any(y[list(support)] < -1e-12):
                continue
            d = np.sum((y - x) ** 2)
            if d < best_d:
                best, best_d = y, d
    return best


def _capped_oracle(x, k):
    m = len(x)
    best, best_d = None, np.inf
    for config in itertools.product((0, 1, 2), repeat=m):
        low = [i for i, s in enumerate(config) if s == 0]
        high = [i for i, s in enumerate(config) if s == 1]
        free = [i for i, s in enumerate(config) if s == 2]
        for sum_active in (False, True):
            y = np.zeros(m)
            y[high] = 1.0
            if sum_active:
                if free:
                    theta = (x[free].sum() + len(high) - k) / len(free)
                    y[free] = x[free] - theta
                elif len(high) != k:
                    continue
            else:
                y[free] = x[free]
            if np.any(y < -1e-12) or np.any(y > 1 + 1e-12) or y.sum() > k + 1e-9:
                continue
            d = np.sum((y - x) ** 2)
            if d < best_d:
                best, best_d = np.clip(y, 0.0, 1.0), d
    return best


def test_criterion_07_projection_oracles():
    rng = np.random.default_rng(400_000)
    worst = 0.0
    for _ in range(200):
        m = int(rng.integers(1, 7))
        x = rng.normal(scale=2.5, size=m)
        worst = max(worst, float(np.max(np.abs(
            project_simplex(x) - _simplex_oracle(x)))))
        k = int(rng.integers(1, m + 1))
        worst = max(worst, float(np.max(np.abs(
            project_capped_simplex(x, k) - _capped_oracle(x, k)))))
        assert worst <= 1e-9
    report(7, f"200 simplex + 200 capped projections match active-set "
              f"enumeration; worst gap {worst:.2e} <= 1e-9")


# ---------------------------------------------------------------------------
# Criteria 8-10 share one 20-user batch at the default experiment
# parameters (alpha_h 0.25, alpha_nh 0.5, beta 0.15, lambda 100, k 1); the
# catalog is kept small so the contraction certificate leaves room for
# policies to actually move the stationary profile.
# ---------------------------------------------------------------------------


BATCH_SPEC = SyntheticSpec(n_items=6, n_harmful=2, dim=3,
                           lipschitz_margin=0.9, u0_ratio=4.0)
BATCH_OPT = OptimizeConfig(max_iters=60, ftol=1e-6)


@pytest.fixture(scope="module")
def batch20():
    return generate_batch(BATCH_SPEC, n_users=20, seed=77)


@pytest.fixture(scope="module")
def compare_report(batch20):
    return run_compare(batch20, ExperimentConfig(optimizer=BATCH_OPT))


def test_criterion_08_policy_comparison_pattern(batch20, compare_report):
    rep = compare_report
    assert rep.failures == 0
    means = {s["policy"]: s["f_mean"] for s in rep.summary}
    assert means["grad"] >= means["alt"]
    assert means["grad"] >= means["u0"]
    assert means["grad"] >= means["unif"]
    by_user = {}
    for row in rep.rows:
        by_user.setdefault(row["user"], {})[row["policy"]] = row["f"]
    for cells in by_user.values():
        assert cells["grad"] >= max(cells["u0"], cells["unif"]) - 1e-9
    report(8, f"20 users: mean f grad {means['grad']:.4f} >= "
              f"alt {means['alt']:.4f}, u0 {means['u0']:.4f}, "
              f"unif {means['unif']:.4f}; per-user dominance holds")


def test_criterion_09_convergence_distances(batch20):
    rep = run_convergence(batch20, ExperimentConfig(optimizer=BATCH_OPT))
    assert rep.failures == 0
    worst = max(row["distance"] for row in rep.rows)
    assert worst <= 2e-3
    report(9, f"all {len(rep.rows)} (user, policy) trajectory-to-fixed-point "
              f"distances <= 2e-3 (worst {worst:.2e})")


def test_criterion_10_sweep_directionality(batch20):
    sub = batch20[:6]
    config = ExperimentConfig(optimizer=BATCH_OPT)

    lam_rep = run_sweep(sub, "lambda", [0.0, 10.0, 100.0], config)
    assert lam_rep.failures == 0
    for user in range(len(sub)):
        alt_rows = [r for r in lam_rep.rows
                    if r["policy"] == "alt" and r["user"] == user]
        for row in alt_rows[1:]:
            assert row["p_clk"] == pytest.approx(alt_rows[0]["p_clk"], abs=1e-12)
            assert row["p_h"] == pytest.approx(alt_rows[0]["p_h"], abs=1e-12)

    betas = [0.1, 0.2, 0.35]
    beta_rep = run_sweep(sub, "beta", betas, config)
    assert beta_rep.failures == 0
    gaps = []
    for value in betas:
        at = {s["policy"]: s["f_mean"] for s in beta_rep.summary
              if s["value"] == value}
        gaps.append(abs(at["grad"] - at["u0"]))
    slope = np.polyfit(betas, gaps, 1)[0]
    assert slope < 0

    indep = ExperimentConfig(kind="independent", optimizer=BATCH_OPT)
    k_rep = run_sweep(sub, "k", [1, 2, 3], indep)
    assert k_rep.failures == 0
    grad_clk = {s["value"]: s["p_clk_mean"] for s in k_rep.summary
                if s["policy"] == "grad"}
    values = sorted(grad_clk)
    for lo, hi in zip(values, values[1:]):
        assert grad_clk[hi] >= grad_clk[lo] - 1e-9
    report(10, f"lambda sweep leaves alternating metrics fixed; beta sweep "
               f"gap slope {slope:.3e} < 0; fixed-c k sweep p_CLK "
               f"{[round(grad_clk[v], 4) for v in values]} non-decreasing")
