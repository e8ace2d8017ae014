"""Analytic derivatives of the stationary-profile objective.

The objective f(pi) = p_CLK(pi, u*(pi)) - lambda p_H(pi, u*(pi)) evaluates
both terms at the stationary profile u*(pi), which has no closed form.  Its
gradient still does: writing U(pi, u) for the frozen-profile objective,

    grad_pi f = grad_pi U(pi, u*) + [J_pi u*]^T grad_u U(pi, u*),

and since u* satisfies F(pi, u*) - u* = 0 the implicit function theorem
gives the Jacobian of the stationary profile as

    J_pi u* = -(grad_u F - I)^{-1} grad_pi F,

computed here by one dense factorization of the d x d system reused across
all policy coordinates.  F factors as G(p(pi, u)), so its two Jacobians
assemble by the chain rule from

    dG_i/dp_v   = alpha_v (v_i - G_i(p)) / (beta + sum_v' alpha_v' p_v'),
    dp_v/du_j   = E_{C,E}[ dp_{v|E}/du_j ],
    dp_v/dtheta = p_C * p_{v|E}                      (subset-table coords)
                  p_C * E[p_{v|E+w} - p_{v|E-w}]     (inclusion marginals),

with the per-set partials obtained from ds_v/du = v s_v.  Everything is a
rational function of scores, so all expressions extend smoothly off the
feasible polytope; that extension is exactly what the finite-difference
oracles probe.

For inclusion-marginal policies every expectation over the recommended set
is either enumerated exactly (small sets) or replaced by the multilinear
sampling estimators at the bottom of this module; one shared sample of
subsets per candidate set keeps the report internally consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, IFTSolveError
from .dynamics import profile_update, solve_stationary
from .model import (
    _check_policy_shape,
    _g,
    flatten_policy,
    policy_dim,
    policy_from_flat,
    recommendation_support,
    scores,
    static_objective,
)

IFT_CONDITION_LIMIT = 1e12
FD_STEP_SCALE = 1e-5


@dataclass(frozen=True)
class GradientReport:
    """Gradient of the stationary objective plus its building blocks."""

    grad_f: np.ndarray           # (m,)
    jac_ubar: np.ndarray         # (d, m)
    grad_u_F: np.ndarray         # (d, d)
    grad_pi_F: np.ndarray        # (d, m)
    fd_max_rel_err: float | None = None

    def as_dict(self):
        return {
            "grad_f": self.grad_f.tolist(),
            "jac_ubar": self.jac_ubar.tolist(),
            "grad_u_F": self.grad_u_F.tolist(),
            "grad_pi_F": self.grad_pi_F.tolist(),
            "fd_max_rel_err": self.fd_max_rel_err,
        }


class UtilityGradients(NamedTuple):
    grad_pi_pclk: np.ndarray
    grad_u_pclk: np.ndarray
    grad_pi_ph: np.ndarray
    grad_u_ph: np.ndarray
    p_clk: float
    harm_ratio: float


# ---------------------------------------------------------------------------
# Per-profile context and per-subset statistics
# ---------------------------------------------------------------------------


class _ProfileContext:
    """Score-derived quantities shared by every subset at a fixed profile."""

    def __init__(self, instance, u):
        self.instance = instance
        self.u = np.asarray(u, dtype=float)
        self.items = instance.catalog.items
        self.c = instance.params.c
        self.s = scores(instance, u)
        self.s_omega = float(self.s.sum())
        self.w_omega = (self.s @ self.items) / self.s_omega        # (d,)
        harmful = sorted(instance.catalog.harmful)
        self.harmful = harmful
        if harmful:
            s_h = float(self.s[harmful].sum())
            self.harm_ratio = s_h / self.s_omega
            self.dharm_ratio_du = (
                self.s[harmful] @ self.items[harmful]) / self.s_omega \
                - self.harm_ratio * self.w_omega
        else:
            self.harm_ratio = 0.0
            self.dharm_ratio_du = np.zeros(instance.dim)
        self._cache = {}

    def subset(self, subset):
        """(p_cond, dp_cond/du, g, g' * ds_E/du) for one recommended set."""
        key = subset
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        items, s, c = self.items, self.s, self.c
        idx = list(subset)
        s_e = float(s[idx].sum()) if idx else 0.0
        g = _g(s_e, c)
        denom_e = s_e + c
        if idx:
            w_e = (s[idx] @ items[idx]) / denom_e                   # (d,)
            ds_e_du = s[idx] @ items[idx]                           # (d,)
        else:
            w_e = np.zeros(items.shape[1])
            ds_e_du = np.zeros(items.shape[1])
        gprime_ds = (c / denom_e ** 2) * ds_e_du

        t2 = (c / denom_e) / self.s_omega * s                       # organic route
        p_cond = t2.copy()
        dp_cond = t2[:, None] * (items - w_e - self.w_omega)
        if idx:
            t1 = s[idx] / denom_e                                   # accepted route
            p_cond[idx] += t1
            dp_cond[idx] += t1[:, None] * (items[idx] - w_e)
        out = (p_cond, dp_cond, g, gprime_ds)
        self._cache[key] = out
        return out


def _policy_terms(instance, policy, u, n_samples=None, rng=None, exact=None,
                  with_param_grads=True):
    """Aggregate per-subset statistics over the policy's support.

    Returns (p, p_clk, dp_du, dpclk_du, dp_dtheta, dpclk_dtheta); the last
    two are None when `with_param_grads` is false.
    """
    _check_policy_shape(instance, policy)
    ctx = _ProfileContext(instance, u)
    n, d = instance.n_items, instance.dim
    m = policy_dim(instance, policy) if with_param_grads else 0
    p = np.zeros(n)
    dp_du = np.zeros((n, d))
    p_clk = 0.0
    dpclk_du = np.zeros(d)
    dp_dtheta = np.zeros((n, m)) if with_param_grads else None
    dpclk_dtheta = np.zeros(m) if with_param_grads else None

    col = 0
    for i, p_c in enumerate(instance.candidates.probs):
        subsets, weights = recommendation_support(instance, policy, i, n_samples, rng, exact)
        for subset, w in zip(subsets, weights):
            p_cond, dp_cond, g, gprime_ds = ctx.subset(subset)
            if w != 0.0:
                p += p_c * w * p_cond
                dp_du += p_c * w * dp_cond
                p_clk += p_c * w * g
                dpclk_du += p_c * w * gprime_ds
        if with_param_grads:
            if policy.kind == "bounded":
                for subset in subsets:
                    p_cond, _, g, _ = ctx.subset(subset)
                    dp_dtheta[:, col] = p_c * p_cond
                    dpclk_dtheta[col] = p_c * g
                    col += 1
            else:
                cand = instance.candidates.sets[i]
                for j, v in enumerate(cand):
                    acc_p = np.zeros(n)
                    acc_g = 0.0
                    for subset, w in zip(subsets, weights):
                        base = set(subset)
                        plus = tuple(sorted(base | {v}))
                        minus = tuple(sorted(base - {v}))
                        # The difference is independent of v's own marginal,
                        # so reweighting by w stays unbiased (multilinearity).
                        p_plus, _, g_plus, _ = ctx.subset(plus)
                        p_minus, _, g_minus, _ = ctx.subset(minus)
                        acc_p += w * (p_plus - p_minus)
                        acc_g += w * (g_plus - g_minus)
                    dp_dtheta[:, col] = p_c * acc_p
                    dpclk_dtheta[col] = p_c * acc_g
                    col += 1
    return ctx, p, p_clk, dp_du, dpclk_du, dp_dtheta, dpclk_dtheta


# ---------------------------------------------------------------------------
# Component Jacobians
# ---------------------------------------------------------------------------


def profile_update_jacobian(instance, p):
    """d x n Jacobian of the interpolation map G with respect to p.

    Entry (i, v) equals alpha_v (v_i - G_i(p)) / (beta + sum alpha p); the
    quotient rule's expanded numerator alpha_v [sum_v' (v_i - v'_i)
    alpha_v' p_v' + beta (v_i - u0_i)] reduces to exactly this form.
    """
    p = np.asarray(p, dtype=float)
    alpha = instance.alpha_vector()
    denom = instance.params.beta + float(alpha @ p)
    g_val = profile_update(instance, p)   # raises on a zero denominator
    return (instance.catalog.items.T - g_val[:, None]) * (alpha / denom)[None, :]


def selection_jacobian_u(instance, policy, u, n_samples=None, rng=None, exact=None):
    """n x d Jacobian of the selection probabilities p_v in the profile."""
    _, _, _, dp_du, _, _, _ = _policy_terms(
        instance, policy, u, n_samples, rng, exact, with_param_grads=False)
    return dp_du


def fixed_point_jacobians(instance, policy, u, n_samples=None, rng=None, exact=None):
    """(grad_u F, grad_pi F): d x d and d x m Jacobians of the profile map."""
    _, p, _, dp_du, _, dp_dtheta, _ = _policy_terms(
        instance, policy, u, n_samples, rng, exact)
    dgdp = profile_update_jacobian(instance, p)
    return dgdp @ dp_du, dgdp @ dp_dtheta


def utility_gradients(instance, policy, u, n_samples=None, rng=None, exact=None):
    """Frozen-profile gradients of p_CLK and p_H in both arguments.

    grad_pi p_H = -(s_H / s_Omega) grad_pi p_CLK identically, because the
    policy only enters p_H through the click probability.
    """
    ctx, _, p_clk, _, dpclk_du, _, dpclk_dtheta = _policy_terms(
        instance, policy, u, n_samples, rng, exact)
    grad_pi_ph = -ctx.harm_ratio * dpclk_dtheta
    grad_u_ph = ctx.dharm_ratio_du * (1.0 - p_clk) - ctx.harm_ratio * dpclk_du
    return UtilityGradients(dpclk_dtheta, dpclk_du, grad_pi_ph, grad_u_ph,
                            p_clk, ctx.harm_ratio)


def stationary_jacobian(instance, policy, u_bar=None, n_samples=None, rng=None,
                        exact=None, solve_tol=1e-10, solve_max_iter=500):
    """d x m Jacobian of the stationary profile in the policy parameters.

    Solves (grad_u F - I) X = -grad_pi F; the d x d factorization is shared
    across all m right-hand sides.  Raises IFTSolveError when the system is
    numerically singular.
    """
    if u_bar is None:
        res = solve_stationary(instance, policy, tol=solve_tol, max_iter=solve_max_iter)
        if not res.converged:
            raise IFTSolveError(
                f"stationary solve did not converge (residual {res.residual:.3e})")
        u_bar = res.u_bar
    grad_u_f, grad_pi_f = fixed_point_jacobians(
        instance, policy, u_bar, n_samples, rng, exact)
    return _ift_solve(grad_u_f, grad_pi_f), grad_u_f, grad_pi_f, u_bar


def _ift_solve(grad_u_f, grad_pi_f):
    a = grad_u_f - np.eye(grad_u_f.shape[0])
    condition = np.linalg.cond(a)
    if not np.isfinite(condition) or condition > IFT_CONDITION_LIMIT:
        raise IFTSolveError(
            f"(grad_u F - I) is numerically singular (cond ~ {condition:.3e})",
            condition_estimate=float(condition))
    return np.linalg.solve(a, -grad_pi_f)


def objective_gradient(instance, policy, u_bar=None, n_samples=None, rng=None,
                       exact=None, solve_tol=1e-10, solve_max_iter=500):
    """Full gradient of f(pi) = U(pi, u*(pi)) with respect to the policy."""
    jac_ubar, grad_u_f, grad_pi_f, u_bar = stationary_jacobian(
        instance, policy, u_bar=u_bar, n_samples=n_samples, rng=rng, exact=exact,
        solve_tol=solve_tol, solve_max_iter=solve_max_iter)
    util = utility_gradients(instance, policy, u_bar, n_samples, rng, exact)
    lam = instance.params.lam
    grad_pi_u = util.grad_pi_pclk - lam * util.grad_pi_ph
    grad_u_u = util.grad_u_pclk - lam * util.grad_u_ph
    grad_f = grad_pi_u + jac_ubar.T @ grad_u_u
    return GradientReport(grad_f=grad_f, jac_ubar=jac_ubar,
                          grad_u_F=grad_u_f, grad_pi_F=grad_pi_f)


def pipeline_value(instance, flat_policy, kind, solve_tol=1e-12, solve_max_iter=1000):
    """f evaluated end to end from a flat parameter vector (solver inside)."""
    pol = policy_from_flat(instance, flat_policy, kind)
    res = solve_stationary(instance, pol, tol=solve_tol, max_iter=solve_max_iter)
    return static_objective(instance, pol, res.u_bar)


def gradient_check(instance, policy, solve_tol=1e-12, solve_max_iter=1000):
    """Objective gradient with its central-finite-difference comparison."""
    report = objective_gradient(instance, policy,
                                solve_tol=solve_tol, solve_max_iter=solve_max_iter)
    x0 = flatten_policy(policy)
    fd = fd_gradient(
        lambda x: pipeline_value(instance, x, policy.kind, solve_tol, solve_max_iter), x0)
    return replace(report, fd_max_rel_err=max_rel_err(report.grad_f, fd))


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def fd_gradient(fun, x, h_scale=FD_STEP_SCALE):
    """Central finite-difference gradient, h = h_scale * max(1, |x_j|)."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros(x.size)
    for j in range(x.size):
        h = h_scale * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        grad[j] = (fun(xp) - fun(xm)) / (2.0 * h)
    return grad


def fd_jacobian(fun, x, h_scale=FD_STEP_SCALE):
    """Central finite-difference Jacobian for vector-valued fun."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        h = h_scale * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def max_rel_err(candidate, reference, floor=1e-12):
    """Sup-norm error of `candidate` relative to the scale of `reference`."""
    candidate = np.asarray(candidate, dtype=float)
    reference = np.asarray(reference, dtype=float)
    scale = max(float(np.max(np.abs(reference))), floor)
    return float(np.max(np.abs(candidate - reference)) / scale)


# ---------------------------------------------------------------------------
# Multilinear (product-measure) estimators
# ---------------------------------------------------------------------------


def _draw_inclusion(items, rho, n_samples, rng):
    """Sampled subsets under independent inclusion; one uniform per
    (draw, item), columns in `items` order.  Tests that want common random
    numbers replicate exactly this layout."""
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (len(items),):
        raise ConfigurationError("one marginal per item required")
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    mask = rng.random((n_samples, len(items))) < rho
    return [tuple(it for it, b in zip(items, row) if b) for row in mask]


def multilinear_estimate(items, rho, z, n_samples, rng):
    """Unbiased sample mean of z(E) under independent inclusion."""
    items = tuple(items)
    cache: dict = {}
    total = 0.0
    for subset in _draw_inclusion(items, rho, n_samples, rng):
        val = cache.get(subset)
        if val is None:
            val = cache[subset] = float(z(subset))
        total += val
    return total / n_samples


def multilinear_estimate_stats(items, rho, z, n_samples, rng):
    """(mean, standard error) of the sampled multilinear value."""
    items = tuple(items)
    cache: dict = {}
    vals = np.empty(n_samples)
    for i, subset in enumerate(_draw_inclusion(items, rho, n_samples, rng)):
        val = cache.get(subset)
        if val is None:
            val = cache[subset] = float(z(subset))
        vals[i] = val
    stderr = float(vals.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else np.inf
    return float(vals.mean()), stderr


def multilinear_grad_estimate(items, rho, z, n_samples, rng, with_stderr=False):
    """Unbiased estimate of the multilinear-relaxation partials.

    Coordinate v averages z(E + v) - z(E - v) over the sampled subsets; the
    difference does not depend on v's own membership, so the full product
    sample serves every coordinate at once.
    """
    items = tuple(items)
    m = len(items)
    cache: dict = {}

    def z_cached(subset):
        val = cache.get(subset)
        if val is None:
            val = cache[subset] = float(z(subset))
        return val

    diffs = np.empty((n_samples, m))
    for i, subset in enumerate(_draw_inclusion(items, rho, n_samples, rng)):
        base = set(subset)
        for j, v in enumerate(items):
            plus = tuple(sorted(base | {v}))
            minus = tuple(sorted(base - {v}))
            diffs[i, j] = z_cached(plus) - z_cached(minus)
    grad = diffs.mean(axis=0)
    if with_stderr:
        stderr = diffs.std(axis=0, ddof=1) / np.sqrt(n_samples) if n_samples > 1 \
            else np.full(m, np.inf)
        return grad, stderr
    return grad


def multilinear_exact(items, rho, z):
    """Exact multilinear relaxation by enumeration (small sets only)."""
    items = tuple(items)
    rho = np.asarray(rho, dtype=float)
    m = len(items)
    if m > 20:
        raise ConfigurationError("exact multilinear enumeration capped at 20 items")
    total = 0.0
    for mask in range(2 ** m):
        bits = [(mask >> j) & 1 for j in range(m)]
        weight = float(np.prod([rho[j] if b else 1.0 - rho[j] for j, b in enumerate(bits)]))
        if weight == 0.0:
            continue
        total += weight * float(z(tuple(it for it, b in zip(items, bits) if b)))
    return total


def multilinear_grad_exact(items, rho, z):
    """Exact partials of the multilinear relaxation by enumeration."""
    items = tuple(items)
    rho = np.asarray(rho, dtype=float)
    grad = np.zeros(len(items))
    for j, v in enumerate(items):
        others = items[:j] + items[j + 1:]
        rho_others = np.concatenate([rho[:j], rho[j + 1:]])
        grad[j] = multilinear_exact(
            others, rho_others,
            lambda e, v=v: z(tuple(sorted(set(e) | {v}))) - z(tuple(e)))
    return grad


def pipage_round(items, rho, z, budget=None, atol=1e-12):
    """Round fractional inclusion marginals to an integral vector without
    decreasing the multilinear value.

    Repeatedly takes a fractional pair and moves mass along e_i - e_j to
    whichever endpoint evaluates at least as well (the relaxation is convex
    along that direction, so one endpoint always does).  A final lone
    fractional coordinate is pushed to whichever bound is feasible and
    better.  The sum never increases, so a budget satisfied on entry stays
    satisfied.
    """
    items = tuple(items)
    rho = np.asarray(rho, dtype=float).copy()

    def value(r):
        return multilinear_exact(items, r, z)

    def fractional():
        return [j for j in range(len(items)) if atol < rho[j] < 1.0 - atol]

    frac = fractional()
    while len(frac) >= 2:
        i, j = frac[0], frac[1]
        up = rho.copy()
        eps_up = min(1.0 - up[i], up[j])
        up[i] += eps_up
        up[j] -= eps_up
        down = rho.copy()
        eps_down = min(rho[i], 1.0 - rho[j])
        down[i] -= eps_down
        down[j] += eps_down
        rho = up if value(up) >= value(down) else down
        frac = fractional()
    if frac:
        j = frac[0]
        ceiling = rho.copy()
        ceiling[j] = 1.0
        floor = rho.copy()
        floor[j] = 0.0
        if budget is not None and ceiling.sum() > budget + atol:
            rho = floor
        else:
            rho = ceiling if value(ceiling) >= value(floor) else floor
    return np.clip(np.round(rho), 0.0, 1.0)
