"""Projected gradient ascent over the policy polytopes.

Both policy classes live on products of simple convex sets: one probability
simplex per candidate set (subset tables) or one box-with-budget
{0 <= rho <= 1, sum rho <= k} per candidate set (inclusion marginals).
Euclidean projection onto either factor is cheap, so the ascent loop is

    pi <- proj(pi + gamma * grad f(pi)),

with gamma found by backtracking until the candidate does not decrease the
objective; every accepted step re-solves the stationary profile, and the
acceptance rule makes the recorded objective non-decreasing by
construction.  The problem is non-convex, so a fixed list of starts (the
frozen-profile optimum, uniform, an interior uniform, and seeded random
points plain and interior) is run to completion and the best final value
wins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import tomli

from .baselines import static_optimal_policy, uniform_policy
from .errors import ConfigurationError, HarmrecError, OptimizationError
from .gradients import objective_gradient
from .dynamics import solve_stationary
from .model import (
    BoundedPolicy,
    IndependentPolicy,
    flatten_policy,
    policy_blocks,
    policy_from_flat,
    static_objective,
)

INTERIOR_SCALE = 0.01


@dataclass(frozen=True)
class OptimizeConfig:
    """Knobs for the ascent loop and the start list."""

    max_iters: int = 80
    step_init: float = 1.0
    backtrack: float = 0.5
    ftol: float = 1e-4
    step_floor: float = 1e-12
    n_random_starts: int = 3
    n_interior_starts: int = 3
    seed: int = 0
    solve_tol: float = 1e-8
    solve_max_iter: int = 200
    n_samples: int | None = None
    sample_seed: int = 0
    starts: tuple = ("u0", "uniform", "uniform_interior", "random", "random_interior")
    record_iterates: bool = False

    def __post_init__(self):
        if self.max_iters < 1 or self.step_init <= 0 or not 0 < self.backtrack < 1:
            raise ConfigurationError("max_iters, step_init, backtrack out of range")
        if self.ftol <= 0 or self.step_floor <= 0:
            raise ConfigurationError("ftol and step_floor must be positive")
        if not self.starts:
            raise ConfigurationError("at least one start is required")
        object.__setattr__(self, "starts", tuple(self.starts))

    @classmethod
    def from_file(cls, path):
        """Load from a .json or .toml file; unknown keys are rejected."""
        text = open(path, "rb").read()
        name = str(path)
        if name.endswith(".toml"):
            data = tomli.loads(text.decode())
        elif name.endswith(".json"):
            data = json.loads(text.decode())
        else:
            raise ConfigurationError(f"config file must be .json or .toml, got {name}")
        allowed = set(cls.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "starts" in data:
            data["starts"] = tuple(data["starts"])
        return cls(**data)


@dataclass
class StartTrace:
    """Ascent record for one start: (iteration, f, ||projected gradient||)."""

    label: str
    steps: list = field(default_factory=list)
    final_policy: object = None
    final_f: float = -np.inf
    failure: str | None = None
    iterates: list = field(default_factory=list)

    def as_dict(self):
        return {
            "label": self.label,
            "steps": [list(s) for s in self.steps],
            "final_f": self.final_f,
            "failure": self.failure,
        }


@dataclass
class OptimizeResult:
    best_policy: object
    best_f: float
    best_start: str
    traces: list

    def as_dict(self):
        return {
            "best_f": self.best_f,
            "best_start": self.best_start,
            "traces": [t.as_dict() for t in self.traces],
        }

    def trace_rows(self):
        """Flat (start, iteration, f, projected_grad_norm) rows for CSV."""
        rows = []
        for trace in self.traces:
            for iteration, value, pg_norm in trace.steps:
                rows.append({"start": trace.label, "iteration": iteration,
                             "f": value, "projected_grad_norm": pg_norm})
        return rows


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------


def project_simplex(x):
    """Euclidean projection onto {y >= 0, sum y = 1} (sort-based, O(m log m))."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0 or not np.all(np.isfinite(x)):
        raise ConfigurationError("projection input must be a finite 1-d vector")
    u = np.sort(x)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, x.size + 1)
    feasible = u + (1.0 - css) / ks > 0
    rho = int(np.nonzero(feasible)[0][-1])
    theta = (1.0 - css[rho]) / (rho + 1)
    return np.maximum(x + theta, 0.0)


def project_capped_simplex(x, k):
    """Euclidean projection onto {0 <= y <= 1, sum y <= k}.

    Clipping to the box settles it unless the budget binds; then the sum
    constraint is active and y = clip(x - theta, 0, 1) for the theta making
    the sum equal k, found by bisection on the monotone sum function.
    """
    x = np.asarray(x, dtype=float)
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    if x.ndim != 1 or x.size == 0 or not np.all(np.isfinite(x)):
        raise ConfigurationError("projection input must be a finite 1-d vector")
    y = np.clip(x, 0.0, 1.0)
    if y.sum() <= k:
        return y
    lo, hi = float(x.min() - 1.0), float(x.max())
    for _ in range(200):
        theta = 0.5 * (lo + hi)
        total = np.clip(x - theta, 0.0, 1.0).sum()
        if total > k:
            lo = theta
        else:
            hi = theta
    return np.clip(x - 0.5 * (lo + hi), 0.0, 1.0)


def project_policy(instance, policy):
    """Blockwise projection onto the feasible polytope of the policy class."""
    if isinstance(policy, BoundedPolicy):
        return BoundedPolicy(tuple(project_simplex(t) for t in policy.tables))
    if isinstance(policy, IndependentPolicy):
        k = instance.params.k
        return IndependentPolicy(tuple(project_capped_simplex(r, k)
                                       for r in policy.marginals))
    raise ConfigurationError(f"unknown policy type {type(policy).__name__}")


def projected_gradient_norm(instance, policy, grad):
    """Norm of the unit-step gradient mapping proj(pi + grad) - pi."""
    x = flatten_policy(policy)
    moved = project_policy(instance, policy_from_flat(instance, x + grad, policy.kind))
    return float(np.linalg.norm(flatten_policy(moved) - x))


# ---------------------------------------------------------------------------
# Ascent
# ---------------------------------------------------------------------------


class _EvalFailure(HarmrecError):
    pass


def _sampling_rng(config):
    # Fresh generator with a fixed seed per evaluation: common random
    # numbers across candidate policies keep sampled objectives comparable.
    return None if config.n_samples is None else np.random.default_rng(config.sample_seed)


def _evaluate(instance, policy, config, cache):
    key = (policy.kind, flatten_policy(policy).tobytes())
    hit = cache.get(key)
    if hit is not None:
        return hit
    result = solve_stationary(instance, policy, tol=config.solve_tol,
                              max_iter=config.solve_max_iter,
                              n_samples=config.n_samples,
                              rng=_sampling_rng(config))
    if not result.converged:
        raise _EvalFailure(f"stationary solve stalled at residual {result.residual:.3e}")
    value = static_objective(instance, policy, result.u_bar,
                             n_samples=config.n_samples, rng=_sampling_rng(config))
    cache[key] = (value, result)
    return value, result


def pga(instance, config, start_policy, label="start", cache=None):
    """Run projected gradient ascent from one feasible start.

    Solve failures at a candidate shrink the step like a rejected value;
    if the step floor is hit, the start ends at its current (still valid)
    iterate.  A failure before any evaluation marks the whole start failed.
    """
    cache = {} if cache is None else cache
    policy = project_policy(instance, start_policy)
    trace = StartTrace(label=label)
    try:
        f_cur, res_cur = _evaluate(instance, policy, config, cache)
    except (_EvalFailure, HarmrecError) as exc:
        trace.failure = f"start evaluation failed: {exc}"
        return trace
    if config.record_iterates:
        trace.iterates.append(policy)

    for iteration in range(1, config.max_iters + 1):
        try:
            report = objective_gradient(
                instance, policy, u_bar=res_cur.u_bar,
                n_samples=config.n_samples, rng=_sampling_rng(config),
                solve_tol=config.solve_tol, solve_max_iter=config.solve_max_iter)
        except HarmrecError as exc:
            trace.failure = f"gradient failed at iteration {iteration}: {exc}"
            break
        grad = report.grad_f
        if iteration == 1:
            trace.steps.append((0, f_cur, projected_gradient_norm(instance, policy, grad)))
        gamma = config.step_init
        accepted = None
        while gamma >= config.step_floor:
            flat = flatten_policy(policy) + gamma * grad
            candidate = project_policy(
                instance, policy_from_flat(instance, flat, policy.kind))
            try:
                f_cand, res_cand = _evaluate(instance, candidate, config, cache)
            except _EvalFailure:
                gamma *= config.backtrack
                continue
            if f_cand >= f_cur:
                accepted = (candidate, f_cand, res_cand)
                break
            gamma *= config.backtrack
        if accepted is None:
            break
        improvement = accepted[1] - f_cur
        policy, f_cur, res_cur = accepted
        trace.steps.append(
            (iteration, f_cur, projected_gradient_norm(instance, policy, grad)))
        if config.record_iterates:
            trace.iterates.append(policy)
        if improvement < config.ftol:
            break
    trace.final_policy = policy
    trace.final_f = f_cur
    return trace


def _random_feasible(instance, kind, rng):
    if kind == "bounded":
        return BoundedPolicy(tuple(rng.dirichlet(np.ones(size))
                                   for size in policy_blocks(instance, kind)))
    k = instance.params.k
    marginals = []
    for cand in instance.candidates.sets:
        rho = rng.uniform(0.0, 1.0, size=len(cand))
        if rho.sum() > k:
            rho *= k / rho.sum()
        marginals.append(rho)
    return IndependentPolicy(tuple(marginals))


def _scaled_interior(instance, policy):
    flat = flatten_policy(policy) * INTERIOR_SCALE
    return project_policy(instance, policy_from_flat(instance, flat, policy.kind))


def build_starts(instance, kind, config):
    """Materialize the configured start list as (label, policy) pairs."""
    rng = np.random.default_rng(config.seed)
    out = []
    for name in config.starts:
        if name == "u0":
            out.append(("u0", static_optimal_policy(instance, kind=kind)))
        elif name == "uniform":
            out.append(("uniform", uniform_policy(instance, kind=kind)))
        elif name == "uniform_interior":
            out.append(("uniform_interior",
                        _scaled_interior(instance, uniform_policy(instance, kind=kind))))
        elif name == "random":
            for i in range(config.n_random_starts):
                out.append((f"random_{i}", _random_feasible(instance, kind, rng)))
        elif name == "random_interior":
            for i in range(config.n_interior_starts):
                out.append((f"random_interior_{i}",
                            _scaled_interior(instance, _random_feasible(instance, kind, rng))))
        else:
            raise ConfigurationError(f"unknown start descriptor {name!r}")
    return out


def multi_start(instance, kind="bounded", config=None, extra_starts=()):
    """Run PGA from every configured start and return the best final value.

    `extra_starts` lets callers chain warm starts (e.g. the previous grid
    point of a sweep) on top of the standard list.
    """
    config = config or OptimizeConfig()
    cache: dict = {}
    traces = []
    for label, policy in list(build_starts(instance, kind, config)) + list(extra_starts):
        traces.append(pga(instance, config, policy, label=label, cache=cache))
    finished = [t for t in traces if t.final_policy is not None]
    if not finished:
        raise OptimizationError("every start failed",
                                diagnostics=[t.failure for t in traces])
    best = max(finished, key=lambda t: t.final_f)
    return OptimizeResult(best_policy=best.final_policy, best_f=best.final_f,
                          best_start=best.label, traces=traces)
