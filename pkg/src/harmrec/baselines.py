"""Baseline recommendation policies.

Top-k is the workhorse: at a fixed profile it maximizes acceptance
probability, and because the recommender never shows harmful items that
simultaneously minimizes the harm term, for every penalty weight lambda.
So "optimize at the frozen profile" never moves with lambda, which is
exactly why alternating between a static top-k step and a stationary-profile
solve can end up arbitrarily far from the dynamics-aware optimum;
`alternating_trap_instance` constructs a three-item instance exhibiting
that failure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .dynamics import DEFAULT_MAX_ITER, DEFAULT_TOL, solve_stationary
from .model import (
    BoundedPolicy,
    CandidateCollection,
    DynamicsParams,
    IndependentPolicy,
    Instance,
    ItemCatalog,
    scores,
    static_objective,
)

ALTERNATING_TOL = 2.5e-3


@dataclass(frozen=True)
class AlternatingTrace:
    """Per-step record of the alternating scheme."""

    policies: tuple                    # policy after each policy step
    profiles: tuple                    # stationary profile after each solve
    objectives: tuple                  # p_CLK - lambda p_H at each (policy, profile)
    converged: bool
    solves: tuple = field(default=())  # StationaryResult per step

    @property
    def steps(self):
        return len(self.policies)


def top_k_policy(instance, u, kind="bounded"):
    """Dirac policy on the k highest-scoring items of each candidate set.

    Scores are modular over sets, so greedy top-k selection is exact.  Ties
    break toward the lowest item index; sets smaller than k are taken
    whole.  The same selection is returned as a subset-table Dirac or as
    0/1 inclusion marginals depending on `kind`.
    """
    s = scores(instance, u)
    k = instance.params.k
    chosen = []
    for cand in instance.candidates.sets:
        cand_arr = np.array(cand)
        order = np.lexsort((cand_arr, -s[cand_arr]))
        chosen.append(tuple(sorted(cand_arr[order[: min(k, len(cand))]])))
    return _dirac(instance, chosen, kind)


def _dirac(instance, chosen, kind):
    if kind == "bounded":
        tables = []
        for i, subset in enumerate(chosen):
            menu = instance.menu(i)
            table = np.zeros(len(menu))
            table[menu.index(subset)] = 1.0
            tables.append(table)
        return BoundedPolicy(tuple(tables))
    if kind == "independent":
        marginals = []
        for cand, subset in zip(instance.candidates.sets, chosen):
            members = set(subset)
            marginals.append(np.array([1.0 if v in members else 0.0 for v in cand]))
        return IndependentPolicy(tuple(marginals))
    raise ConfigurationError(f"unknown policy kind {kind!r}")


def uniform_policy(instance, kind="bounded"):
    """Uniform over each subset menu, or flat marginals min(1, k/|C|)."""
    if kind == "bounded":
        tables = tuple(np.full(len(instance.menu(i)), 1.0 / len(instance.menu(i)))
                       for i in range(len(instance.candidates)))
        return BoundedPolicy(tables)
    if kind == "independent":
        k = instance.params.k
        marginals = tuple(np.full(len(c), min(1.0, k / len(c)))
                          for c in instance.candidates.sets)
        return IndependentPolicy(marginals)
    raise ConfigurationError(f"unknown policy kind {kind!r}")


def static_optimal_policy(instance, kind="bounded"):
    """Optimal policy if the profile were frozen at u0 (top-k at u0)."""
    return top_k_policy(instance, instance.u0, kind=kind)


def alternating_optimization(instance, max_steps=10, tol=ALTERNATING_TOL,
                             kind="bounded", solve_tol=DEFAULT_TOL,
                             solve_max_iter=DEFAULT_MAX_ITER):
    """Alternate a static top-k step with a stationary-profile solve.

    Starting from u0: the policy step picks top-k at the current profile
    (optimal for the frozen-profile objective, independent of lambda), the
    profile step solves for that policy's stationary profile.  Stops when
    successive profiles move less than `tol` in l2, or after max_steps.
    The whole trajectory is lambda-free; only the recorded objectives see
    lambda.
    """
    u = np.array(instance.u0, dtype=float)
    policies, profiles, objectives, solves = [], [], [], []
    converged = False
    for _ in range(max_steps):
        policy = top_k_policy(instance, u, kind=kind)
        result = solve_stationary(instance, policy, tol=solve_tol, max_iter=solve_max_iter)
        u_next = result.u_bar
        policies.append(policy)
        profiles.append(u_next)
        objectives.append(static_objective(instance, policy, u_next))
        solves.append(result)
        if np.linalg.norm(u_next - u) < tol:
            converged = True
            u = u_next
            break
        u = u_next
    trace = AlternatingTrace(policies=tuple(policies), profiles=tuple(profiles),
                             objectives=tuple(objectives), converged=converged,
                             solves=tuple(solves))
    return policies[-1], trace


def alternating_trap_instance(b1=53.0, b2=5.0, c=None, lam=100.0, alpha=0.5):
    """Three-item instance on which the alternating scheme is blind to harm.

    Geometry: the inherent profile (b1, 0, 0) initially favours item v0 =
    (1, b2, -b2) over v1 = (0.99, -b2, b2), but consuming v0 drags the
    profile toward the harmful item (0, b2, -b2) sitting in the same
    half-space, while consuming v1 pushes it to the opposite one.  The
    static step always recommends v0 no matter how large lam is, so the
    harm probability at its stationary profile stays bounded away from
    zero and the objective gap to the v1-recommending policy grows
    linearly in lam.

    c defaults to exp(0.99 b1) / 4 so that the acceptance probability of a
    v1 recommendation is exactly 0.8 at the inherent profile; b1 ~ 2 b2^2
    keeps that constant comparable to scores at the downstream stationary
    profiles, which is what keeps the organic-harm route alive.
    """
    if not b1 > b2 > 1.0:
        raise ConfigurationError("need b1 > b2 > 1")
    if b1 >= 500.0:
        raise ConfigurationError("b1 >= 500 would overflow the score guard")
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError("alpha must lie in (0, 1]")
    if c is None:
        c = math.exp(0.99 * b1) / 4.0
    if c <= 0:
        raise ConfigurationError("c must be positive")
    items = np.array([
        [1.0, b2, -b2],     # v0: aligned with the harmful direction
        [0.99, -b2, b2],    # v1: slightly lower initial score, opposite half-space
        [0.0, b2, -b2],     # harmful item
    ])
    return Instance(
        catalog=ItemCatalog(items, frozenset({2})),
        candidates=CandidateCollection(((0, 1),), np.array([1.0])),
        params=DynamicsParams(alpha_h=alpha, alpha_nh=alpha, beta=0.0,
                              c=c, lam=lam, k=1),
        u0=np.array([b1, 0.0, 0.0]),
    )
