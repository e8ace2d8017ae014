"""Shared construction helpers for the test suite.

Oracles (brute-force enumerations, Monte-Carlo simulators, symbolic
derivations) live in the individual test modules so they stay independent
of the code paths they check; only instance/policy builders belong here.
"""

import numpy as np

from harmrec.model import (
    BoundedPolicy,
    CandidateCollection,
    DynamicsParams,
    IndependentPolicy,
    Instance,
    ItemCatalog,
)


def build_instance(items, harmful=(), sets=None, probs=None, *, alpha_h=0.25,
                   alpha_nh=0.5, beta=0.15, c=1.0, lam=100.0, k=1, u0=None):
    items = np.asarray(items, dtype=float)
    n, d = items.shape
    if sets is None:
        sets = (tuple(i for i in range(n) if i not in set(harmful)),)
    if probs is None:
        probs = np.full(len(sets), 1.0 / len(sets))
    if u0 is None:
        u0 = np.zeros(d)
    return Instance(
        catalog=ItemCatalog(items, frozenset(harmful)),
        candidates=CandidateCollection(tuple(sets), np.asarray(probs, dtype=float)),
        params=DynamicsParams(alpha_h=alpha_h, alpha_nh=alpha_nh, beta=beta,
                              c=c, lam=lam, k=k),
        u0=np.asarray(u0, dtype=float),
    )


def random_instance(rng, n_items=5, dim=3, n_harmful=1, k=1, *, alpha_h=0.25,
                    alpha_nh=0.5, beta=0.15, c=1.0, lam=10.0, n_sets=1,
                    lipschitz_target=None, u0_ratio=2.0):
    """Random instance with unit-scale geometry.

    When `lipschitz_target` is given the item and inherent-profile norms are
    set so that the contraction certificate value equals the target (items
    at norm delta, u0 at u0_ratio * delta).
    """
    items = rng.normal(size=(n_items, dim))
    items /= np.linalg.norm(items, axis=1, keepdims=True)
    u0 = rng.normal(size=dim)
    u0 /= np.linalg.norm(u0)
    if lipschitz_target is not None:
        kappa = 5.0 * n_items * dim * alpha_h / (alpha_nh + beta)
        delta = np.sqrt(lipschitz_target / ((3.0 + u0_ratio) * kappa))
        items *= delta * rng.uniform(0.4, 1.0, size=(n_items, 1))
        items[0] *= 1.0 / np.linalg.norm(items[0]) * delta  # pin max norm at delta
        u0 *= u0_ratio * delta
    harmful = tuple(sorted(rng.choice(n_items, size=n_harmful, replace=False))) \
        if n_harmful else ()
    clean = [i for i in range(n_items) if i not in set(harmful)]
    if n_sets == 1:
        sets = (tuple(clean),)
        probs = np.array([1.0])
    else:
        sets = []
        for _ in range(n_sets):
            size = int(rng.integers(1, len(clean) + 1))
            sets.append(tuple(sorted(rng.choice(clean, size=size, replace=False))))
        probs = rng.dirichlet(np.ones(n_sets))
    return build_instance(items, harmful, tuple(sets), probs, alpha_h=alpha_h,
                          alpha_nh=alpha_nh, beta=beta, c=c, lam=lam, k=k, u0=u0)


def random_bounded_policy(rng, instance):
    tables = tuple(rng.dirichlet(np.ones(len(instance.menu(i))))
                   for i in range(len(instance.candidates)))
    return BoundedPolicy(tables)


def random_independent_policy(rng, instance):
    k = instance.params.k
    marginals = []
    for cand in instance.candidates.sets:
        rho = rng.uniform(0.0, 1.0, size=len(cand))
        excess = rho.sum() - k
        if excess > 0:
            rho *= k / rho.sum()
        marginals.append(rho)
    return IndependentPolicy(tuple(marginals))


def dirac_policy(instance, chosen_subsets):
    """Bounded policy putting all mass on one menu subset per candidate set."""
    tables = []
    for i in range(len(instance.candidates)):
        menu = instance.menu(i)
        table = np.zeros(len(menu))
        table[menu.index(tuple(sorted(chosen_subsets[i])))] = 1.0
        tables.append(table)
    return BoundedPolicy(tuple(tables))
