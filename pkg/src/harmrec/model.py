"""Core choice model: catalog, candidate sets, policies, and the
multinomial-logit selection probabilities evaluated at a fixed user profile.

Model in brief: every item v and user profile u live in R^d and induce a
positive preference score s_v = exp(v . u).  When a set E is recommended the
user accepts it with probability g(s_E) = s_E / (s_E + c) (s_E is the summed
score of E) and then picks inside E proportionally to scores; otherwise they
pick "organically" from the whole catalog, again proportionally to scores.
Harmful items are never recommended but remain reachable organically.

All types are immutable after construction and every operation here is a
pure function of its inputs, so concurrent use needs no locking.

A note on feasibility: evaluation routines accept *any* real-valued policy
tables (they only check structure).  The probability-simplex / budget
constraints are enforced at construction boundaries via
:func:`validate_policy`; finite-difference probes and first-order methods
need the smooth off-polytope extension of every quantity.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError, ScoreOverflowError, UndefinedRatioError

# Guard on |v . u|; exp(500) is representable but anything near it signals
# profiles that were never rescaled, and would wreck gradients silently.
SCORE_EXPONENT_LIMIT = 500.0

# Largest candidate set for which independent-sampling expectations are
# enumerated exactly (2^12 subsets); beyond this a sample count is required.
EXACT_ENUM_CAP = 12

FEASIBILITY_ATOL = 1e-9


def _frozen_array(x, dtype=float):
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ItemCatalog:
    """Universe of n items as d-dimensional profiles plus harm labels."""

    items: np.ndarray          # (n, d)
    harmful: frozenset

    def __post_init__(self):
        items = _frozen_array(self.items)
        if items.ndim != 2 or items.shape[0] < 1:
            raise ConfigurationError("items must be a non-empty (n, d) array")
        if not np.all(np.isfinite(items)):
            raise ConfigurationError("item profiles must be finite")
        harmful = frozenset(int(i) for i in self.harmful)
        if harmful and not all(0 <= i < items.shape[0] for i in harmful):
            raise ConfigurationError("harmful indices out of range")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "harmful", harmful)

    @property
    def n_items(self):
        return self.items.shape[0]

    @property
    def dimension(self):
        return self.items.shape[1]

    @property
    def harmful_mask(self):
        mask = np.zeros(self.n_items, dtype=bool)
        mask[sorted(self.harmful)] = True
        return mask


@dataclass(frozen=True)
class CandidateCollection:
    """Collection of candidate sets with their sampling probabilities."""

    sets: tuple            # tuple of sorted index tuples
    probs: np.ndarray      # (num_sets,), nonnegative, sums to 1

    def __post_init__(self):
        sets = tuple(tuple(sorted(int(i) for i in c)) for c in self.sets)
        if not sets:
            raise ConfigurationError("candidate collection is empty")
        for c in sets:
            if len(c) == 0:
                raise ConfigurationError("candidate sets must be non-empty")
            if len(set(c)) != len(c):
                raise ConfigurationError(f"duplicate indices in candidate set {c}")
        probs = _frozen_array(self.probs)
        if probs.shape != (len(sets),):
            raise ConfigurationError("one probability per candidate set required")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > FEASIBILITY_ATOL:
            raise ConfigurationError("candidate-set probabilities must be >= 0 and sum to 1")
        object.__setattr__(self, "sets", sets)
        object.__setattr__(self, "probs", probs)

    def __len__(self):
        return len(self.sets)


@dataclass(frozen=True)
class DynamicsParams:
    """Attraction-dynamics and objective parameters.

    alpha_h / alpha_nh are the drift rates toward consumed harmful /
    non-harmful items, beta the pull toward the inherent profile, c the
    no-click constant of the acceptance ratio, lam the harm penalty and k
    the recommendation budget.
    """

    alpha_h: float
    alpha_nh: float
    beta: float
    c: float
    lam: float
    k: int

    def __post_init__(self):
        for name in ("alpha_h", "alpha_nh", "beta"):
            val = float(getattr(self, name))
            if not 0.0 <= val <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {val}")
            object.__setattr__(self, name, val)
        if self.alpha_h + self.beta > 1.0 + 1e-12:
            raise ConfigurationError("alpha_h + beta must be <= 1")
        if self.alpha_nh + self.beta > 1.0 + 1e-12:
            raise ConfigurationError("alpha_nh + beta must be <= 1")
        if self.c < 0:
            raise ConfigurationError("c must be non-negative")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")
        if int(self.k) < 1 or int(self.k) != self.k:
            raise ConfigurationError("k must be a positive integer")
        object.__setattr__(self, "c", float(self.c))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "k", int(self.k))


@dataclass(frozen=True)
class Instance:
    """A complete problem instance: catalog + candidates + dynamics + u0."""

    catalog: ItemCatalog
    candidates: CandidateCollection
    params: DynamicsParams
    u0: np.ndarray

    def __post_init__(self):
        u0 = _frozen_array(self.u0)
        if u0.shape != (self.catalog.dimension,):
            raise ConfigurationError(
                f"u0 has shape {u0.shape}, expected ({self.catalog.dimension},)")
        if not np.all(np.isfinite(u0)):
            raise ConfigurationError("u0 must be finite")
        n = self.catalog.n_items
        for c in self.candidates.sets:
            if c[-1] >= n or c[0] < 0:
                raise ConfigurationError(f"candidate set {c} out of catalog range")
            bad = set(c) & self.catalog.harmful
            if bad:
                raise ConfigurationError(f"candidate set contains harmful items {sorted(bad)}")
        object.__setattr__(self, "u0", u0)

    @property
    def n_items(self):
        return self.catalog.n_items

    @property
    def dim(self):
        return self.catalog.dimension

    def alpha_vector(self):
        """Per-item drift rate: alpha_h on harmful items, alpha_nh elsewhere."""
        alpha = np.full(self.n_items, self.params.alpha_nh)
        alpha[self.catalog.harmful_mask] = self.params.alpha_h
        return alpha

    def menu(self, set_index):
        """Canonical list of recommendable subsets of candidate set i."""
        return subset_menu(self.candidates.sets[set_index], self.params.k)


def with_params(instance, **overrides):
    """Copy of the instance with some dynamics parameters replaced."""
    params = dataclasses.replace(instance.params, **overrides)
    return Instance(catalog=instance.catalog, candidates=instance.candidates,
                    params=params, u0=instance.u0)


@lru_cache(maxsize=4096)
def subset_menu(candidate, k):
    """All subsets of `candidate` with at most k items, smallest first.

    Canonical order is (size, lexicographic index tuple) so that policy
    vectors are reproducible across runs; the empty recommendation is a
    legal entry (the user then always selects organically).
    """
    candidate = tuple(sorted(candidate))
    menu = []
    for size in range(0, min(k, len(candidate)) + 1):
        menu.extend(itertools.combinations(candidate, size))
    return tuple(menu)


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundedPolicy:
    """Per candidate set, a distribution over its size-<=k subset menu."""

    tables: tuple    # tuple of 1-d arrays, one per candidate set

    def __post_init__(self):
        tables = tuple(_frozen_array(t) for t in self.tables)
        for t in tables:
            if t.ndim != 1 or not np.all(np.isfinite(t)):
                raise ConfigurationError("policy tables must be finite 1-d arrays")
        object.__setattr__(self, "tables", tables)

    @property
    def kind(self):
        return "bounded"


@dataclass(frozen=True)
class IndependentPolicy:
    """Per candidate set, per-item inclusion marginals rho in [0, 1]."""

    marginals: tuple  # tuple of 1-d arrays, one per candidate set

    def __post_init__(self):
        marginals = tuple(_frozen_array(r) for r in self.marginals)
        for r in marginals:
            if r.ndim != 1 or not np.all(np.isfinite(r)):
                raise ConfigurationError("policy marginals must be finite 1-d arrays")
        object.__setattr__(self, "marginals", marginals)

    @property
    def kind(self):
        return "independent"


POLICY_KINDS = ("bounded", "independent")


def policy_arrays(policy):
    if isinstance(policy, BoundedPolicy):
        return policy.tables
    if isinstance(policy, IndependentPolicy):
        return policy.marginals
    raise ConfigurationError(f"unknown policy type {type(policy).__name__}")


def policy_blocks(instance, kind):
    """Lengths of the per-candidate-set parameter blocks."""
    if kind == "bounded":
        return [len(instance.menu(i)) for i in range(len(instance.candidates))]
    if kind == "independent":
        return [len(c) for c in instance.candidates.sets]
    raise ConfigurationError(f"unknown policy kind {kind!r}")


def policy_dim(instance, policy_or_kind):
    kind = policy_or_kind if isinstance(policy_or_kind, str) else policy_or_kind.kind
    return sum(policy_blocks(instance, kind))


def flatten_policy(policy):
    return np.concatenate([np.asarray(a, dtype=float) for a in policy_arrays(policy)])


def policy_from_flat(instance, x, kind):
    x = np.asarray(x, dtype=float)
    blocks = policy_blocks(instance, kind)
    if x.shape != (sum(blocks),):
        raise ConfigurationError(f"flat policy has length {x.size}, expected {sum(blocks)}")
    parts, start = [], 0
    for size in blocks:
        parts.append(x[start:start + size])
        start += size
    if kind == "bounded":
        return BoundedPolicy(tuple(parts))
    return IndependentPolicy(tuple(parts))


def _check_policy_shape(instance, policy):
    arrays = policy_arrays(policy)
    blocks = policy_blocks(instance, policy.kind)
    if len(arrays) != len(blocks):
        raise ConfigurationError(
            f"policy has {len(arrays)} blocks, instance has {len(blocks)} candidate sets")
    for i, (arr, size) in enumerate(zip(arrays, blocks)):
        if arr.shape != (size,):
            raise ConfigurationError(
                f"policy block {i} has shape {arr.shape}, expected ({size},)")


def validate_policy(instance, policy, atol=FEASIBILITY_ATOL):
    """Check full feasibility: shapes plus simplex / budget-box constraints."""
    _check_policy_shape(instance, policy)
    if policy.kind == "bounded":
        for i, table in enumerate(policy.tables):
            if np.any(table < -atol) or abs(table.sum() - 1.0) > atol:
                raise ConfigurationError(
                    f"bounded policy block {i} is not a distribution "
                    f"(min {table.min():.3e}, sum {table.sum():.12f})")
    else:
        k = instance.params.k
        for i, rho in enumerate(policy.marginals):
            if np.any(rho < -atol) or np.any(rho > 1.0 + atol):
                raise ConfigurationError(f"marginals of block {i} leave [0, 1]")
            if rho.sum() > k + atol:
                raise ConfigurationError(
                    f"marginals of block {i} sum to {rho.sum():.12f} > k = {k}")
    return policy


# ---------------------------------------------------------------------------
# Scores and conditional selection probabilities
# ---------------------------------------------------------------------------


def score(v, u):
    """Preference score exp(v . u) for a single item profile."""
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    if v.shape != u.shape:
        raise ConfigurationError(f"profile shapes differ: {v.shape} vs {u.shape}")
    expo = float(v @ u)
    if abs(expo) > SCORE_EXPONENT_LIMIT:
        raise ScoreOverflowError(
            f"|v . u| = {abs(expo):.3g} exceeds {SCORE_EXPONENT_LIMIT}; rescale profiles")
    return float(np.exp(expo))


def scores(instance, u):
    """All n preference scores at profile u, with the overflow guard."""
    u = np.asarray(u, dtype=float)
    if u.shape != (instance.dim,):
        raise ConfigurationError(f"profile has shape {u.shape}, expected ({instance.dim},)")
    expo = instance.catalog.items @ u
    worst = float(np.max(np.abs(expo))) if expo.size else 0.0
    if worst > SCORE_EXPONENT_LIMIT:
        raise ScoreOverflowError(
            f"max |v . u| = {worst:.3g} exceeds {SCORE_EXPONENT_LIMIT}; rescale profiles")
    return np.exp(expo)


def total_score(instance, item_set, u):
    """Summed score over a set of catalog indices (0 for the empty set)."""
    idx = list(item_set)
    if any(not 0 <= int(i) < instance.n_items for i in idx):
        raise ConfigurationError(f"indices {idx} out of catalog range")
    if not idx:
        return 0.0
    return float(scores(instance, u)[idx].sum())


def click_prob_given_set(s_e, c):
    """Acceptance probability g(s_E) = s_E / (s_E + c).

    Non-decreasing and concave in s_E; undefined only when s_E = c = 0.
    """
    if s_e < 0 or c < 0:
        raise ConfigurationError("s_E and c must be non-negative")
    if s_e == 0.0 and c == 0.0:
        raise UndefinedRatioError("g(0) with c = 0 is undefined")
    return s_e / (s_e + c)


def _set_score(s, subset):
    return float(s[list(subset)].sum()) if subset else 0.0


def _g(s_e, c):
    if s_e == 0.0 and c == 0.0:
        raise UndefinedRatioError("acceptance ratio undefined: s_E = c = 0")
    return s_e / (s_e + c)


def _item_probs_given_set(instance, subset, s, c):
    """Vector p_{v|E} over the catalog, given precomputed scores s."""
    s_omega = float(s.sum())
    s_e = _set_score(s, subset)
    g = _g(s_e, c)
    p = (1.0 - g) / s_omega * s
    if subset:
        idx = list(subset)
        p[idx] += s[idx] / s_e * g
    return p


def item_prob_given_rec(instance, v, subset, u):
    """Probability the user selects item v when set E was recommended.

    In-set items combine the accepted-and-chosen route with the organic
    route; out-of-set items are reachable only organically.  Sums to one
    over the catalog.
    """
    subset = tuple(sorted(int(i) for i in subset))
    if any(not 0 <= i < instance.n_items for i in subset):
        raise ConfigurationError(f"recommendation {subset} out of catalog range")
    if not 0 <= int(v) < instance.n_items:
        raise ConfigurationError(f"item index {v} out of catalog range")
    s = scores(instance, u)
    return float(_item_probs_given_set(instance, subset, s, instance.params.c)[int(v)])


# ---------------------------------------------------------------------------
# Expectations over the recommended set
# ---------------------------------------------------------------------------


def _independent_support(candidate, rho, n_samples, rng, exact=None):
    """(subsets, weights) for one candidate set under inclusion marginals.

    Exact product-form enumeration up to EXACT_ENUM_CAP items; beyond that
    a Monte-Carlo support of n_samples draws (weight 1/N each) is used and
    both n_samples and rng are required.  `exact=False` forces sampling on
    small sets (useful for estimator-versus-enumeration checks).
    """
    m = len(candidate)
    use_exact = exact if exact is not None else m <= EXACT_ENUM_CAP
    if use_exact:
        if m > EXACT_ENUM_CAP:
            raise ConfigurationError(
                f"exact enumeration requested for a set of size {m} > {EXACT_ENUM_CAP}")
        masks = (np.arange(2 ** m)[:, None] >> np.arange(m)) & 1
        weights = np.prod(np.where(masks == 1, rho, 1.0 - rho), axis=1)
        subsets = [tuple(candidate[j] for j in range(m) if mask[j]) for mask in masks]
        return subsets, weights
    if n_samples is None or rng is None:
        raise ConfigurationError(
            f"sampled expectation over a set of size {m} needs n_samples and rng")
    draws = rng.random((n_samples, m)) < rho
    subsets = [tuple(candidate[j] for j in range(m) if row[j]) for row in draws]
    weights = np.full(n_samples, 1.0 / n_samples)
    return subsets, weights


def recommendation_support(instance, policy, set_index, n_samples=None, rng=None, exact=None):
    """Subsets a policy can recommend from candidate set i, with weights."""
    _check_policy_shape(instance, policy)
    if policy.kind == "bounded":
        return list(instance.menu(set_index)), np.asarray(policy.tables[set_index], dtype=float)
    return _independent_support(
        instance.candidates.sets[set_index], policy.marginals[set_index],
        n_samples, rng, exact=exact)


def selection_probs(instance, policy, u, n_samples=None, rng=None, exact=None):
    """Unconditional selection probabilities p_v over the whole catalog.

    Averages p_{v|E} over the candidate-set draw and the policy's
    recommendation draw.
    """
    s = scores(instance, u)
    c = instance.params.c
    p = np.zeros(instance.n_items)
    for i, p_c in enumerate(instance.candidates.probs):
        subsets, weights = recommendation_support(instance, policy, i, n_samples, rng, exact)
        for subset, w in zip(subsets, weights):
            if w == 0.0:
                continue
            p += p_c * w * _item_probs_given_set(instance, subset, s, c)
    return p


def click_and_harm_probs(instance, policy, u, n_samples=None, rng=None, exact=None):
    """(p_CLK, p_H): acceptance probability and organic-harm probability.

    p_CLK averages g(s_E) over candidate sets and recommendations; harm can
    only happen organically, so p_H = (1 - p_CLK) * s_H / s_Omega.
    """
    s = scores(instance, u)
    c = instance.params.c
    p_clk = 0.0
    for i, p_c in enumerate(instance.candidates.probs):
        subsets, weights = recommendation_support(instance, policy, i, n_samples, rng, exact)
        for subset, w in zip(subsets, weights):
            if w == 0.0:
                continue
            p_clk += p_c * w * _g(_set_score(s, subset), c)
    harm_ratio = _harm_score_ratio(instance, s)
    return float(p_clk), float((1.0 - p_clk) * harm_ratio)


def _harm_score_ratio(instance, s):
    harmful = sorted(instance.catalog.harmful)
    if not harmful:
        return 0.0
    return float(s[harmful].sum() / s.sum())


def static_objective(instance, policy, u, lam=None, n_samples=None, rng=None, exact=None):
    """Objective p_CLK - lambda * p_H evaluated at the given fixed profile."""
    if lam is None:
        lam = instance.params.lam
    p_clk, p_h = click_and_harm_probs(
        instance, policy, u, n_samples=n_samples, rng=rng, exact=exact)
    return p_clk - lam * p_h
