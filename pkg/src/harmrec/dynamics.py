"""Attraction dynamics: profile drift, the stationary-profile fixed point,
the contraction certificate, and mean-field trajectory simulation.

After each consumption the user profile moves toward the consumed item at
rate alpha (harm-dependent) and toward the inherent profile u0 at rate
beta.  Taking expectations over the selected item gives the mean drift

    delta(u) = sum_v alpha_v p_v(pi, u) (v - u) + beta (u0 - u),

whose zeros are exactly the fixed points of

    F(pi, u) = (beta u0 + sum_v alpha_v p_v v) / (beta + sum_v alpha_v p_v).

F factors as G(p(pi, u)) where p produces selection probabilities and G is
the weighted-interpolation map above; both factors are Lipschitz, and when
every item norm is below an explicit bound the composition is a contraction
uniformly over policies, so plain fixed-point iteration converges
geometrically to the unique stationary profile.  The solver still runs when
the certificate fails; it just reports `condition_holds=False` so callers
know uniqueness is not guaranteed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateDynamicsError, RescaleInfeasibleError
from .model import CandidateCollection, Instance, ItemCatalog, selection_probs

DEFAULT_TOL = 1e-3
DEFAULT_MAX_ITER = 10
DEFAULT_TOL_INF = 1e-3


@dataclass(frozen=True)
class StationaryResult:
    """Outcome of the fixed-point solve."""

    u_bar: np.ndarray
    residual: float          # ||F(pi, u_bar) - u_bar||_2 at the returned iterate
    iterations: int
    converged: bool
    condition_holds: bool
    lipschitz_bound: float | None

    def as_dict(self):
        return {
            "u_bar": self.u_bar.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "condition_holds": self.condition_holds,
            "lipschitz_bound": self.lipschitz_bound,
        }


@dataclass(frozen=True)
class Trajectory:
    """Mean-field profile evolution u(0), u(1), ..."""

    profiles: np.ndarray       # (T + 1, d)
    converged_at: int | None   # first step whose update fell below tol_inf

    @property
    def final(self):
        return self.profiles[-1]

    def as_dict(self):
        return {"profiles": self.profiles.tolist(), "converged_at": self.converged_at}


@dataclass(frozen=True)
class ContractionReport:
    """Certificate data: norm bound, Lipschitz constant, and the verdict."""

    holds: bool
    bound: float
    lipschitz: float

    def as_dict(self):
        return {"holds": self.holds, "bound": self.bound, "lipschitz": self.lipschitz}


def profile_update(instance, p):
    """Interpolation map G(p): selection distribution -> updated profile.

    Raises when the denominator beta + sum_v alpha_v p_v vanishes (no
    anchor toward u0 and no attraction mass at all).
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (instance.n_items,):
        raise ConfigurationError(f"p has shape {p.shape}, expected ({instance.n_items},)")
    alpha = instance.alpha_vector()
    params = instance.params
    denom = params.beta + float(alpha @ p)
    if denom <= 0.0:
        raise DegenerateDynamicsError(
            "profile-update denominator beta + sum alpha_v p_v is zero")
    numer = params.beta * instance.u0 + (alpha * p) @ instance.catalog.items
    return numer / denom


def drift(instance, policy, u, n_samples=None, rng=None):
    """Mean profile drift at u: E[alpha_v (v - u)] + beta (u0 - u)."""
    u = np.asarray(u, dtype=float)
    p = selection_probs(instance, policy, u, n_samples=n_samples, rng=rng)
    alpha = instance.alpha_vector()
    pull = (alpha * p) @ instance.catalog.items - float(alpha @ p) * u
    return pull + instance.params.beta * (instance.u0 - u)


def fixed_point_map(instance, policy, u, n_samples=None, rng=None):
    """One application of F(pi, u) = G(p(pi, u))."""
    p = selection_probs(instance, policy, u, n_samples=n_samples, rng=rng)
    return profile_update(instance, p)


def solve_stationary(instance, policy, u_init=None, tol=DEFAULT_TOL,
                     max_iter=DEFAULT_MAX_ITER, n_samples=None, rng=None):
    """Fixed-point iteration for the stationary profile.

    Starts from u0 by default, iterates u <- F(pi, u) for at most max_iter
    steps and stops once the residual ||F(u) - u||_2 falls below tol.  The
    reported residual is always evaluated at the returned iterate.
    Non-convergence is not an exception: the last iterate comes back with
    `converged=False`.
    """
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    u = np.array(instance.u0 if u_init is None else u_init, dtype=float)
    f_u = fixed_point_map(instance, policy, u, n_samples=n_samples, rng=rng)
    residual = float(np.linalg.norm(f_u - u))
    iterations = 0
    while residual > tol and iterations < max_iter:
        u = f_u
        f_u = fixed_point_map(instance, policy, u, n_samples=n_samples, rng=rng)
        residual = float(np.linalg.norm(f_u - u))
        iterations += 1
    report = contraction_condition(instance, warn=False)
    return StationaryResult(
        u_bar=u,
        residual=residual,
        iterations=iterations,
        converged=residual <= tol,
        condition_holds=report.holds,
        lipschitz_bound=report.lipschitz if np.isfinite(report.lipschitz) else None,
    )


def contraction_condition(instance, warn=True):
    """Evaluate the uniform-contraction certificate for this instance.

    bound = (1/6) (sqrt(||u0||^2 + 12 (a_nh + beta) / (5 n d a_h)) - ||u0||)
    holds iff max_v ||v|| < bound (strict), and the implied Lipschitz
    constant is L = (3 delta^2 + ||u0|| delta) * 5 n d a_h / (a_nh + beta)
    with delta = max_v ||v||.  The two forms are mutually consistent:
    delta < bound exactly when L < 1.

    With a_h = 0 the bound is vacuously infinite; a warning is emitted
    because the certificate then says nothing about the real dynamics.
    """
    params = instance.params
    n, d = instance.n_items, instance.dim
    delta = float(np.max(np.linalg.norm(instance.catalog.items, axis=1)))
    u0_norm = float(np.linalg.norm(instance.u0))
    if params.alpha_h == 0.0:
        if warn:
            warnings.warn(
                "alpha_h = 0 makes the contraction bound vacuously unbounded; "
                "the certificate carries no information", RuntimeWarning)
        return ContractionReport(holds=True, bound=np.inf, lipschitz=0.0)
    denom = params.alpha_nh + params.beta
    kappa = 5.0 * n * d * params.alpha_h
    if denom == 0.0:
        lipschitz = 0.0 if delta == 0.0 else np.inf
        bound = 0.0
        return ContractionReport(holds=bool(delta < bound), bound=bound,
                                 lipschitz=lipschitz)
    bound = (np.sqrt(u0_norm ** 2 + 12.0 * denom / kappa) - u0_norm) / 6.0
    lipschitz = (3.0 * delta ** 2 + u0_norm * delta) * kappa / denom
    return ContractionReport(holds=bool(delta < bound), bound=float(bound),
                             lipschitz=float(lipschitz))


def rescale_to_contraction(instance, margin=0.9):
    """Score-preserving rescale (items * tau, u0 / tau) enforcing the bound.

    Scores are invariant because (tau v) . (u0 / tau) = v . u0, but so is
    the product ||u0|| * delta, which lower-bounds the certificate value;
    when ||u0|| * delta * 5 n d a_h / (a_nh + beta) >= 1 no tau exists and
    we report that instead of looping forever.  Instances already inside
    the bound come back unchanged with tau = 1.
    """
    if not 0.0 < margin < 1.0:
        raise ConfigurationError("margin must lie in (0, 1)")
    report = contraction_condition(instance, warn=False)
    if report.holds:
        return instance, 1.0
    params = instance.params
    denom = params.alpha_nh + params.beta
    if params.alpha_h == 0.0 or denom == 0.0:
        raise RescaleInfeasibleError(
            "contraction bound is degenerate (alpha_h = 0 or alpha_nh + beta = 0)")
    kappa = 5.0 * instance.n_items * instance.dim * params.alpha_h / denom
    delta = float(np.max(np.linalg.norm(instance.catalog.items, axis=1)))
    u0_norm = float(np.linalg.norm(instance.u0))
    slack = 1.0 / kappa - u0_norm * delta
    if slack <= 0.0:
        raise RescaleInfeasibleError(
            f"||u0|| * max||v|| = {u0_norm * delta:.6g} >= {1.0 / kappa:.6g}; the product "
            "is invariant under score-preserving rescaling, so no tau can satisfy the bound")
    tau = margin * float(np.sqrt(slack / (3.0 * delta ** 2)))
    rescaled = Instance(
        catalog=ItemCatalog(instance.catalog.items * tau, instance.catalog.harmful),
        candidates=CandidateCollection(instance.candidates.sets, instance.candidates.probs),
        params=params,
        u0=instance.u0 / tau,
    )
    return rescaled, tau


def simulate_evolution(instance, policy, u_start=None, tol_inf=DEFAULT_TOL_INF,
                       max_steps=1000, n_samples=None, rng=None):
    """Mean-field trajectory u(t+1) = u(t) + drift(pi, u(t)).

    Stops at the first step whose sup-norm update falls below tol_inf, or
    after max_steps (the partial trajectory is returned, converged_at=None).
    """
    if tol_inf <= 0:
        raise ConfigurationError("tol_inf must be positive")
    u = np.array(instance.u0 if u_start is None else u_start, dtype=float)
    profiles = [u.copy()]
    converged_at = None
    for t in range(max_steps):
        step = drift(instance, policy, u, n_samples=n_samples, rng=rng)
        u = u + step
        profiles.append(u.copy())
        if np.max(np.abs(step)) < tol_inf:
            converged_at = t + 1
            break
    return Trajectory(profiles=np.array(profiles), converged_at=converged_at)
