"""Instance construction: synthetic generators, matrix-factorization
embeddings from ratings, harm-label ingestion, and no-click calibration.

Synthetic geometry is drawn at unit scale and then shrunk so the
contraction certificate holds with a chosen margin; the certificate value
scales as (3 delta^2 + ||u0|| delta) * kappa, so the target norms follow in
closed form.  Ratings-derived instances shrink the learned embeddings and
the user profile by one joint factor instead: a score-preserving rescale
cannot reduce the invariant product ||u0|| * max||v||, and real embeddings
sit far above the bound.  The shrink changes score magnitudes, which is
fine because c is calibrated downstream on the shrunk instances.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .baselines import alternating_optimization, uniform_policy
from .dynamics import rescale_to_contraction, solve_stationary
from .errors import CalibrationError, ConfigurationError
from .model import (
    CandidateCollection,
    DynamicsParams,
    Instance,
    ItemCatalog,
    click_and_harm_probs,
    with_params,
)
from .serialize import instance_to_dict

# Default experiment parameters.
DEFAULT_PARAMS = dict(alpha_h=0.25, alpha_nh=0.5, beta=0.15, c=1.0, lam=100.0, k=1)


# ---------------------------------------------------------------------------
# Synthetic instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape and parameters for synthetic instances.

    alpha_h/alpha_nh/beta/c may be a float or a (lo, hi) range sampled per
    instance; lipschitz_margin is the certificate value the generated
    geometry is scaled to (must be < 1 for the condition to hold).
    """

    n_items: int = 12
    n_harmful: int = 3
    dim: int = 4
    k: int = 1
    alpha_h: object = DEFAULT_PARAMS["alpha_h"]
    alpha_nh: object = DEFAULT_PARAMS["alpha_nh"]
    beta: object = DEFAULT_PARAMS["beta"]
    c: object = DEFAULT_PARAMS["c"]
    lam: float = DEFAULT_PARAMS["lam"]
    lipschitz_margin: float = 0.5
    u0_ratio: float = 2.0
    n_sets: int = 1

    def __post_init__(self):
        if self.n_harmful >= self.n_items:
            raise ConfigurationError("need n_harmful < n_items")
        if self.n_items < 1 or self.dim < 1 or self.k < 1 or self.n_sets < 1:
            raise ConfigurationError("sizes must be positive")
        if not 0 < self.lipschitz_margin:
            raise ConfigurationError("lipschitz_margin must be positive")


def _draw_param(value, rng):
    if isinstance(value, (tuple, list)):
        lo, hi = value
        return float(rng.uniform(lo, hi))
    return float(value)


def generate_synthetic(spec, seed):
    """One seeded instance whose geometry satisfies the contraction bound.

    Items and the inherent profile are Gaussian directions; norms are set
    so the certificate value equals `lipschitz_margin`, then the
    score-preserving rescale runs as a final guarantee (a no-op when the
    margin is below one).
    """
    rng = np.random.default_rng(seed)
    alpha_h = _draw_param(spec.alpha_h, rng)
    alpha_nh = _draw_param(spec.alpha_nh, rng)
    beta = _draw_param(spec.beta, rng)
    c = _draw_param(spec.c, rng)
    params = DynamicsParams(alpha_h=alpha_h, alpha_nh=alpha_nh, beta=beta,
                            c=c, lam=spec.lam, k=spec.k)

    items = rng.normal(size=(spec.n_items, spec.dim))
    items /= np.linalg.norm(items, axis=1, keepdims=True)
    items *= rng.uniform(0.4, 1.0, size=(spec.n_items, 1))
    items[0] /= np.linalg.norm(items[0])  # pin the max norm
    u0 = rng.normal(size=spec.dim)
    u0 /= np.linalg.norm(u0)

    kappa = 5.0 * spec.n_items * spec.dim * alpha_h / (alpha_nh + beta) \
        if alpha_h > 0 else 0.0
    if kappa > 0:
        delta = float(np.sqrt(spec.lipschitz_margin / ((3.0 + spec.u0_ratio) * kappa)))
    else:
        delta = 1.0
    items *= delta
    u0 *= spec.u0_ratio * delta

    harmful = tuple(sorted(rng.choice(spec.n_items, size=spec.n_harmful, replace=False))) \
        if spec.n_harmful else ()
    clean = [i for i in range(spec.n_items) if i not in set(harmful)]
    if spec.n_sets == 1:
        sets, probs = (tuple(clean),), np.array([1.0])
    else:
        sets = tuple(
            tuple(sorted(rng.choice(clean, size=int(rng.integers(1, len(clean) + 1)),
                                    replace=False)))
            for _ in range(spec.n_sets))
        probs = rng.dirichlet(np.ones(spec.n_sets))

    instance = Instance(
        catalog=ItemCatalog(items, frozenset(harmful)),
        candidates=CandidateCollection(sets, probs),
        params=params,
        u0=u0,
    )
    instance, _ = rescale_to_contraction(instance)
    return instance


def generate_batch(spec, n_users, seed):
    """Independent per-user instances from consecutive child seeds."""
    seq = np.random.SeedSequence(seed)
    return [generate_synthetic(spec, child) for child in seq.spawn(n_users)]


# ---------------------------------------------------------------------------
# Ratings and matrix factorization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RatingsTable:
    """Deduplicated (user, item, rating) triples with dense index maps."""

    user_ids: tuple
    item_ids: tuple
    user_index: np.ndarray   # dense user index per triple
    item_index: np.ndarray
    ratings: np.ndarray

    def __post_init__(self):
        if self.ratings.size == 0:
            raise ConfigurationError("ratings table is empty")
        if not np.all(np.isfinite(self.ratings)):
            raise ConfigurationError("ratings must be finite")
        pairs = set(zip(self.user_index.tolist(), self.item_index.tolist()))
        if len(pairs) != self.ratings.size:
            raise ConfigurationError("duplicate (user, item) pairs in ratings")

    @classmethod
    def from_triples(cls, triples):
        triples = list(triples)
        if not triples:
            raise ConfigurationError("ratings table is empty")
        user_ids = tuple(sorted({t[0] for t in triples}))
        item_ids = tuple(sorted({t[1] for t in triples}))
        u_map = {u: i for i, u in enumerate(user_ids)}
        i_map = {v: i for i, v in enumerate(item_ids)}
        return cls(
            user_ids=user_ids,
            item_ids=item_ids,
            user_index=np.array([u_map[t[0]] for t in triples], dtype=int),
            item_index=np.array([i_map[t[1]] for t in triples], dtype=int),
            ratings=np.array([float(t[2]) for t in triples]),
        )

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"user_id", "item_id", "rating"}
            if reader.fieldnames is None or not required <= set(reader.fieldnames):
                raise ConfigurationError(
                    f"ratings CSV must have header columns {sorted(required)}")
            triples = [(row["user_id"], row["item_id"], float(row["rating"]))
                       for row in reader]
        return cls.from_triples(triples)

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)


@dataclass(frozen=True)
class MfModel:
    """Biased matrix factorization with flat embeddings for the choice model.

    Embeddings pack the factors with the bias terms so the inner product
    reproduces the rating prediction exactly:
        item profile v = (q_i, b_i, 1),  user profile u = (p_u, 1, b_u + mu)
        => v . u = q_i . p_u + b_i + b_u + mu.
    """

    user_ids: tuple
    item_ids: tuple
    user_factors: np.ndarray
    item_factors: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_mean: float
    rmse_history: tuple
    user_counts: np.ndarray
    item_counts: np.ndarray

    @property
    def embedding_dim(self):
        return self.user_factors.shape[1] + 2

    @property
    def train_rmse(self):
        return self.rmse_history[-1]

    def predict(self, user_pos, item_pos):
        return (self.global_mean + self.user_bias[user_pos] + self.item_bias[item_pos]
                + float(self.user_factors[user_pos] @ self.item_factors[item_pos]))

    def user_embedding(self, user_pos):
        return np.concatenate([self.user_factors[user_pos], [1.0],
                               [self.user_bias[user_pos] + self.global_mean]])

    def item_embedding(self, item_pos):
        return np.concatenate([self.item_factors[item_pos], [self.item_bias[item_pos]],
                               [1.0]])

    def to_dict(self):
        return {
            "user_ids": list(self.user_ids),
            "item_ids": list(self.item_ids),
            "user_factors": self.user_factors.tolist(),
            "item_factors": self.item_factors.tolist(),
            "user_bias": self.user_bias.tolist(),
            "item_bias": self.item_bias.tolist(),
            "global_mean": self.global_mean,
            "rmse_history": list(self.rmse_history),
            "user_counts": self.user_counts.tolist(),
            "item_counts": self.item_counts.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(
                user_ids=tuple(doc["user_ids"]),
                item_ids=tuple(doc["item_ids"]),
                user_factors=np.array(doc["user_factors"], dtype=float),
                item_factors=np.array(doc["item_factors"], dtype=float),
                user_bias=np.array(doc["user_bias"], dtype=float),
                item_bias=np.array(doc["item_bias"], dtype=float),
                global_mean=float(doc["global_mean"]),
                rmse_history=tuple(doc["rmse_history"]),
                user_counts=np.array(doc["user_counts"], dtype=int),
                item_counts=np.array(doc["item_counts"], dtype=int),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed factorization model: {exc}") from exc


def fit_mf(ratings, epochs=100, lr=0.01, reg=0.01, latent=10, seed=0):
    """SGD matrix factorization with user/item biases over squared error.

    Deterministic given the seed: the per-epoch visit order is a seeded
    shuffle and updates run sequentially.
    """
    if epochs < 1 or latent < 1 or lr <= 0:
        raise ConfigurationError("epochs, latent, lr must be positive")
    rng = np.random.default_rng(seed)
    nu, ni = ratings.n_users, ratings.n_items
    p = rng.normal(scale=0.1, size=(nu, latent))
    q = rng.normal(scale=0.1, size=(ni, latent))
    bu = np.zeros(nu)
    bi = np.zeros(ni)
    mu = float(ratings.ratings.mean())
    uix, iix, r = ratings.user_index, ratings.item_index, ratings.ratings
    order = np.arange(r.size)
    history = []
    for _ in range(epochs):
        rng.shuffle(order)
        for t in order:
            a, b = uix[t], iix[t]
            err = r[t] - (mu + bu[a] + bi[b] + p[a] @ q[b])
            bu[a] += lr * (err - reg * bu[a])
            bi[b] += lr * (err - reg * bi[b])
            pa = p[a].copy()
            p[a] += lr * (err * q[b] - reg * pa)
            q[b] += lr * (err * pa - reg * q[b])
        pred = mu + bu[uix] + bi[iix] + np.einsum("ij,ij->i", p[uix], q[iix])
        history.append(float(np.sqrt(np.mean((r - pred) ** 2))))
    user_counts = np.bincount(uix, minlength=nu)
    item_counts = np.bincount(iix, minlength=ni)
    return MfModel(user_ids=ratings.user_ids, item_ids=ratings.item_ids,
                   user_factors=p, item_factors=q, user_bias=bu, item_bias=bi,
                   global_mean=mu, rmse_history=tuple(history),
                   user_counts=user_counts, item_counts=item_counts)


def load_harm_labels(path):
    """CSV with header item_id,harmful (0/1) -> {item_id: bool}."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"item_id", "harmful"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ConfigurationError("labels CSV must have header item_id,harmful")
        return {row["item_id"]: bool(int(row["harmful"])) for row in reader}


def assemble_instances(mf, harm_labels, top_items, top_users, params=None,
                       ratings=None, lipschitz_margin=0.5):
    """Per-user instances from MF embeddings and harm labels.

    Items are the `top_items` most-rated, users the `top_users` who rated
    the most of them (counted over the selected items when the ratings
    table is supplied, over everything otherwise); each user's instance
    shares the shrunk item embeddings and uses their own shrunk profile as
    u0.  Raises when any selected item lacks a harm label, listing the
    uncovered ids.
    """
    params = DynamicsParams(**(params or DEFAULT_PARAMS)) \
        if not isinstance(params, DynamicsParams) else params
    item_order = sorted(range(len(mf.item_ids)),
                        key=lambda j: (-mf.item_counts[j], mf.item_ids[j]))
    selected_items = item_order[: top_items]
    missing = [mf.item_ids[j] for j in selected_items if mf.item_ids[j] not in harm_labels]
    if missing:
        raise ConfigurationError(f"harm labels missing for items: {missing}")

    harmful_local = frozenset(j for j, pos in enumerate(selected_items)
                              if harm_labels[mf.item_ids[pos]])
    if len(harmful_local) >= len(selected_items):
        raise ConfigurationError("every selected item is labelled harmful")
    items = np.array([mf.item_embedding(pos) for pos in selected_items])
    clean = tuple(j for j in range(len(selected_items)) if j not in harmful_local)

    if ratings is not None:
        in_selection = np.isin(ratings.item_index, np.array(selected_items))
        user_hits = np.bincount(ratings.user_index[in_selection],
                                minlength=len(mf.user_ids))
    else:
        user_hits = mf.user_counts
    user_order = sorted(range(len(mf.user_ids)),
                        key=lambda j: (-user_hits[j], mf.user_ids[j]))
    selected_users = user_order[: top_users]

    kappa = 5.0 * len(selected_items) * items.shape[1] * params.alpha_h \
        / (params.alpha_nh + params.beta)
    delta = float(np.max(np.linalg.norm(items, axis=1)))
    instances = []
    for pos in selected_users:
        u0 = mf.user_embedding(pos)
        raw = (3.0 * delta ** 2 + float(np.linalg.norm(u0)) * delta) * kappa
        shrink = min(1.0, float(np.sqrt(lipschitz_margin / raw))) if raw > 0 else 1.0
        instances.append(Instance(
            catalog=ItemCatalog(items * shrink, harmful_local),
            candidates=CandidateCollection((clean,), np.array([1.0])),
            params=params,
            u0=u0 * shrink,
        ))
    return instances


# ---------------------------------------------------------------------------
# Calibration of the no-click constant
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationResult:
    c: float
    rows: tuple   # dicts: c, p_clk_alt, p_h_alt, p_clk_unif, p_h_unif

    def as_rows(self):
        return [dict(r) for r in self.rows]


def _instance_digest(instance):
    doc = json.dumps(instance_to_dict(instance), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


def calibrate_c(instances, candidate_cs, sample_size=10, seed=0, kind="bounded",
                solve_tol=1e-6, solve_max_iter=100):
    """Pick the largest c keeping the alternating policy's p_CLK above 0.5.

    Larger c suppresses clicks and raises organic harm, so this maximizes
    the harm pressure subject to the recommender still being effective.
    The user sample is drawn by seed over a digest-canonicalized ordering,
    making the outcome invariant to permutations of `instances`.
    """
    candidate_cs = sorted(float(c) for c in candidate_cs)
    if not candidate_cs:
        raise ConfigurationError("candidate_cs is empty")
    ordered = sorted(instances, key=_instance_digest)
    rng = np.random.default_rng(seed)
    take = min(sample_size, len(ordered))
    picks = rng.choice(len(ordered), size=take, replace=False)
    sample = [ordered[i] for i in sorted(picks)]

    rows = []
    chosen = None
    for c in candidate_cs:
        acc = {"p_clk_alt": 0.0, "p_h_alt": 0.0, "p_clk_unif": 0.0, "p_h_unif": 0.0}
        for inst in sample:
            current = with_params(inst, c=c)
            alt_policy, _ = alternating_optimization(
                current, kind=kind, solve_tol=solve_tol, solve_max_iter=solve_max_iter)
            res_alt = solve_stationary(current, alt_policy, tol=solve_tol,
                                       max_iter=solve_max_iter)
            clk_a, h_a = click_and_harm_probs(current, alt_policy, res_alt.u_bar)
            unif = uniform_policy(current, kind=kind)
            res_u = solve_stationary(current, unif, tol=solve_tol,
                                     max_iter=solve_max_iter)
            clk_u, h_u = click_and_harm_probs(current, unif, res_u.u_bar)
            acc["p_clk_alt"] += clk_a
            acc["p_h_alt"] += h_a
            acc["p_clk_unif"] += clk_u
            acc["p_h_unif"] += h_u
        row = {key: val / len(sample) for key, val in acc.items()}
        row["c"] = c
        rows.append(row)
        if row["p_clk_alt"] > 0.5:
            chosen = c
    if chosen is None:
        raise CalibrationError(
            f"no candidate c in {candidate_cs} keeps alternating p_CLK above 0.5; "
            "extend the grid downward")
    return CalibrationResult(c=chosen, rows=tuple(rows))
