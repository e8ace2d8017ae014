"""JSON round trips for instances, policies, and solver results.

Instance documents carry {dimension, items, harmful, candidate_sets,
params, u0}; policy documents are keyed by candidate-set index so they can
be matched back to an instance regardless of dict ordering.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigurationError
from .model import (
    BoundedPolicy,
    CandidateCollection,
    DynamicsParams,
    IndependentPolicy,
    Instance,
    ItemCatalog,
)


def instance_to_dict(instance):
    return {
        "dimension": instance.dim,
        "items": instance.catalog.items.tolist(),
        "harmful": sorted(instance.catalog.harmful),
        "candidate_sets": [
            {"items": list(c), "prob": float(p)}
            for c, p in zip(instance.candidates.sets, instance.candidates.probs)
        ],
        "params": {
            "alpha_h": instance.params.alpha_h,
            "alpha_nh": instance.params.alpha_nh,
            "beta": instance.params.beta,
            "c": instance.params.c,
            "lambda": instance.params.lam,
            "k": instance.params.k,
        },
        "u0": instance.u0.tolist(),
    }


def instance_from_dict(doc):
    try:
        params = doc["params"]
        instance = Instance(
            catalog=ItemCatalog(np.array(doc["items"], dtype=float),
                                frozenset(doc["harmful"])),
            candidates=CandidateCollection(
                tuple(tuple(cs["items"]) for cs in doc["candidate_sets"]),
                np.array([cs["prob"] for cs in doc["candidate_sets"]], dtype=float)),
            params=DynamicsParams(alpha_h=params["alpha_h"], alpha_nh=params["alpha_nh"],
                                  beta=params["beta"], c=params["c"],
                                  lam=params["lambda"], k=params["k"]),
            u0=np.array(doc["u0"], dtype=float),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed instance document: {exc}") from exc
    if instance.dim != doc["dimension"]:
        raise ConfigurationError(
            f"dimension field {doc['dimension']} does not match items of width {instance.dim}")
    return instance


def policy_to_dict(policy):
    if isinstance(policy, BoundedPolicy):
        return {"kind": "bounded",
                "tables": {str(i): t.tolist() for i, t in enumerate(policy.tables)}}
    if isinstance(policy, IndependentPolicy):
        return {"kind": "independent",
                "marginals": {str(i): r.tolist() for i, r in enumerate(policy.marginals)}}
    raise ConfigurationError(f"unknown policy type {type(policy).__name__}")


def policy_from_dict(doc):
    kind = doc.get("kind")
    if kind == "bounded":
        tables = doc["tables"]
        ordered = [np.array(tables[str(i)], dtype=float) for i in range(len(tables))]
        return BoundedPolicy(tuple(ordered))
    if kind == "independent":
        marginals = doc["marginals"]
        ordered = [np.array(marginals[str(i)], dtype=float) for i in range(len(marginals))]
        return IndependentPolicy(tuple(ordered))
    raise ConfigurationError(f"unknown policy kind {kind!r}")


def save_instances(path, instances):
    with open(path, "w") as fh:
        json.dump([instance_to_dict(inst) for inst in instances], fh)


def load_instances(path):
    with open(path) as fh:
        docs = json.load(fh)
    if not isinstance(docs, list):
        docs = [docs]
    return [instance_from_dict(doc) for doc in docs]


def save_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
