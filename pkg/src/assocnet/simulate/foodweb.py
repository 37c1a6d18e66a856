"""Food-web occurrence simulation: group-level predator-prey DAGs over a gradient.

G trophic groups of m_G species each. Basal species occur wherever the
environment suits them; a consumer additionally needs at least one prey
species (of any of its prey groups) present at the site. Emits both ground
truths: the metaweb (species-level expansion of the group DAG) and the
realized network (metaweb restricted to pairs that co-occur at least once).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._utils import substream
from ..data import CommunityData

TOPOLOGIES = ("anarchy", "democracy", "cascade", "gcascade", "niche", "pniche")


@dataclass
class FoodWebConfig:
    topology: str = "cascade"
    n_groups: int = 5
    species_per_group: int = 5
    n_sites: int = 500
    gradient: tuple = (0.0, 100.0)
    niche_breadth: float = 15.0
    seed: int = 0

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.n_groups < 2:
            raise ValueError("need at least 2 trophic groups")


def _is_dag_with_basal(adj) -> bool:
    adj = np.asarray(adj)
    if not (adj.sum(axis=1) == 0).any():
        return False  # no basal group
    return topological_groups(adj) is not None


def topological_groups(adj):
    """Groups ordered so that every prey group precedes its consumers; None if cyclic."""
    adj = np.asarray(adj, dtype=bool)
    G = adj.shape[0]
    remaining = set(range(G))
    order = []
    while remaining:
        ready = [g for g in sorted(remaining)
                 if not any(adj[g, h] for h in remaining)]
        if not ready:
            return None
        order.extend(ready)
        remaining -= set(ready)
    return order


def generate_topology(kind: str, G: int, seed: int = 0) -> np.ndarray:
    """G x G binary group adjacency; entry (g, h) = 1 means group g preys on group h.

    All generators return DAGs with at least one basal group, deterministically
    per seed. Random kinds resample up to 100 times before erroring.
    """
    if G < 2:
        raise ValueError("need at least 2 groups")
    rng = substream(seed, "topology", kind)

    def build():
        adj = np.zeros((G, G), dtype=int)
        if kind == "cascade":
            for g in range(1, G):
                adj[g, g - 1] = 1
        elif kind == "gcascade":
            for g in range(1, G):
                adj[g, :g] = 1
        elif kind == "democracy":
            for g in range(1, G):
                adj[g, g - 1] = 1
                if g >= 2:
                    adj[g, g - 2] = 1
        elif kind == "anarchy":
            for g in range(1, G):
                for h in range(g):
                    adj[g, h] = int(rng.random() < 0.5)
        else:  # niche / pniche
            v = rng.uniform(0.0, 1.0, size=G)
            for g in range(G):
                lower = np.flatnonzero(v < v[g])
                if lower.size == 0:
                    continue
                width = rng.uniform(0.0, v[g])
                center = rng.uniform(width / 2.0, v[g])
                prey = [h for h in range(G)
                        if h != g and v[h] < v[g]
                        and center - width / 2.0 <= v[h] <= center + width / 2.0]
                adj[g, prey] = 1
            if kind == "pniche":
                for g, h in np.argwhere(adj == 1):
                    if rng.random() < 0.2:
                        lower = np.flatnonzero(v < v[g])
                        adj[g, h] = 0
                        adj[g, int(rng.choice(lower))] = 1
        return adj

    for _ in range(100):
        adj = build()
        if _is_dag_with_basal(adj):
            return adj
    raise RuntimeError(f"could not generate a valid {kind} topology in 100 attempts")


def simulate_occurrences(config: FoodWebConfig, adjacency):
    """Bottom-up occurrence simulation; returns (CommunityData, metaweb, realized).

    Both ground-truth matrices are oriented like the association matrix:
    entry (i, j) = 1 marks a positive dependence of consumer i on prey j.
    """
    adj = np.asarray(adjacency, dtype=int)
    G, mg = config.n_groups, config.species_per_group
    if adj.shape != (G, G):
        raise ValueError("adjacency does not match the group count")
    order = topological_groups(adj)
    if order is None:
        raise ValueError("group adjacency must be a DAG")
    m = G * mg
    group_of = np.repeat(np.arange(G), mg)

    lo, hi = config.gradient
    mu = substream(config.seed, "niches").uniform(lo, hi, size=m)
    env = substream(config.seed, "sites").uniform(lo, hi, size=config.n_sites)
    q = np.exp(-((env[:, None] - mu[None, :]) ** 2) / (2.0 * config.niche_breadth**2))
    draws = substream(config.seed, "draws").random((config.n_sites, m))

    present = np.zeros((config.n_sites, m), dtype=bool)
    for g in order:
        prey_groups = np.flatnonzero(adj[g])
        cols = np.flatnonzero(group_of == g)
        if prey_groups.size == 0:
            present[:, cols] = draws[:, cols] < q[:, cols]
        else:
            prey_cols = np.isin(group_of, prey_groups)
            available = present[:, prey_cols].any(axis=1)
            present[:, cols] = (draws[:, cols] < q[:, cols]) & available[:, None]

    metaweb = adj[group_of][:, group_of].astype(int)
    cooccur = (present.T.astype(float) @ present.astype(float)) > 0
    realized = metaweb * cooccur.astype(int)

    data = CommunityData(
        abundance=present.astype(float),
        covariates=env[:, None],
        site_ids=[f"site{k}" for k in range(config.n_sites)],
        species_ids=[f"g{group_of[i]}s{i % mg}" for i in range(m)],
        group_labels=group_of,
        binary=True,
    )
    return data, metaweb, realized
