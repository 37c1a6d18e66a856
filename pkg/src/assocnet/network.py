"""From a continuous association matrix to a discrete network and its structure.

Thresholding into {positive, negative, neutral} labels, bootstrap confidence
filtering, row/column co-clustering into response and effect groups, greedy
modularity communities and group-level summary edges.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace as dc_replace

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from ._utils import atomic_write_text, format_float, substream
from .data import CommunityData

POSITIVE, NEGATIVE, NEUTRAL = 1, -1, 0
LABEL_NAMES = {POSITIVE: "positive", NEGATIVE: "negative", NEUTRAL: "neutral"}


def discretize(strengths, eps_pos: float, eps_neg: float) -> np.ndarray:
    """Label each entry: positive if a > eps_pos, negative if a < -eps_neg, else neutral."""
    if eps_pos < 0 or eps_neg < 0:
        raise ValueError("thresholds must be non-negative")
    a = np.asarray(strengths, dtype=float)
    labels = np.zeros(a.shape, dtype=np.int8)
    labels[a > eps_pos] = POSITIVE
    labels[a < -eps_neg] = NEGATIVE
    return labels


@dataclass
class AssociationNetwork:
    """Continuous strengths (diagonal zeroed) with their discrete labeling."""

    strengths: np.ndarray
    eps_pos: float
    eps_neg: float
    labels: np.ndarray = None

    def __post_init__(self):
        a = np.asarray(self.strengths, dtype=float).copy()
        np.fill_diagonal(a, 0.0)
        self.strengths = a
        self.labels = discretize(a, self.eps_pos, self.eps_neg)
        np.fill_diagonal(self.labels, NEUTRAL)

    @property
    def n_species(self) -> int:
        return self.strengths.shape[0]

    def edges(self):
        """Non-neutral (target, source, strength, label) tuples."""
        out = []
        for i, j in np.argwhere(self.labels != NEUTRAL):
            out.append((int(i), int(j), float(self.strengths[i, j]),
                        LABEL_NAMES[int(self.labels[i, j])]))
        return out


@dataclass
class GroupStructure:
    """Row (response), column (effect) and modularity-community labels per species."""

    response_groups: np.ndarray
    effect_groups: np.ndarray
    modules: np.ndarray | None = None


def _contiguous(labels) -> np.ndarray:
    """Relabel to 0..g-1 in order of first appearance."""
    out = np.empty(len(labels), dtype=int)
    seen = {}
    for idx, lab in enumerate(labels):
        out[idx] = seen.setdefault(lab, len(seen))
    return out


def _ward_groups(X, k: int) -> np.ndarray:
    m = X.shape[0]
    if k < 1 or k > m:
        raise ValueError(f"group count {k} outside [1, {m}]")
    if k == 1:
        return np.zeros(m, dtype=int)
    if k == m:
        return np.arange(m)
    Z = linkage(X, method="ward")
    return _contiguous(fcluster(Z, t=k, criterion="maxclust"))


def coclusters(strengths, n_row_groups: int, n_col_groups: int) -> GroupStructure:
    """Ward hierarchical clustering of the matrix rows (response) and columns (effect)."""
    a = np.asarray(strengths, dtype=float)
    return GroupStructure(
        response_groups=_ward_groups(a, n_row_groups),
        effect_groups=_ward_groups(a.T, n_col_groups),
    )


def modularity(weights, labels) -> float:
    """Newman modularity of a partition on a weighted undirected graph."""
    w = np.asarray(weights, dtype=float)
    two_w = w.sum()  # sum over the full symmetric matrix = 2W
    if two_w == 0:
        return 0.0
    k = w.sum(axis=1)
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    return float((w[same].sum() - (np.outer(k, k)[same].sum()) / two_w) / two_w)


def modularity_communities(strengths):
    """Greedy agglomerative modularity maximization on |a| (symmetrized by max).

    Merges the community pair with the best modularity gain until no merge
    improves; deterministic (ties resolved by lowest community index).
    Returns (labels, Q).
    """
    a = np.asarray(strengths, dtype=float)
    m = a.shape[0]
    w = np.maximum(np.abs(a), np.abs(a).T)
    np.fill_diagonal(w, 0.0)
    two_w = w.sum()
    if two_w == 0:
        return np.zeros(m, dtype=int), 0.0

    # e[a,b]: fraction of edge weight between communities; deg[a]: weight fraction
    e = w / two_w
    deg = e.sum(axis=1)
    alive = list(range(m))
    members = {c: [c] for c in range(m)}
    q = float(-np.sum(deg**2))  # all-singleton start

    while len(alive) > 1:
        best_gain, best_pair = 0.0, None
        for ai in range(len(alive)):
            for bi in range(ai + 1, len(alive)):
                ca, cb = alive[ai], alive[bi]
                gain = 2.0 * (e[ca, cb] - deg[ca] * deg[cb])
                if gain > best_gain + 1e-15:
                    best_gain, best_pair = gain, (ca, cb)
        if best_pair is None:
            break
        ca, cb = best_pair
        e[ca, :] += e[cb, :]
        e[:, ca] += e[:, cb]
        e[cb, :] = 0.0
        e[:, cb] = 0.0
        deg[ca] += deg[cb]
        deg[cb] = 0.0
        members[ca].extend(members.pop(cb))
        alive.remove(cb)
        q += best_gain

    labels = np.empty(m, dtype=int)
    for new, c in enumerate(sorted(alive, key=lambda c: min(members[c]))):
        labels[np.asarray(members[c])] = new
    return _contiguous(labels), q


def summary_network(labels, groups: GroupStructure):
    """Group-level signed edges: effect group -> response group.

    Each edge carries the majority non-neutral label among member pairs and
    the majority share; pairs with no non-neutral label (or an exact tie)
    yield no edge.
    """
    labels = np.asarray(labels)
    edges = []
    for g in np.unique(groups.effect_groups):
        src = np.flatnonzero(groups.effect_groups == g)
        for h in np.unique(groups.response_groups):
            tgt = np.flatnonzero(groups.response_groups == h)
            block = labels[np.ix_(tgt, src)]
            off = ~(tgt[:, None] == src[None, :])
            pos = int(np.sum((block == POSITIVE) & off))
            neg = int(np.sum((block == NEGATIVE) & off))
            if pos == neg:
                continue
            lab = POSITIVE if pos > neg else NEGATIVE
            edges.append({
                "effect_group": int(g),
                "response_group": int(h),
                "label": LABEL_NAMES[lab],
                "proportion": max(pos, neg) / (pos + neg),
                "n_pairs": pos + neg,
            })
    return edges


def bootstrap_network(data: CommunityData, model_spec: dict, B: int,
                      ci: float = 0.95, seed: int = 0):
    """Bootstrap filter: refit on B site-resamples, zero pairs whose CI spans 0.

    model_spec holds the keyword arguments of a fit run: d, mode, family,
    context (optional) and config (TrainConfig); the L1 penalty is forced to
    zero (the bootstrap replaces regularization). Replicates whose training
    diverges are dropped with a warning; fewer than B/2 survivors aborts.
    Returns (strengths, kept_mask).
    """
    from .training import DivergenceError, TrainConfig, fit, initialize

    if B < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    if not 0.0 < ci < 1.0:
        raise ValueError("ci must lie in (0, 1)")
    config: TrainConfig = model_spec.get("config") or TrainConfig()
    mats = []
    for b in range(B):
        rng = substream(seed, "bootstrap", b)
        rows = rng.integers(0, data.n_sites, size=data.n_sites)
        sample = data.subset(np.sort(rows))
        cfg = dc_replace(config, lambda_l1=0.0, seed=int(rng.integers(2**31)))
        try:
            model = initialize(sample, model_spec["d"], cfg,
                               mode=model_spec.get("mode", "additive"),
                               family=model_spec.get("family", "negative_binomial"),
                               context=model_spec.get("context"))
            fitted = fit(sample, model, cfg)
        except DivergenceError as exc:
            warnings.warn(f"bootstrap replicate {b} dropped: {exc}")
            continue
        mats.append(fitted.association_matrix())
    if len(mats) < B / 2:
        raise RuntimeError(
            f"only {len(mats)} of {B} bootstrap replicates converged; aborting"
        )
    stack = np.stack(mats)
    alpha = 1.0 - ci
    lo = np.quantile(stack, alpha / 2.0, axis=0)
    hi = np.quantile(stack, 1.0 - alpha / 2.0, axis=0)
    kept = (lo > 0) | (hi < 0)
    strengths = np.where(kept, stack.mean(axis=0), 0.0)
    return strengths, kept


def write_adjacency_csv(path, strengths, species_ids) -> None:
    lines = [",".join(["species"] + [str(s) for s in species_ids])]
    for sid, row in zip(species_ids, np.asarray(strengths, dtype=float)):
        lines.append(",".join([str(sid)] + [format_float(v) for v in row]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_edge_list_csv(path, network: AssociationNetwork, species_ids) -> None:
    lines = ["source,target,strength,label"]
    for i, j, s, lab in network.edges():
        lines.append(f"{species_ids[j]},{species_ids[i]},{format_float(s)},{lab}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_dot(path, network: AssociationNetwork, species_ids, modules=None) -> None:
    """Graphviz export; edge direction source -> target, color by sign."""
    lines = ["digraph associations {"]
    for i, sid in enumerate(species_ids):
        attrs = [f'label="{sid}"']
        if modules is not None:
            attrs.append(f"colorscheme=set19, style=filled, fillcolor={int(modules[i]) % 9 + 1}")
        lines.append(f'  n{i} [{", ".join(attrs)}];')
    for i, j, s, lab in network.edges():
        color = "red" if lab == "positive" else "blue"
        lines.append(f'  n{j} -> n{i} [color={color}, penwidth={1 + 2 * abs(s):.2f}];')
    lines.append("}")
    atomic_write_text(path, "\n".join(lines) + "\n")
