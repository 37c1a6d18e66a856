"""Species embeddings, association factorization and biotic-context construction.

A directed association a_ij (influence of source j on target i) is the dot
product of the target's response embedding (row i of P) with the source's
effect embedding (row j of Q), so the full association matrix factorizes as
A = P Q^T.

The biotic context of a target species at a site collects the co-observed
species whose effects bear on it. Four variants are supported:

- basic:       other species present at the same site, weight 1, averaged.
- conditioned: basic, with the effect axis reweighted per site by a linear
               map of the covariates (beta_k = W (v_k, 1)).
- temporal:    species present at the same site at the previous time point,
               target included, averaged.
- spatial:     species present within a radius, weight exp(-decay * distance),
               summed (no context-size normalization).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._utils import atomic_write_text, format_float
from .data import CommunityData

CONTEXT_VARIANTS = ("basic", "conditioned", "temporal", "spatial")


@dataclass
class EmbeddingPair:
    """Response matrix P (m x d) and effect matrix Q (m x d)."""

    response: np.ndarray
    effect: np.ndarray

    def __post_init__(self):
        self.response = np.asarray(self.response, dtype=float)
        self.effect = np.asarray(self.effect, dtype=float)
        if self.response.ndim != 2 or self.response.shape != self.effect.shape:
            raise ValueError(
                f"embedding shapes differ: {self.response.shape} vs {self.effect.shape}"
            )
        if self.dim < 1:
            raise ValueError("embedding dimension must be >= 1")

    @property
    def n_species(self) -> int:
        return self.response.shape[0]

    @property
    def dim(self) -> int:
        return self.response.shape[1]

    @property
    def is_non_negative(self) -> bool:
        return bool(np.all(self.response >= 0) and np.all(self.effect >= 0))

    def association_matrix(self) -> np.ndarray:
        """A = P Q^T; A[i, j] is the influence of source j on target i."""
        return self.response @ self.effect.T

    def copy(self) -> "EmbeddingPair":
        return EmbeddingPair(self.response.copy(), self.effect.copy())


def association_strength(emb: EmbeddingPair, target: int, source: int) -> float:
    """Directed association: response of `target` dotted with effect of `source`."""
    return float(emb.response[target] @ emb.effect[source])


@dataclass
class BioticContextSpec:
    """Which biotic-context variant to build, with its variant-specific fields."""

    variant: str = "basic"
    conditioning_weights: np.ndarray | None = None  # (p+1, d), conditioned only
    radius: float | None = None  # spatial only
    decay: float | None = None  # spatial only, >= 0

    def __post_init__(self):
        if self.variant not in CONTEXT_VARIANTS:
            raise ValueError(f"unknown context variant {self.variant!r}")
        if self.variant == "conditioned":
            if self.conditioning_weights is None:
                raise ValueError("conditioned variant requires conditioning_weights")
            self.conditioning_weights = np.asarray(self.conditioning_weights, dtype=float)
        elif self.conditioning_weights is not None:
            raise ValueError("conditioning_weights only apply to the conditioned variant")
        if self.variant == "spatial":
            if self.radius is None or self.decay is None:
                raise ValueError("spatial variant requires radius and decay")
            if self.radius <= 0 or self.decay < 0:
                raise ValueError("radius must be positive, decay non-negative")
        elif self.radius is not None or self.decay is not None:
            raise ValueError("radius/decay only apply to the spatial variant")


def _previous_row(data: CommunityData, k: int):
    """Row index observing the same site at time t-1, or None."""
    if data.time_index is None:
        raise ValueError("temporal context requires time_index")
    t = data.time_index[k]
    sid = data.site_ids[k]
    for l in range(data.n_sites):
        if data.site_ids[l] == sid and data.time_index[l] == t - 1:
            return l
    return None


def biotic_context_members(data: CommunityData, site: int, target: int,
                           spec: BioticContextSpec):
    """The explicit context set: list of (species, row, weight) triples."""
    y = data.abundance
    if spec.variant in ("basic", "conditioned"):
        return [(j, site, 1.0) for j in range(data.n_species)
                if j != target and y[site, j] > 0]
    if spec.variant == "temporal":
        prev = _previous_row(data, site)
        if prev is None:
            return []
        return [(j, prev, 1.0) for j in range(data.n_species) if y[prev, j] > 0]
    # spatial
    if data.coordinates is None:
        raise ValueError("spatial context requires coordinates")
    d = np.hypot(*(data.coordinates - data.coordinates[site]).T)
    members = []
    for l in np.flatnonzero(d <= spec.radius):
        w = float(np.exp(-spec.decay * d[l]))
        for j in np.flatnonzero(y[l] > 0):
            if l == site and j == target:
                continue  # the target never appears in its own focal-site context
            members.append((int(j), int(l), w))
    return members


def conditioning_vectors(data: CommunityData, spec: BioticContextSpec) -> np.ndarray:
    """beta_k = W^T (v_k, 1) for every site; ones for non-conditioned variants."""
    if spec.variant != "conditioned":
        raise ValueError("conditioning vectors only exist for the conditioned variant")
    W = spec.conditioning_weights
    if W.shape[0] != data.n_covariates + 1:
        raise ValueError(
            f"conditioning_weights rows ({W.shape[0]}) must equal covariates+1 "
            f"({data.n_covariates + 1})"
        )
    V = np.column_stack([data.covariates, np.ones(data.n_sites)])
    return V @ W


def context_effect(data: CommunityData, site: int, target: int, emb: EmbeddingPair,
                   spec: BioticContextSpec) -> np.ndarray:
    """Aggregated effect z_ki of the biotic context on the target at one site.

    basic/temporal: abundance-weighted mean of member effect embeddings;
    spatial: distance-weighted sum; conditioned: basic, elementwise-scaled by
    the site's conditioning vector. Empty context gives the zero vector.
    """
    members = biotic_context_members(data, site, target, spec)
    z = np.zeros(emb.dim)
    if not members:
        return z
    for j, row, w in members:
        z += w * data.abundance[row, j] * emb.effect[j]
    if spec.variant in ("basic", "conditioned", "temporal"):
        z /= len(members)
    if spec.variant == "conditioned":
        z = conditioning_vectors(data, spec)[site] * z
    return z


def biotic_predictor(data: CommunityData, site: int, target: int, emb: EmbeddingPair,
                     offsets, spec: BioticContextSpec) -> float:
    """eta^B_ki = o_i + rho_i . z_ki."""
    z = context_effect(data, site, target, emb, spec)
    return float(offsets[target] + emb.response[target] @ z)


class ContextEngine:
    """Vectorized biotic-context computations over a whole dataset.

    Precomputes the neighbor-weight structure once; `eta_b` evaluates the
    full n x m biotic-predictor matrix, and the *_batch methods serve the
    trainer with per-pair forward terms and embedding gradients.

    Every variant reduces to the same algebra:
        eta^B_ki = o_i + (rho_i * beta_k) . (T_k - s_k y_ki alpha_i) / c_ki
    with T = Omega (Y Q), Omega the row-weight matrix (identity for the
    basic variant), s_k the focal row's own weight when the target is
    excluded (0 for temporal), beta_k the conditioning vector (ones unless
    conditioned) and c the context size (1 for the non-normalized spatial
    variant).
    """

    def __init__(self, data: CommunityData, spec: BioticContextSpec):
        self.data = data
        self.spec = spec
        self.Y = data.abundance
        n, m = self.Y.shape
        present = self.Y > 0

        if spec.variant in ("basic", "conditioned"):
            self.omega = None  # identity
            self.self_weight = np.ones(n)
            r = present.sum(axis=1)
            counts = r[:, None] - present  # context excludes the target
        elif spec.variant == "temporal":
            self.omega = np.zeros((n, n))
            for k in range(n):
                prev = _previous_row(data, k)
                if prev is not None:
                    self.omega[k, prev] = 1.0
            self.self_weight = np.zeros(n)
            # context size = species count at the previous row, target included
            counts = np.tile((self.omega @ present.sum(axis=1))[:, None], (1, m))
        else:  # spatial
            if data.coordinates is None:
                raise ValueError("spatial context requires coordinates")
            diff = data.coordinates[:, None, :] - data.coordinates[None, :, :]
            dist = np.hypot(diff[..., 0], diff[..., 1])
            self.omega = np.where(dist <= spec.radius, np.exp(-spec.decay * dist), 0.0)
            self.self_weight = np.diag(self.omega).copy()
            counts = None  # no normalization

        if counts is None:
            self.inv_counts = None
        else:
            with np.errstate(divide="ignore"):
                self.inv_counts = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)

        if spec.variant == "conditioned":
            self.beta = conditioning_vectors(data, spec)
        else:
            self.beta = None

    def _row_mix(self, R):
        return R if self.omega is None else self.omega @ R

    def eta_b(self, emb: EmbeddingPair, offsets) -> np.ndarray:
        """Full n x m matrix of biotic predictors from observed abundances."""
        P, Q = emb.response, emb.effect
        T = self._row_mix(self.Y @ Q)
        BT = T if self.beta is None else self.beta * T
        core = BT @ P.T  # (n, m): rho_i . (beta_k * T_k)
        g = np.einsum("id,id->i", P, Q)  # rho_i . alpha_i
        if self.beta is not None:
            g = (self.beta @ (P * Q).T)  # (n, m)
        self_term = self.self_weight[:, None] * self.Y * g
        z = core - self_term
        if self.inv_counts is not None:
            z = z * self.inv_counts
        return np.asarray(offsets)[None, :] + z

    def forward_batch(self, rows, cols, emb: EmbeddingPair, offsets):
        """Biotic predictors for the (site, species) pairs of one minibatch.

        Returns (eta_b, cache); the cache feeds backward_batch.
        """
        P, Q = emb.response, emb.effect
        R = self.Y @ Q  # (n, d); recomputed per step because Q moves
        T = R[rows] if self.omega is None else self.omega[rows] @ R
        beta = None if self.beta is None else self.beta[rows]
        y_self = self.Y[rows, cols]
        sw = self.self_weight[rows]
        zc = T - (sw * y_self)[:, None] * Q[cols]
        if self.inv_counts is not None:
            zc = zc * self.inv_counts[rows, cols][:, None]
        if beta is not None:
            zc = beta * zc
        eta = np.asarray(offsets)[cols] + np.einsum("bd,bd->b", P[cols], zc)
        cache = (rows, cols, zc, beta, y_self, sw)
        return eta, cache

    def backward_batch(self, cache, grad_eta, P, Q):
        """Embedding gradients for one minibatch.

        grad_eta holds d(loss)/d(eta^B) per pair, already weighted. Returns
        per-species gradient matrices (gP, gQ) of shape (m, d).
        """
        rows, cols, zc, beta, y_self, sw = cache
        n, m = self.Y.shape
        d = P.shape[1]
        gP = np.zeros((m, d))
        np.add.at(gP, cols, grad_eta[:, None] * zc)

        u = grad_eta
        if self.inv_counts is not None:
            u = u * self.inv_counts[rows, cols]
        peff = P[cols] if beta is None else P[cols] * beta
        X = u[:, None] * peff  # (B, d)
        acc = np.zeros((n, d))
        if self.omega is None:
            np.add.at(acc, rows, X)
        else:
            acc = self.omega[rows].T @ X
        gQ = self.Y.T @ acc
        # remove the focal-row self contribution that the matrix route included
        corr = (u * sw * y_self)[:, None] * peff
        np.subtract.at(gQ, cols, corr)
        return gP, gQ


def save_embeddings_csv(emb: EmbeddingPair, response_path, effect_path, species_ids=None):
    ids = species_ids or [f"s{i}" for i in range(emb.n_species)]
    for path, M in ((response_path, emb.response), (effect_path, emb.effect)):
        lines = [",".join(["species"] + [f"dim{j}" for j in range(emb.dim)])]
        for sid, row in zip(ids, M):
            lines.append(",".join([str(sid)] + [format_float(v) for v in row]))
        atomic_write_text(path, "\n".join(lines) + "\n")


def embeddings_to_json(emb: EmbeddingPair) -> dict:
    return {"response": emb.response.tolist(), "effect": emb.effect.tolist()}


def embeddings_from_json(d) -> EmbeddingPair:
    return EmbeddingPair(np.asarray(d["response"]), np.asarray(d["effect"]))


def save_embeddings_json(emb: EmbeddingPair, path):
    atomic_write_text(path, json.dumps(embeddings_to_json(emb)) + "\n")
