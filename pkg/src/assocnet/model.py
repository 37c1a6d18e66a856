"""Conditional abundance model: habitat + biotic predictors under an aggregation mode.

Each (site, species) response is modeled conditionally on the environment and
on the observed abundances of the other species (node-wise dependency-network
conditioning). Three aggregation modes combine the abiotic predictor eta^A and
the biotic predictor eta^B:

- additive:       g(mean) = eta^A + eta^B
- multiplicative: mean = sigma(eta^A) * sigma(eta^B), Bernoulli response
- hierarchical:   presence ~ Bernoulli(sigma(eta^A)); abundance, when present,
                  follows the count family with mean g^-1(eta^B) (zero-inflated
                  mixture likelihood)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma

from . import families as fam
from ._utils import atomic_write_text, format_float
from .context import BioticContextSpec, ContextEngine, EmbeddingPair
from .data import CommunityData
from .families import ResponseFamily

SCHEMA_VERSION = "1"

MODES = ("additive", "multiplicative", "hierarchical")

_MODE_FAMILIES = {
    "additive": ("bernoulli", "poisson", "negative_binomial", "normal"),
    "multiplicative": ("bernoulli",),
    "hierarchical": ("negative_binomial", "zero_inflated_nb"),
}


def validate_mode_family(mode: str, family: ResponseFamily) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if family.kind not in _MODE_FAMILIES[mode]:
        raise ValueError(f"{mode} mode does not support the {family.kind} family")


@dataclass
class HabitatModel:
    """Per-species linear coefficients over preprocessed covariates, intercept last."""

    weights: np.ndarray  # (m, p + 1)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 2:
            raise ValueError("habitat weights must be a 2-d array")

    def predictor_matrix(self, covariates) -> np.ndarray:
        """eta^A for every (site, species): X~ @ weights^T with X~ = [X, 1]."""
        X = np.asarray(covariates, dtype=float)
        if X.shape[1] + 1 != self.weights.shape[1]:
            raise ValueError(
                f"covariate count {X.shape[1]} does not match habitat weights "
                f"({self.weights.shape[1]} incl. intercept)"
            )
        return np.column_stack([X, np.ones(X.shape[0])]) @ self.weights.T


def abiotic_predictor(hab: HabitatModel, x_k, species: int | None = None):
    """Linear habitat score weights_i . (x_k, 1) for one site."""
    x = np.append(np.asarray(x_k, dtype=float), 1.0)
    w = hab.weights if species is None else hab.weights[species]
    return w @ x


def conditional_mean(mode: str, family: ResponseFamily, eta_a, eta_b):
    """Response mean under the aggregation mode.

    additive: g^-1(eta^A + eta^B); multiplicative: sigma(eta^A)*sigma(eta^B);
    hierarchical: the pair (p_present, abundance mean) feeding the
    zero-inflated kernel.
    """
    validate_mode_family(mode, family)
    if mode == "additive":
        return family.mean_from_eta(np.asarray(eta_a) + np.asarray(eta_b))
    if mode == "multiplicative":
        return fam.sigmoid(eta_a) * fam.sigmoid(eta_b)
    return fam.sigmoid(eta_a), np.exp(fam.clip_eta(eta_b))


def _theta_for(family: ResponseFamily, cols=None):
    disp = family.dispersion
    if disp is None:
        return None
    disp = np.asarray(disp, dtype=float)
    if disp.ndim and cols is not None:
        return disp[cols]
    return disp


def pair_nll(mode: str, family: ResponseFamily, y, eta_a, eta_b, species=None):
    """Elementwise negative log-likelihood at the conditional mean."""
    y = np.asarray(y, dtype=float)
    if mode == "additive":
        return family.nll(y, family.mean_from_eta(np.asarray(eta_a) + np.asarray(eta_b)),
                          species=species)
    if mode == "multiplicative":
        return fam.bernoulli_nll(y, fam.sigmoid(eta_a) * fam.sigmoid(eta_b))
    theta = _theta_for(family, species)
    return fam.zinb_nll(fam.sigmoid(eta_a), np.exp(fam.clip_eta(eta_b)), theta, y)


def pair_gradients(mode: str, family: ResponseFamily, y, eta_a, eta_b, species=None):
    """(d nll/d eta^A, d nll/d eta^B, d nll/d log theta), elementwise closed forms."""
    y = np.asarray(y, dtype=float)
    if mode == "additive":
        eta = np.asarray(eta_a) + np.asarray(eta_b)
        g = family.nll_gradient(y, eta, species=species)
        return g, g.copy(), family.nll_dispersion_gradient(y, eta, species=species)
    if mode == "multiplicative":
        pa, pb = fam.sigmoid(eta_a), fam.sigmoid(eta_b)
        mu = pa * pb
        resid = (mu - y) / np.maximum(1.0 - mu, fam.PROB_EPS)
        return resid * (1.0 - pa), resid * (1.0 - pb), np.zeros_like(mu)
    # hierarchical: zero-inflated mixture
    p = fam.sigmoid(eta_a)
    mu = np.exp(fam.clip_eta(eta_b))
    theta = _theta_for(family, species)
    theta = np.broadcast_to(np.asarray(theta, dtype=float), mu.shape)
    pos = y > 0
    da = np.empty_like(mu)
    db = np.empty_like(mu)
    dt = np.empty_like(mu)
    # presence cells: -log p + NB(y | mu, theta)
    da[pos] = (p - 1.0)[pos]
    db[pos] = ((theta + y) * mu / (theta + mu) - y)[pos]
    dt_raw = -(
        digamma(y + theta) - digamma(theta) + np.log(theta) + 1.0
        - np.log(theta + mu) - (theta + y) / (theta + mu)
    )
    dt[pos] = (dt_raw * theta)[pos]
    # absence cells: -log[(1-p) + p NB0]
    nb0 = fam.nb_zero_mass(mu, theta)
    lik = np.maximum((1.0 - p) + p * nb0, 1e-300)
    da[~pos] = ((1.0 - nb0) * p * (1.0 - p) / lik)[~pos]
    db[~pos] = (p * nb0 * theta * mu / (theta + mu) / lik)[~pos]
    dnb0_dtheta = nb0 * (np.log(theta) + 1.0 - np.log(theta + mu) - theta / (theta + mu))
    dt[~pos] = (-p * dnb0_dtheta * theta / lik)[~pos]
    return da, db, dt


@dataclass
class FittedModel:
    """Everything a fitted conditional model carries, immutable after training."""

    habitat: HabitatModel
    embeddings: EmbeddingPair
    offsets: np.ndarray
    family: ResponseFamily
    mode: str
    context: BioticContextSpec
    training_log: list = field(default_factory=list)
    seed: int = 0
    group_labels: np.ndarray | None = None
    share_groups: bool = False
    version: str = SCHEMA_VERSION

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=float)
        validate_mode_family(self.mode, self.family)
        if self.offsets.shape[0] != self.embeddings.n_species:
            raise ValueError("offsets do not match embedding species count")

    @property
    def n_species(self) -> int:
        return self.embeddings.n_species

    def association_matrix(self) -> np.ndarray:
        return self.embeddings.association_matrix()

    def predictors(self, data: CommunityData):
        """(eta^A, eta^B) matrices over all (site, species) pairs."""
        eta_a = self.habitat.predictor_matrix(data.covariates)
        engine = ContextEngine(data, self.context)
        eta_b = engine.eta_b(self.embeddings, self.offsets)
        return eta_a, eta_b


def model_nll(model: FittedModel, data: CommunityData, pairs=None) -> float:
    """Summed negative log-likelihood over (site, species) pairs.

    The biotic context is built from the observed abundances (node-wise
    conditioning); `pairs` is an optional (rows, cols) index pair, default all.
    """
    eta_a, eta_b = model.predictors(data)
    y = data.abundance
    if pairs is not None:
        rows = np.asarray(pairs[0], dtype=int)
        cols = np.asarray(pairs[1], dtype=int)
        if rows.size == 0:
            return 0.0
        terms = pair_nll(model.mode, model.family, y[rows, cols],
                         eta_a[rows, cols], eta_b[rows, cols], species=cols)
        return float(np.sum(terms))
    cols = np.broadcast_to(np.arange(data.n_species), y.shape)
    terms = pair_nll(model.mode, model.family, y, eta_a, eta_b, species=cols)
    return float(np.sum(terms))


def predict(model: FittedModel, data: CommunityData, parts: bool = False):
    """Conditional mean predictions given the observed co-occurring abundances.

    For the hierarchical mode the returned mean is the marginal expectation
    p_present * abundance_mean; with parts=True the (mean, p_present,
    abundance_mean) triple is returned instead.
    """
    eta_a, eta_b = model.predictors(data)
    if model.mode == "hierarchical":
        p, mu = conditional_mean(model.mode, model.family, eta_a, eta_b)
        return (p * mu, p, mu) if parts else p * mu
    mean = conditional_mean(model.mode, model.family, eta_a, eta_b)
    return (mean,) if parts else mean


def save_model(model: FittedModel, out_dir) -> None:
    """Write the model bundle: model.json plus CSV parameter matrices."""
    os.makedirs(out_dir, exist_ok=True)

    def _csv(path, M):
        lines = [",".join(format_float(v) for v in row) for row in np.atleast_2d(M)]
        atomic_write_text(path, "\n".join(lines) + "\n")

    _csv(os.path.join(out_dir, "habitat.csv"), model.habitat.weights)
    _csv(os.path.join(out_dir, "response.csv"), model.embeddings.response)
    _csv(os.path.join(out_dir, "effect.csv"), model.embeddings.effect)
    disp = model.family.dispersion
    meta = {
        "version": model.version,
        "mode": model.mode,
        "family": {
            "kind": model.family.kind,
            "dispersion": None if disp is None else np.asarray(disp).tolist(),
        },
        "offsets": model.offsets.tolist(),
        "seed": model.seed,
        "share_groups": model.share_groups,
        "group_labels": None if model.group_labels is None else model.group_labels.tolist(),
        "context": {
            "variant": model.context.variant,
            "conditioning_weights": None if model.context.conditioning_weights is None
            else model.context.conditioning_weights.tolist(),
            "radius": model.context.radius,
            "decay": model.context.decay,
        },
        "training_log": model.training_log,
        "files": {"habitat": "habitat.csv", "response": "response.csv", "effect": "effect.csv"},
    }
    atomic_write_text(os.path.join(out_dir, "model.json"),
                      json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(bundle_dir) -> FittedModel:
    with open(os.path.join(bundle_dir, "model.json")) as fh:
        meta = json.load(fh)
    if meta.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema version {meta.get('version')!r}")

    def _csv(name):
        return np.loadtxt(os.path.join(bundle_dir, meta["files"][name]), delimiter=",", ndmin=2)

    disp = meta["family"]["dispersion"]
    family = ResponseFamily(meta["family"]["kind"],
                            None if disp is None else np.asarray(disp))
    ctx = meta["context"]
    context = BioticContextSpec(
        variant=ctx["variant"],
        conditioning_weights=None if ctx["conditioning_weights"] is None
        else np.asarray(ctx["conditioning_weights"]),
        radius=ctx["radius"],
        decay=ctx["decay"],
    )
    return FittedModel(
        habitat=HabitatModel(_csv("habitat")),
        embeddings=EmbeddingPair(_csv("response"), _csv("effect")),
        offsets=np.asarray(meta["offsets"], dtype=float),
        family=family,
        mode=meta["mode"],
        context=context,
        training_log=meta["training_log"],
        seed=meta["seed"],
        group_labels=None if meta["group_labels"] is None else np.asarray(meta["group_labels"]),
        share_groups=meta["share_groups"],
        version=meta["version"],
    )
