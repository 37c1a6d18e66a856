"""Exponential-family response kernels.

Negative log-likelihoods, canonical links, closed-form gradients on the
link scale, and deviance measures for the distributions used by the
conditional abundance model: Bernoulli, Poisson, negative binomial (NB2),
zero-inflated negative binomial and Normal.

The NB is parameterized as NB2: Var(y) = mean + mean^2 / theta, with theta
the per-species inverse dispersion. Link-scale predictors are clamped to
[-ETA_MAX, ETA_MAX] before exponentiation and probabilities to
[PROB_EPS, 1 - PROB_EPS] so that gradient descent from random
initializations cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

ETA_MAX = 30.0
PROB_EPS = 1e-12

COUNT_FAMILIES = ("poisson", "negative_binomial", "zero_inflated_nb")
DISPERSED_FAMILIES = ("negative_binomial", "zero_inflated_nb", "normal")
FAMILY_KINDS = ("bernoulli", "poisson", "negative_binomial", "zero_inflated_nb", "normal")

CANONICAL_LINKS = {
    "bernoulli": "logit",
    "poisson": "log",
    "negative_binomial": "log",
    "zero_inflated_nb": "log",
    "normal": "identity",
}


def clip_eta(eta):
    return np.clip(eta, -ETA_MAX, ETA_MAX)


def clip_prob(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def sigmoid(eta):
    """Numerically safe logistic function with output in (PROB_EPS, 1-PROB_EPS)."""
    return clip_prob(1.0 / (1.0 + np.exp(-clip_eta(eta))))


def bernoulli_nll(y, p):
    p = clip_prob(p)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def poisson_nll(y, mu):
    return mu - y * np.log(mu) + gammaln(y + 1.0)


def nb_nll(y, mu, theta):
    """NB2 negative log pmf; theta is the inverse-dispersion (variance mu + mu^2/theta)."""
    return -(
        gammaln(y + theta)
        - gammaln(theta)
        - gammaln(y + 1.0)
        + theta * np.log(theta)
        + y * np.log(mu)
        - (theta + y) * np.log(theta + mu)
    )


def normal_nll(y, mu, variance):
    return 0.5 * (np.log(2.0 * np.pi * variance) + (y - mu) ** 2 / variance)


def zinb_nll(p_present, nb_mean, theta, y):
    """Zero-inflated NB: mixture of a point mass at zero and an NB abundance kernel.

    -log[ (1 - p_present) * 1{y=0} + p_present * NB(y | nb_mean, theta) ].
    """
    p_present = clip_prob(np.asarray(p_present, dtype=float))
    y = np.asarray(y, dtype=float)
    nb = np.exp(-nb_nll(y, nb_mean, theta))
    lik = np.where(y == 0, (1.0 - p_present) + p_present * nb, p_present * nb)
    return -np.log(np.maximum(lik, 1e-300))


def nb_zero_mass(mu, theta):
    """NB(0 | mu, theta) = (theta / (theta + mu))^theta."""
    return np.exp(theta * (np.log(theta) - np.log(theta + mu)))


def poisson_deviance(y, mu):
    """Total Poisson deviance 2*sum[y*ln(y/mu) - (y - mu)], y=0 terms contribute 2*mu.

    Inputs must have equal length; mu must be strictly positive.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if y.shape != mu.shape:
        raise ValueError(f"shape mismatch: y {y.shape} vs mu {mu.shape}")
    if np.any(mu <= 0):
        raise ValueError("Poisson deviance requires strictly positive predicted means")
    term = np.where(y > 0, y * np.log(np.maximum(y, 1e-300) / mu) - (y - mu), mu)
    return float(2.0 * np.sum(term))


@dataclass
class ResponseFamily:
    """Response distribution plus its canonical link and optional dispersion.

    dispersion is the per-species NB inverse-dispersion theta (or the Normal
    variance); scalar or shape (m,). Required exactly for the dispersed kinds.
    """

    kind: str
    dispersion: np.ndarray | float | None = None
    link: str = field(init=False)

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}")
        self.link = CANONICAL_LINKS[self.kind]
        needs = self.kind in DISPERSED_FAMILIES
        if needs and self.dispersion is None:
            raise ValueError(f"{self.kind} requires a dispersion parameter")
        if not needs and self.dispersion is not None:
            raise ValueError(f"{self.kind} does not take a dispersion parameter")
        if self.dispersion is not None:
            disp = np.asarray(self.dispersion, dtype=float)
            if np.any(disp <= 0):
                raise ValueError("dispersion must be strictly positive")
            self.dispersion = disp if disp.ndim else float(disp)

    @property
    def is_binary(self) -> bool:
        return self.kind == "bernoulli"

    @property
    def is_count(self) -> bool:
        return self.kind in COUNT_FAMILIES

    def mean_from_eta(self, eta):
        """Inverse canonical link, with the clamping rules applied."""
        if self.link == "logit":
            return sigmoid(eta)
        if self.link == "log":
            return np.exp(clip_eta(eta))
        return np.asarray(eta, dtype=float)

    def _theta(self, species=None):
        disp = self.dispersion
        if disp is None:
            return None
        disp = np.asarray(disp, dtype=float)
        if disp.ndim and species is not None:
            return disp[species]
        return disp

    def nll(self, y, mean, species=None):
        """-log P(y | mean, dispersion); `species` indexes per-species dispersion."""
        y = np.asarray(y, dtype=float)
        mean = np.asarray(mean, dtype=float)
        if self.kind == "bernoulli":
            if np.any((mean <= 0) | (mean >= 1)):
                raise ValueError("Bernoulli mean must lie in (0, 1)")
            return bernoulli_nll(y, mean)
        if self.kind == "normal":
            return normal_nll(y, mean, self._theta(species))
        if np.any(mean <= 0):
            raise ValueError(f"{self.kind} mean must be strictly positive")
        if self.kind == "poisson":
            return poisson_nll(y, mean)
        if self.kind == "negative_binomial":
            return nb_nll(y, mean, self._theta(species))
        raise ValueError("zero_inflated_nb requires the occupancy probability; use zinb_nll")

    def nll_gradient(self, y, eta, species=None):
        """d nll / d eta at the linear predictor, in closed form.

        Bernoulli-logit: sigma(eta) - y. Poisson-log: exp(eta) - y.
        NB-log: (theta + y) * mu / (theta + mu) - y. Normal-identity: (eta - y) / variance.
        Zero where the eta clamp is active (the clamped nll is locally constant).
        """
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        inside = (np.abs(eta) < ETA_MAX).astype(float)
        if self.kind == "bernoulli":
            return (sigmoid(eta) - y) * inside
        if self.kind == "poisson":
            return (np.exp(clip_eta(eta)) - y) * inside
        if self.kind == "negative_binomial":
            theta = self._theta(species)
            mu = np.exp(clip_eta(eta))
            return ((theta + y) * mu / (theta + mu) - y) * inside
        if self.kind == "normal":
            return (eta - y) / self._theta(species)
        raise ValueError("zero_inflated_nb gradients are assembled by the aggregation mode")

    def nll_dispersion_gradient(self, y, eta, species=None):
        """d nll / d log(dispersion); zero for the dispersion-free kinds."""
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.kind == "normal":
            variance = self._theta(species)
            return 0.5 - (y - eta) ** 2 / (2.0 * variance)
        if self.kind != "negative_binomial":
            return np.zeros_like(eta)
        theta = self._theta(species)
        mu = np.exp(clip_eta(eta))
        dtheta = -(
            digamma(y + theta)
            - digamma(theta)
            + np.log(theta)
            + 1.0
            - np.log(theta + mu)
            - (theta + y) / (theta + mu)
        )
        return dtheta * theta
