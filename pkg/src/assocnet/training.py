"""Penalized stochastic-gradient training of the conditional abundance model.

The objective is the mean per-pair negative log-likelihood plus the elastic
net penalty on the embedding matrices. Minibatches run over (site, species)
pairs; the L1 term is handled by proximal soft-thresholding after each step and
the optional non-negativity constraint by projection (clipping at zero).
Early stopping monitors the unpenalized loss on a held-out validation subset
of sites.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from . import families as fam
from ._utils import substream
from .context import BioticContextSpec, ContextEngine, EmbeddingPair
from .data import CommunityData, species_offsets, stratified_split
from .families import ResponseFamily
from .model import FittedModel, HabitatModel, pair_gradients, pair_nll, validate_mode_family


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    optimizer: str = "adam"  # "adam" | "sgd_momentum"
    learning_rate: float = 0.01
    momentum: float = 0.8
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 5
    tolerance: float = 1e-3
    lambda_l1: float = 0.0
    lambda_l2: float = 0.0
    non_negative: bool = False
    share_groups: bool = False
    negative_subsample: float = 1.0  # fraction of y=0 pairs drawn per epoch
    seed: int = 0
    freeze_habitat: bool = False
    habitat_init: str = "glm"  # "glm" | "zero"
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")
        if not 0.0 < self.negative_subsample <= 1.0:
            raise ValueError("negative_subsample must lie in (0, 1]")
        if self.lambda_l1 < 0 or self.lambda_l2 < 0:
            raise ValueError("penalties must be non-negative")
        if self.habitat_init not in ("glm", "zero"):
            raise ValueError(f"unknown habitat_init {self.habitat_init!r}")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def penalty(emb: EmbeddingPair, lambda_l1: float, lambda_l2: float) -> float:
    """Elastic net on the embeddings: l1*(sum|P|+sum|Q|) + l2*(sum P^2 + sum Q^2)."""
    if lambda_l1 < 0 or lambda_l2 < 0:
        raise ValueError("penalties must be non-negative")
    P, Q = emb.response, emb.effect
    return float(
        lambda_l1 * (np.abs(P).sum() + np.abs(Q).sum())
        + lambda_l2 * ((P**2).sum() + (Q**2).sum())
    )


def pretrain_habitat(data: CommunityData, mode: str, family_kind: str,
                     ridge: float = 1e-4) -> np.ndarray:
    """Per-species GLM of the response on the covariates, for habitat-weight warm starts.

    additive mode regresses the raw response with the family's link (Poisson
    surrogate for the NB kinds, whose dispersion is unknown at this point);
    multiplicative and hierarchical modes fit logistic occupancy models. A
    small ridge term keeps separable logistic fits finite.
    """
    if mode == "additive":
        glm_kind = "poisson" if family_kind in fam.COUNT_FAMILIES else family_kind
        target = data.abundance
    else:
        glm_kind = "bernoulli"
        target = (data.abundance > 0).astype(float)
    glm = ResponseFamily(glm_kind, dispersion=1.0 if glm_kind == "normal" else None)
    Xt = np.column_stack([data.covariates, np.ones(data.n_sites)])
    weights = np.zeros((data.n_species, Xt.shape[1]))

    for i in range(data.n_species):
        y = target[:, i]

        def objective(w):
            eta = Xt @ w
            val = glm.nll(y, glm.mean_from_eta(eta)).sum() + ridge * (w @ w)
            grad = Xt.T @ glm.nll_gradient(y, eta) + 2.0 * ridge * w
            return val, grad

        res = minimize(objective, np.zeros(Xt.shape[1]), jac=True, method="L-BFGS-B")
        weights[i] = res.x
    return weights


def initialize(data: CommunityData, d: int, config: TrainConfig, *,
               mode: str = "additive", family: str = "negative_binomial",
               context: BioticContextSpec | None = None,
               habitat_weights: np.ndarray | None = None) -> FittedModel:
    """Untrained model: embeddings ~ U(-0.01, 0.01), habitat zero or GLM-pretrained.

    Offsets come from the data (or species_offsets for count families),
    dispersions start at 1; everything is deterministic for a fixed seed.
    """
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    m = data.n_species
    if d > m:
        warnings.warn(f"embedding dimension {d} exceeds species count {m}")
    context = context or BioticContextSpec()
    fam_kind = family
    dispersion = np.ones(m) if fam_kind in fam.DISPERSED_FAMILIES else None
    family_obj = ResponseFamily(fam_kind, dispersion)
    validate_mode_family(mode, family_obj)

    if config.share_groups:
        if data.group_labels is None:
            raise ValueError("share_groups requires group_labels on the data")
        _, owner = np.unique(data.group_labels, return_inverse=True)
    else:
        owner = np.arange(m)
    n_owner = int(owner.max()) + 1

    rng = substream(config.seed, "init")
    P = rng.uniform(-0.01, 0.01, size=(n_owner, d))
    Q = rng.uniform(-0.01, 0.01, size=(n_owner, d))
    if config.non_negative:
        P, Q = np.clip(P, 0.0, None), np.clip(Q, 0.0, None)

    if habitat_weights is not None:
        H = np.asarray(habitat_weights, dtype=float)
    elif config.habitat_init == "glm":
        H = pretrain_habitat(data, mode, fam_kind)
    else:
        H = np.zeros((m, data.n_covariates + 1))

    if data.offsets is not None:
        offsets = np.asarray(data.offsets, dtype=float)
    elif fam_kind in fam.COUNT_FAMILIES:
        offsets = species_offsets(data)
    else:
        offsets = np.zeros(m)

    return FittedModel(
        habitat=HabitatModel(H),
        embeddings=EmbeddingPair(P[owner], Q[owner]),
        offsets=offsets,
        family=family_obj,
        mode=mode,
        context=context,
        training_log=[],
        seed=config.seed,
        group_labels=data.group_labels if config.share_groups else None,
        share_groups=config.share_groups,
    )


class _Adam:
    def __init__(self, lr):
        self.lr, self.b1, self.b2, self.eps = lr, 0.9, 0.999, 1e-8
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params, grads, keys):
        self.t += 1
        for k in keys:
            g = grads[k]
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            mh = m / (1.0 - self.b1**self.t)
            vh = v / (1.0 - self.b2**self.t)
            params[k] -= self.lr * mh / (np.sqrt(vh) + self.eps)


class _Momentum:
    def __init__(self, lr, momentum):
        self.lr, self.momentum = lr, momentum
        self.vel = {}

    def step(self, params, grads, keys):
        for k in keys:
            v = self.vel.setdefault(k, np.zeros_like(grads[k]))
            v *= self.momentum
            v += grads[k]
            params[k] -= self.lr * v


class _Trainer:
    """Holds parameter arrays and computes batched losses and gradients."""

    def __init__(self, data: CommunityData, model: FittedModel, config: TrainConfig):
        self.data = data
        self.config = config
        self.mode = model.mode
        self.kind = model.family.kind
        self.Y = data.abundance
        self.Xt = np.column_stack([data.covariates, np.ones(data.n_sites)])
        self.engine = ContextEngine(data, model.context)
        self.offsets = model.offsets
        m = data.n_species

        if model.share_groups:
            _, owner = np.unique(model.group_labels, return_inverse=True)
        else:
            owner = np.arange(m)
        self.owner = owner
        self.n_owner = int(owner.max()) + 1
        self.group_size = np.bincount(owner, minlength=self.n_owner).astype(float)
        first = np.array([np.flatnonzero(owner == g)[0] for g in range(self.n_owner)])

        self.params = {
            "habitat": model.habitat.weights.copy(),
            "response": model.embeddings.response[first].copy(),
            "effect": model.embeddings.effect[first].copy(),
        }
        self.has_dispersion = model.family.dispersion is not None
        if self.has_dispersion:
            disp = np.asarray(model.family.dispersion, dtype=float) * np.ones(m)
            self.params["log_theta"] = np.log(disp)
        keys = ["response", "effect"]
        if not config.freeze_habitat:
            keys.insert(0, "habitat")
        if self.has_dispersion:
            keys.append("log_theta")
        self.trainable = keys

    def expanded(self):
        return self.params["response"][self.owner], self.params["effect"][self.owner]

    def family(self) -> ResponseFamily:
        disp = np.exp(self.params["log_theta"]) if self.has_dispersion else None
        return ResponseFamily(self.kind, disp)

    def snapshot(self):
        return {k: v.copy() for k, v in self.params.items()}

    def restore(self, snap):
        for k, v in snap.items():
            self.params[k] = v.copy()

    def batch(self, rows, cols, weights, want_grads=True):
        """Weighted mean nll over the pairs and, optionally, parameter gradients."""
        P, Q = self.expanded()
        emb = EmbeddingPair(P, Q)
        H = self.params["habitat"]
        eta_a = np.einsum("bp,bp->b", self.Xt[rows], H[cols])
        eta_b, cache = self.engine.forward_batch(rows, cols, emb, self.offsets)
        y = self.Y[rows, cols]
        family = self.family()
        nll = pair_nll(self.mode, family, y, eta_a, eta_b, species=cols)
        loss = float(np.mean(weights * nll))
        if not want_grads:
            return loss, None
        da, db, dt = pair_gradients(self.mode, family, y, eta_a, eta_b, species=cols)
        w = weights / len(rows)
        grads = {}
        if not self.config.freeze_habitat:
            gH = np.zeros_like(H)
            np.add.at(gH, cols, (da * w)[:, None] * self.Xt[rows])
            grads["habitat"] = gH
        gP_sp, gQ_sp = self.engine.backward_batch(cache, db * w, P, Q)
        gP = np.zeros((self.n_owner, P.shape[1]))
        gQ = np.zeros_like(gP)
        np.add.at(gP, self.owner, gP_sp)
        np.add.at(gQ, self.owner, gQ_sp)
        # L2 part of the elastic net (L1 is proximal)
        l2 = self.config.lambda_l2
        if l2 > 0:
            gP += 2.0 * l2 * self.group_size[:, None] * self.params["response"]
            gQ += 2.0 * l2 * self.group_size[:, None] * self.params["effect"]
        grads["response"], grads["effect"] = gP, gQ
        if self.has_dispersion:
            gT = np.zeros(self.Y.shape[1])
            np.add.at(gT, cols, dt * w)
            grads["log_theta"] = gT
        return loss, grads

    def proximal(self):
        """Soft-threshold the embeddings (L1) and project under non-negativity."""
        lr, l1 = self.config.learning_rate, self.config.lambda_l1
        for k in ("response", "effect"):
            M = self.params[k]
            if l1 > 0:
                thresh = lr * l1 * self.group_size[:, None]
                M = np.sign(M) * np.maximum(np.abs(M) - thresh, 0.0)
            if self.config.non_negative:
                M = np.clip(M, 0.0, None)
            self.params[k] = M

    def mean_nll(self, data: CommunityData, engine: ContextEngine, Xt) -> float:
        """Unpenalized mean nll over every pair of `data`."""
        P, Q = self.expanded()
        emb = EmbeddingPair(P, Q)
        eta_a = Xt @ self.params["habitat"].T
        eta_b = engine.eta_b(emb, self.offsets)
        cols = np.broadcast_to(np.arange(data.n_species), data.abundance.shape)
        nll = pair_nll(self.mode, self.family(), data.abundance, eta_a, eta_b, species=cols)
        return float(np.mean(nll))

    def objective(self) -> float:
        """Training objective: mean nll on the training rows plus the penalty."""
        P, Q = self.expanded()
        return self.mean_nll(self.data, self.engine, self.Xt) + penalty(
            EmbeddingPair(P, Q), self.config.lambda_l1, self.config.lambda_l2
        )

    def to_model(self, base: FittedModel, log) -> FittedModel:
        P, Q = self.expanded()
        disp = np.exp(self.params["log_theta"]) if self.has_dispersion else None
        return replace(
            base,
            habitat=HabitatModel(self.params["habitat"].copy()),
            embeddings=EmbeddingPair(P.copy(), Q.copy()),
            family=ResponseFamily(self.kind, disp),
            training_log=log,
        )


def _epoch_pairs(Y, rng, subsample):
    """Pair list for one epoch: all presences plus a fresh draw of absences.

    Absence terms are up-weighted by 1/subsample so the gradient stays
    unbiased for the full objective.
    """
    n, m = Y.shape
    rows, cols = np.divmod(np.arange(n * m), m)
    zero = Y[rows, cols] == 0
    weights = np.ones(n * m)
    if subsample < 1.0:
        keep = ~zero
        drawn = zero & (rng.random(n * m) < subsample)
        weights[drawn] = 1.0 / subsample
        sel = keep | drawn
        rows, cols, weights = rows[sel], cols[sel], weights[sel]
    perm = rng.permutation(len(rows))
    return rows[perm], cols[perm], weights[perm]


def fit(data: CommunityData, model: FittedModel, config: TrainConfig,
        validation_sites=None) -> FittedModel:
    """Train the model by minibatch gradient descent with early stopping.

    Minimizes mean nll + elastic net over habitat weights (unless frozen),
    embeddings and dispersions; offsets stay fixed. Returns the parameters
    with the best validation loss. Raises DivergenceError if the loss goes
    non-finite.
    """
    if validation_sites is None and config.validation_fraction > 0 and data.n_sites >= 10:
        split_seed = int(substream(config.seed, "valsplit").integers(2**31))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, validation_sites = stratified_split(data, config.validation_fraction, split_seed)
    if validation_sites is not None and len(validation_sites) > 0:
        validation_sites = np.asarray(validation_sites, dtype=int)
        train_sites = np.setdiff1d(np.arange(data.n_sites), validation_sites)
        train_data = data.subset(train_sites)
        val_data = data.subset(validation_sites)
    else:
        train_data, val_data = data, None

    trainer = _Trainer(train_data, model, config)
    if val_data is not None:
        val_engine = ContextEngine(val_data, model.context)
        val_Xt = np.column_stack([val_data.covariates, np.ones(val_data.n_sites)])

    def val_loss():
        if val_data is None:
            return float("nan")
        return trainer.mean_nll(val_data, val_engine, val_Xt)

    log = [{"epoch": 0, "train_loss": trainer.objective(), "val_loss": val_loss()}]
    if config.max_epochs == 0:
        return trainer.to_model(model, log)

    opt = (_Adam(config.learning_rate) if config.optimizer == "adam"
           else _Momentum(config.learning_rate, config.momentum))
    best_snap = trainer.snapshot()
    monitored0 = log[0]["val_loss"] if val_data is not None else log[0]["train_loss"]
    best_score = monitored0  # best value seen; snapshots track it
    ref_score = monitored0  # reference for the tolerance-based patience streak
    streak = 0

    for epoch in range(1, config.max_epochs + 1):
        rng = substream(config.seed, "epoch", epoch)
        rows, cols, weights = _epoch_pairs(trainer.Y, rng, config.negative_subsample)
        for start in range(0, len(rows), config.batch_size):
            sl = slice(start, start + config.batch_size)
            loss, grads = trainer.batch(rows[sl], cols[sl], weights[sl])
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"training loss became non-finite at epoch {epoch} "
                    f"(learning rate {config.learning_rate})"
                )
            opt.step(trainer.params, grads, [k for k in trainer.trainable if k in grads])
            trainer.proximal()

        entry = {"epoch": epoch, "train_loss": trainer.objective(), "val_loss": val_loss()}
        log.append(entry)
        if not np.isfinite(entry["train_loss"]):
            raise DivergenceError(
                f"training loss became non-finite at epoch {epoch} "
                f"(learning rate {config.learning_rate})"
            )
        monitored = entry["val_loss"] if val_data is not None else entry["train_loss"]
        if monitored < best_score:
            best_score = monitored
            best_snap = trainer.snapshot()
        if ref_score - monitored > config.tolerance:
            ref_score = monitored
            streak = 0
        else:
            streak += 1
        if streak >= config.patience:
            break

    trainer.restore(best_snap)
    return trainer.to_model(model, log)


def penalized_objective(model: FittedModel, data: CommunityData, config: TrainConfig) -> float:
    """Mean per-pair nll over `data` plus the elastic net penalty — the fit objective."""
    from .model import model_nll

    n_pairs = data.n_sites * data.n_species
    return model_nll(model, data) / n_pairs + penalty(
        model.embeddings, config.lambda_l1, config.lambda_l2
    )


def gradient_check(model: FittedModel, data: CommunityData, h: float = 1e-5) -> float:
    """Worst relative error between analytic and central finite-difference gradients.

    Checks every trainable parameter of the unpenalized mean-nll objective;
    relative error is |analytic - numeric| / max(1, |analytic|).
    """
    config = TrainConfig(lambda_l1=0.0, lambda_l2=0.0, freeze_habitat=False,
                         share_groups=model.share_groups, seed=model.seed,
                         habitat_init="zero")
    trainer = _Trainer(data, model, config)
    n, m = data.abundance.shape
    rows, cols = np.divmod(np.arange(n * m), m)
    weights = np.ones(n * m)
    _, grads = trainer.batch(rows, cols, weights)

    worst = 0.0
    for key in trainer.trainable:
        arr = trainer.params[key]
        flat = arr.reshape(-1)
        gflat = grads[key].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up, _ = trainer.batch(rows, cols, weights, want_grads=False)
            flat[idx] = orig - h
            dn, _ = trainer.batch(rows, cols, weights, want_grads=False)
            flat[idx] = orig
            numeric = (up - dn) / (2.0 * h)
            err = abs(gflat[idx] - numeric) / max(1.0, abs(gflat[idx]))
            worst = max(worst, err)
    return worst
