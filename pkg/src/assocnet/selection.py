"""Hyperparameter selection: information criteria and k-fold cross-validation.

The grid spans embedding dimension d and the L1 penalty. Count models are
scored by mean Poisson deviance on held-out sites (lower is better); binary
models by AUC or accuracy (higher is better). Grid cells are fit with
independent seeds so cells stay comparable (no warm starts).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._utils import substream
from .context import BioticContextSpec, EmbeddingPair
from .data import CommunityData, stratified_folds
from .families import poisson_deviance
from .model import FittedModel, model_nll, predict
from .training import TrainConfig, fit, initialize

LAMBDA_PRESETS = {
    "alpine-text": [0.01, 0.015, 0.02, 0.025],
    "alpine-table": [0.01, 0.02, 0.03, 0.04],
}


def default_dims(n_species: int) -> list:
    """Powers of two up to half the species pool."""
    dims, d = [], 2
    while d <= n_species / 2:
        dims.append(d)
        d *= 2
    return dims or [1]


@dataclass
class SelectionGrid:
    """Search space and scoring rule for hyperparameter selection."""

    dims: list | None = None  # default: powers of 2 up to m/2
    lambdas: list = field(default_factory=lambda: list(LAMBDA_PRESETS["alpine-text"]))
    criterion: str = "cv"  # "aic" | "bic" | "ebic" | "cv"
    folds: int = 10
    metric: str = "poisson_deviance"  # "poisson_deviance" | "auc" | "accuracy"
    ebic_gamma: float = 0.5

    def __post_init__(self):
        if self.criterion not in ("aic", "bic", "ebic", "cv"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.metric not in ("poisson_deviance", "auc", "accuracy"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.criterion == "cv" and self.folds < 2:
            raise ValueError("cross-validation needs at least 2 folds")
        if not self.lambdas:
            raise ValueError("empty lambda grid")

    def resolved_dims(self, n_species: int) -> list:
        dims = self.dims if self.dims else default_dims(n_species)
        if not dims:
            raise ValueError("empty dimension grid")
        return list(dims)


def information_criterion(logL: float, k_params: int, n_obs: int, kind: str,
                          gamma: float = 0.5, n_species: int | None = None) -> float:
    """AIC = 2k - 2logL; BIC = k ln(n) - 2logL; eBIC = BIC + 2*gamma*k*ln(m)."""
    if n_obs < 1:
        raise ValueError("need at least one observation")
    if kind == "aic":
        return 2.0 * k_params - 2.0 * logL
    if kind == "bic":
        return k_params * float(np.log(n_obs)) - 2.0 * logL
    if kind == "ebic":
        if n_species is None:
            raise ValueError("eBIC needs the species count")
        return (k_params * float(np.log(n_obs)) - 2.0 * logL
                + 2.0 * gamma * k_params * float(np.log(n_species)))
    raise ValueError(f"unknown information criterion {kind!r}")


def effective_dimension(emb: EmbeddingPair, threshold: float = 1e-5) -> int:
    """Number of latent components carrying at least one entry >= threshold."""
    mags = np.maximum(np.abs(emb.response), np.abs(emb.effect)).max(axis=0)
    return int(np.sum(mags >= threshold))


def parameter_count(model: FittedModel, frozen_habitat: bool = False,
                    detail: bool = False):
    """Free-parameter count: habitat weights + nonzero embedding entries + dispersions.

    Offsets are fixed inputs, never counted. With detail=True the per-block
    breakdown is returned alongside.
    """
    blocks = {
        "habitat": 0 if frozen_habitat else model.habitat.weights.size,
        "embedding_nonzero": int(np.count_nonzero(model.embeddings.response)
                                 + np.count_nonzero(model.embeddings.effect)),
        "dispersions": 0 if model.family.dispersion is None
        else np.asarray(model.family.dispersion).size,
    }
    total = int(sum(blocks.values()))
    return (total, blocks) if detail else total


def _score(metric: str, y, mean, keep_cols) -> float:
    y = np.asarray(y, dtype=float)[:, keep_cols]
    mean = np.asarray(mean, dtype=float)[:, keep_cols]
    if metric == "poisson_deviance":
        return poisson_deviance(y.ravel(), mean.ravel()) / y.size
    if metric == "accuracy":
        return float(np.mean((mean >= 0.5) == (y > 0)))
    # auc over pooled held-out cells
    from .metrics import roc_auc

    return roc_auc(mean.ravel(), (y > 0).ravel())


def lower_is_better(metric: str) -> bool:
    return metric == "poisson_deviance"


@dataclass
class SelectionResult:
    rows: list  # dicts: d, lambda, fold, score
    mean_scores: dict  # (d, lambda) -> mean score
    best: tuple  # (d, lambda)
    coverage: list  # dicts describing species excluded from a fold's scoring
    criterion: str
    metric: str

    def best_key(self):
        return self.best


def _pick_best(mean_scores: dict, minimize: bool) -> tuple:
    # ties break toward smaller d, then larger lambda
    def key(cell):
        d, lam = cell
        s = mean_scores[cell]
        return (s if minimize else -s, d, -lam)

    return min(mean_scores, key=key)


def cross_validate(data: CommunityData, grid: SelectionGrid, config: TrainConfig, *,
                   mode: str = "additive", family: str = "negative_binomial",
                   context: BioticContextSpec | None = None) -> SelectionResult:
    """Stratified k-fold search over (d, lambda); returns all fold scores and the winner.

    Species absent from a fold's training sites are excluded from that fold's
    scoring and recorded in the coverage report. Fits use independent seeds
    per cell and fold.
    """
    if grid.folds > data.n_sites:
        raise ValueError(f"{grid.folds} folds exceed {data.n_sites} sites")
    fold_of = stratified_folds(data, grid.folds, seed=int(substream(config.seed, "cvfolds").integers(2**31)))
    dims = grid.resolved_dims(data.n_species)
    rows, coverage = [], []
    mean_scores = {}
    for d in dims:
        for lam in grid.lambdas:
            scores = []
            for f in range(grid.folds):
                test_rows = np.flatnonzero(fold_of == f)
                train_rows = np.flatnonzero(fold_of != f)
                sub_seed = int(substream(config.seed, "cell", d, lam, f).integers(2**31))
                cfg = replace(config, lambda_l1=float(lam), seed=sub_seed)
                train = data.subset(train_rows)
                test = data.subset(test_rows)
                model = initialize(train, d, cfg, mode=mode, family=family, context=context)
                fitted = fit(train, model, cfg)
                keep = train.abundance.sum(axis=0) > 0
                if not keep.all():
                    coverage.append({
                        "d": d, "lambda": lam, "fold": f,
                        "excluded_species": [data.species_ids[i]
                                             for i in np.flatnonzero(~keep)],
                    })
                mean = predict(fitted, test)
                score = _score(grid.metric, test.abundance, mean, keep)
                scores.append(score)
                rows.append({"d": d, "lambda": lam, "fold": f, "score": score})
            mean_scores[(d, float(lam))] = float(np.mean(scores))
    best = _pick_best(mean_scores, lower_is_better(grid.metric))
    return SelectionResult(rows, mean_scores, best, coverage, "cv", grid.metric)


def criterion_search(data: CommunityData, grid: SelectionGrid, config: TrainConfig, *,
                     mode: str = "additive", family: str = "negative_binomial",
                     context: BioticContextSpec | None = None) -> SelectionResult:
    """Full-data fits scored by an information criterion (aic/bic/ebic)."""
    dims = grid.resolved_dims(data.n_species)
    n_obs = data.n_sites * data.n_species
    rows, mean_scores = [], {}
    for d in dims:
        for lam in grid.lambdas:
            sub_seed = int(substream(config.seed, "cell", d, lam).integers(2**31))
            cfg = replace(config, lambda_l1=float(lam), seed=sub_seed)
            fitted = fit(data, initialize(data, d, cfg, mode=mode, family=family,
                                          context=context), cfg)
            logL = -model_nll(fitted, data)
            k = parameter_count(fitted, frozen_habitat=config.freeze_habitat)
            score = information_criterion(logL, k, n_obs, grid.criterion,
                                          grid.ebic_gamma, data.n_species)
            rows.append({"d": d, "lambda": lam, "fold": -1, "score": score,
                         "logL": logL, "k_params": k})
            mean_scores[(d, float(lam))] = score
    best = _pick_best(mean_scores, minimize=True)
    return SelectionResult(rows, mean_scores, best, [], grid.criterion, grid.criterion)


def grid_search(data: CommunityData, grid: SelectionGrid, config: TrainConfig, *,
                mode: str = "additive", family: str = "negative_binomial",
                context: BioticContextSpec | None = None) -> SelectionResult:
    """Dispatch on the grid's criterion: cross-validation or information criterion."""
    if grid.criterion == "cv":
        return cross_validate(data, grid, config, mode=mode, family=family, context=context)
    return criterion_search(data, grid, config, mode=mode, family=family, context=context)
