"""Ground-truth evaluation and diagnostics.

Relative abundance index (RAI) for simulated data, multi-class association
classification metrics, binary network-structure metrics (ACC/AUC/F2/TSS),
embedding structure tests and trait-embedding mutual information.

Conventions: association matrices are oriented target-rows (entry (i, j) is
the influence of source j on target i); the diagonal is always excluded.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import mannwhitneyu, rankdata

from .context import EmbeddingPair
from .data import CommunityData
from .network import NEGATIVE, NEUTRAL, POSITIVE


# ---------------------------------------------------------------------------
# RAI simulation diagnostic
# ---------------------------------------------------------------------------

@dataclass
class RaiResult:
    mean: float
    std: float
    ci_low: float
    ci_high: float
    n: int


def rai(data: CommunityData, source: int, target: int) -> RaiResult | None:
    """Relative abundance index of `source` on `target`.

    Average excess abundance of the target (over its grand mean across all
    sites) on the sites where both species are present; the interval is
    mean +/- 1.96 * std of those excesses. None when the pair never co-occurs.
    """
    y = data.abundance
    co = (y[:, target] > 0) & (y[:, source] > 0)
    n = int(co.sum())
    if n == 0:
        return None
    grand_mean = float(y[:, target].mean())
    delta = y[co, target] - grand_mean
    mean = float(delta.mean())
    std = float(delta.std())
    return RaiResult(mean, std, mean - 1.96 * std, mean + 1.96 * std, n)


def rai_matrix(data: CommunityData):
    """RaiResult (or None) for every ordered species pair, target-rows oriented."""
    m = data.n_species
    out = [[None] * m for _ in range(m)]
    for i in range(m):
        for j in range(m):
            if i != j:
                out[i][j] = rai(data, source=j, target=i)
    return out


# ---------------------------------------------------------------------------
# classification metrics
# ---------------------------------------------------------------------------

def _offdiag_mask(m: int) -> np.ndarray:
    return ~np.eye(m, dtype=bool)


def confusion_table(predicted, truth, classes=(POSITIVE, NEGATIVE, NEUTRAL)):
    """Counts[c_true][c_pred] over off-diagonal ordered pairs."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError("label matrices must have identical shapes")
    mask = _offdiag_mask(predicted.shape[0])
    table = {}
    for ct in classes:
        table[int(ct)] = {
            int(cp): int(np.sum((truth == ct) & (predicted == cp) & mask))
            for cp in classes
        }
    return table


def classify_associations(predicted, truth):
    """One-vs-rest precision/recall/F1 per class over off-diagonal ordered pairs."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    mask = _offdiag_mask(predicted.shape[0])
    out = {}
    for cls in (POSITIVE, NEGATIVE, NEUTRAL):
        tp = np.sum((predicted == cls) & (truth == cls) & mask)
        fp = np.sum((predicted == cls) & (truth != cls) & mask)
        fn = np.sum((predicted != cls) & (truth == cls) & mask)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall)) if precision + recall else 0.0
        out[int(cls)] = {"precision": float(precision), "recall": float(recall),
                         "f1": float(f1)}
    return out


def roc_auc(scores, labels) -> float | None:
    """Rank-statistic AUC (ties count 1/2); None when one class is absent."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n1 = int(labels.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def pr_auc(scores, labels) -> float | None:
    """Trapezoid area under the precision-recall curve, scores ranked descending."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = np.cumsum(labels[order])
    k = np.arange(1, labels.size + 1)
    precision = hits / k
    recall = hits / n_pos
    # prepend the (recall=0, precision of the first point) anchor
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[precision[0]], precision])
    return float(np.trapz(p, r))


def class_pr_auc(strengths, truth) -> dict:
    """Per-class PR-AUC over off-diagonal pairs, ranked by the class-signed strength.

    positive is ranked by strength, negative by -strength, neutral by -|strength|.
    """
    a = np.asarray(strengths, dtype=float)
    truth = np.asarray(truth)
    mask = _offdiag_mask(a.shape[0])
    vals = a[mask]
    t = truth[mask]
    return {
        POSITIVE: pr_auc(vals, t == POSITIVE),
        NEGATIVE: pr_auc(-vals, t == NEGATIVE),
        NEUTRAL: pr_auc(-np.abs(vals), t == NEUTRAL),
    }


def binary_structure_metrics(strengths, reference, eps_pos: float = 0.05) -> dict:
    """ACC, ROC-AUC, F2 and TSS of a strength matrix against a binary reference.

    Predictions are thresholded at eps_pos for ACC/F2/TSS; the AUC ranks the
    raw strengths. The diagonal is excluded. AUC is None when the reference
    is all-zero or all-one.
    """
    a = np.asarray(strengths, dtype=float)
    ref = np.asarray(reference)
    if a.shape != ref.shape:
        raise ValueError("prediction and reference shapes differ")
    mask = _offdiag_mask(a.shape[0])
    pred = a[mask] > eps_pos
    truth = ref[mask].astype(bool)
    tp = float(np.sum(pred & truth))
    tn = float(np.sum(~pred & ~truth))
    fp = float(np.sum(pred & ~truth))
    fn = float(np.sum(~pred & truth))
    acc = (tp + tn) / truth.size
    sens = tp / (tp + fn) if tp + fn else 0.0
    spec = tn / (tn + fp) if tn + fp else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f2 = (5 * precision * sens / (4 * precision + sens)) if precision + sens else 0.0
    return {
        "acc": acc,
        "auc": roc_auc(a[mask], truth),
        "f2": f2,
        "tss": sens + spec - 1.0,
        "sensitivity": sens,
        "specificity": spec,
    }


@dataclass
class EvaluationReport:
    """Flat container for the full evaluation of one predicted network."""

    per_class: dict  # class -> precision/recall/f1
    pr_auc: dict  # class -> PR-AUC
    confusion: dict
    binary: dict | None  # acc/auc/f2/tss against a binary reference
    eps_pos: float
    eps_neg: float
    reference: str

    def to_dict(self):
        names = {POSITIVE: "positive", NEGATIVE: "negative", NEUTRAL: "neutral"}
        return {
            "per_class": {names[c]: v for c, v in self.per_class.items()},
            "pr_auc": {names[c]: v for c, v in self.pr_auc.items()},
            "confusion": {names[ct]: {names[cp]: n for cp, n in row.items()}
                          for ct, row in self.confusion.items()},
            "binary": self.binary,
            "thresholds": {"eps_pos": self.eps_pos, "eps_neg": self.eps_neg},
            "reference": self.reference,
        }


def evaluate_labels(strengths, truth_labels, eps_pos: float = 0.05,
                    eps_neg: float = 0.05) -> EvaluationReport:
    """Multi-class evaluation of a strength matrix against {pos, neg, neutral} truth."""
    from .network import discretize

    predicted = discretize(strengths, eps_pos, eps_neg)
    return EvaluationReport(
        per_class=classify_associations(predicted, truth_labels),
        pr_auc=class_pr_auc(strengths, truth_labels),
        confusion=confusion_table(predicted, truth_labels),
        binary=None,
        eps_pos=eps_pos,
        eps_neg=eps_neg,
        reference="labels",
    )


def evaluate_binary(strengths, reference_adjacency, eps_pos: float = 0.05,
                    reference_name: str = "metaweb") -> EvaluationReport:
    """Binary structure evaluation (metaweb / realized network reference)."""
    truth_labels = np.where(np.asarray(reference_adjacency) > 0, POSITIVE, NEUTRAL)
    predicted = np.where(np.asarray(strengths) > eps_pos, POSITIVE, NEUTRAL)
    return EvaluationReport(
        per_class=classify_associations(predicted, truth_labels),
        pr_auc=class_pr_auc(strengths, truth_labels),
        confusion=confusion_table(predicted, truth_labels),
        binary=binary_structure_metrics(strengths, reference_adjacency, eps_pos),
        eps_pos=eps_pos,
        eps_neg=eps_pos,
        reference=reference_name,
    )


# ---------------------------------------------------------------------------
# embedding structure diagnostics
# ---------------------------------------------------------------------------

def cosine_similarity_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    norms = np.linalg.norm(M, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = M / safe[:, None]
    return unit @ unit.T


def _pair_values(sim, labels):
    m = sim.shape[0]
    iu = np.triu_indices(m, k=1)
    same = np.asarray(labels)[iu[0]] == np.asarray(labels)[iu[1]]
    vals = sim[iu]
    return vals[same], vals[~same]


def group_similarity_test(M, group_labels):
    """One-sided Mann-Whitney U: within-group cosine similarity > between-group.

    Exact enumeration for small samples, normal approximation with tie
    correction beyond 20 values per side. Returns (U, p).
    """
    labels = np.asarray(group_labels)
    if np.unique(labels).size < 2:
        raise ValueError("group test needs at least two groups")
    sizes = np.bincount(labels)
    if np.any(sizes == 1):
        warnings.warn("groups of size 1 contribute no within-group pairs")
    within, between = _pair_values(cosine_similarity_matrix(M), labels)
    if within.size == 0 or between.size == 0:
        raise ValueError("need both within- and between-group pairs")
    method = "asymptotic" if min(within.size, between.size) > 20 else "exact"
    res = mannwhitneyu(within, between, alternative="greater", method=method)
    return float(res.statistic), float(res.pvalue)


def embedding_group_test(emb: EmbeddingPair, group_labels) -> dict:
    """(U, p) per embedding matrix, testing group cohesion of the latent space."""
    return {
        "response": group_similarity_test(emb.response, group_labels),
        "effect": group_similarity_test(emb.effect, group_labels),
    }


def _pearson(x, y) -> float:
    x = x - x.mean()
    y = y - y.mean()
    denom = np.sqrt((x @ x) * (y @ y))
    return float(x @ y / denom) if denom > 0 else np.nan


def similarity_correlation(M, target_similarity, n_permutations: int = 10000,
                           seed: int = 0, method: str = "pearson"):
    """Correlation between embedding cosine similarity and a target similarity.

    Computed over unordered species pairs; the p-value comes from permuting
    species identities of the target matrix (two-sided, with the +1
    small-sample correction). Returns (r, p) or None for degenerate inputs.
    """
    sim = cosine_similarity_matrix(M)
    target = np.asarray(target_similarity, dtype=float)
    m = sim.shape[0]
    iu = np.triu_indices(m, k=1)
    x, y = sim[iu], target[iu]
    if np.all(x == x[0]) or np.all(y == y[0]):
        return None

    def corr(a, b):
        if method == "spearman":
            a, b = rankdata(a), rankdata(b)
        return _pearson(a, b)

    r = corr(x, y)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_permutations):
        perm = rng.permutation(m)
        y_perm = target[np.ix_(perm, perm)][iu]
        if abs(corr(x, y_perm)) >= abs(r) - 1e-15:
            hits += 1
    p = (hits + 1) / (n_permutations + 1)
    return float(r), float(p)


def shared_prey_similarity(adjacency) -> np.ndarray:
    """Jaccard similarity of prey sets (rows of a consumer->prey adjacency)."""
    adj = np.asarray(adjacency, dtype=bool)
    inter = adj.astype(float) @ adj.T.astype(float)
    sizes = adj.sum(axis=1).astype(float)
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def niche_overlap_similarity(optima, scale: float | None = None) -> np.ndarray:
    """Similarity from |mu_i - mu_j|, mapped to [0, 1] by the gradient span."""
    mu = np.asarray(optima, dtype=float)
    dist = np.abs(mu[:, None] - mu[None, :])
    scale = float(dist.max()) if scale is None else float(scale)
    return 1.0 - dist / scale if scale > 0 else np.ones_like(dist)


# ---------------------------------------------------------------------------
# trait-embedding mutual information
# ---------------------------------------------------------------------------

def _quantile_bins(x, bins: int) -> np.ndarray:
    edges = np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, x, side="right")


def trait_embedding_mi(traits, M, bins: int = 4) -> np.ndarray:
    """Plug-in mutual information between each trait and each embedding dimension.

    Both variables are quantile-binned into `bins` levels; the estimate is the
    plug-in MI of the joint histogram (nats). Constant traits give 0 with a
    warning. Requires at least bins^2 species.
    """
    traits = np.atleast_2d(np.asarray(traits, dtype=float))
    if traits.shape[0] == 1 and np.asarray(M).shape[0] != 1:
        traits = traits.T
    M = np.asarray(M, dtype=float)
    m = M.shape[0]
    if traits.shape[0] != m:
        raise ValueError("traits and embeddings must cover the same species")
    if m < bins**2:
        raise ValueError(f"need at least bins^2 = {bins**2} species")
    out = np.zeros((traits.shape[1], M.shape[1]))
    for t in range(traits.shape[1]):
        if np.all(traits[:, t] == traits[0, t]):
            warnings.warn(f"trait {t} is constant; MI set to 0")
            continue
        bt = _quantile_bins(traits[:, t], bins)
        for d in range(M.shape[1]):
            bd = _quantile_bins(M[:, d], bins)
            joint = np.zeros((bins, bins))
            np.add.at(joint, (bt, bd), 1.0)
            joint /= m
            px = joint.sum(axis=1, keepdims=True)
            py = joint.sum(axis=0, keepdims=True)
            nz = joint > 0
            out[t, d] = float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))
    return out
