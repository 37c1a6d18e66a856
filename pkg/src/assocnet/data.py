"""Observational data structures, CSV ingestion, covariate preprocessing and splitting.

Canonical exchange format: CSV with the first row naming species (or
covariates) and the first column holding site ids. Preprocessing expands
categorical covariates to one-hot indicators, z-scores selected columns
(statistics frozen on the fitting rows) and appends squared copies of
selected columns.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from ._utils import atomic_write_text, format_float


class DataError(ValueError):
    """Raised for ingestion/validation failures; messages carry row/column locations."""


def _freeze(arr):
    if arr is not None:
        arr = np.asarray(arr)
        arr.flags.writeable = False
    return arr


@dataclass
class PreprocessSpec:
    """Which covariate columns to one-hot encode, z-score, and square-augment.

    Indices refer to the raw covariate columns. Categorical and scaled sets
    must be disjoint; quadratic columns cannot be categorical.
    """

    categorical_columns: list = field(default_factory=list)
    scale_columns: list = field(default_factory=list)
    add_quadratic: list = field(default_factory=list)

    def __post_init__(self):
        cat, sca = set(self.categorical_columns), set(self.scale_columns)
        if cat & sca:
            raise DataError(f"columns {sorted(cat & sca)} are both categorical and scaled")
        if cat & set(self.add_quadratic):
            raise DataError("categorical columns cannot be square-augmented")

    def to_dict(self):
        return {
            "categorical_columns": list(self.categorical_columns),
            "scale_columns": list(self.scale_columns),
            "add_quadratic": list(self.add_quadratic),
        }


@dataclass
class PreprocessStats:
    """Frozen preprocessing statistics, reusable on new rows without refitting."""

    column_names: list
    output_names: list
    categorical_levels: dict  # column name -> sorted list of levels
    scale_means: dict  # column name -> mean on the fitting rows
    scale_stds: dict  # column name -> std (population) on the fitting rows

    def to_dict(self):
        return {
            "column_names": self.column_names,
            "output_names": self.output_names,
            "categorical_levels": self.categorical_levels,
            "scale_means": self.scale_means,
            "scale_stds": self.scale_stds,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            column_names=list(d["column_names"]),
            output_names=list(d["output_names"]),
            categorical_levels={k: list(v) for k, v in d["categorical_levels"].items()},
            scale_means={k: float(v) for k, v in d["scale_means"].items()},
            scale_stds={k: float(v) for k, v in d["scale_stds"].items()},
        )


@dataclass
class CommunityData:
    """Site x species abundances with covariates and optional side information.

    Immutable after construction (arrays are write-protected); safe to share
    across parallel workers.
    """

    abundance: np.ndarray  # (n, m) non-negative
    covariates: np.ndarray  # (n, p) preprocessed reals
    site_ids: list
    species_ids: list
    coordinates: np.ndarray | None = None  # (n, 2) planar
    time_index: np.ndarray | None = None  # (n,) integers
    offsets: np.ndarray | None = None  # (m,) per-species offsets
    group_labels: np.ndarray | None = None  # (m,) prior group indices
    binary: bool = False
    raw_covariates: np.ndarray | None = None  # pre-transformation values (object dtype ok)
    covariate_names: list | None = None
    raw_covariate_names: list | None = None
    preprocess: tuple | None = None  # (PreprocessSpec, PreprocessStats)

    def __post_init__(self):
        self.abundance = np.asarray(self.abundance, dtype=float)
        self.covariates = np.asarray(self.covariates, dtype=float)
        n, m = self.abundance.shape
        if np.any(np.isnan(self.abundance)):
            k, i = np.argwhere(np.isnan(self.abundance))[0]
            raise DataError(f"missing abundance at site {self.site_ids[k]!r}, species {self.species_ids[i]!r}")
        if np.any(self.abundance < 0):
            k, i = np.argwhere(self.abundance < 0)[0]
            raise DataError(f"negative abundance at site {self.site_ids[k]!r}, species {self.species_ids[i]!r}")
        if self.covariates.shape[0] != n:
            raise DataError(
                f"covariate rows ({self.covariates.shape[0]}) do not match abundance rows ({n})"
            )
        if len(self.site_ids) != n or len(self.species_ids) != m:
            raise DataError("id lists do not match matrix dimensions")
        if len(set(self.species_ids)) != m:
            raise DataError("species ids are not unique")
        if self.binary and np.any((self.abundance != 0) & (self.abundance != 1)):
            k, i = np.argwhere((self.abundance != 0) & (self.abundance != 1))[0]
            raise DataError(f"binary data declared but entry at site {self.site_ids[k]!r}, "
                            f"species {self.species_ids[i]!r} is not 0/1")
        if self.time_index is not None:
            self.time_index = np.asarray(self.time_index, dtype=int)
            if self.time_index.shape != (n,):
                raise DataError("time_index length does not match site count")
        if self.coordinates is not None:
            self.coordinates = np.asarray(self.coordinates, dtype=float)
            if self.coordinates.shape != (n, 2):
                raise DataError("coordinates must be n x 2")
        if self.group_labels is not None:
            self.group_labels = np.asarray(self.group_labels, dtype=int)
            if self.group_labels.shape != (m,):
                raise DataError("group_labels must cover all species")
        if self.offsets is not None:
            self.offsets = np.asarray(self.offsets, dtype=float)
            if self.offsets.shape != (m,):
                raise DataError("offsets must have one value per species")
        for name in ("abundance", "covariates", "coordinates", "time_index",
                     "offsets", "group_labels"):
            setattr(self, name, _freeze(getattr(self, name)))

    @property
    def n_sites(self) -> int:
        return self.abundance.shape[0]

    @property
    def n_species(self) -> int:
        return self.abundance.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def subset(self, rows) -> "CommunityData":
        """New CommunityData restricted to the given site rows."""
        rows = np.asarray(rows, dtype=int)
        return replace(
            self,
            abundance=self.abundance[rows].copy(),
            covariates=self.covariates[rows].copy(),
            site_ids=[self.site_ids[r] for r in rows],
            coordinates=None if self.coordinates is None else self.coordinates[rows].copy(),
            time_index=None if self.time_index is None else self.time_index[rows].copy(),
            raw_covariates=None if self.raw_covariates is None else self.raw_covariates[rows].copy(),
        )


def _read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or len(rows[0]) < 2:
        raise DataError(f"{path}: expected a header row, an id column and at least one data cell")
    header = [c.strip() for c in rows[0][1:]]
    ids = [r[0].strip() for r in rows[1:]]
    cells = [r[1:] for r in rows[1:]]
    width = len(header)
    for r, row in enumerate(cells):
        if len(row) != width:
            raise DataError(f"{path}: row {r + 2} has {len(row)} cells, expected {width}")
    return header, ids, cells


def _parse_numeric(cells, path, col_names, skip_cols=()):
    out = np.empty((len(cells), len(col_names)), dtype=object)
    for r, row in enumerate(cells):
        for c, cell in enumerate(row):
            if c in skip_cols:
                out[r, c] = cell.strip()
                continue
            try:
                out[r, c] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: unparseable cell at row {r + 2}, column {col_names[c]!r}: {cell!r}"
                ) from None
    return out


def preprocess_covariates(raw, names, spec: PreprocessSpec, fit_rows=None,
                          stats: PreprocessStats | None = None):
    """Apply one-hot expansion, z-scoring and quadratic augmentation.

    When `stats` is None, scaling statistics and categorical levels are fit on
    `fit_rows` (all rows by default) and returned for reuse; otherwise the
    frozen `stats` are applied as-is.
    """
    raw = np.asarray(raw, dtype=object)
    n, p = raw.shape
    for idx in set(spec.categorical_columns) | set(spec.scale_columns) | set(spec.add_quadratic):
        if not 0 <= idx < p:
            raise DataError(f"preprocess column index {idx} out of range (p={p})")
    fit_rows = np.arange(n) if fit_rows is None else np.asarray(fit_rows, dtype=int)
    fit = stats is None
    if fit:
        stats = PreprocessStats(list(names), [], {}, {}, {})

    columns, out_names = [], []
    cat = set(spec.categorical_columns)
    for c in range(p):
        name = names[c]
        if c in cat:
            if fit:
                levels = sorted({str(v) for v in raw[fit_rows, c]})
                stats.categorical_levels[name] = levels
            levels = stats.categorical_levels[name]
            for lv in levels:
                columns.append((np.array([str(v) for v in raw[:, c]]) == lv).astype(float))
                out_names.append(f"{name}={lv}")
        else:
            col = raw[:, c].astype(float)
            if c in set(spec.scale_columns):
                if fit:
                    mu = float(np.mean(col[fit_rows]))
                    sd = float(np.std(col[fit_rows]))
                    if sd == 0:
                        raise DataError(f"cannot scale constant column {name!r}")
                    stats.scale_means[name], stats.scale_stds[name] = mu, sd
                col = (col - stats.scale_means[name]) / stats.scale_stds[name]
            columns.append(col)
            out_names.append(name)
            if c in set(spec.add_quadratic):
                columns.append(col**2)
                out_names.append(f"{name}^2")
    if fit:
        stats.output_names = out_names
    return np.column_stack(columns), out_names, stats


def load_community(abundance_path, covariates_path, options: PreprocessSpec | None = None,
                   *, binary: bool = False, fit_rows=None,
                   stats: PreprocessStats | None = None) -> CommunityData:
    """Load and validate a community-matrix CSV pair, applying preprocessing.

    Scaling statistics are fit on `fit_rows` (default: all) unless frozen
    `stats` are supplied, and are stored on the result for reuse.
    """
    sp_names, ab_sites, ab_cells = _read_table(abundance_path)
    cov_names, cov_sites, cov_cells = _read_table(covariates_path)
    if len(cov_sites) != len(ab_sites):
        raise DataError(
            f"dimension mismatch: {covariates_path} has {len(cov_sites)} rows, "
            f"{abundance_path} has {len(ab_sites)}"
        )
    abundance = _parse_numeric(ab_cells, abundance_path, sp_names).astype(float)
    spec = options or PreprocessSpec()
    raw_cov = _parse_numeric(cov_cells, covariates_path, cov_names,
                             skip_cols=set(spec.categorical_columns))
    cov, out_names, stats = preprocess_covariates(raw_cov, cov_names, spec, fit_rows, stats)
    return CommunityData(
        abundance=abundance,
        covariates=cov,
        site_ids=ab_sites,
        species_ids=sp_names,
        binary=binary,
        raw_covariates=_freeze(raw_cov),
        covariate_names=out_names,
        raw_covariate_names=cov_names,
        preprocess=(spec, stats),
    )


def _write_table(path, corner, col_names, row_ids, matrix):
    lines = [",".join([corner] + [str(c) for c in col_names])]
    for rid, row in zip(row_ids, matrix):
        cells = [str(rid)]
        for v in row:
            cells.append(format_float(v) if isinstance(v, (int, float, np.floating)) else str(v))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_community(data: CommunityData, abundance_path, covariates_path) -> None:
    """Write the abundance/covariate CSV pair (raw covariates when available)."""
    _write_table(abundance_path, "site", data.species_ids, data.site_ids, data.abundance)
    if data.raw_covariates is not None:
        _write_table(covariates_path, "site", data.raw_covariate_names, data.site_ids,
                     data.raw_covariates)
    else:
        _write_table(covariates_path, "site", data.covariate_names or
                     [f"x{j}" for j in range(data.n_covariates)], data.site_ids, data.covariates)


def save_preprocess(path, spec: PreprocessSpec, stats: PreprocessStats) -> None:
    atomic_write_text(path, json.dumps({"spec": spec.to_dict(), "stats": stats.to_dict()},
                                       indent=2, sort_keys=True) + "\n")


def load_preprocess(path):
    with open(path) as fh:
        d = json.load(fh)
    return PreprocessSpec(**d["spec"]), PreprocessStats.from_dict(d["stats"])


def species_offsets(data: CommunityData) -> np.ndarray:
    """Per-species offset: mean abundance over the sites where the species occurs.

    Species never observed get offset 0 and a warning.
    """
    y = data.abundance
    present = y > 0
    counts = present.sum(axis=0)
    silent = counts == 0
    if np.any(silent):
        missing = [data.species_ids[i] for i in np.flatnonzero(silent)]
        warnings.warn(f"species never observed, offset set to 0: {missing}")
    with np.errstate(invalid="ignore"):
        offsets = np.where(silent, 0.0, y.sum(axis=0) / np.maximum(counts, 1))
    return offsets


def _iterative_stratification(presence, proportions, rng):
    """Assign rows to splits, balancing each label's occurrences across splits.

    Classic iterative stratification: repeatedly take the label with the
    fewest remaining unassigned rows and hand each of its rows to the split
    with the greatest remaining demand for that label (ties: split with the
    greatest total remaining demand, then a seeded random draw).
    """
    presence = np.asarray(presence, dtype=bool)
    n, m = presence.shape
    proportions = np.asarray(proportions, dtype=float)
    desired = presence.sum(axis=0)[:, None] * proportions[None, :]  # (m, n_splits)
    total_desired = n * proportions.astype(float)
    assignment = np.full(n, -1, dtype=int)

    while True:
        unassigned = assignment < 0
        if not unassigned.any():
            break
        remaining = presence[unassigned].sum(axis=0)
        active = np.flatnonzero(remaining > 0)
        if active.size == 0:
            for r in np.flatnonzero(unassigned):
                order = np.lexsort((rng.random(len(proportions)), -total_desired))
                assignment[r] = order[0]
                total_desired[assignment[r]] -= 1
            break
        label = active[np.argmin(remaining[active])]
        for r in np.flatnonzero(unassigned & presence[:, label]):
            demand = desired[label]
            best = np.flatnonzero(demand == demand.max())
            if len(best) > 1:
                tot = total_desired[best]
                best = best[tot == tot.max()]
            s = int(best[0] if len(best) == 1 else rng.choice(best))
            assignment[r] = s
            desired[presence[r], s] -= 1
            total_desired[s] -= 1
    return assignment


def stratified_folds(data: CommunityData, k: int, seed: int) -> np.ndarray:
    """Fold index per site, balancing species occurrences across k folds."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    rng = np.random.default_rng(seed)
    return _iterative_stratification(data.abundance > 0, np.full(k, 1.0 / k), rng)


def stratified_split(data: CommunityData, test_fraction: float, seed: int):
    """Split sites into (train, test) preserving per-species occurrence proportions.

    Sites carrying a species that occurs exactly once are forced into train
    (that species cannot be stratified) and listed in a warning. Deterministic
    for a fixed seed.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    presence = data.abundance > 0
    occ = presence.sum(axis=0)
    singles = np.flatnonzero(occ == 1)
    if singles.size:
        warnings.warn(
            "species occurring once cannot be stratified, their sites go to train: "
            f"{[data.species_ids[i] for i in singles]}"
        )
    forced = presence[:, singles].any(axis=1)
    rng = np.random.default_rng(seed)
    strat = presence[:, occ >= 2]
    assignment = _iterative_stratification(
        strat[~forced], np.array([1.0 - test_fraction, test_fraction]), rng
    )
    free = np.flatnonzero(~forced)
    train = np.concatenate([np.flatnonzero(forced), free[assignment == 0]])
    test = free[assignment == 1]
    return np.sort(train), np.sort(test)


def occurrence_balance(data: CommunityData, test_idx) -> np.ndarray:
    """Per-species share of occurrences that landed in the test set."""
    presence = data.abundance > 0
    occ = presence.sum(axis=0).astype(float)
    in_test = presence[np.asarray(test_idx, dtype=int)].sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(occ > 0, in_test / occ, np.nan)
