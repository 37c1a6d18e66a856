"""Process-based stochastic community assembly along an environmental gradient.

Individuals from a regional pool of m species fill sites of fixed carrying
capacity K. Each timestep draws a fresh community of K individuals from a
multinomial whose weights combine four filters:

    W_i = B_env * P_env,i + B_comp * P_comp,i + B_fac * P_fac,i
          + B_abun * P_abund,i + p_imm

with P_env the Gaussian niche density (normalized to 1 at the optimum),
P_comp = exp(-(1/K) sum_j N_j max(0, -I_ji)) the aggregated competitive
pressure, P_fac = 1 - exp(-(1/K) sum_j N_j max(0, I_ji)) the aggregated
facilitation, and P_abund = N_i / K the reproduction term. I[j, i] is the
effect of species j on species i, in [-1, 1]. Sites are independent (no
dispersal); the immigration floor p_imm lets extinct species re-enter.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .._utils import substream
from ..data import CommunityData

ASSOCIATION_MODES = ("Env", "Pos", "Neg", "PosNeg")
DENSITIES = {"sparse": 1.0 / 3.0, "dense": 2.0 / 3.0}
SYMMETRIES = ("symmetric", "asymmetric")


@dataclass
class AssemblyConfig:
    """Parameters of one assembly simulation."""

    n_sites: int = 300
    pool_size: int = 10
    carrying_capacity: int = 100
    gradient: tuple = (0.0, 100.0)
    niche_optima: np.ndarray | None = None  # (m,), drawn uniformly if None
    niche_breadth: float | np.ndarray = 15.0
    interactions: np.ndarray | None = None  # I[j, i] = effect of j on i, zeros if None
    weight_env: float = 1.0
    weight_comp: float = 1.0
    weight_fac: float = 1.0
    weight_abund: float = 1.0
    immigration: float = 1e-3
    epochs: int = 200
    equilibrium_tol: float = 0.02  # of K, L1 change per step
    equilibrium_streak: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.carrying_capacity < 1:
            raise ValueError("carrying capacity must be >= 1")
        if self.immigration <= 0:
            raise ValueError("immigration floor must be positive")
        for w in (self.weight_env, self.weight_comp, self.weight_fac, self.weight_abund):
            if not np.isfinite(w) or w < 0:
                raise ValueError("filter weights must be finite and non-negative")
        if self.interactions is not None:
            I = np.asarray(self.interactions, dtype=float)
            if I.shape != (self.pool_size, self.pool_size):
                raise ValueError("interaction matrix must be pool_size x pool_size")
            if np.any(np.abs(I) > 1):
                raise ValueError("interaction strengths must lie in [-1, 1]")
            self.interactions = I

    def resolved(self) -> "AssemblyConfig":
        """Fill the drawn-by-default fields (niche optima, zero interactions)."""
        m = self.pool_size
        mu = self.niche_optima
        if mu is None:
            rng = substream(self.seed, "niches")
            mu = rng.uniform(self.gradient[0], self.gradient[1], size=m)
        I = np.zeros((m, m)) if self.interactions is None else self.interactions
        delta = np.broadcast_to(np.asarray(self.niche_breadth, dtype=float), (m,)).copy()
        if np.any(delta <= 0):
            raise ValueError("niche breadths must be positive")
        return replace(self, niche_optima=np.asarray(mu, dtype=float),
                       niche_breadth=delta, interactions=I)


def filter_probabilities(config: AssemblyConfig, site_env: float, counts):
    """Per-species filter probabilities (P_env, P_comp, P_fac, P_abund) at one site."""
    cfg = config if config.niche_optima is not None and config.interactions is not None \
        else config.resolved()
    N = np.asarray(counts, dtype=float)
    K = cfg.carrying_capacity
    mu = cfg.niche_optima
    delta = np.broadcast_to(np.asarray(cfg.niche_breadth, dtype=float), mu.shape)
    I = cfg.interactions
    p_env = np.exp(-((site_env - mu) ** 2) / (2.0 * delta**2))
    comp_pressure = N @ np.maximum(0.0, -I) / K  # sum_j N_j max(0, -I[j, i]) / K
    fac_pressure = N @ np.maximum(0.0, I) / K
    p_comp = np.exp(-comp_pressure)
    p_fac = 1.0 - np.exp(-fac_pressure)
    p_abund = N / K
    return p_env, p_comp, p_fac, p_abund


def assembly_step(config: AssemblyConfig, site_env: float, counts, rng) -> np.ndarray:
    """One replacement step: normalized filter weights drive a multinomial of K."""
    p_env, p_comp, p_fac, p_abund = filter_probabilities(config, site_env, counts)
    W = (config.weight_env * p_env + config.weight_comp * p_comp
         + config.weight_fac * p_fac + config.weight_abund * p_abund
         + config.immigration)
    return rng.multinomial(config.carrying_capacity, W / W.sum())


def run_assembly(config: AssemblyConfig):
    """Assemble every site independently; returns (CommunityData, steps per site).

    Each site starts from a uniform multinomial composition and iterates until
    `epochs` steps or until the L1 change stays below equilibrium_tol * K for
    equilibrium_streak consecutive steps.
    """
    cfg = config.resolved()
    m, K = cfg.pool_size, cfg.carrying_capacity
    env = substream(cfg.seed, "sites").uniform(cfg.gradient[0], cfg.gradient[1],
                                               size=cfg.n_sites)
    counts = np.zeros((cfg.n_sites, m))
    steps = np.zeros(cfg.n_sites, dtype=int)
    tol = cfg.equilibrium_tol * K
    for k in range(cfg.n_sites):
        rng = substream(cfg.seed, "site", k)
        N = rng.multinomial(K, np.full(m, 1.0 / m))
        streak = 0
        t = 0
        while t < cfg.epochs:
            new = assembly_step(cfg, env[k], N, rng)
            change = np.abs(new - N).sum()
            N = new
            t += 1
            streak = streak + 1 if change < tol else 0
            if streak >= cfg.equilibrium_streak:
                break
        counts[k] = N
        steps[k] = t
    data = CommunityData(
        abundance=counts,
        covariates=env[:, None],
        site_ids=[f"site{k}" for k in range(cfg.n_sites)],
        species_ids=[f"sp{i}" for i in range(m)],
    )
    return data, steps


@dataclass
class ExperimentDesign:
    """One cell of the factorial simulation experiment."""

    mode: str  # Env | Pos | Neg | PosNeg
    pool_size: int
    density: str = "sparse"  # sparse (1/3 of pairs) | dense (2/3)
    symmetry: str = "symmetric"

    def __post_init__(self):
        if self.mode not in ASSOCIATION_MODES:
            raise ValueError(f"unknown association mode {self.mode!r}")
        if self.density not in DENSITIES:
            raise ValueError(f"unknown density {self.density!r}")
        if self.symmetry not in SYMMETRIES:
            raise ValueError(f"unknown symmetry {self.symmetry!r}")

    @property
    def name(self) -> str:
        if self.mode == "Env":
            return f"Env_{self.pool_size}"
        return (f"{self.mode}_{self.symmetry[0].upper()}_{self.pool_size}"
                f"_{'D' if self.density == 'dense' else 'S'}")


def draw_interactions(design: ExperimentDesign, rng):
    """Interaction matrix I[j, i] for a design, plus target-row truth labels.

    Strengths are fixed at +1/-1 (polarity only). The associated unordered
    pairs are drawn uniformly; symmetric designs set both directions,
    asymmetric ones a random single direction. The returned truth matrix is
    oriented like the association matrix: truth[i, j] = sign of the influence
    of source j on target i.
    """
    m = design.pool_size
    I = np.zeros((m, m))
    if design.mode != "Env":
        pairs = [(a, b) for a in range(m) for b in range(a + 1, m)]
        count = int(len(pairs) * DENSITIES[design.density])
        chosen = rng.choice(len(pairs), size=count, replace=False)
        for idx in chosen:
            a, b = pairs[idx]
            sign = {"Pos": 1.0, "Neg": -1.0}.get(design.mode) or (
                1.0 if rng.random() < 0.5 else -1.0
            )
            if design.symmetry == "symmetric":
                I[a, b] = I[b, a] = sign
            else:
                if rng.random() < 0.5:
                    I[a, b] = sign
                else:
                    I[b, a] = sign
    truth = np.sign(I.T).astype(int)
    return I, truth


def exp1_designs() -> list:
    """The 33-dataset factorial preset.

    Env per pool size; Pos and Neg crossed with density and symmetry; the
    mixed PosNeg mode crossed with density only (symmetric).
    """
    designs = [ExperimentDesign("Env", p) for p in (10, 20, 50)]
    for mode in ("Pos", "Neg"):
        for p in (10, 20, 50):
            for density in ("sparse", "dense"):
                for symmetry in SYMMETRIES:
                    designs.append(ExperimentDesign(mode, p, density, symmetry))
    for p in (10, 20, 50):
        for density in ("sparse", "dense"):
            designs.append(ExperimentDesign("PosNeg", p, density, "symmetric"))
    assert len(designs) == 33
    return designs


def generate_experiment1(designs, base_config: AssemblyConfig, seed: int):
    """Simulate each design; yields dicts with the dataset and its ground truth."""
    out = []
    for idx, design in enumerate(designs):
        rng = substream(seed, "design", idx)
        I, truth = draw_interactions(design, rng)
        cfg = replace(base_config, pool_size=design.pool_size, interactions=I,
                      niche_optima=None, seed=int(substream(seed, "sim", idx).integers(2**31)))
        data, steps = run_assembly(cfg)
        out.append({
            "name": design.name,
            "design": design,
            "config": cfg.resolved(),
            "data": data,
            "interactions": I,
            "truth": truth,
            "steps": steps,
        })
    return out
