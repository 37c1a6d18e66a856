"""Stochastic community simulators with known ground-truth association networks."""

from .assembly import (
    AssemblyConfig,
    ExperimentDesign,
    assembly_step,
    draw_interactions,
    exp1_designs,
    filter_probabilities,
    generate_experiment1,
    run_assembly,
)
from .foodweb import (
    FoodWebConfig,
    TOPOLOGIES,
    generate_topology,
    simulate_occurrences,
    topological_groups,
)

__all__ = [
    "AssemblyConfig",
    "ExperimentDesign",
    "FoodWebConfig",
    "TOPOLOGIES",
    "assembly_step",
    "draw_interactions",
    "exp1_designs",
    "filter_probabilities",
    "generate_experiment1",
    "generate_topology",
    "run_assembly",
    "simulate_occurrences",
    "topological_groups",
]
