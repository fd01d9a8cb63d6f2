"""Graph component analysis: identifiable latent recovery from graph data."""
from .ebm import EnergyBasedBaseline
from .gca import GraphComponentAnalysis
from .metrics import EvalReport, correlation_matrix, match_components, mean_abs_corr
from .synthdata import (GraphDataset, LatentConfig, LinkModel, MixingNetwork, build_link_model,
                        build_mixing, generate_dataset, link_prob, sample_latents)
from .theory import ConditionReport, check_identifiability, d_vector

__all__ = [
    "GraphComponentAnalysis", "EnergyBasedBaseline",
    "EvalReport", "correlation_matrix", "match_components", "mean_abs_corr",
    "GraphDataset", "LatentConfig", "LinkModel", "MixingNetwork", "build_link_model",
    "build_mixing", "generate_dataset", "link_prob", "sample_latents",
    "ConditionReport", "check_identifiability", "d_vector",
]
__version__ = "0.1.0"
