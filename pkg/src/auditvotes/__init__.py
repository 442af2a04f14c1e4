"""Certified robustness for graph node classifiers via conditional randomized smoothing."""
from .certify import (CertificateGrid, RegionTable, certify_grid, certify_node,
                      exact_margin_oracle, gaussian_radius, gnncert_certify, region_table,
                      worst_case_margin)
from .classifiers import GcnParams, Prediction, TrainConfig, gcn_forward, train_classifier
from .graph import (GraphStats, InductiveSplit, SparseGraph, generate_sbm, graph_stats,
                    load_dataset, make_inductive_split, save_dataset)
from .smoothing import (GaussianNoiseConfig, PartitionConfig, SparseNoiseConfig, hash_partition,
                        sample_gaussian_noise, sample_sparse_noise)
from .voting import (FilterConfig, ProbabilityBounds, VoteTally, abstain_test,
                     clopper_pearson_bounds, tally_votes)

__version__ = "0.1.0"

__all__ = [
    "CertificateGrid",
    "FilterConfig",
    "GaussianNoiseConfig",
    "GcnParams",
    "GraphStats",
    "InductiveSplit",
    "PartitionConfig",
    "Prediction",
    "ProbabilityBounds",
    "RegionTable",
    "SparseGraph",
    "SparseNoiseConfig",
    "TrainConfig",
    "VoteTally",
    "abstain_test",
    "certify_grid",
    "certify_node",
    "clopper_pearson_bounds",
    "exact_margin_oracle",
    "gaussian_radius",
    "gcn_forward",
    "generate_sbm",
    "gnncert_certify",
    "graph_stats",
    "hash_partition",
    "load_dataset",
    "make_inductive_split",
    "region_table",
    "sample_gaussian_noise",
    "sample_sparse_noise",
    "save_dataset",
    "tally_votes",
    "train_classifier",
    "worst_case_margin",
]
