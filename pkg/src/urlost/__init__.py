"""URLOST: unsupervised representation learning without stationarity or topology.

Recover a coarse topology for high-dimensional signals from pairwise mutual
information, partition dimensions with density-adjusted spectral clustering,
align the clusters with learnable per-cluster projections, and pretrain a
masked autoencoder over the cluster tokens. Includes dataset synthesis
(permuted / locally permuted / foveated images), evaluation harnesses, and a
stage-based CLI.
"""

from .affinity import (
    AffinityMatrix,
    DensityVector,
    affinity_matrix,
    density,
    histogram_pmf,
    mutual_information,
    normalize_unit_range,
)
from .datasets import (
    LabeledImageSet,
    Permutation,
    SignalMatrix,
    apply_permutation,
    load_cifar,
    make_global_permutation,
    make_local_permutations,
    synthesize_image_set,
    upsample,
)
from .evaluation import EvalReport, ProbeConfig, kfold_cv, linear_probe, pair_decoding_accuracy
from .model import ClusterMae, MaskPattern, ModelConfig, alignment_metric, masked_mse, sample_mask
from .retina import LatticeConfig, SamplingLattice, build_retina_lattice, default_lattice_config, foveate
from .spectral import (
    ClusterAssignment,
    adjusted_rand_index,
    build_density_laplacian,
    cluster_signal_dimensions,
    discretize_yu_shi,
    kmeans,
    row_normalize,
    top_k_eigenvectors,
)
from .training import TrainConfig, TrainResult, encode_signals, train

__version__ = "0.1.0"

__all__ = [
    "AffinityMatrix", "ClusterAssignment", "ClusterMae", "DensityVector", "EvalReport",
    "LabeledImageSet", "LatticeConfig", "MaskPattern", "ModelConfig", "Permutation",
    "ProbeConfig", "SamplingLattice", "SignalMatrix", "TrainConfig", "TrainResult",
    "adjusted_rand_index", "affinity_matrix", "alignment_metric", "apply_permutation",
    "build_density_laplacian", "build_retina_lattice", "cluster_signal_dimensions",
    "default_lattice_config", "density", "discretize_yu_shi", "encode_signals", "foveate",
    "histogram_pmf", "kfold_cv", "kmeans", "linear_probe", "load_cifar",
    "make_global_permutation", "make_local_permutations", "masked_mse", "mutual_information",
    "normalize_unit_range", "pair_decoding_accuracy", "row_normalize", "sample_mask",
    "synthesize_image_set", "top_k_eigenvectors", "train", "upsample",
]
