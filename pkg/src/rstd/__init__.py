"""Tensor-decomposition-compressed convolution layers, with optional random
shuffling of the reconstructed kernel (RsTD), plus the training and sweep
machinery to measure compression-vs-accuracy trade-offs on CIFAR-10."""

from .tensor import DenseTensor, contract, permute_modes, tensor_new
from .tdmodel import (
    CoreSet,
    Topology,
    build_topology,
    compression_ratio,
    init_cores,
    param_count,
    rank1_tr_split_forward,
    reconstruct,
    reconstruct_gradient,
    tt_decompose,
)
from .shuffle import (
    Permutation,
    apply_inverse_shuffle,
    apply_shuffle,
    fisher_yates_permutation,
    permutation_from_seed,
)
from .nn import (
    FactorizedConv2d,
    LayerCompression,
    Network,
    build_table1_network,
    conv2d_backward,
    conv2d_forward,
)
from .data import Dataset, add_awgn, batches, load_cifar10, subset_per_class
from .trainer import TrainConfig, TrainReport, evaluate, lr_schedule, sgd_nesterov_step, train

__version__ = "0.1.0"

__all__ = [
    "DenseTensor", "tensor_new", "permute_modes", "contract",
    "Topology", "CoreSet", "build_topology", "reconstruct",
    "reconstruct_gradient", "param_count", "compression_ratio",
    "init_cores", "tt_decompose", "rank1_tr_split_forward",
    "Permutation", "fisher_yates_permutation", "permutation_from_seed",
    "apply_shuffle", "apply_inverse_shuffle",
    "FactorizedConv2d", "LayerCompression", "Network",
    "build_table1_network", "conv2d_forward", "conv2d_backward",
    "Dataset", "load_cifar10", "add_awgn", "batches", "subset_per_class",
    "TrainConfig", "TrainReport", "lr_schedule", "sgd_nesterov_step",
    "train", "evaluate",
]
