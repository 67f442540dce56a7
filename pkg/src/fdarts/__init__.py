"""Differentiable cell search with a fixed squeeze-excitation block, on a small numpy autograd."""

from .autograd import GradientTape, Tensor, grad_check, set_default_dtype
from .bilevel import BilevelState, arch_gradient, arch_step, masked_arch_update, search_epoch, weight_step
from .config import RunConfig, load_config
from .data import Dataset, cutout, load_idx, random_erasing, split, synthetic_dataset
from .genotype import Genotype, derive_genotype, genotype_to_dot, parse_genotype, serialize_genotype
from .network import EvalNetwork, NetworkConfig, SearchNetwork, build_network
from .ops import CANDIDATE_OPS, AttentionBlock, make_candidate_op, se_forward
from .search_space import ATTENTION_SPEC, ArchMatrix, CellSpec, build_arch_matrix, extended_dims

__version__ = "0.1.0"

__all__ = [
    "ATTENTION_SPEC",
    "ArchMatrix",
    "AttentionBlock",
    "BilevelState",
    "CANDIDATE_OPS",
    "CellSpec",
    "Dataset",
    "EvalNetwork",
    "Genotype",
    "GradientTape",
    "NetworkConfig",
    "RunConfig",
    "SearchNetwork",
    "Tensor",
    "arch_gradient",
    "arch_step",
    "build_arch_matrix",
    "build_network",
    "cutout",
    "derive_genotype",
    "extended_dims",
    "genotype_to_dot",
    "grad_check",
    "load_config",
    "load_idx",
    "make_candidate_op",
    "masked_arch_update",
    "parse_genotype",
    "random_erasing",
    "se_forward",
    "search_epoch",
    "serialize_genotype",
    "set_default_dtype",
    "split",
    "synthetic_dataset",
    "weight_step",
]
