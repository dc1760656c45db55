"""Desk-scale Vision Mamba training with stochastic layer-wise shuffle."""

from .bench import BenchReport, run_bench
from .config import MfdConfig, SlwsConfig, TrainConfig, load_config
from .model import VimConfig, VimModel, init_vim_params, named_parameters, vim_encode, vim_forward
from .slws import (
    PermutationPair,
    ShuffleDecision,
    ShuffleSchedule,
    empirical_migration_estimate,
    migration_probability,
    sample_decision,
    sample_permutation,
    shuffle_probability,
    shuffled_call,
    slws_layer_forward,
)
from .ssm import (
    MambaLayerParams,
    SsmParams,
    mamba_block_forward,
    naive_scan_reference,
    selective_scan,
    zoh_discretize,
)
from .tensor import Tensor, gather_rows, grad_check, layer_norm, matmul, set_debug_checks
from .train import overfit_ab_experiment, train

__version__ = "0.1.0"
