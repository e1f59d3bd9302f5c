"""Product-quantized content-addressable layers.

Replace conv/fc matrix products by codebook matching plus precomputed
lookup tables: a soft-attention variant (pecan_a) and a multiplier-free
nearest-L1 variant (pecan_d), with end-to-end training, audited inference
and a closed-form cost model.
"""

from .codebook import Codebook, GroupedFeatures, init_codebook, kmeans_init, merge_groups, split_groups
from .cost import HardwareModel, LayerCost, layer_cost, network_cost, pecan_a_feasible_p
from .lut import (
    LookupTable,
    Model,
    OpCounter,
    UsageHistogram,
    audit,
    build_lut,
    collect_usage,
    infer_a,
    infer_d,
    prune_model,
    prune_unused,
    run_network,
    usage_histogram,
)
from .matcher import (
    MatchConfig,
    attention_scores,
    hard_assign,
    l1_scores,
    relaxed_assign,
    sign_grad,
    ste_assign,
    ste_assign_vjp,
    surrogate_slope,
)
from .network import LayerSpec, NetworkSpec, lenet
from .tensor import ConvGeometry, ShapeError, fold, im2col, maxpool2d, reshape_permute
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"
