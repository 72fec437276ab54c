"""gatesearch: per-channel differentiable operation search and pruning.

Small convolutional networks are trained as over-complete supernets whose
channels are masked by learnable binary gates (hard forward, softmax
backward). A differentiable resource penalty (parameters, FLOPs, or
profile-fitted latency) drives channels closed; the surviving pattern
compiles into a pruned standalone network.
"""

from .config import SearchConfig, parse_config, parse_config_text, serialize_config
from .datasets import Dataset, load_dataset, load_idx, synthetic_blobs
from .gating import GatePair, GateVector, gamma_layer, gamma_op, gate_backward, gate_forward
from .network import (CompiledArchitecture, SearchableLayer, SearchableNetwork,
                      build_network, compile_network, finetune_mode)
from .pipeline import run_pipeline
from .resources import (LatencyProfile, RegularizerState, dense_resource,
                        discrete_resource, fit_latency, regularizer, resource_report)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "SearchConfig", "parse_config", "parse_config_text", "serialize_config",
    "Dataset", "load_dataset", "load_idx", "synthetic_blobs",
    "GatePair", "GateVector", "gate_forward", "gate_backward", "gamma_op", "gamma_layer",
    "SearchableLayer", "SearchableNetwork", "CompiledArchitecture",
    "build_network", "compile_network", "finetune_mode",
    "run_pipeline", "LatencyProfile", "RegularizerState",
    "fit_latency", "regularizer", "discrete_resource", "dense_resource", "resource_report",
    "Tensor", "no_grad",
    "__version__",
]
