"""Dual-pathway deformable spatio-temporal adapters on a frozen toy video
backbone, with a numpy autograd engine and an episodic few-shot harness."""

__version__ = "0.1.0"

from .adapter import AdapterConfig, D2STAdapter, adapter_forward, count_tunable_params
from .adsta import Adsta, AdstaConfig, SamplingKernel, adsta_forward, point_importance
from .backbone import InsertionPolicy, ToyBackbone, assemble, forward_video
from .config import RunConfig
from .errors import (ConfigurationError, ContractError, D2STError, DimensionError, NumericError,
                     SchemaError)
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = [
    "AdapterConfig", "D2STAdapter", "adapter_forward", "count_tunable_params",
    "Adsta", "AdstaConfig", "SamplingKernel", "adsta_forward", "point_importance",
    "InsertionPolicy", "ToyBackbone", "assemble", "forward_video", "RunConfig",
    "ConfigurationError", "ContractError", "D2STError", "DimensionError", "NumericError",
    "SchemaError", "Parameter", "Tensor", "backward", "no_grad",
]
