"""Federated knowledge injection into a frozen foundation model, at desk scale."""
from .config import RunConfig
from .data import BenchmarkSpec, ConfigError, default_benchmark
from .federated import VARIANTS, Federation, FederationConfig, aggregate
from .params import ParamTree
from .tensor import ContractError, ShapeError, Tensor

__all__ = ["RunConfig", "BenchmarkSpec", "ConfigError", "default_benchmark", "VARIANTS",
           "Federation", "FederationConfig", "aggregate", "ParamTree", "ContractError",
           "ShapeError", "Tensor"]
