"""Aggregation-free federated learning simulator (FedAF) with FedAvg/FedProx/FedDM baselines."""

from .autograd import NumericOverflowError, ShapeError, Tape, Tensor
from .federation import RoundConfig, RunResult, comm_cost, simulate
from .model import Architecture, ModelParams, init, param_count

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "ModelParams",
    "NumericOverflowError",
    "RoundConfig",
    "RunResult",
    "ShapeError",
    "Tape",
    "Tensor",
    "comm_cost",
    "init",
    "param_count",
    "simulate",
]
