"""Consensus-based parallel trajectory optimization for multi-hypothesis planning."""

from .bezier import BasisSet, ControlPointBatch, build_basis, eval_states
from .solver import SolverConfig, assemble, solve

__all__ = ["BasisSet", "ControlPointBatch", "build_basis", "eval_states",
           "SolverConfig", "assemble", "solve"]
__version__ = "0.1.0"
