"""Numerical lab for gradient-flow geometry: regularised flows on small models,
NTK spectrum tracking, flow-tangent/fibre decompositions, horizontal energy
solves, and the Gibbs partition check, with a scenario runner on top."""

__version__ = "0.1.0"

from .models import (
    BilinearToy,
    Dataset,
    LinearToy,
    MlpMuP,
    eval_jacobian,
    eval_outputs,
    mup_init,
)
from .flow import FlowConfig, TrajectoryRecord, integrate
from .regularisers import RegKind, RegulariserSpec

__all__ = [
    "BilinearToy",
    "Dataset",
    "FlowConfig",
    "LinearToy",
    "MlpMuP",
    "RegKind",
    "RegulariserSpec",
    "TrajectoryRecord",
    "eval_jacobian",
    "eval_outputs",
    "integrate",
    "mup_init",
    "__version__",
]
