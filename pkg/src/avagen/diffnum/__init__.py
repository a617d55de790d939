"""Differentiable numeric primitives: tape, perceptrons, solvers."""

from . import tape
from .gradcheck import grad_check
from .mlp import MlpSpec, init_mlp, mlp_forward, mlp_forward_var
from .params import ParamVector
from .solvers import BroydenResult, broyden_solve, broyden_solve_batch, secant_find_crossing
from .tape import Var, backward

__all__ = [
    "tape",
    "Var",
    "backward",
    "ParamVector",
    "MlpSpec",
    "init_mlp",
    "mlp_forward",
    "mlp_forward_var",
    "broyden_solve",
    "broyden_solve_batch",
    "BroydenResult",
    "secant_find_crossing",
    "grad_check",
]
