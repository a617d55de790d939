"""Small conditioned perceptrons evaluated from a ParamVector.

Each network is described by an MlpSpec; its weights live in named
segments `<name>.w<i>` / `<name>.b<i>` of a ParamVector. Two forward
paths are provided: a plain-numpy one for evaluation-only callers
(solvers, renderers, meshing) and a graph-building one for training.
Both share the same weight layout and agree bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionMismatch
from . import tape
from .params import ParamVector
from .tape import Var

_HEADS = ("none", "sigmoid", "softmax", "unitnorm")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one conditioned perceptron.

    input coordinates and condition vector are concatenated; `head`
    names the output nonlinearity.
    """

    name: str
    input_dim: int
    condition_dim: int
    hidden: tuple = (64, 64)
    output_dim: int = 1
    activation: str = "softplus"
    head: str = "none"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise DimensionMismatch(self.name, "dims >= 1", f"{self.input_dim}->{self.output_dim}")
        if not self.hidden:
            raise DimensionMismatch(self.name, "non-empty hidden widths", "()")
        if self.head not in _HEADS:
            raise DimensionMismatch(self.name, f"head in {_HEADS}", self.head)

    def layer_dims(self):
        dims = [self.input_dim + self.condition_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def segments(self):
        segs = []
        for i, (din, dout) in enumerate(self.layer_dims()):
            segs.append((f"{self.name}.w{i}", (din, dout)))
            segs.append((f"{self.name}.b{i}", (dout,)))
        return segs


def init_mlp(spec, pv, rng, final_zero=False, final_bias=None, gain=1.0):
    """He-style initialization into an already-built ParamVector."""
    dims = spec.layer_dims()
    last = len(dims) - 1
    for i, (din, dout) in enumerate(dims):
        w = pv.view(f"{spec.name}.w{i}")
        b = pv.view(f"{spec.name}.b{i}")
        if i == last and final_zero:
            w[:] = 0.0
            b[:] = 0.0
        else:
            w[:] = rng.normal(0.0, gain / np.sqrt(din), size=(din, dout))
            b[:] = 0.0
        if i == last and final_bias is not None:
            b[:] = np.asarray(final_bias, dtype=np.float64)


def _check_inputs(spec, x, c):
    if x.shape[-1] != spec.input_dim:
        raise DimensionMismatch(f"{spec.name}.input", spec.input_dim, x.shape[-1])
    if spec.condition_dim:
        if c is None:
            raise DimensionMismatch(f"{spec.name}.condition", spec.condition_dim, "missing")
        if c.shape[-1] != spec.condition_dim:
            raise DimensionMismatch(f"{spec.name}.condition", spec.condition_dim, c.shape[-1])


def mlp_forward(spec, pv, x, c=None):
    """Plain-numpy forward. x: (N, input_dim); c: (N, cond) or (cond,)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if c is not None:
        c = np.asarray(c, dtype=np.float64)
        if c.ndim == 1:
            c = np.broadcast_to(c, (x.shape[0], c.shape[0]))
    _check_inputs(spec, x, c)
    h = np.concatenate([x, c], axis=-1) if spec.condition_dim else x
    act = tape._UNARY[spec.activation][0]
    dims = spec.layer_dims()
    for i in range(len(dims)):
        w = pv.const(f"{spec.name}.w{i}")
        if h.shape[-1] != w.shape[0]:
            raise DimensionMismatch(f"{spec.name}.w{i}", w.shape[0], h.shape[-1])
        h = h @ w + pv.const(f"{spec.name}.b{i}")
        if i < len(dims) - 1:
            h = act(h)
    return _apply_head_np(spec.head, h)


def _apply_head_np(head, h):
    if head == "sigmoid":
        return tape._sigmoid(h)
    if head == "softmax":
        z = h - h.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    if head == "unitnorm":
        return h / np.linalg.norm(h, axis=-1, keepdims=True)
    return h


def mlp_forward_var(spec, pv, x, c=None, trainable=True):
    """Graph-building forward; returns the raw head output as a Var.

    With trainable=False the weights enter as constants, so backward
    passes touch only the point/condition inputs (used when extracting
    Jacobians of the deformation at a root).
    """
    x = x if isinstance(x, Var) else Var(np.atleast_2d(x))
    if c is not None:
        if not isinstance(c, Var):
            c = Var(c)
        if c.value.ndim == 1:
            c = tape.tile_rows(c, x.value.shape[0])
    _check_inputs(spec, x.value, None if c is None else c.value)
    h = tape.concat([x, c], axis=-1) if spec.condition_dim else x
    pick = pv.leaf if trainable else (lambda nm: Var(pv.const(nm)))
    dims = spec.layer_dims()
    for i in range(len(dims)):
        h = tape.matmul(h, pick(f"{spec.name}.w{i}")) + pick(f"{spec.name}.b{i}")
        if i < len(dims) - 1:
            h = tape.unary(spec.activation, h)
    if spec.head == "sigmoid":
        h = tape.sigmoid(h)
    elif spec.head == "softmax":
        h = tape.softmax(h, axis=-1)
    elif spec.head == "unitnorm":
        h = tape.unitnorm(h)
    return h
