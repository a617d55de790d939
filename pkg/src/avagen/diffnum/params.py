"""Flat parameter storage with named segments and gradient accumulation."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionMismatch
from .tape import Var


class ParamVector:
    """All trainable values of one component, stored flat.

    Segments are named, disjoint, and cover the whole array. `leaf(name)`
    hands out a graph node for a segment whose backward hook accumulates
    into `self.grad`; any number of graphs may contribute between calls
    to `zero_grad`.
    """

    def __init__(self):
        self.values = np.zeros(0)
        self.grad = np.zeros(0)
        self.layout = {}  # name -> (start, stop, shape)

    @classmethod
    def build(cls, segments):
        """segments: iterable of (name, shape) in layout order."""
        pv = cls()
        offset = 0
        for name, shape in segments:
            size = int(np.prod(shape)) if shape else 1
            pv.layout[name] = (offset, offset + size, tuple(shape))
            offset += size
        pv.values = np.zeros(offset)
        pv.grad = np.zeros(offset)
        return pv

    @property
    def size(self):
        return self.values.size

    def segment_names(self):
        return list(self.layout.keys())

    def view(self, name):
        """Writable ndarray view of one segment, in its declared shape."""
        if name not in self.layout:
            raise DimensionMismatch(name, "known segment", "missing")
        a, b, shape = self.layout[name]
        return self.values[a:b].reshape(shape)

    def leaf(self, name):
        """Graph leaf for a segment; backward adds into self.grad."""
        a, b, shape = self.layout[name]

        def hook(g):
            self.grad[a:b] += g.reshape(-1)

        return Var(self.values[a:b].reshape(shape), hook=hook)

    def const(self, name):
        """Segment value as a constant (no gradient tracking)."""
        a, b, shape = self.layout[name]
        return self.values[a:b].reshape(shape)

    def zero_grad(self):
        self.grad[:] = 0.0

    def copy(self):
        pv = ParamVector()
        pv.values = self.values.copy()
        pv.grad = np.zeros_like(self.values)
        pv.layout = dict(self.layout)
        return pv

    def checksum(self):
        """Order-stable digest of the current values, for freeze checks."""
        import hashlib

        return hashlib.sha256(self.values.tobytes()).hexdigest()

    def validate(self):
        spans = sorted((a, b) for a, b, _ in self.layout.values())
        cursor = 0
        for a, b in spans:
            if a != cursor:
                raise DimensionMismatch("<layout>", f"segment at {cursor}", f"gap/overlap at {a}")
            cursor = b
        if cursor != self.values.size:
            raise DimensionMismatch("<layout>", f"cover {self.values.size}", f"cover {cursor}")
        if not np.all(np.isfinite(self.values)):
            raise DimensionMismatch("<values>", "finite", "non-finite entries")
        return True
