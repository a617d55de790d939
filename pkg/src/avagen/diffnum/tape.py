"""Reverse-mode differentiation over a small, fixed operation set.

The graph is built from a closed vocabulary of vectorized numpy
operations (affine maps, elementwise nonlinearities, softmax, trilinear
grid sampling, reductions, gather/scatter and unit normalization).
There is deliberately no general tape for arbitrary user programs: every
op's backward rule is written out by hand so the whole engine stays
auditable against finite differences.

All values are float64 numpy arrays. Graphs are throwaway: build,
call :func:`backward`, read gradients, discard.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A node in the computation graph: a value plus a backward rule."""

    __slots__ = ("value", "parents", "bwd", "grad", "hook")

    def __init__(self, value, parents=(), bwd=None, hook=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.bwd = bwd          # callable(grad) -> tuple of parent grads
        self.grad = None
        self.hook = hook        # called with the final grad (parameter leaves)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(root, seed=None):
    """Propagate gradients from `root` to every node in its graph.

    seed defaults to ones_like(root.value). Node grads reachable from
    root are cleared first, so repeated calls on one graph do not
    accumulate. Parameter-leaf hooks fire once per call with the leaf's
    total gradient; accumulation across calls is the hook owner's
    business. Grad arrays are never mutated in place, so aliasing a
    child's grad is safe.
    """
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))

    for node in topo:
        node.grad = None
    root.grad = np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)

    for node in reversed(topo):
        if node.grad is None or node.bwd is None:
            continue
        for parent, pgrad in zip(node.parents, node.bwd(node.grad)):
            if pgrad is None:
                continue
            parent.grad = pgrad if parent.grad is None else parent.grad + pgrad
    for node in topo:
        if node.hook is not None and node.grad is not None:
            node.hook(node.grad)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.value + b.value, (a, b))
    out.bwd = lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))
    return out


def sub(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.value - b.value, (a, b))
    out.bwd = lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))
    return out


def mul(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.value * b.value, (a, b))
    out.bwd = lambda g: (
        _unbroadcast(g * b.value, a.value.shape),
        _unbroadcast(g * a.value, b.value.shape),
    )
    return out


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.value @ b.value, (a, b))

    def bwd(g):
        ga = g @ b.value.T
        gb = a.value.T @ g
        return ga, gb

    out.bwd = bwd
    return out


# ---------------------------------------------------------------------------
# elementwise nonlinearities

_LEAKY = 0.2


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_UNARY = {
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "lrelu": (
        lambda x: np.where(x > 0, x, _LEAKY * x),
        lambda x, y: np.where(x > 0, 1.0, _LEAKY),
    ),
    "softplus": (_softplus, lambda x, y: _sigmoid(x)),
    "exp": (np.exp, lambda x, y: y),
    "log": (np.log, lambda x, y: 1.0 / x),
    "square": (np.square, lambda x, y: 2.0 * x),
    "sqrt": (np.sqrt, lambda x, y: 0.5 / np.sqrt(x)),
    "none": (lambda x: x, lambda x, y: np.ones_like(x)),
}


def unary(name, x):
    fn, dfn = _UNARY[name]
    x = as_var(x)
    out = Var(fn(x.value), (x,))
    out.bwd = lambda g: (g * dfn(x.value, out.value),)
    return out


def sigmoid(x):
    return unary("sigmoid", x)


def tanh(x):
    return unary("tanh", x)


def relu(x):
    return unary("relu", x)


def lrelu(x):
    return unary("lrelu", x)


def softplus(x):
    return unary("softplus", x)


def log(x):
    return unary("log", x)


def square(x):
    return unary("square", x)


def clip(x, lo, hi):
    """Clamp; gradient passes through only strictly inside the bounds."""
    x = as_var(x)
    out = Var(np.clip(x.value, lo, hi), (x,))
    mask = (x.value > lo) & (x.value < hi)
    out.bwd = lambda g: (g * mask,)
    return out


# ---------------------------------------------------------------------------
# reductions and shapes


def vsum(x, axis=None):
    x = as_var(x)
    out = Var(x.value.sum(axis=axis), (x,))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.value.shape).astype(np.float64),)
        gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.value.shape).astype(np.float64),)

    out.bwd = bwd
    return out


def vmean(x, axis=None):
    x = as_var(x)
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(vsum(x, axis=axis), 1.0 / n)


def reshape(x, shape):
    x = as_var(x)
    out = Var(x.value.reshape(shape), (x,))
    out.bwd = lambda g: (g.reshape(x.value.shape),)
    return out


def tile_rows(x, n):
    """Repeat a (d,) vector into (n, d); backward sums over rows."""
    x = as_var(x)
    out = Var(np.broadcast_to(x.value, (n, x.value.shape[-1])), (x,))
    out.bwd = lambda g: (g.sum(axis=0),)
    return out


def concat(parts, axis=-1):
    parts = [as_var(p) for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts))
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out.bwd = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def take(x, idx):
    """Gather from the flattened value; backward scatter-adds."""
    x = as_var(x)
    idx = np.asarray(idx)
    out = Var(x.value.reshape(-1)[idx], (x,))

    def bwd(g):
        gx = np.zeros(x.value.size)
        np.add.at(gx, idx.reshape(-1), g.reshape(-1))
        return (gx.reshape(x.value.shape),)

    out.bwd = bwd
    return out


def scatter(values, idx, size):
    """Scatter-add `values` into a flat zero vector of length `size`."""
    values = as_var(values)
    idx = np.asarray(idx)
    flat = np.zeros(size)
    np.add.at(flat, idx.reshape(-1), values.value.reshape(-1))
    out = Var(flat, (values,))
    out.bwd = lambda g: (g[idx].reshape(values.value.shape),)
    return out


# ---------------------------------------------------------------------------
# structured ops


def rowmat(mats, x):
    """Constant per-row linear maps: y_n = M_n @ x_n; mats (N, d, d)."""
    x = as_var(x)
    mats = np.asarray(mats, dtype=np.float64)
    out = Var(np.einsum("nij,nj->ni", mats, x.value), (x,))
    out.bwd = lambda g: (np.einsum("nij,ni->nj", mats, g),)
    return out


def softmax(x, axis=-1):
    x = as_var(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Var(y, (x,))

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    out.bwd = bwd
    return out


def unitnorm(x, eps=0.0):
    """Normalize rows of (..., d) to unit euclidean length."""
    x = as_var(x)
    nrm = np.linalg.norm(x.value, axis=-1, keepdims=True) + eps
    y = x.value / nrm
    out = Var(y, (x,))

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * dot) / nrm,)

    out.bwd = bwd
    return out


def rowdot(a, b):
    """Per-row dot product of two (..., d) arrays -> (...,)."""
    return vsum(mul(a, b), axis=-1)


def trilinear(volume, pts, lo, hi):
    """Trilinear sample of a grid at world points.

    volume: Var or array of shape (R, R, R, C), node-centered over the
    axis-aligned box [lo, hi]; pts: (N, 3). Points are clamped to the
    box. Exact at grid nodes, linear along axes. Differentiable in both
    the volume and the points.
    """
    volume = as_var(volume)
    pts = as_var(pts)
    R = volume.value.shape[0]
    C = volume.value.shape[3]
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    scale = (R - 1) / (hi - lo)

    u = (pts.value - lo) * scale
    u = np.clip(u, 0.0, R - 1)
    i0 = np.minimum(u.astype(np.int64), R - 2)
    f = u - i0
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]

    flat = volume.value.reshape(-1, C)

    def nidx(dx, dy, dz):
        return ((ix + dx) * R + (iy + dy)) * R + (iz + dz)

    corners = {}
    weights = {}
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                corners[(dx, dy, dz)] = nidx(dx, dy, dz)
                weights[(dx, dy, dz)] = wx * wy * wz

    val = np.zeros((pts.value.shape[0], C))
    for key, idx in corners.items():
        val += weights[key] * flat[idx]

    out = Var(val, (volume, pts))

    def bwd(g):
        gvol = np.zeros_like(flat)
        for key, idx in corners.items():
            np.add.at(gvol, idx, weights[key] * g)
        # d/du per axis: difference of corner interpolants
        gpts = np.zeros_like(pts.value)
        for axis, (fa, fb) in enumerate(((fy, fz), (fx, fz), (fx, fy))):
            wa0, wa1 = 1.0 - fa, fa
            wb0, wb1 = 1.0 - fb, fb
            diff = np.zeros((pts.value.shape[0], C))
            for da in (0, 1):
                for db in (0, 1):
                    key_hi = [0, 0, 0]
                    key_lo = [0, 0, 0]
                    other = [a for a in range(3) if a != axis]
                    key_hi[axis] = 1
                    key_hi[other[0]] = da
                    key_hi[other[1]] = db
                    key_lo[other[0]] = da
                    key_lo[other[1]] = db
                    w = (wa1 if da else wa0) * (wb1 if db else wb0)
                    diff += w * (flat[corners[tuple(key_hi)]] - flat[corners[tuple(key_lo)]])
            gpts[:, axis] = (g * diff).sum(axis=1) * scale[axis]
        # clamped points get no positional gradient
        inside = ((pts.value - lo) * scale > 0.0) & ((pts.value - lo) * scale < R - 1)
        gpts *= inside
        return gvol.reshape(volume.value.shape), gpts

    out.bwd = bwd
    return out


def trilinear_np(volume, pts, lo, hi):
    """Plain-numpy twin of :func:`trilinear` for evaluation-only paths."""
    return trilinear(Var(volume), Var(np.atleast_2d(pts)), lo, hi).value
