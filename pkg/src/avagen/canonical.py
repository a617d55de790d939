"""Canonical-space implicit fields: occupancy + feature, detail normals.

The surface is the tau = 0.5 level set of the occupancy field. Occupancy
is produced by trilinearly sampling a generated feature volume and
feeding (coordinate, feature) through a sigmoid-headed perceptron.
Points outside the volume box are free space by convention: o = 0 with a
zero feature. The normal field is a separate perceptron conditioned on
the detail code and the local shape feature; its raw output is
renormalized to unit length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffnum import mlp_forward, mlp_forward_var, tape
from .diffnum.tape import Var
from .errors import DegenerateNormal

TAU = 0.5  # iso-value of the body surface


@dataclass
class FeatureVolume:
    resolution: int
    features: np.ndarray  # (R, R, R, l_f)
    bbox: np.ndarray      # (2, 3)


def feature_volume(model, z):
    """Generate the per-code feature volume."""
    return FeatureVolume(model.arch.vol_res, model.feature_volume_np(z), model.bbox.copy())


def inside_box(model, x):
    x = np.atleast_2d(x)
    lo, hi = model.bbox
    return np.all((x >= lo) & (x <= hi), axis=-1)


def occupancy(model, x, z):
    """Occupancy probability and shape feature at canonical points.

    x: (N, 3) or (3,). Returns (o (N,), f (N, l_f)); out-of-box points
    get (0, zero-feature).
    """
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    vol = model.feature_volume_np(z)
    mask = inside_box(model, x)
    o = np.zeros(x.shape[0])
    f = np.zeros((x.shape[0], model.arch.l_f))
    if mask.any():
        xm = x[mask]
        fm = tape.trilinear_np(vol, xm, model.bbox[0], model.bbox[1])
        om = mlp_forward(model.specs["occ"], model.geo, xm, fm)[:, 0]
        o[mask] = om
        f[mask] = fm
    if single:
        return float(o[0]), f[0]
    return o, f


def occupancy_var(model, x, z, trainable=True):
    """Graph-mode occupancy for training; x: Var (N,3), z: Var (l_shape,).

    Returns (o Var (N,), f Var (N, l_f)). Out-of-box rows are masked to
    zero, matching the evaluation path and killing their gradients.
    """
    x = x if isinstance(x, Var) else Var(np.atleast_2d(x))
    z = z if isinstance(z, Var) else Var(z)
    r = model.arch.vol_res
    zrow = tape.reshape(z, (1, model.arch.l_shape))
    flat = mlp_forward_var(model.specs["gen"], model.geo, zrow, trainable=trainable)
    vol = tape.reshape(flat, (r, r, r, model.arch.l_f))
    f = tape.trilinear(vol, x, model.bbox[0], model.bbox[1])
    o = mlp_forward_var(model.specs["occ"], model.geo, x, f, trainable=trainable)
    mask = inside_box(model, x.value).astype(np.float64)
    o = tape.reshape(o, (-1,)) * Var(mask)
    f = f * Var(mask[:, None])
    return o, f


def normal(model, x, zd, f):
    """Unit detail normal at canonical points given their shape features."""
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    zd = np.asarray(zd, dtype=np.float64).reshape(model.arch.l_detail)
    cond = np.concatenate([np.broadcast_to(zd, (x.shape[0], zd.size)), f], axis=-1)
    raw = mlp_forward(model.specs["normal"], model.normal_pv, x, cond)
    nrm = np.linalg.norm(raw, axis=-1)
    if np.any(nrm < 1e-8):
        raise DegenerateNormal(f"raw normal norm {nrm.min():.3e} below 1e-8")
    n = raw / nrm[:, None]
    return n[0] if single else n


def normal_var(model, x, zd, f):
    """Graph-mode normals; zd may be a latent leaf, f a cached constant."""
    x = x if isinstance(x, Var) else Var(np.atleast_2d(x))
    f = f if isinstance(f, Var) else Var(np.atleast_2d(f))
    zd = zd if isinstance(zd, Var) else Var(zd)
    n = x.value.shape[0]
    cond = tape.concat([tape.tile_rows(zd, n), f], axis=-1)
    raw = mlp_forward_var(model.specs["normal"], model.normal_pv, x, cond)
    nrm = np.linalg.norm(raw.value, axis=-1)
    if np.any(nrm < 1e-8):
        raise DegenerateNormal(f"raw normal norm {nrm.min():.3e} below 1e-8")
    return tape.unitnorm(raw)
