"""Auto-decoded latent tables and the Gaussian fitted over them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffnum import ParamVector

VAR_FLOOR = 1e-6


class LatentTable:
    """One shape code and one detail code per training sample, zero-init,
    stored as named segments of a single ParamVector so the optimizer and
    checkpoints treat them like any other parameters."""

    def __init__(self, n_samples, l_shape, l_detail):
        self.n = n_samples
        self.l_shape = l_shape
        self.l_detail = l_detail
        segs = [(f"shape.{i}", (l_shape,)) for i in range(n_samples)]
        segs += [(f"detail.{i}", (l_detail,)) for i in range(n_samples)]
        self.pv = ParamVector.build(segs)

    def shape(self, i):
        return self.pv.const(f"shape.{i}")

    def detail(self, i):
        return self.pv.const(f"detail.{i}")

    def shape_leaf(self, i):
        return self.pv.leaf(f"shape.{i}")

    def detail_leaf(self, i):
        return self.pv.leaf(f"detail.{i}")

    def all_shape(self):
        return np.stack([self.shape(i) for i in range(self.n)])

    def all_detail(self):
        return np.stack([self.detail(i) for i in range(self.n)])

    def detail_mask(self):
        """Boolean mask of the detail segments within the flat vector."""
        mask = np.zeros(self.pv.size, dtype=bool)
        for i in range(self.n):
            a, b, _ = self.pv.layout[f"detail.{i}"]
            mask[a:b] = True
        return mask

    def shape_mask(self):
        return ~self.detail_mask()


@dataclass
class LatentGaussian:
    mean: np.ndarray
    var: np.ndarray  # diagonal, floored

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.maximum(np.asarray(self.var, dtype=np.float64), VAR_FLOOR)

    def sample(self, rng):
        return self.mean + np.sqrt(self.var) * rng.standard_normal(self.mean.shape)

    def neg_log_density_grad(self, z):
        """d/dz of the quadratic form (z - mu)^T Sigma^-1 (z - mu) / 2."""
        return (z - self.mean) / self.var


def fit_gaussian(codes):
    """Per-dimension sample mean and variance of a (n, L) code table."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    mean = codes.mean(axis=0)
    var = codes.var(axis=0) if codes.shape[0] > 1 else np.zeros(codes.shape[1])
    return LatentGaussian(mean, var)


def sample_latents(shape_gaussian, detail_gaussian, seed):
    """Seeded draw of one (shape, detail) code pair."""
    rng = np.random.default_rng(seed)
    return shape_gaussian.sample(rng), detail_gaussian.sample(rng)
