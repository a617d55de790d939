"""Strided-convolution patch scorer over normal maps.

Convolutions are expressed as gather (im2col) + matmul over the tape's
fixed op set, so the whole discriminator is differentiable in both its
parameters and its input image. The R1 gradient penalty needs
second-order information; its parameter gradient is computed by a
central-difference directional trick (three first-order passes), which
keeps the tape strictly first-order and still passes gradient checks in
float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffnum import ParamVector, backward, tape
from ..diffnum.tape import Var


@dataclass(frozen=True)
class DiscSpec:
    height: int
    width: int
    channels: tuple = (8, 16, 32, 64)
    in_channels: int = 3
    ksize: int = 3
    stride: int = 2

    def layer_shapes(self):
        h, w, cin = self.height, self.width, self.in_channels
        out = []
        for cout in self.channels:
            h_out = (h + 2 - self.ksize) // self.stride + 1
            w_out = (w + 2 - self.ksize) // self.stride + 1
            out.append(((h, w, cin), (h_out, w_out, cout)))
            h, w, cin = h_out, w_out, cout
        return out

    def segments(self):
        segs = []
        for i, ((_, _, cin), (_, _, cout)) in enumerate(self.layer_shapes()):
            segs.append((f"conv{i}.w", (self.ksize * self.ksize * cin, cout)))
            segs.append((f"conv{i}.b", (cout,)))
        h, w, c = self.layer_shapes()[-1][1]
        segs.append(("head.w", (h * w * c, 1)))
        segs.append(("head.b", (1,)))
        return segs


def build_discriminator(spec, seed=0):
    pv = ParamVector.build(spec.segments())
    rng = np.random.default_rng(seed)
    for name in pv.segment_names():
        v = pv.view(name)
        if name.endswith(".w"):
            v[:] = rng.normal(0.0, 1.0 / np.sqrt(v.shape[0]), v.shape)
    return pv


def _conv_indices(h, w, c, ksize, stride):
    """Gather indices: padded image flat -> (H_out*W_out, k*k*c) patches,
    plus the scatter indices embedding the image into the padded buffer."""
    hp, wp = h + 2, w + 2
    # embed: source pixel (i,j,ch) -> padded flat
    ii, jj, cc = np.meshgrid(np.arange(h), np.arange(w), np.arange(c), indexing="ij")
    embed = ((ii + 1) * wp + (jj + 1)) * c + cc
    h_out = (h + 2 - ksize) // stride + 1
    w_out = (w + 2 - ksize) // stride + 1
    oi, oj = np.meshgrid(np.arange(h_out), np.arange(w_out), indexing="ij")
    base_i = oi.reshape(-1, 1) * stride
    base_j = oj.reshape(-1, 1) * stride
    ki, kj, kc = np.meshgrid(np.arange(ksize), np.arange(ksize), np.arange(c), indexing="ij")
    off = (ki.reshape(-1) * wp + kj.reshape(-1)) * c + kc.reshape(-1)
    patches = (base_i * wp + base_j) * c + off[None, :]
    return embed.reshape(-1), patches, (h_out, w_out)


class _IndexCache(dict):
    def get_for(self, h, w, c, ksize, stride):
        key = (h, w, c, ksize, stride)
        if key not in self:
            self[key] = _conv_indices(h, w, c, ksize, stride)
        return self[key]


_IDX = _IndexCache()


def disc_score_var(spec, pv, img, trainable=True):
    """Score one (H, W, 3) normal map; returns a scalar-shaped Var."""
    x = img if isinstance(img, Var) else Var(img)
    pick = pv.leaf if trainable else (lambda nm: Var(pv.const(nm)))
    h, w, c = spec.height, spec.width, spec.in_channels
    feat = tape.reshape(x, (h * w * c,))
    for i, ((hin, win, cin), (hout, wout, cout)) in enumerate(spec.layer_shapes()):
        embed, patches, _ = _IDX.get_for(hin, win, cin, spec.ksize, spec.stride)
        padded = tape.scatter(feat, embed, (hin + 2) * (win + 2) * cin)
        cols = tape.take(padded, patches)
        z = tape.matmul(cols, pick(f"conv{i}.w")) + pick(f"conv{i}.b")
        z = tape.lrelu(z)
        feat = tape.reshape(z, (hout * wout * cout,))
    score = tape.matmul(tape.reshape(feat, (1, -1)), pick("head.w")) + pick("head.b")
    return tape.reshape(score, ())


def disc_score(spec, pv, img):
    return float(disc_score_var(spec, pv, Var(img), trainable=False).value)


def input_gradient(spec, pv, img):
    """d score / d image, first-order reverse pass with constant params."""
    leaf = Var(np.asarray(img, dtype=np.float64))
    s = disc_score_var(spec, pv, leaf, trainable=False)
    backward(s)
    return leaf.grad


def r1_penalty(spec, pv, img, gamma, fd_eps=1e-4):
    """R1 value on a real image, accumulating its parameter gradient.

    value = gamma/2 * ||d D/d I||^2. The parameter gradient
    gamma * (d/dphi) <grad_I D, v> with v = stop-grad(grad_I D) is taken
    by central differences along v: two extra reverse passes at I +/- eps v.
    Gradients land in pv.grad; the exact value is returned.
    """
    img = np.asarray(img, dtype=np.float64)
    v = input_gradient(spec, pv, img)
    sq = float((v * v).sum())
    value = 0.5 * gamma * sq
    vn = np.linalg.norm(v)
    if vn == 0.0:
        return value
    eps = fd_eps / vn
    s_plus = disc_score_var(spec, pv, Var(img + eps * v), trainable=True)
    backward(s_plus, seed=np.asarray(gamma / (2 * eps)))
    s_minus = disc_score_var(spec, pv, Var(img - eps * v), trainable=True)
    backward(s_minus, seed=np.asarray(-gamma / (2 * eps)))
    return value
