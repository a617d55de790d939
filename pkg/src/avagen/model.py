"""Model container: network specs, parameter vectors, checkpoint format.

Two parameter vectors split the trainable state along the two training
stages: `geo` holds the feature-volume generator, occupancy perceptron,
skinning field, and warping field; `normal_pv` holds the detail normal
field. The binary checkpoint stores named f64 segments and is the
interchange format for every CLI command.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .diffnum import MlpSpec, ParamVector, init_mlp, mlp_forward
from .errors import FileFormatError, FileLengthError, FileVersionError
from .skeleton import N_SIZE, Skeleton

_ACTIVATIONS = ("softplus", "tanh", "relu")

MAGIC = b"GDNA"
VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Dimensions of every field network."""

    n_b: int
    l_shape: int = 16
    l_detail: int = 16
    l_f: int = 32
    vol_res: int = 16
    gen_hidden: tuple = (64,)
    occ_hidden: tuple = (64, 64)
    normal_hidden: tuple = (64, 64)
    skin_hidden: tuple = (64, 64)
    warp_hidden: tuple = (64, 64)
    activation: str = "softplus"

    def to_array(self):
        out = [self.n_b, self.l_shape, self.l_detail, self.l_f, self.vol_res,
               _ACTIVATIONS.index(self.activation)]
        for h in (self.gen_hidden, self.occ_hidden, self.normal_hidden,
                  self.skin_hidden, self.warp_hidden):
            out.append(len(h))
            out.extend(h)
        return np.array(out, dtype=np.float64)

    @classmethod
    def from_array(cls, arr):
        vals = [int(round(v)) for v in arr]
        n_b, l_shape, l_detail, l_f, vol_res, act = vals[:6]
        rest = vals[6:]
        hiddens = []
        pos = 0
        for _ in range(5):
            n = rest[pos]
            hiddens.append(tuple(rest[pos + 1 : pos + 1 + n]))
            pos += 1 + n
        return cls(n_b, l_shape, l_detail, l_f, vol_res, *hiddens, activation=_ACTIVATIONS[act])


def build_specs(arch):
    return {
        "gen": MlpSpec("gen", arch.l_shape, 0, arch.gen_hidden,
                       arch.vol_res ** 3 * arch.l_f, arch.activation, "none"),
        "occ": MlpSpec("occ", 3, arch.l_f, arch.occ_hidden, 1, arch.activation, "sigmoid"),
        "skin": MlpSpec("skin", 3, arch.l_shape, arch.skin_hidden, arch.n_b,
                        arch.activation, "softmax"),
        "warp": MlpSpec("warp", 3, N_SIZE, arch.warp_hidden, 3, arch.activation, "none"),
        "normal": MlpSpec("normal", 3, arch.l_detail + arch.l_f, arch.normal_hidden, 3,
                          arch.activation, "none"),
    }


class AvatarModel:
    """Skeleton + canonical fields + skinning/warping fields."""

    def __init__(self, arch, skeleton, geo=None, normal_pv=None):
        if arch.n_b != skeleton.n_bones:
            raise FileFormatError(f"arch has {arch.n_b} bones, skeleton {skeleton.n_bones}")
        self.arch = arch
        self.skeleton = skeleton
        self.specs = build_specs(arch)
        geo_segs = []
        for name in ("gen", "occ", "skin", "warp"):
            geo_segs.extend(self.specs[name].segments())
        self.geo = geo if geo is not None else ParamVector.build(geo_segs)
        self.normal_pv = (normal_pv if normal_pv is not None
                          else ParamVector.build(self.specs["normal"].segments()))
        # canonical volume box: body reach plus at least one grid cell
        reach = skeleton.max_reach(beta_mag=3.0, pad=0.12)
        cell = (reach[1] - reach[0]) / (arch.vol_res - 1)
        self.bbox = np.stack([reach[0] - 1.5 * cell, reach[1] + 1.5 * cell])
        self._vol_cache = {}
        self._version = 0

    def init_params(self, rng):
        """Seeded initialization honoring the start-of-training contracts:
        occupancy head at 0.5, uniform skinning, identity warp."""
        init_mlp(self.specs["gen"], self.geo, rng, gain=1.0)
        init_mlp(self.specs["occ"], self.geo, rng, final_zero=True)
        init_mlp(self.specs["skin"], self.geo, rng, final_zero=True)
        init_mlp(self.specs["warp"], self.geo, rng, final_zero=True)
        init_mlp(self.specs["normal"], self.normal_pv, rng, gain=0.5,
                 final_bias=[0.0, 0.0, 1.0])
        # keep the final normal layer's weights small but live
        w = self.normal_pv.view("normal.w{}".format(len(self.specs["normal"].layer_dims()) - 1))
        w[:] = rng.normal(0.0, 0.05 / np.sqrt(w.shape[0]), size=w.shape)
        self.bump_version()
        return self

    def bump_version(self):
        """Invalidate caches after any parameter mutation."""
        self._version += 1
        self._vol_cache.clear()

    def feature_volume_np(self, z):
        """(R, R, R, l_f) node features for one shape code, cached."""
        z = np.asarray(z, dtype=np.float64).reshape(self.arch.l_shape)
        key = (self._version, z.tobytes())
        if key not in self._vol_cache:
            flat = mlp_forward(self.specs["gen"], self.geo, z[None])
            r = self.arch.vol_res
            self._vol_cache[key] = flat.reshape(r, r, r, self.arch.l_f)
            if len(self._vol_cache) > 64:
                self._vol_cache.pop(next(iter(self._vol_cache)))
        return self._vol_cache[key]


def new_model(arch=None, skeleton=None, seed=0):
    from .skeleton import humanoid6

    skeleton = skeleton if skeleton is not None else humanoid6()
    arch = arch if arch is not None else ArchSpec(n_b=skeleton.n_bones)
    return AvatarModel(arch, skeleton).init_params(np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 version, u32 segment count, then per segment
# u32 name length, utf-8 name, u64 f64 count, little-endian f64 payload


def _skeleton_segments(sk):
    return [
        ("skeleton.parent", sk.parent.astype(np.float64)),
        ("skeleton.joint_base", sk.joint_base),
        ("skeleton.joint_dirs", sk.joint_dirs),
        ("skeleton.tip_base", sk.tip_base),
        ("skeleton.tip_dirs", sk.tip_dirs),
        ("skeleton.radius_base", sk.radius_base),
        ("skeleton.radius_dirs", sk.radius_dirs),
    ]


def save_checkpoint(path, model, extras=None):
    """Write the model (and optional named extras) atomically."""
    segs = [("meta.arch", model.arch.to_array()), ("meta.bbox", model.bbox)]
    segs.extend(_skeleton_segments(model.skeleton))
    for name in model.geo.segment_names():
        segs.append((f"geo.{name}", model.geo.const(name)))
    for name in model.normal_pv.segment_names():
        segs.append((f"normal_pv.{name}", model.normal_pv.const(name)))
    for name in sorted((extras or {})):
        segs.append((f"extra.{name}", np.asarray(extras[name], dtype=np.float64)))

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(segs)))
        for name, arr in segs:
            data = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", data.size))
            fh.write(data.tobytes())
    os.replace(tmp, path)


def read_segments(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FileFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FileVersionError(f"checkpoint version {version}, supported {VERSION}")
    pos = 12
    segs = {}
    for _ in range(count):
        if pos + 4 > len(blob):
            raise FileLengthError("checkpoint", count, len(segs))
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (cnt,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        end = pos + 8 * cnt
        if end > len(blob):
            raise FileLengthError(f"segment '{name}'", cnt, (len(blob) - pos) // 8)
        segs[name] = np.frombuffer(blob[pos:end], dtype="<f8").astype(np.float64)
        pos = end
    return segs


def load_checkpoint(path):
    """Returns (model, extras dict)."""
    segs = read_segments(path)
    arch = ArchSpec.from_array(segs["meta.arch"])
    n_b = arch.n_b
    sk = Skeleton(
        parent=segs["skeleton.parent"].astype(np.int64),
        joint_base=segs["skeleton.joint_base"].reshape(n_b, 3),
        joint_dirs=segs["skeleton.joint_dirs"].reshape(n_b, N_SIZE, 3),
        tip_base=segs["skeleton.tip_base"].reshape(n_b, 3),
        tip_dirs=segs["skeleton.tip_dirs"].reshape(n_b, N_SIZE, 3),
        radius_base=segs["skeleton.radius_base"],
        radius_dirs=segs["skeleton.radius_dirs"].reshape(n_b, N_SIZE),
    )
    model = AvatarModel(arch, sk)
    model.bbox = segs["meta.bbox"].reshape(2, 3)
    for name in model.geo.segment_names():
        model.geo.view(name)[:] = segs[f"geo.{name}"].reshape(model.geo.view(name).shape)
    for name in model.normal_pv.segment_names():
        model.normal_pv.view(name)[:] = segs[f"normal_pv.{name}"].reshape(
            model.normal_pv.view(name).shape
        )
    model.bump_version()
    extras = {k[len("extra.") :]: v for k, v in segs.items() if k.startswith("extra.")}
    return model, extras
