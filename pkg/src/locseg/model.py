"""3D U-Net with three ways of consuming patch location.

Modes: "none" ignores location entirely, "coordconv" appends three
normalized coordinate channels to the input, and "locbam" gates the second
encoder stage's features with per-axis 1D attention conditioned on global
position.  The gate fusion conv starts at zero, so a freshly built locbam
model computes exactly the baseline function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .location import PatchLocation, coord_channels, normalized_coords
from .tensor import Tensor

LOCATION_MODES = ("none", "coordconv", "locbam")


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 3
    base_channels: int = 8
    depth: int = 3
    location_mode: str = "none"
    locbam_reduction: int = 4
    locbam_kernel: int = 3
    pe_dim: int = 8

    def validate(self):
        if self.location_mode not in LOCATION_MODES:
            raise ValueError(f"location_mode must be one of {LOCATION_MODES}, "
                             f"got {self.location_mode!r}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.in_channels < 1 or self.num_classes < 2 or self.base_channels < 1:
            raise ValueError("in_channels/base_channels must be >= 1 and num_classes >= 2")
        if self.base_channels % self.locbam_reduction:
            raise ValueError(
                f"base_channels {self.base_channels} not divisible by "
                f"locbam_reduction {self.locbam_reduction}"
            )
        if self.locbam_kernel % 2 == 0 or self.locbam_kernel < 1:
            raise ValueError(f"locbam_kernel must be odd and positive, got {self.locbam_kernel}")
        if self.pe_dim < 2 or self.pe_dim % 2:
            raise ValueError(f"pe_dim must be even and >= 2, got {self.pe_dim}")

    def to_lines(self):
        return [f"{k} {getattr(self, k)}" for k in (
            "in_channels", "num_classes", "base_channels", "depth", "location_mode",
            "locbam_reduction", "locbam_kernel", "pe_dim")]

    @classmethod
    def from_fields(cls, fields):
        cfg = cls()
        for k, v in fields.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown model config field {k!r}")
            setattr(cfg, k, v if k == "location_mode" else int(v))
        cfg.validate()
        return cfg


def positional_encoding(coords, pe_dim, dtype=np.float32):
    """Sinusoidal encoding of positions, shape (pe_dim, L).

    Channel pair i holds sin(c / w_i) and cos(c / w_i) with
    w_i = 10000^(2i/pe_dim).
    """
    if pe_dim < 2 or pe_dim % 2:
        raise ValueError(f"pe_dim must be even and >= 2, got {pe_dim}")
    coords = np.asarray(coords, dtype=np.float64)
    out = np.empty((pe_dim, coords.size), dtype=dtype)
    for i in range(pe_dim // 2):
        omega = 10000.0 ** (2.0 * i / pe_dim)
        out[2 * i] = np.sin(coords / omega)
        out[2 * i + 1] = np.cos(coords / omega)
    return out


class Model:
    """Parameter container plus forward pass; built via build_model."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.params = {}

    # -- parameter plumbing ---------------------------------------------------

    def _param(self, name, array):
        t = Tensor(np.ascontiguousarray(array, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        return t

    def parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward --------------------------------------------------------------

    def _conv_block(self, x, prefix):
        p = self.params
        for i in (0, 1):
            x = ops.conv3d(x, p[f"{prefix}.conv{i}.w"], p[f"{prefix}.conv{i}.b"],
                           padding=p[f"{prefix}.conv{i}.w"].shape[2] // 2)
            x = ops.instance_norm(x, p[f"{prefix}.norm{i}.gamma"], p[f"{prefix}.norm{i}.beta"])
            x = x.leaky_relu()
        return x

    def _gate(self, features, axis, locations):
        cfg = self.config
        p = self.params
        length = features.shape[2 + axis]
        coords = np.stack([normalized_coords(loc, axis, length) for loc in locations])
        pe = np.stack([positional_encoding(c, cfg.pe_dim) for c in coords])
        pe = ops.channel_affine(Tensor(pe), p[f"locbam.axis{axis}.pe.scale"],
                                p[f"locbam.axis{axis}.pe.bias"])
        pooled = ops.pool_avg_over_axes(features, axis)
        h = ops.concat([pooled, pe], axis=1)
        k = cfg.locbam_kernel
        h = ops.conv1d(h, p[f"locbam.axis{axis}.conv0.w"], p[f"locbam.axis{axis}.conv0.b"],
                       padding=k // 2)
        h = h.leaky_relu()
        h = ops.conv1d(h, p[f"locbam.axis{axis}.conv1.w"], p[f"locbam.axis{axis}.conv1.b"],
                       padding=k // 2)
        return h.sigmoid()

    def _locbam(self, features, locations):
        gated = [ops.broadcast_mul(self._gate(features, ax, locations), features, axis=ax)
                 for ax in (0, 1, 2)]
        fused = ops.conv3d(ops.concat(gated, axis=1),
                           self.params["locbam.fuse.w"], self.params["locbam.fuse.b"])
        return fused + features

    def forward(self, patch, locations=None):
        """Logits (N, K, D, H, W) for a batch of patches.

        locations: one PatchLocation per batch item (a single location is
        accepted for N == 1).  Required unless location_mode is none.
        """
        cfg = self.config
        x = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch, dtype=np.float32))
        if x.data.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"expected patch (N,{cfg.in_channels},D,H,W), got {x.shape}"
            )
        n = x.shape[0]
        locations = _as_locations(locations, n, required=cfg.location_mode != "none")
        factor = 2 ** (cfg.depth - 1)
        for e in x.shape[2:]:
            if e % factor:
                raise ValueError(
                    f"patch extents {x.shape[2:]} must be divisible by {factor} "
                    f"for depth {cfg.depth}"
                )

        if cfg.location_mode == "coordconv":
            cc = np.stack([coord_channels(loc) for loc in locations])
            x = ops.concat([x, Tensor(cc)], axis=1)

        skips = []
        for s in range(cfg.depth):
            x = self._conv_block(x, f"enc{s}")
            if s == 1 and cfg.location_mode == "locbam":
                x = self._locbam(x, locations)
            if s < cfg.depth - 1:
                skips.append(x)
                x = ops.max_pool3d(x)

        for s in range(cfg.depth - 2, -1, -1):
            x = ops.up_conv3d(x, self.params[f"up{s}.w"], self.params[f"up{s}.b"])
            x = ops.concat([x, skips[s]], axis=1)
            x = self._conv_block(x, f"dec{s}")

        return ops.conv3d(x, self.params["head.w"], self.params["head.b"])


def _as_locations(locations, n, required):
    if locations is None:
        if required:
            raise ValueError("this location mode requires patch locations")
        return None
    if isinstance(locations, PatchLocation):
        locations = [locations]
    locations = list(locations)
    if len(locations) != n:
        raise ValueError(f"got {len(locations)} locations for a batch of {n}")
    return locations


def build_model(config: ModelConfig, seed):
    """Deterministically He-initialize a model.

    Backbone weights are drawn first in a fixed order, so baseline and
    locbam models built from the same seed share identical backbone
    initialization; locbam draws its extra gate parameters afterwards and
    its fusion conv starts at zero.
    """
    config.validate()
    model = Model(config)
    rng = np.random.default_rng(seed)

    def he(name, shape, bias_dim=None):
        fan_in = int(np.prod(shape[1:]))
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        model._param(name, w)
        model._param(name.replace(".w", ".b"),
                     np.zeros(shape[0] if bias_dim is None else bias_dim))

    def conv_block(prefix, cin, cout):
        for i in (0, 1):
            he(f"{prefix}.conv{i}.w", (cout, cin if i == 0 else cout, 3, 3, 3))
            model._param(f"{prefix}.norm{i}.gamma", np.ones(cout))
            model._param(f"{prefix}.norm{i}.beta", np.zeros(cout))

    cin = config.in_channels + (3 if config.location_mode == "coordconv" else 0)
    chans = [config.base_channels * 2 ** s for s in range(config.depth)]
    for s, c in enumerate(chans):
        conv_block(f"enc{s}", cin if s == 0 else chans[s - 1], c)
    for s in range(config.depth - 2, -1, -1):
        he(f"up{s}.w", (chans[s + 1], chans[s], 2, 2, 2), bias_dim=chans[s])
        conv_block(f"dec{s}", 2 * chans[s], chans[s])
    he("head.w", (config.num_classes, chans[0], 1, 1, 1))

    if config.location_mode == "locbam":
        c = chans[1]
        red = c // config.locbam_reduction
        k = config.locbam_kernel
        for ax in (0, 1, 2):
            # the few PE channels sit beside C pooled feature channels at the
            # gate conv input; amplified init keeps position from being
            # drowned out under fan-in He scaling
            model._param(f"locbam.axis{ax}.pe.scale",
                         np.full(config.pe_dim, 8.0))
            model._param(f"locbam.axis{ax}.pe.bias", np.zeros(config.pe_dim))
            he(f"locbam.axis{ax}.conv0.w", (red, c + config.pe_dim, k))
            he(f"locbam.axis{ax}.conv1.w", (c, red, k))
        model._param("locbam.fuse.w", np.zeros((c, 3 * c, 1, 1, 1)))
        model._param("locbam.fuse.b", np.zeros(c))
    return model


def locbam_axis_gate(model: Model, features, axis, locations):
    """One axis gate (N, C, L_axis) with values in (0, 1)."""
    if model.config.location_mode != "locbam":
        raise ValueError("model has no locbam parameters")
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    f = features if isinstance(features, Tensor) else Tensor(features)
    locations = _as_locations(locations, f.shape[0], required=True)
    return model._gate(f, axis, locations)


def locbam_forward(model: Model, features, locations):
    """Gate, fuse and residually add; shape-preserving."""
    if model.config.location_mode != "locbam":
        raise ValueError("model has no locbam parameters")
    f = features if isinstance(features, Tensor) else Tensor(features)
    locations = _as_locations(locations, f.shape[0], required=True)
    return model._locbam(f, locations)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(model: Model, path):
    """Text header (config + parameter manifest), blank line, raw f32 blobs."""
    lines = ["LSCK1"]
    lines += model.config.to_lines()
    for name, p in model.params.items():
        lines.append("param {} {}".format(name, " ".join(str(e) for e in p.shape)))
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n\n").encode("ascii"))
        for p in model.params.values():
            f.write(p.data.astype("<f4", copy=False).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    head_end = blob.find(b"\n\n")
    if head_end < 0:
        raise ValueError(f"{path}: missing blank line after checkpoint header")
    lines = blob[:head_end].decode("ascii").split("\n")
    if lines[0] != "LSCK1":
        raise ValueError(f"{path}: bad checkpoint magic {lines[0]!r}")
    fields = {}
    manifest = []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "param":
            toks = rest.split()
            manifest.append((toks[0], tuple(int(t) for t in toks[1:])))
        else:
            fields[key] = rest
    config = ModelConfig.from_fields(fields)
    model = Model(config)
    off = head_end + 2
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        raw = np.frombuffer(blob[off:off + 4 * n], dtype="<f4")
        if raw.size != n:
            raise ValueError(f"{path}: truncated blob for parameter {name}")
        off += 4 * n
        model._param(name, raw.copy().reshape(shape))
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes after parameters")
    return model
