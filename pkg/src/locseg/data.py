"""Synthetic location-dependent volumes and the RV01 on-disk format.

The generator builds volumes whose foreground classes can be made
appearance-ambiguous on purpose: in axial_pairs mode classes come in pairs
sharing one intensity and shape distribution but occupying disjoint axial
score bands, so a model without location context cannot tell pair members
apart.  A bright background slab at a fixed low score band acts as a global
landmark for models that can see it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .location import BprMap, Volume

LABEL_DTYPE = np.uint8


@dataclass
class SyntheticConfig:
    """Parameters of one synthetic dataset.

    num_classes counts foreground classes; labels use 0 for background.  In
    axial_pairs mode it must be even: classes (1,2), (3,4), ... form pairs
    with identical appearance and disjoint score bands.  pair_bands gives
    the two score bands shared by every pair; anchor_band places the
    landmark slab (score units, set anchor_intensity to 0 to disable).
    """

    volume_shape: tuple = (64, 64, 64)
    num_classes: int = 2
    num_volumes: int = 10
    ambiguity_mode: str = "axial_pairs"
    blob_radius: tuple = (4, 7)
    blobs_per_class: int = 1
    noise_sigma: float = 0.1
    fov_jitter: float = 0.0
    seed: int = 0
    pair_bands: tuple = ((30.0, 45.0), (65.0, 80.0))
    anchor_band: tuple = (2.0, 12.0)
    anchor_intensity: float = 2.0
    spacing: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 foreground classes, got {self.num_classes}")
        if self.ambiguity_mode not in ("none", "axial_pairs"):
            raise ValueError(f"unknown ambiguity_mode {self.ambiguity_mode!r}")
        if self.ambiguity_mode == "axial_pairs" and self.num_classes % 2:
            raise ValueError("axial_pairs mode needs an even number of foreground classes")
        if self.num_volumes < 1:
            raise ValueError("num_volumes must be positive")
        lo, hi = self.blob_radius
        if lo < 1 or hi < lo:
            raise ValueError(f"bad blob_radius range {self.blob_radius}")
        if not 0.0 <= self.fov_jitter < 1.0:
            raise ValueError(f"fov_jitter must be in [0, 1), got {self.fov_jitter}")
        if any(e < 2 * hi + 3 for e in self.volume_shape[1:]):
            raise ValueError(
                f"in-plane extents {self.volume_shape[1:]} too small for radius {hi} blobs"
            )
        d = self.volume_shape[0]
        a = 100.0 / (d - 1)
        for lo_s, hi_s in self.pair_bands:
            if not (0.0 <= lo_s < hi_s <= 100.0):
                raise ValueError(f"bad score band ({lo_s}, {hi_s})")
            z_lo = max(lo_s / a, float(hi))
            z_hi = min(hi_s / a, d - 1.0 - hi)
            if z_lo > z_hi:
                raise ValueError(
                    f"score band ({lo_s}, {hi_s}) leaves no room for radius-{hi} "
                    f"blobs in a depth-{d} volume"
                )


def class_profiles(config: SyntheticConfig):
    """Construction metadata: per class, intensity mean, score band, radii.

    Pair members deliberately share mu and radius_range and differ only in
    band; callers can assert ambiguity from this rather than by statistics.
    """
    config.validate()
    profiles = {}
    for k in range(1, config.num_classes + 1):
        if config.ambiguity_mode == "axial_pairs":
            pair = (k - 1) // 2
            band = config.pair_bands[(k - 1) % 2]
            mu = 1.0 + 0.4 * pair
        else:
            band = None
            mu = 0.6 + 0.3 * (k - 1)
        profiles[k] = {"mu": mu, "band": band, "radius_range": tuple(config.blob_radius)}
    return profiles


def _band_to_z(band, bpr_map, depth, margin):
    """Axial index interval whose scores fall in band, shrunk by margin."""
    lo = (band[0] - bpr_map.b) / bpr_map.a
    hi = (band[1] - bpr_map.b) / bpr_map.a
    return max(lo, margin), min(hi, depth - 1.0 - margin)


def generate(config: SyntheticConfig):
    """Deterministically generate the configured list of volumes."""
    config.validate()
    profiles = class_profiles(config)
    rng = np.random.default_rng(config.seed)
    d0, h, w = config.volume_shape
    base = BprMap(100.0 / (d0 - 1), 0.0)
    r_lo, r_hi = config.blob_radius

    volumes = []
    for _ in range(config.num_volumes):
        # decide the axial field of view first, then place content inside it
        for _ in range(100):
            cut0 = int(rng.integers(0, int(config.fov_jitter / 2 * d0) + 1))
            cut1 = int(rng.integers(0, int(config.fov_jitter / 2 * d0) + 1))
            d = d0 - cut0 - cut1
            bpr_map = BprMap(base.a, base.a * cut0 + base.b)
            if config.ambiguity_mode != "axial_pairs":
                break
            ok = all(
                _band_to_z(band, bpr_map, d, r_hi)[0] <= _band_to_z(band, bpr_map, d, r_hi)[1]
                for band in config.pair_bands
            )
            if ok:
                break
        else:
            raise ValueError("could not find a field of view keeping all score bands usable")

        vol = np.zeros((d, h, w), dtype=np.float32)
        labels = np.zeros((d, h, w), dtype=LABEL_DTYPE)

        if config.anchor_intensity:
            z_lo, z_hi = _band_to_z(config.anchor_band, bpr_map, d, 0.0)
            if z_lo <= z_hi:
                vol[int(np.ceil(z_lo)):int(np.floor(z_hi)) + 1] = config.anchor_intensity

        for k in range(1, config.num_classes + 1):
            prof = profiles[k]
            for _ in range(config.blobs_per_class):
                r = int(rng.integers(r_lo, r_hi + 1))
                if prof["band"] is not None:
                    z_min, z_max = _band_to_z(prof["band"], bpr_map, d, r)
                    cz = float(rng.uniform(z_min, z_max))
                else:
                    cz = float(rng.uniform(r, d - 1 - r))
                cy = float(rng.uniform(r + 1, h - 2 - r))
                cx = float(rng.uniform(r + 1, w - 2 - r))
                zz, yy, xx = np.ogrid[:d, :h, :w]
                inside = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                vol[inside] = prof["mu"]
                labels[inside] = k

        if config.noise_sigma:
            vol += rng.normal(0.0, config.noise_sigma, vol.shape).astype(np.float32)

        volumes.append(Volume(intensities=vol, spacing=tuple(config.spacing),
                              labels=labels, bpr_map=bpr_map))
    return volumes


# -- RV01 file format ---------------------------------------------------------

_MAGIC = "RV01"
_DTYPES = {"float32": np.float32, "float64": np.float64}


def write_volume(volume: Volume, path):
    """Write a volume: text header, blank line, raw little-endian payload."""
    data = volume.intensities
    dtype_name = data.dtype.name
    if dtype_name not in _DTYPES:
        raise ValueError(f"unsupported intensity dtype {dtype_name}")
    header = [
        _MAGIC,
        "shape {} {} {}".format(*data.shape),
        "spacing {} {} {}".format(*(repr(float(s)) for s in volume.spacing)),
        f"dtype {dtype_name}",
        f"bpr {volume.bpr_map.a!r} {volume.bpr_map.b!r}",
        f"has_labels {int(volume.labels is not None)}",
    ]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n\n").encode("ascii"))
        f.write(data.astype("<" + data.dtype.str[1:], copy=False).tobytes())
        if volume.labels is not None:
            f.write(volume.labels.astype(LABEL_DTYPE, copy=False).tobytes())


def read_volume(path):
    """Read an RV01 file back into a Volume, verifying sizes as it goes."""
    with open(path, "rb") as f:
        blob = f.read()
    head_end = blob.find(b"\n\n")
    if head_end < 0:
        raise ValueError(f"{path}: missing blank line after header")
    lines = blob[:head_end].decode("ascii", errors="replace").split("\n")
    if lines[0] != _MAGIC:
        raise ValueError(f"{path}: bad magic {lines[0]!r}, expected {_MAGIC!r}")
    fields = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        fields[key] = rest
    try:
        shape = tuple(int(t) for t in fields["shape"].split())
        spacing = tuple(float(t) for t in fields["spacing"].split())
        dtype_name = fields["dtype"]
        a, b = (float(t) for t in fields["bpr"].split())
        has_labels = bool(int(fields["has_labels"]))
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed header field ({exc})") from exc
    if len(shape) != 3 or dtype_name not in _DTYPES:
        raise ValueError(f"{path}: bad shape {shape} or dtype {dtype_name!r}")

    dtype = _DTYPES[dtype_name]
    n = int(np.prod(shape))
    payload = blob[head_end + 2:]
    need = n * np.dtype(dtype).itemsize + (n if has_labels else 0)
    if len(payload) != need:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    raw = np.frombuffer(payload[:n * np.dtype(dtype).itemsize], dtype="<" + np.dtype(dtype).str[1:])
    intensities = raw.astype(dtype, copy=True).reshape(shape)
    labels = None
    if has_labels:
        labels = np.frombuffer(payload[n * np.dtype(dtype).itemsize:], dtype=LABEL_DTYPE)
        labels = labels.copy().reshape(shape)
    return Volume(intensities=intensities, spacing=spacing, labels=labels,
                  bpr_map=BprMap(a, b))


# -- manifests and datasets ---------------------------------------------------

SPLITS = ("train", "val", "test")


def write_manifest(path, split_paths):
    """Write 'split relative-path' lines describing a dataset on disk."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w") as f:
        for split in SPLITS:
            for p in split_paths.get(split, ()):
                f.write(f"{split} {os.path.relpath(p, base)}\n")


def read_manifest(path):
    """Parse a manifest into {split: [absolute volume path, ...]}."""
    base = os.path.dirname(os.path.abspath(path))
    out = {s: [] for s in SPLITS}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            split, _, rel = line.partition(" ")
            if split not in SPLITS or not rel:
                raise ValueError(f"{path}:{ln}: expected '<split> <path>', got {line!r}")
            out[split].append(os.path.join(base, rel))
    return out


@dataclass
class Dataset:
    """In-memory volumes grouped by split."""

    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @classmethod
    def from_manifest(cls, path):
        split_paths = read_manifest(path)
        return cls(**{s: [read_volume(p) for p in split_paths[s]] for s in SPLITS})

    def split(self, name):
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)
