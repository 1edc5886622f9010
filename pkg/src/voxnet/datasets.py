"""Volume datasets, shift/flip augmentation, synthetic primitives and
autoencoder patch splitting."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    GeometryError,
    InvalidConfigError,
    InvalidLabelError,
    InvalidShiftError,
    ParseError,
)

AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class Dataset:
    """``volumes`` is ``[N, X, Y, Z]`` (single channel) or ``[N, C, X, Y, Z]``."""

    volumes: np.ndarray
    labels: np.ndarray
    class_names: list
    notes: list = field(default_factory=list)

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = list(self.class_names)
        if self.volumes.ndim not in (4, 5):
            raise GeometryError(f"volumes must be [N, X, Y, Z] or [N, C, X, Y, Z], got {self.volumes.shape}")
        if len(self.labels) != len(self.volumes):
            raise InvalidLabelError(f"{len(self.labels)} labels for {len(self.volumes)} volumes")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise InvalidLabelError("label index outside the class list")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        """Per-sample network input shape, channel first."""
        shape = self.volumes.shape[1:]
        return (1,) + shape if self.volumes.ndim == 4 else shape

    def batch(self, index):
        x = self.volumes[index].astype(np.float64)
        if self.volumes.ndim == 4:
            x = x[:, None]
        return x

    def subset(self, index):
        return Dataset(self.volumes[index], self.labels[index], self.class_names, list(self.notes))

    def class_counts(self):
        return np.bincount(self.labels, minlength=len(self.class_names))


def _axis(axis):
    if isinstance(axis, str):
        if axis.lower() not in AXES:
            raise InvalidShiftError(f"axis must be one of x, y, z; got {axis!r}")
        return AXES[axis.lower()]
    if axis not in (0, 1, 2):
        raise InvalidShiftError(f"axis must be 0, 1 or 2; got {axis!r}")
    return int(axis)


def shift_augment(grid, offsets):
    """Translate the content of a ``[X, Y, Z]`` volume; vacated voxels are 0,
    voxels pushed past the border are dropped."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise GeometryError(f"shift expects a 3D volume, got shape {grid.shape}")
    offsets = tuple(int(o) for o in offsets)
    if len(offsets) != 3:
        raise InvalidShiftError("need one offset per axis")
    for o, n in zip(offsets, grid.shape):
        if abs(o) >= n:
            raise InvalidShiftError(f"offset {o} not smaller than extent {n}")
    out = np.zeros_like(grid)
    src, dst = [], []
    for o, n in zip(offsets, grid.shape):
        src.append(slice(max(0, -o), n - max(0, o)))
        dst.append(slice(max(0, o), n - max(0, -o)))
    out[tuple(dst)] = grid[tuple(src)]
    return out


def flip_augment(grid, axis):
    return np.flip(np.asarray(grid), axis=_axis(axis)).copy()


@dataclass(frozen=True)
class AugmentSpec:
    """Shift copies along ``axes`` (positive direction, ``shift`` voxels),
    optional diagonal shifts over each axis pair, each emitted with and
    without a mirror along ``mirror``."""

    shift: int = 10
    axes: tuple = ("x", "y", "z")
    mirror: str = None
    include_diagonal: bool = False

    @property
    def diagonal_count(self):
        n = len(self.axes)
        return n * (n - 1) // 2 if self.include_diagonal else 0

    @property
    def multiplier(self):
        return (1 + len(self.axes) + self.diagonal_count) * (2 if self.mirror is not None else 1)

    def offsets(self):
        out = [(0, 0, 0)]
        idx = [_axis(a) for a in self.axes]
        for a in idx:
            v = [0, 0, 0]
            v[a] = self.shift
            out.append(tuple(v))
        if self.include_diagonal:
            for a, b in itertools.combinations(idx, 2):
                v = [0, 0, 0]
                v[a] = v[b] = self.shift
                out.append(tuple(v))
        return out


# Shift along each axis before and after a left/right flip: 8 samples per input.
MRI_AUGMENT = AugmentSpec(shift=10, axes=("x", "y", "z"), mirror="x")
# Autoencoder patches: original + two shifts, each with and without the flip.
CAE_AUGMENT = AugmentSpec(shift=10, axes=("x", "z"), mirror="x")


def augment_plan(dataset, spec):
    """Enlarged dataset holding ``spec.multiplier`` variants of every sample.

    Order: for each mirror state, for each offset, all samples. Labels are copied.
    """
    vols = dataset.volumes
    spatial_axes = (1, 2, 3) if vols.ndim == 4 else (2, 3, 4)
    parts = []
    mirrors = [False] if spec.mirror is None else [False, True]
    for mirrored in mirrors:
        base = np.flip(vols, axis=spatial_axes[_axis(spec.mirror)]) if mirrored else vols
        for off in spec.offsets():
            if off == (0, 0, 0):
                parts.append(np.array(base))
            else:
                parts.append(_shift_batch(base, off, spatial_axes))
    volumes = np.concatenate(parts) if parts else vols
    labels = np.tile(dataset.labels, len(parts))
    notes = list(dataset.notes) + [f"augmented x{spec.multiplier}: {spec}"]
    return Dataset(volumes, labels, dataset.class_names, notes)


def _shift_batch(vols, offsets, spatial_axes):
    for o, n in zip(offsets, (vols.shape[a] for a in spatial_axes)):
        if abs(o) >= n:
            raise InvalidShiftError(f"offset {o} not smaller than extent {n}")
    out = np.zeros_like(vols)
    src = [slice(None)] * vols.ndim
    dst = [slice(None)] * vols.ndim
    for a, o in zip(spatial_axes, offsets):
        n = vols.shape[a]
        src[a] = slice(max(0, -o), n - max(0, o))
        dst[a] = slice(max(0, o), n - max(0, -o))
    out[tuple(dst)] = vols[tuple(src)]
    return out


SHAPE_CLASSES = {"e": "ellipsoid", "c": "cuboid", "y": "cylinder"}


@dataclass(frozen=True)
class SynthConfig:
    """Random solid primitives. Semi-axes are drawn as fractions of the grid
    extent from ``size_range``; centres move up to ``center_jitter`` (a
    fraction of the extent) from the grid centre."""

    classes: tuple = ("ellipsoid", "cuboid", "cylinder")
    count_per_class: int = 30
    resolution: int = 32
    size_range: tuple = (0.2, 0.38)
    center_jitter: float = 0.08
    seed: int = 0


def _primitive(kind, res, center, semi):
    c = np.arange(res) + 0.5
    x, y, z = np.meshgrid(c, c, c, indexing="ij", sparse=True)
    dx, dy, dz = (x - center[0]) / semi[0], (y - center[1]) / semi[1], (z - center[2]) / semi[2]
    if kind == "ellipsoid":
        occ = dx * dx + dy * dy + dz * dz <= 1.0
    elif kind == "cuboid":
        occ = (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0) & (np.abs(dz) <= 1.0)
    elif kind == "cylinder":
        occ = (dx * dx + dy * dy <= 1.0) & (np.abs(dz) <= 1.0)
    else:
        raise InvalidConfigError(f"unknown primitive {kind!r}")
    return np.broadcast_to(occ, (res, res, res))


def synth_shapes(config=None, **overrides):
    """Balanced dataset of solid ellipsoids, cuboids and cylinders (``uint8``
    occupancy), deterministic for a given seed."""
    if config is None:
        config = SynthConfig(**overrides)
    elif overrides:
        raise TypeError("pass either a SynthConfig or keyword overrides")
    res = int(config.resolution)
    if res < 16:
        raise InvalidConfigError(f"resolution must be at least 16, got {res}")
    classes = tuple(SHAPE_CLASSES.get(c, c) for c in config.classes)
    for c in classes:
        if c not in SHAPE_CLASSES.values():
            raise InvalidConfigError(f"unknown shape class {c!r}")
    lo, hi = config.size_range
    if not 0 < lo <= hi:
        raise InvalidConfigError(f"bad size range {config.size_range}")
    # one-voxel margin keeps every shape strictly inside the grid
    if (hi + config.center_jitter) * res > res / 2 - 1:
        raise InvalidConfigError("size range plus centre jitter can push shapes out of the grid")

    rng = np.random.default_rng(config.seed)
    n = int(config.count_per_class)
    volumes = np.zeros((n * len(classes), res, res, res), dtype=np.uint8)
    labels = np.repeat(np.arange(len(classes)), n)
    for idx, label in enumerate(labels):
        semi = rng.uniform(lo, hi, 3) * res
        center = res / 2 + rng.uniform(-config.center_jitter, config.center_jitter, 3) * res
        volumes[idx] = _primitive(classes[label], res, center, semi)
    return Dataset(volumes, labels, list(classes), [f"synthetic: {config}"])


PATCH_SOURCE_SHAPE = (121, 145, 121)
PATCH_SHAPE = (64, 144, 64)
PATCH_WINDOWS = ((0, 64), (57, 121))


def patch_split(volume):
    """Four overlapping ``64 x 144 x 64`` quadrants of a ``121 x 145 x 121``
    scan: windows ``[0, 64)`` and ``[57, 121)`` on the first and last axes,
    the middle axis cropped to its first 144 slices. Order: (x0, z0),
    (x0, z1), (x1, z0), (x1, z1)."""
    volume = np.asarray(volume)
    if volume.shape != PATCH_SOURCE_SHAPE:
        raise GeometryError(f"patch_split needs a {PATCH_SOURCE_SHAPE} volume, got {volume.shape}")
    return [volume[x0:x1, :PATCH_SHAPE[1], z0:z1].copy()
            for (x0, x1), (z0, z1) in itertools.product(PATCH_WINDOWS, PATCH_WINDOWS)]


def patch_dataset(dataset):
    vols = [p for v in dataset.volumes for p in patch_split(v)]
    labels = np.repeat(dataset.labels, 4)
    return Dataset(np.stack(vols), labels, dataset.class_names, dataset.notes + ["patch split x4"])


def read_manifest(path):
    """``(path, label)`` pairs from a dataset index file.

    Lines are ``<relative path> <label name>``; an optional
    ``#classes a,b,c`` line fixes the class order (otherwise sorted names).
    """
    path = Path(path)
    entries = []
    classes = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#classes"):
            classes = [c for c in line[len("#classes"):].strip().split(",") if c]
            continue
        if not line or line.startswith("#"):
            continue
        parts = line.rsplit(None, 1)
        if len(parts) != 2:
            raise ParseError("expected '<path> <label>'", lineno, str(path))
        entries.append((path.parent / parts[0], parts[1], lineno))
    if classes is None:
        classes = sorted({label for _, label, _ in entries})
    pairs = []
    for p, label, lineno in entries:
        if label not in classes:
            raise ParseError(f"label {label!r} not in class list", lineno, str(path))
        pairs.append((p, classes.index(label)))
    return pairs, classes


def write_manifest(path, pairs, classes):
    path = Path(path)
    lines = ["#classes " + ",".join(classes)]
    for p, label in pairs:
        lines.append(f"{Path(p).as_posix()} {classes[label]}")
    path.write_text("\n".join(lines) + "\n")
