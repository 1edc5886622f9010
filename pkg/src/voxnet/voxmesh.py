"""Mesh parsing (OFF, OBJ, ASCII/binary STL), rasterisation into occupancy
grids, binvox I/O and threshold binarisation of intensity volumes."""

from __future__ import annotations

import re
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, FormatError, IntegrityError, ParityWarning
from .exporters import atomic_write_bytes

DEFAULT_RESOLUTION = 64
DEFAULT_THRESHOLD = 0.4
EDGE_TOLERANCE = 1e-9


@dataclass
class Mesh:
    vertices: np.ndarray  # [V, 3] float64
    triangles: np.ndarray  # [T, 3] int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise IntegrityError("triangle vertex index out of range")
        t = self.triangles
        keep = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
        self.triangles = t[keep]

    def translated(self, offset):
        return Mesh(self.vertices + np.asarray(offset, dtype=np.float64), self.triangles.copy())


@dataclass(eq=False)
class VoxelGrid:
    """Boolean occupancy indexed ``[x, y, z]``. A voxel index ``g`` (in voxel
    units, corners at integers) maps to model space as
    ``translate + scale * g / extent``."""

    occupancy: np.ndarray
    translate: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    source: str = ""
    threshold: float = None

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.ndim != 3:
            raise IntegrityError(f"occupancy must be 3D, got shape {self.occupancy.shape}")
        self.translate = tuple(float(v) for v in self.translate)
        self.scale = float(self.scale)

    @property
    def extents(self):
        return self.occupancy.shape

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (self.extents == other.extents and np.array_equal(self.occupancy, other.occupancy)
                and self.translate == other.translate and self.scale == other.scale)

    def count(self):
        return int(self.occupancy.sum())


# --- parsing -------------------------------------------------------------------------

def _data_lines(data):
    """``(byte_offset, tokens)`` for every non-blank line, comments stripped."""
    out = []
    offset = 0
    for raw in data.splitlines(keepends=True):
        text = raw.split(b"#", 1)[0].decode("ascii", errors="replace").split()
        if text:
            out.append((offset, text))
        offset += len(raw)
    return out


def _parse_off(data):
    lines = _data_lines(data)
    if not lines or not lines[0][1][0].upper().endswith("OFF"):
        raise FormatError("missing OFF header", lines[0][0] if lines else 0)
    head_off, head = lines[0]
    rest = lines[1:]
    counts = head[1:]
    if not counts:
        if not rest:
            raise FormatError("missing OFF element counts", len(data))
        head_off, counts = rest[0]
        rest = rest[1:]
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise FormatError("bad OFF element counts", head_off) from None
    if len(rest) < nv:
        raise IntegrityError(f"OFF declares {nv} vertices but provides {len(rest)} vertex lines")
    if len(rest) < nv + nf:
        raise IntegrityError(f"OFF declares {nv} vertices and {nf} faces but provides "
                             f"{len(rest)} data lines")
    try:
        verts = [[float(v) for v in toks[:3]] for _, toks in rest[:nv]]
    except ValueError:
        raise FormatError("non-numeric vertex coordinate", rest[0][0]) from None
    if any(len(v) != 3 for v in verts):
        raise IntegrityError("OFF vertex line with fewer than 3 coordinates")
    tris = []
    for off, toks in rest[nv:nv + nf]:
        try:
            k = int(toks[0])
            idx = [int(t) for t in toks[1:1 + k]]
        except ValueError:
            raise FormatError("non-integer face entry", off) from None
        if len(idx) != k or k < 3:
            raise IntegrityError(f"face at byte {off} lists {len(idx)} of {k} indices")
        if min(idx) < 0 or max(idx) >= nv:
            raise IntegrityError(f"face at byte {off} references a vertex outside [0, {nv})")
        tris.extend([idx[0], idx[i], idx[i + 1]] for i in range(1, k - 1))
    return Mesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))


def _parse_obj(data):
    verts = []
    tris = []
    faces = []
    for off, toks in _data_lines(data):
        if toks[0] == "v":
            try:
                verts.append([float(v) for v in toks[1:4]])
            except ValueError:
                raise FormatError("non-numeric vertex coordinate", off) from None
            if len(verts[-1]) != 3:
                raise FormatError("vertex needs three coordinates", off)
        elif toks[0] == "f":
            try:
                idx = [int(t.split("/")[0]) for t in toks[1:]]
            except ValueError:
                raise FormatError("bad face index", off) from None
            if len(idx) < 3:
                raise FormatError("face needs at least three vertices", off)
            faces.append((off, idx, len(verts)))
    nv = len(verts)
    for off, idx, seen in faces:
        # negative indices are relative to the vertices defined so far
        resolved = [i - 1 if i > 0 else seen + i for i in idx]
        if 0 in idx or min(resolved) < 0 or max(resolved) >= nv:
            raise IntegrityError(f"face at byte {off} references a missing vertex")
        tris.extend([resolved[0], resolved[i], resolved[i + 1]] for i in range(1, len(resolved) - 1))
    return Mesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))


def _welded(corners):
    """Mesh from a ``[T, 3, 3]`` corner array with identical vertices merged."""
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 3)
    if corners.size == 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, inverse = np.unique(corners, axis=0, return_inverse=True)
    return Mesh(verts, inverse.reshape(-1, 3))


def _parse_stl_ascii(data):
    if not data.lstrip().lower().startswith(b"solid"):
        raise FormatError("ASCII STL must start with 'solid'", 0)
    corners = []
    for m in re.finditer(rb"vertex\s+(\S+)\s+(\S+)\s+(\S+)", data):
        try:
            corners.append([float(v) for v in m.groups()])
        except ValueError:
            raise FormatError("non-numeric STL vertex", m.start()) from None
    if len(corners) % 3:
        raise FormatError("STL vertex count is not a multiple of three", len(data))
    return _welded(np.array(corners).reshape(-1, 3, 3))


_STL_RECORD = np.dtype([("normal", "<f4", 3), ("corners", "<f4", (3, 3)), ("attr", "<u2")])


def _parse_stl_binary(data):
    if len(data) < 84:
        raise FormatError("binary STL shorter than its 84-byte header", len(data))
    (count,) = struct.unpack_from("<I", data, 80)
    need = 84 + 50 * count
    if len(data) < need:
        raise FormatError(f"binary STL declares {count} triangles but holds "
                          f"{(len(data) - 84) // 50}", len(data))
    records = np.frombuffer(data, dtype=_STL_RECORD, count=count, offset=84)
    return _welded(records["corners"].astype(np.float64))


_PARSERS = {"off": _parse_off, "obj": _parse_obj, "stlAscii": _parse_stl_ascii, "stlBinary": _parse_stl_binary}


def parse_mesh(data, fmt):
    """Parse mesh bytes; ``fmt`` is ``off``, ``obj``, ``stlAscii`` or ``stlBinary``.
    Polygon faces are fan-triangulated."""
    if fmt not in _PARSERS:
        raise ValueError(f"unknown mesh format {fmt!r}")
    return _PARSERS[fmt](bytes(data))


def detect_format(path, data):
    suffix = Path(path).suffix.lower()
    if suffix == ".off":
        return "off"
    if suffix == ".obj":
        return "obj"
    if suffix == ".stl":
        if len(data) >= 84 and len(data) == 84 + 50 * struct.unpack_from("<I", data, 80)[0]:
            return "stlBinary"
        return "stlAscii"
    raise FormatError(f"cannot infer mesh format from suffix {suffix!r}", 0)


def load_mesh(path):
    data = Path(path).read_bytes()
    return parse_mesh(data, detect_format(path, data))


# --- voxelisation --------------------------------------------------------------------

def _grid_frame(vertices, resolution):
    lo = vertices.min(axis=0)
    extent = vertices.max(axis=0) - lo
    scale = float(extent.max())
    if scale <= 0:
        raise DegenerateInputError("mesh has zero extent")
    offset = (resolution - extent / scale * resolution) / 2.0
    grid = (vertices - lo) / scale * resolution + offset
    translate = lo - offset * scale / resolution
    return grid, tuple(translate), scale


def triangle_box_overlap(tri, centers, half=0.5):
    """Separating-axis test of one triangle ``[3, 3]`` against axis-aligned
    cubes given by ``centers [K, 3]``. Touching counts as overlap."""
    v = tri[None, :, :] - centers[:, None, :]  # [K, 3, 3]
    v0, v1, v2 = v[:, 0], v[:, 1], v[:, 2]
    hit = np.ones(len(centers), dtype=bool)
    # box face normals
    vmin = v.min(axis=1)
    vmax = v.max(axis=1)
    hit &= np.all((vmin <= half) & (vmax >= -half), axis=1)
    edges = (tri[1] - tri[0], tri[2] - tri[1], tri[0] - tri[2])
    for e in edges:
        for ax in np.eye(3):
            a = np.cross(e, ax)
            r = half * np.abs(a).sum()
            p = np.stack([v0 @ a, v1 @ a, v2 @ a], axis=1)
            hit &= (p.min(axis=1) <= r) & (p.max(axis=1) >= -r)
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    r = half * np.abs(n).sum()
    s = v0 @ n
    hit &= np.abs(s) <= r
    return hit


def _surface(tris, res):
    occ = np.zeros((res, res, res), dtype=bool)
    for tri in tris:
        lo = np.clip(np.floor(tri.min(axis=0)).astype(int) - 1, 0, res - 1)
        hi = np.clip(np.floor(tri.max(axis=0)).astype(int), 0, res - 1)
        axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        idx = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        hit = triangle_box_overlap(tri, idx + 0.5)
        sel = idx[hit]
        occ[sel[:, 0], sel[:, 1], sel[:, 2]] = True
    return occ


_JITTERS = ((0.0, 0.0), (1.234567e-6, 2.718281e-6), (-3.14159e-6, 1.41421e-6), (2.2360e-6, -1.7320e-6))


def _ray_hits(tris, ys, zs):
    """x-coordinates where +x rays through ``(ys, zs)`` cross the triangles.

    Returns ``(hits, ambiguous)``: ``hits`` is a list (one per ray) of
    crossing abscissae, ``ambiguous`` flags rays passing within
    ``EDGE_TOLERANCE`` of a triangle edge or vertex.
    """
    n = len(ys)
    hits = [[] for _ in range(n)]
    ambiguous = np.zeros(n, dtype=bool)
    for tri in tris:
        a, b, c = tri[:, 1:]
        d = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(d) < 1e-15:
            continue
        lo = tri[:, 1:].min(axis=0) - EDGE_TOLERANCE
        hi = tri[:, 1:].max(axis=0) + EDGE_TOLERANCE
        cand = np.flatnonzero((ys >= lo[0]) & (ys <= hi[0]) & (zs >= lo[1]) & (zs <= hi[1]))
        if cand.size == 0:
            continue
        py, pz = ys[cand], zs[cand]

        def edge(p, q):
            return (q[0] - p[0]) * (pz - p[1]) - (q[1] - p[1]) * (py - p[0])

        ea, eb, ec = edge(b, c), edge(c, a), edge(a, b)  # weights of a, b, c (times d)
        u, v, w = ea / d, eb / d, ec / d
        dist = np.minimum.reduce([
            np.abs(ea) / np.hypot(*(c - b)),
            np.abs(eb) / np.hypot(*(a - c)),
            np.abs(ec) / np.hypot(*(b - a)),
        ])
        inside = (u >= 0) & (v >= 0) & (w >= 0)
        near = (u >= -1e-7) & (v >= -1e-7) & (w >= -1e-7) & (dist < EDGE_TOLERANCE)
        ambiguous[cand[near]] = True
        xs = u * tri[0, 0] + v * tri[1, 0] + w * tri[2, 0]
        for r, x in zip(cand[inside], xs[inside]):
            hits[r].append(x)
    return hits, ambiguous


def _solid_interior(tris, res):
    c = np.arange(res) + 0.5
    jj, kk = np.meshgrid(c, c, indexing="ij")
    ys, zs = jj.ravel(), kk.ravel()
    final = [None] * ys.size
    pending = np.arange(ys.size)
    for dy, dz in _JITTERS:
        hits, amb = _ray_hits(tris, ys[pending] + dy, zs[pending] + dz)
        for local, row in enumerate(pending):
            if not amb[local]:
                final[row] = hits[local]
        still = pending[amb]
        if still.size == 0:
            break
        pending = still
    else:
        for row in pending:  # jitter budget exhausted; accept the last cast
            final[row] = []
    inside = np.zeros((res, res, res), dtype=bool)
    odd_rays = 0
    for row, xs in enumerate(final):
        if not xs:
            continue
        xs = np.sort(np.asarray(xs))
        if len(xs) % 2:
            # an odd crossing count has no consistent inside; leave the ray to the surface pass
            odd_rays += 1
            continue
        after = len(xs) - np.searchsorted(xs, c, side="right")
        j, k = divmod(row, res)
        inside[:, j, k] = after % 2 == 1
    if odd_rays:
        warnings.warn(f"{odd_rays} rays crossed the surface an odd number of times; "
                      "mesh is probably not watertight", ParityWarning, stacklevel=3)
    return inside


def voxelize(mesh, resolution=DEFAULT_RESOLUTION, fill="solid"):
    """Rasterise ``mesh`` into a ``resolution**3`` grid.

    The mesh is scaled uniformly so its longest bounding-box side spans the
    grid and centred on the other axes. ``surface`` sets every voxel whose
    cube touches a triangle; ``solid`` also sets voxels whose centre lies
    inside the mesh by +x ray parity. Rays crossing the surface an odd
    number of times (open meshes) add no interior voxels and trigger a
    :class:`ParityWarning`.
    """
    if fill not in ("surface", "solid"):
        raise ValueError(f"fill must be 'surface' or 'solid', got {fill!r}")
    if resolution < 2:
        raise DegenerateInputError("resolution must be at least 2")
    if len(mesh.triangles) == 0:
        raise DegenerateInputError("mesh has no triangles")
    used = np.unique(mesh.triangles)
    grid_all = np.zeros_like(mesh.vertices)
    grid_used, translate, scale = _grid_frame(mesh.vertices[used], resolution)
    grid_all[used] = grid_used
    tris = grid_all[mesh.triangles]
    occ = _surface(tris, resolution)
    if fill == "solid":
        occ |= _solid_interior(tris, resolution)
    return VoxelGrid(occ, translate, scale, source=f"mesh:{fill}")


# --- binvox --------------------------------------------------------------------------

def _rle(values):
    values = np.asarray(values, dtype=np.uint8)
    if values.size == 0:
        return b""
    change = np.flatnonzero(np.diff(values)) + 1
    starts = np.r_[0, change]
    lengths = np.diff(np.r_[starts, values.size])
    out = bytearray()
    for s, n in zip(starts, lengths):
        v = int(values[s])
        full, rest = divmod(int(n), 255)
        out += bytes((v, 255)) * full
        if rest:
            out += bytes((v, rest))
    return bytes(out)


def binvox_bytes(grid):
    dx, dy, dz = grid.extents
    tx, ty, tz = grid.translate
    header = (f"#binvox 1\ndim {dx} {dy} {dz}\n"
              f"translate {tx!r} {ty!r} {tz!r}\nscale {grid.scale!r}\ndata\n").encode("ascii")
    # binvox order: y fastest, then z, then x
    return header + _rle(grid.occupancy.transpose(0, 2, 1).ravel())


def write_binvox(grid, path):
    return atomic_write_bytes(path, binvox_bytes(grid))


def parse_binvox(data):
    pos = 0

    def next_line():
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError("truncated binvox header", pos)
        line, start = data[pos:end], pos
        pos = end + 1
        return line.decode("ascii", errors="replace").strip(), start

    line, start = next_line()
    if not line.startswith("#binvox"):
        raise FormatError("bad binvox magic", 0)
    dims = translate = None
    scale = 1.0
    while True:
        line, start = next_line()
        words = line.split()
        if not words:
            continue
        try:
            if words[0] == "dim":
                dims = tuple(int(v) for v in words[1:4])
                if len(dims) != 3 or min(dims) < 1:
                    raise ValueError
            elif words[0] == "translate":
                translate = tuple(float(v) for v in words[1:4])
            elif words[0] == "scale":
                scale = float(words[1])
            elif words[0] == "data":
                break
            else:
                raise FormatError(f"unknown binvox header line {line!r}", start)
        except (ValueError, IndexError):
            raise FormatError(f"malformed binvox header line {line!r}", start) from None
    if dims is None:
        raise FormatError("binvox header lacks a dim line", pos)
    total = dims[0] * dims[1] * dims[2]
    body = np.frombuffer(data, dtype=np.uint8, offset=pos)
    if body.size % 2:
        raise FormatError("truncated run-length pair", len(data) - 1)
    values, counts = body[0::2], body[1::2].astype(np.int64)
    if counts.size and counts.min() == 0:
        bad = int(np.flatnonzero(counts == 0)[0])
        raise FormatError("run-length count of zero", pos + 2 * bad + 1)
    ends = np.cumsum(counts)
    if ends.size == 0 or ends[-1] < total:
        raise FormatError(f"run-length data covers {int(ends[-1]) if ends.size else 0} of {total} voxels",
                          len(data))
    if ends[-1] > total:
        bad = int(np.searchsorted(ends, total, side="right"))
        raise FormatError(f"run-length data overruns {total} voxels", pos + 2 * bad)
    flat = np.repeat(values != 0, counts)
    occ = flat.reshape(dims[0], dims[2], dims[1]).transpose(0, 2, 1)
    return VoxelGrid(occ, translate or (0.0, 0.0, 0.0), scale, source="binvox")


def read_binvox(path):
    return parse_binvox(Path(path).read_bytes())


# --- binarisation --------------------------------------------------------------------

@dataclass(frozen=True)
class BinarizeSpec:
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


def binarize(volume, spec=BinarizeSpec()):
    """Voxels at or above the threshold are set."""
    if not isinstance(spec, BinarizeSpec):
        spec = BinarizeSpec(float(spec))
    volume = np.asarray(volume)
    return VoxelGrid(volume >= spec.threshold, source="binarized", threshold=spec.threshold)
