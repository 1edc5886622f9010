"""Model archives: a directory holding ``manifest.txt`` plus one raw
little-endian float32 blob per parameter record.

Manifest grammar (one statement per line)::

    voxnet-model 1
    input 1x32x32x32
    seed 7
    frozen 0 4
    meta classes ellipsoid,cuboid,cylinder
    layer conv 5 3x3x3 same
    ...
    param 0 kernels 5x1x3x3x3 layer000_kernels.f32
    end
"""

from __future__ import annotations

import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .architectures import _fmt, format_layer, parse_layer
from .errors import IntegrityError, ParseError
from .netgraph import PARAM_ROLES, NetworkModel, param_shapes

FORMAT_NAME = "voxnet-model"
FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
_BLOB_DTYPE = np.dtype("<f4")


def _blob_name(index, role):
    return f"layer{index:03d}_{role}.f32"


def manifest_text(model):
    lines = [f"{FORMAT_NAME} {FORMAT_VERSION}", f"input {_fmt(model.input_shape)}"]
    if model.seed is not None:
        lines.append(f"seed {int(model.seed)}")
    lines.append(" ".join(["frozen"] + [str(i) for i in sorted(model.frozen)]))
    for key in sorted(model.meta):
        value = str(model.meta[key])
        if "\n" in value or not key or " " in key:
            raise ValueError(f"meta entry {key!r} cannot be stored on one manifest line")
        lines.append(f"meta {key} {value}")
    lines += [f"layer {format_layer(spec)}" for spec in model.layers]
    for i in model.parameter_layers():
        for role in PARAM_ROLES[model.layers[i].kind]:
            arr = model.params[i][role]
            lines.append(f"param {i} {role} {_fmt(arr.shape)} {_blob_name(i, role)}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_model(model, path):
    """Write ``model`` to directory ``path`` atomically (temp dir + rename)."""
    model.check_params()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        for i in model.parameter_layers():
            for role in PARAM_ROLES[model.layers[i].kind]:
                data = np.ascontiguousarray(model.params[i][role], dtype=_BLOB_DTYPE)
                (tmp / _blob_name(i, role)).write_bytes(data.tobytes())
        (tmp / MANIFEST).write_text(manifest_text(model))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _shape(token, lineno, where):
    try:
        return tuple(int(v) for v in token.split("x"))
    except ValueError:
        raise ParseError(f"bad shape {token!r}", lineno, where) from None


def load_model(path):
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise IntegrityError(f"{path} has no {MANIFEST}")
    where = str(mpath)
    lines = mpath.read_text().splitlines()
    if not lines or lines[0].split() != [FORMAT_NAME, str(FORMAT_VERSION)]:
        raise ParseError(f"expected header '{FORMAT_NAME} {FORMAT_VERSION}'", 1, where)

    input_shape = None
    seed = None
    frozen = set()
    meta = {}
    layers = []
    records = {}
    ended = False
    for lineno, raw in enumerate(lines[1:], start=2):
        words = raw.split()
        if not words:
            continue
        if ended:
            raise ParseError("content after 'end'", lineno, where)
        head = words[0]
        try:
            if head == "input":
                input_shape = _shape(words[1], lineno, where)
            elif head == "seed":
                seed = int(words[1])
            elif head == "frozen":
                frozen = {int(w) for w in words[1:]}
            elif head == "meta":
                key, _, value = raw.split(" ", 1)[1].partition(" ")
                meta[key] = value
            elif head == "layer":
                layers.extend(parse_layer(" ".join(words[1:]), lineno, where))
            elif head == "param":
                if len(words) != 5:
                    raise ParseError("param lines need: index role shape file", lineno, where)
                index, role = int(words[1]), words[2]
                records[(index, role)] = (_shape(words[3], lineno, where), words[4], lineno)
            elif head == "end":
                ended = True
            else:
                raise ParseError(f"unknown statement {head!r}", lineno, where)
        except (IndexError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"malformed {head!r} line: {raw.strip()!r}", lineno, where) from None
    if not ended:
        raise ParseError("missing 'end' line (truncated manifest?)", len(lines), where)
    if input_shape is None:
        raise ParseError("missing 'input' line", None, where)

    model = NetworkModel(layers, input_shape, seed=seed, frozen=frozen, meta=meta)
    params = {}
    for i in model.parameter_layers():
        expected = param_shapes(model.layers[i], model.layer_input_shape(i))
        params[i] = {}
        for role in PARAM_ROLES[model.layers[i].kind]:
            if (i, role) not in records:
                raise IntegrityError(f"missing weight record for layer {i} role {role!r}")
            shape, fname, lineno = records.pop((i, role))
            if role in expected and shape != expected[role]:
                raise IntegrityError(f"line {lineno}: layer {i} {role} shape {shape} != expected {expected[role]}")
            blob = path / fname
            if not blob.is_file():
                raise IntegrityError(f"line {lineno}: blob {fname} missing")
            raw = blob.read_bytes()
            count = int(np.prod(shape))
            if len(raw) != count * _BLOB_DTYPE.itemsize:
                raise IntegrityError(f"blob {fname} holds {len(raw)} bytes, expected {count * 4}")
            params[i][role] = np.frombuffer(raw, dtype=_BLOB_DTYPE).reshape(shape).astype(np.float32)
    if records:
        (i, role), (_, _, lineno) = next(iter(records.items()))
        raise IntegrityError(f"line {lineno}: parameter record for layer {i} role {role!r} has no matching layer")
    model.params = params
    return model
