"""Plain-text architecture configs and the reference network layouts.

One layer per line::

    input 1x64x64x64
    conv 5 3x3x3 same
    bn
    pool 2x2x2
    relu
    dropout 0.3
    dense 64
    softmax 2

``softmax N`` is shorthand for ``dense N`` followed by a softmax activation.
A ``flatten`` is inserted automatically before the first dense layer that
follows a volumetric layer. ``#`` starts a comment.
"""

from __future__ import annotations

from .errors import ParseError
from .netgraph import LayerSpec

_ACT_WORDS = ("relu", "sigmoid", "tanh", "softmax")


def _extents(token, lineno, path):
    try:
        values = tuple(int(v) for v in token.lower().split("x"))
    except ValueError:
        raise ParseError(f"expected extents like 3x3x3, got {token!r}", lineno, path) from None
    if len(values) == 1:
        values = values * 3
    if len(values) != 3 or min(values) < 1:
        raise ParseError(f"expected three positive extents, got {token!r}", lineno, path)
    return values


def parse_layer(line, lineno=None, path=None):
    """Parse one config line into a list of :class:`LayerSpec` (``softmax N`` yields two)."""
    words = line.split()
    if not words:
        return []
    head, args = words[0].lower(), words[1:]
    try:
        if head == "conv":
            if not args:
                raise ParseError("conv needs a kernel count", lineno, path)
            count = int(args[0])
            extents = _extents(args[1], lineno, path) if len(args) > 1 else (3, 3, 3)
            padding = "same"
            strides = (1, 1, 1)
            rest = args[2:]
            while rest:
                if rest[0] in ("same", "valid"):
                    padding = rest.pop(0)
                elif rest[0] == "stride" and len(rest) > 1:
                    strides = _extents(rest[1], lineno, path)
                    rest = rest[2:]
                else:
                    raise ParseError(f"unexpected conv argument {rest[0]!r}", lineno, path)
            return [LayerSpec.conv3d(count, extents, padding, strides)]
        if head in ("pool", "maxpool"):
            window = _extents(args[0], lineno, path) if args else (2, 2, 2)
            strides = None
            if len(args) == 3 and args[1] == "stride":
                strides = _extents(args[2], lineno, path)
            elif len(args) == 2:
                strides = _extents(args[1], lineno, path)
            elif len(args) > 1:
                raise ParseError(f"unexpected pool arguments {args[1:]}", lineno, path)
            return [LayerSpec.maxpool3d(window, strides)]
        if head in ("upsample", "up"):
            return [LayerSpec.upsample3d(_extents(args[0], lineno, path) if args else (2, 2, 2))]
        if head in ("bn", "batchnorm"):
            return [LayerSpec.batchnorm()]
        if head == "dropout":
            return [LayerSpec.dropout(float(args[0]))]
        if head == "flatten":
            return [LayerSpec.flatten()]
        if head == "dense":
            return [LayerSpec.dense(int(args[0]))]
        if head in _ACT_WORDS:
            if head == "softmax" and args:
                return [LayerSpec.dense(int(args[0])), LayerSpec.act("softmax")]
            if args:
                raise ParseError(f"{head} takes no arguments", lineno, path)
            return [LayerSpec.act(head)]
    except ParseError:
        raise
    except (ValueError, IndexError) as exc:
        raise ParseError(f"bad {head} line {line.strip()!r}: {exc}", lineno, path) from None
    raise ParseError(f"unknown layer keyword {head!r}", lineno, path)


def parse_architecture(text, path=None):
    """Return ``(layers, input_shape_or_None)`` from a config text."""
    layers = []
    input_shape = None
    flat = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.split()[0].lower() == "input":
            parts = line.split()
            if len(parts) != 2:
                raise ParseError("input needs one CxDxHxW argument", lineno, path)
            try:
                input_shape = tuple(int(v) for v in parts[1].lower().split("x"))
            except ValueError:
                raise ParseError(f"bad input shape {parts[1]!r}", lineno, path) from None
            if len(input_shape) != 4 or min(input_shape) < 1:
                raise ParseError(f"input shape must be CxDxHxW, got {parts[1]!r}", lineno, path)
            continue
        for spec in parse_layer(line, lineno, path):
            if spec.kind == "flatten":
                flat = True
            elif spec.kind == "dense" and not flat:
                layers.append(LayerSpec.flatten())
                flat = True
            layers.append(spec)
    return layers, input_shape


def _fmt(t):
    return "x".join(str(v) for v in t)


def format_layer(spec):
    """Canonical one-line form; ``parse_layer(format_layer(s)) == [s]``."""
    k = spec.kind
    if k == "conv3d":
        c = spec.conv
        line = f"conv {c.kernel_count} {_fmt(c.kernel_extents)} {c.padding}"
        if c.strides != (1, 1, 1):
            line += f" stride {_fmt(c.strides)}"
        return line
    if k == "maxpool3d":
        return f"pool {_fmt(spec.pool.window)} stride {_fmt(spec.pool.strides)}"
    if k == "upsample3d":
        return f"upsample {_fmt(spec.factor)}"
    if k == "batchnorm":
        return "bn"
    if k == "activation":
        return spec.activation
    if k == "dropout":
        return f"dropout {spec.rate!r}"
    if k == "flatten":
        return "flatten"
    return f"dense {spec.units}"


def format_architecture(layers, input_shape=None):
    lines = [] if input_shape is None else [f"input {_fmt(input_shape)}"]
    lines += [format_layer(s) for s in layers]
    return "\n".join(lines) + "\n"


def _block_a(kernel, dropout=0.3):
    # conv, batchnorm, maxpool, relu, dropout
    return [f"conv 5 {kernel} same", "bn", "pool 2x2x2", "relu", f"dropout {dropout}"]


def _block_b(kernel):
    # conv+relu, maxpool, batchnorm
    return [f"conv 5 {kernel} same", "relu", "pool 2x2x2", "bn"]


def reference_architecture(name, n_classes=2, extent=64):
    """Config text for one of the reference layouts.

    ``cad``: three conv blocks then a softmax classifier (the CAD shape
    experiment). ``model1``..``model6``: the MRI variants, blocks ordered
    conv/bn/pool/relu/dropout (1-4) or conv+relu/pool/bn (5-6).
    ``model6-1x3x3`` style names swap in an anisotropic kernel shape.
    """
    base, _, kernel = name.partition("-")
    lines = [f"input 1x{extent}x{extent}x{extent}"]
    if base == "cad":
        for _ in range(3):
            lines += _block_a(kernel or "3x3x3")
        lines.append(f"softmax {n_classes}")
    elif base in ("model1", "model2", "model3", "model4"):
        blocks = 3 if base == "model1" else 4
        kernel = kernel or {"model3": "5x5x5", "model4": "7x7x7"}.get(base, "3x3x3")
        for _ in range(blocks):
            lines += _block_a(kernel)
        lines.append(f"softmax {n_classes}")
    elif base in ("model5", "model6"):
        kernel = kernel or ("7x7x7" if base == "model5" else "3x3x3")
        for _ in range(4):
            lines += _block_b(kernel)
        if base == "model6":
            lines += ["dense 64", "relu", "dropout 0.1", "dense 32", "relu", "dropout 0.1"]
        lines.append(f"softmax {n_classes}")
    else:
        raise KeyError(f"unknown reference architecture {name!r}")
    return "\n".join(lines) + "\n"
