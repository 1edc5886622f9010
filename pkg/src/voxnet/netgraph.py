"""Layer specifications, parameter stores and whole-network forward/backward.

A network is a flat sequence of :class:`LayerSpec` values applied in order
to a batch ``[B, *input_shape]``. Architecture is data: the two block
orders used for the classifiers (conv, batchnorm, pool, relu, dropout and
conv, relu, pool, batchnorm) are simply different layer lists.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import (
    CorruptedTraceError,
    DegenerateInputError,
    GeometryError,
    UnsupportedCompositionError,
)
from .tensorcore import ACC_DTYPE, PARAM_DTYPE, ConvSpec, PoolSpec

KINDS = ("conv3d", "maxpool3d", "upsample3d", "batchnorm", "activation", "dropout", "flatten", "dense")
ACTIVATIONS = ("relu", "sigmoid", "tanh", "softmax")
PARAM_ROLES = {
    "conv3d": ("kernels", "bias"),
    "dense": ("weights", "bias"),
    "batchnorm": ("scale", "offset", "running_mean", "running_var"),
}
TRAINABLE_ROLES = {
    "conv3d": ("kernels", "bias"),
    "dense": ("weights", "bias"),
    "batchnorm": ("scale", "offset"),
}

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    conv: ConvSpec = None
    pool: PoolSpec = None
    activation: str = None
    rate: float = 0.0
    units: int = 0
    factor: tuple = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GeometryError(f"unknown layer kind {self.kind!r}")
        if self.kind == "activation" and self.activation not in ACTIVATIONS:
            raise GeometryError(f"unknown activation {self.activation!r}")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise GeometryError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.kind == "dense" and int(self.units) < 1:
            raise GeometryError("dense layer needs a positive unit count")

    @classmethod
    def conv3d(cls, kernel_count, kernel_extents=(3, 3, 3), padding="same", strides=(1, 1, 1)):
        return cls("conv3d", conv=ConvSpec(kernel_count, kernel_extents, strides, padding))

    @classmethod
    def maxpool3d(cls, window=(2, 2, 2), strides=None):
        return cls("maxpool3d", pool=PoolSpec(window, strides))

    @classmethod
    def upsample3d(cls, factor=(2, 2, 2)):
        return cls("upsample3d", factor=tc._triple(factor, "upsample factor"))

    @classmethod
    def batchnorm(cls):
        return cls("batchnorm")

    @classmethod
    def act(cls, kind):
        return cls("activation", activation=kind)

    @classmethod
    def dropout(cls, rate):
        return cls("dropout", rate=float(rate))

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @classmethod
    def dense(cls, units):
        return cls("dense", units=int(units))

    @property
    def has_params(self):
        return self.kind in PARAM_ROLES


def layer_output_shape(spec, in_shape):
    """Per-sample output shape of one layer, or :class:`GeometryError`."""
    in_shape = tuple(in_shape)
    kind = spec.kind
    if kind in ("conv3d", "maxpool3d", "upsample3d"):
        if len(in_shape) != 4:
            raise GeometryError(f"{kind} needs a [C, D, H, W] input, got {in_shape}")
        if kind == "conv3d":
            return (spec.conv.kernel_count,) + spec.conv.output_extents(in_shape[1:])
        if kind == "maxpool3d":
            return (in_shape[0],) + spec.pool.output_extents(in_shape[1:])
        return (in_shape[0],) + tuple(n * f for n, f in zip(in_shape[1:], spec.factor))
    if kind == "flatten":
        return (int(np.prod(in_shape)),)
    if kind == "dense":
        if len(in_shape) != 1:
            raise GeometryError(f"dense needs a flat input, got {in_shape}; add a flatten layer")
        return (spec.units,)
    if kind == "activation" and spec.activation == "softmax" and len(in_shape) != 1:
        raise GeometryError(f"softmax needs a flat per-sample vector, got {in_shape}")
    return in_shape


def param_shapes(spec, in_shape):
    if spec.kind == "conv3d":
        c = spec.conv
        return {"kernels": (c.kernel_count, in_shape[0]) + c.kernel_extents, "bias": (c.kernel_count,)}
    if spec.kind == "dense":
        return {"weights": (spec.units, in_shape[0]), "bias": (spec.units,)}
    if spec.kind == "batchnorm":
        n = in_shape[0]
        return {role: (n,) for role in PARAM_ROLES["batchnorm"]}
    return {}


@dataclass
class NetworkModel:
    """Ordered layers, the input shape ``(C, D, H, W)`` and a parameter store
    ``params[layer_index][role]``. Layers listed in ``frozen`` receive no
    optimizer updates and their batchnorm statistics stay fixed."""

    layers: list
    input_shape: tuple
    params: dict = field(default_factory=dict)
    frozen: set = field(default_factory=set)
    seed: int = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.frozen = set(self.frozen)
        self.shapes = chain_shapes(self.layers, self.input_shape)

    @property
    def output_shape(self):
        return self.shapes[-1] if self.layers else self.input_shape

    def layer_input_shape(self, index):
        return self.input_shape if index == 0 else self.shapes[index - 1]

    def parameter_layers(self):
        return [i for i, spec in enumerate(self.layers) if spec.has_params]

    def check_params(self):
        for i in self.parameter_layers():
            expected = param_shapes(self.layers[i], self.layer_input_shape(i))
            record = self.params.get(i)
            if record is None:
                raise GeometryError(f"layer {i} ({self.layers[i].kind}) has no parameter record")
            for role, shape in expected.items():
                if role not in record or tuple(record[role].shape) != shape:
                    raise GeometryError(f"layer {i} parameter {role!r} missing or not shaped {shape}")
        extra = set(self.params) - set(self.parameter_layers())
        if extra:
            raise GeometryError(f"parameter records for parameter-free layers {sorted(extra)}")

    def copy(self):
        return copy.deepcopy(self)

    def parameter_count(self):
        return sum(self.params[i][r].size for i in self.parameter_layers() for r in TRAINABLE_ROLES[self.layers[i].kind])


def chain_shapes(layers, input_shape):
    shapes = []
    shape = tuple(input_shape)
    for i, spec in enumerate(layers):
        if spec.kind == "activation" and spec.activation == "softmax" and i != len(layers) - 1:
            raise GeometryError(f"layer {i}: softmax may only be the final layer")
        try:
            shape = layer_output_shape(spec, shape)
        except GeometryError as exc:
            raise GeometryError(f"layer {i} ({spec.kind}): {exc}") from None
        shapes.append(shape)
    return shapes


def build_model(layers, input_shape, scheme="he", seed=0):
    model = NetworkModel(layers, input_shape, seed=seed)
    model.params = init_params(model, scheme, seed)
    return model


def init_params(model, scheme="he", seed=0):
    """Fresh parameter store; weights drawn per ``scheme`` (``he``, ``glorot``
    or ``uniform:<range>``), biases zero, batchnorm scale 1 and offset 0."""
    rng = np.random.default_rng(seed)
    if isinstance(scheme, tuple):
        scheme = f"{scheme[0]}:{scheme[1]}"
    name, _, arg = scheme.partition(":")
    store = {}
    for i in model.parameter_layers():
        spec = model.layers[i]
        shapes = param_shapes(spec, model.layer_input_shape(i))
        if spec.kind == "batchnorm":
            n = shapes["scale"][0]
            store[i] = {
                "scale": np.ones(n, PARAM_DTYPE),
                "offset": np.zeros(n, PARAM_DTYPE),
                "running_mean": np.zeros(n, PARAM_DTYPE),
                "running_var": np.ones(n, PARAM_DTYPE),
            }
            continue
        wrole = "kernels" if spec.kind == "conv3d" else "weights"
        wshape = shapes[wrole]
        receptive = int(np.prod(wshape[2:])) if len(wshape) > 2 else 1
        fan_in, fan_out = wshape[1] * receptive, wshape[0] * receptive
        if name == "he":
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), wshape)
        elif name == "glorot":
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, wshape)
        elif name == "uniform":
            limit = float(arg) if arg else 0.05
            w = rng.uniform(-limit, limit, wshape)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        store[i] = {wrole: w.astype(PARAM_DTYPE), "bias": np.zeros(shapes["bias"], PARAM_DTYPE)}
    return store


# --- elementwise and small layer ops -------------------------------------------------

def apply_activation(x, kind):
    x = np.asarray(x, dtype=ACC_DTYPE)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    if kind == "tanh":
        return np.tanh(x)
    if kind == "softmax":
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(x, kind, upstream):
    """``upstream * d activation / dx`` evaluated at the pre-activation ``x``."""
    x = np.asarray(x, dtype=ACC_DTYPE)
    upstream = np.asarray(upstream, dtype=ACC_DTYPE)
    if x.shape != upstream.shape:
        raise GeometryError(f"activation input {x.shape} and upstream {upstream.shape} differ")
    if kind == "relu":
        return upstream * (x > 0)
    if kind == "sigmoid":
        s = apply_activation(x, "sigmoid")
        return upstream * s * (1.0 - s)
    if kind == "tanh":
        t = np.tanh(x)
        return upstream * (1.0 - t * t)
    if kind == "softmax":
        raise UnsupportedCompositionError(
            "softmax is only differentiated jointly with cross-entropy (probabilities - one_hot)")
    raise ValueError(f"unknown activation {kind!r}")


def dense_forward(x, weights, bias):
    """``o_j = bias_j + sum_i w_ji x_i`` for a single vector or a batch of rows."""
    x = np.asarray(x, dtype=ACC_DTYPE)
    weights = np.asarray(weights)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or np.shape(bias) != (weights.shape[0],):
        raise GeometryError(f"dense input {x.shape}, weights {weights.shape}, bias {np.shape(bias)} disagree")
    return x @ weights.astype(ACC_DTYPE).T + np.asarray(bias, dtype=ACC_DTYPE)


def dense_grads(x, weights, upstream):
    """Return ``(d_input, d_weights, d_bias)``; ``d_weights`` is the summed outer product."""
    x = np.asarray(x, dtype=ACC_DTYPE)
    up = np.asarray(upstream, dtype=ACC_DTYPE)
    w = np.asarray(weights, dtype=ACC_DTYPE)
    if x.ndim == 1:
        return up @ w, np.outer(up, x), up.copy()
    return up @ w, up.T @ x, up.sum(axis=0)


@dataclass
class BatchStats:
    mean: np.ndarray
    var: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _bn_bcast(v, ndim):
    return np.asarray(v, dtype=ACC_DTYPE).reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_forward(x, scale, offset, running_mean, running_var, mode="infer",
                      momentum=BN_MOMENTUM, eps=BN_EPSILON):
    """Per-channel normalisation over the batch and spatial axes.

    Returns ``(y, stats)``; in train mode ``stats`` carries the batch moments
    and the exponentially averaged running moments after this step.
    """
    x = np.asarray(x, dtype=ACC_DTYPE)
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateInputError("batchnorm in train mode needs a batch of at least 2")
        axes = _bn_axes(x)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_rm = momentum * np.asarray(running_mean, ACC_DTYPE) + (1.0 - momentum) * mean
        new_rv = momentum * np.asarray(running_var, ACC_DTYPE) + (1.0 - momentum) * var
        stats = BatchStats(mean, var, new_rm, new_rv)
    else:
        mean = np.asarray(running_mean, ACC_DTYPE)
        var = np.asarray(running_var, ACC_DTYPE)
        stats = BatchStats(mean, var, mean, var)
    xhat = (x - _bn_bcast(mean, x.ndim)) / np.sqrt(_bn_bcast(var, x.ndim) + eps)
    return _bn_bcast(scale, x.ndim) * xhat + _bn_bcast(offset, x.ndim), stats


def batchnorm_grads(x, scale, stats, upstream, mode, eps=BN_EPSILON):
    """Return ``(d_input, d_scale, d_offset)``; infer mode treats the moments as constants."""
    x = np.asarray(x, dtype=ACC_DTYPE)
    up = np.asarray(upstream, dtype=ACC_DTYPE)
    axes = _bn_axes(x)
    inv = 1.0 / np.sqrt(_bn_bcast(stats.var, x.ndim) + eps)
    xhat = (x - _bn_bcast(stats.mean, x.ndim)) * inv
    d_scale = (up * xhat).sum(axis=axes)
    d_offset = up.sum(axis=axes)
    g = _bn_bcast(scale, x.ndim)
    if mode != "train":
        return up * g * inv, d_scale, d_offset
    m = x.size // x.shape[1]
    dxhat = up * g
    dx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
    return dx, d_scale, d_offset


def dropout(x, rate, mode="train", seed=None, rng=None):
    """Inverted dropout. Returns ``(y, mask)`` with ``mask`` the boolean keep mask."""
    x = np.asarray(x, dtype=ACC_DTYPE)
    if not 0.0 <= rate < 1.0:
        raise GeometryError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode != "train" or rate == 0.0:
        return x.copy(), np.ones(x.shape, dtype=bool)
    if rng is None:
        rng = np.random.default_rng(seed)
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


# --- network passes ------------------------------------------------------------------

@dataclass
class LayerRecord:
    input: np.ndarray
    output: np.ndarray
    arg_indices: np.ndarray = None
    mask: np.ndarray = None
    stats: BatchStats = None
    bn_mode: str = None


@dataclass
class ForwardTrace:
    records: list
    mode: str
    seed: int = None

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


def _bn_mode(model, index, mode):
    return "infer" if index in model.frozen else mode


def _layer_forward(model, i, x, mode, rng, record=None):
    spec = model.layers[i]
    p = model.params.get(i)
    kind = spec.kind
    rec = LayerRecord(input=x, output=None)
    if kind == "conv3d":
        y = tc.conv3d(x, p["kernels"], p["bias"], spec.conv)
    elif kind == "maxpool3d":
        y, rec.arg_indices = tc.maxpool3d(x, spec.pool)
    elif kind == "upsample3d":
        y = tc.upsample3d(x, spec.factor)
    elif kind == "batchnorm":
        rec.bn_mode = _bn_mode(model, i, mode)
        if record is not None and rec.bn_mode == "train":
            s = record.stats
            y, _ = batchnorm_forward(x, p["scale"], p["offset"], s.mean, s.var, "infer")
            rec.stats = s
        else:
            y, rec.stats = batchnorm_forward(x, p["scale"], p["offset"], p["running_mean"],
                                             p["running_var"], rec.bn_mode)
    elif kind == "activation":
        y = apply_activation(x, spec.activation)
    elif kind == "dropout":
        if record is not None:
            rec.mask = record.mask
            y = x * rec.mask / (1.0 - spec.rate) if mode == "train" and spec.rate > 0 else x.copy()
        else:
            y, rec.mask = dropout(x, spec.rate, mode, rng=rng)
    elif kind == "flatten":
        y = x.reshape(x.shape[0], -1)
    elif kind == "dense":
        y = dense_forward(x, p["weights"], p["bias"])
    rec.output = y
    return rec


def forward(model, batch, mode="infer", seed=None):
    """Apply every layer to ``batch`` (``[B, *input_shape]``, or a single
    sample) and return ``(outputs, trace)``. Dropout masks are drawn from a
    generator seeded with ``seed``; infer mode is a pure function."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(batch, dtype=ACC_DTYPE)
    if x.shape == model.input_shape:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise GeometryError(f"batch sample shape {x.shape[1:]} does not match model input {model.input_shape}")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(len(model.layers)):
        try:
            rec = _layer_forward(model, i, x, mode, rng)
        except GeometryError as exc:
            raise GeometryError(f"layer {i} ({model.layers[i].kind}): {exc}") from None
        records.append(rec)
        x = rec.output
    return x, ForwardTrace(records, mode, seed)


def replay(model, trace):
    """Recompute every layer output from the recorded inputs, masks and batch statistics."""
    _check_trace(model, trace)
    outputs = []
    x = trace[0].input if len(trace) else None
    for i, record in enumerate(trace.records):
        rec = _layer_forward(model, i, x, trace.mode, None, record=record)
        outputs.append(rec.output)
        x = rec.output
    return outputs


def apply_running_stats(model, trace):
    """Commit the running batchnorm moments recorded in a train-mode trace."""
    for i, rec in enumerate(trace.records):
        if model.layers[i].kind == "batchnorm" and rec.bn_mode == "train":
            model.params[i]["running_mean"] = rec.stats.running_mean.astype(PARAM_DTYPE)
            model.params[i]["running_var"] = rec.stats.running_var.astype(PARAM_DTYPE)


def _check_trace(model, trace):
    if len(trace) != len(model.layers):
        raise CorruptedTraceError(f"trace has {len(trace)} records for a {len(model.layers)}-layer model")
    for i, rec in enumerate(trace.records):
        if rec.output is None or rec.output.shape[1:] != model.shapes[i]:
            raise CorruptedTraceError(f"trace record {i} does not match layer {i} ({model.layers[i].kind})")


@dataclass
class Gradients:
    params: dict
    input: np.ndarray


def backward(model, trace, grad_output, upto=None):
    """Reverse-mode gradients of ``sum(grad_output * output_of_layer[upto])``.

    ``upto`` defaults to the last layer. Training with a softmax head passes
    the fused cross-entropy gradient with respect to the logits and
    ``upto = len(layers) - 2``.
    """
    _check_trace(model, trace)
    last = len(model.layers) - 1 if upto is None else upto
    if not 0 <= last < len(model.layers):
        raise CorruptedTraceError(f"layer index {last} out of range")
    g = np.asarray(grad_output, dtype=ACC_DTYPE)
    if g.shape != trace[last].output.shape:
        raise CorruptedTraceError(f"gradient shape {g.shape} does not match layer {last} output "
                                  f"{trace[last].output.shape}")
    grads = {}
    for i in range(last, -1, -1):
        spec = model.layers[i]
        rec = trace[i]
        p = model.params.get(i)
        kind = spec.kind
        if kind == "conv3d":
            g, dk, db = tc.conv3d_grads(rec.input, p["kernels"], g, spec.conv)
            grads[i] = {"kernels": dk, "bias": db}
        elif kind == "maxpool3d":
            g = tc.maxpool3d_grad(rec.arg_indices, g, rec.input.shape)
        elif kind == "upsample3d":
            g = tc.upsample3d_grad(g, spec.factor)
        elif kind == "batchnorm":
            g, ds, do = batchnorm_grads(rec.input, p["scale"], rec.stats, g, rec.bn_mode)
            grads[i] = {"scale": ds, "offset": do}
        elif kind == "activation":
            g = activation_grad(rec.input, spec.activation, g)
        elif kind == "dropout":
            if trace.mode == "train" and spec.rate > 0:
                g = g * rec.mask / (1.0 - spec.rate)
        elif kind == "flatten":
            g = g.reshape(rec.input.shape)
        elif kind == "dense":
            g, dw, db = dense_grads(rec.input, p["weights"], g)
            grads[i] = {"weights": dw, "bias": db}
    return Gradients(grads, g)
