"""Introspection of trained networks: feature maps, layer-wise relevance
propagation (LRP) with conservation audits, and activation maximisation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import netgraph as ng
from . import tensorcore as tc
from .errors import InvalidClassError, SelectionError, StagnationWarning

# --- feature maps --------------------------------------------------------------------

VOLUMETRIC_KINDS = ("conv3d", "maxpool3d", "upsample3d", "batchnorm", "activation", "dropout")


@dataclass
class FeatureMapDump:
    maps: dict
    kernels: dict


def feature_maps(model, x, layers=None):
    """Inference-mode activations of the selected layers (default: every
    conv and pooling layer) plus the kernels of the selected conv layers."""
    if layers is None:
        layers = [i for i, s in enumerate(model.layers) if s.kind in ("conv3d", "maxpool3d")]
    layers = [int(i) for i in layers]
    for i in layers:
        if not 0 <= i < len(model.layers):
            raise SelectionError(f"no layer {i}; the model has {len(model.layers)} layers")
        if model.layers[i].kind not in VOLUMETRIC_KINDS or len(model.shapes[i]) != 4:
            raise SelectionError(f"layer {i} ({model.layers[i].kind}) has no volumetric feature map")
    _, trace = ng.forward(model, x, "infer")
    maps = {i: trace[i].output[0] for i in layers}
    kernels = {i: np.array(model.params[i]["kernels"]) for i in layers if model.layers[i].kind == "conv3d"}
    return FeatureMapDump(maps, kernels)


# --- LRP -----------------------------------------------------------------------------

@dataclass(frozen=True)
class LrpRule:
    kind: str = "alphabeta"
    epsilon: float = 0.0
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("epsilon", "alphabeta", "gamma"):
            raise ValueError(f"unknown LRP rule {self.kind!r}")
        if self.kind == "epsilon" and self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.kind == "alphabeta" and (abs(self.alpha - self.beta - 1.0) > 1e-12 or self.beta < 0):
            raise ValueError(f"alpha-beta rule needs alpha - beta = 1 and beta >= 0, got {self.alpha}, {self.beta}")
        if self.kind == "gamma" and self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    @classmethod
    def eps(cls, epsilon=0.0):
        return cls("epsilon", epsilon=float(epsilon))

    @classmethod
    def alpha_beta(cls, alpha=1.0, beta=0.0):
        return cls("alphabeta", alpha=float(alpha), beta=float(beta))

    @classmethod
    def gamma_rule(cls, gamma=0.25):
        return cls("gamma", gamma=float(gamma))

    @classmethod
    def parse(cls, text):
        """``a1b0``, ``a2b1``, ``eps:0.01`` or ``gamma:0.25``."""
        text = text.strip().lower()
        if text.startswith("eps"):
            return cls.eps(float(text.partition(":")[2] or 0.0))
        if text.startswith("gamma"):
            return cls.gamma_rule(float(text.partition(":")[2] or 0.25))
        if text.startswith("a") and "b" in text:
            a, _, b = text[1:].partition("b")
            return cls.alpha_beta(float(a), float(b))
        raise ValueError(f"unrecognised LRP rule {text!r}")

    def __str__(self):
        if self.kind == "epsilon":
            return f"eps:{self.epsilon:g}"
        if self.kind == "gamma":
            return f"gamma:{self.gamma:g}"
        return f"a{self.alpha:g}b{self.beta:g}"


@dataclass
class LrpAudit:
    """``layer_sums[i]`` is the total relevance entering layer ``i`` from
    below (its input); ``layer_sums[top]`` is the explained score.
    ``absorbed[i]`` is the relevance layer ``i`` kept back (biases,
    stabiliser, zero denominators)."""

    score: float
    top: int
    layer_sums: list = field(default_factory=list)
    absorbed: list = field(default_factory=list)


@dataclass
class RelevanceMap:
    relevance: np.ndarray
    target_class: int
    rule: LrpRule
    audit: LrpAudit


def _sign(z):
    return np.where(z >= 0, 1.0, -1.0)


def _safe_ratio(r, denom):
    nz = denom != 0
    return np.where(nz, r / np.where(nz, denom, 1.0), 0.0), nz


def _rule_terms(a, W, b, rule):
    """``(coef, [(a_part, W_part), ...], b_part, eps)`` per redistribution term."""
    if rule.kind == "epsilon":
        return [(1.0, [(a, W)], b, rule.epsilon)]
    if rule.kind == "gamma":
        return [(1.0, [(a, W + rule.gamma * np.maximum(W, 0))], b + rule.gamma * np.maximum(b, 0), 0.0)]
    ap, an = np.maximum(a, 0), np.minimum(a, 0)
    wp, wn = np.maximum(W, 0), np.minimum(W, 0)
    has_neg = bool(np.any(an))
    pos = [(ap, wp)] + ([(an, wn)] if has_neg else [])
    neg = [(ap, wn)] + ([(an, wp)] if has_neg else [])
    return [(rule.alpha, pos, np.maximum(b, 0), 0.0), (-rule.beta, neg, np.minimum(b, 0), 0.0)]


def _lrp_operator(a, W, b, R, rule, fwd, bwd, b_shape):
    """Relevance rule for a linear map given as forward/transpose callables."""
    r_in = np.zeros_like(a)
    absorbed = 0.0
    for coef, pairs, bpart, eps in _rule_terms(a, W, b, rule):
        if coef == 0:
            continue
        bb = bpart.reshape(b_shape)
        z = sum(fwd(ap, wp) for ap, wp in pairs) + bb
        stab = eps * _sign(z) if eps else 0.0
        s, nz = _safe_ratio(R, z + stab)
        for ap, wp in pairs:
            r_in = r_in + coef * ap * bwd(s, wp)
        absorbed += coef * float(np.sum(np.where(nz, s * (bb + stab), R)))
    return r_in, absorbed


def _lrp_dense(a, W, b, R, rule):
    """Dense-layer rule written term by term so that a direct evaluation
    summing in the same order reproduces it bit for bit: ``z_k`` accumulates
    over inputs ``j`` in index order, ``R_j`` over outputs ``k``."""
    a = a.astype(np.float64)
    W = W.astype(np.float64)
    b = b.astype(np.float64)
    if rule.kind == "epsilon":
        terms = [(1.0, a[:, None] * W.T, b, rule.epsilon)]
    elif rule.kind == "gamma":
        wg = W + rule.gamma * np.maximum(W, 0)
        terms = [(1.0, a[:, None] * wg.T, b + rule.gamma * np.maximum(b, 0), 0.0)]
    else:
        Z = a[:, None] * W.T
        terms = [(rule.alpha, np.where(Z > 0, Z, 0.0), np.maximum(b, 0), 0.0),
                 (-rule.beta, np.where(Z < 0, Z, 0.0), np.minimum(b, 0), 0.0)]
    r_in = np.zeros(a.shape)
    absorbed = 0.0
    for coef, Z, bpart, eps in terms:
        if coef == 0:
            continue
        z = Z.sum(axis=0) + bpart
        denom = z + eps * _sign(z) if eps else z
        nz = denom != 0
        part = np.zeros(a.shape)
        for k in np.flatnonzero(nz):
            part += (Z[:, k] / denom[k]) * R[k]
        r_in = r_in + coef * part if coef != 1.0 else r_in + part
        stab = eps * _sign(z) if eps else 0.0
        absorbed += coef * float(np.sum(np.where(nz, R * (bpart + stab) / np.where(nz, denom, 1.0), R)))
    return r_in, absorbed


def _fold_batchnorm(model, trace, i):
    """Per-channel ``(scale, shift)`` of batchnorm layer ``i`` in its recorded mode."""
    p = model.params[i]
    stats = trace[i].stats
    s = np.asarray(p["scale"], np.float64) / np.sqrt(np.asarray(stats.var, np.float64) + ng.BN_EPSILON)
    t = np.asarray(p["offset"], np.float64) - s * np.asarray(stats.mean, np.float64)
    return s, t


def lrp(model, x, target_class, rule=None, seed_relevance=None):
    """Relevance map of ``x`` for ``target_class``.

    Relevance starts at the target's pre-softmax score and is redistributed
    layer by layer: linear layers by ``rule``; max pooling winner-take-all
    through the recorded arg indices; activations, dropout and flatten pass
    it through; upsampling sums it back onto the source voxel. A batchnorm
    directly after a conv or dense layer is folded into that layer,
    otherwise it is treated as its own per-channel affine layer.
    """
    rule = rule or LrpRule.alpha_beta(1.0, 0.0)
    out, trace = ng.forward(model, x, "infer")
    top = len(model.layers)
    if top and model.layers[-1].kind == "activation" and model.layers[-1].activation == "softmax":
        top -= 1
    logits = trace[top - 1].output[0] if top else np.asarray(x, np.float64).reshape(-1)
    if logits.ndim != 1:
        raise InvalidClassError("the network output is not a class score vector")
    if not 0 <= target_class < logits.size:
        raise InvalidClassError(f"class {target_class} outside [0, {logits.size})")
    if seed_relevance is None:
        R = np.zeros_like(logits)
        R[target_class] = logits[target_class]
    else:
        R = np.asarray(seed_relevance, dtype=np.float64).reshape(logits.shape)
    score = float(logits[target_class])

    sums = [0.0] * (top + 1)
    absorbed = [0.0] * top
    sums[top] = float(R.sum())
    R = R[None]
    folded = None
    for i in range(top - 1, -1, -1):
        spec = model.layers[i]
        rec = trace[i]
        a = rec.input
        p = model.params.get(i)
        lost = 0.0
        if spec.kind == "batchnorm" and i > 0 and model.layers[i - 1].kind in ("conv3d", "dense"):
            folded = _fold_batchnorm(model, trace, i)
        elif spec.kind in ("conv3d", "dense"):
            wkey = "kernels" if spec.kind == "conv3d" else "weights"
            W = np.asarray(p[wkey], np.float64)
            b = np.asarray(p["bias"], np.float64)
            if folded is not None:
                s, t = folded
                W = W * s.reshape((-1,) + (1,) * (W.ndim - 1))
                b = s * b + t
                folded = None
            if spec.kind == "dense":
                r_in, lost = _lrp_dense(a[0], W, b, R[0], rule)
                R = r_in[None]
            else:
                conv = spec.conv
                R, lost = _lrp_operator(
                    a, W, b, R, rule,
                    lambda ap, wp: tc.conv3d(ap, wp, np.zeros(wp.shape[0]), conv),
                    lambda sv, wp: tc.conv3d_input_grad(sv, wp, a.shape, conv),
                    (1, -1, 1, 1, 1))
        elif spec.kind == "batchnorm":
            s, t = _fold_batchnorm(model, trace, i)
            shape = (1, -1) + (1,) * (a.ndim - 2)
            R, lost = _lrp_operator(a, s, t, R, rule,
                                    lambda ap, wp: ap * wp.reshape(shape),
                                    lambda sv, wp: sv * wp.reshape(shape),
                                    shape)
        elif spec.kind == "maxpool3d":
            R = tc.maxpool3d_grad(rec.arg_indices, R, a.shape)
        elif spec.kind == "upsample3d":
            R = tc.upsample3d_grad(R, spec.factor)
        elif spec.kind == "flatten":
            R = R.reshape(a.shape)
        # activations and dropout (identity at inference) pass relevance through
        absorbed[i] = lost
        sums[i] = float(R.sum())
    audit = LrpAudit(score, top, sums, absorbed)
    return RelevanceMap(R[0], int(target_class), rule, audit)


@dataclass
class ConservationReport:
    score: float
    layer_sums: list
    absorbed: list
    deviations: list
    flagged: list
    tolerance: float

    @property
    def ok(self):
        return not self.flagged

    @property
    def max_relative_deviation(self):
        scale = max(abs(self.score), 1e-300)
        return max((abs(d) for d in self.deviations), default=0.0) / scale

    @property
    def total_absorbed(self):
        return float(sum(self.absorbed))

    def table(self):
        lines = [f"{'layer':>5} {'sum_in':>16} {'absorbed':>16} {'deviation':>12} flag"]
        for i, dev in enumerate(self.deviations):
            lines.append(f"{i:>5} {self.layer_sums[i]:>16.9g} {self.absorbed[i]:>16.9g} {dev:>12.3g} "
                         f"{'!' if i in self.flagged else ''}")
        lines.append(f"score {self.score:.9g} total_absorbed {self.total_absorbed:.9g}")
        return "\n".join(lines) + "\n"


def conservation_check(relevance_map, model, x, tolerance=1e-4):
    """Audit a relevance map: for each layer, relevance in must equal
    relevance out minus declared absorption (relative to the score).
    The top sum is checked against a fresh forward pass and the bottom sum
    against the map itself; failures are flagged at the layer index."""
    audit = relevance_map.audit
    top = audit.top
    out, trace = ng.forward(model, x, "infer")
    score = float(trace[top - 1].output[0][relevance_map.target_class]) if top else float("nan")
    sums = list(audit.layer_sums)
    scale = max(abs(score), 1e-12)
    deviations = [sums[i + 1] - sums[i] - audit.absorbed[i] for i in range(top)]
    flagged = [i for i, d in enumerate(deviations) if abs(d) > tolerance * scale]
    if top and abs(float(np.sum(relevance_map.relevance)) - sums[0]) > tolerance * scale:
        flagged.append(0)
    if top and abs(audit.score - score) > tolerance * scale:
        flagged.append(top - 1)
    return ConservationReport(score, sums, list(audit.absorbed), deviations, sorted(set(flagged)), tolerance)


# --- activation maximisation -----------------------------------------------------------

@dataclass(frozen=True)
class ActMaxConfig:
    """``step_size`` is relative to ``rho``: each accepted step moves the
    input by ``step_size * rho`` along the normalised gradient before the
    projection back onto the sphere ``||x|| = rho``. ``rho`` defaults to
    the square root of the input voxel count (unit RMS)."""

    iterations: int = 128
    step_size: float = 0.1
    rho: float = None
    seed: int = 0
    start: str = "noise"
    backtracking: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.rho is not None and self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")


@dataclass
class ActMaxHistory:
    values: list
    norms: list
    steps: list


def resolve_unit(model, unit):
    """Map ``(layer, channel)`` to ``(layer whose output is read, channel)``;
    a softmax layer resolves to its pre-softmax input."""
    layer, channel = (int(v) for v in unit)
    if not 0 <= layer < len(model.layers):
        raise SelectionError(f"no layer {layer}")
    spec = model.layers[layer]
    if spec.kind == "activation" and spec.activation == "softmax":
        layer -= 1
    shape = model.shapes[layer] if layer >= 0 else model.input_shape
    if not 0 <= channel < shape[0]:
        raise SelectionError(f"layer {layer} has {shape[0]} channels/units, not {channel + 1}")
    return layer, channel


def unit_activation(model, x, unit):
    """``(value, d value / d x)`` for the unit's mean activation."""
    layer, channel = resolve_unit(model, unit)
    _, trace = ng.forward(model, x[None], "infer")
    out = trace[layer].output
    up = np.zeros_like(out)
    if out.ndim == 2:
        value = float(out[0, channel])
        up[0, channel] = 1.0
    else:
        vol = out[0, channel]
        value = float(vol.mean())
        up[0, channel] = 1.0 / vol.size
    grads = ng.backward(model, trace, up, upto=layer)
    return value, grads.input[0]


def _project(x, rho):
    n = np.linalg.norm(x)
    return x * (rho / n) if n > 0 else x


def activation_maximization(model, unit, config=None, start_input=None):
    """Projected gradient ascent on the unit's activation over the sphere
    ``||x|| = rho``. Returns ``(x_star, history)``."""
    config = config or ActMaxConfig()
    shape = model.input_shape
    rho = config.rho if config.rho is not None else float(np.sqrt(np.prod(shape)))
    if config.start == "input":
        if start_input is None:
            raise ValueError("start='input' needs start_input")
        x = np.asarray(start_input, dtype=np.float64).reshape(shape)
    else:
        x = np.random.default_rng(config.seed).normal(size=shape)
    x = _project(x, rho)
    value, grad = unit_activation(model, x, unit)
    history = ActMaxHistory([value], [float(np.linalg.norm(x))], [])
    step = config.step_size
    zero_grad = 0
    for _ in range(config.iterations):
        gn = np.linalg.norm(grad)
        if gn == 0:
            zero_grad += 1
            history.values.append(value)
            history.norms.append(float(np.linalg.norm(x)))
            history.steps.append(0.0)
            continue
        direction = grad / gn
        while True:
            cand = _project(x + step * rho * direction, rho)
            c_value, c_grad = unit_activation(model, cand, unit)
            if not config.backtracking or c_value >= value or step < 1e-12:
                break
            step *= 0.5
        if config.backtracking and c_value < value:
            history.steps.append(0.0)
        else:
            x, value, grad = cand, c_value, c_grad
            history.steps.append(step)
        history.values.append(value)
        history.norms.append(float(np.linalg.norm(x)))
    if zero_grad == config.iterations:
        warnings.warn(f"unit {unit} had zero input gradient for all {config.iterations} iterations",
                      StagnationWarning, stacklevel=2)
    return x, history
