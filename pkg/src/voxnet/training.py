"""Losses, optimizers, the epoch loop, evaluation metrics and data splits."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import netgraph as ng
from .datasets import AugmentSpec, Dataset, augment_plan
from .errors import (
    DegenerateInputError,
    GeometryError,
    InvalidLabelError,
    InvalidPlanError,
    StratificationWarning,
    UndefinedMetricError,
    UndefinedMetricWarning,
    UnsupportedCompositionError,
)

PROB_FLOOR = 1e-12
LOG_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    loss: str = "categorical_cross_entropy"
    seed: int = 0
    augment: AugmentSpec = None

    def header(self):
        opt = "Adam" if self.optimizer == "adam" else "SGD"
        loss = self.loss.replace("_", " ")
        return (f"epochs={self.epochs}, batch size={self.batch_size}, "
                f"learning rate={self.learning_rate}, loss function={loss}, optimizer={opt}")


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


# --- losses ------------------------------------------------------------------------

def _check_one_hot(target):
    target = np.asarray(target, dtype=np.float64)
    if not np.all((target == 0) | (target == 1)) or not np.all(target.sum(axis=-1) == 1):
        raise InvalidLabelError("targets must be one-hot rows")
    return target


def one_hot(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidLabelError(f"labels outside [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(probabilities, target):
    """Mean over samples of ``-sum(target * log(p))`` with ``p`` clamped to [1e-12, 1]."""
    target = _check_one_hot(target)
    p = np.clip(np.asarray(probabilities, dtype=np.float64), PROB_FLOOR, 1.0)
    if p.shape != target.shape:
        raise GeometryError(f"probabilities {p.shape} and targets {target.shape} differ")
    per_sample = -(target * np.log(p)).sum(axis=-1)
    return float(np.mean(per_sample))


def softmax_cross_entropy_grad(probabilities, target):
    """Gradient of the batch-mean cross-entropy with respect to the logits."""
    target = _check_one_hot(target)
    p = np.asarray(probabilities, dtype=np.float64)
    n = p.shape[0] if p.ndim > 1 else 1
    return (p - target) / n


def mse(predictions, targets):
    """Mean of squared per-element errors."""
    pred = np.asarray(predictions, dtype=np.float64)
    targ = np.asarray(targets, dtype=np.float64)
    if pred.shape != targ.shape:
        raise GeometryError(f"predictions {pred.shape} and targets {targ.shape} differ")
    if pred.size == 0:
        raise DegenerateInputError("mse of an empty input")
    e = pred - targ
    return float(np.mean(e * e))


def mse_grad(predictions, targets):
    pred = np.asarray(predictions, dtype=np.float64)
    return 2.0 * (pred - np.asarray(targets, dtype=np.float64)) / pred.size


# --- optimizers --------------------------------------------------------------------

def sgd_step(params, grads, r):
    """``w <- w - r * dP/dw`` for every key of ``grads``; updates ``params`` in place."""
    for key, g in grads.items():
        w = params[key]
        params[key] = (w - r * np.asarray(g, dtype=np.float64)).astype(w.dtype)
    return params


def adam_step(params, grads, state, r, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of every key in ``grads``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for key, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        w = params[key]
        if key not in state.m:
            state.m[key] = np.zeros(w.shape)
            state.v[key] = np.zeros(w.shape)
        if state.m[key].shape != w.shape:
            raise GeometryError(f"optimizer state for {key} is shaped {state.m[key].shape}, param {w.shape}")
        m = state.m[key] = beta1 * state.m[key] + (1.0 - beta1) * g
        v = state.v[key] = beta2 * state.v[key] + (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        params[key] = (w - r * m_hat / (np.sqrt(v_hat) + eps)).astype(w.dtype)
    return params, state


def trainable_grads(model, gradients):
    """Flatten network gradients to ``{(layer, role): grad}``, skipping frozen layers."""
    out = {}
    for i, record in gradients.params.items():
        if i in model.frozen:
            continue
        for role in ng.TRAINABLE_ROLES[model.layers[i].kind]:
            out[(i, role)] = record[role]
    return out


class _ParamView:
    """Dict-like view of a model's parameter store keyed by ``(layer, role)``."""

    def __init__(self, model):
        self.model = model

    def __getitem__(self, key):
        return self.model.params[key[0]][key[1]]

    def __setitem__(self, key, value):
        self.model.params[key[0]][key[1]] = value


def optimizer_step(model, grads, state, config):
    view = _ParamView(model)
    if config.optimizer == "sgd":
        sgd_step(view, grads, config.learning_rate)
    elif config.optimizer == "adam":
        adam_step(view, grads, state, config.learning_rate, config.beta1, config.beta2, config.adam_epsilon)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")


# --- metrics -----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class History:
    header: str
    epochs: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for e in self.epochs:
            writer.writerow([e.epoch] + [repr(float(v)) for v in (e.train_loss, e.train_acc, e.val_loss, e.val_acc)])
        return buf.getvalue()

    def losses(self):
        return [e.train_loss for e in self.epochs]


@dataclass
class Metrics:
    loss: float
    accuracy: float
    auc: float
    confusion: np.ndarray
    history: History = None


def confusion_matrix(labels, predictions, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def binary_auc(scores, positives):
    """Trapezoidal area under the ROC curve over unique score thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    p = positives[order]
    tps = np.cumsum(p)
    fps = np.cumsum(~p)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tps[last] / n_pos]
    fpr = np.r_[0.0, fps[last] / n_neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc(probabilities, labels):
    """Binary AUC over the positive-class score, macro one-vs-rest beyond two classes."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise UndefinedMetricError("AUC is undefined for a single-class dataset")
    n_classes = probabilities.shape[1]
    if n_classes == 2:
        return binary_auc(probabilities[:, 1], labels == 1)
    aucs = [binary_auc(probabilities[:, c], labels == c) for c in range(n_classes)
            if 0 < np.sum(labels == c) < labels.size]
    return float(np.mean(aucs))


def predict(model, dataset, batch_size=32):
    outs = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        out, _ = ng.forward(model, dataset.batch(idx), "infer")
        outs.append(out)
    if not outs:
        return np.zeros((0,) + model.output_shape)
    return np.concatenate(outs)


def evaluate(model, dataset, batch_size=32):
    """Loss, accuracy, confusion matrix and AUC of ``model`` on ``dataset``.

    A dataset holding one class still gets accuracy and confusion; its AUC
    is ``None`` and an :class:`UndefinedMetricWarning` is issued.
    """
    n_classes = model.output_shape[0]
    if len(dataset) == 0:
        raise DegenerateInputError("cannot evaluate on an empty dataset")
    probs = predict(model, dataset, batch_size)
    labels = dataset.labels
    loss = cross_entropy(probs, one_hot(labels, n_classes))
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(labels, pred, n_classes)
    accuracy = float(np.trace(cm) / cm.sum())
    try:
        auc = roc_auc(probs, labels)
    except UndefinedMetricError as exc:
        warnings.warn(str(exc), UndefinedMetricWarning, stacklevel=2)
        auc = None
    return Metrics(loss, accuracy, auc, cm)


# --- the epoch loop ----------------------------------------------------------------

def _batches(order, batch_size, merge_singleton):
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if merge_singleton and len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _has_train_bn(model):
    return any(s.kind == "batchnorm" and i not in model.frozen for i, s in enumerate(model.layers))


def _step(model, x, target, config, state, seed, autoencoder):
    out, trace = ng.forward(model, x, "train", seed)
    last = model.layers[-1]
    if autoencoder or config.loss == "mse":
        loss = mse(out, target)
        grads = ng.backward(model, trace, mse_grad(out, target))
        if autoencoder:
            correct = float(np.mean((out >= 0.5) == (target >= 0.5))) * len(x)
        else:
            correct = float(np.sum(out.argmax(1) == target.argmax(1)))
    else:
        if last.kind != "activation" or last.activation != "softmax":
            raise UnsupportedCompositionError("cross-entropy training needs a final softmax layer")
        loss = cross_entropy(out, target)
        grads = ng.backward(model, trace, softmax_cross_entropy_grad(out, target), upto=len(model.layers) - 2)
        correct = float(np.sum(out.argmax(1) == target.argmax(1)))
    optimizer_step(model, trainable_grads(model, grads), state, config)
    ng.apply_running_stats(model, trace)
    return loss, correct


def _fit(model, train_set, val_fn, config, autoencoder, log_path=None):
    n = len(train_set)
    if n == 0:
        raise DegenerateInputError("empty training set")
    rng = np.random.default_rng(config.seed)
    state = OptimizerState()
    history = History(config.header())
    n_classes = model.output_shape[0]
    merge = _has_train_bn(model)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total_loss = 0.0
        total_correct = 0.0
        for idx in _batches(order, config.batch_size, merge):
            x = train_set.batch(idx)
            target = x if autoencoder else one_hot(train_set.labels[idx], n_classes)
            seed = int(rng.integers(2 ** 31))
            loss, correct = _step(model, x, target, config, state, seed, autoencoder)
            total_loss += loss * len(idx)
            total_correct += correct
        val_loss, val_acc = val_fn(model) if val_fn is not None else (math.nan, math.nan)
        history.epochs.append(EpochRecord(epoch, total_loss / n, total_correct / n, val_loss, val_acc))
    if log_path is not None:
        from .exporters import atomic_write_text

        atomic_write_text(log_path, history.to_csv())
    return model, history


def train(model, train_set, val_set=None, config=None, log_path=None):
    """Mini-batch training with a seeded shuffle per epoch.

    Works on a copy: the returned model carries the trained parameters and
    ``model`` is left untouched. Layers in ``model.frozen`` are not updated.
    """
    config = config or TrainingConfig()
    if len(train_set) == 0:
        raise DegenerateInputError("empty training set")
    n_classes = model.output_shape[0]
    if len(model.output_shape) != 1 or len(train_set.class_names) != n_classes:
        raise InvalidLabelError(f"{len(train_set.class_names)} classes but the model outputs {model.output_shape}")
    if train_set.sample_shape != model.input_shape:
        raise GeometryError(f"dataset samples {train_set.sample_shape} do not match model input {model.input_shape}")
    if config.augment is not None:
        train_set = augment_plan(train_set, config.augment)
    model = model.copy()

    val_fn = None
    if val_set is not None and len(val_set):
        def val_fn(m):
            metrics = _evaluate_quiet(m, val_set)
            return metrics.loss, metrics.accuracy
    return _fit(model, train_set, val_fn, config, autoencoder=False, log_path=log_path)


def _evaluate_quiet(model, dataset):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UndefinedMetricWarning)
        return evaluate(model, dataset)


def train_reconstruction(model, patches, config, val_patches=None, log_path=None):
    """MSE training with the input as target (autoencoders)."""
    if len(patches) == 0:
        raise DegenerateInputError("empty patch set")
    if patches.sample_shape != model.input_shape:
        raise GeometryError(f"patches {patches.sample_shape} do not match model input {model.input_shape}")
    if config.augment is not None:
        patches = augment_plan(patches, config.augment)
    model = model.copy()
    val_fn = None
    if val_patches is not None and len(val_patches):
        def val_fn(m):
            out = predict(m, val_patches, config.batch_size)
            target = val_patches.batch(np.arange(len(val_patches)))
            return mse(out, target), float(np.mean((out >= 0.5) == (target >= 0.5)))
    return _fit(model, patches, val_fn, config, autoencoder=True, log_path=log_path)


# --- splits ------------------------------------------------------------------------

def _labels_of(dataset):
    return dataset.labels if isinstance(dataset, Dataset) else np.asarray(dataset)


def stratified_indices(labels, fractions=(0.8, 0.1, 0.1), seed=0):
    """Per-class proportional split; each part gets ``floor(n_c * f)`` of a
    class and the rounding residue goes to the first (training) part."""
    labels = np.asarray(labels)
    fractions = tuple(float(f) for f in fractions)
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise InvalidPlanError(f"fractions must be nonnegative and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(members.size)]
        if members.size < len(fractions):
            warnings.warn(f"class {c} has {members.size} samples for {len(fractions)} split parts",
                          StratificationWarning, stacklevel=2)
        counts = [int(math.floor(members.size * f + 1e-9)) for f in fractions[1:]]
        counts.insert(0, members.size - sum(counts))
        start = 0
        for part, count in zip(parts, counts):
            part.extend(members[start:start + count].tolist())
            start += count
    return tuple(np.array(sorted(p), dtype=np.int64) for p in parts)


def stratified_split(dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Split a :class:`Dataset` (or a label array) into stratified parts."""
    index = stratified_indices(_labels_of(dataset), fractions, seed)
    if isinstance(dataset, Dataset):
        return tuple(dataset.subset(i) for i in index)
    return index


def kfold_plan(dataset, k, seed=0):
    """``k`` stratified ``(train_idx, val_idx)`` pairs; every sample is in
    exactly one validation fold."""
    labels = _labels_of(dataset)
    n = labels.size
    if k < 2 or k > n:
        raise InvalidPlanError(f"k must lie in [2, {n}], got {k}")
    rng = np.random.default_rng(seed)
    ordered = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        ordered.extend(members[rng.permutation(members.size)].tolist())
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[np.array(ordered, dtype=np.int64)] = np.arange(n) % k
    return [(np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)) for f in range(k)]
