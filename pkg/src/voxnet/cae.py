"""Convolutional autoencoder on volume patches and transfer of its encoder
into a classifier, with optional freezing of the transferred layers."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import netgraph as ng
from .errors import DegenerateInputError, GeometryError, ParseError, TransferError
from .netgraph import LayerSpec
from .training import TrainingConfig, train, train_reconstruction, evaluate

ENCODER_BLOCK_LAYERS = 4  # conv, relu, pool, batchnorm


@dataclass(frozen=True)
class AutoencoderSpec:
    kernel_count: int = 5
    kernel_extents: tuple = (3, 3, 3)
    blocks: int = 3
    pool: int = 2

    @property
    def reduction(self):
        return self.pool ** self.blocks


def _encoder_block(spec):
    return [LayerSpec.conv3d(spec.kernel_count, spec.kernel_extents), LayerSpec.act("relu"),
            LayerSpec.maxpool3d((spec.pool,) * 3), LayerSpec.batchnorm()]


def _decoder_block(spec):
    return [LayerSpec.conv3d(spec.kernel_count, spec.kernel_extents), LayerSpec.act("relu"),
            LayerSpec.upsample3d(spec.pool), LayerSpec.batchnorm()]


def encoder_length(spec):
    return spec.blocks * ENCODER_BLOCK_LAYERS


def build_cae(spec=None, patch_shape=(64, 144, 64), channels=1, seed=0):
    """Encoder blocks, mirrored decoder blocks and a one-kernel sigmoid
    reconstruction layer. The code is ``patch_shape / 8`` with
    ``kernel_count`` channels."""
    spec = spec or AutoencoderSpec()
    patch_shape = tuple(int(v) for v in patch_shape)
    if len(patch_shape) != 3 or any(n <= 0 or n % spec.reduction for n in patch_shape):
        raise GeometryError(f"patch extents {patch_shape} must be positive multiples of {spec.reduction}")
    layers = []
    for _ in range(spec.blocks):
        layers += _encoder_block(spec)
    for _ in range(spec.blocks):
        layers += _decoder_block(spec)
    layers += [LayerSpec.conv3d(channels, spec.kernel_extents), LayerSpec.act("sigmoid")]
    model = ng.build_model(layers, (channels,) + patch_shape, "glorot", seed)
    model.meta["role"] = "autoencoder"
    model.meta["encoder_layers"] = str(encoder_length(spec))
    return model


def code_shape(cae):
    n = int(cae.meta.get("encoder_layers", encoder_length(AutoencoderSpec())))
    return cae.shapes[n - 1]


def train_cae(model, patches, config=None, val_patches=None, log_path=None):
    """MSE reconstruction training; ``history`` holds the per-epoch error."""
    if patches is None or len(patches) == 0:
        raise DegenerateInputError("empty patch set")
    config = config or TrainingConfig(loss="mse")
    return train_reconstruction(model, patches, config, val_patches, log_path)


@dataclass(frozen=True)
class TransferPlan:
    """Which encoder blocks to copy, which of them to freeze, and the head."""

    source_blocks: tuple = (0, 1, 2)
    freeze: tuple = (True, True, True)
    head_kernels: int = 5
    hidden_units: tuple = (64, 32)
    n_classes: int = 2

    def __post_init__(self):
        if len(self.freeze) != len(self.source_blocks):
            raise TransferError("freeze mask needs one flag per transferred block")
        if tuple(self.source_blocks) != tuple(range(len(self.source_blocks))):
            raise TransferError("transferred blocks must be a prefix of the encoder")

    def to_text(self):
        return (f"blocks {' '.join(str(b) for b in self.source_blocks)}\n"
                f"freeze {' '.join('1' if f else '0' for f in self.freeze)}\n"
                f"head_kernels {self.head_kernels}\n"
                f"hidden {' '.join(str(u) for u in self.hidden_units)}\n"
                f"classes {self.n_classes}\n")

    @classmethod
    def from_text(cls, text, path=None):
        fields = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, *vals = line.split()
            try:
                if key == "blocks":
                    fields["source_blocks"] = tuple(int(v) for v in vals)
                elif key == "freeze":
                    fields["freeze"] = tuple(v in ("1", "true", "yes") for v in vals)
                elif key == "head_kernels":
                    fields["head_kernels"] = int(vals[0])
                elif key == "hidden":
                    fields["hidden_units"] = tuple(int(v) for v in vals)
                elif key == "classes":
                    fields["n_classes"] = int(vals[0])
                else:
                    raise ParseError(f"unknown transfer plan key {key!r}", lineno, path)
            except (ValueError, IndexError):
                raise ParseError(f"bad value for {key!r}", lineno, path) from None
        if "source_blocks" in fields and "freeze" not in fields:
            fields["freeze"] = (True,) * len(fields["source_blocks"])
        return cls(**fields)


def transfer_encoder(cae, plan=None, classifier_input_shape=None, seed=0):
    """Classifier whose leading blocks carry copies of the CAE encoder
    weights; the head (one more conv block and dense layers) is freshly
    initialised. Transferred conv and batchnorm layers flagged in
    ``plan.freeze`` are frozen."""
    plan = plan or TransferPlan()
    input_shape = tuple(classifier_input_shape or cae.input_shape)
    n_enc = int(cae.meta.get("encoder_layers", encoder_length(AutoencoderSpec())))
    n_copy = len(plan.source_blocks) * ENCODER_BLOCK_LAYERS
    if n_copy > n_enc:
        raise TransferError(f"plan copies {len(plan.source_blocks)} blocks but the encoder has {n_enc // 4}")
    layers = [copy.deepcopy(s) for s in cae.layers[:n_copy]]
    layers += [LayerSpec.conv3d(plan.head_kernels, (3, 3, 3)), LayerSpec.act("relu"),
               LayerSpec.maxpool3d((2, 2, 2)), LayerSpec.batchnorm(), LayerSpec.flatten()]
    for units in plan.hidden_units:
        layers += [LayerSpec.dense(units), LayerSpec.act("relu")]
    layers += [LayerSpec.dense(plan.n_classes), LayerSpec.act("softmax")]
    try:
        model = ng.build_model(layers, input_shape, "he", seed)
    except GeometryError as exc:
        raise TransferError(f"classifier input {input_shape} does not chain through the encoder: {exc}") from None
    for i in range(n_copy):
        if i not in cae.params:
            continue
        src = cae.params[i]
        for role, value in src.items():
            if model.params[i][role].shape != value.shape:
                raise TransferError(f"layer {i} ({layers[i].kind}) parameter {role!r}: "
                                    f"{value.shape} vs {model.params[i][role].shape}")
        model.params[i] = {role: np.array(value, copy=True) for role, value in src.items()}
    for b, frozen in zip(plan.source_blocks, plan.freeze):
        if frozen:
            for i in range(b * ENCODER_BLOCK_LAYERS, (b + 1) * ENCODER_BLOCK_LAYERS):
                if layers[i].has_params:
                    model.frozen.add(i)
    model.meta["role"] = "classifier"
    model.meta["transferred_layers"] = str(n_copy)
    return model


def fine_tune(model, dataset, config=None, val_set=None, log_path=None):
    """Train the transferred classifier (freeze mask honoured) and report
    metrics on ``val_set`` (or the training set when none is given)."""
    model, history = train(model, dataset, val_set, config, log_path)
    metrics = evaluate(model, val_set if val_set is not None and len(val_set) else dataset)
    metrics.history = history
    return model, metrics


__all__ = [
    "AutoencoderSpec", "TransferPlan", "build_cae", "code_shape", "train_cae",
    "transfer_encoder", "fine_tune", "encoder_length",
]
