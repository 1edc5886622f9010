"""Command-line front end: ``python -m voxnet <command> ...``.

Exit codes: 0 on success, 1 when a command fails with a domain error, 2 for
usage errors (unknown command or flag).
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from . import archive, cae, datasets, explain, exporters, training, voxmesh
from .architectures import parse_architecture, reference_architecture
from .errors import VoxnetError
from .netgraph import build_model
from .tensorcore import deterministic_mode


# --- volume and dataset I/O ----------------------------------------------------------

def read_volume(path):
    """A 3D float array from a ``.vol1`` or ``.binvox`` file (sniffed by magic)."""
    data = Path(path).read_bytes()
    if data.startswith(exporters.VOL1_MAGIC):
        return exporters.parse_vol1(data).astype(np.float64)
    if data.startswith(b"#binvox"):
        return voxmesh.parse_binvox(data).occupancy.astype(np.float64)
    raise exporters.FormatError(f"{path}: neither VOL1 nor binvox", 0)


def model_input(model, path):
    vol = read_volume(path)
    x = vol[None] if vol.ndim == 3 else vol
    if x.shape != model.input_shape:
        raise exporters.GeometryError(f"{path}: volume {vol.shape} does not match model input {model.input_shape}")
    return x


def load_dataset(manifest):
    pairs, classes = datasets.read_manifest(manifest)
    if not pairs:
        raise datasets.InvalidLabelError(f"{manifest}: no samples")
    volumes = np.stack([read_volume(p) for p, _ in pairs])
    labels = np.array([label for _, label in pairs])
    return datasets.Dataset(volumes.astype(np.float32), labels, classes, [f"manifest {manifest}"])


def _triple_arg(text):
    values = tuple(int(v) for v in text.lower().split("x"))
    return values * 3 if len(values) == 1 else values


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


# --- commands ------------------------------------------------------------------------

def cmd_voxelize(args):
    mesh = voxmesh.load_mesh(args.mesh)
    grid = voxmesh.voxelize(mesh, args.res, args.fill)
    voxmesh.write_binvox(grid, args.output)
    print(f"{args.output}: {grid.count()} of {args.res ** 3} voxels occupied")


def cmd_synth(args):
    classes = tuple(c.strip() for c in args.classes.split(",") if c.strip())
    size = tuple(float(v) for v in args.size.split(","))
    if len(size) != 2:
        raise ValueError(f"--size expects min,max, got {args.size!r}")
    config = datasets.SynthConfig(classes, args.per_class, args.res, size, args.jitter, args.seed)
    data = datasets.synth_shapes(config)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, (vol, label) in enumerate(zip(data.volumes, data.labels)):
        name = f"{data.class_names[label]}_{i:04d}.binvox"
        voxmesh.write_binvox(voxmesh.VoxelGrid(vol, source="synth"), out / name)
        pairs.append((name, int(label)))
    datasets.write_manifest(out / "manifest.txt", pairs, data.class_names)
    print(f"{out / 'manifest.txt'}: {len(pairs)} volumes, classes {','.join(data.class_names)}")


def _architecture(args, dataset):
    if args.arch:
        layers, input_shape = parse_architecture(Path(args.arch).read_text(), args.arch)
    else:
        text = reference_architecture(args.reference, len(dataset.class_names), dataset.sample_shape[1])
        layers, input_shape = parse_architecture(text)
    return build_model(layers, input_shape or dataset.sample_shape, "he", args.seed)


def _training_config(args, loss="categorical_cross_entropy"):
    return training.TrainingConfig(epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
                                   optimizer=args.optimizer, loss=loss, seed=args.seed)


def _split(dataset, args):
    if args.val_fraction <= 0:
        return dataset, None
    train_set, val_set = training.stratified_split(dataset, (1 - args.val_fraction, args.val_fraction), args.seed)
    return train_set, val_set


def _print_metrics(metrics, names):
    auc = "undefined" if metrics.auc is None else f"{metrics.auc:.6f}"
    print(f"loss {metrics.loss:.6f}\naccuracy {metrics.accuracy:.6f}\nauc {auc}")
    print("confusion (rows true, columns predicted): " + ",".join(names))
    for row in metrics.confusion:
        print(" ".join(str(v) for v in row))


def cmd_train(args):
    dataset = load_dataset(args.data)
    train_set, val_set = _split(dataset, args)
    model = _architecture(args, dataset)
    out = Path(args.output)
    model, history = training.train(model, train_set, val_set, _training_config(args))
    model.meta["classes"] = ",".join(dataset.class_names)
    archive.save_model(model, out)
    exporters.atomic_write_text(out.parent / f"{out.name}.log.csv", history.to_csv())
    last = history.epochs[-1]
    print(f"{out}: trained {len(history.epochs)} epochs, final train loss {last.train_loss:.6f}, "
          f"train accuracy {last.train_acc:.6f}")


def cmd_eval(args):
    model = archive.load_model(args.model)
    dataset = load_dataset(args.data)
    metrics = training.evaluate(model, dataset)
    _print_metrics(metrics, dataset.class_names)


def cmd_explain_lrp(args):
    model = archive.load_model(args.model)
    x = model_input(model, args.input)
    rmap = explain.lrp(model, x, args.class_index, explain.LrpRule.parse(args.rule))
    exporters.write_vol1(args.output, rmap.relevance.sum(axis=0))
    report = explain.conservation_check(rmap, model, x)
    if args.audit:
        exporters.atomic_write_text(args.audit, report.table())
    print(f"{args.output}: rule {rmap.rule}, class {rmap.target_class}, score {rmap.audit.score:.9g}, "
          f"input relevance {float(rmap.relevance.sum()):.9g}, absorbed {report.total_absorbed:.9g}")


def cmd_explain_actmax(args):
    model = archive.load_model(args.model)
    layer, _, channel = args.unit.partition(":")
    config = explain.ActMaxConfig(iterations=args.iters, step_size=args.step, rho=args.rho, seed=args.seed)
    x, history = explain.activation_maximization(model, (int(layer), int(channel or 0)), config)
    exporters.write_vol1(args.output, x.sum(axis=0))
    print(f"{args.output}: activation {history.values[0]:.6g} -> {history.values[-1]:.6g} "
          f"over {len(history.values) - 1} iterations")


def cmd_featmaps(args):
    model = archive.load_model(args.model)
    x = model_input(model, args.input)
    layers = _int_list(args.layers) if args.layers else None
    dump = explain.feature_maps(model, x, layers)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for i, maps in sorted(dump.maps.items()):
        for c, fmap in enumerate(maps):
            exporters.write_vol1(out / f"layer{i:03d}_ch{c}.vol1", fmap)
        if i in dump.kernels:
            for c, kernel in enumerate(dump.kernels[i]):
                exporters.write_vol1(out / f"layer{i:03d}_kernel{c}.vol1", kernel.sum(axis=0))
    print(f"{out}: feature maps of layers {sorted(dump.maps)}")


def cmd_cae_train(args):
    patches = load_dataset(args.data)
    model = cae.build_cae(cae.AutoencoderSpec(kernel_count=args.kernels), patches.sample_shape[1:],
                          patches.sample_shape[0], args.seed)
    model, history = cae.train_cae(model, patches, _training_config(args, "mse"))
    out = Path(args.output)
    archive.save_model(model, out)
    exporters.atomic_write_text(out.parent / f"{out.name}.log.csv", history.to_csv())
    print(f"{out}: reconstruction error {history.epochs[0].train_loss:.6g} -> {history.epochs[-1].train_loss:.6g}")


def cmd_cae_transfer(args):
    source = archive.load_model(args.cae)
    dataset = load_dataset(args.data)
    if args.plan:
        plan = cae.TransferPlan.from_text(Path(args.plan).read_text(), args.plan)
    else:
        plan = cae.TransferPlan(n_classes=len(dataset.class_names))
    if args.no_freeze:
        plan = cae.TransferPlan(plan.source_blocks, (False,) * len(plan.source_blocks), plan.head_kernels,
                                plan.hidden_units, plan.n_classes)
    model = cae.transfer_encoder(source, plan, dataset.sample_shape, args.seed)
    train_set, val_set = _split(dataset, args)
    out = Path(args.output)
    model, metrics = cae.fine_tune(model, train_set, _training_config(args), val_set)
    model.meta["classes"] = ",".join(dataset.class_names)
    archive.save_model(model, out)
    exporters.atomic_write_text(out.parent / f"{out.name}.log.csv", metrics.history.to_csv())
    _print_metrics(metrics, dataset.class_names)


def cmd_slices(args):
    vol = read_volume(args.volume)
    indices = _int_list(args.index)
    images = exporters.export_slices(vol, args.axis, indices, args.scaling)
    out = Path(args.output)
    if len(images) == 1:
        exporters.write_pgm(out, images[0])
        print(f"{out}: {images[0].shape[1]}x{images[0].shape[0]}")
        return
    for i, img in zip(indices, images):
        exporters.write_pgm(out.with_name(f"{out.stem}_{i}{out.suffix}"), img)
    print(f"{out}: {len(images)} slices")


# --- parser --------------------------------------------------------------------------

def _add_training_flags(p, epochs=30):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--val-fraction", type=float, default=0.0)


def build_parser():
    parser = argparse.ArgumentParser(prog="voxnet", description="3D CNN training and introspection on voxel grids")
    parser.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="mesh (OFF/OBJ/STL) to binvox")
    p.add_argument("mesh")
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--fill", choices=("solid", "surface"), default="solid")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("synth", help="synthetic primitive dataset")
    p.add_argument("--classes", default="e,c,y")
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--size", default="0.2,0.38", help="semi-axis range as grid fractions")
    p.add_argument("--jitter", type=float, default=0.08)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a classifier")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--arch")
    group.add_argument("--reference")
    p.add_argument("--data", required=True)
    _add_training_flags(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="relevance maps and activation maximisation")
    esub = p.add_subparsers(dest="method", required=True)
    q = esub.add_parser("lrp")
    q.add_argument("--model", required=True)
    q.add_argument("--input", required=True)
    q.add_argument("--class", dest="class_index", type=int, required=True)
    q.add_argument("--rule", default="a1b0")
    q.add_argument("--audit")
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_explain_lrp)
    q = esub.add_parser("actmax")
    q.add_argument("--model", required=True)
    q.add_argument("--unit", required=True, help="layer:channel")
    q.add_argument("--iters", type=int, default=128)
    q.add_argument("--step", type=float, default=0.1)
    q.add_argument("--rho", type=float)
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_explain_actmax)

    p = sub.add_parser("featmaps", help="dump feature maps and kernels")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--layers")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_featmaps)

    p = sub.add_parser("cae", help="convolutional autoencoder")
    csub = p.add_subparsers(dest="stage", required=True)
    q = csub.add_parser("train")
    q.add_argument("--data", required=True)
    q.add_argument("--kernels", type=int, default=5)
    _add_training_flags(q, epochs=10)
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_cae_train)
    q = csub.add_parser("transfer")
    q.add_argument("--cae", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--plan")
    q.add_argument("--no-freeze", action="store_true")
    _add_training_flags(q)
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_cae_transfer)

    p = sub.add_parser("slices", help="volume slices as PGM images")
    p.add_argument("volume")
    p.add_argument("--axis", choices=("x", "y", "z"), default="y")
    p.add_argument("--index", required=True, help="one index or a comma list")
    p.add_argument("--scaling", choices=("minmax", "symmetric"), default="minmax")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_slices)
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        with deterministic_mode(args.seed), warnings.catch_warnings():
            warnings.simplefilter("always")
            args.func(args)
    except (VoxnetError, OSError, ValueError, KeyError) as exc:
        print(f"voxnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())
