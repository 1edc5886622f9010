"""End-to-end acceptance checks, one test per criterion. Each test records a
PASS/FAIL line that the terminal summary prints after the run."""

import itertools
import time
import warnings

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from conftest import ACCEPTANCE_RESULTS, as_float64, numeric_grad, rel_error, small_model
from test_explain import oracle_lrp, random_conv_net, random_dense_net
from test_tensorcore import brute_force_extent
from voxnet import archive, cae, datasets as ds, explain as xp, netgraph as ng, tensorcore as tc
from voxnet import training as tr, voxmesh as vm
from voxnet.architectures import parse_architecture, reference_architecture
from voxnet.cli import run
from voxnet.errors import GeometryError, ParityWarning
from voxnet.netgraph import LayerSpec as L


def record(n, ok, detail):
    ACCEPTANCE_RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# --- 1: gradients ------------------------------------------------------------------------

LAYER_CASES = {
    "conv3d same": [L.conv3d(2, 3)],
    "conv3d valid strided": [L.conv3d(3, (2, 3, 2), "valid", strides=(2, 1, 2))],
    "maxpool3d": [L.maxpool3d(2)],
    "maxpool3d overlapping": [L.maxpool3d((3, 2, 2), (2, 1, 1))],
    "upsample3d": [L.upsample3d((2, 1, 2))],
    "batchnorm": [L.batchnorm()],
    "relu": [L.act("relu")],
    "sigmoid": [L.act("sigmoid")],
    "tanh": [L.act("tanh")],
    "dropout": [L.dropout(0.4)],
    "flatten+dense": [L.flatten(), L.dense(4)],
}


def _fd_errors(layers, mode, rng):
    model = as_float64(small_model(layers, (2, 5, 6, 4), seed=3))
    for rec in model.params.values():
        if "running_var" in rec:
            rec["running_var"][:] = rng.uniform(0.5, 2, rec["running_var"].shape)
            rec["running_mean"][:] = rng.normal(size=rec["running_mean"].shape)
            rec["scale"][:] = rng.normal(size=rec["scale"].shape)
    x = rng.normal(size=(3,) + model.input_shape)
    out, trace = ng.forward(model, x, mode, 7)
    u = rng.normal(size=out.shape)
    f = lambda: float(np.sum(u * ng.forward(model, x, mode, 7)[0]))
    grads = ng.backward(model, trace, u)
    errors = [rel_error(grads.input, numeric_grad(f, x))]
    for i, rec in grads.params.items():
        errors += [rel_error(g, numeric_grad(f, model.params[i][role])) for role, g in rec.items()]
    return max(errors)


def _softmax_ce_error(rng):
    model = as_float64(small_model([L.flatten(), L.dense(3), L.act("softmax")], (1, 3, 3, 3), seed=4))
    x = rng.normal(size=(4,) + model.input_shape)
    target = tr.one_hot(rng.integers(0, 3, 4), 3)
    out, trace = ng.forward(model, x)
    grads = ng.backward(model, trace, tr.softmax_cross_entropy_grad(out, target), upto=len(model.layers) - 2)
    f = lambda: tr.cross_entropy(ng.forward(model, x)[0], target)
    errors = [rel_error(grads.input, numeric_grad(f, x))]
    errors += [rel_error(g, numeric_grad(f, model.params[1][role])) for role, g in grads.params[1].items()]
    return max(errors)


def test_criterion_01_gradients():
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    worst = {}
    for name, layers in LAYER_CASES.items():
        for mode in ("train", "infer"):
            worst[f"{name}/{mode}"] = _fd_errors(layers, mode, rng)
    worst["softmax+cross-entropy"] = _softmax_ce_error(rng)
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and elapsed < 60
    record(1, ok, f"{len(worst)} checks, worst rel error {err:.2e} ({name}), {elapsed:.1f}s")


# --- 2: shape arithmetic -------------------------------------------------------------------

def test_criterion_02_shapes():
    mismatches = 0
    for n, p, f, s in itertools.product(range(1, 17), range(4), range(1, 8), range(1, 4)):
        if f > n + 2 * p:
            try:
                tc.output_extent(n, p, f, s)
                mismatches += 1
            except GeometryError:
                pass
        elif tc.output_extent(n, p, f, s) != brute_force_extent(n, p, f, s):
            mismatches += 1
    layers, shape = parse_architecture(reference_architecture("cad", 10, 64))
    shapes = ng.chain_shapes(layers, shape)
    walk = [shape[1]] + [s[1] for spec, s in zip(layers, shapes[1:]) if spec.kind == "maxpool3d"]
    record(2, mismatches == 0 and walk == [64, 32, 16, 8], f"{mismatches} mismatches, walk {walk}")


# --- 3-5: relevance propagation ----------------------------------------------------------

def test_criterion_03_conservation():
    worst_total, worst_layer, worst_absorb = 0.0, 0.0, 0.0
    for seed in range(50):
        model, x = random_conv_net(seed, 2 + seed % 3)
        rmap = xp.lrp(model, x, seed % 3, xp.LrpRule.eps(0.0))
        score = abs(rmap.audit.score)
        worst_total = max(worst_total, abs(rmap.relevance.sum() - rmap.audit.score) / score)
        worst_layer = max(worst_layer, max(abs(s - rmap.audit.score) for s in rmap.audit.layer_sums) / score)
    for seed in range(50):
        model, x = random_conv_net(seed, 2 + seed % 3, bias=True)
        rmap = xp.lrp(model, x, seed % 3, xp.LrpRule.eps(0.0))
        sums, absorbed = rmap.audit.layer_sums, rmap.audit.absorbed
        scale = max(1.0, abs(rmap.audit.score))
        for i in range(len(absorbed)):
            worst_absorb = max(worst_absorb, abs(sums[i + 1] - sums[i] - absorbed[i]) / scale)
    ok = worst_total < 1e-4 and worst_layer < 1e-4 and worst_absorb < 1e-6
    record(3, ok, f"input {worst_total:.1e}, per layer {worst_layer:.1e}, absorption residual {worst_absorb:.1e}")


def test_criterion_04_dense_oracle():
    rules = [xp.LrpRule.eps(0.0), xp.LrpRule.eps(0.05), xp.LrpRule.alpha_beta(1, 0), xp.LrpRule.alpha_beta(2, 1)]
    cases = mismatched = 0
    for seed, rule, bias in itertools.product(range(100), rules, (False, True)):
        model, x = random_dense_net(seed, bias)
        target = seed % model.output_shape[0]
        got = xp.lrp(model, x, target, rule).relevance
        cases += 1
        mismatched += got.tobytes() != oracle_lrp(model, x, target, rule).tobytes()
    record(4, mismatched == 0, f"{cases - mismatched}/{cases} bitwise equal")


def test_criterion_05_winner_take_all():
    r = np.random.default_rng(5)
    rules = [xp.LrpRule.eps(0.0), xp.LrpRule.alpha_beta(1, 0), xp.LrpRule.alpha_beta(2, 1)]
    cases = clean = 0
    for case in range(1000):
        c = int(r.integers(1, 4))
        window = tuple(int(v) for v in r.integers(1, 4, 3))
        strides = tuple(int(v) for v in r.integers(1, 3, 3))
        extents = tuple(int(v) for v in r.integers(4, 7, 3))
        model = small_model([L.maxpool3d(window, strides), L.flatten(), L.dense(2)], (c,) + extents, seed=case)
        x = r.normal(size=(c,) + extents)
        rel = xp.lrp(model, x, case % 2, rules[case % 3]).relevance
        arg = ng.forward(model, x)[1][0].arg_indices[0]
        winners = np.zeros((c, int(np.prod(extents))), bool)
        for ch in range(c):
            winners[ch, arg[ch].ravel()] = True
        cases += 1
        clean += bool(np.all(rel.reshape(c, -1)[~winners] == 0))
    record(5, clean == cases, f"{clean}/{cases} cases with relevance only at winners")


# --- 6: activation maximisation --------------------------------------------------------------

def test_criterion_06_actmax_closed_form():
    worst_dist, worst_norm = 0.0, 0.0
    for seed in range(10):
        shape = (1, 2, 3, 4) if seed % 2 else (2, 2, 2, 2)
        model = small_model([L.flatten(), L.dense(1)], shape, seed=seed, scheme="glorot")
        w = model.params[1]["weights"][0].astype(np.float64).reshape(shape)
        rho = float(np.sqrt(w.size))
        x, hist = xp.activation_maximization(model, (1, 0), xp.ActMaxConfig(iterations=128, seed=seed))
        worst_dist = max(worst_dist, np.linalg.norm(x - rho * w / np.linalg.norm(w)) / rho)
        worst_norm = max(worst_norm, max(abs(n - rho) for n in hist.norms))
    ok = worst_dist <= 1e-3 and worst_norm <= 1e-5
    record(6, ok, f"distance {worst_dist:.1e} rho, norm deviation {worst_norm:.1e}")


# --- 7: synthetic classification ------------------------------------------------------------

TWO_BLOCK = """input 1x32x32x32
conv 5 3x3x3 same
bn
pool 2x2x2
relu
dropout 0.3
conv 5 3x3x3 same
bn
pool 2x2x2
relu
dropout 0.3
softmax 3
"""


@pytest.mark.slow
def test_criterion_07_synthetic_shapes():
    train_set = ds.synth_shapes(resolution=32, count_per_class=30, seed=0)
    test_set = ds.synth_shapes(resolution=32, count_per_class=10, seed=1)
    layers, shape = parse_architecture(TWO_BLOCK)
    model = ng.build_model(layers, shape, seed=0)
    start = time.perf_counter()
    config = tr.TrainingConfig(epochs=30, batch_size=16, learning_rate=0.001, optimizer="adam", seed=0)
    with tc.deterministic_mode(0):
        model, _ = tr.train(model, train_set, config=config)
        metrics = tr.evaluate(model, test_set)
    elapsed = time.perf_counter() - start
    ok = metrics.accuracy >= 0.95 and metrics.auc >= 0.95 and elapsed <= 600
    record(7, ok, f"accuracy {metrics.accuracy:.3f}, auc {metrics.auc:.3f}, {elapsed:.0f}s")


# --- 8: augmentation bookkeeping ------------------------------------------------------------

def test_criterion_08_augmentation_counts():
    rng = np.random.default_rng(8)
    sizes = []
    for n, spec in ((1038, ds.MRI_AUGMENT), (5132, ds.CAE_AUGMENT)):
        data = ds.Dataset((rng.random((n, 11, 11, 11)) < 0.1).astype(np.uint8), np.arange(n) % 2, ["a", "b"])
        out = ds.augment_plan(data, spec)
        sizes.append((n, len(out), n * spec.multiplier, len(out.labels)))
    ok = [s[1] for s in sizes] == [8304, 30792] and all(s[1] == s[2] == s[3] for s in sizes)
    record(8, ok, ", ".join(f"{a} -> {b}" for a, b, _, _ in sizes))


# --- 9: binvox ----------------------------------------------------------------------------

def test_criterion_09_binvox_round_trip():
    r = np.random.default_rng(9)
    exact = 0
    for _ in range(200):
        dims = tuple(int(v) for v in r.integers(1, 65, 3))
        occ = r.random(dims) < r.choice([0.0, 0.02, 0.5, 0.98, 1.0])
        grid = vm.VoxelGrid(occ, tuple(r.normal(size=3)), float(r.uniform(0.1, 10)))
        back = vm.parse_binvox(vm.binvox_bytes(grid))
        exact += back == grid and back.occupancy.tobytes() == grid.occupancy.tobytes()
    tail = vm.binvox_bytes(vm.VoxelGrid(np.zeros((10, 10, 3), bool))).split(b"data\n", 1)[1]
    ok = exact == 200 and tail == bytes([0, 255, 0, 45])
    record(9, ok, f"{exact}/200 exact, 300-run encoded as {list(tail)}")


# --- 10: voxeliser oracle -------------------------------------------------------------------

def hull_oracle(hull, grid, samples=5):
    """Voxel is occupied when any of ``samples``^3 interior points lies inside every facet halfspace."""
    res = grid.extents[0]
    offs = (np.arange(samples) + 0.5) / samples
    sub = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), -1).reshape(-1, 3)
    cells = np.stack(np.meshgrid(*[np.arange(res)] * 3, indexing="ij"), -1).reshape(-1, 3)
    out = np.zeros(len(cells), bool)
    normals, offsets = hull.equations[:, :3], hull.equations[:, 3]
    for lo in range(0, len(cells), 2048):
        pts = (cells[lo:lo + 2048, None, :] + sub[None]) * (grid.scale / res) + grid.translate
        inside = np.all(pts @ normals.T + offsets <= 1e-12, axis=-1)
        out[lo:lo + 2048] = inside.any(axis=1)
    return out.reshape(res, res, res)


def test_criterion_10_voxelizer():
    cube = vm.parse_mesh(b"OFF\n8 6 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n0 0 1\n1 0 1\n1 1 1\n0 1 1\n"
                         b"4 0 3 2 1\n4 4 5 6 7\n4 0 1 5 4\n4 2 3 7 6\n4 1 2 6 5\n4 0 4 7 3\n", "off")
    cube_count = vm.voxelize(cube, 4, "solid").count()
    r = np.random.default_rng(10)
    agreements = []
    for _ in range(10):
        points = r.normal(size=(int(r.integers(8, 40)), 3)) * r.uniform(0.5, 2, 3)
        hull = ConvexHull(points)
        with warnings.catch_warnings():
            warnings.simplefilter("error", ParityWarning)
            grid = vm.voxelize(vm.Mesh(points, hull.simplices), 32, "solid")
        agreements.append(float(np.mean(grid.occupancy == hull_oracle(hull, grid))))
    ok = cube_count == 64 and min(agreements) >= 0.99
    record(10, ok, f"cube {cube_count}/64, worst hull agreement {min(agreements):.4f}")


# --- 11: transfer and freezing --------------------------------------------------------------

def test_criterion_11_transfer_freeze():
    data = ds.synth_shapes(resolution=16, count_per_class=4, size_range=(0.15, 0.3), center_jitter=0.05, seed=11)
    source = cae.build_cae(patch_shape=(16, 16, 16), seed=2)
    _, cae_hist = cae.train_cae(source, data, tr.TrainingConfig(epochs=5, batch_size=6, learning_rate=0.01,
                                                                loss="mse"))
    errors = [e.train_loss for e in cae_hist.epochs]
    config = tr.TrainingConfig(epochs=5, batch_size=4)

    frozen = cae.transfer_encoder(source, cae.TransferPlan(n_classes=3))
    tuned, _ = cae.fine_tune(frozen, data, config)
    identical = all(tuned.params[i][role].tobytes() == frozen.params[i][role].tobytes()
                    for i in frozen.frozen for role in frozen.params[i])

    free = cae.transfer_encoder(source, cae.TransferPlan(freeze=(False,) * 3, n_classes=3))
    tuned_free, _ = cae.fine_tune(free, data, config)
    changed = tuned_free.params[0]["kernels"].tobytes() != free.params[0]["kernels"].tobytes()

    ok = identical and changed and errors[-1] < errors[0] and bool(frozen.frozen)
    record(11, ok, f"frozen identical {identical}, unfrozen changed {changed}, "
                   f"CAE error {errors[0]:.4f} -> {errors[-1]:.4f}")


# --- 12: determinism ----------------------------------------------------------------------

ARCH = "input 1x16x16x16\nconv 3 3x3x3 same\nbn\npool 2x2x2\nrelu\ndropout 0.3\nsoftmax 3\n"


def _pipeline(root, monkeypatch):
    root.mkdir()
    monkeypatch.chdir(root)
    (root / "arch.cfg").write_text(ARCH)
    steps = [
        ["synth", "--per-class", "4", "--res", "16", "--size", "0.15,0.3", "--jitter", "0.05", "-o", "data"],
        ["train", "--arch", "arch.cfg", "--data", "data/manifest.txt", "--epochs", "3", "--batch", "4",
         "--val-fraction", "0.25", "-o", "model"],
        ["explain", "lrp", "--model", "model", "--input", "data/cuboid_0004.binvox", "--class", "1",
         "--audit", "audit.txt", "-o", "lrp.vol1"],
        ["explain", "actmax", "--model", "model", "--unit", "6:2", "--iters", "10", "-o", "actmax.vol1"],
        ["slices", "lrp.vol1", "--axis", "y", "--index", "4,8", "--scaling", "symmetric", "-o", "lrp.pgm"],
    ]
    codes = [run(["--seed", "42"] + step) for step in steps]
    return codes, {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_12_determinism(tmp_path, monkeypatch):
    codes_a, files_a = _pipeline(tmp_path / "a", monkeypatch)
    codes_b, files_b = _pipeline(tmp_path / "b", monkeypatch)
    differing = sorted(k for k in files_a if files_a[k] != files_b.get(k))
    expected = {"model/manifest.txt", "model.log.csv", "lrp.vol1", "actmax.vol1", "lrp_4.pgm", "audit.txt"}
    ok = codes_a == codes_b == [0] * 5 and files_a.keys() == files_b.keys() and not differing
    ok = ok and expected <= files_a.keys()
    record(12, ok, f"{len(files_a)} files compared, differing {differing or 'none'}, exit codes {codes_a}")
