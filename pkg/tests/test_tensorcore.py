import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import numeric_grad, rel_error
from voxnet import tensorcore as tc
from voxnet.errors import CorruptedTraceError, GeometryError


def brute_force_extent(n, p, f, s):
    """Count kernel placements by enumerating start positions on the padded line."""
    return sum(1 for start in range(0, n + 2 * p, s) if start + f <= n + 2 * p)


def naive_conv(x, k, b, pads, strides):
    """Direct loop cross-correlation of one sample (oracle)."""
    xp = np.pad(x, ((0, 0),) + tuple(pads))
    N, C, fd, fh, fw = k.shape
    sd, sh, sw = strides
    od = (xp.shape[1] - fd) // sd + 1
    oh = (xp.shape[2] - fh) // sh + 1
    ow = (xp.shape[3] - fw) // sw + 1
    out = np.zeros((N, od, oh, ow))
    for n, d, h, w in itertools.product(range(N), range(od), range(oh), range(ow)):
        win = xp[:, d * sd:d * sd + fd, h * sh:h * sh + fh, w * sw:w * sw + fw]
        out[n, d, h, w] = np.sum(win * k[n]) + b[n]
    return out


def test_output_extent_exhaustive():
    for n, p, f, s in itertools.product(range(1, 17), range(4), range(1, 8), range(1, 4)):
        if f > n + 2 * p:
            with pytest.raises(GeometryError):
                tc.output_extent(n, p, f, s)
        else:
            assert tc.output_extent(n, p, f, s) == brute_force_extent(n, p, f, s)


@given(st.integers(1, 40), st.integers(1, 7), st.integers(1, 3))
def test_same_padding_gives_ceil_extent(n, f, s):
    lo, hi = tc.same_padding(n, f, s)
    assert hi - lo in (0, 1)
    assert (n + lo + hi - f) // s + 1 == -(-n // s)


def test_reference_walk_halves_extent():
    shape = (64, 64, 64)
    walk = []
    conv = tc.ConvSpec(5, (3, 3, 3))
    pool = tc.PoolSpec((2, 2, 2))
    for _ in range(3):
        shape = pool.output_extents(conv.output_extents(shape))
        walk.append(shape[0])
    assert walk == [32, 16, 8]


@pytest.mark.parametrize("padding,strides,ext", [
    ("same", (1, 1, 1), (3, 3, 3)),
    ("valid", (1, 1, 1), (3, 2, 3)),
    ("same", (2, 1, 2), (3, 3, 2)),
    ("valid", (2, 2, 1), (2, 3, 3)),
])
def test_conv_matches_naive_loop(rng, padding, strides, ext):
    spec = tc.ConvSpec(3, ext, strides, padding)
    x = rng.normal(size=(2, 2, 6, 5, 7))
    k = rng.normal(size=(3, 2) + ext)
    b = rng.normal(size=3)
    out = tc.conv3d(x, k, b, spec)
    pads = spec.pads(x.shape[2:])
    for i in range(2):
        np.testing.assert_allclose(out[i], naive_conv(x[i], k, b, pads, strides), rtol=1e-12, atol=1e-12)


def test_identity_kernel_conv_is_identity(rng):
    x = rng.normal(size=(1, 5, 5, 5))
    k = np.zeros((1, 1, 3, 3, 3))
    k[0, 0, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(tc.conv3d(x, k, np.zeros(1), tc.ConvSpec(1)), x)


@pytest.mark.parametrize("padding,strides", [("same", (1, 1, 1)), ("valid", (2, 1, 1)), ("same", (2, 2, 2))])
def test_conv_gradients_finite_difference(rng, padding, strides):
    spec = tc.ConvSpec(2, (3, 2, 3), strides, padding)
    x = rng.normal(size=(2, 2, 5, 4, 5))
    k = rng.normal(size=(2, 2, 3, 2, 3))
    b = rng.normal(size=2)
    up = rng.normal(size=tc.conv3d(x, k, b, spec).shape)
    f = lambda: float(np.sum(up * tc.conv3d(x, k, b, spec)))
    dx, dk, db = tc.conv3d_grads(x, k, up, spec)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-7
    assert rel_error(dk, numeric_grad(f, k)) < 1e-7
    assert rel_error(db, numeric_grad(f, b)) < 1e-7


def test_conv_rejects_mismatched_kernels(rng):
    with pytest.raises(GeometryError):
        tc.conv3d(rng.normal(size=(2, 4, 4, 4)), rng.normal(size=(3, 1, 3, 3, 3)), np.zeros(3), tc.ConvSpec(3))
    with pytest.raises(GeometryError):
        tc.conv3d(rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 1, 3, 3, 3)), np.zeros(1),
                  tc.ConvSpec(1, padding="valid"))


def test_maxpool_values_and_winners(rng):
    x = rng.normal(size=(2, 3, 6, 4, 5))
    spec = tc.PoolSpec((2, 2, 2))
    pooled, arg = tc.maxpool3d(x, spec)
    assert pooled.shape == (2, 3, 3, 2, 2)
    flat = x.reshape(2, 3, -1)
    np.testing.assert_array_equal(np.take_along_axis(flat, arg.reshape(2, 3, -1), -1).reshape(pooled.shape), pooled)
    for b, c, d, h, w in itertools.product(range(2), range(3), range(3), range(2), range(2)):
        assert pooled[b, c, d, h, w] == x[b, c, 2 * d:2 * d + 2, 2 * h:2 * h + 2, 2 * w:2 * w + 2].max()


def test_maxpool_tie_goes_to_lowest_index():
    x = np.ones((1, 2, 2, 2))
    _, arg = tc.maxpool3d(x, tc.PoolSpec(2))
    assert arg.ravel().tolist() == [0]


@pytest.mark.parametrize("window,strides", [((2, 2, 2), None), ((3, 2, 2), (2, 2, 1))])
def test_maxpool_gradient_finite_difference(rng, window, strides):
    spec = tc.PoolSpec(window, strides)
    x = rng.normal(size=(2, 2, 6, 5, 4))
    pooled, arg = tc.maxpool3d(x, spec)
    up = rng.normal(size=pooled.shape)
    f = lambda: float(np.sum(up * tc.maxpool3d(x, spec)[0]))
    assert rel_error(tc.maxpool3d_grad(arg, up, x.shape), numeric_grad(f, x)) < 1e-7


def test_maxpool_grad_rejects_bad_indices():
    with pytest.raises(CorruptedTraceError):
        tc.maxpool3d_grad(np.full((1, 1, 1, 1), 99), np.ones((1, 1, 1, 1)), (1, 2, 2, 2))


def test_upsample_and_gradient(rng):
    x = rng.normal(size=(1, 2, 2, 3, 2))
    y = tc.upsample3d(x, 2)
    assert y.shape == (1, 2, 4, 6, 4)
    assert y[0, 1, 3, 5, 2] == x[0, 1, 1, 2, 1]
    up = rng.normal(size=y.shape)
    f = lambda: float(np.sum(up * tc.upsample3d(x, 2)))
    assert rel_error(tc.upsample3d_grad(up, 2), numeric_grad(f, x)) < 1e-7


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_conv_input_grad_is_adjoint(seed):
    r = np.random.default_rng(seed)
    spec = tc.ConvSpec(2, (3, 3, 3), tuple(r.integers(1, 3, 3)), "same" if seed % 2 else "valid")
    x = r.normal(size=(1, 2, 5, 6, 4))
    k = r.normal(size=(2, 2, 3, 3, 3))
    y = tc.conv3d(x, k, np.zeros(2), spec)
    u = r.normal(size=y.shape)
    lhs = np.sum(u * y)
    rhs = np.sum(x * tc.conv3d_input_grad(u, k, x.shape, spec))
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


def test_deterministic_mode_flags_and_restores():
    assert not tc.is_deterministic()
    with tc.deterministic_mode(3):
        assert tc.is_deterministic()
        a = np.random.rand()
    with tc.deterministic_mode(3):
        assert np.random.rand() == a
    assert not tc.is_deterministic()
