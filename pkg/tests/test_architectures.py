import numpy as np
import pytest
from hypothesis import given, strategies as st

from voxnet import archive, netgraph as ng
from voxnet.architectures import format_layer, parse_architecture, parse_layer, reference_architecture
from voxnet.errors import IntegrityError, ParseError
from voxnet.netgraph import LayerSpec as L

layer_specs = st.one_of(
    st.builds(lambda n, f, p, s: L.conv3d(n, f, p, s), st.integers(1, 9), st.tuples(*[st.integers(1, 7)] * 3),
              st.sampled_from(["same", "valid"]), st.tuples(*[st.integers(1, 3)] * 3)),
    st.builds(lambda w, s: L.maxpool3d(w, s), st.tuples(*[st.integers(1, 4)] * 3), st.tuples(*[st.integers(1, 4)] * 3)),
    st.builds(lambda f: L.upsample3d(f), st.tuples(*[st.integers(1, 3)] * 3)),
    st.just(L.batchnorm()),
    st.builds(L.act, st.sampled_from(["relu", "sigmoid", "tanh", "softmax"])),
    st.builds(L.dropout, st.floats(0, 0.95)),
    st.just(L.flatten()),
    st.builds(L.dense, st.integers(1, 128)),
)


@given(layer_specs)
def test_format_parse_round_trip(spec):
    assert parse_layer(format_layer(spec)) == [spec]


def test_config_text():
    text = """
    input 1x16x16x16   # one channel
    conv 5 3x3x3 same
    bn
    pool 2x2x2
    relu
    dropout 0.3
    dense 64
    softmax 2
    """
    layers, shape = parse_architecture(text)
    assert shape == (1, 16, 16, 16)
    kinds = [s.kind for s in layers]
    assert kinds == ["conv3d", "batchnorm", "maxpool3d", "activation", "dropout", "flatten", "dense",
                     "dense", "activation"]
    model = ng.NetworkModel(layers, shape)
    assert model.output_shape == (2,)


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ParseError, match="arch.cfg:3"):
        parse_architecture("conv 5\nrelu\nwibble 3\n", "arch.cfg")
    with pytest.raises(ParseError):
        parse_layer("conv 5 3x3 same")
    with pytest.raises(ParseError):
        parse_layer("relu 3")


def test_reference_walk_matches_table():
    layers, shape = parse_architecture(reference_architecture("cad", n_classes=10, extent=64))
    model = ng.NetworkModel(layers, shape)
    pool_outputs = [model.shapes[i] for i, s in enumerate(layers) if s.kind == "maxpool3d"]
    assert pool_outputs == [(5, 32, 32, 32), (5, 16, 16, 16), (5, 8, 8, 8)]
    conv_outputs = [model.shapes[i] for i, s in enumerate(layers) if s.kind == "conv3d"]
    assert conv_outputs[0] == (5, 64, 64, 64)
    assert model.output_shape == (10,)


@pytest.mark.parametrize("name", ["model1", "model2", "model3", "model4", "model5", "model6", "model6-1x3x3"])
def test_reference_models_build(name):
    layers, shape = parse_architecture(reference_architecture(name, extent=32))
    model = ng.NetworkModel(layers, shape)
    assert model.output_shape == (2,)
    if name == "model6-1x3x3":
        assert layers[0].conv.kernel_extents == (1, 3, 3)


def _model():
    layers, _ = parse_architecture(reference_architecture("cad", 3, 16))
    model = ng.build_model(layers, (1, 16, 16, 16), seed=2)
    model.frozen = {0}
    model.meta["classes"] = "a,b,c"
    return model


def test_archive_round_trip(tmp_path):
    model = _model()
    archive.save_model(model, tmp_path / "m")
    back = archive.load_model(tmp_path / "m")
    assert back.layers == model.layers and back.frozen == {0} and back.meta == model.meta
    for i in model.params:
        for role in model.params[i]:
            assert back.params[i][role].tobytes() == model.params[i][role].tobytes()
    x = np.random.default_rng(0).normal(size=(2, 1, 16, 16, 16))
    np.testing.assert_array_equal(ng.forward(model, x)[0], ng.forward(back, x)[0])


def test_archive_is_byte_stable(tmp_path):
    model = _model()
    archive.save_model(model, tmp_path / "a")
    archive.save_model(model, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_archive_integrity_errors(tmp_path):
    archive.save_model(_model(), tmp_path / "m")
    blob = tmp_path / "m" / "layer000_kernels.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(IntegrityError, match="layer000_kernels"):
        archive.load_model(tmp_path / "m")
    archive.save_model(_model(), tmp_path / "m")
    manifest = tmp_path / "m" / "manifest.txt"
    lines = manifest.read_text().splitlines()
    manifest.write_text("\n".join(l for l in lines if not l.startswith("param 1 ")) + "\n")
    with pytest.raises(IntegrityError, match="layer 1"):
        archive.load_model(tmp_path / "m")
    manifest.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ParseError, match="end"):
        archive.load_model(tmp_path / "m")
