import numpy as np
import pytest

from rapforge import diffcore as dc
from rapforge import nets
from rapforge.diffcore import Tensor


def test_classifier_build_is_deterministic():
    a, b = nets.build_classifier("convnet-s", 0), nets.build_classifier("convnet-s", 0)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    c = nets.build_classifier("convnet-s", 1)
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))


@pytest.mark.parametrize("arch", ["convnet-s", "convnet-m"])
def test_classifier_logit_shape(arch):
    clf = nets.build_classifier(arch, 0)
    assert clf(Tensor(np.zeros((3, 1, 28, 28)))).shape == (3, 10)
    assert clf.logits(np.zeros((5, 1, 28, 28))).shape == (5, 10)
    assert clf.predict(np.zeros((5, 1, 28, 28))).shape == (5,)


def test_layer_counts_match_registry_description():
    s = nets.build_classifier("convnet-s", 0)
    m = nets.build_classifier("convnet-m", 0)

    def count(net, kind):
        return sum(isinstance(layer, kind) for layer in net.body.layers)

    assert (count(s, nets.Conv2d), count(s, nets.Linear)) == (2, 2)
    assert (count(m, nets.Conv2d), count(m, nets.Linear)) == (4, 2)
    kernels = {layer.weight.shape[-1] for layer in m.body.layers if isinstance(layer, nets.Conv2d)}
    assert len(kernels) > 1


def test_unknown_architecture():
    with pytest.raises(nets.UnknownArchitectureError):
        nets.build_classifier("resnet-152")
    with pytest.raises(nets.UnknownArchitectureError):
        nets.build_generator("resnet-152")


def test_classifier_rejects_wrong_input_shape():
    with pytest.raises(dc.ShapeError):
        nets.build_classifier("convnet-s", 0)(Tensor(np.zeros((1, 1, 32, 32))))


def test_frozen_classifier_passes_input_gradient_only():
    clf = nets.build_classifier("convnet-s", 0).freeze()
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 28, 28)), requires_grad=True)
    dc.backward(dc.sum(clf(x)))
    assert x.grad is not None and np.abs(x.grad).sum() > 0
    assert all(p.grad is None and not p.requires_grad for p in clf.parameters())


def test_generator_shapes_and_range():
    gen = nets.build_generator("resgen-s", 0)
    out = gen(Tensor(np.random.default_rng(0).uniform(size=(4, 1, 28, 28))))
    assert out.shape == (4, 1, 28, 28)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_generator_block_counts():
    gen = nets.build_generator("resgen-s", 0)
    assert (len(gen.down_blocks), len(gen.res_blocks), len(gen.up_blocks)) == (2, 3, 2)


def test_generator_zero_head_outputs_midpoint():
    gen = nets.build_generator("resgen-s", 0)
    gen.output_head.weight.data[...] = 0.0
    gen.output_head.bias.data[...] = 0.0
    out = gen.generate(np.random.default_rng(1).uniform(size=(3, 1, 28, 28)))
    np.testing.assert_array_equal(out, np.full((3, 1, 28, 28), 0.5))


def test_instance_norm_is_batch_independent():
    gen = nets.build_generator("resgen-s", 0)
    x = np.random.default_rng(2).uniform(size=(4, 1, 28, 28))
    np.testing.assert_allclose(gen.generate(x)[1:2], gen.generate(x[1:2]), atol=1e-12)


def test_weight_roundtrip_is_bit_exact(tmp_path):
    for net in (nets.build_classifier("convnet-m", 3), nets.build_generator("resgen-s", 3)):
        path = tmp_path / "w.rapw"
        nets.save_weights(net, path, extra_meta={"note": "x"})
        back = nets.load_weights(path)
        assert type(back) is type(net)
        for (n1, p1), (n2, p2) in zip(net.named_parameters(), back.named_parameters()):
            assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
        assert nets.read_weight_meta(path)["extra"] == {"note": "x"}


def test_weight_file_bytes_are_deterministic(tmp_path):
    nets.save_weights(nets.build_generator("resgen-s", 5), tmp_path / "a.rapw")
    nets.save_weights(nets.build_generator("resgen-s", 5), tmp_path / "b.rapw")
    assert (tmp_path / "a.rapw").read_bytes() == (tmp_path / "b.rapw").read_bytes()


@pytest.mark.parametrize("offset", [20, 500, -10])
def test_corrupt_payload_byte_is_detected(tmp_path, offset):
    path = tmp_path / "w.rapw"
    nets.save_weights(nets.build_classifier("convnet-s", 0), path)
    blob = bytearray(path.read_bytes())
    blob[offset] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(nets.ChecksumError):
        nets.load_weights(path)


def test_truncated_file_and_bad_magic(tmp_path):
    path = tmp_path / "w.rapw"
    nets.save_weights(nets.build_classifier("convnet-s", 0), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(nets.ChecksumError):
        nets.load_weights(path)
    path.write_bytes(b"NOTAWGHT" + blob[8:])
    with pytest.raises(nets.MagicError):
        nets.load_weights(path)


def test_loading_classifier_into_generator_is_shape_error(tmp_path):
    path = tmp_path / "clf.rapw"
    nets.save_weights(nets.build_classifier("convnet-s", 0), path)
    with pytest.raises(nets.WeightShapeError):
        nets.load_weights(path, into=nets.build_generator("resgen-s", 0))
