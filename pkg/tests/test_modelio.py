"""QPRN file format and shadow sidecar round-trips."""

import numpy as np
import pytest

from qnnprune import engine, modelio, zoo
from qnnprune.errors import FormatError
from qnnprune.network import apply_filter_prune, apply_kernel_prune, validate


@pytest.mark.parametrize("scheme", ["bnn", "xnor", "dorefa2", "binaryconnect"])
def test_round_trip_preserves_forward(tmp_path, scheme, request):
    net = zoo.desk4(scheme, seed=60)
    p = tmp_path / "m.qprn"
    modelio.save_model(net, p)
    loaded = modelio.load_model(p)
    validate(loaded)
    x = np.random.default_rng(60).normal(size=(3, 3, 32, 32)).astype(np.float32)
    ref, _ = engine.run_forward(net, x)
    out, _ = engine.run_forward(loaded, x)
    # quantized layers reload as code values, a fixed point of the
    # quantizer, so inference is unchanged
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_save_load_save_byte_identical(tmp_path):
    net = zoo.desk_residual("xnor", seed=61)
    apply_filter_prune(net, "conv2", [0, 3])
    apply_kernel_prune(net, "conv3", [(1, 2)])
    p1 = tmp_path / "a.qprn"
    modelio.save_model(net, p1)
    loaded = modelio.load_model(p1)
    modelio.load_shadow(loaded, modelio.shadow_path(p1))
    p2 = tmp_path / "b.qprn"
    modelio.save_model(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert modelio.shadow_path(p1).read_bytes() == modelio.shadow_path(p2).read_bytes()


def test_shadow_restores_real_weights(tmp_path):
    net = zoo.desk4("bnn", seed=62)
    original = net.layer("conv2").weight.copy()
    p = tmp_path / "m.qprn"
    modelio.save_model(net, p)
    loaded = modelio.load_model(p)
    codes = loaded.layer("conv2").weight
    assert set(np.unique(codes)) <= {-1.0, 1.0}
    modelio.load_shadow(loaded, modelio.shadow_path(p))
    np.testing.assert_allclose(loaded.layer("conv2").weight, original,
                               atol=1e-7)


def test_masks_and_structure_survive(tmp_path):
    net = zoo.desk_residual("bnn", seed=63)
    apply_filter_prune(net, "conv3", [1, 5])
    p = tmp_path / "m.qprn"
    modelio.save_model(net, p)
    loaded = modelio.load_model(p)
    np.testing.assert_array_equal(loaded.layer("conv3").out_mask,
                                  net.layer("conv3").out_mask)
    np.testing.assert_array_equal(loaded.layer("convd").out_mask,
                                  net.layer("conv3").out_mask)
    np.testing.assert_array_equal(loaded.layer("fc").in_mask,
                                  net.layer("fc").in_mask)
    assert loaded.layer("convd").is_shortcut
    assert loaded.layer("conv2").quantize_input
    assert [l.inputs for l in loaded.layers] == [l.inputs for l in net.layers]


def test_full_precision_payload_bit_exact(tmp_path):
    net = zoo.desk4("bnn", seed=64)
    p = tmp_path / "m.qprn"
    modelio.save_model(net, p)
    loaded = modelio.load_model(p)
    np.testing.assert_array_equal(loaded.layer("conv1").weight,
                                  net.layer("conv1").weight)
    np.testing.assert_array_equal(loaded.layer("bn2").gamma,
                                  net.layer("bn2").gamma)


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "m.qprn"
    p.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(FormatError):
        modelio.load_model(p)


def test_truncated_file_rejected(tmp_path):
    net = zoo.desk4("bnn", seed=65)
    p = tmp_path / "m.qprn"
    modelio.save_model(net, p)
    data = p.read_bytes()
    p.write_bytes(data[:len(data) // 2])
    with pytest.raises(FormatError):
        modelio.load_model(p)


def test_shadow_mismatch_rejected(tmp_path):
    n1 = zoo.desk4("bnn", seed=66)
    n2 = zoo.desk_residual("bnn", seed=66)
    p1, p2 = tmp_path / "a.qprn", tmp_path / "b.qprn"
    modelio.save_model(n1, p1)
    modelio.save_model(n2, p2)
    loaded = modelio.load_model(p1)
    with pytest.raises(FormatError):
        modelio.load_shadow(loaded, modelio.shadow_path(p2))
