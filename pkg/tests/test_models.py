import numpy as np
import pytest

from srlab import tensor as T
from srlab.datasets import gen_synthetic_shapes
from srlab.models import (
    AvgPool,
    Conv,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool,
    Model,
    ModelSpec,
    Relu,
    ResBlock,
    SpecError,
    TapPoint,
    TrainConfig,
    WeightBundle,
    build_model,
    equivariant_probe_spec,
    evaluate_accuracy,
    layer_to_string,
    load_weights,
    parse_layer,
    save_weights,
    train,
    validate_spec,
)
from srlab.serialize import FormatError
from srlab.tensor import Tensor
from conftest import desk_spec


def test_parse_layer_round_trip():
    for s in ("conv:8:3:1:1:zeros", "relu", "maxpool:2", "avgpool:3", "gap", "flatten", "linear:10", "resblock:3:circular"):
        layer = parse_layer(s)
        assert parse_layer(layer_to_string(layer)) == layer
    with pytest.raises(SpecError, match="unknown layer kind"):
        parse_layer("dropout:0.5")
    with pytest.raises(SpecError, match="cannot parse"):
        parse_layer("conv:abc")


def test_validate_spec_errors_name_offending_layer():
    spec = ModelSpec(layers=(Conv(4, 3), MaxPool(4)), num_classes=None, input_shape=(1, 8, 8))
    with pytest.raises(SpecError, match="layer 1"):
        validate_spec(spec)
    spec2 = ModelSpec(layers=(Flatten(), Conv(4, 3)), num_classes=None, input_shape=(1, 8, 8))
    with pytest.raises(SpecError, match="layer 1.*spatial"):
        validate_spec(spec2)
    spec3 = ModelSpec(layers=(Dense(4),), num_classes=4, input_shape=(1, 8, 8))
    with pytest.raises(SpecError, match="flat input"):
        validate_spec(spec3)


def test_num_classes_mismatch():
    spec = ModelSpec(layers=(Flatten(), Dense(3)), num_classes=5, input_shape=(1, 4, 4))
    with pytest.raises(SpecError, match="num_classes"):
        validate_spec(spec)


def test_degenerate_spec_is_logistic_regression():
    spec = ModelSpec(layers=(Flatten(), Dense(3)), num_classes=3, input_shape=(1, 4, 4))
    m = build_model(spec, seed=1)
    x = np.random.default_rng(0).random((2, 1, 4, 4))
    out = m.forward(Tensor(x))
    manual = x.reshape(2, -1) @ m.params["layer1.weight"].data.T + m.params["layer1.bias"].data
    assert np.array_equal(out.data, manual)


def test_tap_split_is_bit_exact():
    m = build_model(desk_spec(), seed=3)
    x = Tensor(np.random.default_rng(1).random((2, 1, 32, 32)))
    full = m.forward(x).data
    for tap in m.spec.taps:
        h = m.forward_to_tap(x, tap)
        assert np.array_equal(m.forward_from_tap(h, tap).data, full)


def test_cumulative_stride_arithmetic():
    m = build_model(desk_spec(), seed=0)
    assert m.spec.tap("block1").cumulative_stride == 2
    assert m.spec.tap("block2").cumulative_stride == 4
    with pytest.raises(SpecError, match="not defined"):
        m.spec.tap("missing")


def test_tap_validation():
    spec = ModelSpec(
        layers=(Flatten(), Dense(2)), num_classes=2, input_shape=(1, 2, 2),
        taps=(TapPoint("bad", 1),),
    )
    with pytest.raises(SpecError, match="not spatial"):
        validate_spec(spec)


def test_resblock_forward_and_gradient():
    spec = ModelSpec(
        layers=(Conv(4, 3, 1, 1), Relu(), ResBlock(3), GlobalAvgPool(), Dense(2)),
        num_classes=2,
        input_shape=(1, 8, 8),
        taps=(TapPoint("block", 3),),
    )
    m = build_model(spec, seed=2)
    assert m.spec.tap("block").cumulative_stride == 1
    x = Tensor(np.random.default_rng(3).random((1, 1, 8, 8)), requires_grad=True)
    loss = T.cross_entropy(m.forward(x), np.array([1]))
    g = T.backward(loss)[x].data
    num = T.finite_diff_gradient(lambda t: T.cross_entropy(m.forward(t), np.array([1])), x)
    assert T.grad_rel_error(g, num) < 1e-4


def test_untrained_model_is_chance_level():
    X, y = gen_synthetic_shapes(400, noise=0.1, seed=9)
    m = build_model(desk_spec(), seed=7)
    acc = evaluate_accuracy(m, X, y)
    assert abs(acc - 0.25) <= 0.05


def test_training_reaches_95_percent_in_5_epochs():
    Xtr, ytr = gen_synthetic_shapes(1000, noise=0.05, seed=20)
    Xte, yte = gen_synthetic_shapes(200, noise=0.05, seed=21)
    m = build_model(desk_spec(), seed=0)
    bundle = train(m, (Xtr, ytr), TrainConfig(lr=0.05, epochs=5, batch=64, seed=0), val=(Xte, yte))
    assert bundle.meta["final_val_accuracy"] >= 0.95
    assert len(bundle.meta["loss_curve"]) == 5


def test_training_is_bit_reproducible():
    X, y = gen_synthetic_shapes(200, noise=0.2, seed=30)
    spec = ModelSpec(
        layers=(Conv(4, 3, 1, 1), Relu(), AvgPool(4), Flatten(), Dense(4)),
        num_classes=4, input_shape=(1, 32, 32),
    )
    bundles = []
    for _ in range(2):
        m = build_model(spec, seed=5)
        bundles.append(train(m, (X, y), TrainConfig(lr=0.05, epochs=2, batch=32, seed=5)))
    assert bundles[0] == bundles[1]
    assert bundles[0].meta["loss_curve"] == bundles[1].meta["loss_curve"]


def test_label_out_of_range_rejected():
    X = np.zeros((4, 1, 32, 32))
    y = np.array([0, 1, 2, 4])
    m = build_model(desk_spec(), seed=0)
    with pytest.raises(ValueError, match="labels"):
        train(m, (X, y), TrainConfig(epochs=1))


def test_weight_bundle_round_trip(tmp_path):
    m = build_model(desk_spec(), seed=11)
    bundle = m.get_bundle({"seed": 11, "note": "round trip"})
    path = tmp_path / "w.srw"
    save_weights(bundle, path)
    loaded = load_weights(path)
    assert loaded == bundle


def test_weight_bundle_shape_mismatch_names_parameter(tmp_path):
    m = build_model(desk_spec(), seed=0)
    bundle = m.get_bundle()
    bundle.tensors["layer0.weight"] = np.zeros((2, 2))
    path = tmp_path / "w.srw"
    save_weights(bundle, path)
    m2 = build_model(desk_spec(), seed=1)
    with pytest.raises(FormatError, match="layer0.weight"):
        m2.set_bundle(load_weights(path))
    bundle2 = m.get_bundle()
    del bundle2.tensors["layer0.bias"]
    with pytest.raises(FormatError, match="layer0.bias"):
        m2.set_bundle(bundle2)


def test_truncated_weight_file_is_integrity_error(tmp_path):
    m = build_model(desk_spec(), seed=0)
    path = tmp_path / "w.srw"
    save_weights(m.get_bundle(), path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError):
        load_weights(path)
    path.write_bytes(blob[:-1] + bytes([blob[-1] ^ 0xFF]))
    with pytest.raises(FormatError, match="checksum"):
        load_weights(path)


def test_equivariant_probe_is_exactly_equivariant_at_every_tap():
    probe = build_model(equivariant_probe_spec(num_classes=4), seed=3)
    x = np.random.default_rng(4).random((1, 1, 16, 16))
    for tap in probe.spec.taps:
        f0 = probe.forward_to_tap(Tensor(x), tap).data
        fs = probe.forward_to_tap(Tensor(np.roll(x, (2, 3), axis=(2, 3))), tap).data
        assert np.array_equal(fs, np.roll(f0, (2, 3), axis=(2, 3)))
