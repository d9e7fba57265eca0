import math

import numpy as np
import pytest

from srnnkit.gradcheck import check_gradients, random_instance
from srnnkit.harness import (
    ConvParams,
    DivergenceError,
    LabeledImage,
    ModelConfig,
    TrainConfig,
    bar_orientation_score,
    conv2d_forward,
    evaluate,
    global_avg_pool,
    load_cifar,
    make_synthetic_dataset,
    softmax_cross_entropy,
    split_holdout,
    train,
    write_cifar,
)
from srnnkit.tensor import ImageTensor, ShapeError

TINY = "conv:3:4:1:tanh,sws_birnn:4:4:tanh,gap,fc"


def tiny_model(size=8, classes=2):
    return ModelConfig.parse_layers(TINY, (size, size, 1), classes)


def naive_conv(weight, bias, x, stride):
    c_out, k, _, _ = weight.shape
    h, w, _ = x.shape
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    out = np.zeros((-(-h // stride), -(-w // stride), c_out))
    for j in range(out.shape[0]):
        for i in range(out.shape[1]):
            patch = xp[j * stride : j * stride + k, i * stride : i * stride + k]
            out[j, i] = np.tensordot(weight, patch, axes=([1, 2, 3], [0, 1, 2])) + (0 if bias is None else bias)
    return out


# -- layer pieces --------------------------------------------------------------------


def test_pointwise_identity_conv(rng):
    p = ConvParams(np.eye(3)[:, None, None, :], None, 1, "identity")
    x = rng.normal(size=(4, 5, 3))
    out, _ = conv2d_forward(p, x)
    assert np.array_equal(out, x)


@pytest.mark.parametrize("k, stride, bias", [(1, 1, True), (3, 1, False), (3, 2, True), (5, 2, False)])
def test_conv_matches_naive(rng, k, stride, bias):
    p = ConvParams.init(2, 3, k, rng, stride, "identity", bias)
    if bias:
        p = p.with_arrays({"bias": rng.normal(size=3)})
    x = rng.normal(size=(5, 7, 2))
    out, _ = conv2d_forward(p, x)
    np.testing.assert_allclose(out, naive_conv(p.weight, p.bias, x, stride), rtol=0, atol=1e-12)


def test_conv_even_kernel_rejected():
    with pytest.raises(ShapeError):
        ConvParams(np.zeros((1, 2, 2, 1)))


def test_gap_constant():
    x = np.broadcast_to(np.array([1.5, -2.0]), (3, 4, 2))
    assert global_avg_pool(x).tolist() == [1.5, -2.0]


def test_cross_entropy_uniform():
    loss, grad = softmax_cross_entropy(np.zeros((4, 7)), np.array([0, 1, 2, 6]))
    assert loss == pytest.approx(math.log(7), rel=1e-15)
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-15)


def test_cross_entropy_gradient(rng):
    logits = rng.normal(size=(3, 4))
    labels = np.array([2, 0, 3])
    _, grad = softmax_cross_entropy(logits, labels)
    eps = 1e-6
    for idx in np.ndindex(logits.shape):
        a, b = logits.copy(), logits.copy()
        a[idx] += eps
        b[idx] -= eps
        fd = (softmax_cross_entropy(a, labels)[0] - softmax_cross_entropy(b, labels)[0]) / (2 * eps)
        assert grad[idx] == pytest.approx(fd, abs=1e-8)


@pytest.mark.parametrize("kind", ["conv2d", "fc", "crnn"])
def test_harness_layers_gradcheck(kind):
    rng = np.random.default_rng(7)
    params, x = random_instance(kind, rng)
    assert check_gradients(kind, params, x, rng).max_error < 1e-5


# -- model configuration -------------------------------------------------------------


def test_model_shapes():
    m = ModelConfig.parse_layers("conv:3:8:2:relu,conv:3:16:2:relu,sws_birnn:16:16:tanh,gap,fc", (16, 16, 1), 2)
    assert m.shapes() == [(16, 16, 1), (8, 8, 8), (4, 4, 16), (4, 4, 16), (16,), (2,)]


def test_model_text_roundtrip(tmp_path):
    m = tiny_model()
    (tmp_path / "m.cfg").write_text(m.to_text())
    assert ModelConfig.from_file(tmp_path / "m.cfg") == m


@pytest.mark.parametrize(
    "layers, match",
    [
        ("conv:3:4,gap", "must end with"),
        ("conv:3:4,fc", "layer 1: fc needs a pooled vector"),
        ("gap,conv:3:4,fc", "layer 1: conv needs a spatial input"),
        ("conv:2:4,gap,fc", "layer 0: conv needs odd kernel"),
        ("pool,gap,fc", "layer 0"),
    ],
)
def test_model_chain_errors(layers, match):
    with pytest.raises(ValueError, match=match):
        ModelConfig.parse_layers(layers, (8, 8, 1), 2)


# -- synthetic data -----------------------------------------------------------------


def test_synthetic_balance():
    assert sorted(d.label for d in make_synthetic_dataset(2, 99)) == [0, 1]
    labels = [d.label for d in make_synthetic_dataset(101, 5)]
    assert abs(labels.count(0) - labels.count(1)) == 1


def test_synthetic_deterministic():
    a = make_synthetic_dataset(50, 3)
    b = make_synthetic_dataset(50, 3)
    assert all(x.image.data.tobytes() == y.image.data.tobytes() and x.label == y.label for x, y in zip(a, b))
    c = make_synthetic_dataset(50, 4)
    assert any(x.image.data.tobytes() != y.image.data.tobytes() for x, y in zip(a, c))


def test_synthetic_orientation_statistics():
    data = make_synthetic_dataset(400, 11)
    horizontal = [d for d in data if d.label == 0]
    vertical = [d for d in data if d.label == 1]
    assert bar_orientation_score(horizontal) > 0.02
    assert bar_orientation_score(vertical) < -0.02
    mean0 = np.mean([d.image.data[:, :, 0] for d in horizontal], axis=0)
    # averaging over random bar positions: row means vary less than per-image, columns are flat
    assert mean0.std(axis=1).mean() < 0.05


def test_synthetic_image_format():
    d = make_synthetic_dataset(4, 0)[0]
    assert d.image.shape == (16, 16, 1) and d.image.precision == "single"


# -- CIFAR ---------------------------------------------------------------------------


def test_cifar_empty(tmp_path):
    (tmp_path / "b.bin").write_bytes(b"")
    assert load_cifar(tmp_path / "b.bin") == []


def test_cifar_single_record(tmp_path):
    (tmp_path / "b.bin").write_bytes(bytes([7]) + bytes([255]) * 3072)
    (item,) = load_cifar(tmp_path / "b.bin")
    assert item.label == 7 and item.image.shape == (32, 32, 3) and (item.image.data == 1.0).all()


@pytest.mark.parametrize("variant, n_classes", [("cifar10", 10), ("cifar100", 100)])
def test_cifar_roundtrip(tmp_path, rng, variant, n_classes):
    images = rng.integers(0, 256, (5, 32, 32, 3), dtype=np.uint8)
    labels = rng.integers(0, n_classes, 5)
    write_cifar(tmp_path / "b.bin", images, labels, variant)
    loaded = load_cifar(tmp_path / "b.bin", variant)
    assert [d.label for d in loaded] == labels.tolist()
    for d, img in zip(loaded, images):
        assert np.array_equal(np.rint(d.image.data * 255).astype(np.uint8), img)
    assert len(load_cifar(tmp_path / "b.bin", variant, limit=2)) == 2


def test_cifar_channel_layout(tmp_path):
    raw = bytearray(1 + 3072)
    raw[1 + 1024 * 2 + 5] = 255  # blue plane, row 0, column 5
    (tmp_path / "b.bin").write_bytes(bytes(raw))
    (item,) = load_cifar(tmp_path / "b.bin")
    assert item.image.data[0, 5, 2] == 1.0 and item.image.data.sum() == 1.0


def test_cifar_truncated(tmp_path):
    (tmp_path / "b.bin").write_bytes(bytes(3073 + 100))
    with pytest.raises(ValueError, match="truncated record at byte 3073"):
        load_cifar(tmp_path / "b.bin")


def test_cifar_label_range(tmp_path):
    (tmp_path / "b.bin").write_bytes(bytes(3073) + bytes([10]) + bytes(3072))
    with pytest.raises(ValueError, match="record 1 has label 10"):
        load_cifar(tmp_path / "b.bin", "cifar10")


# -- training ------------------------------------------------------------------------


def test_split_holdout():
    train_set, held = split_holdout(list(range(100)), 0.2, 3)
    assert len(held) == 20 and sorted(train_set + held) == list(range(100))
    assert split_holdout(list(range(100)), 0.2, 3) == (train_set, held)


def test_train_config_file(tmp_path):
    (tmp_path / "t.cfg").write_text("lr=0.1\n# comment\nepochs = 3\n")
    cfg = TrainConfig.from_file(tmp_path / "t.cfg")
    assert (cfg.lr, cfg.epochs, cfg.momentum) == (0.1, 3, 0.9)
    (tmp_path / "bad.cfg").write_text("learning_rate=0.1\n")
    with pytest.raises(ValueError, match="unknown train option"):
        TrainConfig.from_file(tmp_path / "bad.cfg")


def test_zero_learning_rate_keeps_params():
    data = make_synthetic_dataset(20, 0, size=8)
    result = train(tiny_model(), data, TrainConfig(lr=0.0, epochs=3, batch_size=4))
    for a, b in zip(result.params, result.initial_params):
        if a is None:
            continue
        for k, v in a.named_arrays().items():
            assert v.tobytes() == b.named_arrays()[k].tobytes()


def test_overfit_one():
    data = make_synthetic_dataset(2, 3, size=8)[:1]
    cfg = TrainConfig(lr=0.1, momentum=0.9, batch_size=1, epochs=40, holdout=0, precision="double")
    losses = [m.loss for m in train(tiny_model(), data, cfg).history]
    assert all(b < a for a, b in zip(losses[3:], losses[4:]))
    assert losses[-1] < 0.01


def test_training_deterministic():
    data = make_synthetic_dataset(40, 2, size=8)
    cfg = TrainConfig(epochs=2, batch_size=8)
    assert train(tiny_model(), data, cfg).metrics_csv() == train(tiny_model(), data, cfg).metrics_csv()


def test_divergence_guard():
    data = make_synthetic_dataset(8, 2, size=8)
    cfg = TrainConfig(lr=1e30, momentum=0.0, epochs=5, batch_size=4, holdout=0)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError, match=r"epoch \d+, batch \d+"):
        train(ModelConfig.parse_layers("conv:3:4:1:identity,gap,fc", (8, 8, 1), 2), data, cfg)


def test_empty_training_data():
    with pytest.raises(ValueError):
        train(tiny_model(), [], TrainConfig())


# -- evaluation ----------------------------------------------------------------------


def test_memorized_training_set():
    data = make_synthetic_dataset(8, 4, size=8)
    cfg = TrainConfig(lr=0.05, batch_size=2, epochs=60, holdout=0, precision="double")
    result = train(tiny_model(), data, cfg)
    acc, _ = evaluate(tiny_model(), result.params, data)
    assert acc == 1.0


def test_random_labels_chance_level():
    rng = np.random.default_rng(0)
    data = make_synthetic_dataset(2000, 9, size=8)
    shuffled = [LabeledImage(d.image, int(lab)) for d, lab in zip(data, rng.integers(0, 2, len(data)))]
    params = tiny_model().init_params(np.random.default_rng(1))
    acc, _ = evaluate(tiny_model(), params, shuffled)
    assert abs(acc - 0.5) < 3 * math.sqrt(0.25 / len(data))


def test_confusion_rows_are_class_counts():
    data = make_synthetic_dataset(31, 6, size=8)
    params = tiny_model(classes=3).init_params(np.random.default_rng(2))
    data = [LabeledImage(d.image, i % 3) for i, d in enumerate(data)]
    acc, confusion = evaluate(tiny_model(classes=3), params, data)
    assert confusion.sum(axis=1).tolist() == [11, 10, 10]
    assert acc == np.trace(confusion) / 31


def test_predictions_independent_of_batching():
    from srnnkit.harness import predict

    data = make_synthetic_dataset(20, 1, size=8)
    params = tiny_model().init_params(np.random.default_rng(3))
    assert np.array_equal(predict(tiny_model(), params, data, 7), predict(tiny_model(), params, data, 20))
