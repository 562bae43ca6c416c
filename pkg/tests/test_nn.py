import numpy as np
import pytest

from gradcheck import assert_close, numeric_grad
from stairnet.nn import (BatchNorm2d, Conv2d, GlobalAvgPool, GroupSpec, Linear, NetworkSpec, ReLU,
                         ResNet, StateError, cross_entropy, load_checkpoint, save_checkpoint,
                         sgd_step, softmax)
from stairnet.nn.data import (BatchStream, DataError, Dataset, load_cifar10, load_raw,
                              make_synthetic, read_cifar_batch, save_raw)
from stairnet.nn.network import ResidualBlock
from stairnet.nn.optim import StepSchedule
from stairnet.nn.train import DivergenceError, TrainConfig, evaluate, train
from stairnet.tensor import Rng, ShapeError

F64 = np.float64


def tiny_spec(hw=6, widths=None, classes=3, blocks=(1, 1)):
    groups = (GroupSpec(blocks[0], 4, 1), GroupSpec(blocks[1], 6, 2))
    teacher = tuple(g.width for g in groups for _ in range(g.blocks))
    return NetworkSpec((2, hw, hw), classes, 4, groups, widths or teacher)


# -- forward examples --------------------------------------------------------

def test_zero_weight_linear_gives_zero_logits(rng):
    fc = Linear(5, 4)
    assert not fc.forward(rng.standard_normal((3, 5)).astype(np.float32)).any()


def test_zero_weight_network_gives_zero_logits(rng):
    net = ResNet(tiny_spec())
    logits, acts = net.forward(rng.standard_normal((2, 2, 6, 6)), training=False)
    assert logits.shape == (2, 3) and not logits.any()
    assert len(acts) == 2


def test_conv1x1_permutation_is_identity(rng):
    conv = Conv2d(3, 3, ksize=1)
    conv.params["weight"][...] = np.eye(3)[[2, 0, 1]][:, :, None, None]
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(conv.forward(x), x[:, [2, 0, 1]])
    conv.params["weight"][...] = np.eye(3)[:, :, None, None]
    np.testing.assert_array_equal(conv.forward(x), x)


def test_conv3x3_all_ones_sum():
    conv = Conv2d(1, 1, ksize=3, pad=0)
    conv.params["weight"][...] = 1
    x = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
    assert conv.forward(x).item() == 45


def test_forward_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        ResNet(tiny_spec()).forward(rng.standard_normal((1, 2, 5, 6)))
    with pytest.raises(ShapeError):
        Conv2d(3, 2).forward(np.zeros((1, 2, 4, 4), np.float32))


# -- backward examples -------------------------------------------------------

def test_zero_upstream_gives_zero_grads(rng):
    net = ResNet(tiny_spec(), Rng(0), F64)
    logits, _ = net.forward(rng.standard_normal((2, 2, 6, 6)))
    net.zero_grad()
    net.backward(np.zeros_like(logits))
    for name, _, g in net.parameters():
        assert not g.any(), name


def test_scalar_chain_rule():
    fc = Linear(1, 1, dtype=F64)
    fc.params["weight"][...] = 3.0
    fc.forward(np.array([[2.0]]))
    fc.backward(np.array([[1.0]]))
    assert fc.grads["weight"].item() == 2.0


def test_backward_without_forward():
    with pytest.raises(StateError):
        Conv2d(1, 1).backward(np.zeros((1, 1, 2, 2), np.float32))
    with pytest.raises(StateError):
        ResNet(tiny_spec()).backward(np.zeros((1, 3)))
    net = ResNet(tiny_spec())
    net.forward(np.zeros((1, 2, 6, 6)), training=False)
    with pytest.raises(StateError):
        net.backward(np.zeros((1, 3)))


# -- finite-difference gradient suite (64-bit) -------------------------------

def _check_layer(layer, x, rng, training=True):
    y = layer.forward(x, training)
    r = rng.standard_normal(y.shape)
    loss = lambda: float((layer.forward(x, training) * r).sum())
    layer.zero_grad()
    layer.forward(x, training)
    dx = layer.backward(r)
    assert_close(dx, numeric_grad(loss, x), f"{layer.kind} input")
    for name, p in layer.params.items():
        layer.zero_grad()
        layer.forward(x, training)
        layer.backward(r)
        g = layer.grads[name].copy()
        assert_close(g, numeric_grad(loss, p), f"{layer.kind} {name}")


@pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (1, 1), (1, 2)])
def test_gradcheck_conv(rng, k, stride):
    layer = Conv2d(3, 4, k, stride, rng=Rng(1), dtype=F64)
    _check_layer(layer, rng.standard_normal((2, 3, 5, 5)), rng)


def test_gradcheck_batchnorm(rng):
    layer = BatchNorm2d(3, dtype=F64)
    layer.params["gamma"][...] = rng.uniform(0.5, 1.5, 3)
    layer.params["beta"][...] = rng.standard_normal(3)
    _check_layer(layer, rng.standard_normal((4, 3, 3, 3)), rng)


def test_gradcheck_relu(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    _check_layer(ReLU(), x, rng)


def test_gradcheck_pool_and_linear(rng):
    _check_layer(GlobalAvgPool(), rng.standard_normal((2, 3, 4, 4)), rng)
    _check_layer(Linear(5, 3, rng=Rng(2), dtype=F64), rng.standard_normal((4, 5)), rng)


def test_gradcheck_cross_entropy(rng):
    logits = rng.standard_normal((5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    _, g = cross_entropy(logits, labels, return_grad=True)
    assert_close(g, numeric_grad(lambda: cross_entropy(logits, labels), logits), "cross-entropy")


def test_gradcheck_network(rng):
    spec = tiny_spec(hw=5, widths=(3, 4))
    net = ResNet(spec, Rng(3), F64)
    net.blocks[1].mask[2] = 0
    x = rng.standard_normal((3, 2, 5, 5))
    labels = np.array([0, 2, 1])
    ra = [rng.standard_normal(a.shape) for a in net.forward(x)[1]]

    def loss():
        logits, acts = net.forward(x, training=True)
        net._forwarded = False
        return cross_entropy(logits, labels) + sum(float((a * r).sum()) for a, r in zip(acts, ra))

    net.zero_grad()
    logits, _ = net.forward(x)
    _, dl = cross_entropy(logits, labels, return_grad=True)
    dx = net.backward(dl, ra)
    analytic = {n: g.copy() for n, _, g in net.parameters()}
    assert_close(dx, numeric_grad(loss, x), "network input")
    for name, p, _ in net.parameters():
        assert_close(analytic[name], numeric_grad(loss, p), name)


def test_activation_grad_matches_mask_derivative(rng):
    # C = m_c * relu(...), so dL/dm_c = sum over n, i, j of C * dL/dC for a live channel
    net = ResNet(tiny_spec(hw=5), Rng(4), F64)
    x = rng.standard_normal((3, 2, 5, 5))
    labels = np.array([0, 2, 1])

    def loss():
        logits, _ = net.forward(x)
        net._forwarded = False
        return cross_entropy(logits, labels)

    logits, _ = net.forward(x)
    _, dl = cross_entropy(logits, labels, return_grad=True)
    net.backward(dl)
    analytic = [(b.activation * b.activation_grad).sum(axis=(0, 2, 3)) for b in net.blocks]
    for a, blk in zip(analytic, net.blocks):
        assert_close(a, numeric_grad(loss, blk.mask), "mask")


# -- cross-entropy -------------------------------------------------------------

def test_cross_entropy_examples():
    assert cross_entropy(np.zeros((1, 2)), np.array([0])) == pytest.approx(np.log(2), abs=1e-12)
    assert cross_entropy(np.array([[1000.0, 0.0]]), np.array([0])) == pytest.approx(0, abs=1e-12)
    assert cross_entropy(np.array([[1.0, 2.0, 3.0]]), np.array([2])) == pytest.approx(0.40761, abs=1e-5)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([-1, 0]))


def test_softmax_sums_to_one(rng):
    p = softmax(rng.standard_normal((50, 10)) * 30)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)


# -- optimiser -----------------------------------------------------------------

def _step(w, g, lr, m, wd, v=0.0):
    w, g, v = np.array([w]), np.array([g]), np.array([v])
    sgd_step(w, g, v, lr, m, wd)
    return w[0]


def test_sgd_examples():
    assert _step(1.0, 0.0, 0.1, 0.9, 0.0) == 1.0
    assert _step(1.0, 0.1, 0.1, 0.0, 0.0) == pytest.approx(0.99, abs=1e-12)
    assert _step(1.0, 0.1, 0.1, 0.0, 0.0005) == pytest.approx(0.98995, abs=1e-12)


def test_sgd_momentum_accumulates():
    w, g, v = np.array([0.0]), np.array([1.0]), np.array([0.0])
    sgd_step(w, g, v, 1.0, 0.5)
    sgd_step(w, g, v, 1.0, 0.5)
    assert v[0] == 1.5 and w[0] == -2.5


def test_schedule_and_config_validation():
    s = StepSchedule(0.1, 5, (60, 120, 180))
    assert [s.at(e) for e in (0, 59, 60, 120, 199)] == pytest.approx([0.1, 0.1, 0.02, 0.004, 0.0008])
    assert s.lowest == pytest.approx(0.0008)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)


# -- batch-norm and residual structure ----------------------------------------

def test_batchnorm_inference_identity(rng):
    bn = BatchNorm2d(3, dtype=F64)
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(bn.forward(x, training=False), x / np.sqrt(1 + 1e-5), rtol=1e-12)
    bn.eps = 0.0
    np.testing.assert_array_equal(bn.forward(x, training=False), x)


def test_batchnorm_running_stats(rng):
    bn = BatchNorm2d(2, dtype=F64)
    x = rng.standard_normal((4, 2, 3, 3)) * 2 + 1
    bn.forward(x)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * mean)
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * var)


@pytest.mark.parametrize("training", [True, False])
def test_zero_conv_block_is_identity(rng, training):
    spec = tiny_spec()
    blk = ResidualBlock(spec.blocks()[0], None, F64)  # rng=None: zero conv weights
    assert blk.shortcut is None
    x = rng.standard_normal((2, 4, 6, 6))
    np.testing.assert_allclose(blk.forward(x, training), x, atol=1e-12)


def test_projection_used_when_shapes_change():
    blocks = tiny_spec().blocks()
    assert not blocks[0].projection and blocks[1].projection
    assert blocks[1].out_hw == (3, 3)


# -- network spec ----------------------------------------------------------------

def _count_params(net):
    return sum(p.size for _, p, _ in net.parameters())


@pytest.mark.parametrize("depth,k", [(10, 1), (16, 1), (10, 2)])
def test_param_count_matches_built_network(depth, k):
    spec = NetworkSpec.wide_resnet(depth, k, (3, 8, 8))
    assert spec.param_count() == _count_params(ResNet(spec))
    snapped = spec.with_widths([max(1, w // 3) for w in spec.widths])
    assert snapped.param_count() == _count_params(ResNet(snapped))


def test_mac_count_two_block_fixture():
    # input 2x6x6, stem 4; block0 4->4->4 stride 1; block1 4->6->6 stride 2 (+1x1 projection)
    spec = tiny_spec()
    stem = 4 * 2 * 9 * 36
    b0 = 4 * 4 * 9 * 36 + 4 * 4 * 9 * 36
    b1 = 6 * 4 * 9 * 9 + 6 * 6 * 9 * 9 + 6 * 4 * 9
    fc = 6 * 3
    assert spec.mac_count() == stem + b0 + b1 + fc


def test_spec_validation_and_round_trip():
    spec = NetworkSpec.wide_resnet(16, 2, (3, 32, 32))
    assert spec.widths == (32, 32, 64, 64, 128, 128)
    assert spec.attention_points == (1, 3, 5)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    assert spec.digest() == NetworkSpec.from_dict(spec.to_dict()).digest()
    with pytest.raises(ValueError):
        spec.with_widths((0, 32, 64, 64, 128, 128))
    with pytest.raises(ValueError):
        NetworkSpec.wide_resnet(12)
    with pytest.raises(ValueError):
        NetworkSpec((3, 8, 8), 10, 16, spec.groups, spec.widths, (0, 1, 2))


def test_live_param_count_and_compact(rng):
    spec = tiny_spec(widths=(4, 6))
    net = ResNet(spec, Rng(5), F64)
    x = rng.standard_normal((4, 2, 6, 6))
    net.forward(x)  # populate batch-norm statistics
    net.blocks[0].mask[[1, 3]] = 0
    net.blocks[1].mask[0] = 0
    small = net.compact()
    assert small.spec.widths == (2, 5)
    assert net.live_param_count() == small.spec.param_count()
    np.testing.assert_allclose(small.forward(x, False)[0], net.forward(x, False)[0], atol=1e-10)


def test_masked_channel_gets_no_gradient(rng):
    net = ResNet(tiny_spec(), Rng(0), F64)
    net.blocks[0].mask[1] = 0
    logits, _ = net.forward(rng.standard_normal((2, 2, 6, 6)))
    _, dl = cross_entropy(logits, np.array([0, 1]), return_grad=True)
    net.zero_grad()
    net.backward(dl)
    assert not net.blocks[0].conv1.grads["weight"][1].any()
    assert not net.blocks[0].conv2.grads["weight"][:, 1].any()


# -- training ----------------------------------------------------------------------

def _separable(n=64, seed=0):
    g = np.random.default_rng(seed)
    y = g.integers(0, 2, n)
    x = g.standard_normal((n, 2, 6, 6)).astype(np.float32) * 0.3
    x[:, 0] += np.where(y == 1, 1.0, -1.0)[:, None, None]
    return Dataset(x, y, x[:16], y[:16], "separable")


def _tiny_net(seed=0, classes=2):
    spec = tiny_spec(classes=classes)
    return ResNet(spec, Rng(seed).child("init"))


def test_train_reaches_zero_error_on_separable_data():
    data = _separable()
    net = _tiny_net()
    cfg = TrainConfig(epochs=15, batch_size=16, lr=0.05, lr_milestones=(), augment=False)
    result = train(net, data, cfg)
    assert result.metrics[-1]["train_err"] == 0.0
    assert evaluate(net, data.x_train, data.y_train)[1] == 0.0


def test_zero_epochs_leaves_initialisation():
    net = _tiny_net()
    before = {k: v.copy() for k, v in net.state().items()}
    result = train(net, _separable(), TrainConfig(epochs=0))
    assert result.metrics == []
    for k, v in net.state().items():
        np.testing.assert_array_equal(v, before[k])


def test_training_is_bitwise_deterministic():
    cfg = TrainConfig(epochs=2, batch_size=16, lr=0.05, augment=True, crop_pad=1)
    a, b = _tiny_net(), _tiny_net()
    train(a, _separable(), cfg)
    train(b, _separable(), cfg)
    for k, v in a.state().items():
        assert v.tobytes() == b.state()[k].tobytes(), k


def test_divergence_is_reported():
    net = _tiny_net()
    net.fc.params["weight"][...] = np.nan
    with pytest.raises(DivergenceError):
        train(net, _separable(), TrainConfig(epochs=1, batch_size=16, lr=0.1))


def test_checkpoint_round_trip(tmp_path, rng):
    net = _tiny_net(3)
    train(net, _separable(), TrainConfig(epochs=1, batch_size=16, lr=0.05))
    save_checkpoint(tmp_path / "ck", net, config={"a": 1}, epoch=1)
    back, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["epoch"] == 1 and manifest["config"] == {"a": 1}
    x = rng.standard_normal((5, 2, 6, 6)).astype(np.float32)
    np.testing.assert_array_equal(back.forward(x, False)[0], net.forward(x, False)[0])


# -- data ----------------------------------------------------------------------------

def test_cifar_binary_reader(tmp_path):
    g = np.random.default_rng(0)
    rec = np.zeros((4, 3073), np.uint8)
    rec[:, 0] = [3, 1, 4, 1]
    rec[:, 1:] = g.integers(0, 256, (4, 3072))
    for i in range(1, 3):
        rec.tofile(tmp_path / f"data_batch_{i}.bin")
    rec.tofile(tmp_path / "test_batch.bin")
    x, y = read_cifar_batch(tmp_path / "test_batch.bin")
    assert x.shape == (4, 3, 32, 32) and y.tolist() == [3, 1, 4, 1]
    assert x[2, 1, 0, 5] == pytest.approx(rec[2, 1 + 1024 + 5] / 255.0)
    ds = load_cifar10(tmp_path)
    assert len(ds.x_train) == 8 and len(ds.x_test) == 4
    (tmp_path / "bad.bin").write_bytes(b"\x00" * 100)
    with pytest.raises(DataError):
        read_cifar_batch(tmp_path / "bad.bin")
    with pytest.raises(DataError):
        load_cifar10(tmp_path / "nowhere")


def test_raw_format_round_trip(tmp_path):
    ds = make_synthetic(20, 10, shape=(3, 8, 8))
    save_raw(tmp_path / "train.bin", ds.x_train, ds.y_train)
    save_raw(tmp_path / "test.bin", ds.x_test, ds.y_test)
    back = load_raw(tmp_path / "train.bin", tmp_path / "test.bin")
    np.testing.assert_array_equal(back.x_train, ds.x_train)
    np.testing.assert_array_equal(back.y_test, ds.y_test)


def test_synthetic_is_deterministic():
    a, b = make_synthetic(30, 10, seed=4), make_synthetic(30, 10, seed=4)
    np.testing.assert_array_equal(a.x_train, b.x_train)
    assert set(np.unique(a.y_train)) <= set(range(10))
    assert not np.array_equal(a.x_train, make_synthetic(30, 10, seed=5).x_train)


def test_batch_stream_covers_each_epoch_once():
    x = np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1)
    stream = BatchStream(x, np.arange(10), 4, Rng(0))
    seen = np.concatenate([xb.ravel() for xb, _ in stream.epoch_batches()])
    assert sorted(seen.tolist()) == list(range(10))
    second = np.concatenate([xb.ravel() for xb, _ in stream.epoch_batches()])
    assert sorted(second.tolist()) == list(range(10))
    assert not np.array_equal(seen, second)
