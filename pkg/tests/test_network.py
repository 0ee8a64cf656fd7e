import numpy as np
import pytest
from conftest import small_cnn

from tdc_detector.core import DataError, NonFiniteError, ShapeError, TapeError
from tdc_detector.layers import (
    BGRU,
    GELU,
    Conv1D,
    Conv2D,
    Dropout,
    FullyConnected,
    MaxPool2D,
    ReLU,
    Softmax,
    make_layer,
)
from tdc_detector.network import (
    Network,
    accuracy,
    check_gradients,
    cross_entropy,
    load_checkpoint,
    save_checkpoint,
    train,
)

TOL = 1e-3


def _check(layers, x, labels=None, seed=0):
    net = Network(layers, seed=seed)
    return check_gradients(net, x, h=1e-5, labels=labels, include_input=True)


@pytest.mark.parametrize("seed", range(20))
def test_fc_softmax_cross_entropy_gradients(seed):
    rng = np.random.default_rng(seed)
    layers = [FullyConnected(6, 4, rng=rng), Softmax()]
    x = rng.standard_normal((3, 6))
    labels = rng.integers(0, 4, size=3)
    assert _check(layers, x, labels) < TOL


@pytest.mark.parametrize("seed", range(20))
def test_conv2d_pool_gradients(seed):
    rng = np.random.default_rng(seed)
    layers = [Conv2D(2, 3, 3, rng=rng), MaxPool2D(2), FullyConnected(3 * 2 * 2, 3, rng=rng)]
    x = rng.standard_normal((2, 2, 6, 6))
    assert _check(layers, x) < TOL


@pytest.mark.parametrize("seed", range(20))
def test_conv1d_gelu_gradients(seed):
    rng = np.random.default_rng(seed)
    layers = [Conv1D(3, 4, 3, rng=rng), GELU(), FullyConnected(4, 2, per_step=True, rng=rng)]
    x = rng.standard_normal((2, 3, 9))
    assert _check(layers, x) < TOL


@pytest.mark.parametrize("return_sequence", [True, False])
@pytest.mark.parametrize("seed", range(20))
def test_bgru_gradients(seed, return_sequence):
    rng = np.random.default_rng(seed)
    layers = [BGRU(3, 4, return_sequence=return_sequence, rng=rng)]
    x = rng.standard_normal((2, 5, 3))
    assert _check(layers, x) < TOL


@pytest.mark.parametrize("seed", range(20))
def test_relu_gradient_away_from_kink(seed):
    rng = np.random.default_rng(seed)
    x = rng.choice([-1.0, 1.0], size=(3, 5)) * rng.uniform(0.1, 1.0, size=(3, 5))
    layers = [ReLU(), FullyConnected(5, 2, rng=rng)]
    assert _check(layers, x) < TOL


@pytest.mark.parametrize("seed", range(5))
def test_bgru_reversed_input_swaps_directions(seed):
    rng = np.random.default_rng(seed)
    layer = BGRU(3, 4, return_sequence=True, rng=rng)
    for name in ("W", "U", "b"):
        layer.params[f"{name}_b"] = layer.params[f"{name}_f"].copy()
    x = rng.standard_normal((2, 7, 3))
    seq, _ = layer.forward(x)
    rev, _ = layer.forward(x[:, ::-1])
    np.testing.assert_allclose(rev[:, :, :4], seq[:, ::-1, 4:], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(rev[:, :, 4:], seq[:, ::-1, :4], rtol=1e-12, atol=1e-14)


def test_conv1d_output_is_sequence_major(rng):
    out = Network([Conv1D(3, 8, 7, rng=rng)]).forward(rng.standard_normal((2, 3, 256)))
    assert out.shape == (2, 250, 8)


def test_bgru_final_state_concatenation(rng):
    layer = BGRU(3, 4, return_sequence=True, rng=rng)
    x = rng.standard_normal((2, 6, 3))
    seq, _ = layer.forward(x)
    layer.return_sequence = False
    last, _ = layer.forward(x)
    np.testing.assert_allclose(last[:, :4], seq[:, -1, :4])
    np.testing.assert_allclose(last[:, 4:], seq[:, 0, 4:])


def test_dropout_identity_at_inference(rng):
    x = rng.standard_normal((4, 10))
    out, _ = Dropout(0.5).forward(x, training=False)
    np.testing.assert_array_equal(out, x)
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_shape_errors(rng):
    with pytest.raises(ShapeError):
        Conv2D(1, 2, 3, rng=rng).forward(np.zeros((1, 2, 8, 8)))
    with pytest.raises(ShapeError):
        FullyConnected(5, 2, rng=rng).forward(np.zeros((1, 4)))


def test_backward_without_tape():
    net = small_cnn()
    with pytest.raises(TapeError):
        net.backward(np.zeros((1, 10)))


def test_non_finite_output_names_layer():
    net = Network([FullyConnected(2, 2), Softmax()])
    net.layers[0].params["W"][:] = np.nan
    with pytest.raises(NonFiniteError, match="layer 0"):
        net.forward(np.ones((1, 2)))


def test_cross_entropy_clips_zero_probability():
    probs = np.array([[1.0, 0.0]])
    loss, grad = cross_entropy(probs, np.array([1]))
    assert np.isfinite(loss)
    assert loss == pytest.approx(-np.log(1e-12))
    assert np.all(np.isfinite(grad))


def test_frozen_layers_get_zero_gradients(rng):
    net = Network([FullyConnected(3, 3, rng=rng), FullyConnected(3, 2, rng=rng), Softmax()])
    net.layers[0].frozen = True
    probs = net.forward(rng.standard_normal((2, 3)), record=True)
    grads = net.backward(cross_entropy(probs, np.array([0, 1]))[1])
    assert all(np.all(g == 0) for g in grads.params[0].values())
    assert any(np.any(g != 0) for g in grads.params[1].values())


def test_zero_learning_rate_leaves_parameters_unchanged(digits):
    net = small_cnn()
    before = [{k: v.copy() for k, v in p.items()} for p in net.parameters]
    train(net, digits.x[:40], digits.y[:40], epochs=1, lr=0.0)
    for old, new in zip(before, net.parameters):
        for name in old:
            np.testing.assert_array_equal(old[name], new[name])


def test_training_errors(digits):
    net = small_cnn()
    with pytest.raises(ValueError):
        train(net, digits.x[:8], digits.y[:8], lr=-1e-3)
    with pytest.raises(DataError):
        train(net, digits.x[:0], digits.y[:0])
    with pytest.raises(DataError):
        train(net, digits.x[:8], digits.y[:7])
    with pytest.raises(ValueError):
        train(net, digits.x[:8], np.full(8, 10))


def test_training_is_deterministic_and_learns(digits):
    a, b = small_cnn(3), small_cnn(3)
    ra = train(a, digits.x, digits.y, epochs=3, lr=5e-3, seed=4)
    rb = train(b, digits.x, digits.y, epochs=3, lr=5e-3, seed=4)
    assert ra.losses == rb.losses
    assert ra.losses[-1] < ra.losses[0]
    assert accuracy(a, digits.x, digits.y) > 0.5


def test_balanced_sampler_runs(digits):
    net = small_cnn()
    result = train(net, digits.x[:50], digits.y[:50], epochs=1, sampler="balanced")
    assert len(result.losses) == 1
    with pytest.raises(ValueError):
        train(net, digits.x[:50], digits.y[:50], epochs=1, sampler="bogus")


def test_check_gradients_parameter_limit():
    net = Network([FullyConnected(200, 100)])
    with pytest.raises(ValueError):
        check_gradients(net, np.zeros((1, 200)))


def test_checkpoint_round_trip(tmp_path, rng):
    layers = [
        Conv1D(3, 4, 5, rng=rng),
        FullyConnected(4, 6, per_step=True, rng=rng),
        BGRU(6, 3, return_sequence=False, rng=rng),
        GELU(),
        Dropout(0.25),
        FullyConnected(6, 4, rng=rng),
        Softmax(),
    ]
    net = Network(layers, seed=17)
    net.layers[1].frozen = True
    path = tmp_path / "net.scnn"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)

    assert path.read_bytes()[:4] == b"SCNN"
    assert loaded.seed == 17
    assert [layer.kind for layer in loaded.layers] == [layer.kind for layer in net.layers]
    assert loaded.layers[1].frozen and loaded.layers[1].per_step
    assert loaded.layers[2].return_sequence is False
    assert loaded.layers[4].rate == pytest.approx(0.25)

    x = rng.standard_normal((2, 3, 12))
    np.testing.assert_allclose(loaded.forward(x), net.forward(x), atol=1e-5)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.scnn"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_make_layer_builds_parameterless_kinds():
    from tdc_detector.core import LayerKind

    assert isinstance(make_layer(LayerKind.ReLU), ReLU)
    pool = make_layer(LayerKind.MaxPool2D, {"kernel": 3})
    assert pool.kernel == 3
