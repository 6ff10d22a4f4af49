import numpy as np
import pytest

from pyintersect.encoder import GRID_SHAPE
from pyintersect.network import (PARAMETER_COUNT, PARAM_NAMES, DenseParams, InputShapeError, NetworkParams,
                                 RmsPropState, StaleCacheError, backward, conv_forward, forward, gradient_check,
                                 leaky_relu, leaky_relu_grad, q_values, rmsprop_update)


def _random_net(seed: int = 0) -> NetworkParams:
    return NetworkParams.random(np.random.default_rng(seed))


def test_01_parameter_count():
    """Test the network's size and output shapes."""
    params = _random_net()
    assert PARAMETER_COUNT == 118589
    assert params.parameter_count == 118589
    assert tuple(params.arrays()) == PARAM_NAMES
    rng = np.random.default_rng(1)
    q, _ = forward(rng.random(GRID_SHAPE), params)
    assert q.shape == (5,)
    q, _ = forward(rng.random((4,) + GRID_SHAPE), params)
    assert q.shape == (4, 5)


def test_02_batch_matches_single():
    """Test that a batch gives the same Q-values as its inputs one at a time."""
    params = _random_net()
    x = np.random.default_rng(2).random((3,) + GRID_SHAPE)
    batch = q_values(params, x)
    for i in range(3):
        assert np.allclose(q_values(params, x[i]), batch[i])


def test_03_input_shape():
    """Test that inputs of the wrong shape are rejected."""
    params = _random_net()
    with pytest.raises(InputShapeError):
        forward(np.zeros((18, 26)), params)
    with pytest.raises(InputShapeError):
        forward(np.zeros((2, 26, 18, 3)), params)
    with pytest.raises(InputShapeError):
        NetworkParams(**{**params.arrays(), "out_b": np.zeros(4)})


def test_04_conv_forward():
    """Test the strided convolution against a direct loop."""
    rng = np.random.default_rng(3)
    x = rng.random((2, 9, 10, 3))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out, _ = conv_forward(x, w, b, 2)
    assert out.shape == (2, 4, 4, 4)
    for n in range(2):
        for i in range(4):
            for j in range(4):
                window = x[n, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                for f in range(4):
                    expected = np.sum(window * w[f].transpose(1, 2, 0)) + b[f]
                    assert out[n, i, j, f] == pytest.approx(expected)


def test_05_gradient_check():
    """Test the convolutional network's analytic gradients against finite differences."""
    params = _random_net(4)
    rng = np.random.default_rng(5)
    x = rng.random((2,) + GRID_SHAPE)
    dq = rng.normal(size=(2, 5))
    before = {k: a.copy() for k, a in params.arrays().items()}
    results = gradient_check(params, x, dq, rng, samples_per_array=50)
    assert len(results) >= 200
    assert {r.name for r in results} == set(PARAM_NAMES)
    worst = max(results, key=lambda r: r.relative_error)
    assert worst.relative_error < 1e-4, worst
    for k, a in params.arrays().items():
        assert np.array_equal(a, before[k])


def test_06_dense_gradient_check():
    """Test the dense network's analytic gradients against finite differences."""
    rng = np.random.default_rng(6)
    params = DenseParams.random(rng, n_inputs=7, n_hidden=16)
    x = rng.normal(size=(5, 7))
    dq = rng.normal(size=(5, 5))
    results = gradient_check(params, x, dq, rng, samples_per_array=20)
    assert {r.name for r in results} == set(params.arrays())
    for r in results:
        assert r.relative_error < 1e-4, r


def test_07_leaky_relu():
    """Test the activation and its derivative on both sides of zero."""
    assert np.allclose(leaky_relu(np.array([-2.0, 0.0, 3.0]), 0.01), [-0.02, 0.0, 3.0])
    assert np.array_equal(leaky_relu_grad(np.array([-2.0, 0.0, 3.0]), 0.01), [0.01, 1.0, 1.0])
    assert np.array_equal(leaky_relu_grad(np.array([[-1e-12, 1e-12]]), 0.2), [[0.2, 1.0]])


def test_08_rmsprop_first_step():
    """Test the first RMSProp update against its closed form."""
    rng = np.random.default_rng(7)
    params = DenseParams.random(rng, n_inputs=3, n_hidden=4)
    before = {k: a.copy() for k, a in params.arrays().items()}
    grads = {k: rng.normal(size=a.shape) for k, a in params.arrays().items()}
    opt = RmsPropState.for_params(params, learning_rate=1e-3, decay=0.95, epsilon=1e-6)
    rmsprop_update(params, grads, opt)
    for k, g in grads.items():
        expected = -1e-3 * g / (np.abs(g) * np.sqrt(1 - 0.95) + 1e-6)
        assert np.allclose(params.arrays()[k] - before[k], expected)
        assert np.allclose(opt.accumulators[k], 0.05 * g * g)
    assert params.version == 1


def test_09_stale_cache():
    """Test that a cache cannot be used after the parameters have changed."""
    rng = np.random.default_rng(8)
    params = DenseParams.random(rng, n_inputs=3, n_hidden=4)
    q, cache = forward(rng.normal(size=3), params)
    grads = backward(np.ones_like(q), cache)
    rmsprop_update(params, grads, RmsPropState.for_params(params))
    with pytest.raises(StaleCacheError):
        backward(np.ones_like(q), cache)
    other = params.copy()
    _, fresh = forward(rng.normal(size=3), params)
    with pytest.raises(StaleCacheError):
        other.backward(np.ones(5), fresh)


def test_10_copy_is_independent():
    """Test that a copied network is unaffected by updates to the original."""
    params = _random_net(9)
    frozen = params.copy()
    x = np.random.default_rng(10).random(GRID_SHAPE)
    q_before = q_values(frozen, x)
    grads = {k: np.ones_like(a) for k, a in params.arrays().items()}
    rmsprop_update(params, grads, RmsPropState.for_params(params))
    assert np.array_equal(q_values(frozen, x), q_before)
    assert not np.allclose(q_values(params, x), q_before)


def test_11_random_init():
    """Test that initialization is reproducible and starts biases at zero."""
    a, b = _random_net(11), _random_net(11)
    for name in PARAM_NAMES:
        assert np.array_equal(a.arrays()[name], b.arrays()[name])
        if name.endswith("_b"):
            assert not a.arrays()[name].any()
    assert not np.array_equal(a.conv1_w, _random_net(12).conv1_w)
    assert np.array_equal(NetworkParams.zeros().dense_w, np.zeros((100, 960)))


def test_12_intermediate_shapes():
    """Test the shapes of the hidden layers for one input and for a batch."""
    params = _random_net()
    rng = np.random.default_rng(13)
    _, cache = forward(rng.random(GRID_SHAPE), params)
    assert cache.values["z1"].shape == (1, 7, 11, 32)
    assert cache.values["z2"].shape == (1, 3, 5, 64)
    assert cache.values["flat"].shape == (1, 960)
    assert cache.values["h3"].shape == (1, 100)
    _, cache = forward(rng.random((4,) + GRID_SHAPE), params)
    assert cache.values["z1"].shape == (4, 7, 11, 32)
    assert cache.values["z2"].shape == (4, 3, 5, 64)


def test_13_zero_network():
    """Test that a network with all parameters zero outputs zero, and passes gradient only to the output bias."""
    params = NetworkParams.zeros()
    x = np.random.default_rng(14).random((3,) + GRID_SHAPE)
    q, cache = forward(x, params)
    assert np.array_equal(q, np.zeros((3, 5)))
    dq = np.arange(15.0).reshape(3, 5)
    grads = backward(dq, cache)
    assert np.array_equal(grads["out_b"], dq.sum(axis=0))
    for name in PARAM_NAMES[:-1]:
        assert not grads[name].any(), name


def test_14_backward_is_linear():
    """Test that gradients scale and add with the upstream gradient, and vanish when it is zero."""
    params = _random_net(15)
    rng = np.random.default_rng(16)
    q, cache = forward(rng.random((2,) + GRID_SHAPE), params)
    dq1, dq2 = rng.normal(size=q.shape), rng.normal(size=q.shape)
    g1, g2 = backward(dq1, cache), backward(dq2, cache)
    doubled = backward(2 * dq1, cache)
    summed = backward(dq1 + dq2, cache)
    zero = backward(np.zeros_like(q), cache)
    for name in PARAM_NAMES:
        assert np.allclose(doubled[name], 2 * g1[name], rtol=1e-12, atol=1e-15)
        assert np.allclose(summed[name], g1[name] + g2[name], rtol=1e-10, atol=1e-13)
        assert not zero[name].any(), name


def test_15_known_output():
    """Test the Q-values of a hand-set network on an all-ones input against values computed by hand."""
    params = NetworkParams.zeros()
    params.conv1_w[:] = 0.01
    params.conv2_w[:] = 0.01
    params.dense_w[:] = 0.001
    params.dense_b[:] = -5.0
    params.out_w[:] = 0.01 * np.arange(1, 6)[:, None]
    params.out_b[:] = [0.5, -0.5, 0.0, 0.25, -10.0]
    q, cache = forward(np.ones(GRID_SHAPE), params)
    # Every unit of a layer sees the same value: 1.08, then 3.1104, then leaky(2.985984 - 5)
    assert np.allclose(cache.values["z1"], 1.08, rtol=1e-12)
    assert np.allclose(cache.values["z2"], 3.1104, rtol=1e-12)
    assert np.allclose(cache.values["h3"], -0.02014016, rtol=1e-12)
    expected = [0.47985984, -0.54028032, -0.06042048, 0.16943936, -10.1007008]
    assert q == pytest.approx(expected, rel=1e-12, abs=1e-12)
