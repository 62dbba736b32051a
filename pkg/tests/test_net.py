import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import fd_activation_grad, fd_param_grads, random_net, rel_err, smooth_batch
from lpa_lab.exceptions import DimensionError, LPAError
from lpa_lab.net import (
    DenseLayer,
    MlpNetwork,
    backward,
    cross_entropy,
    forward_from,
    forward_full,
    lipschitz_bound,
    load_checkpoint,
    one_hot,
    save_checkpoint,
    spectral_norm,
)


def two_layer():
    return MlpNetwork(
        [
            DenseLayer([[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0], "relu"),
            DenseLayer([[1.0, 2.0], [-1.0, 0.5]], [0.1, -0.2], "identity"),
        ]
    )


# -- forward ------------------------------------------------------------------


def test_identity_layer_returns_input():
    net = MlpNetwork([DenseLayer(np.eye(2), np.zeros(2), "identity")])
    np.testing.assert_array_equal(forward_full(net, [[1.0, 2.0]]).logits, [[1.0, 2.0]])


def test_relu_hidden_layer_hand_value():
    trace = forward_full(two_layer(), [[3.0, 5.0]])
    np.testing.assert_array_equal(trace.activations[1], [[3.0, 0.0]])
    np.testing.assert_array_equal(trace.pre_activations[1], [[3.0, -5.0]])


def test_zero_input_zero_bias_gives_zero_everywhere():
    net = MlpNetwork.initialize([5, 7, 3], seed=1)
    trace = forward_full(net, np.zeros((4, 5)))
    for a in trace.activations:
        assert not a.any()


def test_forward_from_top_is_identity():
    net = MlpNetwork.initialize([4, 6, 3], seed=0)
    u = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_array_equal(forward_from(net, net.depth, u), u)


def test_forward_from_zero_equals_full_and_layer_one_matches():
    net = two_layer()
    x = np.array([[3.0, 5.0]])
    np.testing.assert_array_equal(forward_from(net, 0, x), forward_full(net, x).logits)
    np.testing.assert_array_equal(forward_from(net, 1, [[3.0, 0.0]]), forward_full(net, x).logits)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_partial_forward_is_bit_consistent(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    trace = forward_full(net, rng.standard_normal((6, net.input_dim)))
    for l in range(net.depth + 1):
        np.testing.assert_array_equal(forward_from(net, l, trace.activations[l]), trace.logits)


def test_recomputing_forward_is_bit_identical():
    rng = np.random.default_rng(3)
    net = random_net(rng)
    x = rng.standard_normal((8, net.input_dim))
    a, b = forward_full(net, x), forward_full(net, x)
    for u, v in zip(a.activations, b.activations):
        np.testing.assert_array_equal(u, v)


def test_dimension_mismatch_names_layer():
    net = MlpNetwork.initialize([4, 6, 3], seed=0)
    with pytest.raises(DimensionError, match="layer 0") as err:
        forward_full(net, np.zeros((2, 5)))
    assert err.value.layer == 0
    with pytest.raises(DimensionError) as err:
        forward_from(net, 1, np.zeros((2, 4)))
    assert err.value.layer == 1


def test_layer_out_of_range_rejected():
    net = MlpNetwork.initialize([4, 6, 3], seed=0)
    with pytest.raises(LPAError):
        forward_from(net, 3, np.zeros((1, 3)))
    with pytest.raises(LPAError):
        forward_from(net, -1, np.zeros((1, 4)))


def test_inconsistent_layers_rejected():
    with pytest.raises(DimensionError):
        MlpNetwork([DenseLayer(np.ones((3, 2)), np.zeros(3), "relu"), DenseLayer(np.ones((2, 4)), np.zeros(2), "identity")])
    with pytest.raises(LPAError):
        MlpNetwork([DenseLayer(np.ones((3, 2)), np.zeros(3), "relu")])


# -- loss ---------------------------------------------------------------------


def test_uniform_logits_loss_is_log_classes():
    loss, probs = cross_entropy(np.zeros((3, 4)), [0, 1, 3])
    assert loss == pytest.approx(np.log(4), abs=1e-15)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_confident_logits_loss():
    loss, _ = cross_entropy([[10.0, 0.0, 0.0]], [0])
    # log(1 + 2 e^-10) by hand
    assert loss == pytest.approx(np.log1p(2 * np.exp(-10.0)), rel=1e-12)
    assert loss == pytest.approx(9.08e-5, rel=1e-3)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=3, max_size=3),
    st.floats(-1e3, 1e3),
    st.integers(0, 2),
)
def test_loss_is_shift_invariant_and_nonnegative(row, shift, label):
    logits = np.array([row])
    a, pa = cross_entropy(logits, [label])
    b, pb = cross_entropy(logits + shift, [label])
    assert a >= 0
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)
    np.testing.assert_allclose(pa.sum(), 1.0, atol=1e-12)


def test_large_logits_stay_finite():
    loss, probs = cross_entropy([[1000.0, -1000.0]], [1])
    assert np.isfinite(loss) and loss == pytest.approx(2000.0)
    assert np.all(np.isfinite(probs))


def test_label_out_of_range():
    with pytest.raises(LPAError):
        cross_entropy(np.zeros((2, 3)), [0, 3])


# -- gradients ----------------------------------------------------------------


def test_softmax_regression_logit_gradient_closed_form():
    rng = np.random.default_rng(5)
    net = random_net(rng, n_layers=2)
    x = rng.standard_normal((7, net.input_dim))
    y = rng.integers(0, net.n_classes, 7)
    trace = forward_full(net, x)
    g = backward(net, trace, y, grad_layer=net.depth)
    _, p = cross_entropy(trace.logits, y)
    np.testing.assert_allclose(g.per_sample_activation, p - one_hot(y, net.n_classes), atol=1e-15)
    np.testing.assert_allclose(g.activation, (p - one_hot(y, net.n_classes)) / 7, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    net = random_net(rng)
    x = smooth_batch(net, rng, 3)
    y = rng.integers(0, net.n_classes, 3)
    trace = forward_full(net, x)
    bundle = backward(net, trace, y)
    for (fw, fb), gw, gb in zip(fd_param_grads(net, x, y), bundle.weights, bundle.biases):
        assert rel_err(gw, fw) < 1e-5
        assert rel_err(gb, fb) < 1e-5
    for l in range(net.depth + 1):
        g = backward(net, trace, y, grad_layer=l).activation
        assert rel_err(g, fd_activation_grad(net, l, trace.activations[l], y)) < 1e-5


def test_activation_gradient_from_partial_trace_matches_full():
    rng = np.random.default_rng(9)
    net = random_net(rng, n_layers=3)
    x = rng.standard_normal((5, net.input_dim))
    y = rng.integers(0, net.n_classes, 5)
    full = forward_full(net, x)
    for l in range(net.depth + 1):
        part = forward_from_trace(net, l, full.activations[l])
        np.testing.assert_array_equal(
            backward(net, part, y, grad_layer=l).activation, backward(net, full, y, grad_layer=l).activation
        )


def forward_from_trace(net, l, a):
    from lpa_lab.net import forward_trace

    return forward_trace(net, l, a, {l: np.zeros_like(a)})


def test_gradient_shapes_and_grad_layer_range():
    net = MlpNetwork.initialize([4, 6, 5, 3], seed=2)
    x = np.random.default_rng(0).standard_normal((9, 4))
    y = np.arange(9) % 3
    trace = forward_full(net, x)
    b = backward(net, trace, y, grad_layer=2)
    for ly, gw, gb in zip(net.layers, b.weights, b.biases):
        assert gw.shape == ly.weights.shape and gb.shape == ly.bias.shape
    assert b.activation.shape == (9, 5) == b.per_sample_activation.shape
    with pytest.raises(LPAError):
        backward(net, trace, y, grad_layer=4)


def test_soft_targets_reduce_to_one_hot():
    rng = np.random.default_rng(1)
    net = random_net(rng)
    x = rng.standard_normal((6, net.input_dim))
    y = rng.integers(0, net.n_classes, 6)
    trace = forward_full(net, x)
    a = backward(net, trace, y)
    b = backward(net, trace, y, targets=one_hot(y, net.n_classes))
    for u, v in zip(a.weights, b.weights):
        np.testing.assert_array_equal(u, v)
    assert a.loss == b.loss


def test_relu_subgradient_at_zero_is_zero():
    net = MlpNetwork(
        [DenseLayer([[1.0]], [0.0], "relu"), DenseLayer([[1.0], [-1.0]], [0.0, 0.0], "identity")]
    )
    b = backward(net, forward_full(net, [[0.0]]), [0], grad_layer=0)
    assert b.activation[0, 0] == 0.0
    assert b.weights[0][0, 0] == 0.0


# -- spectral norm and bounds ----------------------------------------------------


def test_spectral_norm_simple_cases():
    assert spectral_norm(np.eye(4)) == pytest.approx(1.0, abs=1e-15)
    assert spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, abs=1e-12)


def test_spectral_norm_matches_dense_svd():
    for seed in range(10):
        m = np.random.default_rng(seed).standard_normal((5, 5))
        assert spectral_norm(m, iterations=200) == pytest.approx(np.linalg.svd(m, compute_uv=False)[0], abs=1e-6)


def test_spectral_norm_nondecreasing_and_deterministic():
    m = np.random.default_rng(4).standard_normal((6, 9))
    values = [spectral_norm(m, it, seed=3) for it in range(1, 40)]
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
    assert spectral_norm(m, 20, seed=3) == spectral_norm(m, 20, seed=3)


def test_spectral_norm_rejects_bad_input():
    with pytest.raises(LPAError):
        spectral_norm(np.zeros((0, 3)))
    with pytest.raises(LPAError):
        spectral_norm(np.eye(2), iterations=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_relu_subnetwork_respects_lipschitz_bound(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    a0 = rng.standard_normal((4, net.input_dim))
    trace = forward_full(net, a0)
    for l in range(net.depth + 1):
        a = trace.activations[l]
        delta = rng.standard_normal(a.shape)
        moved = np.linalg.norm(forward_from(net, l, a + delta) - trace.logits, axis=1)
        # the dense-SVD product is an independent upper bound on the power estimate
        exact = np.prod([np.linalg.norm(net.layer(j).weights, 2) for j in range(l + 1, net.depth + 1)])
        assert lipschitz_bound(net, l) <= exact * (1 + 1e-12)
        assert np.all(moved <= exact * np.linalg.norm(delta, axis=1) + 1e-9)


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = MlpNetwork.initialize([5, 8, 4, 3], seed=11)
    path = save_checkpoint(net, tmp_path / "net.npz")
    back = load_checkpoint(path)
    assert back.dims == net.dims and back.seed == 11
    for a, b in zip(net.layers, back.layers):
        assert a.activation == b.activation
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.bias, b.bias)


def test_checkpoint_rejects_foreign_archive(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, meta=np.array('{"format": "other"}'))
    with pytest.raises(LPAError):
        load_checkpoint(path)


def test_initialization_is_seeded_he_normal():
    a = MlpNetwork.initialize([200, 300, 3], seed=5)
    b = MlpNetwork.initialize([200, 300, 3], seed=5)
    np.testing.assert_array_equal(a.layers[0].weights, b.layers[0].weights)
    assert a.layers[0].weights.std() == pytest.approx(np.sqrt(2 / 200), rel=0.02)
    assert not a.layers[0].bias.any()
    assert a.layers[-1].activation.value == "identity"
