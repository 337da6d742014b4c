"""Gradient, loss, and optimizer correctness against independent oracles.

The finite-difference checks are the backbone: backprop here is written by
hand, so every layer type gets compared against central differences on
probes that stay away from activation kinks.
"""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vflsim.errors import ConfigError
from vflsim.nn import (
    Activation,
    Adam,
    DenseLayer,
    LeakyRelu,
    Mlp,
    Relu,
    SgdMomentum,
    Sigmoid,
    activation_from_name,
    as_batch,
    cross_entropy_loss,
    finite_diff_check,
    init_mlp,
    mse_loss,
    probe_margin,
)


def small_net(dims, acts, seed=0):
    rng = np.random.default_rng(seed)
    return init_mlp(dims, acts, rng)


# ---------------------------------------------------------------------------
# losses against independent computations


def test_mse_matches_direct_formula():
    rng = np.random.default_rng(1)
    pred = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 3))
    loss, grad = mse_loss(pred, target)
    assert loss == pytest.approx(((pred - target) ** 2).mean(), abs=1e-15)
    # numerical jacobian of the scalar loss wrt each prediction entry
    h = 1e-6
    for idx in np.ndindex(pred.shape):
        p = pred.copy()
        p[idx] += h
        up, _ = mse_loss(p, target)
        p[idx] -= 2 * h
        dn, _ = mse_loss(p, target)
        assert grad[idx] == pytest.approx((up - dn) / (2 * h), abs=1e-8)


def test_cross_entropy_matches_unstabilised_formula():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(5, 4))
    labels = np.array([0, 3, 1, 2, 2])
    loss, grad = cross_entropy_loss(logits, labels)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    direct = -np.log(probs[np.arange(5), labels]).mean()
    assert loss == pytest.approx(direct, abs=1e-12)
    # gradient rows sum to zero: softmax probs sum to one, one-hot subtracts 1
    assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-15)
    h = 1e-6
    for idx in np.ndindex(logits.shape):
        z = logits.copy()
        z[idx] += h
        up, _ = cross_entropy_loss(z, labels)
        z[idx] -= 2 * h
        dn, _ = cross_entropy_loss(z, labels)
        assert grad[idx] == pytest.approx((up - dn) / (2 * h), abs=1e-8)


def test_cross_entropy_is_stable_at_extreme_logits():
    logits = np.array([[1000.0, -1000.0], [-1000.0, 1000.0]])
    loss, grad = cross_entropy_loss(logits, np.array([0, 1]))
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))


def test_cross_entropy_rejects_bad_labels():
    logits = np.zeros((2, 3))
    with pytest.raises(ValueError):
        cross_entropy_loss(logits, np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy_loss(logits, np.array([0.0, 1.0]))


def test_sigmoid_never_overflows():
    s = Sigmoid()
    z = np.array([[-1000.0, -50.0, 0.0, 50.0, 1000.0]])
    v = s.value(z)
    assert np.all(np.isfinite(v)) and np.all((v >= 0) & (v <= 1))
    assert np.all(np.isfinite(s.grad(z)))


# ---------------------------------------------------------------------------
# gradient checking oracles


def test_linear_net_gradients_are_exact():
    # identity activations + MSE is a quadratic: central differences are
    # exact up to rounding, so the relative error must be tiny
    net = small_net([6, 5, 4], [Activation(), Activation()], seed=3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 6))
    target = rng.normal(size=(3, 4))
    assert finite_diff_check(net, x, target, mse_loss) < 1e-8


def test_finite_diff_detects_a_corrupted_backward():
    class Doubling(DenseLayer):
        def backward(self, grad_out):
            grad_in, gw, gb = super().backward(grad_out)
            return grad_in, 2.0 * gw, gb

    rng = np.random.default_rng(5)
    net = Mlp([Doubling(rng.normal(size=(4, 3)), np.zeros(3), Activation())])
    x = rng.normal(size=(2, 4))
    target = rng.normal(size=(2, 3))
    # analytic = 2 * true, numeric = true: error |2t - t| / |2t| = 0.5
    assert finite_diff_check(net, x, target, mse_loss) == pytest.approx(
        0.5, abs=1e-6
    )


def test_encoder_sized_relu_net_passes_gradcheck():
    # same shape class as a per-guest encoder on image data
    net = small_net([196, 100, 80], [Relu(), Relu()], seed=6)
    rng = np.random.default_rng(7)
    x = rng.uniform(0.5, 1.5, size=(3, 196))
    # an order of magnitude above the finite-difference step keeps the
    # central difference on one linear branch
    assert probe_margin(net, x) > 1e-4
    err = finite_diff_check(
        net, x, x[:, :80], mse_loss, max_coords_per_array=50,
        coord_rng=np.random.default_rng(8),
    )
    assert err < 1e-4


def test_mixed_activation_net_passes_gradcheck():
    rng = np.random.default_rng(9)
    for seed in range(5):
        net = small_net(
            [7, 6, 5, 3],
            [LeakyRelu(0.01), Sigmoid(), Activation()],
            seed=seed,
        )
        x = rng.uniform(0.5, 1.5, size=(4, 7))
        if probe_margin(net, x) < 1e-4:
            continue
        labels = np.array([0, 1, 2, 1])
        assert finite_diff_check(net, x, labels, cross_entropy_loss) < 1e-4


def test_coordinate_subsampling_is_reproducible():
    net = small_net([10, 8, 6], [Sigmoid(), Activation()], seed=10)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(3, 10))
    t = rng.normal(size=(3, 6))
    a = finite_diff_check(net, x, t, mse_loss, max_coords_per_array=5,
                          coord_rng=np.random.default_rng(1))
    b = finite_diff_check(net, x, t, mse_loss, max_coords_per_array=5,
                          coord_rng=np.random.default_rng(1))
    assert a == b


def test_probe_margin_reports_smallest_kinked_preactivation():
    w = np.eye(2)
    layer = DenseLayer(w, np.array([0.25, -0.75]), Relu())
    net = Mlp([layer])
    x = np.array([[0.5, 0.5]])
    # pre-activations are 0.75 and -0.25
    assert probe_margin(net, x) == pytest.approx(0.25)
    # identity layers contribute no kinks
    lin = Mlp([DenseLayer(w, np.zeros(2), Activation())])
    assert probe_margin(lin, x) == np.inf


# ---------------------------------------------------------------------------
# network mechanics


def test_identity_network_is_an_affine_map():
    net = small_net([5, 4, 3], [Activation(), Activation()], seed=12)
    rng = np.random.default_rng(13)
    x = rng.normal(size=(6, 5))
    w0, b0 = net.layers[0].w, net.layers[0].b
    w1, b1 = net.layers[1].w, net.layers[1].b
    expected = (x @ w0 + b0) @ w1 + b1
    assert np.allclose(net.forward(x), expected, atol=1e-12)


def test_backward_requires_forward_and_clears_cache():
    net = small_net([3, 2], [Relu()], seed=14)
    with pytest.raises(RuntimeError):
        net.layers[0].backward(np.zeros((1, 2)))
    net.forward(np.ones((1, 3)))
    net.backward(np.ones((1, 2)))
    with pytest.raises(RuntimeError):
        net.layers[0].backward(np.ones((1, 2)))


def test_infer_matches_forward_without_arming_backward():
    net = small_net([6, 5, 4], [Relu(), Sigmoid()], seed=21)
    rng = np.random.default_rng(22)
    x = rng.normal(size=(7, 6))
    assert np.array_equal(net.infer(x), net.forward(x))
    net.backward(np.ones((7, 4)))
    net.infer(x)
    with pytest.raises(RuntimeError):
        net.backward(np.ones((7, 4)))
    with pytest.raises(ValueError):
        net.infer(np.ones((2, 5)))


def test_infer_does_not_disturb_a_pending_backward():
    net = small_net([4, 3], [Sigmoid()], seed=23)
    rng = np.random.default_rng(24)
    x = rng.normal(size=(5, 4))
    up = rng.normal(size=(5, 3))
    net.forward(x)
    _, clean = net.backward(up)
    net.forward(x)
    net.infer(rng.normal(size=(9, 4)))  # interleaved evaluation
    _, mixed = net.backward(up)
    for a, b in zip(clean, mixed):
        assert np.array_equal(a, b)


def test_snapshot_restore_keeps_array_identity():
    net = small_net([4, 3], [Sigmoid()], seed=15)
    opt = SgdMomentum(net.params(), lr=0.1)
    snap = net.snapshot()
    before = [p.copy() for p in net.params()]
    x = np.ones((2, 4))
    out = net.forward(x)
    _, grads = net.backward(np.ones_like(out))
    opt.step(grads)
    assert not np.allclose(net.layers[0].w, before[0])
    net.restore(snap)
    for p, b in zip(net.params(), before):
        assert np.array_equal(p, b)
    # optimizer still points at the live arrays after restore
    out = net.forward(x)
    _, grads = net.backward(np.ones_like(out))
    opt.step(grads)
    assert not np.array_equal(net.layers[0].w, before[0])


def test_init_mlp_bounds_and_shapes():
    net = small_net([9, 4, 2], [Relu(), Activation()], seed=16)
    assert net.in_dim == 9 and net.out_dim == 2
    assert net.n_params() == 9 * 4 + 4 + 4 * 2 + 2
    for layer in net.layers:
        bound = 1.0 / np.sqrt(layer.in_dim)
        assert np.all(np.abs(layer.w) <= bound)
        assert np.all(layer.b == 0.0)


def test_init_mlp_is_seed_deterministic():
    a = small_net([5, 4], [Relu()], seed=17)
    b = small_net([5, 4], [Relu()], seed=17)
    assert np.array_equal(a.layers[0].w, b.layers[0].w)


def test_mlp_rejects_mismatched_dims():
    l1 = DenseLayer(np.zeros((3, 2)), np.zeros(2), Activation())
    l2 = DenseLayer(np.zeros((4, 1)), np.zeros(1), Activation())
    with pytest.raises(ValueError):
        Mlp([l1, l2])
    with pytest.raises(ValueError):
        Mlp([])
    with pytest.raises(ConfigError):
        init_mlp([4], [], np.random.default_rng(0))


def test_activation_registry():
    assert isinstance(activation_from_name("relu"), Relu)
    assert isinstance(activation_from_name("leaky_relu", 0.2), LeakyRelu)
    assert activation_from_name("leaky_relu", 0.2).slope == 0.2
    with pytest.raises(ConfigError):
        activation_from_name("swish")
    with pytest.raises(ConfigError):
        LeakyRelu(1.5)


def test_as_batch_promotes_rows():
    assert as_batch(np.arange(3.0)).shape == (1, 3)
    with pytest.raises(ValueError):
        as_batch(np.zeros((2, 2, 2)))


# ---------------------------------------------------------------------------
# optimizers against hand-unrolled recurrences


def test_sgd_momentum_three_step_recurrence():
    p = np.array([1.0])
    opt = SgdMomentum([p], lr=0.1, momentum=0.5)
    gs = [np.array([1.0]), np.array([-2.0]), np.array([0.5])]

    # classical momentum by hand: v <- mu v + g, p <- p - lr v
    v_ref, p_ref = 0.0, 1.0
    for g in gs:
        v_ref = 0.5 * v_ref + float(g[0])
        p_ref -= 0.1 * v_ref
    for g in gs:
        opt.step([g])
    assert p[0] == pytest.approx(p_ref, abs=1e-15)


def test_adam_five_step_reference_loop():
    p = np.array([0.3, -0.7])
    opt = Adam([p], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=0.0)
    rng = np.random.default_rng(18)
    grads = [rng.normal(size=2) for _ in range(5)]

    ref = np.array([0.3, -0.7])
    m = np.zeros(2)
    v = np.zeros(2)
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.999**t)
        ref -= 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
    for g in grads:
        opt.step([g])
    assert np.allclose(p, ref, atol=1e-12)


def test_adam_weight_decay_adds_l2_pull():
    p = np.array([2.0])
    opt = Adam([p], lr=0.1, weight_decay=0.01)
    opt.step([np.array([0.0])])
    # zero raw gradient still moves the weight toward zero via decay
    assert p[0] < 2.0

    q = np.array([2.0])
    opt2 = Adam([q], lr=0.1, weight_decay=0.0)
    opt2.step([np.array([0.0])])
    assert q[0] == 2.0


def test_optimizer_validation():
    p = [np.zeros(2)]
    with pytest.raises(ConfigError):
        SgdMomentum(p, lr=0.0)
    with pytest.raises(ConfigError):
        SgdMomentum(p, lr=0.1, momentum=1.0)
    with pytest.raises(ConfigError):
        Adam(p, lr=-1.0)
    with pytest.raises(ValueError):
        Adam(p, lr=0.1).step([])


# ---------------------------------------------------------------------------
# properties


@given(st.integers(0, 2**32 - 1))
def test_relu_leaky_relu_agree_on_positive_half(seed):
    rng = np.random.default_rng(seed)
    z = np.abs(rng.normal(size=(3, 4))) + 1e-9
    assert np.array_equal(Relu().value(z), LeakyRelu(0.3).value(z))
    assert np.array_equal(Relu().grad(z), LeakyRelu(0.3).grad(z))


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 5]))
def test_backward_is_linear_in_upstream_gradient(seed, rows):
    rng = np.random.default_rng(seed)
    net = init_mlp([4, 3], [Sigmoid()], rng)
    x = rng.normal(size=(rows, 4))
    g1 = rng.normal(size=(rows, 3))
    g2 = rng.normal(size=(rows, 3))

    net.forward(x)
    _, grads_sum = net.backward(g1 + g2)
    net.forward(x)
    _, grads_1 = net.backward(g1)
    net.forward(x)
    _, grads_2 = net.backward(g2)
    for gs, ga, gb in zip(grads_sum, grads_1, grads_2):
        assert np.allclose(gs, ga + gb, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_random_smooth_net_passes_gradcheck(seed):
    # sigmoid/identity nets have no kinks, so this must hold for any draw
    rng = np.random.default_rng(seed)
    net = init_mlp([5, 4, 3], [Sigmoid(), Activation()], rng)
    x = rng.normal(size=(2, 5))
    t = rng.normal(size=(2, 3))
    assert finite_diff_check(net, x, t, mse_loss) < 1e-5
