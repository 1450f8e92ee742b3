"""Feedforward net: exact gradients, optimizer recurrence, serialization."""

import numpy as np
import pytest

from tendonlearn.nn import Adam, FeedForwardNet, LayerSpec


def make_net(seed=0):
    return FeedForwardNet([
        LayerSpec(4, 7, "tanh"),
        LayerSpec(7, 5, "tanh"),
        LayerSpec(5, 3, "identity"),
    ], seed=seed)


def scalar_loss(net, x, target):
    out, tape = net.forward(x)
    diff = out - target
    return 0.5 * np.sum(diff * diff), tape, diff


def test_backward_matches_central_differences():
    # oracle: central finite differences on a scalar loss, h = 1e-5
    net = make_net(seed=3)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 4))
    target = rng.normal(size=(6, 3))
    _, tape, diff = scalar_loss(net, x, target)
    grads, grad_in = net.backward(tape, diff)

    h = 1e-5
    for p, g in zip(net.params(), grads.as_list()):
        flat_p = p.ravel()
        flat_g = g.ravel()
        idx = rng.choice(flat_p.size, size=min(20, flat_p.size), replace=False)
        for i in idx:
            keep = flat_p[i]
            flat_p[i] = keep + h
            up, _, _ = scalar_loss(net, x, target)
            flat_p[i] = keep - h
            dn, _, _ = scalar_loss(net, x, target)
            flat_p[i] = keep
            num = (up - dn) / (2 * h)
            assert abs(num - flat_g[i]) <= 1e-4 * max(1.0, abs(num))

    flat_x = x.ravel()
    flat_gx = grad_in.ravel()
    for i in range(flat_x.size):
        keep = flat_x[i]
        flat_x[i] = keep + h
        up, _, _ = scalar_loss(net, x, target)
        flat_x[i] = keep - h
        dn, _, _ = scalar_loss(net, x, target)
        flat_x[i] = keep
        num = (up - dn) / (2 * h)
        assert abs(num - flat_gx[i]) <= 1e-4 * max(1.0, abs(num))


def test_forward_squeezes_single_rows():
    net = make_net()
    x = np.arange(4.0)
    out1, _ = net.forward(x)
    out2, _ = net.forward(x[None, :])
    assert out1.shape == (3,)
    assert np.array_equal(out1, out2[0])


def test_backward_sums_over_batch_rows():
    net = make_net(seed=1)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4))
    g = rng.normal(size=(5, 3))
    _, tape = net.forward(x)
    grads, _ = net.backward(tape, g)
    total = [np.zeros_like(p) for p in net.params()]
    for k in range(5):
        _, t1 = net.forward(x[k])
        g1, _ = net.backward(t1, g[k])
        for acc, piece in zip(total, g1.as_list()):
            acc += piece
    for acc, whole in zip(total, grads.as_list()):
        assert np.allclose(acc, whole, atol=1e-12)


def test_initialization_is_seeded_and_bounded():
    a, b = make_net(seed=5), make_net(seed=5)
    c = make_net(seed=6)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    assert any(not np.array_equal(wa, wc)
               for wa, wc in zip(a.weights, c.weights))
    for spec, w in zip(a.specs, a.weights):
        assert np.max(np.abs(w)) <= 1.0 / np.sqrt(spec.in_dim)
    for bias in a.biases:
        assert np.array_equal(bias, np.zeros_like(bias))


def test_layer_chain_validation():
    with pytest.raises(ValueError):
        FeedForwardNet([LayerSpec(3, 4), LayerSpec(5, 2)])
    with pytest.raises(ValueError):
        LayerSpec(3, 4, "relu")
    with pytest.raises(ValueError):
        FeedForwardNet([])


def test_save_load_roundtrip(tmp_path):
    net = make_net(seed=11)
    path = tmp_path / "net.bin"
    net.save(path)
    again = FeedForwardNet.load(path)
    x = np.random.default_rng(2).normal(size=(3, 4))
    out_a, _ = net.forward(x)
    out_b, _ = again.forward(x)
    assert np.array_equal(out_a, out_b)

    with open(path, "rb") as fh:
        blob = fh.read()
    with open(path, "wb") as fh:
        fh.write(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        FeedForwardNet.load(path)


def test_copy_is_deep():
    net = make_net(seed=4)
    clone = net.copy()
    clone.weights[0][0, 0] += 1.0
    assert net.weights[0][0, 0] != clone.weights[0][0, 0]


def test_adam_matches_textbook_recurrence():
    # oracle: scalar reimplementation of the published update rule
    rng = np.random.default_rng(8)
    p = rng.normal(size=(3,))
    opt = Adam([p], lr=0.05)
    ref = p.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t in range(1, 8):
        g = rng.normal(size=(3,))
        opt.step([g.copy()])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1.0 - 0.9 ** t)
        vhat = v / (1.0 - 0.999 ** t)
        ref = ref - 0.05 * mhat / (np.sqrt(vhat) + 1e-8)
        assert np.allclose(p, ref, atol=1e-12)


def test_adam_rejects_bad_gradients():
    p = np.zeros(3)
    opt = Adam([p])
    with pytest.raises(ValueError):
        opt.step([np.zeros(4)])
    with pytest.raises(ValueError):
        opt.step([np.array([1.0, np.nan, 0.0])])
    with pytest.raises(ValueError):
        opt.step([])


def test_adam_descends_a_quadratic():
    p = np.array([4.0, -3.0])
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        opt.step([2.0 * p])
    assert np.max(np.abs(p)) < 1e-3
