"""Masked autoencoder: scaling, masking, losses, online batches, descent."""

import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from tendonlearn.autoencoder import (DescentConfig, MaskedSensorAutoencoder,
                                     OnlineBatch, build_online_batch,
                                     descend_latent)
from tendonlearn.nn import FeedForwardNet, LayerSpec
from tendonlearn.sensors import (ALL_MODES, MaskMode, SensorTriple,
                                 TrainingBuffer, scale_from_network,
                                 scale_to_network)

D, M = 1, 3
WIDTH = D + 2 * M


def synthetic_rows(n, rng):
    """Smooth single-joint stand-in: l_i = a_i * theta + b_i * f_i."""
    theta = rng.uniform(-0.5, 1.5, size=(n, 1))
    f = rng.uniform(0.0, 200.0, size=(n, M))
    a = np.array([-30.0, -25.0, 20.0])
    b = np.array([0.05, 0.04, 0.06])
    length = theta * a + f * b
    return np.hstack([theta, f, length])


def small_model(**kw):
    params = dict(n_joints=D, n_muscles=M, hidden_wide=24, hidden_narrow=10,
                  n_batch=10, n_epoch=30, random_state=0)
    params.update(kw)
    return MaskedSensorAutoencoder(**params)


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(0)
    model = small_model()
    model.fit(synthetic_rows(400, rng))
    return model


# --- units and sensor containers ---

def test_scaling_factors_and_roundtrip():
    row = np.array([0.7, 40.0, 80.0, 120.0, -12.0, 5.0, 30.0])
    net = scale_to_network(row, D, M)
    assert net[0] == 0.7
    assert np.allclose(net[1:4], [0.2, 0.4, 0.6])
    assert np.allclose(net[4:], [-0.12, 0.05, 0.30])
    back = scale_from_network(net, D, M)
    assert np.allclose(back, row, atol=1e-12)
    # batched rows go through the same path
    both = scale_to_network(np.stack([row, row]), D, M)
    assert np.allclose(both[1], net)


def test_mask_mode_bits():
    assert MaskMode.ANGLE_TENSION.masked_channel == 2
    assert MaskMode.TENSION_LENGTH.masked_channel == 0
    assert MaskMode.ANGLE_LENGTH.masked_channel == 1
    for mode in ALL_MODES:
        bits = mode.bits
        assert bits.shape == (3,)
        assert bits.sum() == 2.0


def test_sensor_triple_row_roundtrip():
    t = SensorTriple.create([0.3], [1.0, 2.0, 3.0], [4.0, 5.0, 6.0])
    row = t.as_row()
    assert row.shape == (WIDTH,)
    again = SensorTriple.from_row(row, D, M)
    assert np.array_equal(again.theta, t.theta)
    assert np.array_equal(again.length, t.length)
    with pytest.raises(ValueError):
        SensorTriple.create([0.3], [1.0, 2.0], [4.0, 5.0, 6.0])


def test_buffer_fifo_and_sampling():
    buf = TrainingBuffer(D, M, capacity=5)
    for k in range(8):
        buf.add(np.full(WIDTH, float(k)))
    assert len(buf) == 5
    rows = buf.rows()
    # oldest three were evicted
    assert rows[0, 0] == 3.0 and rows[-1, 0] == 7.0
    picked = buf.sample(3, np.random.default_rng(0))
    assert picked.shape == (3, WIDTH)
    assert len(np.unique(picked[:, 0])) == 3
    # asking for more than stored returns everything
    assert buf.sample(99, np.random.default_rng(0)).shape == (5, WIDTH)
    buf.clear()
    assert len(buf) == 0
    with pytest.raises(ValueError):
        buf.sample(1, np.random.default_rng(0))


def test_buffer_csv_roundtrip(tmp_path):
    buf = TrainingBuffer(D, M, capacity=10)
    rng = np.random.default_rng(1)
    for row in synthetic_rows(4, rng):
        buf.add(row)
    path = tmp_path / "buffer.csv"
    buf.dump_csv(path)
    again = TrainingBuffer.load_csv(path, D, M, capacity=10)
    assert np.array_equal(again.rows(), buf.rows())


# --- masked assembly ---

def test_assemble_zeroes_masked_channel_and_appends_bits():
    model = small_model()
    rows = scale_to_network(synthetic_rows(3, np.random.default_rng(2)), D, M)
    for i, mode in enumerate(ALL_MODES):
        inputs = model._assemble(rows, i)
        assert inputs.shape == (3, WIDTH + 3)
        assert np.array_equal(inputs[:, WIDTH:], np.tile(mode.bits, (3, 1)))
        d, m = D, M
        blocks = [slice(0, d), slice(d, d + m), slice(d + m, d + 2 * m)]
        masked = mode.masked_channel
        for c, sl in enumerate(blocks):
            if c == masked:
                assert np.all(inputs[:, sl] == 0.0)
            else:
                assert np.array_equal(inputs[:, sl], rows[:, sl])


def test_encode_ignores_the_masked_channel(fitted):
    theta, f, length = [0.4], [30.0, 60.0, 90.0], [1.0, 2.0, 3.0]
    z_none = fitted.encode(tension=f, length=length,
                           mode=MaskMode.TENSION_LENGTH)
    z_junk = fitted.encode(theta=[123.0], tension=f, length=length,
                           mode=MaskMode.TENSION_LENGTH)
    assert np.array_equal(z_none, z_junk)
    z1 = fitted.encode(theta=theta, tension=f, mode=MaskMode.ANGLE_TENSION)
    z2 = fitted.encode(theta=theta, tension=f, length=[9.0, 9.0, 9.0],
                       mode=MaskMode.ANGLE_TENSION)
    assert np.array_equal(z1, z2)


def test_encode_batched_matches_loop(fitted):
    rng = np.random.default_rng(3)
    theta = rng.uniform(-0.5, 1.5, size=(4, 1))
    f = rng.uniform(0, 200, size=(4, 3))
    z = fitted.encode(theta=theta, tension=f, mode=MaskMode.ANGLE_TENSION)
    assert z.shape == (4, fitted.latent_dim)
    for k in range(4):
        zk = fitted.encode(theta=theta[k], tension=f[k],
                           mode=MaskMode.ANGLE_TENSION)
        assert np.allclose(z[k], zk, atol=1e-12)


# --- loss definition ---

def test_loss_value_matches_manual_channel_norms():
    model = small_model()
    model.init_networks(1, 2)
    rows = scale_to_network(synthetic_rows(6, np.random.default_rng(4)), D, M)
    inputs = model._assemble(rows, 0)
    loss, _ = model._loss_and_grads(inputs, rows)
    z, _ = model.encoder_.forward(inputs)
    out, _ = model.decoder_.forward(z)
    diff = out - rows
    expected = (1.0 * np.linalg.norm(diff[:, :1], axis=1).mean()
                + 10.0 * np.linalg.norm(diff[:, 1:4], axis=1).mean()
                + 100.0 * np.linalg.norm(diff[:, 4:], axis=1).mean())
    assert abs(loss - expected) <= 1e-12 * max(1.0, expected)


def test_loss_mask_drops_columns():
    model = small_model()
    model.init_networks(1, 2)
    rows = scale_to_network(synthetic_rows(5, np.random.default_rng(5)), D, M)
    inputs = model._assemble(rows, 1)
    mask = np.ones_like(rows)
    mask[:, 4] = 0.0  # first length column ignored
    loss_masked, grads_masked = model._loss_and_grads(inputs, rows, mask)
    # perturbing the target in a masked column changes nothing
    bumped = rows.copy()
    bumped[:, 4] += 123.0
    loss_bumped, grads_bumped = model._loss_and_grads(inputs, bumped, mask)
    assert loss_masked == loss_bumped
    for a, b in zip(grads_masked, grads_bumped):
        assert np.array_equal(a, b)


def test_loss_gradient_matches_finite_differences():
    # oracle: central differences, h = 1e-5, on a handful of coordinates
    model = small_model(hidden_wide=12, hidden_narrow=6)
    model.init_networks(3, 4)
    rows = scale_to_network(synthetic_rows(4, np.random.default_rng(6)), D, M)
    inputs = model._assemble(rows, 2)
    _, grads = model._loss_and_grads(inputs, rows)
    params = model.encoder_.params() + model.decoder_.params()
    h = 1e-5
    rng = np.random.default_rng(7)
    for p, g in zip(params, grads):
        flat_p, flat_g = p.ravel(), g.ravel()
        for i in rng.choice(flat_p.size, size=min(6, flat_p.size),
                            replace=False):
            keep = flat_p[i]
            flat_p[i] = keep + h
            up, _ = model._loss_and_grads(inputs, rows)
            flat_p[i] = keep - h
            dn, _ = model._loss_and_grads(inputs, rows)
            flat_p[i] = keep
            num = (up - dn) / (2 * h)
            assert abs(num - flat_g[i]) <= 1e-4 * max(1.0, abs(num))


# --- initial training ---

def test_fit_reduces_holdout_loss_and_keeps_best(fitted):
    assert fitted.history_.shape == (30,)
    assert fitted.history_.min() < 0.5 * fitted.history_[0]
    assert fitted.heldout_loss_ == fitted.history_.min()


def test_fit_is_deterministic():
    rows = synthetic_rows(120, np.random.default_rng(8))
    a = small_model(n_epoch=4).fit(rows)
    b = small_model(n_epoch=4).fit(rows)
    assert a.param_digest() == b.param_digest()
    c = small_model(n_epoch=4, random_state=1).fit(rows)
    assert c.param_digest() != a.param_digest()


def test_fit_input_validation():
    with pytest.raises(ValueError):
        small_model().fit(np.zeros((1, WIDTH)))
    with pytest.raises(ValueError):
        small_model().fit(np.zeros((10, WIDTH + 1)))
    with pytest.raises(NotFittedError):
        small_model().encode(theta=[0.0], tension=[0.0, 0.0, 0.0])


def test_channel_errors_reports_network_unit_means(fitted):
    rows = synthetic_rows(200, np.random.default_rng(9))
    errors = fitted.channel_errors(rows)
    assert set(errors) == {"angle", "tension", "length"}
    for v in errors.values():
        assert 0.0 <= v < 0.2

    # hand oracle for a 2-row matrix
    two = rows[:2]
    net = scale_to_network(two, D, M)
    acc = np.zeros(3)
    for i in range(3):
        out = fitted.predict_net(two, ALL_MODES[i])
        diff = np.abs(out - net)
        acc += [diff[:, :1].mean(), diff[:, 1:4].mean(), diff[:, 4:].mean()]
    acc /= 3
    got = fitted.channel_errors(two)
    assert np.allclose([got["angle"], got["tension"], got["length"]], acc,
                       atol=1e-12)


def test_predict_length_learns_the_synthetic_map(fitted):
    rng = np.random.default_rng(10)
    rows = synthetic_rows(50, rng)
    pred = fitted.predict_length(rows[:, :1], rows[:, 1:4])
    err = np.abs(pred - rows[:, 4:]).mean()
    assert err < 5.0  # mm, crude net trained 30 epochs


def test_save_load_roundtrip(tmp_path, fitted):
    path = tmp_path / "model.tlae"
    fitted.save(path)
    again = MaskedSensorAutoencoder.load(path)
    assert again.param_digest() == fitted.param_digest()
    assert again.get_params() == fitted.get_params()
    rows = synthetic_rows(5, np.random.default_rng(11))
    assert np.array_equal(again.predict_net(rows, MaskMode.ANGLE_TENSION),
                          fitted.predict_net(rows, MaskMode.ANGLE_TENSION))
    with open(path, "rb") as fh:
        blob = fh.read()
    with open(path, "wb") as fh:
        fh.write(b"ZZZZ" + blob[4:])
    with pytest.raises(ValueError):
        MaskedSensorAutoencoder.load(path)


def test_copy_detaches_parameters(fitted):
    clone = fitted.copy()
    assert clone.param_digest() == fitted.param_digest()
    clone.encoder_.weights[0][0, 0] += 1.0
    assert clone.param_digest() != fitted.param_digest()


# --- online batches ---

def make_buffer(n, rng):
    buf = TrainingBuffer(D, M, capacity=100)
    for row in synthetic_rows(n, rng):
        buf.add(row)
    return buf


def test_online_batch_shape_and_anchor(fitted):
    rng = np.random.default_rng(12)
    buf = make_buffer(20, rng)
    latest = synthetic_rows(1, rng)[0]
    batch = build_online_batch(fitted, buf, latest, n_data=10, rng=13)
    # (10 sampled + latest + zero anchor) x 3 mask modes
    assert batch.inputs.shape == (36, WIDTH + 3)
    assert batch.targets.shape == (36, WIDTH)
    assert batch.loss_mask.shape == (36, WIDTH)
    assert np.all(batch.loss_mask == 1.0)
    # zero anchor present in every mode block
    for k in range(3):
        assert np.all(batch.targets[12 * k + 11] == 0.0)


def test_online_batch_rupture_substitution(fitted):
    rng = np.random.default_rng(14)
    buf = make_buffer(15, rng)
    latest = synthetic_rows(1, rng)[0]
    rupture = np.array([1.0, 0.0, 1.0])
    batch = build_online_batch(fitted, buf, latest, rupture=rupture,
                               n_data=10, rng=15)
    f_cols = batch.targets[:, 1:4]
    assert np.all(f_cols[:, 1] == 0.0)
    assert np.all(batch.loss_mask[:, 4 + 1] == 0.0)
    assert np.all(batch.loss_mask[:, [4, 6]] == 1.0)
    # replaced length equals the model's own completion at zeroed tension
    rows_phys = scale_from_network(batch.targets[:12], D, M)
    pred = fitted.predict_length(rows_phys[:, :1], rows_phys[:, 1:4])
    assert np.allclose(rows_phys[:, 4 + 1], pred[:, 1], atol=1e-9)


def test_online_batch_all_healthy_matches_none(fitted):
    rng = np.random.default_rng(16)
    buf = make_buffer(12, rng)
    latest = synthetic_rows(1, rng)[0]
    a = build_online_batch(fitted, buf, latest, rupture=None, n_data=5, rng=17)
    b = build_online_batch(fitted, buf, latest, rupture=np.ones(M), n_data=5,
                           rng=17)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.targets, b.targets)
    assert np.array_equal(a.loss_mask, b.loss_mask)


def test_update_online_moves_parameters_and_helps(fitted):
    model = fitted.copy()
    rng = np.random.default_rng(18)
    # shift the length map: same plant geometry, lengths offset by 8 mm
    rows = synthetic_rows(30, rng)
    rows[:, 4:] += 8.0
    buf = TrainingBuffer(D, M, capacity=100)
    for row in rows[:-1]:
        buf.add(row)
    before = np.abs(model.predict_length(rows[:, :1], rows[:, 1:4])
                    - rows[:, 4:]).mean()
    digest = model.param_digest()
    for _ in range(10):
        batch = build_online_batch(model, buf, rows[-1], n_data=10, rng=rng)
        model.update_online(batch, rng=rng)
    after = np.abs(model.predict_length(rows[:, :1], rows[:, 1:4])
                   - rows[:, 4:]).mean()
    assert model.param_digest() != digest
    assert after < before
    with pytest.raises(ValueError):
        model.update_online(OnlineBatch(np.empty((0, WIDTH + 3)),
                                        np.empty((0, WIDTH)),
                                        np.empty((0, WIDTH))))


# --- latent descent ---

def identity_decoder(dim):
    net = FeedForwardNet([LayerSpec(dim, dim, "identity")], seed=0)
    net.weights[0] = np.eye(dim)
    net.biases[0] = np.zeros(dim)
    return net


def quadratic_loss(target):
    # batched: rows may carry a leading candidate axis
    def loss_fn(row):
        diff = row - target
        return np.sum(diff * diff, axis=-1), 2.0 * diff
    return loss_fn


def test_descent_minimizes_a_quadratic_through_identity():
    target = np.array([0.3, -0.2, 0.5, 0.1])
    z, history = descend_latent(identity_decoder(4), np.zeros(4),
                                quadratic_loss(target),
                                DescentConfig(gamma_max=0.5, n_batch=11,
                                              n_epoch=25))
    assert np.linalg.norm(z - target) < 0.03
    assert history.shape == (25,)
    assert np.all(np.diff(history) <= 1e-15)


def test_descent_gamma_zero_guards_against_overshoot():
    # minimum closer than the smallest nonzero step: loss must not increase
    loss_fn = quadratic_loss(np.full(4, 0.001))
    z0 = np.zeros(4)
    base = float(loss_fn(z0)[0])
    _, history = descend_latent(identity_decoder(4), z0, loss_fn,
                                DescentConfig(gamma_max=0.5, n_batch=11,
                                              n_epoch=3))
    assert history[-1] <= base


def test_descent_stationary_point_is_held():
    def loss_fn(row):
        return np.full(row.shape[:-1], 1.5), np.zeros_like(row)

    z, history = descend_latent(identity_decoder(3), np.full(3, 0.2), loss_fn,
                                DescentConfig(n_epoch=4))
    assert np.array_equal(z, np.full(3, 0.2))
    assert np.all(history == 1.5)
