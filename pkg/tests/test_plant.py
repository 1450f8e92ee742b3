"""Plant geometry, elasticity, gravity, dynamics, and rupture behavior."""

import numpy as np
import pytest

from tendonlearn.plant import (MuscleRoute, PlantConfig, RuptureKind,
                               TendonPlant, config_from_dict, config_to_dict,
                               elbow_config, elastic_stretch, geo_lengths,
                               geo_lengths_abs, gravity_torque,
                               make_static_dataset, moment_arms,
                               sample_static, true_lengths, true_lengths_abs)
from tendonlearn.plant import _invert_stretch


def one_muscle(prox, dist, **overrides):
    cfg = PlantConfig(muscles=(MuscleRoute(0, (prox,), (dist,)),))
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    return cfg


# --- geometry ---

def test_straight_length_by_hand():
    # a = (30, 40), child point (30, -40) rotated by pi/2 lands at (40, 30)
    cfg = one_muscle((30.0, 40.0), (30.0, -40.0))
    assert np.allclose(geo_lengths_abs(cfg, [0.0]), [80.0], atol=1e-12)
    assert np.allclose(geo_lengths_abs(cfg, [np.pi / 2]), [np.sqrt(200.0)],
                       atol=1e-12)
    # that segment clears the cylinder, so wrapped == straight there
    assert np.allclose(true_lengths_abs(cfg, [np.pi / 2]),
                       geo_lengths_abs(cfg, [np.pi / 2]), atol=1e-12)


def test_wrapped_length_by_hand():
    # vertical run through the axis: tangents sqrt(50^2-20^2) plus the arc
    cfg = one_muscle((0.0, 50.0), (0.0, -50.0))
    phi = np.pi - 2 * np.arccos(20.0 / 50.0)
    expected = 2 * np.sqrt(2500.0 - 400.0) + 20.0 * phi
    assert np.allclose(true_lengths_abs(cfg, [0.0]), [expected], atol=1e-9)
    assert np.allclose(geo_lengths_abs(cfg, [0.0]), [100.0], atol=1e-12)


def test_wrap_never_shortens_and_is_continuous():
    cfg = elbow_config()
    thetas = np.linspace(0.0, 1.57, 200)
    prev = None
    for th in thetas:
        straight = geo_lengths_abs(cfg, [th])
        wrapped = true_lengths_abs(cfg, [th])
        assert np.all(wrapped >= straight - 1e-9)
        if prev is not None:
            assert np.max(np.abs(wrapped - prev)) < 1.0  # no jumps on the grid
        prev = wrapped


def test_polyline_prefix_lengths_count():
    # two proximal points add a fixed segment of length 10
    cfg = PlantConfig(muscles=(MuscleRoute(
        0, ((30.0, 50.0), (30.0, 40.0)), ((30.0, -40.0),)),))
    assert np.allclose(geo_lengths_abs(cfg, [0.0]), [10.0 + 80.0], atol=1e-12)


def test_relative_lengths_are_zero_at_zero_posture():
    cfg = elbow_config()
    assert np.allclose(geo_lengths(cfg, np.zeros(1)), 0.0, atol=1e-12)
    assert np.allclose(true_lengths(cfg, np.zeros(1)), 0.0, atol=1e-12)


def test_model_vs_plant_mismatch_is_meaningful():
    # the wrap must create a real gap somewhere for learning to absorb
    cfg = elbow_config()
    gaps = []
    for th in np.linspace(0.0, 1.57, 50):
        gaps.append(true_lengths_abs(cfg, [th]) - geo_lengths_abs(cfg, [th]))
    gaps = np.array(gaps)
    assert gaps.max() > 1.0
    assert gaps.max() < 20.0


def test_flexors_shorten_extensor_lengthens():
    cfg = elbow_config()
    thetas = np.linspace(0.0, 1.57, 30)
    lens = np.array([true_lengths(cfg, [th]) for th in thetas])
    assert np.all(np.diff(lens[:, 0]) < 0)
    assert np.all(np.diff(lens[:, 1]) < 0)
    assert np.all(np.diff(lens[:, 2]) > 0)


def test_moment_arms_match_finite_differences():
    cfg = elbow_config()
    h = 1e-4
    for th in (0.1, 0.7, 1.4):
        arms = moment_arms(cfg, [th])
        num = (true_lengths_abs(cfg, [th + h])
               - true_lengths_abs(cfg, [th - h])) / (2 * h)
        assert np.allclose(arms[:, 0], num, atol=1e-4)


def test_wrapped_moment_arm_equals_cylinder_radius():
    # while a muscle hugs the cylinder its arm is exactly the radius
    cfg = elbow_config()
    arms = moment_arms(cfg, [0.0])
    assert abs(arms[0, 0] + 20.0) < 1e-6
    assert abs(arms[1, 0] + 20.0) < 1e-6
    assert arms[2, 0] > 20.0  # extensor runs straight, longer lever


def test_attachment_inside_cylinder_rejected():
    with pytest.raises(ValueError):
        one_muscle((5.0, 5.0), (30.0, -40.0))
    with pytest.raises(ValueError):
        PlantConfig(joint_limits=((1.0, 0.0),))


# --- elasticity ---

def test_elastic_stretch_example():
    cfg = elbow_config()
    # 300 mm of wire under 50 N: 1e-6*300*50 + 15*(1 - e^-1)
    got = elastic_stretch(cfg, 300.0, 50.0)
    assert abs(got - 9.4968) < 5e-4
    assert elastic_stretch(cfg, 300.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        elastic_stretch(cfg, 300.0, -1.0)


def test_elastic_stretch_monotone_and_saturating():
    cfg = elbow_config()
    f = np.linspace(0.0, 400.0, 100)
    s = elastic_stretch(cfg, 300.0, f)
    assert np.all(np.diff(s) > 0)
    # the saturating part levels off near k_nle
    assert s[-1] < cfg.k_nle + cfg.k_wire * 300.0 * 400.0 + 1e-9


def test_invert_stretch_roundtrip():
    cfg = elbow_config()
    f = np.array([0.0, 5.0, 20.0, 80.0, 300.0])
    l_abs = np.full_like(f, 250.0)
    target = elastic_stretch(cfg, l_abs, f)
    back = _invert_stretch(cfg, l_abs, target, np.full_like(f, 10.0))
    assert np.allclose(back, f, atol=1e-6)


# --- gravity ---

def test_gravity_torque_values():
    cfg = elbow_config()
    # m * g * com: 1.0 * 9.81 * 0.08 at the horizontal
    assert abs(gravity_torque(cfg, [np.pi / 2])[0] - 0.78480) < 1e-10
    assert abs(gravity_torque(cfg, [0.0])[0]) < 1e-12
    th = 0.6
    assert np.allclose(gravity_torque(cfg, [th]),
                       [9.81 * 0.08 * np.sin(th)], atol=1e-12)


def test_gravity_torque_two_link_chain():
    from tendonlearn.plant import desk_config
    cfg = desk_config(2)
    tau = gravity_torque(cfg, [np.pi / 2, 0.0])
    # distal link adds its own weight at com beyond the first joint
    expected_0 = 9.81 * (0.08 + 0.25 + 0.08)
    assert abs(tau[0] - expected_0) < 1e-9
    assert abs(tau[1] - 9.81 * 0.08) < 1e-9


# --- static sampling ---

def test_sample_static_consistency():
    cfg = elbow_config()
    triple = sample_static(cfg, [0.8], [10.0, 20.0, 30.0])
    expected = geo_lengths(cfg, [0.8]) - elastic_stretch(
        cfg, geo_lengths_abs(cfg, [0.8]), np.array([10.0, 20.0, 30.0]))
    assert np.allclose(triple.length, expected, atol=1e-12)
    assert np.array_equal(triple.tension, [10.0, 20.0, 30.0])
    with pytest.raises(ValueError):
        sample_static(cfg, [2.0], [10.0, 20.0, 30.0])
    with pytest.raises(ValueError):
        sample_static(cfg, [0.8], [10.0, 20.0, cfg.f_max + 1.0])


def test_make_static_dataset_ranges_and_determinism():
    cfg = elbow_config()
    X = make_static_dataset(cfg, 50, np.random.default_rng(4))
    assert X.shape == (50, 7)
    assert np.all(X[:, 0] >= 0.0) and np.all(X[:, 0] <= 1.57)
    assert np.all(X[:, 1:4] >= 0.0) and np.all(X[:, 1:4] <= cfg.f_max)
    Y = make_static_dataset(cfg, 50, np.random.default_rng(4))
    assert np.array_equal(X, Y)


# --- simulator ---

@pytest.fixture()
def settled():
    plant = TendonPlant(elbow_config())
    assert plant.run_until_settled(timeout=5.0)
    return plant


def test_initial_state_taut_at_bias():
    plant = TendonPlant(elbow_config())
    assert np.allclose(plant.tension, plant.config.f_bias)
    assert np.allclose(plant.l_ref, plant.length, atol=1e-12)
    assert np.all(plant.theta >= 0.0) and np.all(plant.theta <= 1.57)


def test_settles_with_balanced_static_torque(settled):
    cfg = settled.config
    assert np.all(np.abs(settled.theta_dot) < 0.01)
    arms = moment_arms(cfg, settled.theta)
    tau_muscle = -(arms * 1e-3).T @ settled.tension
    tau_grav = gravity_torque(cfg, settled.theta)
    # at rest the static friction band covers the residual
    assert np.all(np.abs(tau_muscle - tau_grav) <= cfg.coulomb + 0.02)
    assert np.all(settled.tension >= 0.0)


def test_run_rejects_non_multiple_durations(settled):
    with pytest.raises(ValueError):
        settled.run(0.0015)


def test_pull_raises_tension_and_flexes(settled):
    th0 = settled.theta.copy()
    f0 = settled.tension[0]
    cmd = settled.l_ref.copy()
    cmd[0] -= 15.0  # wind the deep flexor in
    settled.set_targets(cmd)
    settled.run(2.0)
    assert settled.tension[0] > f0 + 2.0
    assert settled.theta[0] > th0[0] + 0.05


def test_joint_limit_clamps_and_stops(settled):
    cmd = settled.l_ref.copy()
    cmd[0] -= 80.0
    cmd[1] -= 80.0
    settled.set_targets(cmd)
    settled.run(3.0)
    assert settled.theta[0] <= 1.57 + 1e-12
    assert np.all(np.abs(settled.theta_dot) < 1.0)


def test_overwind_guard_bounds_the_winding(settled):
    cmd = settled.l_ref - 300.0
    settled.set_targets(cmd)
    settled.run(4.0)
    cfg = settled.config
    assert np.all(settled.length >= cmd - cfg.dl_max_verify - 1e-9)
    assert np.all(np.isfinite(settled.tension))
    assert np.all(settled.tension >= 0.0)


def test_wire_cut_drops_tension_and_winds_in(settled):
    reading0 = settled.length[0]
    settled.inject_rupture(0, RuptureKind.WIRE_CUT)
    assert settled.tension[0] == 0.0
    settled.run(1.0)
    assert settled.tension[0] == 0.0
    # free-wheel winds in at the slack rate regardless of the joint motion
    assert abs((reading0 - settled.length[0]) - 30.0) < 1e-9
    with pytest.raises(ValueError):
        settled.inject_rupture(0, RuptureKind.WIRE_CUT)


def test_wire_cut_changes_equilibrium(settled):
    th0 = settled.theta.copy()
    settled.inject_rupture(0, RuptureKind.WIRE_CUT)
    settled.run(3.0)
    assert abs(settled.theta[0] - th0[0]) > 0.02  # lost a flexor: posture sags


def test_endpoint_offset_transient_then_bias(settled):
    l_ref0 = settled.l_ref.copy()
    settled.inject_rupture(1, RuptureKind.ENDPOINT_OFFSET, offset=57.0)
    settled.run(0.2)
    assert settled.tension[1] == 0.0  # slack right after the slip
    settled.run(3.8)
    # servo rides at bias again, reading moved by about the slip
    assert abs(settled.tension[1] - settled.config.f_bias) < 1.0
    gap = abs(settled.l_ref[1] - settled.length[1])
    assert abs(gap - 57.0) <= 10.0
    assert np.array_equal(settled.l_ref, l_ref0)
    with pytest.raises(ValueError):
        settled.inject_rupture(2, RuptureKind.ENDPOINT_OFFSET, offset=0.0)


def test_rebase_shifts_reported_length_only(settled):
    twin = TendonPlant(elbow_config())
    assert twin.run_until_settled(timeout=5.0)
    reading0 = settled.length.copy()
    settled.rebase_length_origin(2, -5.5)
    assert abs((settled.length[2] - reading0[2]) + 5.5) < 1e-12
    # same physical command through each frame: identical motion
    cmd = reading0 + np.array([-8.0, -3.0, 4.0])
    twin.set_targets(cmd)
    shifted = cmd.copy()
    shifted[2] -= 5.5
    settled.set_targets(shifted)
    twin.run(1.0)
    settled.run(1.0)
    assert np.allclose(settled.theta, twin.theta, atol=1e-12)
    assert np.allclose(settled.tension, twin.tension, atol=1e-9)


def test_tension_never_negative_under_random_commands():
    plant = TendonPlant(elbow_config())
    plant.run_until_settled(timeout=5.0)
    rng = np.random.default_rng(11)
    for _ in range(10):
        plant.set_targets(plant.l_ref + rng.uniform(-30, 30, size=3))
        plant.run(0.3)
        assert np.all(plant.tension >= 0.0)
        assert np.all(np.isfinite(plant.length))


def test_measured_matches_state(settled):
    m = settled.measured()
    s = settled.state()
    assert np.array_equal(m.theta, s.theta)
    assert np.array_equal(m.tension, s.tension)
    assert np.array_equal(m.length, s.length)
    assert m.as_row().shape == (7,)


# --- config plumbing ---

def test_config_dict_roundtrip():
    cfg = elbow_config()
    again = config_from_dict(config_to_dict(cfg))
    assert again == cfg


def test_config_json_roundtrip(tmp_path):
    from tendonlearn.plant import load_config, save_config
    cfg = elbow_config(f_bias=25.0)
    path = tmp_path / "plant.json"
    save_config(cfg, path)
    assert load_config(path) == cfg
