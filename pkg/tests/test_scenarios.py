import json

import numpy as np
import pytest

from multilift import GRAVITY
from multilift.scenarios import (Scenario, equilibrium_world, fixture_scenario,
                                 hover_scenario, slot_beta_max, slot_scenario,
                                 static_tension_allocation, tilt_schedule,
                                 weight_learning_scenario)
from multilift.worldmodel import load_derivative


def test_zero_speed_gives_constant_hover_references():
    sc = hover_scenario(n=3)
    refs = sc.references()
    ts = np.linspace(0, 5, 11)
    p, v, a = refs.load_pva(ts)
    assert np.allclose(p, p[0], atol=1e-15)
    assert np.allclose(v, 0) and np.allclose(a, 0)
    q0 = refs.quad_state(0, ts)
    assert np.allclose(q0, q0[0], atol=1e-15)


@pytest.mark.parametrize("factory", [
    lambda: weight_learning_scenario(desk=True),
    lambda: slot_scenario(),
    lambda: fixture_scenario(),
])
def test_cable_consistency_at_every_sample(factory):
    sc = factory()
    refs = sc.references()
    ts = np.linspace(0, sc.episode["t_ep"] + 0.5, 60)
    load = refs.load_state(ts)
    for i in range(sc.n):
        quad = refs.quad_state(i, ts)
        # identity reference attitude: attachment is a fixed offset
        gap = quad[:, 0:3] - load[:, 0:3] - refs.attachments[i]
        assert np.allclose(np.linalg.norm(gap, axis=1), refs.length0,
                           atol=1e-9)


@pytest.mark.parametrize("kind", ["circle", "figure8"])
def test_reference_accelerations_match_position_differences(kind):
    sc = weight_learning_scenario(desk=True)
    if kind == "figure8":
        sc = weight_learning_scenario(desk=True)
        sc.trajectory, sc.eval_trajectory = sc.eval_trajectory, sc.trajectory
    refs = sc.references()
    h = 1e-3
    ts = np.linspace(0.3, 6.0, 40)
    _, _, acc = refs.load_pva(ts)
    p_plus = refs.load_pva(ts + h)[0]
    p_minus = refs.load_pva(ts - h)[0]
    p0 = refs.load_pva(ts)[0]
    fd = (p_plus - 2 * p0 + p_minus) / h ** 2
    assert np.max(np.abs(acc - fd)) < 1e-4


def test_velocity_matches_position_differences():
    refs = weight_learning_scenario(desk=True).references()
    ts = np.linspace(0.2, 5.0, 25)
    h = 1e-4
    _, vel, _ = refs.load_pva(ts)
    fd = (refs.load_pva(ts + h)[0] - refs.load_pva(ts - h)[0]) / (2 * h)
    assert np.max(np.abs(vel - fd)) < 1e-6


def test_static_allocation_arithmetic():
    t = static_tension_allocation(10.0, np.zeros(3), 0.0, 6)
    assert t == pytest.approx(10.0 * GRAVITY / 6.0, rel=1e-12)
    t60 = static_tension_allocation(10.0, np.zeros(3), np.deg2rad(60.0), 6)
    assert t60 == pytest.approx(2.0 * t, rel=1e-12)
    with pytest.raises(ValueError):
        static_tension_allocation(10.0, np.zeros(3), np.pi / 2, 6)


def test_static_allocation_balances_load():
    sc = hover_scenario(n=4, load_mass=5.0)
    world = equilibrium_world(sc)
    tension = static_tension_allocation(5.0, np.zeros(3), 0.0, 4)
    tensions = np.tile([0.0, 0.0, tension], (4, 1))
    d = load_derivative(world.load, tensions, world.load_params)
    assert np.linalg.norm(d[3:6]) < 1e-9


def test_tilt_schedule_limits_and_monotonicity():
    slot = {"center": np.array([0.0, 2.0, 2.5]), "beta_min": 0.2,
            "beta_max": 0.9, "eta_cf": 2.0}
    assert tilt_schedule(slot["center"], slot) == pytest.approx(0.9)
    far = tilt_schedule(slot["center"] + np.array([50.0, 0, 0]), slot)
    assert far == pytest.approx(0.2, abs=1e-12)
    ray = [tilt_schedule(slot["center"] + np.array([d, 0, 0]), slot)
           for d in np.linspace(0, 3, 15)]
    assert all(a >= b - 1e-15 for a, b in zip(ray, ray[1:]))


def test_slot_beta_max_geometry():
    length0 = 2.0
    assert slot_beta_max(1.5, length0) > 0
    assert slot_beta_max(1.0, length0) > slot_beta_max(1.5, length0)
    # slot taller than the cable needs no tilt at all
    assert slot_beta_max(2.0 + 0.1, length0) == pytest.approx(0.0)


def test_scenario_json_roundtrip(tmp_path):
    sc = slot_scenario()
    path = tmp_path / "scenario.json"
    sc.to_json(path)
    back = Scenario.from_json(path)
    assert back.to_dict() == sc.to_dict()
    # bytes stable under a second dump
    path2 = tmp_path / "scenario2.json"
    back.to_json(path2)
    assert path.read_text() == path2.read_text()


def test_paper_scale_bundle_constants():
    sc = weight_learning_scenario()
    assert sc.n == 6
    assert sc.load["mass"] == 10.0
    assert sc.load["com_bias"] == [0.1, 0.1, -0.1]
    assert sc.cable["stiffness"] == 4000.0 and sc.cable["damping"] == 0.01
    assert sc.cable["length0"] == 2.0
    assert sc.motor_tau == 0.033
    assert sc.mpc["N"] == 10 and sc.mpc["dt"] == 0.02
    assert sc.episode["n_cl"] == 20 and sc.episode["t_ep"] == 15.0
    assert sc.episode["dt_world"] == 0.005
    assert (sc.mpc["theta_min"], sc.mpc["theta_max"]) == (0.01, 100.0)


def test_evaluation_trajectory_is_distinct():
    sc = weight_learning_scenario(desk=True)
    assert sc.trajectory["kind"] != sc.eval_trajectory["kind"]
    with pytest.raises(ValueError):
        Scenario(trajectory={"kind": "circle", "radius": 1.0},
                 eval_trajectory={"kind": "circle", "radius": 2.0})


def test_reference_feasibility_guard():
    sc = weight_learning_scenario(desk=True)
    assert sc.check_feasible() < 0.9 * sc.quad["u_max"][0]
    sc_bad = weight_learning_scenario(desk=True)
    sc_bad.trajectory["period"] = 0.7  # violent circle
    sc_bad.trajectory["ramp"] = 0.2
    with pytest.raises(ValueError):
        sc_bad.check_feasible()


def test_hover_fixture_is_equilibrium():
    sc = hover_scenario(n=3, load_mass=3.0)
    world = equilibrium_world(sc)
    vecs, mags = world.tensions()
    expected = static_tension_allocation(3.0, np.zeros(3), 0.0, 3)
    assert np.allclose(mags, expected, rtol=1e-9)
    d = world._rhs(world.pack(), world.controls)
    assert np.max(np.abs(d[:13 * 4])) < 1e-9
