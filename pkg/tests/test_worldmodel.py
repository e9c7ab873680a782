import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.spatial.transform import Rotation

from multilift import GRAVITY
from multilift.scenarios import equilibrium_world, hover_scenario
from multilift.worldmodel import (CableParams, DegenerateGeometry, LoadParams,
                                  QuadParams, RigidState, World, WorldFault,
                                  cable_tension, load_derivative,
                                  quad_derivative, step_world)

RNG = np.random.default_rng(11)


def random_state(taut_above=None, spread=0.3):
    q = RNG.normal(size=4)
    q /= np.linalg.norm(q)
    p = RNG.normal(size=3) * spread
    if taut_above is not None:
        p = taut_above + np.array([0.05, -0.03, 2.1])
    return RigidState(p, RNG.normal(size=3) * 0.5, q, RNG.normal(size=3) * 0.5)


def hover_state(p):
    return RigidState(np.asarray(p, float), np.zeros(3),
                      np.array([1.0, 0, 0, 0]), np.zeros(3))


# ---------------------------------------------------------------------------
# cable_tension

def test_tension_zero_at_natural_length():
    load = LoadParams(mass=2.0, attachments=[[0.0, 0.0, 0.0]], inertia=np.eye(3) * 0.1)
    cab = CableParams(stiffness=4000.0, damping=0.01, length0=2.0)
    quad = hover_state([0.0, 0.0, 2.0])
    quad.v = np.array([0.0, 0.0, -1.0])  # any stretch rate on the boundary
    _, mag = cable_tension(quad, hover_state([0, 0, 0]), 0, cab, load)
    assert mag == 0.0


def test_tension_direct_arithmetic():
    # 1 cm stretch at 4000 N/m and zero rate carries exactly 40 N
    load = LoadParams(mass=2.0, attachments=[[0.0, 0.0, 0.0]], inertia=np.eye(3) * 0.1)
    cab = CableParams(stiffness=4000.0, damping=0.01, length0=2.0)
    vec, mag = cable_tension(hover_state([0, 0, 2.01]), hover_state([0, 0, 0]),
                             0, cab, load)
    assert mag == pytest.approx(40.0, rel=1e-12)
    assert np.allclose(vec, [0.0, 0.0, 40.0])


def test_tension_points_up_for_quad_above():
    load = LoadParams(mass=2.0, attachments=[[0.3, 0.0, 0.1]], inertia=np.eye(3) * 0.1)
    cab = CableParams(length0=1.0)
    vec, mag = cable_tension(hover_state([0.3, 0.0, 1.2]), hover_state([0, 0, 0]),
                             0, cab, load)
    assert mag > 0
    assert np.allclose(vec / mag, [0.0, 0.0, 1.0], atol=1e-12)


def test_tension_degenerate_geometry():
    load = LoadParams(mass=2.0, attachments=[[0.0, 0.0, 0.0]], inertia=np.eye(3) * 0.1)
    with pytest.raises(DegenerateGeometry):
        cable_tension(hover_state([0, 0, 0]), hover_state([0, 0, 0]), 0,
                      CableParams(), load)


def test_stretch_rate_is_analytic():
    # magnitude change under a small time advance matches the damping term
    load = LoadParams(mass=2.0, attachments=[[0.0, 0.0, 0.0]], inertia=np.eye(3) * 0.1)
    cab = CableParams(stiffness=100.0, damping=0.05, length0=1.0)
    quad = hover_state([0.0, 0.0, 1.1])
    quad.v = np.array([0.0, 0.0, 0.7])
    _, mag = cable_tension(quad, hover_state([0, 0, 0]), 0, cab, load)
    assert mag == pytest.approx(100.0 * 0.1 + 0.05 * 100.0 * 0.7, rel=1e-12)


# ---------------------------------------------------------------------------
# quad_derivative

def test_quad_hover_equilibrium():
    params = QuadParams()
    s = hover_state([0, 0, 1])
    d = quad_derivative(s, np.array([params.mass * GRAVITY, 0, 0, 0]),
                        np.zeros(3), params)
    assert np.allclose(d, 0.0, atol=1e-12)


def test_quad_free_fall():
    params = QuadParams()
    d = quad_derivative(hover_state([0, 0, 1]), np.zeros(4), np.zeros(3), params)
    assert np.allclose(d[3:6], [0, 0, -GRAVITY], atol=1e-12)


def oracle_quad_rhs(x, control, tension, params):
    # independent formulation: scipy Rotation + explicit quaternion product
    p, v, q, w = x[0:3], x[3:6], x[6:10], x[10:13]
    rot = Rotation.from_quat(np.r_[q[1:4], q[0]]).as_matrix()
    vdot = (-params.mass * GRAVITY * np.array([0, 0, 1.0])
            + rot @ np.array([0, 0, control[0]]) + tension) / params.mass
    qw, qv = q[0], q[1:4]
    qdot = 0.5 * np.r_[-qv @ w, qw * w + np.cross(qv, w)]
    wdot = np.linalg.solve(params.inertia,
                           -np.cross(w, params.inertia @ w) + control[1:4])
    return np.r_[v, vdot, qdot, wdot]


def test_quad_derivative_matches_independent_integrator():
    params = QuadParams()
    for _ in range(5):
        s = random_state()
        s.q /= np.linalg.norm(s.q)
        u = np.array([RNG.uniform(5, 25), *RNG.normal(size=3) * 0.5])
        tension = RNG.normal(size=3) * 2.0
        x0 = s.as_vector()
        h = 1e-3
        flow = lambda tau: solve_ivp(
            lambda t, y: oracle_quad_rhs(y, u, tension, params),
            (0.0, tau), x0, rtol=1e-12, atol=1e-12).y[:, -1]
        central = lambda step: (flow(step) - flow(-step)) / (2 * step)
        fd = (4.0 * central(h / 2) - central(h)) / 3.0  # Richardson, O(h^4)
        ours = quad_derivative(s, u, tension, params)
        assert np.allclose(ours, fd, rtol=1e-6, atol=1e-8)


# ---------------------------------------------------------------------------
# load_derivative

def test_load_static_equilibrium_centered_com():
    lp = LoadParams(mass=6.0, inertia=np.diag([0.6, 0.6, 1.0]))
    n = lp.n_cables
    tensions = np.tile([0.0, 0.0, lp.mass * GRAVITY / n], (n, 1))
    d = load_derivative(hover_state([0, 0, 1]), tensions, lp)
    assert np.allclose(d, 0.0, atol=1e-10)


def test_load_zero_tension_joint_solve():
    # independent 6x6 assembly for the zero-tension, zero-rate case
    r_g = np.array([0.1, 0.1, -0.1])
    lp = LoadParams(mass=4.0, inertia=np.diag([0.5, 0.5, 0.8]), com_bias=r_g,
                    attachments=[[0.4, 0, 0.1], [-0.4, 0, 0.1]])
    d = load_derivative(hover_state([0, 0, 2]),
                        np.zeros((2, 3)), lp)

    def skew(a):
        return np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])

    m6 = np.block([[np.eye(3), -skew(r_g)],
                   [lp.mass * skew(r_g), lp.inertia]])
    rhs = np.r_[[0, 0, -GRAVITY], -np.cross(r_g, lp.mass * GRAVITY * np.array([0, 0, 1.0]))]
    sol = np.linalg.solve(m6, rhs)
    assert np.allclose(d[3:6], sol[:3], atol=1e-12)
    assert np.allclose(d[10:13], sol[3:], atol=1e-12)
    # gravity through the CoM produces pure free fall, no rotation
    assert np.allclose(d[3:6], [0, 0, -GRAVITY], atol=1e-10)
    assert np.allclose(d[10:13], 0.0, atol=1e-10)


def test_load_single_tension_through_com():
    r_g = np.array([0.2, 0.0, 0.0])
    lp = LoadParams(mass=4.0, inertia=np.diag([0.5, 0.5, 0.8]), com_bias=r_g,
                    attachments=[r_g])
    tension = np.array([[0.0, 0.0, lp.mass * GRAVITY]])
    d = load_derivative(hover_state([0, 0, 2]), tension, lp)
    assert np.allclose(d[10:13], 0.0, atol=1e-10)
    assert np.allclose(d[3:6], 0.0, atol=1e-10)


def test_load_wrong_tension_count():
    lp = LoadParams(mass=4.0, attachments=[[0.4, 0, 0], [-0.4, 0, 0]],
                    inertia=np.diag([0.5, 0.5, 0.8]))
    with pytest.raises(ValueError):
        load_derivative(hover_state([0, 0, 2]), np.zeros((3, 3)), lp)


# ---------------------------------------------------------------------------
# step_world

def test_motor_lag_fixed_point():
    world = equilibrium_world(hover_scenario(n=3))
    world.controls[:] = 0.0
    out = world
    for _ in range(10):
        out = step_world(out, np.zeros((3, 4)), 0.005)
    assert np.allclose(out.controls, 0.0, atol=1e-15)


def test_motor_lag_step_response():
    world = equilibrium_world(hover_scenario(n=3))
    world.controls[:] = 0.0
    cmd = np.tile([10.0, 0.5, -0.5, 0.2], (3, 1))
    out = world
    steps = 40
    dt = 0.005
    for _ in range(steps):
        out = step_world(out, cmd, dt)
    expected = cmd * (1.0 - np.exp(-steps * dt / world.motor.tau))
    assert np.allclose(out.controls, expected, rtol=1e-7, atol=1e-9)


def test_six_quad_hover_is_equilibrium():
    sc = hover_scenario(n=6, load_mass=6.0)
    world = equilibrium_world(sc)
    cmd = world.controls.copy()
    ref = world.pack()
    out = world
    for _ in range(200):
        out = step_world(out, cmd, 0.005)
    assert np.max(np.abs(out.pack() - ref)) < 1e-6


def test_nan_fault_names_agent():
    world = equilibrium_world(hover_scenario(n=2, load_mass=2.0))
    world.quads[1].v = np.array([np.nan, 0, 0])
    with pytest.raises(WorldFault) as err:
        step_world(world, world.controls, 0.005)
    assert "q" in err.value.agent_id or err.value.agent_id == "load"


def test_quaternion_norm_preserved():
    world = equilibrium_world(hover_scenario(n=2, load_mass=2.0))
    world.quads[0].w = np.array([4.0, -6.0, 8.0])  # |w| = 10.77 rad/s
    cmd = world.controls.copy()
    out = world
    for _ in range(100):
        out = step_world(out, cmd, 0.005)
        for s in out.quads + [out.load]:
            assert abs(np.linalg.norm(s.q) - 1.0) < 1e-9


def test_slack_cable_transmits_no_force():
    sc = hover_scenario(n=2, load_mass=2.0)
    world = equilibrium_world(sc)
    for i, s in enumerate(world.quads):
        s.p = s.p - np.array([0.0, 0.0, 0.5])  # drop quads: cables go slack
    _, mags = world.tensions()
    assert np.all(mags == 0.0)
    d = world._rhs(world.pack(), np.zeros((2, 4)))
    # with slack cables every body is in free fall (zero thrust commanded,
    # realized thrust still hover -> cancel it first)
    world.controls[:] = 0.0
    d = world._rhs(world.pack(), np.zeros((2, 4)))
    for i in range(2):
        assert np.allclose(d[13 * i + 3:13 * i + 6], [0, 0, -GRAVITY], atol=1e-12)


def test_total_momentum_rate_equals_external_forces():
    # cable forces must cancel in the total linear momentum budget
    sc = hover_scenario(n=3, load_mass=3.0)
    world = equilibrium_world(sc)
    world.load.p += np.array([0.0, 0.0, -0.02])  # extra stretch, keep taut
    d = world._rhs(world.pack(), world.controls)
    total = np.zeros(3)
    for i in range(3):
        total += world.quad_params.mass * d[13 * i + 3:13 * i + 6]
    # load: v is in body frame, attitude identity and w = 0 here
    total += world.load_params.mass * d[13 * 3 + 3:13 * 3 + 6]
    thrust = sum(world.controls[i][0] for i in range(3))
    gravity = -(3 * world.quad_params.mass + world.load_params.mass) * GRAVITY
    assert np.allclose(total, [0, 0, thrust + gravity], atol=1e-9)


def test_rk4_order_on_smooth_trajectory():
    sc = hover_scenario(n=3, load_mass=3.0)
    world = equilibrium_world(sc)
    world.load.p += np.array([0.0, 0.0, -0.03])
    world.load.w = np.array([0.1, -0.2, 0.3])
    cmd = world.controls * 1.05
    h = 0.005

    def advance(w0, step, k):
        out = w0
        for _ in range(k):
            out = step_world(out, cmd, step)
        return out.pack()

    ref = advance(world, h / 16, 16)
    e1 = np.linalg.norm(advance(world, h, 1) - ref)
    e2 = np.linalg.norm(advance(world, h / 2, 2) - ref)
    assert 8.0 < e1 / e2 < 32.0


def test_energy_drift_without_damping():
    sc = hover_scenario(n=3, load_mass=3.0,
                        cable={"stiffness": 400.0, "damping": 0.0})
    world = equilibrium_world(sc)
    world.controls[:] = 0.0  # free flight, conservative system
    e0 = world.energy()
    out = world
    for _ in range(200):
        out = step_world(out, np.zeros((3, 4)), 0.005)
    scale = 0.5 * (3 * sc.quad["mass"] + sc.load["mass"]) * GRAVITY ** 2  # ~1s fall KE
    drift = abs(out.energy() - e0)
    assert drift < 1e-3 * scale
