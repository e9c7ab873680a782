import numpy as np
import pytest

from multilift import dualnum as dn
from multilift.controlmodel import (attach_point, load_rhs, load_step,
                                    quad_rhs, quad_step)
from multilift.scenarios import equilibrium_world, hover_scenario
from multilift.worldmodel import cable_tension, load_derivative, quad_derivative

RNG = np.random.default_rng(3)


def perturbed_world():
    world = equilibrium_world(hover_scenario(n=3, load_mass=3.0))
    for s in world.quads:
        # keep every cable taut: small lateral noise, strictly more stretch
        s.p = s.p + np.r_[RNG.normal(size=2) * 0.005, 0.02 + 0.01 * RNG.random()]
        s.v = RNG.normal(size=3) * 0.1
        s.w = RNG.normal(size=3) * 0.1
    world.load.p = world.load.p + RNG.normal(size=3) * 0.01
    world.load.v = RNG.normal(size=3) * 0.1
    world.load.w = RNG.normal(size=3) * 0.1
    return world


def test_quad_rhs_agrees_with_world_model_when_tensions_match():
    world = perturbed_world()
    x_l = world.load.as_vector()
    for i in range(world.n):
        vec, mag = cable_tension(world.quads[i], world.load, i, world.cables,
                                 world.load_params)
        assert mag > 0  # stays taut under the small perturbation
        u = world.controls[i]
        ap = attach_point(x_l, world.load_params.attachments[i])
        ours = quad_rhs(world.quads[i].as_vector(), u, ap, np.asarray(mag),
                        world.quad_params)
        ref = quad_derivative(world.quads[i], u, -vec, world.quad_params)
        assert np.allclose(ours, ref, atol=1e-12)


def test_load_rhs_agrees_with_world_model_when_tensions_match():
    world = perturbed_world()
    vecs, mags = world.tensions()
    positions = [s.p for s in world.quads]
    ours = load_rhs(world.load.as_vector(), mags, positions, world.load_params)
    ref = load_derivative(world.load, vecs, world.load_params)
    assert np.allclose(ours, ref, atol=1e-12)


def test_quad_step_jacobians_match_fd():
    world = perturbed_world()
    i = 1
    x = world.quads[i].as_vector()
    u = world.controls[i].copy()
    x_l = world.load.as_vector()
    mag = np.array([world.tensions()[1][i]])
    params = world.quad_params
    attach = world.load_params.attachments[i]
    dt = 0.02

    def step_np(x_, u_, xl_, m_):
        return quad_step(x_, u_, attach_point(xl_, attach),
                         m_[0] if np.ndim(m_) else m_, dt, params)

    xd, ud, xld, magd = dn.seed(x, u, x_l, mag)
    out = quad_step(xd, ud, attach_point(xld, attach), magd[0], dt, params)
    h = 1e-6
    for j, (arr, sl) in enumerate([(x, slice(0, 13)), (u, slice(13, 17)),
                                   (x_l, slice(17, 30)), (mag, slice(30, 31))]):
        for c in range(arr.size):
            dp = [x.copy(), u.copy(), x_l.copy(), mag.copy()]
            dm = [x.copy(), u.copy(), x_l.copy(), mag.copy()]
            dp[j][c] += h
            dm[j][c] -= h
            col = (step_np(*dp) - step_np(*dm)) / (2 * h)
            assert np.allclose(out.der[:, sl][:, c], col, rtol=1e-5, atol=1e-7)


def test_load_step_jacobians_match_fd():
    world = perturbed_world()
    x = world.load.as_vector()
    u = world.tensions()[1]
    x_quads = [s.as_vector() for s in world.quads]
    params = world.load_params
    dt = 0.02

    positions = [s[0:3] for s in x_quads]
    xd, ud = dn.seed(x, u)
    out = load_step(xd, ud, positions, dt, params)
    h = 1e-6
    full = np.concatenate([x, u])

    def step_np(z):
        return load_step(z[:13], z[13:], positions, dt, params)

    for c in range(full.size):
        dp, dm = full.copy(), full.copy()
        dp[c] += h
        dm[c] -= h
        col = (step_np(dp) - step_np(dm)) / (2 * h)
        assert np.allclose(out.der[:, c], col, rtol=1e-5, atol=1e-7)


def test_batched_step_matches_single():
    world = perturbed_world()
    i = 0
    x = np.stack([world.quads[i].as_vector() + RNG.normal(size=13) * 0.01
                  for _ in range(4)])
    u = np.stack([world.controls[i] + RNG.normal(size=4) * 0.1 for _ in range(4)])
    ap = np.stack([attach_point(world.load.as_vector(),
                                world.load_params.attachments[i])
                   for _ in range(4)])
    mag = np.full(4, 9.0)
    dt = 0.02
    batch = quad_step(x, u, ap, mag, dt, world.quad_params)
    for b in range(4):
        single = quad_step(x[b], u[b], ap[b], mag[b], dt, world.quad_params)
        assert np.allclose(batch[b], single, atol=1e-14)
