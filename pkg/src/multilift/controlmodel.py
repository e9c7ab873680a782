"""Smooth prediction dynamics used inside the MPCs.

Unlike the actual world model, cables here carry the load MPC's virtual
tension magnitudes: each magnitude is a decision/external variable and
only the direction comes from the relative geometry.  There is no motor
lag and no taut/slack switching, so the one-step map is smooth and can
be evaluated on the dual types for derivatives of any order.

External couplings enter through their minimal geometric footprint: a
quadrotor sees its attachment point's world position and its cable's
tension magnitude; the load sees the quadrotor positions.  Callers with
full external states convert once via ``attach_point`` / position
slices, which keeps RK4 stages free of redundant rotation evaluations.

States follow the same 13-component layout as the world model.  The
discrete step is one RK4 stage of length dt with external signals held
constant over the step.
"""

import numpy as np

from . import GRAVITY
from . import dualnum as dn
from .quaternions import quat_deriv, quat_to_rot

E3 = np.array([0.0, 0.0, 1.0])


def attach_point(x_load, attach):
    """World position of a load attachment point given the load state."""
    rot_l = quat_to_rot(x_load[..., 6:10])
    return x_load[..., 0:3] + dn.matvec(rot_l, attach)


def quad_rhs(x, u, attach_pt, tension_mag, params):
    """Continuous quadrotor dynamics under a virtual cable tension."""
    v, q, w = x[..., 3:6], x[..., 6:10], x[..., 10:13]
    rot = quat_to_rot(q)
    rel = x[..., 0:3] - attach_pt
    unit = rel / dn.norm(rel)[..., None]
    thrust = rot[..., :, 2] * u[..., 0, None]
    vdot = (thrust - tension_mag[..., None] * unit) / params.mass \
        - GRAVITY * E3
    wdot = dn.matvec(params.inertia_inv,
                     -dn.cross(w, dn.matvec(params.inertia, w)) + u[..., 1:4])
    return dn.concat([v, vdot, quat_deriv(q, w), wdot])


def load_rhs(x, u, quad_positions, params):
    """Continuous load dynamics under virtual tension magnitudes u."""
    v, q, w = x[..., 3:6], x[..., 6:10], x[..., 10:13]
    rot = quat_to_rot(q)
    rot_t = dn.transpose_last2(rot)
    r_g = params.com_bias
    sum_t, torque = None, None
    for i in range(params.n_cables):
        pivot = x[..., 0:3] + dn.matvec(rot, params.attachments[i])
        rel = quad_positions[i] - pivot
        unit = rel / dn.norm(rel)[..., None]
        t_body = dn.matvec(rot_t, u[..., i, None] * unit)
        tq = dn.cross(params.attachments[i], t_body)
        sum_t = t_body if sum_t is None else sum_t + t_body
        torque = tq if torque is None else torque + tq
    grav_body = dn.matvec(rot_t, params.mass * GRAVITY * E3)
    b1 = -dn.cross(w, v) - dn.cross(w, dn.cross(w, r_g)) \
        + (sum_t - grav_body) / params.mass
    b2 = torque - dn.cross(r_g, grav_body) \
        - dn.cross(w, dn.matvec(params.inertia, w)) \
        - params.mass * dn.cross(r_g, dn.cross(w, v))
    b = dn.concat([b1, b2])
    vw = dn.matvec(params.coupling_inv, b)
    return dn.concat([dn.matvec(rot, v), vw[..., 0:3], quat_deriv(q, w),
                      vw[..., 3:6]])


def rk4(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def quad_step(x, u, attach_pt, tension_mag, dt, params):
    """One-step discrete quadrotor map with externals held constant."""
    return rk4(lambda s: quad_rhs(s, u, attach_pt, tension_mag, params), x, dt)


def load_step(x, u, quad_positions, dt, params):
    """One-step discrete load map with quadrotor externals held constant."""
    return rk4(lambda s: load_rhs(s, u, quad_positions, params), x, dt)
