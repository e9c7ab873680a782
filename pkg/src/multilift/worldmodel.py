"""Ground-truth physics for the multilift system.

Quadrotors and the load are 6-DoF rigid bodies tied together by massless
spring-damper cables that only pull (hybrid taut/slack behaviour).  Motor
lag on each quadrotor's realized control is a first-order system
integrated jointly with the rigid-body states.  Everything here operates
on plain numpy arrays; the smooth prediction model used inside the MPCs
lives in :mod:`multilift.controlmodel`.

Conventions: positions and quadrotor velocities in the world frame, the
load's velocity in its body frame, angular rates in the body frame,
quaternions scalar-first.
"""

from dataclasses import dataclass, field

import numpy as np

from . import GRAVITY
from .quaternions import hat, normalize, quat_deriv, quat_to_rot

E3 = np.array([0.0, 0.0, 1.0])


class WorldFault(RuntimeError):
    """Non-finite state encountered during integration."""

    def __init__(self, agent_id, message=None):
        self.agent_id = agent_id
        super().__init__(message or f"non-finite state for agent {agent_id}")


class DegenerateGeometry(ValueError):
    pass


class SingularCoupling(ValueError):
    pass


@dataclass
class RigidState:
    """13-component rigid body state [p, v, q, w]."""

    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray

    def as_vector(self):
        return np.concatenate([self.p, self.v, self.q, self.w])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x[0:3].copy(), x[3:6].copy(), x[6:10].copy(), x[10:13].copy())

    def copy(self):
        return RigidState(self.p.copy(), self.v.copy(), self.q.copy(), self.w.copy())


@dataclass
class QuadParams:
    mass: float = 1.5
    inertia: np.ndarray = field(default_factory=lambda: np.diag([0.02, 0.02, 0.04]))
    radius: float = 0.15
    u_min: np.ndarray = field(default_factory=lambda: np.array([0.0, -3.0, -3.0, -3.0]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([60.0, 3.0, 3.0, 3.0]))

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float)
        self.u_min = np.asarray(self.u_min, dtype=float)
        self.u_max = np.asarray(self.u_max, dtype=float)
        if self.mass <= 0:
            raise ValueError("quadrotor mass must be positive")
        _check_spd(self.inertia, "quadrotor inertia")
        if not np.all(self.u_min < self.u_max):
            raise ValueError("u_min must be below u_max componentwise")
        self.inertia_inv = np.linalg.inv(self.inertia)


@dataclass
class LoadParams:
    mass: float = 10.0
    inertia: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 1.5]))
    com_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attachments: np.ndarray = field(default_factory=lambda: _ngon(6, 0.5, 0.1))
    radius: float = 0.75

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float)
        self.com_bias = np.asarray(self.com_bias, dtype=float)
        self.attachments = np.atleast_2d(np.asarray(self.attachments, dtype=float))
        if self.mass <= 0:
            raise ValueError("load mass must be positive")
        if len(self.attachments) < 1:
            raise ValueError("need at least one attachment point")
        _check_spd(self.inertia, "load inertia")
        # 6x6 coupling between vdot and wdot; constant, so factor it once
        r = hat(self.com_bias)
        m = np.zeros((6, 6))
        m[:3, :3] = np.eye(3)
        m[:3, 3:] = -r
        m[3:, :3] = self.mass * r
        m[3:, 3:] = self.inertia
        if abs(np.linalg.det(m)) < 1e-12:
            raise SingularCoupling("load vdot/wdot coupling matrix is singular")
        self.coupling_inv = np.linalg.inv(m)

    @property
    def n_cables(self):
        return len(self.attachments)


@dataclass
class CableParams:
    stiffness: float = 4000.0
    damping: float = 0.01
    length0: float = 2.0
    t_max: float = 100.0

    def __post_init__(self):
        if self.stiffness <= 0 or self.damping < 0 or self.length0 <= 0:
            raise ValueError("cable parameters out of range")


@dataclass
class MotorLag:
    tau: float = 0.033

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("motor time constant must be positive")


def _ngon(n, radius, height):
    ang = 2.0 * np.pi * np.arange(n) / n
    return np.stack([radius * np.cos(ang), radius * np.sin(ang),
                     np.full(n, height)], axis=1)


def _check_spd(m, name):
    if not np.allclose(m, m.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    if np.any(np.linalg.eigvalsh(m) <= 0):
        raise ValueError(f"{name} must be positive definite")


def cable_tension(quad_state, load_state, attach_index, cables, load):
    """Tension vector on the load (world frame) and its magnitude.

    The stretch rate is the analytic time derivative of the cable length,
    using the load's body-frame velocity and angular rate.
    """
    rot_l = quat_to_rot(load_state.q)
    r_i = load.attachments[attach_index]
    rel = quad_state.p - load_state.p - rot_l @ r_i
    length = np.linalg.norm(rel)
    if length < 1e-9:
        raise DegenerateGeometry(
            f"quadrotor {attach_index + 1} coincides with its attachment point")
    rel_dot = quad_state.v - rot_l @ load_state.v - rot_l @ np.cross(load_state.w, r_i)
    if length > cables.length0:
        ldot = float(rel @ rel_dot) / length
        mag = cables.stiffness * (length - cables.length0) \
            + cables.damping * cables.stiffness * ldot
    else:
        mag = 0.0
    return mag * rel / length, mag


def quad_derivative(state, control, tension_on_quad, params):
    """Time derivative of a quadrotor state under thrust, torque, tension."""
    f, tau = control[0], np.asarray(control[1:4], dtype=float)
    rot = quat_to_rot(state.q)
    vdot = (-params.mass * GRAVITY * E3 + rot @ (f * E3) + tension_on_quad) / params.mass
    wdot = params.inertia_inv @ (-np.cross(state.w, params.inertia @ state.w) + tau)
    return np.concatenate([state.v, vdot, quat_deriv(state.q, state.w), wdot])


def load_derivative(state, tensions, params):
    """Time derivative of the load state given world-frame cable tensions.

    The translational and rotational accelerations reference each other
    through the CoM bias, so both are recovered from one 6x6 linear solve.
    """
    tensions = np.atleast_2d(np.asarray(tensions, dtype=float))
    if len(tensions) != params.n_cables:
        raise ValueError("need one tension vector per cable")
    rot = quat_to_rot(state.q)
    w, v, r_g = state.w, state.v, params.com_bias
    sum_t = tensions.sum(axis=0)
    b1 = -np.cross(w, v) - np.cross(w, np.cross(w, r_g)) \
        + rot.T @ (sum_t - params.mass * GRAVITY * E3) / params.mass
    torque = np.zeros(3)
    for r_i, t_i in zip(params.attachments, tensions):
        torque += np.cross(r_i, rot.T @ t_i)
    b2 = torque - np.cross(r_g, rot.T @ (params.mass * GRAVITY * E3)) \
        - np.cross(w, params.inertia @ w) \
        - params.mass * np.cross(r_g, np.cross(w, v))
    vw = params.coupling_inv @ np.concatenate([b1, b2])
    return np.concatenate([rot @ v, vw[:3], quat_deriv(state.q, state.w), vw[3:]])


@dataclass
class World:
    """Actual multilift system: n quadrotors, load, cables, motor lag."""

    quad_params: QuadParams
    load_params: LoadParams
    cables: CableParams
    motor: MotorLag
    quads: list
    load: RigidState
    controls: np.ndarray  # realized controls, shape (n, 4)
    t: float = 0.0

    @property
    def n(self):
        return len(self.quads)

    def copy(self):
        return World(self.quad_params, self.load_params, self.cables, self.motor,
                     [s.copy() for s in self.quads], self.load.copy(),
                     self.controls.copy(), self.t)

    def pack(self):
        parts = [s.as_vector() for s in self.quads]
        parts.append(self.load.as_vector())
        parts.append(self.controls.reshape(-1))
        return np.concatenate(parts)

    def unpack(self, y):
        n = self.n
        quads = [RigidState.from_vector(y[13 * i:13 * (i + 1)]) for i in range(n)]
        load = RigidState.from_vector(y[13 * n:13 * (n + 1)])
        controls = y[13 * (n + 1):].reshape(n, 4)
        return quads, load, controls

    def tensions(self):
        """Current tension vectors on the load and their magnitudes."""
        vecs, mags = [], []
        for i in range(self.n):
            t_vec, t_mag = cable_tension(self.quads[i], self.load, i,
                                         self.cables, self.load_params)
            vecs.append(t_vec)
            mags.append(t_mag)
        return np.array(vecs), np.array(mags)

    def _rhs(self, y, commanded):
        quads, load, controls = self.unpack(y)
        tension_vecs = [cable_tension(quads[i], load, i, self.cables,
                                      self.load_params)[0] for i in range(self.n)]
        out = []
        for i in range(self.n):
            out.append(quad_derivative(quads[i], controls[i], -tension_vecs[i],
                                       self.quad_params))
        out.append(load_derivative(load, tension_vecs, self.load_params))
        out.append(((commanded - controls) / self.motor.tau).reshape(-1))
        return np.concatenate(out)

    def energy(self):
        """Kinetic + gravitational + cable elastic energy (GC-frame load KE)."""
        e = 0.0
        for s in self.quads:
            e += 0.5 * self.quad_params.mass * s.v @ s.v
            e += 0.5 * s.w @ (self.quad_params.inertia @ s.w)
            e += self.quad_params.mass * GRAVITY * s.p[2]
        lp, ls = self.load_params, self.load
        rot = quat_to_rot(ls.q)
        e += 0.5 * lp.mass * ls.v @ ls.v + 0.5 * ls.w @ (lp.inertia @ ls.w)
        e += lp.mass * ls.v @ np.cross(ls.w, lp.com_bias)
        e += lp.mass * GRAVITY * (ls.p + rot @ lp.com_bias)[2]
        for i in range(self.n):
            rel = self.quads[i].p - ls.p - rot @ lp.attachments[i]
            stretch = max(np.linalg.norm(rel) - self.cables.length0, 0.0)
            e += 0.5 * self.cables.stiffness * stretch ** 2
        return e


def step_world(world, commanded_controls, dt):
    """Advance the world by one RK4 step of length dt.

    Tensions are re-evaluated inside every RK4 stage; quaternions are
    renormalized once after the full step.  Raises WorldFault naming the
    first agent whose state goes non-finite.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    commanded = np.asarray(commanded_controls, dtype=float).reshape(world.n, 4)
    out = world.copy()
    y = out.pack()
    k1 = out._rhs(y, commanded)
    k2 = out._rhs(y + 0.5 * dt * k1, commanded)
    k3 = out._rhs(y + 0.5 * dt * k2, commanded)
    k4 = out._rhs(y + dt * k3, commanded)
    y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    quads, load, controls = out.unpack(y)
    for i, s in enumerate(quads):
        if not np.all(np.isfinite(s.as_vector())):
            raise WorldFault(f"q{i + 1}")
        s.q = normalize(s.q)
    if not np.all(np.isfinite(load.as_vector())):
        raise WorldFault("load")
    if not np.all(np.isfinite(controls)):
        raise WorldFault("motors")
    load.q = normalize(load.q)
    out.quads, out.load, out.controls = quads, load, controls
    out.t = world.t + dt
    return out
