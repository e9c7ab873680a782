"""Scenario definitions and reference generation.

A Scenario bundles every physical constant, trajectory parameter, and
solver/training setting needed to run an experiment, and round-trips
losslessly through JSON.  References are closed-form circle or figure-8
curves with a quintic speed ramp, so positions, velocities, and
accelerations are analytic and start from rest.

Quadrotor references hang off the load reference through the attachment
geometry at a cable tilt angle beta, measured from the vertical; the
per-cable tension reference splits the load's weight-plus-acceleration
demand evenly across the cables.
"""

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import GRAVITY
from .worldmodel import (CableParams, LoadParams, MotorLag, QuadParams,
                         RigidState, World, _ngon)

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return 10 * u ** 3 - 15 * u ** 4 + 6 * u ** 5


def _smoothstep_d(u):
    inside = (u > 0) & (u < 1)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 30 * u ** 2 - 60 * u ** 3 + 30 * u ** 4, 0.0)


def _smoothstep_int(u):
    # integral of the quintic smoothstep from 0 to u
    u = np.clip(u, 0.0, 1.0)
    return 2.5 * u ** 4 - 3 * u ** 5 + u ** 6


def _phase(t, period, ramp):
    """Ramped phase angle phi(t) with analytic first two derivatives."""
    t = np.asarray(t, dtype=float)
    if period <= 0:
        z = np.zeros_like(t)
        return z, z.copy(), z.copy()
    w_max = 2.0 * np.pi / period
    if ramp <= 0:
        return w_max * t, np.full_like(t, w_max), np.zeros_like(t)
    u = t / ramp
    phi_ramp = w_max * ramp * _smoothstep_int(u)
    phi_after = w_max * ramp * _smoothstep_int(1.0) + w_max * (t - ramp)
    phi = np.where(t < ramp, phi_ramp, phi_after)
    dphi = w_max * np.where(t < ramp, _smoothstep(u), 1.0)
    ddphi = np.where(t < ramp, w_max * _smoothstep_d(u) / ramp, 0.0)
    return phi, dphi, ddphi


class ReferenceSet:
    """Analytic references for the load and every quadrotor."""

    def __init__(self, traj, n, attachments, length0, load_mass, tilt=0.0):
        self.traj = dict(traj)
        self.n = n
        self.attachments = np.asarray(attachments, dtype=float)
        self.length0 = float(length0)
        self.load_mass = float(load_mass)
        self.tilt = float(tilt)
        ang = 2.0 * np.pi * np.arange(n) / n
        self.azimuth = np.stack([np.cos(ang), np.sin(ang), np.zeros(n)], axis=1)

    def load_pva(self, t):
        """Load position, velocity, acceleration in the world frame."""
        t = np.asarray(t, dtype=float)
        kind = self.traj.get("kind", "hover")
        cx, cy = self.traj.get("center", (0.0, 0.0))
        z0 = self.traj.get("height", 2.0)
        base = np.stack([np.broadcast_to(cx, t.shape),
                         np.broadcast_to(cy, t.shape),
                         np.broadcast_to(z0, t.shape)], axis=-1)
        zero = np.zeros(t.shape + (3,))
        if kind == "hover":
            r = self.traj.get("radius", 0.0)
            base = base + np.stack([np.full_like(t, r), np.zeros_like(t),
                                    np.zeros_like(t)], axis=-1)
            return base, zero, zero.copy()
        phi, dphi, ddphi = _phase(t, self.traj.get("period", 0.0),
                                  self.traj.get("ramp", 0.0))
        if kind == "circle":
            r = self.traj["radius"]
            c, s = np.cos(phi), np.sin(phi)
            p_phi = np.stack([r * c, r * s], axis=-1)
            d_phi = np.stack([-r * s, r * c], axis=-1)
            dd_phi = np.stack([-r * c, -r * s], axis=-1)
        elif kind == "figure8":
            ax = self.traj.get("amp_x", self.traj.get("radius", 1.0))
            ay = self.traj.get("amp_y", 0.5 * ax)
            p_phi = np.stack([ax * np.sin(phi), 0.5 * ay * np.sin(2 * phi)], axis=-1)
            d_phi = np.stack([ax * np.cos(phi), ay * np.cos(2 * phi)], axis=-1)
            dd_phi = np.stack([-ax * np.sin(phi), -2 * ay * np.sin(2 * phi)], axis=-1)
        else:
            raise ValueError(f"unknown trajectory kind {kind!r}")
        pos = base.copy()
        pos[..., :2] += p_phi
        vel, acc = zero, zero.copy()
        vel[..., :2] = d_phi * dphi[..., None]
        acc[..., :2] = dd_phi * dphi[..., None] ** 2 + d_phi * ddphi[..., None]
        return pos, vel, acc

    def load_state(self, t):
        p, v, _ = self.load_pva(t)
        out = np.zeros(np.shape(t) + (13,))
        out[..., 0:3] = p
        out[..., 3:6] = v  # identity attitude: body velocity equals world velocity
        out[..., 6] = 1.0
        return out

    def cable_dir(self, i, beta=None):
        beta = self.tilt if beta is None else beta
        return (np.sin(beta) * self.azimuth[i]
                + np.cos(beta) * np.array([0.0, 0.0, 1.0]))

    def quad_state(self, i, t, beta=None):
        p, v, _ = self.load_pva(t)
        out = np.zeros(np.shape(t) + (13,))
        out[..., 0:3] = p + self.attachments[i] + self.length0 * self.cable_dir(i, beta)
        out[..., 3:6] = v
        out[..., 6] = 1.0
        return out

    def tension_ref(self, t, beta=None):
        """Even static split at the *base* configuration tilt.

        The tilt argument is the nominal configuration the split was
        planned for; an adaptive tilt schedule does not change it, so a
        reconfiguration leaves a vertical-support deficit unless a
        learned tension offset is added on top.
        """
        _, _, acc = self.load_pva(t)
        beta = self.tilt if beta is None else beta
        return static_tension_allocation(self.load_mass, acc, beta, self.n)

    def quad_control(self, i, t, quad_mass, beta=None, d_tension=0.0):
        _, _, acc = self.load_pva(t)
        tension = self.tension_ref(t) + d_tension
        demand = quad_mass * (acc + GRAVITY * np.array([0, 0, 1.0])) \
            + tension[..., None] * self.cable_dir(i, beta)
        out = np.zeros(np.shape(t) + (4,))
        out[..., 0] = np.linalg.norm(demand, axis=-1)
        return out

    def load_control(self, t, beta=None, d_tension=0.0):
        tension = self.tension_ref(t) + d_tension
        return np.repeat(tension[..., None], self.n, axis=-1)

    def window(self, t0, horizon, dt, quad_mass, beta=None, d_tension=0.0):
        """Per-agent reference arrays over one MPC horizon."""
        tx = t0 + dt * np.arange(horizon + 1)
        tu = tx[:-1]
        quads_x = [self.quad_state(i, tx, beta) for i in range(self.n)]
        quads_u = [self.quad_control(i, tu, quad_mass, beta, d_tension)
                   for i in range(self.n)]
        return {
            "quads_x": quads_x,
            "quads_u": quads_u,
            "load_x": self.load_state(tx),
            "load_u": self.load_control(tu, beta, d_tension),
        }


def static_tension_allocation(load_mass, accel_ref, beta, n):
    """Even per-cable tension from vertical force balance at tilt beta."""
    if np.cos(beta) <= 1e-9:
        raise ValueError("tilt angle must keep cos(beta) positive")
    accel_ref = np.asarray(accel_ref, dtype=float)
    demand = accel_ref + GRAVITY * np.array([0.0, 0.0, 1.0])
    return load_mass * np.linalg.norm(demand, axis=-1) / (n * np.cos(beta))


def tilt_schedule(p_load, slot):
    """Adaptive cable tilt angle near a slot, in radians."""
    d = np.linalg.norm(np.asarray(p_load, dtype=float) - np.asarray(slot["center"]))
    return slot["beta_min"] + (slot["beta_max"] - slot["beta_min"]) \
        * np.exp(-slot["eta_cf"] * d ** 4)


def slot_beta_max(slot_height, length0, margin=0.1):
    """Largest tilt needed so the hanging depth fits the slot height."""
    arg = np.clip((slot_height - margin) / length0, -1.0, 1.0)
    return float(np.arccos(arg))


@dataclass
class Scenario:
    """Complete experiment description; JSON round-trippable."""

    name: str = "scenario"
    kind: str = "hover"
    n: int = 3
    quad: dict = field(default_factory=dict)
    load: dict = field(default_factory=dict)
    cable: dict = field(default_factory=dict)
    motor_tau: float = 0.033
    trajectory: dict = field(default_factory=lambda: {"kind": "hover", "height": 2.0})
    eval_trajectory: dict = field(default_factory=dict)
    mpc: dict = field(default_factory=dict)
    episode: dict = field(default_factory=dict)
    policy: dict = field(default_factory=dict)
    slot: dict = field(default_factory=dict)
    obstacle: dict = field(default_factory=dict)
    eval_mass_scale: float = 1.0

    def __post_init__(self):
        self.quad = {**_QUAD_DEFAULTS, **self.quad}
        self.load = {**_LOAD_DEFAULTS, **self.load}
        self.cable = {**_CABLE_DEFAULTS, **self.cable}
        self.mpc = {**_MPC_DEFAULTS, **self.mpc}
        self.episode = {**_EPISODE_DEFAULTS, **self.episode}
        self.policy = {**_POLICY_DEFAULTS, **self.policy}
        if self.eval_trajectory and self.trajectory.get("kind") == \
                self.eval_trajectory.get("kind"):
            raise ValueError("evaluation trajectory must differ from training kind")

    # ---- parameter objects -------------------------------------------------
    def quad_params(self):
        q = self.quad
        return QuadParams(q["mass"], np.diag(q["inertia"]), q["radius"],
                          np.array(q["u_min"]), np.array(q["u_max"]))

    def load_params(self, mass_scale=1.0):
        l = self.load
        return LoadParams(l["mass"] * mass_scale, np.diag(l["inertia"]),
                          np.array(l["com_bias"]),
                          _ngon(self.n, l["attach_radius"], l["attach_height"]),
                          l["radius"])

    def cable_params(self):
        c = self.cable
        return CableParams(c["stiffness"], c["damping"], c["length0"], c["t_max"])

    def references(self, which="train", mass_scale=1.0):
        traj = self.trajectory if which == "train" else self.eval_trajectory
        return ReferenceSet(traj, self.n,
                            _ngon(self.n, self.load["attach_radius"],
                                  self.load["attach_height"]),
                            self.cable["length0"],
                            self.load["mass"] * mass_scale,
                            np.deg2rad(traj.get("tilt_deg", 0.0)))

    def slot_config(self):
        if not self.slot:
            return None
        s = dict(self.slot)
        s["beta_min"] = np.deg2rad(s.get("beta_min_deg", 0.0))
        s["beta_max"] = slot_beta_max(s["slot_height"], self.cable["length0"],
                                      s.get("margin", 0.1))
        return s

    def check_feasible(self, which="train"):
        """Reference thrust stays within 90% of the thrust bound."""
        refs = self.references(which)
        t_ep = self.episode["t_ep"]
        ts = np.linspace(0.0, max(t_ep, 1.0), 200)
        worst = max(np.max(self.references(which).quad_control(
            i, ts, self.quad["mass"])[..., 0]) for i in range(self.n))
        limit = 0.9 * self.quad["u_max"][0]
        if worst > limit:
            raise ValueError(
                f"reference thrust {worst:.1f} N exceeds 90% of bound {limit:.1f} N")
        return worst

    # ---- serialization -----------------------------------------------------
    def to_dict(self):
        return copy.deepcopy({
            "name": self.name, "kind": self.kind, "n": self.n,
            "quad": self.quad, "load": self.load, "cable": self.cable,
            "motor_tau": self.motor_tau, "trajectory": self.trajectory,
            "eval_trajectory": self.eval_trajectory, "mpc": self.mpc,
            "episode": self.episode, "policy": self.policy, "slot": self.slot,
            "obstacle": self.obstacle, "eval_mass_scale": self.eval_mass_scale,
        })

    @classmethod
    def from_dict(cls, d):
        return cls(**copy.deepcopy(d))

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


_QUAD_DEFAULTS = {
    "mass": 1.5, "inertia": [0.02, 0.02, 0.04], "radius": 0.15,
    "u_min": [0.0, -3.0, -3.0, -3.0], "u_max": [60.0, 3.0, 3.0, 3.0],
}
_LOAD_DEFAULTS = {
    "mass": 10.0, "inertia": [1.0, 1.0, 1.5], "com_bias": [0.0, 0.0, 0.0],
    "attach_radius": 0.5, "attach_height": 0.1, "radius": 0.75,
}
_CABLE_DEFAULTS = {"stiffness": 4000.0, "damping": 0.01, "length0": 2.0,
                   "t_max": 100.0}
_MPC_DEFAULTS = {
    "N": 10, "dt": 0.02, "gamma": 0.01, "delta": 0.01, "k_max": 5,
    "tol": 1e-6, "max_iter": 100, "theta_min": 0.01, "theta_max": 100.0,
}
_EPISODE_DEFAULTS = {
    "t_ep": 15.0, "dt_world": 0.005, "n_cl": 20, "loss": "tracking",
    "w_pos": 1.0, "w_vel": 0.1, "w_att": 1.0, "w_rate": 0.1,
    "alpha": 1.0, "eta": 1.0, "eta_s": 1.0,
}
_POLICY_DEFAULTS = {
    "hidden": 30, "lr": 1e-3, "betas": [0.9, 0.999], "init_scale": 0.1,
    "obs_mode": "errors", "out_bias": 0.0, "clip_norm": 0.0,
    "lr_decay": 1.0,
}


def equilibrium_world(scenario, mass_scale=1.0, refs=None):
    """World initialized at the t=0 reference with cables pre-stretched to
    carry the static tension, so a hover reference is a true equilibrium."""
    if refs is None:
        refs = scenario.references(mass_scale=mass_scale)
    qp = scenario.quad_params()
    lp = scenario.load_params(mass_scale)
    cp = scenario.cable_params()
    t0 = 0.0
    tension = float(refs.tension_ref(np.asarray(t0)))
    load_x = refs.load_state(np.asarray(t0))
    load_state = RigidState.from_vector(load_x)
    quads, controls = [], []
    stretched = cp.length0 + tension / cp.stiffness
    for i in range(scenario.n):
        x = refs.quad_state(i, np.asarray(t0))
        d = refs.cable_dir(i)
        x[0:3] = load_x[0:3] + refs.attachments[i] + stretched * d
        quads.append(RigidState.from_vector(x))
        controls.append(refs.quad_control(i, np.asarray(t0), qp.mass))
    return World(qp, lp, cp, MotorLag(scenario.motor_tau), quads, load_state,
                 np.array(controls), 0.0)


# ---------------------------------------------------------------------------
# Experiment factories.

def hover_scenario(n=3, load_mass=3.0, **overrides):
    sc = Scenario(
        name=f"hover-{n}q", kind="hover", n=n,
        load={"mass": load_mass, "inertia": _box_inertia(load_mass)},
        trajectory={"kind": "hover", "height": 2.5},
        episode={"t_ep": 1.0},
    )
    return _apply_overrides(sc, overrides)


def weight_learning_scenario(n=6, load_mass=10.0, biased_com=True, desk=False,
                             **overrides):
    """Trajectory-tracking experiment that learns the MPC weightings.

    The full-size variant uses six quadrotors and a 10 kg load with a CoM
    offset of [0.1, 0.1, -0.1] m; the desk variant shrinks the team and
    the episode so the whole study runs in minutes on a laptop.
    """
    if desk:
        n, load_mass = 3, 3.0
    com = [0.1, 0.1, -0.1] if biased_com else [0.0, 0.0, 0.0]
    sc = Scenario(
        name=f"weights-{n}q" + ("-biased" if biased_com else "-uniform"),
        kind="weights", n=n,
        load={"mass": load_mass, "inertia": _box_inertia(load_mass),
              "com_bias": com},
        trajectory={"kind": "circle", "radius": 1.5, "period": 10.0,
                    "height": 2.5, "ramp": 2.0, "center": [0.0, 0.0]},
        eval_trajectory={"kind": "figure8", "amp_x": 1.5, "amp_y": 1.0,
                         "period": 9.0, "height": 2.5, "ramp": 2.0,
                         "center": [0.0, 0.0]},
        episode={"t_ep": 2.5 if desk else 15.0},
        policy={"lr": 6e-3 if desk else 1e-3, "clip_norm": 1.0},
        eval_mass_scale=0.7,
    )
    return _apply_overrides(sc, overrides)


def slot_scenario(n=3, load_mass=3.0, **overrides):
    """Slot-traversal experiment that learns a tension-reference offset."""
    sc = Scenario(
        name=f"slot-{n}q", kind="tension-ref", n=n,
        load={"mass": load_mass, "inertia": _box_inertia(load_mass)},
        trajectory={"kind": "circle", "radius": 1.5, "period": 10.0,
                    "height": 2.5, "ramp": 2.0, "center": [0.0, 0.0],
                    "tilt_deg": 12.0},
        eval_trajectory={"kind": "figure8", "amp_x": 1.5, "amp_y": 1.0,
                         "period": 10.0, "height": 2.5, "ramp": 2.0,
                         "center": [0.0, 0.0]},
        episode={"t_ep": 6.0, "loss": "slot", "alpha": 1.0, "eta": 4.0,
                 "eta_s": 2.0},
        policy={"lr": 2e-2},
        slot={"center": [0.0, 1.5, 2.5], "z_s": 2.42, "slot_height": 1.5,
              "beta_min_deg": 12.0, "eta_cf": 2.0, "margin": 0.1,
              "dt_min": -2.0, "dt_max": 8.0},
    )
    return _apply_overrides(sc, overrides)


def fixture_scenario(n=2, **overrides):
    """Small, fast configuration used by tests and gradient checks."""
    sc = Scenario(
        name=f"fixture-{n}q", kind="weights", n=n,
        load={"mass": 2.0, "inertia": _box_inertia(2.0)},
        cable={"t_max": 60.0},
        trajectory={"kind": "circle", "radius": 1.0, "period": 8.0,
                    "height": 2.0, "ramp": 2.0, "center": [0.0, 0.0]},
        eval_trajectory={"kind": "figure8", "amp_x": 1.0, "amp_y": 0.7,
                         "period": 8.0, "height": 2.0, "ramp": 2.0,
                         "center": [0.0, 0.0]},
        mpc={"N": 5},
        episode={"t_ep": 0.6, "n_cl": 10},
        policy={"obs_mode": "const", "init_scale": 2.0},
    )
    return _apply_overrides(sc, overrides)


def _box_inertia(mass, lx=1.0, ly=1.0, lz=0.4):
    return [mass / 12.0 * (ly ** 2 + lz ** 2),
            mass / 12.0 * (lx ** 2 + lz ** 2),
            mass / 12.0 * (lx ** 2 + ly ** 2)]


def _apply_overrides(sc, overrides):
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(getattr(sc, key), dict):
            getattr(sc, key).update(value)
        else:
            setattr(sc, key, value)
    return sc
