"""Distributed propagation of closed-loop state sensitivities.

The closed loop advances each agent's state through the smooth control
model under the first MPC controls.  Differentiating that map gives a
linear time-varying system in the stacked sensitivities of every agent's
state with respect to every agent's hyperparameters.  The couplings are
sparse: a quadrotor's pair (own-state wrt own theta, load-state wrt own
theta) propagates independently per quadrotor, while the blocks against
the load's hyperparameters exchange one matrix with the central agent
per step.

The update is synchronous: all blocks at t+1 are computed from blocks at
t, with the central sum over quadrotors reduced in index order, so a
parallel run is bitwise identical to a serial one.
"""

from dataclasses import dataclass, field

import numpy as np

from . import dualnum as dn
from .controlmodel import attach_point, load_step, quad_step
from .parallel import parallel_map


class ProtocolError(RuntimeError):
    pass


@dataclass
class SensitivityBlock:
    """One d(state)/d(hyperparameters) matrix with its owners."""

    matrix: np.ndarray
    state_owner: str
    theta_owner: str


@dataclass
class SensitivityStep:
    """All Jacobian factors of one closed-loop step."""

    f_q: list        # per quad: d step / d own state (13, 13)
    f_ql: list       # per quad: coupling to the load state (13, 13)
    g_q: list        # per quad: d step / d own first control (13, 4)
    g_ql: list       # per quad: coupling to the load first control (13, n)
    f_l: np.ndarray  # load: d step / d load state (13, 13)
    f_lq: list       # load: coupling to each quad state (13, 13)
    g_l: np.ndarray  # load: d step / d tension controls (13, n)
    u_q: list        # per quad: d u0 / d own theta (4, m_i)
    u_l: np.ndarray  # load: d u0 / d load theta (n, m_l)

    def validate(self, n):
        for name, seq in [("f_q", self.f_q), ("f_ql", self.f_ql),
                          ("g_q", self.g_q), ("g_ql", self.g_ql),
                          ("f_lq", self.f_lq), ("u_q", self.u_q)]:
            if len(seq) != n:
                raise ProtocolError(f"{name} must have one entry per quadrotor")
        for i in range(n):
            if self.f_q[i].shape != (13, 13) or self.f_ql[i].shape != (13, 13):
                raise ProtocolError(f"bad state-block shape for quad {i + 1}")
            if self.g_ql[i].shape[1] != self.u_l.shape[0]:
                raise ProtocolError(f"g_ql/u_l dims disagree for quad {i + 1}")


def dynamics_jacobians(states, first_controls, dt, quad_params, load_params,
                       attachments):
    """Control-model one-step Jacobians at the closed-loop states."""
    n = len(attachments)
    x_l = states["load"]
    u_l = first_controls["load"]
    out = {"quads": [], "load": {}}
    for i in range(n):
        x, u = states[f"q{i + 1}"], first_controls[f"q{i + 1}"]
        xd, ud, xld, uld = dn.seed(x, u, x_l, u_l)
        nxt = quad_step(xd, ud, attach_point(xld, attachments[i]), uld[i], dt,
                        quad_params)
        out["quads"].append({
            "dx": nxt.der[:, 0:13], "du": nxt.der[:, 13:17],
            "dxl": nxt.der[:, 17:30], "dul": nxt.der[:, 30:30 + n],
        })
    seeds = dn.seed(x_l, u_l,
                    *[states[f"q{i + 1}"][0:3] for i in range(n)])
    xld, uld = seeds[0], seeds[1]
    nxt = load_step(xld, uld, seeds[2:], dt, load_params)
    out["load"]["dx"] = nxt.der[:, 0:13]
    out["load"]["du"] = nxt.der[:, 13:13 + n]
    for i in range(n):
        off = 13 + n + 3 * i
        block = np.zeros((13, 13))
        block[:, 0:3] = nxt.der[:, off:off + 3]  # only positions couple in
        out["load"][f"dxq{i + 1}"] = block
    return out


def assemble_step(states, first_controls, mpc_gradients, dt, quad_params,
                  load_params, attachments):
    """Compose one SensitivityStep from dynamics and controller gradients.

    ``mpc_gradients`` is the dict from ``gradmpc.all_mpc_gradients``:
    per quad the blocks {theta, x_own, x_load, u_load} and for the load
    {theta, x_own, x_quads}.  Dynamics Jacobians are evaluated at the
    closed-loop states and applied first controls.
    """
    n = len(attachments)
    jac = dynamics_jacobians(states, first_controls, dt, quad_params,
                             load_params, attachments)
    gl = mpc_gradients["load"]
    dul_dxl = gl["x_own"]
    f_q, f_ql, g_q, g_ql, f_lq, u_q = [], [], [], [], [], []
    for i in range(n):
        dj = jac["quads"][i]
        gq = mpc_gradients[f"q{i + 1}"]
        dul_dxi = gl["x_quads"][i]
        f_q.append(dj["dx"] + dj["du"] @ (gq["x_own"] + gq["u_load"] @ dul_dxi)
                   + dj["dul"] @ dul_dxi)
        f_ql.append(dj["dxl"] + dj["du"] @ (gq["x_load"]
                                            + gq["u_load"] @ dul_dxl)
                    + dj["dul"] @ dul_dxl)
        g_q.append(dj["du"])
        g_ql.append(dj["du"] @ gq["u_load"] + dj["dul"])
        f_lq.append(jac["load"][f"dxq{i + 1}"] + jac["load"]["du"] @ dul_dxi)
        u_q.append(gq["theta"] if "theta" in gq else np.zeros((4, 0)))
    f_l = jac["load"]["dx"] + jac["load"]["du"] @ dul_dxl
    u_l = gl["theta"] if "theta" in gl else np.zeros((n, 0))
    step = SensitivityStep(f_q=f_q, f_ql=f_ql, g_q=g_q, g_ql=g_ql, f_l=f_l,
                           f_lq=f_lq, g_l=jac["load"]["du"], u_q=u_q, u_l=u_l)
    step.validate(n)
    return step


@dataclass
class SensitivityState:
    """Stacked sensitivity blocks at one closed-loop time."""

    x_qq: list       # per quad: own state wrt own theta (13, m_i)
    x_ql: list       # per quad: load state wrt quad theta (13, m_i)
    x_lq: list       # per quad: quad state wrt load theta (13, m_l)
    x_ll: np.ndarray  # load state wrt load theta (13, m_l)

    @classmethod
    def zero(cls, m_quads, m_load):
        return cls([np.zeros((13, m)) for m in m_quads],
                   [np.zeros((13, m)) for m in m_quads],
                   [np.zeros((13, m_load)) for _ in m_quads],
                   np.zeros((13, m_load)))

    def blocks(self):
        out = []
        for i in range(len(self.x_qq)):
            qi = f"q{i + 1}"
            out.append(SensitivityBlock(self.x_qq[i], qi, qi))
            out.append(SensitivityBlock(self.x_ql[i], "load", qi))
            out.append(SensitivityBlock(self.x_lq[i], qi, "load"))
        out.append(SensitivityBlock(self.x_ll, "load", "load"))
        return out


def propagate(steps, m_quads, m_load, workers=1):
    """Run the sensitivity recursion from a zero initial condition.

    Returns the SensitivityState trajectory of length len(steps)+1; entry
    0 is the zero initial condition at the window start.
    """
    n = len(m_quads)
    state = SensitivityState.zero(m_quads, m_load)
    history = [state]
    for t, step in enumerate(steps):
        if step is None:
            raise ProtocolError(f"missing sensitivity step at offset {t}")
        step.validate(n)
        x_ll = state.x_ll  # broadcast of the load block, pre-update

        def quad_update(i):
            x_qq = step.f_q[i] @ state.x_qq[i] \
                + step.f_ql[i] @ state.x_ql[i] + step.g_q[i] @ step.u_q[i]
            x_ql = step.f_l @ state.x_ql[i] + step.f_lq[i] @ state.x_qq[i]
            x_lq = step.f_q[i] @ state.x_lq[i] + step.f_ql[i] @ x_ll \
                + step.g_ql[i] @ step.u_l
            return x_qq, x_ql, x_lq

        results = parallel_map(quad_update, range(n), workers)
        # central update consumes the quadrotors' pre-update blocks,
        # reduced in index order for bitwise determinism
        new_ll = step.f_l @ x_ll + step.g_l @ step.u_l
        for i in range(n):
            new_ll = new_ll + step.f_lq[i] @ state.x_lq[i]
        state = SensitivityState([r[0] for r in results],
                                 [r[1] for r in results],
                                 [r[2] for r in results], new_ll)
        history.append(state)
    return history


def block_norm_rows(history, start_tick=0):
    """Debug rows (tick, block label, Frobenius norm) for a window."""
    rows = []
    for offset, state in enumerate(history):
        for block in state.blocks():
            rows.append([start_tick + offset,
                         f"x[{block.state_owner}]/theta[{block.theta_owner}]",
                         float(np.linalg.norm(block.matrix))])
    return rows
