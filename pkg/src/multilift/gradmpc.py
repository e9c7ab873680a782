"""Analytic gradients of a converged MPC solve.

Differentiates the first optimal control of a barrier-softened problem
with respect to a generalized hyperparameter: the agent's own cost
parameters, its feedback state, the first state of the coupled agent's
plan, or (for a quadrotor) the load's first virtual control.  The
machinery is implicit differentiation of the discrete first-order
optimality conditions: Hamiltonian second derivatives per stage, a
backward matrix recursion, and a closed-form expression for the first
control's sensitivity.

Which coupling blocks can be nonzero depends on the hyperparameter kind;
structurally-zero blocks are set to exact zeros rather than evaluated.
Per kind (rows: dx0, H_. for k >= 1, H_0^{u.}, E_0, E_{k>=1}):

    own cost parameters   dx0=0, Hxt!=0, Hut!=0, E=0
    own feedback state    dx0=I, all coupling blocks zero
    peer first state      only H_0^{ut} and E_0 nonzero
    peer first control    only H_0^{ut} and E_0 nonzero
"""

from dataclasses import dataclass

import numpy as np

from . import dualnum as dn
from .parallel import parallel_map


class NotStrictlyConvex(RuntimeError):
    pass


class SingularRecursion(RuntimeError):
    def __init__(self, k):
        self.k = k
        super().__init__(f"singular (I + R P) factor at step {k}")


@dataclass
class GeneralizedTheta:
    """Which variable the solution is differentiated against."""

    tag: str            # own_theta | own_feedback_state | peer_state | peer_control
    m: int
    peer_index: int = None


@dataclass
class PmpDerivatives:
    """Stage-wise coefficient matrices of the differentiated conditions."""

    theta: GeneralizedTheta
    F: np.ndarray       # (N, nx, nx)
    G: np.ndarray       # (N, nx, nu)
    Hxx: np.ndarray     # (N, nx, nx)
    Hxu: np.ndarray     # (N, nx, nu)
    Hux: np.ndarray     # (N, nu, nx)
    Huu: np.ndarray     # (N, nu, nu)
    HNxx: np.ndarray    # (nx, nx)
    Hxt: np.ndarray     # (N, nx, m)
    Hut: np.ndarray     # (N, nu, m)
    E: np.ndarray       # (N, nx, m)
    HNxt: np.ndarray    # (nx, m)
    dx0: np.ndarray     # (nx, m)


def hamiltonian_common(solution, problem):
    """Stage Hamiltonian second derivatives shared by every theta kind."""
    x, u, lam = solution.x, solution.u, solution.costates
    nx, nu = problem.nx, problem.nu
    xd, ud = dn.seed2(x[:-1], u)
    f = problem.step_all(xd, ud)
    ham = problem.stage_cost_all(xd, ud) + (f * lam).sum(-1)
    cn = problem.terminal_cost(dn.seed2(x[-1]))
    huu = ham.hess[:, nx:, nx:]
    for k in range(problem.N):
        try:
            np.linalg.cholesky(huu[k])
        except np.linalg.LinAlgError:
            raise NotStrictlyConvex(
                f"H_uu not positive definite at stage {k}") from None
    return {
        "F": f.jac[:, :, :nx], "G": f.jac[:, :, nx:],
        "Hxx": ham.hess[:, :nx, :nx], "Hxu": ham.hess[:, :nx, nx:],
        "Hux": ham.hess[:, nx:, :nx], "Huu": huu,
        "HNxx": cn.hess,
    }


def _zeros(problem, m):
    n, nx, nu = problem.N, problem.nx, problem.nu
    return (np.zeros((n, nx, m)), np.zeros((n, nu, m)), np.zeros((n, nx, m)),
            np.zeros((nx, m)), np.zeros((nx, m)))


def _own_theta_blocks(solution, problem):
    """Cross derivatives for the agent's own cost parameterization.

    Diagonal weights multiply half-squared tracking errors, so the cross
    blocks follow from first-order error Jacobians; a tension-reference
    offset shifts the control reference, giving a constant cross block.
    """
    n, nx, nu = problem.N, problem.nx, problem.nu
    if problem.theta_kind == "tension_ref":
        m = 1
        hxt, hut, e, hnxt, dx0 = _zeros(problem, m)
        hut[:, :, 0] = -problem.qu
        return GeneralizedTheta("own_theta", m), hxt, hut, e, hnxt, dx0
    m = 24 + nu
    hxt, hut, e, hnxt, dx0 = _zeros(problem, m)
    k_all = np.arange(n + 1)
    ex = problem.error_state(dn.seed(solution.x), k_all)
    eu = solution.u - problem.u_ref
    for j in range(12):
        hxt[:, :, j] = ex.val[:n, j, None] * ex.der[:n, j, :]
    for j in range(nu):
        hut[:, j, 12 + j] = eu[:, j]
    for j in range(12):
        hnxt[:, 12 + nu + j] = ex.val[n, j] * ex.der[n, j, :]
    return GeneralizedTheta("own_theta", m), hxt, hut, e, hnxt, dx0


def _peer_blocks(solution, problem, tag, peer_index=None):
    """H_0^{u theta} and E_0 for couplings through the stage-0 externals."""
    x0, u0, lam1 = solution.x[0], solution.u[0], solution.costates[0]
    nu = problem.nu
    if problem.kind == "quad" and tag == "peer_state":
        m = 13
        ud, extd = dn.seed2(u0, problem.ext_load_x[0])
        f = problem.step0_ext(x0, ud, extd, problem.ext_load_u[0, problem.index])
        ham = problem.cost0_ext(x0, ud, extd) + (f * lam1).sum(-1)
    elif problem.kind == "quad" and tag == "peer_control":
        m = problem.ext_load_u.shape[1]
        ud, extd = dn.seed2(u0, problem.ext_load_u[0])
        f = problem.step0_ext(x0, ud, problem.ext_load_x[0],
                              extd[problem.index])
        ham = problem._tracking_terms(x0, ud, np.asarray(0)) \
            + problem._geometry_terms(x0, 0) + problem._bound_terms(ud) \
            + (f * lam1).sum(-1)
    elif problem.kind == "load" and tag == "peer_state":
        m = 13
        ud, extd = dn.seed2(u0, problem.ext_quads[peer_index][0])
        ext_list = [extd if i == peer_index else problem.ext_quads[i][0]
                    for i in range(problem.params.n_cables)]
        f = problem.step0_ext(x0, ud, ext_list)
        ham = problem.cost0_ext(x0, ud, ext_list) + (f * lam1).sum(-1)
    else:
        raise ValueError(f"unsupported peer tag {tag} for {problem.kind}")
    hxt, hut, e, hnxt, dx0 = _zeros(problem, m)
    hut[0] = ham.hess[0:nu, nu:nu + m]
    e[0] = f.jac[:, nu:nu + m]
    return GeneralizedTheta(tag, m, peer_index), hxt, hut, e, hnxt, dx0


def build_pmp_derivatives(solution, problem, theta_tag, peer_index=None,
                          common=None, residual_gate=1e-5):
    """Coefficient matrices for one generalized hyperparameter.

    ``theta_tag`` is one of own_theta, own_feedback_state, peer_state,
    peer_control; peer_state on the load takes the quadrotor index.
    """
    residual = solution.diagnostics.get("pmp_residual")
    if residual is not None and residual > residual_gate:
        raise ValueError(f"solution not converged (residual {residual:.2e})")
    if common is None:
        common = hamiltonian_common(solution, problem)
    if theta_tag == "own_theta":
        theta, hxt, hut, e, hnxt, dx0 = _own_theta_blocks(solution, problem)
    elif theta_tag == "own_feedback_state":
        theta = GeneralizedTheta(theta_tag, problem.nx)
        hxt, hut, e, hnxt, dx0 = _zeros(problem, problem.nx)
        dx0 = np.eye(problem.nx)
    elif theta_tag in ("peer_state", "peer_control"):
        theta, hxt, hut, e, hnxt, dx0 = _peer_blocks(solution, problem,
                                                     theta_tag, peer_index)
    else:
        raise ValueError(f"unknown theta tag {theta_tag}")
    return PmpDerivatives(theta=theta, Hxt=hxt, Hut=hut, E=e, HNxt=hnxt,
                          dx0=dx0, **common)


def _stage_pieces(d, k):
    huu_inv = np.linalg.inv(d.Huu[k])
    a = d.F[k] - d.G[k] @ huu_inv @ d.Hux[k]
    r = d.G[k] @ huu_inv @ d.G[k].T
    m = d.E[k] - d.G[k] @ huu_inv @ d.Hut[k]
    q = d.Hxx[k] - d.Hxu[k] @ huu_inv @ d.Hux[k]
    nmat = d.Hxt[k] - d.Hxu[k] @ huu_inv @ d.Hut[k]
    return huu_inv, a, r, m, q, nmat


def backward_pw(derivs):
    """Backward recursion for the value sensitivities; returns (P1, W1).

    Starts at P_N, W_N from the terminal second derivatives; for a
    one-step problem the recursion is empty.
    """
    p = derivs.HNxx.copy()
    w = derivs.HNxt.copy()
    n = derivs.F.shape[0]
    eye = np.eye(p.shape[0])
    for k in range(n - 1, 0, -1):
        _, a, r, m, q, nmat = _stage_pieces(derivs, k)
        irp = eye + r @ p
        try:
            factor = np.linalg.solve(irp, np.column_stack([a, m - r @ w]))
        except np.linalg.LinAlgError:
            raise SingularRecursion(k) from None
        sol_a = factor[:, :a.shape[1]]
        sol_m = factor[:, a.shape[1]:]
        p_new = q + a.T @ p @ sol_a
        w_new = a.T @ p @ sol_m + a.T @ w + nmat
        p, w = 0.5 * (p_new + p_new.T), w_new
    return p, w


def first_control_gradient(derivs, p1, w1, dx0_dtheta=None):
    """Sensitivity of the first optimal control to the hyperparameter."""
    dx0 = derivs.dx0 if dx0_dtheta is None else dx0_dtheta
    huu_inv, a0, r0, m0, _, _ = _stage_pieces(derivs, 0)
    eye = np.eye(p1.shape[0])
    try:
        inner = np.linalg.solve(eye + r0 @ p1,
                                (m0 - r0 @ w1) + a0 @ dx0)
    except np.linalg.LinAlgError:
        raise SingularRecursion(0) from None
    rhs = derivs.Hux[0] @ dx0 + derivs.G[0].T @ w1 + derivs.Hut[0] \
        + derivs.G[0].T @ p1 @ inner
    return -huu_inv @ rhs


def gradient_for_tag(solution, problem, theta_tag, peer_index=None,
                     common=None):
    d = build_pmp_derivatives(solution, problem, theta_tag, peer_index, common)
    p1, w1 = backward_pw(d)
    return first_control_gradient(d, p1, w1)


def _stacked_gradients(solution, problem, tags, residual_gate=1e-5):
    """One shared recursion for several tags (columns concatenated)."""
    common = hamiltonian_common(solution, problem)
    derivs = [build_pmp_derivatives(solution, problem, tag, idx, common,
                                    residual_gate)
              for tag, idx in tags]
    widths = [d.theta.m for d in derivs]
    stacked = PmpDerivatives(
        theta=GeneralizedTheta("stacked", sum(widths)),
        F=common["F"], G=common["G"], Hxx=common["Hxx"], Hxu=common["Hxu"],
        Hux=common["Hux"], Huu=common["Huu"], HNxx=common["HNxx"],
        Hxt=np.concatenate([d.Hxt for d in derivs], axis=2),
        Hut=np.concatenate([d.Hut for d in derivs], axis=2),
        E=np.concatenate([d.E for d in derivs], axis=2),
        HNxt=np.concatenate([d.HNxt for d in derivs], axis=1),
        dx0=np.concatenate([d.dx0 for d in derivs], axis=1))
    p1, w1 = backward_pw(stacked)
    grad = first_control_gradient(stacked, p1, w1)
    out, off = [], 0
    for width in widths:
        out.append(grad[:, off:off + width])
        off += width
    return out


def quad_gradients(solution, problem, include_theta=True,
                   residual_gate=1e-5):
    """The quadrotor's first-control sensitivities used downstream."""
    tags = ([("own_theta", None)] if include_theta else []) \
        + [("own_feedback_state", None), ("peer_state", None),
           ("peer_control", None)]
    grads = _stacked_gradients(solution, problem, tags, residual_gate)
    out = {}
    names = (["theta"] if include_theta else []) + ["x_own", "x_load", "u_load"]
    for name, grad in zip(names, grads):
        out[name] = grad
    return out


def load_gradients(solution, problem, n_quads, include_theta=True,
                   residual_gate=1e-5):
    tags = ([("own_theta", None)] if include_theta else []) \
        + [("own_feedback_state", None)] \
        + [("peer_state", i) for i in range(n_quads)]
    grads = _stacked_gradients(solution, problem, tags, residual_gate)
    out = {}
    idx = 0
    if include_theta:
        out["theta"] = grads[idx]
        idx += 1
    out["x_own"] = grads[idx]
    out["x_quads"] = grads[idx + 1:]
    return out


def all_mpc_gradients(solutions, problems, n_quads, theta_agents=None,
                      workers=1, residual_gate=1e-5):
    """Per-agent gradient batches; quadrotors run concurrently.

    ``theta_agents`` limits which agents get their own-theta column
    batch (None means all); the feedback/peer couplings are always
    produced since the sensitivity propagation needs them.
    """

    def one(agent):
        with_theta = theta_agents is None or agent in theta_agents
        try:
            if agent == "load":
                return load_gradients(solutions[agent], problems[agent],
                                      n_quads, with_theta, residual_gate)
            return quad_gradients(solutions[agent], problems[agent],
                                  with_theta, residual_gate)
        except Exception as err:  # noqa: BLE001
            raise RuntimeError(f"gradient batch failed for {agent}: {err}") \
                from err

    agents = [f"q{i + 1}" for i in range(n_quads)] + ["load"]
    results = parallel_map(one, agents, workers)
    return dict(zip(agents, results))
