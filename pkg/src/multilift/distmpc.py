"""Distributed MPC: fixed-point iteration over per-agent problems.

Each round solves every quadrotor problem against the previous round's
trajectories (Jacobi, parallelizable), then the load problem against the
freshly updated quadrotor plans (Gauss-Seidel).  Rounds repeat until the
largest per-agent trajectory change drops below a threshold or a round
cap is hit; non-convergence returns the best bundle rather than failing,
matching receding-horizon use.

The load has no computer of its own: quadrotor 0 acts as the central
agent and solves the load problem as well.  In this in-process
implementation that only shows up as the fixed reduction order.
"""

from dataclasses import dataclass, field

import numpy as np

from .ocp import InfeasibleStart, LoadOcp, OcpSolution, QuadOcp, SolveOptions, solve_ocp
from .parallel import parallel_map


class AgentSolveError(RuntimeError):
    def __init__(self, agent_id, cause):
        self.agent_id = agent_id
        self.cause = cause
        super().__init__(f"OCP solve failed for agent {agent_id}: {cause}")


def agent_ids(n):
    return [f"q{i + 1}" for i in range(n)] + ["load"]


@dataclass
class TrajectoryBundle:
    """Per-agent state/control trajectories plus the round bookkeeping."""

    x: dict
    u: dict
    iteration: int = 0
    error: float = np.inf

    def copy(self):
        return TrajectoryBundle({k: v.copy() for k, v in self.x.items()},
                                {k: v.copy() for k, v in self.u.items()},
                                self.iteration, self.error)


def bundle_change(new, old, horizon):
    """Max over agents of the per-step trajectory change norms."""
    e = 0.0
    for key in new.x:
        e = max(e, np.linalg.norm(new.x[key] - old.x[key]) / horizon,
                np.linalg.norm(new.u[key] - old.u[key]) / horizon)
    return e


@dataclass
class MpcTeam:
    """Static problem data shared by every per-tick MPC instance."""

    n: int
    quad_params: object
    load_params: object
    length0: float
    t_max: float
    d_quad: float
    d_load: float
    dt: float
    horizon: int
    gamma: float
    obstacle: dict = None
    solve_options: SolveOptions = field(default_factory=SolveOptions)

    @classmethod
    def from_scenario(cls, sc, mass_scale=1.0):
        return cls(n=sc.n, quad_params=sc.quad_params(),
                   load_params=sc.load_params(mass_scale),
                   length0=sc.cable["length0"], t_max=sc.cable["t_max"],
                   d_quad=sc.quad["radius"], d_load=sc.load["radius"],
                   dt=sc.mpc["dt"], horizon=sc.mpc["N"], gamma=sc.mpc["gamma"],
                   obstacle=sc.obstacle or None,
                   solve_options=SolveOptions(tol=sc.mpc["tol"],
                                              max_iter=sc.mpc["max_iter"]))


class DistributedMpc:
    """One control tick's distributed solve over a frozen reference window.

    ``refs`` is the dict produced by ``ReferenceSet.window`` (any adaptive
    tension offset already applied); ``thetas`` maps agent ids to their
    hyperparameter vectors.  ``theta_kind`` describes how the load's
    vector parameterizes its cost ("weights" or "tension_ref").
    """

    def __init__(self, team, refs, thetas, theta_kind="weights", workers=1):
        self.team = team
        self.refs = refs
        self.thetas = thetas
        self.theta_kind = theta_kind
        self.workers = workers

    # -- problem builders ------------------------------------------------------
    def _split_weights(self, theta, nu):
        theta = np.asarray(theta, dtype=float)
        return theta[:12], theta[12:12 + nu], theta[12 + nu:24 + nu]

    def build_quad_ocp(self, i, x_t, bundle):
        qx, qu, qxn = self._split_weights(self.thetas[f"q{i + 1}"], 4)
        peers = [bundle.x[f"q{j + 1}"] for j in range(self.team.n) if j != i]
        return QuadOcp(
            index=i, n_quads=self.team.n, params=self.team.quad_params,
            x0=x_t, dt=self.team.dt, horizon=self.team.horizon,
            qx=qx, qu=qu, qxn=qxn,
            x_ref=self.refs["quads_x"][i], u_ref=self.refs["quads_u"][i],
            gamma=self.team.gamma, ext_load_x=bundle.x["load"],
            ext_load_u=bundle.u["load"], ext_peers=peers,
            attach=self.team.load_params.attachments[i],
            length0=self.team.length0, d_quad=self.team.d_quad,
            u_min=self.team.quad_params.u_min, u_max=self.team.quad_params.u_max,
            obstacle=self.team.obstacle)

    def build_load_ocp(self, x_t, bundle):
        n = self.team.n
        if self.theta_kind == "tension_ref":
            qx, qu, qxn = self._split_weights(self.thetas["load_weights"], n)
        else:
            qx, qu, qxn = self._split_weights(self.thetas["load"], n)
        return LoadOcp(
            params=self.team.load_params, x0=x_t, dt=self.team.dt,
            horizon=self.team.horizon, qx=qx, qu=qu, qxn=qxn,
            x_ref=self.refs["load_x"], u_ref=self.refs["load_u"],
            gamma=self.team.gamma,
            ext_quads=[bundle.x[f"q{j + 1}"] for j in range(n)],
            length0=self.team.length0, d_load=self.team.d_load,
            t_max=self.team.t_max, obstacle=self.team.obstacle,
            theta_kind=self.theta_kind)

    def cold_bundle(self, feedback):
        """Reference-based bundle with first entries at the feedback states."""
        x, u = {}, {}
        for i in range(self.team.n):
            xi = self.refs["quads_x"][i].copy()
            xi[0] = feedback[f"q{i + 1}"]
            x[f"q{i + 1}"] = xi
            u[f"q{i + 1}"] = self.refs["quads_u"][i].copy()
        xl = self.refs["load_x"].copy()
        xl[0] = feedback["load"]
        x["load"] = xl
        u["load"] = self.refs["load_u"].copy()
        return TrajectoryBundle(x, u)

    # -- Algorithm rounds ------------------------------------------------------
    def _solve_agent(self, problem, agent, warm_u):
        warm = OcpSolution(problem.rollout(warm_u), warm_u,
                           np.zeros((self.team.horizon, 13)))
        try:
            try:
                sol = solve_ocp(problem, warm, self.team.solve_options)
            except InfeasibleStart:
                sol = solve_ocp(problem, None, self.team.solve_options)
            if not sol.diagnostics["converged"]:
                # continuation from the best iterate, one more budget
                sol = solve_ocp(problem, sol, self.team.solve_options)
            return sol
        except Exception as err:  # noqa: BLE001 - tag and propagate
            raise AgentSolveError(agent, err) from err

    def solve_round(self, bundle, feedback):
        """One Jacobi-quadrotors / Gauss-Seidel-load round."""
        new = bundle.copy()

        def solve_quad(i):
            agent = f"q{i + 1}"
            problem = self.build_quad_ocp(i, feedback[agent], bundle)
            return self._solve_agent(problem, agent, bundle.u[agent])

        quad_solutions = parallel_map(solve_quad, range(self.team.n),
                                      self.workers)
        for i, sol in enumerate(quad_solutions):
            new.x[f"q{i + 1}"] = sol.x
            new.u[f"q{i + 1}"] = sol.u
        load_problem = self.build_load_ocp(feedback["load"], new)
        load_solution = self._solve_agent(load_problem, "load",
                                          bundle.u["load"])
        new.x["load"] = load_solution.x
        new.u["load"] = load_solution.u
        new.iteration = bundle.iteration + 1
        new.error = bundle_change(new, bundle, self.team.horizon)
        solutions = dict({f"q{i + 1}": s for i, s in enumerate(quad_solutions)},
                         load=load_solution)
        return new, solutions

    def run(self, feedback, warm_bundle=None, delta=1e-2, k_max=5):
        """Iterate rounds until the exchange error drops below delta.

        Returns first controls for every agent, the final bundle, the
        converged per-agent solutions, and diagnostics.  Hitting k_max is
        reported, not raised.
        """
        if delta <= 0 or k_max < 1:
            raise ValueError("need delta > 0 and k_max >= 1")
        bundle = warm_bundle.copy() if warm_bundle else self.cold_bundle(feedback)
        bundle.iteration = 0
        solutions = None
        rounds = 0
        while rounds < k_max:
            bundle, solutions = self.solve_round(bundle, feedback)
            rounds += 1
            if bundle.error < delta:
                break
        first_controls = {a: solutions[a].u[0].copy() for a in solutions}
        diag = {
            "rounds": rounds,
            "e_final": bundle.error,
            "converged": bool(bundle.error < delta),
            "iterations": {a: solutions[a].diagnostics["iterations"]
                           for a in solutions},
            "pmp_residual": {a: solutions[a].diagnostics["pmp_residual"]
                             for a in solutions},
        }
        return {"first_controls": first_controls, "bundle": bundle,
                "solutions": solutions, "diagnostics": diag}


def shift_bundle(bundle):
    """Receding-horizon warm start: drop the first entry, repeat the last."""
    out = bundle.copy()
    for key in out.x:
        out.x[key] = np.vstack([out.x[key][1:], out.x[key][-1:]])
        out.u[key] = np.vstack([out.u[key][1:], out.u[key][-1:]])
    return out
