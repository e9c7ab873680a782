import numpy as np
import pytest

from multilift.distmpc import DistributedMpc, MpcTeam
from multilift.ocp import SolveOptions, solve_ocp
from multilift.scenarios import equilibrium_world, fixture_scenario

TIGHT = SolveOptions(tol=1e-10, max_iter=300)


def fixture_thetas(n):
    """Deterministic, deliberately non-uniform weights inside [0.01, 100]."""
    thetas = {}
    for i in range(n):
        qx = 2.0 + 0.3 * np.arange(12) + 0.5 * i
        qu = np.array([0.4, 0.6, 0.55, 0.5]) + 0.05 * i
        qxn = 3.0 + 0.2 * np.arange(12)
        thetas[f"q{i + 1}"] = np.r_[qx, qu, qxn]
    thetas["load"] = np.r_[2.5 + 0.25 * np.arange(12),
                           0.3 + 0.05 * np.arange(n),
                           4.0 + 0.15 * np.arange(12)]
    return thetas


def perturbed_feedback(scenario, seed=23, scale=1.0):
    rng = np.random.default_rng(seed)
    world = equilibrium_world(scenario)
    feedback = {}
    for i in range(scenario.n):
        x = world.quads[i].as_vector()
        x[0:3] += scale * np.r_[rng.normal(size=2) * 0.03,
                                0.01 + 0.02 * rng.random()]
        x[3:6] += scale * rng.normal(size=3) * 0.08
        x[10:13] += scale * rng.normal(size=3) * 0.05
        feedback[f"q{i + 1}"] = x
    xl = world.load.as_vector()
    xl[0:3] += scale * np.r_[rng.normal(size=2) * 0.02, -0.01]
    xl[3:6] += scale * rng.normal(size=3) * 0.05
    feedback["load"] = xl
    return feedback


class GradFixture:
    """Converged per-agent problems/solutions with frozen externals."""

    def __init__(self, n=2, horizon=5, seed=23):
        self.scenario = fixture_scenario(n=n, mpc={"N": horizon})
        self.team = MpcTeam.from_scenario(self.scenario)
        self.refs = self.scenario.references()
        self.window = self.refs.window(0.0, horizon, self.team.dt,
                                       self.scenario.quad["mass"])
        self.thetas = fixture_thetas(n)
        self.feedback = perturbed_feedback(self.scenario, seed)
        self.n = n
        mpc = DistributedMpc(self.team, self.window, self.thetas)
        result = mpc.run(self.feedback, delta=1e-5, k_max=10)
        self.bundle = result["bundle"]
        self.mpc = mpc
        self.problems, self.solutions = {}, {}
        for agent in [f"q{i + 1}" for i in range(n)] + ["load"]:
            prob = self.build_problem(agent)
            self.problems[agent] = prob
            self.solutions[agent] = solve_ocp(
                prob, warm_start=result["solutions"][agent], options=TIGHT)

    def build_problem(self, agent, thetas=None, bundle=None, feedback=None):
        thetas = thetas if thetas is not None else self.thetas
        bundle = bundle if bundle is not None else self.bundle
        feedback = feedback if feedback is not None else self.feedback
        mpc = DistributedMpc(self.team, self.window, thetas)
        if agent == "load":
            return mpc.build_load_ocp(feedback["load"], bundle)
        i = int(agent[1:]) - 1
        return mpc.build_quad_ocp(i, feedback[agent], bundle)

    def resolve(self, agent, thetas=None, bundle=None, feedback=None):
        prob = self.build_problem(agent, thetas, bundle, feedback)
        return solve_ocp(prob, warm_start=self.solutions[agent], options=TIGHT)

    # -- finite differences of the first optimal control ----------------------
    def fd_own_theta(self, agent, j, h=1e-4):
        up, dn_ = dict(self.thetas), dict(self.thetas)
        up[agent] = up[agent].copy()
        dn_[agent] = dn_[agent].copy()
        up[agent][j] += h
        dn_[agent][j] -= h
        return (self.resolve(agent, thetas=up).u[0]
                - self.resolve(agent, thetas=dn_).u[0]) / (2 * h)

    def fd_feedback(self, agent, j, h=1e-4):
        up, dn_ = {**self.feedback}, {**self.feedback}
        up[agent] = up[agent].copy()
        dn_[agent] = dn_[agent].copy()
        up[agent][j] += h
        dn_[agent][j] -= h
        return (self.resolve(agent, feedback=up).u[0]
                - self.resolve(agent, feedback=dn_).u[0]) / (2 * h)

    def fd_peer_state(self, agent, peer, j, h=1e-4):
        up, dn_ = self.bundle.copy(), self.bundle.copy()
        up.x[peer][0, j] += h
        dn_.x[peer][0, j] -= h
        return (self.resolve(agent, bundle=up).u[0]
                - self.resolve(agent, bundle=dn_).u[0]) / (2 * h)

    def fd_peer_control(self, agent, j, h=1e-4):
        up, dn_ = self.bundle.copy(), self.bundle.copy()
        up.u["load"][0, j] += h
        dn_.u["load"][0, j] -= h
        return (self.resolve(agent, bundle=up).u[0]
                - self.resolve(agent, bundle=dn_).u[0]) / (2 * h)


_CACHE = {}


@pytest.fixture(scope="session")
def grad_fixture():
    if "grad" not in _CACHE:
        _CACHE["grad"] = GradFixture()
    return _CACHE["grad"]


def within_tolerance(analytic, fd, abs_tol=1e-3, rel_tol=0.01):
    analytic = np.asarray(analytic)
    fd = np.asarray(fd)
    err = np.abs(analytic - fd)
    allowed = np.maximum(abs_tol, rel_tol * np.abs(fd))
    return bool(np.all(err <= allowed)), float(np.max(err - allowed))
