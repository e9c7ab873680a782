"""Analytic-vs-finite-difference report across the differentiable stack.

Backs the check-gradients subcommand: builds a small converged fixture,
then compares analytic derivatives against central differences for the
MPC first-control gradients (every hyperparameter kind), the one-step
sensitivity blocks, policy backprop, and the training losses.  Each
check yields a report row; a row fails when the error exceeds
max(1e-3, 1% of the reference), except losses and policy backprop which
are held to much tighter tolerances.
"""

import numpy as np

from . import gradmpc
from .distmpc import DistributedMpc, MpcTeam
from .dsp import assemble_step
from .ocp import SolveOptions, solve_ocp
from .policy import PolicyNet, forward, jacobian
from .scenarios import equilibrium_world
from .trainer import (ClosedLoop, EpisodeConfig, obstacle_loss, slot_loss,
                      tracking_loss)

TIGHT = SolveOptions(tol=1e-10, max_iter=300)


def _row(module, case, component, analytic, fd, abs_tol=1e-3, rel_tol=0.01):
    err = abs(analytic - fd)
    allowed = max(abs_tol, rel_tol * abs(fd))
    return [module, case, component, analytic, fd, err, allowed,
            "ok" if err <= allowed else "FAIL"]


class _Fixture:
    def __init__(self, scenario, seed=23):
        rng = np.random.default_rng(seed)
        self.scenario = scenario
        self.team = MpcTeam.from_scenario(scenario)
        refs = scenario.references()
        self.window = refs.window(0.0, self.team.horizon, self.team.dt,
                                  scenario.quad["mass"])
        n = scenario.n
        self.thetas = {}
        for i in range(n):
            self.thetas[f"q{i + 1}"] = np.r_[2.0 + 0.3 * np.arange(12),
                                             np.full(4, 0.5),
                                             3.0 + 0.2 * np.arange(12)]
        self.thetas["load"] = np.r_[2.5 + 0.25 * np.arange(12),
                                    np.full(n, 0.3),
                                    4.0 + 0.15 * np.arange(12)]
        world = equilibrium_world(scenario)
        self.feedback = {}
        for i in range(n):
            x = world.quads[i].as_vector()
            x[0:3] += np.r_[rng.normal(size=2) * 0.03, 0.02]
            x[3:6] += rng.normal(size=3) * 0.08
            self.feedback[f"q{i + 1}"] = x
        xl = world.load.as_vector()
        xl[0:2] += rng.normal(size=2) * 0.02
        self.feedback["load"] = xl
        mpc = DistributedMpc(self.team, self.window, self.thetas)
        result = mpc.run(self.feedback, delta=1e-5, k_max=10)
        self.bundle = result["bundle"]
        self.problems, self.solutions = {}, {}
        for agent in list(self.thetas):
            prob = self.build(agent)
            self.problems[agent] = prob
            self.solutions[agent] = solve_ocp(prob, result["solutions"][agent],
                                              TIGHT)

    def build(self, agent, thetas=None, bundle=None, feedback=None):
        mpc = DistributedMpc(self.team, self.window,
                             thetas if thetas is not None else self.thetas)
        bundle = bundle if bundle is not None else self.bundle
        feedback = feedback if feedback is not None else self.feedback
        if agent == "load":
            return mpc.build_load_ocp(feedback["load"], bundle)
        return mpc.build_quad_ocp(int(agent[1:]) - 1, feedback[agent], bundle)

    def resolve(self, agent, **kw):
        return solve_ocp(self.build(agent, **kw), self.solutions[agent], TIGHT)


def check_mpc_gradients(fx, report):
    h = 1e-4
    for agent in ("q1", "load"):
        sol, prob = fx.solutions[agent], fx.problems[agent]
        if agent == "load":
            grads = gradmpc.load_gradients(sol, prob, fx.scenario.n)
        else:
            grads = gradmpc.quad_gradients(sol, prob)
        for j in (0, 13, 16):  # position, control, terminal weight columns
            up, dn_ = dict(fx.thetas), dict(fx.thetas)
            up[agent] = up[agent].copy()
            dn_[agent] = dn_[agent].copy()
            up[agent][j] += h
            dn_[agent][j] -= h
            fd = (fx.resolve(agent, thetas=up).u[0]
                  - fx.resolve(agent, thetas=dn_).u[0]) / (2 * h)
            for c in range(len(fd)):
                report.append(_row("grad-mpc", f"{agent}/theta[{j}]", c,
                                   grads["theta"][c, j], fd[c]))
        for j in (0, 4):
            up, dn_ = dict(fx.feedback), dict(fx.feedback)
            up[agent] = up[agent].copy()
            dn_[agent] = dn_[agent].copy()
            up[agent][j] += h
            dn_[agent][j] -= h
            fd = (fx.resolve(agent, feedback=up).u[0]
                  - fx.resolve(agent, feedback=dn_).u[0]) / (2 * h)
            for c in range(len(fd)):
                report.append(_row("grad-mpc", f"{agent}/x_t[{j}]", c,
                                   grads["x_own"][c, j], fd[c]))
        peer = "load" if agent != "load" else "q1"
        block = grads["x_load"] if agent != "load" else grads["x_quads"][0]
        for j in (0, 2):
            up, dn_ = fx.bundle.copy(), fx.bundle.copy()
            up.x[peer][0, j] += h
            dn_.x[peer][0, j] -= h
            fd = (fx.resolve(agent, bundle=up).u[0]
                  - fx.resolve(agent, bundle=dn_).u[0]) / (2 * h)
            for c in range(len(fd)):
                report.append(_row("grad-mpc", f"{agent}/peer[{j}]", c,
                                   block[c, j], fd[c]))
    # quadrotor sensitivity to the load's first virtual control
    grads = gradmpc.quad_gradients(fx.solutions["q1"], fx.problems["q1"])
    for j in range(fx.scenario.n):
        up, dn_ = fx.bundle.copy(), fx.bundle.copy()
        up.u["load"][0, j] += 1e-4
        dn_.u["load"][0, j] -= 1e-4
        fd = (fx.resolve("q1", bundle=up).u[0]
              - fx.resolve("q1", bundle=dn_).u[0]) / 2e-4
        for c in range(len(fd)):
            report.append(_row("grad-mpc", f"q1/u_load[{j}]", c,
                               grads["u_load"][c, j], fd[c]))


def check_dsp_blocks(fx, report):
    """FD of the idealized one-tick closed-loop map per coupling block."""
    sc = fx.scenario
    cfg = EpisodeConfig.from_scenario(sc, plant="control", exchange="ideal",
                                      ideal_tol=1e-10, update=False)
    loop = ClosedLoop(sc, cfg)
    states = {k: v.copy() for k, v in fx.feedback.items()}

    def tick(stt):
        thetas = dict(fx.thetas)
        window = loop.tick_window(0.0, None, 0.0)
        result, problems = loop.solve_tick_ideal(window, thetas, stt, {})
        first = result["first_controls"]
        nxt = loop.advance_plant(stt, first, {}, 0)
        return nxt, result, problems, first

    nxt, result, problems, first = tick(states)
    grads = gradmpc.all_mpc_gradients(result["solutions"], problems, sc.n)
    step = assemble_step(states, first, grads, cfg.dt_ctrl,
                         loop.team.quad_params, loop.team.load_params,
                         loop.team.load_params.attachments)
    h = 1e-5
    for agent, ref_blocks in [("q1", [("f_q", step.f_q[0], "q1"),
                                      ("f_lq", step.f_lq[0], "load")]),
                              ("load", [("f_ql", step.f_ql[0], "q1"),
                                        ("f_l", step.f_l, "load")])]:
        for j in (0, 2):
            up = {k: v.copy() for k, v in states.items()}
            dn_ = {k: v.copy() for k, v in states.items()}
            up[agent][j] += h
            dn_[agent][j] -= h
            col = {a: (tick(up)[0][a] - tick(dn_)[0][a]) / (2 * h)
                   for a in states}
            for name, block, target in ref_blocks:
                for c in (2, 5):
                    report.append(_row("dsp", f"{name}[{j}]", c,
                                       block[c, j], col[target][c]))


def check_policy(report):
    net = PolicyNet.create(6, 5, seed=12)
    obs = np.linspace(-0.5, 0.5, 6)
    theta, jac = jacobian(net, obs)
    params = net.parameter_vector()
    h = 1e-6
    rng = np.random.default_rng(2)
    for col in rng.choice(params.size, size=8, replace=False):
        dp = params.copy()
        dp[col] += h
        net.set_parameter_vector(dp)
        up, _ = forward(net, obs)
        dp[col] -= 2 * h
        net.set_parameter_vector(dp)
        down, _ = forward(net, obs)
        net.set_parameter_vector(params)
        fd = (up - down) / (2 * h)
        for out in range(net.n_out):
            report.append(_row("policy", f"dTheta/dw[{col}]", out,
                               jac[out, col], fd[out], abs_tol=1e-7,
                               rel_tol=1e-5))


def check_losses(report):
    rng = np.random.default_rng(3)
    states = np.zeros((3, 13))
    states[:, 0:3] = rng.normal(size=(3, 3))
    states[:, 2] += 2.0
    q = rng.normal(size=(3, 4))
    states[:, 6:10] = q / np.linalg.norm(q, axis=1, keepdims=True)
    refs = states + 0.1
    refs[:, 6:10] /= np.linalg.norm(refs[:, 6:10], axis=1, keepdims=True)
    w = np.full(12, 0.7)
    h = 1e-6
    cases = [
        ("tracking", lambda s: tracking_loss(s, refs, w)),
        ("obstacle", lambda s: obstacle_loss(s, np.array([0.2, 0.1, 2.1]),
                                             1.3, 2.0)),
        ("slot", lambda s: slot_loss(s, np.full(3, 2.1),
                                     np.array([0.2, 0.0, 2.0]), 1.9, 1.1,
                                     2.0, 0.8)),
    ]
    for name, fn in cases:
        _, grad = fn(states)
        for (t, j) in [(0, 0), (1, 2), (2, 6)]:
            up, down = states.copy(), states.copy()
            up[t, j] += h
            down[t, j] -= h
            fd = (fn(up)[0] - fn(down)[0]) / (2 * h)
            report.append(_row("losses", name, f"x[{t},{j}]", grad[t, j], fd,
                               abs_tol=1e-8, rel_tol=1e-6))


def run_all(scenario):
    report = []
    fx = _Fixture(scenario)
    check_mpc_gradients(fx, report)
    check_dsp_blocks(fx, report)
    check_policy(report)
    check_losses(report)
    return report
