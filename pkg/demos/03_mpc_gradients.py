"""First-control gradients of a converged MPC, checked against finite
differences.

Solves one quadrotor problem tightly, differentiates its first optimal
control with respect to a cost weight and the feedback state through the
optimality-condition recursion, and compares both against re-solving the
perturbed problem.
"""

import numpy as np

from multilift import gradmpc
from multilift.distmpc import DistributedMpc, MpcTeam
from multilift.ocp import SolveOptions, solve_ocp
from multilift.scenarios import equilibrium_world, fixture_scenario

scenario = fixture_scenario(n=2)
team = MpcTeam.from_scenario(scenario)
refs = scenario.references()
window = refs.window(0.0, team.horizon, team.dt, scenario.quad["mass"])
world = equilibrium_world(scenario)
feedback = {f"q{i + 1}": world.quads[i].as_vector() for i in range(2)}
feedback["q1"][0:3] += [0.05, -0.03, 0.03]
feedback["q1"][3:6] += [0.1, 0.0, -0.05]
feedback["load"] = world.load.as_vector()

thetas = {f"q{i + 1}": np.r_[np.full(12, 8.0), np.full(4, 0.5),
                             np.full(12, 8.0)] for i in range(2)}
thetas["load"] = np.r_[np.full(12, 8.0), np.full(2, 0.3), np.full(12, 8.0)]

mpc = DistributedMpc(team, window, thetas)
result = mpc.run(feedback, delta=1e-5, k_max=8)
tight = SolveOptions(tol=1e-10, max_iter=300)
problem = mpc.build_quad_ocp(0, feedback["q1"], result["bundle"])
solution = solve_ocp(problem, result["solutions"]["q1"], tight)
print("PMP residual at convergence:", solution.diagnostics["pmp_residual"])

grads = gradmpc.quad_gradients(solution, problem)

h = 1e-4
j = 0  # position-x tracking weight
up, down = dict(thetas), dict(thetas)
up["q1"] = thetas["q1"].copy()
down["q1"] = thetas["q1"].copy()
up["q1"][j] += h
down["q1"][j] -= h
fd = (solve_ocp(DistributedMpc(team, window, up).build_quad_ocp(
          0, feedback["q1"], result["bundle"]), solution, tight).u[0]
      - solve_ocp(DistributedMpc(team, window, down).build_quad_ocp(
          0, feedback["q1"], result["bundle"]), solution, tight).u[0]) / (2 * h)
print(f"\nd u0 / d theta[{j}]  analytic: {np.round(grads['theta'][:, j], 8)}")
print(f"d u0 / d theta[{j}]  fin diff: {np.round(fd, 8)}")

fb = dict(feedback)
fb["q1"] = feedback["q1"].copy()
fb["q1"][2] += h
up_sol = solve_ocp(DistributedMpc(team, window, thetas).build_quad_ocp(
    0, fb["q1"], result["bundle"]), solution, tight)
fb["q1"][2] -= 2 * h
down_sol = solve_ocp(DistributedMpc(team, window, thetas).build_quad_ocp(
    0, fb["q1"], result["bundle"]), solution, tight)
fd_x = (up_sol.u[0] - down_sol.u[0]) / (2 * h)
print(f"\nd u0 / d x_t[z]   analytic: {np.round(grads['x_own'][:, 2], 6)}")
print(f"d u0 / d x_t[z]   fin diff: {np.round(fd_x, 6)}")
