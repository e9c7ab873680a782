"""One control tick of the distributed MPC, step by step.

Sets up a three-quadrotor circle scenario, perturbs the feedback states
off the references, and runs the per-agent solve/exchange rounds until
the trajectories stop changing.  The printout shows the exchange error
shrinking round by round and the first controls that would be applied.
"""

import numpy as np

from multilift.distmpc import DistributedMpc, MpcTeam
from multilift.scenarios import equilibrium_world, weight_learning_scenario

scenario = weight_learning_scenario(desk=True, biased_com=False)
team = MpcTeam.from_scenario(scenario)
refs = scenario.references()
window = refs.window(0.0, team.horizon, team.dt, scenario.quad["mass"])

world = equilibrium_world(scenario)
rng = np.random.default_rng(1)
feedback = {}
for i in range(scenario.n):
    x = world.quads[i].as_vector()
    x[0:3] += np.r_[rng.normal(size=2) * 0.05, 0.03]
    feedback[f"q{i + 1}"] = x
feedback["load"] = world.load.as_vector()

thetas = {f"q{i + 1}": np.r_[np.full(12, 10.0), np.full(4, 0.5),
                             np.full(12, 10.0)] for i in range(scenario.n)}
thetas["load"] = np.r_[np.full(12, 10.0), np.full(scenario.n, 0.2),
                       np.full(12, 10.0)]

mpc = DistributedMpc(team, window, thetas)
bundle = mpc.cold_bundle(feedback)
for round_index in range(5):
    bundle, solutions = mpc.solve_round(bundle, feedback)
    print(f"round {round_index + 1}: exchange error {bundle.error:.2e}")
    if bundle.error < 1e-3:
        break

print("\nfirst controls:")
for agent, sol in solutions.items():
    print(f"  {agent}: {np.round(sol.u[0], 3)}")
print("\nload tension plan stays inside (0, T_max]:",
      bool(np.all(solutions['load'].u > 0)
           and np.all(solutions['load'].u <= team.t_max)))
