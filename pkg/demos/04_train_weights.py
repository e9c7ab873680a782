"""Closed-loop learning of the MPC weightings, desk scale.

Three quadrotors carry a load with a biased center of mass around a
circle.  Policy networks produce all cost weightings online; training
backpropagates the closed-loop tracking loss through the first-control
gradients and the sensitivity recursion.  Expect a couple of minutes per
episode on a laptop; the mean loss drops clearly within a few episodes.

Equivalent CLI:
    multilift train --experiment weights --out run_weights --max-episodes 6
"""

from multilift.scenarios import weight_learning_scenario
from multilift.trainer import ClosedLoop, EpisodeConfig, stopping_criterion

scenario = weight_learning_scenario(desk=True, biased_com=True)
scenario.episode["t_ep"] = 2.5
config = EpisodeConfig.from_scenario(scenario)
loop = ClosedLoop(scenario, config)
nets, adams = loop.make_nets(seed=0)

losses = []
for episode in range(6):
    out = loop.run_episode(nets, adams, episode)
    losses.append(out["l_mean"])
    gap = out["rows"][-1]["tension_gap_max"]
    print(f"episode {episode}: L_mean={out['l_mean']:.4f}  "
          f"(updates={out['updates']}, tension gap {gap:.2f} N)")
    if stopping_criterion(losses):
        print("stopping criterion met")
        break

print("\nloss trajectory:", [round(l, 4) for l in losses])
