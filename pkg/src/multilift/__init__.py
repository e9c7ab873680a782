"""Multilift: simulation, distributed MPC, and closed-loop learning for
cable-suspended load transport with quadrotor teams."""

__version__ = "0.1.0"

GRAVITY = 9.81

from . import dualnum  # noqa: E402,F401
from .distmpc import DistributedMpc, MpcTeam, TrajectoryBundle  # noqa: E402,F401
from .ocp import LoadOcp, OcpSolution, QuadOcp, SolveOptions, solve_ocp  # noqa: E402,F401
from .policy import PolicyNet  # noqa: E402,F401
from .scenarios import (Scenario, fixture_scenario, hover_scenario,  # noqa: E402,F401
                        slot_scenario, weight_learning_scenario)
from .trainer import ClosedLoop, EpisodeConfig  # noqa: E402,F401
from .worldmodel import (CableParams, LoadParams, QuadParams, RigidState,  # noqa: E402,F401
                         World, step_world)
