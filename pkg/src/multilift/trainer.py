"""Closed-loop training: episodes, losses, and policy-gradient assembly.

Each control tick runs the forward pass (observations, policy nets,
distributed MPC, apply first controls to the plant) and the backward
pass (first-control gradients, sensitivity propagation over a rolling
window, chain rule, one Adam step per agent once the window has filled).

Two plant modes exist.  "actual" integrates the ground-truth world with
elastic cables and motor lag at the fine physics step, four substeps per
control tick.  "control" advances the smooth prediction model directly
at the control step, which is the system the sensitivity recursion
differentiates exactly; gradient fixtures use it together with the
"ideal" exchange mode (load solved first, peers pinned to references,
only first entries of externals tied to live data).
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import dualnum as dn
from .controlmodel import attach_point, load_step, quad_step
from .distmpc import DistributedMpc, MpcTeam, agent_ids, shift_bundle
from .dsp import assemble_step, block_norm_rows, propagate
from .gradmpc import (NotStrictlyConvex, SingularRecursion,
                      load_gradients, quad_gradients)
from .ocp import OcpSolution, SolveOptions, solve_ocp, tracking_error
from .policy import (AdamState, HyperBounds, PolicyNet, apply_gradient,
                     backprop, forward, to_hyperparameters)
from .quaternions import quat_to_rot
from .scenarios import equilibrium_world, tilt_schedule
from .worldmodel import WorldFault, step_world


class TrainingFault(RuntimeError):
    def __init__(self, tick, agent_id, message):
        self.tick = tick
        self.agent_id = agent_id
        super().__init__(message)


@dataclass
class EpisodeConfig:
    t_ep: float = 15.0
    dt_world: float = 0.005
    dt_ctrl: float = 0.02
    n_cl: int = 20
    loss: str = "tracking"
    w_track: np.ndarray = field(default_factory=lambda: np.r_[
        np.full(3, 1.0), np.full(3, 0.1), np.full(3, 1.0), np.full(3, 0.1)])
    alpha: float = 1.0
    eta: float = 1.0
    eta_s: float = 1.0
    quad_loss_weight: float = 1.0
    delta: float = 1e-2
    k_max: int = 5
    workers: int = 1
    plant: str = "actual"
    exchange: str = "alg1"
    ideal_tol: float = 1e-9
    update: bool = True

    @classmethod
    def from_scenario(cls, sc, **overrides):
        ep = sc.episode
        cfg = cls(t_ep=ep["t_ep"], dt_world=ep["dt_world"], dt_ctrl=sc.mpc["dt"],
                  n_cl=ep["n_cl"], loss=ep["loss"],
                  w_track=np.r_[np.full(3, ep["w_pos"]), np.full(3, ep["w_vel"]),
                                np.full(3, ep["w_att"]), np.full(3, ep["w_rate"])],
                  alpha=ep["alpha"], eta=ep["eta"], eta_s=ep["eta_s"],
                  quad_loss_weight=ep.get("quad_loss_weight", 1.0),
                  delta=sc.mpc["delta"], k_max=sc.mpc["k_max"])
        for key, value in overrides.items():
            setattr(cfg, key, value)
        return cfg

    @property
    def substeps(self):
        return max(1, int(round(self.dt_ctrl / self.dt_world)))


# ---------------------------------------------------------------------------
# Losses.  Each returns the scalar and the gradient w.r.t. the 13-dim states.

def tracking_loss(states, x_refs, w_diag):
    """Sum of squared weighted tracking errors over a state window."""
    states = np.asarray(states, dtype=float)
    x_refs = np.asarray(x_refs, dtype=float)
    rot_refs = quat_to_rot(x_refs[..., 6:10])
    xd = dn.seed(states)
    e = tracking_error(xd, x_refs, rot_refs)
    value = float(np.sum(w_diag * e.val ** 2))
    grad = np.einsum("tj,tjx->tx", 2.0 * w_diag * e.val, e.der)
    return value, grad


def obstacle_loss(states, p_obs, alpha, eta):
    """Exponential proximity penalty on positions; gradient guarded at 0."""
    states = np.asarray(states, dtype=float)
    rel = states[..., 0:3] - np.asarray(p_obs, dtype=float)
    d = np.linalg.norm(rel, axis=-1)
    value = float(alpha * np.sum(np.exp(-eta * d)))
    grad = np.zeros_like(states)
    safe = d > 1e-9
    coeff = np.where(safe, -alpha * eta * np.exp(-eta * d) / np.maximum(d, 1e-9),
                     0.0)
    grad[..., 0:3] = coeff[..., None] * rel
    return value, grad


def slot_loss(states, z_refs, slot_center, z_s, alpha, eta, eta_s):
    """Blended height-tracking / slot-clearance loss for the load.

    Near the slot the loss switches from following the reference height
    to penalizing proximity to the slot's lower boundary; the blending
    weight decays with the fourth power of the distance to the slot.
    """
    states = np.asarray(states, dtype=float)
    z = states[..., 2]
    rel = states[..., 0:3] - np.asarray(slot_center, dtype=float)
    d2 = np.sum(rel * rel, axis=-1)
    blend = np.exp(-eta_s * d2 * d2)  # exp(-eta_s * |p - ps|^4)
    clear = np.exp(-eta * (z - z_s))
    value = float(alpha * np.sum((1.0 - blend) * (z - z_refs) + blend * clear))
    dblend = (-4.0 * eta_s * d2)[..., None] * rel * blend[..., None]
    grad = np.zeros_like(states)
    grad[..., 0:3] = alpha * dblend * (clear - (z - z_refs))[..., None]
    grad[..., 2] += alpha * ((1.0 - blend) - eta * blend * clear)
    return value, grad


# ---------------------------------------------------------------------------
# Chain rule from window losses through the sensitivity blocks to nets.

def assemble_policy_gradients(loss_grads, history, spans, nets, caches):
    """dL/d(net parameters) for every agent with a learnable theta.

    ``loss_grads[agent]`` holds dL/dx_t rows over the window (length
    len(history)); ``history`` is the sensitivity-state trajectory;
    ``spans`` the diagonal of d theta / d Theta; ``caches`` the forward
    caches at the current tick.
    """
    steps = len(history)
    for agent, rows in loss_grads.items():
        if len(rows) != steps:
            raise ValueError(f"loss gradient window for {agent} has "
                             f"{len(rows)} rows, expected {steps}")
    n = len(history[0].x_qq)
    out = {}
    for i in range(n):
        agent = f"q{i + 1}"
        if agent not in nets:
            continue
        m = history[0].x_qq[i].shape[1]
        d_theta = np.zeros(m)
        for t in range(steps):
            d_theta += loss_grads[agent][t] @ history[t].x_qq[i]
            d_theta += loss_grads["load"][t] @ history[t].x_ql[i]
        out[agent] = backprop(nets[agent], caches[agent], d_theta * spans[agent])
    if "load" in nets:
        m = history[0].x_ll.shape[1]
        d_theta = np.zeros(m)
        for t in range(steps):
            d_theta += loss_grads["load"][t] @ history[t].x_ll
            for i in range(n):
                d_theta += loss_grads[f"q{i + 1}"][t] @ history[t].x_lq[i]
        out["load"] = backprop(nets["load"], caches["load"],
                               d_theta * spans["load"])
    return out


def stopping_criterion(history, ratio=1e-3):
    """Stop once consecutive episode losses differ by less than
    one-thousandth of the first episode's loss."""
    if len(history) < 2:
        return False
    return bool(abs(history[-1] - history[-2]) <= ratio * history[0])


# ---------------------------------------------------------------------------
# The closed loop.

class ClosedLoop:
    """One scenario's closed-loop machinery (plant, MPC, policies)."""

    def __init__(self, scenario, config, mass_scale=1.0, which_refs="train"):
        self.scenario = scenario
        self.config = config
        self.mass_scale = mass_scale
        self.team = MpcTeam.from_scenario(scenario, mass_scale)
        self.refs = scenario.references(which_refs, mass_scale)
        self.n = scenario.n
        self.slot = scenario.slot_config()
        self.theta_kind = "tension_ref" if scenario.kind == "tension-ref" \
            else "weights"
        self.residual_gate = 5e-3
        self.bounds = self._make_bounds()
        self.fixed = self._fixed_thetas()
        self.quad_mass = scenario.quad["mass"]

    # -- bookkeeping -----------------------------------------------------------
    def _make_bounds(self):
        lo, hi = self.scenario.mpc["theta_min"], self.scenario.mpc["theta_max"]
        bounds = {}
        for i in range(self.n):
            bounds[f"q{i + 1}"] = HyperBounds(np.full(28, lo), np.full(28, hi))
        if self.theta_kind == "tension_ref":
            s = self.scenario.slot
            bounds["load"] = HyperBounds(np.array([s.get("dt_min", -2.0)]),
                                         np.array([s.get("dt_max", 8.0)]))
        else:
            m = 24 + self.n
            bounds["load"] = HyperBounds(np.full(m, lo), np.full(m, hi))
        return bounds

    def _fixed_thetas(self):
        fw = self.scenario.mpc.get("fixed_weights", {})
        quad = np.asarray(fw.get("quad", np.r_[np.full(3, 20.0), np.full(3, 4.0),
                                               np.full(3, 10.0), np.full(3, 2.0),
                                               np.full(4, 0.1),
                                               np.full(3, 20.0), np.full(3, 4.0),
                                               np.full(3, 10.0), np.full(3, 2.0)]),
                          dtype=float)
        load = np.asarray(fw.get("load", np.r_[np.full(3, 20.0), np.full(3, 4.0),
                                               np.full(3, 10.0), np.full(3, 2.0),
                                               np.full(self.n, 0.05),
                                               np.full(3, 20.0), np.full(3, 4.0),
                                               np.full(3, 10.0), np.full(3, 2.0)]),
                          dtype=float)
        return {"quad": quad, "load": load}

    def trainable_agents(self):
        if self.theta_kind == "tension_ref":
            return ["load"]
        return agent_ids(self.n)

    def make_nets(self, seed=0, hidden=None, init_scale=None, out_bias=None):
        pol = self.scenario.policy
        hidden = pol["hidden"] if hidden is None else hidden
        init_scale = pol["init_scale"] if init_scale is None else init_scale
        out_bias = pol["out_bias"] if out_bias is None else out_bias
        nets, adams = {}, {}
        for idx, agent in enumerate(self.trainable_agents()):
            n_in = self.obs_dim(agent)
            n_out = self.bounds[agent].lo.size
            nets[agent] = PolicyNet.create(n_in, n_out, hidden, init_scale,
                                           out_bias, seed=seed * 1000 + idx)
            adams[agent] = AdamState(lr=pol["lr"], beta1=pol["betas"][0],
                                     beta2=pol["betas"][1])
        return nets, adams

    def obs_dim(self, agent):
        if self.theta_kind == "tension_ref":
            return 3
        return 12 if agent != "load" else 12 + self.n

    # -- plant -----------------------------------------------------------------
    def initial_plant(self):
        if self.config.plant == "actual":
            return equilibrium_world(self.scenario, self.mass_scale, self.refs)
        t0 = np.asarray(0.0)
        states = {f"q{i + 1}": self.refs.quad_state(i, t0) for i in range(self.n)}
        states["load"] = self.refs.load_state(t0)
        return states

    def plant_states(self, plant):
        if self.config.plant == "actual":
            states = {f"q{i + 1}": plant.quads[i].as_vector()
                      for i in range(self.n)}
            states["load"] = plant.load.as_vector()
            return states
        return {k: v.copy() for k, v in plant.items()}

    def advance_plant(self, plant, first_controls, loss_accum, tick):
        cfg = self.config
        if cfg.plant == "actual":
            cmd = np.stack([first_controls[f"q{i + 1}"] for i in range(self.n)])
            out = plant
            for _ in range(cfg.substeps):
                try:
                    out = step_world(out, cmd, cfg.dt_world)
                except WorldFault as err:
                    raise TrainingFault(tick, err.agent_id, str(err)) from err
                self._accumulate_losses(self.plant_states(out), out.t,
                                        loss_accum)
            return out
        states = self.plant_states(plant)
        x_l, u_l = states["load"], first_controls["load"]
        new = {}
        for i in range(self.n):
            agent = f"q{i + 1}"
            ap = attach_point(x_l, self.team.load_params.attachments[i])
            new[agent] = quad_step(states[agent], first_controls[agent], ap,
                                   u_l[i], cfg.dt_ctrl, self.team.quad_params)
        new["load"] = load_step(x_l, u_l,
                                [states[f"q{i + 1}"][0:3] for i in range(self.n)],
                                cfg.dt_ctrl, self.team.load_params)
        for agent, x in new.items():
            if not np.all(np.isfinite(x)):
                raise TrainingFault(tick, agent, "non-finite plant state")
        self._accumulate_losses(new, (tick + 1) * cfg.dt_ctrl, loss_accum)
        return new

    # -- losses ------------------------------------------------------------
    def _agent_loss(self, agent, states, times):
        """Loss and state gradient for one agent over a state window."""
        cfg = self.config
        times = np.asarray(times, dtype=float)
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if agent == "load":
            refs = self.refs.load_state(times)
            if cfg.loss == "slot" and self.slot is not None:
                return slot_loss(states, refs[..., 2], self.slot["center"],
                                 self.slot["z_s"], cfg.alpha, cfg.eta,
                                 cfg.eta_s)
            return tracking_loss(states, refs, cfg.w_track)
        i = int(agent[1:]) - 1
        refs = self.refs.quad_state(i, times, self.current_beta(states=None))
        value, grad = tracking_loss(states, refs, cfg.w_track)
        return cfg.quad_loss_weight * value, cfg.quad_loss_weight * grad

    def _accumulate_losses(self, states, t, loss_accum):
        for agent in agent_ids(self.n):
            value, _ = self._agent_loss(agent, states[agent][None], [t])
            loss_accum[agent] = loss_accum.get(agent, 0.0) + value

    # -- per-tick reference window ----------------------------------------
    def current_beta(self, states):
        if self.slot is None or states is None:
            return None  # scenario default tilt
        return tilt_schedule(states["load"][0:3], self.slot)

    def tick_window(self, t0, beta, d_tension):
        return self.refs.window(t0, self.team.horizon, self.config.dt_ctrl,
                                self.quad_mass, beta, d_tension)

    # -- policies ----------------------------------------------------------
    def observe(self, agent, states, t, beta):
        if self.scenario.policy.get("obs_mode") == "const":
            # state-independent observation; keeps the policy input fixed
            # so fixture gradients flow only through the hyperparameters
            dim = self.obs_dim(agent)
            return np.linspace(0.2, 0.8, dim)
        if self.theta_kind == "tension_ref":
            ref = self.refs.load_state(np.asarray(t))
            return np.array([states["load"][2] - ref[2],
                             states["load"][5] - ref[5],
                             0.0 if beta is None else beta])
        t = np.asarray(t)
        if agent == "load":
            ref = self.refs.load_state(t)
            err = np.asarray(dn.value(tracking_error(
                states["load"], ref, quat_to_rot(ref[6:10]))))
            taut = self._taut_indicator(states)
            return np.r_[err, taut]
        i = int(agent[1:]) - 1
        ref = self.refs.quad_state(i, t)
        return np.asarray(dn.value(tracking_error(
            states[agent], ref, quat_to_rot(ref[6:10]))))

    def _taut_indicator(self, states):
        rot = quat_to_rot(states["load"][6:10])
        out = np.zeros(self.n)
        for i in range(self.n):
            rel = states[f"q{i + 1}"][0:3] - states["load"][0:3] \
                - rot @ self.team.load_params.attachments[i]
            out[i] = 1.0 if np.linalg.norm(rel) > self.team.length0 else 0.0
        return out

    def eval_policies(self, nets, states, t, beta, train=False):
        thetas, spans, caches = {}, {}, {}
        for agent in agent_ids(self.n):
            if agent in nets:
                theta_n, cache = forward(nets[agent],
                                         self.observe(agent, states, t, beta),
                                         train)
                theta, span = to_hyperparameters(theta_n, self.bounds[agent])
                thetas[agent] = theta
                spans[agent] = span
                caches[agent] = cache
            elif agent == "load" and self.theta_kind == "tension_ref":
                thetas[agent] = np.zeros(1)  # no net: zero tension offset
            else:
                thetas[agent] = self.fixed["quad" if agent != "load" else "load"]
        if self.theta_kind == "tension_ref":
            thetas["load_weights"] = self.fixed["load"]
        return thetas, spans, caches

    # -- one tick of the two exchange modes ---------------------------------
    def solve_tick_alg1(self, window, thetas, feedback, warm_bundle):
        mpc = DistributedMpc(self.team, window, thetas, self.theta_kind,
                             self.config.workers)
        result = mpc.run(feedback, warm_bundle, self.config.delta,
                         self.config.k_max)
        problems = {}
        for i in range(self.n):
            problems[f"q{i + 1}"] = mpc.build_quad_ocp(
                i, feedback[f"q{i + 1}"], result["bundle"])
        problems["load"] = mpc.build_load_ocp(feedback["load"],
                                              result["bundle"])
        return result, problems

    def solve_tick_ideal(self, window, thetas, feedback, warm_solutions):
        """Load-first exchange against reference externals.

        Externals are the reference trajectories with only the first
        entries replaced by live data (feedback states; the load's fresh
        first control for the quadrotors), and peer quadrotors stay at
        their references.  This is the one-tick map whose exact
        derivative the sensitivity recursion computes.
        """
        mpc = DistributedMpc(self.team, window, thetas, self.theta_kind,
                             self.config.workers)
        opts = SolveOptions(tol=self.config.ideal_tol, max_iter=300)
        ref_bundle = mpc.cold_bundle(feedback)
        load_prob = mpc.build_load_ocp(feedback["load"], ref_bundle)
        load_sol = solve_ocp(load_prob, warm_solutions.get("load"), opts)
        quad_bundle = ref_bundle.copy()
        quad_bundle.u["load"][0] = load_sol.u[0]
        solutions, problems = {"load": load_sol}, {"load": load_prob}
        for i in range(self.n):
            agent = f"q{i + 1}"
            peers_ref = quad_bundle.copy()
            for j in range(self.n):
                if j != i:
                    peers_ref.x[f"q{j + 1}"] = window["quads_x"][j]
            prob = mpc.build_quad_ocp(i, feedback[agent], peers_ref)
            solutions[agent] = solve_ocp(prob, warm_solutions.get(agent), opts)
            problems[agent] = prob
        first = {a: solutions[a].u[0].copy() for a in solutions}
        result = {"first_controls": first, "solutions": solutions,
                  "bundle": quad_bundle,
                  "diagnostics": {"rounds": 1, "e_final": 0.0,
                                  "converged": True,
                                  "iterations": {a: solutions[a].diagnostics[
                                      "iterations"] for a in solutions},
                                  "pmp_residual": {a: solutions[a].diagnostics[
                                      "pmp_residual"] for a in solutions}}}
        return result, problems

    # -- episode -----------------------------------------------------------
    def run_episode(self, nets, adams, episode_index=0, log_states=False):
        """One closed-loop episode; returns losses, logs, updated nets."""
        cfg = self.config
        n_ticks = int(round(cfg.t_ep / cfg.dt_ctrl))
        plant = self.initial_plant()
        warm_bundle = None
        warm_solutions = {}
        window_states = deque(maxlen=cfg.n_cl + 1)
        window_steps = deque(maxlen=cfg.n_cl + 1)
        window_times = deque(maxlen=cfg.n_cl + 1)
        loss_accum = {}
        self._accumulate_losses(self.plant_states(plant), 0.0, loss_accum)
        rows = []
        state_log = []
        updates = 0
        degraded_ticks = 0
        last_history, last_window_start = None, 0
        for tick in range(n_ticks):
            t = tick * cfg.dt_ctrl
            states = self.plant_states(plant)
            beta = self.current_beta(states)
            thetas, spans, caches = self.eval_policies(nets, states, t, beta,
                                                       train=cfg.update)
            d_tension = float(thetas["load"][0]) \
                if self.theta_kind == "tension_ref" else 0.0
            window = self.tick_window(t, beta, d_tension)
            if cfg.exchange == "alg1":
                result, problems = self.solve_tick_alg1(window, thetas, states,
                                                        warm_bundle)
                warm_bundle = shift_bundle(result["bundle"])
            else:
                result, problems = self.solve_tick_ideal(window, thetas, states,
                                                         warm_solutions)
                warm_solutions = {
                    a: OcpSolution(s.x, np.vstack([s.u[1:], s.u[-1:]]),
                                   s.costates)
                    for a, s in result["solutions"].items()}
            first = result["first_controls"]

            tension_gap = np.nan
            if cfg.plant == "actual":
                _, mags = plant.tensions()
                tension_gap = float(np.max(np.abs(mags - first["load"])))

            if log_states:
                tensions = plant.tensions()[1] if cfg.plant == "actual" else None
                state_log.append({"t": t, "states": states,
                                  "tensions": tensions,
                                  "mpc_first": first["load"].copy()})

            # backward pass bookkeeping
            if cfg.update:
                grads, degraded = self._tick_gradients(result["solutions"],
                                                       problems)
                degraded_ticks += degraded
                step = assemble_step(states, first, grads, cfg.dt_ctrl,
                                     self.team.quad_params,
                                     self.team.load_params,
                                     self.team.load_params.attachments)
                window_states.append(states)
                window_steps.append(step)
                window_times.append(t)
                if tick >= cfg.n_cl:
                    last_history = self._apply_updates(
                        nets, adams, spans, caches, window_states,
                        window_steps, window_times)
                    last_window_start = tick - cfg.n_cl
                    updates += 1

            tick_losses = {}
            for agent in agent_ids(self.n):
                value, _ = self._agent_loss(agent, states[agent][None], [t])
                tick_losses[agent] = value
            rows.append({
                "episode": episode_index, "tick": tick,
                "losses": tick_losses,
                "rounds": result["diagnostics"]["rounds"],
                "e_final": result["diagnostics"]["e_final"],
                "iterations": result["diagnostics"]["iterations"],
                "pmp_residual": result["diagnostics"]["pmp_residual"],
                "tension_gap_max": tension_gap,
            })
            plant = self.advance_plant(plant, first, loss_accum, tick)

        horizon_scale = cfg.dt_world if cfg.plant == "actual" else cfg.dt_ctrl
        l_mean = horizon_scale / cfg.t_ep * sum(loss_accum.values()) \
            if n_ticks > 0 else 0.0
        out = {"l_mean": l_mean, "loss_accum": loss_accum, "rows": rows,
               "updates": updates, "degraded_ticks": degraded_ticks,
               "state_log": state_log, "plant": plant}
        if self.scenario.episode.get("dsp_log") and last_history is not None:
            out["dsp_norms"] = block_norm_rows(last_history, last_window_start)
        decay = self.scenario.policy.get("lr_decay", 1.0)
        if cfg.update and decay != 1.0:
            for adam in adams.values():
                adam.lr *= decay
        return out

    def _zero_gradient_block(self, agent):
        m_quad = 28 if self.theta_kind != "tension_ref" else 0
        if agent == "load":
            m_load = 1 if self.theta_kind == "tension_ref" else 24 + self.n
            return {"theta": np.zeros((self.n, m_load)),
                    "x_own": np.zeros((self.n, 13)),
                    "x_quads": [np.zeros((self.n, 13))
                                for _ in range(self.n)]}
        out = {"x_own": np.zeros((4, 13)), "x_load": np.zeros((4, 13)),
               "u_load": np.zeros((4, self.n))}
        if m_quad:
            out["theta"] = np.zeros((4, m_quad))
        return out

    def _tick_gradients(self, solutions, problems):
        """Per-agent controller gradients, degrading gracefully.

        A solve whose stationarity residual is too large (or whose
        Hamiltonian loses convexity) cannot be differentiated reliably;
        its coupling blocks are zeroed for this tick instead of aborting
        the episode.
        """
        theta_agents = set(self.trainable_agents())
        grads, degraded = {}, 0
        for agent in agent_ids(self.n):
            residual = solutions[agent].diagnostics["pmp_residual"]
            if residual > self.residual_gate:
                grads[agent] = self._zero_gradient_block(agent)
                degraded += 1
                continue
            try:
                if agent == "load":
                    grads[agent] = load_gradients(
                        solutions[agent], problems[agent], self.n,
                        "load" in theta_agents,
                        residual_gate=self.residual_gate)
                else:
                    grads[agent] = quad_gradients(
                        solutions[agent], problems[agent],
                        agent in theta_agents,
                        residual_gate=self.residual_gate)
            except (NotStrictlyConvex, SingularRecursion):
                grads[agent] = self._zero_gradient_block(agent)
                degraded += 1
        return grads, degraded

    def _apply_updates(self, nets, adams, spans, caches, window_states,
                       window_steps, window_times):
        cfg = self.config
        steps = list(window_steps)[:-1]  # transitions inside the window
        m_quads = [steps[0].u_q[i].shape[1] for i in range(self.n)]
        history = propagate(steps, m_quads, steps[0].u_l.shape[1],
                            workers=cfg.workers)
        loss_grads = {}
        times = list(window_times)
        for agent in agent_ids(self.n):
            stacked = np.stack([s[agent] for s in window_states])
            _, grad = self._agent_loss(agent, stacked, times)
            loss_grads[agent] = grad
        grad_vecs = assemble_policy_gradients(loss_grads, history, spans,
                                              nets, caches)
        clip = self.scenario.policy.get("clip_norm", 0.0)
        for agent, vec in grad_vecs.items():
            if clip and np.isfinite(vec).all():
                norm = np.linalg.norm(vec)
                if norm > clip:
                    vec = vec * (clip / norm)
            apply_gradient(nets[agent], adams[agent], vec)
        return history


def run_training(scenario, config, nets, adams, episodes, episode_offset=0,
                 log_states=False):
    """Run several episodes; returns per-episode results and mean losses."""
    loop = ClosedLoop(scenario, config)
    results = []
    l_means = []
    for e in range(episodes):
        out = loop.run_episode(nets, adams, episode_offset + e, log_states)
        results.append(out)
        l_means.append(out["l_mean"])
        if stopping_criterion(l_means):
            break
    return {"results": results, "l_means": l_means, "nets": nets,
            "adams": adams}
