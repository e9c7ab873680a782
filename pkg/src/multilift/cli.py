"""Command-line entry point.

Subcommands:
    simulate         closed-loop rollout with fixed or checkpointed policies
    train            closed-loop policy training (weights or tension-ref)
    evaluate         frozen-policy rollout on the evaluation trajectory, RMSE table
    check-gradients  analytic-vs-finite-difference report across the stack

Every run writes its resolved configuration, seed, and a git describe
string into the output directory so results reproduce bitwise from the
artifacts alone.  Exit codes: 0 ok, 1 runtime fault, 2 usage/config.
"""

import argparse
import csv
import json
import os
import subprocess
import sys

import numpy as np

from . import dsp, gradmpc
from .distmpc import agent_ids
from .policy import (AdamState, load_checkpoint, save_checkpoint)
from .quaternions import quat_to_rot, quat_to_euler_zyx
from .scenarios import (Scenario, fixture_scenario, hover_scenario,
                        slot_scenario, weight_learning_scenario)
from .trainer import (ClosedLoop, EpisodeConfig, TrainingFault,
                      run_training, stopping_criterion, tracking_loss)


class ConfigError(ValueError):
    pass


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except Exception:  # noqa: BLE001
        return "unknown"


def apply_overrides(data, overrides):
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = value
    return data


_BUILTIN = {
    "hover": lambda: hover_scenario(),
    "weights": lambda: weight_learning_scenario(desk=True),
    "weights-full": lambda: weight_learning_scenario(),
    "tension-ref": lambda: slot_scenario(),
    "fixture": lambda: fixture_scenario(),
}


def load_scenario(args):
    if args.scenario and os.path.exists(args.scenario):
        data = Scenario.from_json(args.scenario).to_dict()
    elif args.scenario in _BUILTIN:
        data = _BUILTIN[args.scenario]().to_dict()
    elif args.scenario:
        raise ConfigError(f"scenario {args.scenario!r}: no such file or "
                          f"builtin (have {sorted(_BUILTIN)})")
    else:
        raise ConfigError("--scenario is required")
    data = apply_overrides(data, args.set)
    return Scenario.from_dict(data)


def prepare_run_dir(args, scenario):
    os.makedirs(args.out, exist_ok=True)
    resolved = {
        "scenario": scenario.to_dict(),
        "seed": args.seed,
        "workers": args.workers,
        "git": git_describe(),
        "command": args.command,
    }
    with open(os.path.join(args.out, "resolved_config.json"), "w") as f:
        json.dump(resolved, f, indent=2)
    return resolved


def state_rows(entry, n):
    rows = []
    t = entry["t"]
    for i in range(n):
        s = entry["states"][f"q{i + 1}"]
        rows.append([t, f"q{i + 1}", *s[0:3], *s[3:6], *s[6:10], *s[10:13],
                     *[""] * n])
    s = entry["states"]["load"]
    tens = entry["tensions"]
    tens = [""] * n if tens is None else list(tens)
    rows.append([t, "load", *s[0:3], *s[3:6], *s[6:10], *s[10:13], *tens])
    return rows


def write_state_logs(out_dir, state_log, n):
    header = ["t", "agent_id", "px", "py", "pz", "vx", "vy", "vz",
              "qw", "qx", "qy", "qz", "wx", "wy", "wz"] \
        + [f"T{i + 1}" for i in range(n)]
    rows = []
    for entry in state_log:
        rows.extend(state_rows(entry, n))
    write_csv(os.path.join(out_dir, "states.csv"), header, rows)
    header2 = ["t"] + [f"T{i + 1}_actual" for i in range(n)] \
        + [f"T{i + 1}_mpc" for i in range(n)]
    rows2 = []
    for entry in state_log:
        actual = [""] * n if entry["tensions"] is None else list(entry["tensions"])
        rows2.append([entry["t"], *actual, *entry["mpc_first"]])
    write_csv(os.path.join(out_dir, "tensions.csv"), header2, rows2)


def write_mpc_diag(out_dir, rows, n):
    agents = agent_ids(n)
    header = ["t", "rounds", "e_final"] \
        + [f"iters_{a}" for a in agents] + [f"pmp_{a}" for a in agents]
    out = []
    for r in rows:
        out.append([r["tick"], r["rounds"], r["e_final"],
                    *[r["iterations"][a] for a in agents],
                    *[r["pmp_residual"][a] for a in agents]])
    write_csv(os.path.join(out_dir, "mpc_diag.csv"), header, out)


def write_episode_csv(out_dir, all_rows, n):
    agents = agent_ids(n)
    header = ["episode", "tick", "L_mean_running"] \
        + [f"loss_{a}" for a in agents] + ["rounds", "tension_gap_max"]
    rows = []
    for r in all_rows:
        rows.append([r["episode"], r["tick"], r["l_mean_running"],
                     *[r["losses"][a] for a in agents], r["rounds"],
                     r["tension_gap_max"]])
    write_csv(os.path.join(out_dir, "episode.csv"), header, rows)


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args):
    scenario = load_scenario(args)
    prepare_run_dir(args, scenario)
    cfg = EpisodeConfig.from_scenario(scenario, update=False,
                                      workers=args.workers)
    loop = ClosedLoop(scenario, cfg)
    if args.checkpoint:
        nets, _, _ = load_checkpoint(args.checkpoint)
    else:
        nets = {}
    try:
        out = loop.run_episode(nets, {}, log_states=True)
    except TrainingFault as err:
        print(f"simulation fault at tick {err.tick}: agent {err.agent_id}",
              file=sys.stderr)
        return 1
    write_state_logs(args.out, out["state_log"], scenario.n)
    write_mpc_diag(args.out, out["rows"], scenario.n)
    print(f"simulated {cfg.t_ep}s, L_mean={out['l_mean']!r}")
    return 0


def cmd_train(args):
    scenario = load_scenario(args)
    prepare_run_dir(args, scenario)
    cfg = EpisodeConfig.from_scenario(scenario, workers=args.workers)
    loop = ClosedLoop(scenario, cfg)
    if args.resume:
        nets, adams, meta = load_checkpoint(args.resume)
        start = int(meta.get("episode", -1)) + 1
        l_means = list(meta.get("l_means", []))
    else:
        nets, adams = loop.make_nets(seed=args.seed)
        start, l_means = 0, []
    save_checkpoint(os.path.join(args.out, "ckpt_init.json"), nets, adams,
                    meta={"episode": start - 1, "l_means": l_means,
                          "seed": args.seed})
    all_rows = []
    episode = start
    while episode < start + args.max_episodes:
        try:
            out = loop.run_episode(nets, adams, episode)
        except TrainingFault as err:
            print(f"training fault in episode {episode} at tick {err.tick}: "
                  f"agent {err.agent_id}", file=sys.stderr)
            return 1
        l_means.append(out["l_mean"])
        running = 0.0
        accum = 0.0
        for r in out["rows"]:
            accum += sum(r["losses"].values())
            denom = (r["tick"] + 1)
            r["l_mean_running"] = accum / denom
            all_rows.append(r)
        save_checkpoint(os.path.join(args.out, f"ckpt_ep{episode}.json"),
                        nets, adams, meta={"episode": episode,
                                           "l_means": l_means,
                                           "seed": args.seed})
        if "dsp_norms" in out:
            write_csv(os.path.join(args.out, f"dsp_norms_ep{episode}.csv"),
                      ["tick", "block_label", "frobenius_norm"],
                      out["dsp_norms"])
        print(f"episode {episode}: L_mean={out['l_mean']!r}", flush=True)
        episode += 1
        if stopping_criterion(l_means):
            print("stopping criterion met")
            break
    write_episode_csv(args.out, all_rows, scenario.n)
    with open(os.path.join(args.out, "l_means.json"), "w") as f:
        json.dump(l_means, f)
    return 0


def rmse_table(states, refs):
    """Per-axis RMSE of load position and ZYX Euler attitude (degrees)."""
    states = np.asarray(states, dtype=float)
    refs = np.asarray(refs, dtype=float)
    pos_err = states[:, 0:3] - refs[:, 0:3]
    eul = np.rad2deg(quat_to_euler_zyx(states[:, 6:10]))
    eul_ref = np.rad2deg(quat_to_euler_zyx(refs[:, 6:10]))
    err = np.c_[pos_err, eul - eul_ref]
    return np.sqrt(np.mean(err ** 2, axis=0))


def cmd_evaluate(args):
    scenario = load_scenario(args)
    prepare_run_dir(args, scenario)
    cfg = EpisodeConfig.from_scenario(scenario, update=False,
                                      workers=args.workers)
    rows = []
    for label, ckpt in [("checkpoint", args.checkpoint),
                        ("baseline", args.baseline)]:
        if not ckpt and label == "baseline":
            continue
        loop = ClosedLoop(scenario, cfg, mass_scale=scenario.eval_mass_scale,
                          which_refs="eval")
        nets = {}
        if ckpt:
            nets, _, _ = load_checkpoint(ckpt)
        try:
            out = loop.run_episode(nets, {}, log_states=True)
        except TrainingFault as err:
            print(f"evaluation fault: agent {err.agent_id}", file=sys.stderr)
            return 1
        states = np.stack([e["states"]["load"] for e in out["state_log"]])
        times = np.array([e["t"] for e in out["state_log"]])
        refs = loop.refs.load_state(times)
        rows.append([label, *rmse_table(states, refs)])
    header = ["run", "rmse_px", "rmse_py", "rmse_pz", "rmse_roll_deg",
              "rmse_pitch_deg", "rmse_yaw_deg"]
    write_csv(os.path.join(args.out, "rmse.csv"), header, rows)
    for row in rows:
        print(", ".join(f"{h}={_fmt(v)}" for h, v in zip(header, row)))
    return 0


def cmd_check_gradients(args):
    sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))
    from . import _gradcheck
    scenario = load_scenario(args) if args.scenario else fixture_scenario()
    prepare_run_dir(args, scenario)
    report = _gradcheck.run_all(scenario)
    header = ["module", "case", "component", "analytic", "fd", "abs_err",
              "allowed", "status"]
    write_csv(os.path.join(args.out, "gradient_report.csv"), header, report)
    bad = [r for r in report if r[-1] != "ok"]
    print(f"{len(report)} gradient checks, {len(bad)} failures")
    return 0 if not bad else 1


def main(argv=None):
    parser = argparse.ArgumentParser(prog="multilift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in [("simulate", cmd_simulate), ("train", cmd_train),
                     ("evaluate", cmd_evaluate),
                     ("check-gradients", cmd_check_gradients)]:
        p = sub.add_parser(name)
        p.add_argument("--scenario", default=None,
                       help="scenario JSON path or builtin name")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="run")
        p.add_argument("--workers", type=int, default=0,
                       help="0 means one per quadrotor")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dot-path override into the scenario")
        if name == "train":
            p.add_argument("--experiment", choices=["weights", "tension-ref"],
                           default=None)
            p.add_argument("--max-episodes", type=int, default=10)
            p.add_argument("--resume", default=None)
        if name in ("simulate", "evaluate"):
            p.add_argument("--checkpoint", default=None)
        if name == "evaluate":
            p.add_argument("--baseline", default=None)
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    if getattr(args, "experiment", None) and not args.scenario:
        args.scenario = args.experiment
    if args.workers == 0:
        args.workers = 1
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
