#!/usr/bin/env python3
"""Offline plots from multilift run directories.

Reads only the documented run artifacts (resolved_config.json,
states.csv, tensions.csv, episode.csv / l_means.json) and renders:

    traj     3D snapshots: quadrotors, cables, load box, reference curve
    tension  actual vs MPC-computed cable tension magnitudes
    loss     episode mean-loss curves, with a mean/std band over runs

Usage:
    plot.py RUN_DIR [RUN_DIR ...] [--kind traj|tension|loss]
            [--times T ...] [--out DIR]
"""

import argparse
import csv
import json
import os
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


class ArtifactError(RuntimeError):
    pass


STATE_COLUMNS = ["t", "agent_id", "px", "py", "pz", "vx", "vy", "vz",
                 "qw", "qx", "qy", "qz", "wx", "wy", "wz"]


class RunArtifact:
    """One run directory's parsed outputs."""

    def __init__(self, run_dir):
        self.run_dir = run_dir
        cfg_path = os.path.join(run_dir, "resolved_config.json")
        if not os.path.exists(cfg_path):
            raise ArtifactError(f"missing file: {cfg_path}")
        with open(cfg_path) as f:
            self.config = json.load(f)
        self.scenario = self.config["scenario"]
        self.n = int(self.scenario["n"])

    def _read_csv(self, name, required):
        path = os.path.join(self.run_dir, name)
        if not os.path.exists(path):
            raise ArtifactError(f"missing file: {path}")
        with open(path) as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise ArtifactError(f"{path} is empty")
        for col in required:
            if col not in rows[0]:
                raise ArtifactError(f"{path} is missing column {col!r}")
        return rows

    def states(self):
        rows = self._read_csv("states.csv", STATE_COLUMNS
                              + [f"T{i + 1}" for i in range(self.n)])
        by_agent = {}
        for r in rows:
            vals = [float(r[c]) for c in STATE_COLUMNS if c != "agent_id"]
            by_agent.setdefault(r["agent_id"], []).append(vals)
        out = {}
        for agent, vals in by_agent.items():
            arr = np.array(vals)
            out[agent] = {"t": arr[:, 0], "x": arr[:, 1:14]}
        return out

    def tensions(self):
        cols = ["t"] + [f"T{i + 1}_actual" for i in range(self.n)] \
            + [f"T{i + 1}_mpc" for i in range(self.n)]
        rows = self._read_csv("tensions.csv", cols)
        data = {c: [] for c in cols}
        for r in rows:
            for c in cols:
                data[c].append(float(r[c]) if r[c] != "" else np.nan)
        return {c: np.array(v) for c, v in data.items()}

    def episode_losses(self):
        path = os.path.join(self.run_dir, "l_means.json")
        if os.path.exists(path):
            with open(path) as f:
                return np.array(json.load(f), dtype=float)
        rows = self._read_csv("episode.csv", ["episode", "L_mean_running"])
        by_ep = {}
        for r in rows:
            by_ep[int(r["episode"])] = float(r["L_mean_running"])
        return np.array([by_ep[k] for k in sorted(by_ep)])

    def reference_curve(self, samples=200):
        traj = self.scenario["trajectory"]
        z = traj.get("height", 2.0)
        cx, cy = traj.get("center", (0.0, 0.0))
        kind = traj.get("kind", "hover")
        if kind == "hover":
            r = traj.get("radius", 0.0)
            return np.array([[cx + r, cy, z]])
        phi = np.linspace(0, 2 * np.pi, samples)
        if kind == "circle":
            r = traj["radius"]
            return np.c_[cx + r * np.cos(phi), cy + r * np.sin(phi),
                         np.full(samples, z)]
        ax = traj.get("amp_x", traj.get("radius", 1.0))
        ay = traj.get("amp_y", 0.5 * ax)
        return np.c_[cx + ax * np.sin(phi), cy + 0.5 * ay * np.sin(2 * phi),
                     np.full(samples, z)]


def quat_to_rot(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


def _load_box(scenario):
    r = scenario["load"].get("attach_radius", 0.5)
    h = scenario["load"].get("attach_height", 0.1)
    corners = np.array([[sx * r, sy * r, sz * h]
                        for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    edges = [(0, 1), (0, 2), (1, 3), (2, 3), (4, 5), (4, 6), (5, 7), (6, 7),
             (0, 4), (1, 5), (2, 6), (3, 7)]
    return corners, edges


def _attachments(scenario):
    n = int(scenario["n"])
    r = scenario["load"].get("attach_radius", 0.5)
    h = scenario["load"].get("attach_height", 0.1)
    ang = 2 * np.pi * np.arange(n) / n
    return np.c_[r * np.cos(ang), r * np.sin(ang), np.full(n, h)]


def plot_trajectory3d(run, times, out_dir):
    """One 3D snapshot per requested time; returns written paths."""
    states = run.states()
    t_axis = states["load"]["t"]
    curve = run.reference_curve()
    corners, edges = _load_box(run.scenario)
    attach = _attachments(run.scenario)
    paths = []
    for t_req in times:
        idx = int(np.argmin(np.abs(t_axis - t_req)))
        fig = plt.figure(figsize=(7, 6))
        ax = fig.add_subplot(projection="3d")
        ax.plot(curve[:, 0], curve[:, 1], curve[:, 2], "k--", lw=0.8,
                label="reference")
        xl = states["load"]["x"][idx]
        rot = quat_to_rot(xl[6:10] / np.linalg.norm(xl[6:10]))
        box = xl[0:3] + corners @ rot.T
        for a, b in edges:
            ax.plot(*np.c_[box[a], box[b]], color="tab:brown", lw=1.2)
        for i in range(run.n):
            agent = f"q{i + 1}"
            xq = states[agent]["x"][idx]
            ax.scatter(*xq[0:3], s=45, marker="o", label=agent)
            pivot = xl[0:3] + rot @ attach[i]
            ax.plot(*np.c_[xq[0:3], pivot], color="gray", lw=0.9)
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_zlabel("z [m]")
        ax.set_title(f"t = {t_axis[idx]:.2f} s")
        ax.legend(loc="upper left", fontsize=7)
        path = os.path.join(out_dir, f"traj_t{t_axis[idx]:.2f}.png")
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths


def _slot_bands(run):
    slot = run.scenario.get("slot") or {}
    if not slot:
        return []
    states = run.states()
    t = states["load"]["t"]
    pos = states["load"]["x"][:, 0:3]
    d = np.linalg.norm(pos - np.array(slot["center"]), axis=1)
    near = d < 1.0
    bands, start = [], None
    for i, flag in enumerate(near):
        if flag and start is None:
            start = t[i]
        if not flag and start is not None:
            bands.append((start, t[i]))
            start = None
    if start is not None:
        bands.append((start, t[-1]))
    return bands


def plot_tensions(run, out_dir):
    """Actual vs MPC tension magnitudes per cable, slot bands shaded."""
    data = run.tensions()
    fig, ax = plt.subplots(figsize=(8, 4.5))
    colors = plt.cm.tab10(np.linspace(0, 1, run.n))
    for i in range(run.n):
        ax.plot(data["t"], data[f"T{i + 1}_actual"], color=colors[i],
                label=f"cable {i + 1} actual")
        ax.plot(data["t"], data[f"T{i + 1}_mpc"], color=colors[i], ls="--",
                label=f"cable {i + 1} MPC")
    for lo, hi in _slot_bands(run):
        ax.axvspan(lo, hi, color="tab:blue", alpha=0.15)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("tension [N]")
    ax.legend(fontsize=7, ncol=2)
    path = os.path.join(out_dir, "tensions.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_loss(runs, out_dir):
    """Mean-loss curves; several runs get a mean line and a +/-1 std band."""
    series = [run.episode_losses() for run in runs]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    if len(series) == 1:
        ax.plot(np.arange(len(series[0])), series[0], marker="o",
                label=os.path.basename(runs[0].run_dir.rstrip("/")))
    else:
        length = min(len(s) for s in series)
        stack = np.stack([s[:length] for s in series])
        mean, std = stack.mean(0), stack.std(0)
        x = np.arange(length)
        ax.plot(x, mean, marker="o", label=f"mean of {len(series)} runs")
        ax.fill_between(x, mean - std, mean + std, alpha=0.25,
                        label="+/- 1 std")
    ax.set_xlabel("episode")
    ax.set_ylabel("mean loss")
    ax.legend()
    path = os.path.join(out_dir, "loss.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("run_dirs", nargs="+")
    parser.add_argument("--kind", choices=["traj", "tension", "loss"],
                        default="traj")
    parser.add_argument("--times", type=float, nargs="*", default=[0.0])
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    out_dir = args.out or args.run_dirs[0]
    os.makedirs(out_dir, exist_ok=True)
    try:
        runs = [RunArtifact(d) for d in args.run_dirs]
        if args.kind == "traj":
            paths = plot_trajectory3d(runs[0], args.times, out_dir)
        elif args.kind == "tension":
            paths = [plot_tensions(runs[0], out_dir)]
        else:
            paths = [plot_loss(runs, out_dir)]
    except ArtifactError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
