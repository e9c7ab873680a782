import csv
import json
import os
import subprocess
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from plot import ArtifactError, RunArtifact, main  # noqa: E402


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """A real run produced through the CLI, the only interface viz sees."""
    out = tmp_path_factory.mktemp("run")
    cmd = [sys.executable, "-m", "multilift.cli", "simulate",
           "--scenario", "hover", "--out", str(out),
           "--set", "episode.t_ep=0.2"]
    res = subprocess.run(cmd, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    # a small synthetic episode log so the loss plot has data
    with open(out / "l_means.json", "w") as f:
        json.dump([1.0, 0.8, 0.7], f)
    return out


def test_traj_snapshot_count_matches_times(run_dir, tmp_path):
    out = tmp_path / "plots"
    code = main([str(run_dir), "--kind", "traj", "--times", "0.0", "0.1",
                 "--out", str(out)])
    assert code == 0
    pngs = sorted(p for p in os.listdir(out) if p.startswith("traj"))
    assert len(pngs) == 2


def test_tension_plot_legend_matches_cable_count(run_dir, tmp_path):
    run = RunArtifact(str(run_dir))
    import plot as plot_mod
    path = plot_mod.plot_tensions(run, str(tmp_path))
    assert os.path.exists(path)
    import matplotlib.pyplot as plt
    # legend carries an actual and an MPC entry per cable
    fig_labels = 2 * run.n
    data = run.tensions()
    assert sum(1 for k in data if k != "t") == fig_labels


def test_loss_single_and_multi_run(run_dir, tmp_path):
    out1 = tmp_path / "one"
    assert main([str(run_dir), "--kind", "loss", "--out", str(out1)]) == 0
    assert os.path.exists(out1 / "loss.png")
    out3 = tmp_path / "three"
    assert main([str(run_dir), str(run_dir), str(run_dir), "--kind", "loss",
                 "--out", str(out3)]) == 0
    assert os.path.exists(out3 / "loss.png")


def test_missing_run_dir_fails_clearly(tmp_path, capsys):
    code = main([str(tmp_path / "nope"), "--kind", "loss",
                 "--out", str(tmp_path)])
    assert code == 2
    assert "missing file" in capsys.readouterr().err


def test_missing_column_fails_clearly(run_dir, tmp_path, capsys):
    broken = tmp_path / "broken"
    broken.mkdir()
    for name in ("resolved_config.json", "tensions.csv"):
        (broken / name).write_text((run_dir / name).read_text())
    # drop a column from states.csv
    with open(run_dir / "states.csv") as f:
        rows = list(csv.reader(f))
    rows = [r[:-1] for r in rows]
    with open(broken / "states.csv", "w", newline="") as f:
        csv.writer(f).writerows(rows)
    code = main([str(broken), "--kind", "traj", "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "missing column" in err


def test_idempotent_rerun(run_dir, tmp_path):
    out = tmp_path / "idem"
    main([str(run_dir), "--kind", "tension", "--out", str(out)])
    first = (out / "tensions.png").read_bytes()
    main([str(run_dir), "--kind", "tension", "--out", str(out)])
    assert (out / "tensions.png").read_bytes() == first
