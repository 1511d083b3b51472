"""Figures: latent traversals, imagined acceleration profiles, learning curves."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..envlib import highway, sample_initial_states  # noqa: E402

PLOT_KINDS = ("traversal", "profiles", "curves")
_SAVE_KW = {"dpi": 80, "metadata": {"Software": None}}


def _traversal_grid(wm, n: int):
    """State grid, fixed action and axis labels for the reward heatmap of each env."""
    m = wm.manifest
    if m.env_id == "nav2d":
        xs, ys = np.linspace(-2.5, 2.5, n), np.linspace(-0.5, 2.5, n)
        gx, gy = np.meshgrid(xs, ys)
        states = np.stack([gx.ravel(), gy.ravel()], axis=1)
        actions = np.zeros((len(states), 2))
        return states, actions, (xs, ys), ("x", "y")
    if m.env_id == "cartpole":
        xs, ys = np.linspace(-2.4, 2.4, n), np.linspace(-0.4, 0.4, n)
        gx, gy = np.meshgrid(xs, ys)
        states = np.zeros((gx.size, 4))
        states[:, 0], states[:, 2] = gx.ravel(), gy.ravel()
        actions = np.ones((len(states), 1))
        return states, actions, (xs, ys), ("x", "theta")
    xs, ys = np.linspace(15.0, 35.0, n), np.linspace(-40.0, -6.0, n)
    gx, gy = np.meshgrid(xs, ys)
    base = sample_initial_states(m.env_id, 1, np.random.default_rng(0))[0]
    states = np.repeat(base[None], gx.size, axis=0)
    states[:, 2] = gx.ravel()
    states[:, 4 + 4 * 2 + 1] = gy.ravel()
    actions = np.full((len(states), 1), float(highway.ACTION_FASTER))
    return states, actions, (xs, ys), ("ego speed", "rear gap")


def plot_latent_traversal(wm, path, base_z=None, values=None, grid: int = 30) -> Path:
    """Decoded reward over a state grid while sweeping one latent dim at a time."""
    values = np.linspace(-2.0, 2.0, 5) if values is None else np.asarray(values)
    base_z = np.zeros(wm.latent_dim) if base_z is None else np.asarray(base_z, dtype=np.float64)
    states, actions, (xs, ys), (xl, yl) = _traversal_grid(wm, grid)
    m_dims = wm.latent_dim
    fig, axes = plt.subplots(m_dims, len(values), figsize=(2.0 * len(values), 1.8 * m_dims), squeeze=False)
    for d in range(m_dims):
        for j, v in enumerate(values):
            z = base_z.copy()
            z[d] = v
            r = wm.predict_reward(states, actions, np.broadcast_to(z, (len(states), m_dims)))
            ax = axes[d, j]
            ax.imshow(np.asarray(r).reshape(grid, grid), origin="lower", aspect="auto",
                      extent=(xs[0], xs[-1], ys[0], ys[-1]), cmap="viridis")
            ax.set_xticks([])
            ax.set_yticks([])
            if j == 0:
                ax.set_ylabel(f"z{d}\n{yl}")
            if d == 0:
                ax.set_title(f"z={v:+.1f}", fontsize=8)
            if d == m_dims - 1:
                ax.set_xlabel(xl)
    fig.tight_layout()
    return _save(fig, path)


def plot_acceleration_profiles(wm, zs, path, labels=None, steps: int = 40) -> Path:
    """Imagined accelerations under a fixed speed-up/slow-down action pattern.

    Highway plots the rear-vehicle node against the ego node, cartpole the pole
    node; nav2d has no acceleration nodes and shows the imagined reward instead.
    """
    m = wm.manifest
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    labels = labels if labels is not None else [f"z{i}" for i in range(len(zs))]
    s = sample_initial_states(m.env_id, 1, np.random.default_rng(0))
    s = np.repeat(s, len(zs), axis=0)
    half = steps // 2
    if m.env_id == "highway_v0":
        pattern = [highway.ACTION_FASTER] * half + [highway.ACTION_SLOWER] * (steps - half)
    elif m.env_id == "cartpole":
        pattern = [1, 0] * (steps // 2) + [1] * (steps % 2)
    else:
        pattern = [(1.0, 0.5)] * half + [(-1.0, -0.5)] * (steps - half)
    trace, ego = [], []
    for a in pattern:
        acts = np.repeat(np.atleast_2d(np.asarray(a, dtype=np.float64)), len(zs), axis=0)
        if m.env_id in ("highway_v0", "cartpole"):
            nodes = wm.nodes_t(s, acts, zs).data if wm.template.learned and wm.template.name != "none" else None
            if nodes is None:
                nxt = wm.predict_transition(s, acts, zs)
                vel = 2 if m.env_id == "highway_v0" else 3
                nodes_val = (nxt[:, vel] - s[:, vel]) / m.dt
                trace.append(nodes_val)
                ego.append(nodes_val)
            elif m.env_id == "highway_v0":
                trace.append(nodes[:, 3])
                ego.append(nodes[:, 0])
            else:
                trace.append(nodes[:, 1])
                ego.append(nodes[:, 0])
        else:
            trace.append(np.atleast_1d(wm.predict_reward(s, acts, zs)))
        s = m.clip_obs(wm.predict_transition(s, acts, zs))
    trace = np.array(trace)
    t = np.arange(len(pattern)) * m.dt
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i in range(len(zs)):
        ax.plot(t, trace[:, i], label=labels[i])
    if m.env_id == "highway_v0":
        ax.plot(t, np.array(ego)[:, 0], "k--", lw=1, label="ego")
        ax.set_ylabel("rear vehicle accel [m/s²]")
    elif m.env_id == "cartpole":
        ax.set_ylabel("pole angular accel")
    else:
        ax.set_ylabel("imagined reward")
    ax.set_xlabel("time [s]")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def read_metric_column(csv_path, column: str) -> tuple[np.ndarray, np.ndarray]:
    it, vals = [], []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row.get(column, "") == "":
                continue
            it.append(int(row["iteration"]))
            vals.append(float(row[column]))
    return np.array(it), np.array(vals)


def plot_learning_curves(runs: dict, path, column: str = "eval_return") -> tuple[Path, dict]:
    """Mean and shaded spread over seeds for each named group of metric CSVs.

    ``runs`` maps a label to a list of CSV paths (one per seed).  Returns the
    figure path and, per label, the number of seeds aggregated.
    """
    fig, ax = plt.subplots(figsize=(6, 3.5))
    counts = {}
    for label, paths in runs.items():
        series = [read_metric_column(p, column) for p in paths]
        series = [s for s in series if len(s[0])]
        if not series:
            continue
        n = min(len(s[0]) for s in series)
        it = series[0][0][:n]
        vals = np.stack([s[1][:n] for s in series])
        mean, var = vals.mean(axis=0), vals.var(axis=0)
        ax.plot(it, mean, label=f"{label} (n={len(series)})")
        ax.fill_between(it, mean - np.sqrt(var), mean + np.sqrt(var), alpha=0.25)
        counts[label] = len(series)
    ax.set_xlabel("iteration")
    ax.set_ylabel(column.replace("_", " "))
    if counts:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path), counts


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def emit_plots(run_dir, kind: str, out_dir=None, extra_runs=None) -> list[Path]:
    """Render one plot kind from a finished run directory.

    ``extra_runs`` adds more run directories (e.g. other seeds) to the learning curves.
    """
    from ..metatrain import load_run

    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "plots"
    if kind == "curves":
        dirs = [run_dir] + [Path(d) for d in (extra_runs or [])]
        csvs = [d / "metrics.csv" for d in dirs]
        missing = [str(c) for c in csvs if not c.exists()]
        if missing:
            raise FileNotFoundError(f"missing metric logs: {missing}")
        path, _ = plot_learning_curves({run_dir.name: csvs}, out_dir / "learning_curves.png", "train_return")
        return [path]
    run = load_run(run_dir)
    wm = run.worldmodel
    if kind == "traversal":
        base = run.real_posterior_means.mean(axis=0) if run.real_posterior_means is not None else None
        return [plot_latent_traversal(wm, out_dir / "latent_traversal.png", base_z=base)]
    zs, labels = run.profile_latents()
    return [plot_acceleration_profiles(wm, zs, out_dir / "acceleration_profiles.png", labels)]
