"""Static figures: skeleton renders, training curves and noise-sweep lines."""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .skeleton import DEFAULT_SKELETON  # noqa: E402


class PlotInputError(ValueError):
    pass


def _read_csv(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise PlotInputError(f"{path}: no data rows")
    return rows


def _floats(rows, key, path):
    out = []
    for i, row in enumerate(rows, start=2):
        v = row.get(key)
        try:
            out.append(float(v) if v not in (None, "") else np.nan)
        except ValueError:
            raise PlotInputError(f"{path}:{i}: column {key!r} is not numeric") from None
    return np.asarray(out)


def render_skeleton(pose, path, spec=DEFAULT_SKELETON, title=None):
    """One 3D stick figure (``(3, n)`` in mm) saved to ``path``."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (3, spec.n_joints):
        raise PlotInputError(f"pose shape {pose.shape}, expected (3, {spec.n_joints})")
    fig = plt.figure(figsize=(4, 4))
    ax = fig.add_subplot(projection="3d")
    left = {b for pair in spec.left_right_pairs for b in pair[:1]}
    for k, (r, t) in enumerate(spec.bones):
        color = "tab:red" if k in left else "tab:blue"
        # depth on the axis into the screen, height up
        ax.plot(pose[0, [r, t]], pose[2, [r, t]], pose[1, [r, t]], color=color, lw=2)
    ax.scatter(pose[0], pose[2], pose[1], s=6, color="k")
    span = max(float(np.ptp(pose, axis=1).max()) / 2, 1.0)
    mid = pose.mean(axis=1)
    ax.set_xlim(mid[0] - span, mid[0] + span)
    ax.set_ylim(mid[2] - span, mid[2] + span)
    ax.set_zlim(mid[1] - span, mid[1] + span)
    ax.set_xlabel("x [mm]")
    ax.set_ylabel("z [mm]")
    ax.set_zlabel("y [mm]")
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return Path(path)


def render_poses(poses, out_dir, spec=DEFAULT_SKELETON, prefix="pose"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [render_skeleton(p, out_dir / f"{prefix}_{i:05d}.png", spec, f"frame {i}") for i, p in enumerate(poses)]


def plot_losses(metrics_csv, path):
    """Loss terms per epoch from a training metrics log."""
    rows = _read_csv(metrics_csv)
    epoch = _floats(rows, "epoch", metrics_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("w_loss", "rep_loss", "cam_loss", "gp"):
        ax.plot(epoch, _floats(rows, key, metrics_csv), marker="o", ms=3, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return Path(path)


def plot_sweep(sweep_csv, path):
    """Protocol-II error against noise sigma, one line per action plus the average."""
    rows = _read_csv(sweep_csv)
    if "sigma" not in rows[0]:
        raise PlotInputError(f"{sweep_csv}: not a noise-sweep table (no 'sigma' column)")
    sigma = _floats(rows, "sigma", sweep_csv)
    skip = {"sigma", "sym_mean", "sym_std", "sym_max"}
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in rows[0]:
        if key in skip:
            continue
        avg = key == "avg_p2"
        ax.plot(sigma, _floats(rows, key, sweep_csv), marker="o", lw=2.5 if avg else 1,
                label="Avg." if avg else key)
    ax.set_xlabel("noise sigma [px]")
    ax.set_ylabel("Protocol-II MPJPE [mm]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return Path(path)
