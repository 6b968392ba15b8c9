"""Pose metrics (MPJPE protocols I/II, median, PCK3D, AUC, symmetry) and reports."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch

from . import kernels
from .camera import rotation_from_camera
from .datagen import NoiseSpec, add_noise, preprocess_2d
from .skeleton import DEFAULT_SKELETON, procrustes_align, root_center, symmetry_error
from .train import POSE_UNIT_MM

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = np.arange(0.0, 150.0 + 1e-9, 5.0)


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


def joint_errors(estimates, truths, protocol="I", center=True, root_index=0):
    """``(N, n)`` per-joint Euclidean errors under the given protocol.

    Protocol I compares the poses as given (optionally both root-centred);
    protocol II first similarity-aligns each estimate to its ground truth,
    absorbing translation, rotation and scale.
    """
    E, _ = _batch(estimates)
    T, _ = _batch(truths)
    if E.shape != T.shape:
        raise ValueError(f"estimate shape {E.shape} != truth shape {T.shape}")
    if protocol in ("I", 1, "1"):
        if center:
            E = root_center(E, root_index)
            T = root_center(T, root_index)
    elif protocol in ("II", 2, "2"):
        E, _, _ = procrustes_align(E, T)
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return kernels.joint_distances(E, T)


def mpjpe(estimate, truth, protocol="I", center=True, root_index=0):
    """Mean per-joint position error; a float for one pose, ``(N,)`` for a batch."""
    err = joint_errors(estimate, truth, protocol, center, root_index).mean(axis=1)
    return float(err[0]) if np.ndim(estimate) == 2 else err


def median_mpjpe(estimates, truths, protocol="II"):
    return float(np.median(mpjpe(np.asarray(estimates), np.asarray(truths), protocol)))


def pck3d(estimates, truths, threshold_mm=PCK_THRESHOLD_MM, align=True):
    """Percentage of joints within ``threshold_mm`` (distance <= threshold)."""
    d = _pck_distances(estimates, truths, align)
    return 100.0 * float(np.mean(d <= threshold_mm))


def auc(estimates, truths, thresholds=AUC_THRESHOLDS_MM, align=True):
    """Mean PCK3D over ``thresholds`` (0..150 mm every 5 mm), in percent."""
    d = _pck_distances(estimates, truths, align).ravel()
    return 100.0 * float(np.mean([np.mean(d <= t) for t in thresholds]))


def _pck_distances(estimates, truths, align):
    E, _ = _batch(estimates)
    if len(E) == 0:
        raise ValueError("no poses to score")
    return joint_errors(E, truths, "II" if align else "I", center=False)


# ---------------------------------------------------------------------------
# lifting and reports


def lift(lifter, poses2d, masks, spec=DEFAULT_SKELETON, batch=4096):
    """Normalise pixel-space 2D and run the lifter.

    Returns ``(poses_mm (N, 3, n), cameras (N, 2, 3))``; cameras act on model
    units and normalised 2D.
    """
    w = preprocess_2d(poses2d, masks, spec).astype(np.float32)
    Xs, Ks = [], []
    with torch.no_grad():
        for s in range(0, len(w), batch):
            X, K = lifter(torch.from_numpy(w[s : s + batch]).flatten(1))
            Xs.append(X.numpy())
            Ks.append(K.numpy())
    if not Xs:
        n = spec.n_joints
        return np.zeros((0, 3, n)), np.zeros((0, 2, 3))
    X = np.concatenate(Xs).astype(np.float64) * POSE_UNIT_MM
    return X, np.concatenate(Ks).astype(np.float64)


def to_world_frame(poses, est_cameras, true_cameras):
    """Rotate estimates into the dataset frame through their estimated camera.

    The estimated camera gives the pose's orientation relative to the
    camera; the known ground-truth camera maps camera coordinates back to
    the dataset frame.
    """
    R_est = rotation_from_camera(est_cameras)
    R_true = rotation_from_camera(true_cameras)
    return np.swapaxes(R_true, -1, -2) @ R_est @ poses


@dataclass
class EvalReport:
    actions: list
    per_action: dict  # action -> {metric: value}
    aggregate: dict
    symmetry: dict  # mean/std/max over frames, mm
    provenance: dict = field(default_factory=dict)

    METRICS = ("frames", "mpjpe_p1", "mpjpe_p2", "median_p2", "pck3d", "auc")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["action", *self.METRICS, "sym_mean", "sym_std", "sym_max"])
        for name in self.actions + ["Avg."]:
            row = self.per_action[name] if name != "Avg." else self.aggregate
            sym = row.get("symmetry", self.symmetry)
            w.writerow([name] + [_fmt(row[m]) for m in self.METRICS] + [_fmt(sym[k]) for k in ("mean", "std", "max")])
        return buf.getvalue()

    def to_table(self):
        cols = self.actions + ["Avg."]
        lines = [f"# {k}: {v}" for k, v in sorted(self.provenance.items())]
        header = f"{'metric':<12}" + "".join(f"{c[:9]:>10}" for c in cols)
        lines += [header, "-" * len(header)]
        for metric, label in (("mpjpe_p1", "Protocol-I"), ("mpjpe_p2", "Protocol-II"), ("median_p2", "median"),
                              ("pck3d", "PCK3D"), ("auc", "AUC")):
            vals = [self.per_action[c][metric] if c != "Avg." else self.aggregate[metric] for c in cols]
            lines.append(f"{label:<12}" + "".join(f"{v:>10.1f}" for v in vals))
        s = self.symmetry
        lines.append(f"symmetry error (mm): mean {s['mean']:.1f}  std {s['std']:.1f}  max {s['max']:.1f}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def _symmetry_stats(poses, spec):
    s = np.atleast_1d(symmetry_error(poses, spec))
    return {"mean": float(s.mean()), "std": float(s.std()), "max": float(s.max())}


def score(estimates, truths, actions=None, est_world=None, spec=DEFAULT_SKELETON, provenance=None):
    """Build an ``EvalReport`` from lifted poses and ground truth (mm).

    ``est_world`` are the estimates in the dataset frame for protocol I;
    when omitted the estimates are compared as given.
    """
    E = np.asarray(estimates, dtype=np.float64)
    T = np.asarray(truths, dtype=np.float64)
    if len(E) == 0:
        raise ValueError("no poses to score")
    W = E if est_world is None else np.asarray(est_world, dtype=np.float64)
    actions = list(actions) if actions is not None else ["all"] * len(E)
    p1 = mpjpe(W, T, "I", root_index=spec.root_index)
    d2 = joint_errors(E, T, "II")
    p2 = d2.mean(axis=1)
    names = sorted(set(actions))
    labels = np.asarray(actions)
    per_action = {}
    for name in names:
        sel = labels == name
        per_action[name] = {
            "frames": int(sel.sum()),
            "mpjpe_p1": float(p1[sel].mean()),
            "mpjpe_p2": float(p2[sel].mean()),
            "median_p2": float(np.median(p2[sel])),
            "pck3d": 100.0 * float(np.mean(d2[sel] <= PCK_THRESHOLD_MM)),
            "auc": 100.0 * float(np.mean([np.mean(d2[sel] <= t) for t in AUC_THRESHOLDS_MM])),
            "symmetry": _symmetry_stats(E[sel], spec),
        }
    # frame mean per action, then the mean over actions
    aggregate = {m: float(np.mean([per_action[a][m] for a in names])) for m in EvalReport.METRICS[1:]}
    aggregate["frames"] = int(len(E))
    return EvalReport(
        actions=names,
        per_action=per_action,
        aggregate=aggregate,
        symmetry=_symmetry_stats(E, spec),
        provenance=dict(provenance or {}),
    )


def evaluate(lifter, dataset, provenance=None):
    """Lift a paired dataset and score it against its ground truth."""
    if not dataset.paired:
        raise ValueError("evaluation needs a paired dataset")
    spec = dataset.skeleton
    X, K = lift(lifter, dataset.poses2d, dataset.masks, spec)
    truth = root_center(dataset.poses3d, spec.root_index)
    world = to_world_frame(X, K, dataset.cameras) if dataset.cameras is not None else None
    prov = {"frame": "protocol I in the generator's camera-free frame"}
    prov.update(provenance or {})
    return score(X, truth, dataset.actions, world, spec, prov)


def quick_eval(lifter, dataset):
    """Aggregate ``(protocol I, protocol II)`` MPJPE; used as the training eval hook."""
    rep = evaluate(lifter, dataset)
    return rep.aggregate["mpjpe_p1"], rep.aggregate["mpjpe_p2"]


def noise_sweep(lifter, dataset, sigmas, seed=0, provenance=None):
    """Evaluate under Gaussian pixel noise for each ``sigma``; one row per sigma."""
    rows = []
    for sigma in sigmas:
        noisy = add_noise(dataset, NoiseSpec(float(sigma), seed))
        prov = dict(provenance or {})
        prov["noise_sigma_px"] = float(sigma)
        rep = evaluate(lifter, noisy, prov)
        rows.append((float(sigma), rep))
    return rows


def sweep_to_csv(rows):
    actions = rows[0][1].actions if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sigma", *actions, "avg_p2", "sym_mean", "sym_std", "sym_max"])
    for sigma, rep in rows:
        w.writerow(
            [_fmt(sigma)]
            + [_fmt(rep.per_action[a]["mpjpe_p2"]) for a in actions]
            + [_fmt(rep.aggregate["mpjpe_p2"])]
            + [_fmt(rep.symmetry[k]) for k in ("mean", "std", "max")]
        )
    return buf.getvalue()


def sweep_to_table(rows):
    actions = rows[0][1].actions if rows else []
    header = f"{'Protocol-II':<16}" + "".join(f"{a[:9]:>10}" for a in actions) + f"{'Avg.':>10}" + "   symmetry mean/std/max"
    lines = [header, "-" * len(header)]
    for sigma, rep in rows:
        label = "GT" if sigma == 0 else f"GT + N(0,{sigma:g})"
        vals = [rep.per_action[a]["mpjpe_p2"] for a in actions] + [rep.aggregate["mpjpe_p2"]]
        s = rep.symmetry
        lines.append(
            f"{label:<16}" + "".join(f"{v:>10.1f}" for v in vals) + f"   {s['mean']:.1f} / {s['std']:.1f} / {s['max']:.1f}"
        )
    return "\n".join(lines) + "\n"


def linear_fit_r2(x, y):
    """Coefficient of determination of the least-squares line through ``(x, y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = np.sum((y - y.mean()) ** 2)
    return 1.0 - float(np.sum(resid**2) / ss_tot) if ss_tot > 0 else 1.0
