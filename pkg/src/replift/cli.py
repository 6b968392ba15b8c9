"""``replift`` command line: gen, train, eval, sweep, lift, plot.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every artifact-producing command writes ``run_manifest.json`` next to its
outputs.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import apply_thread_cap

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"

log = logging.getLogger("replift")


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# manifest helpers


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def config_digest(config_dict):
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _digests(paths, base=None):
    """sha256 per existing file, keyed by path relative to ``base`` when given."""
    from .dataio import sha256_file

    def key(p):
        return os.path.relpath(p, base) if base is not None else str(p)

    return {key(p): sha256_file(p) for p in sorted(paths, key=str) if Path(p).is_file()}


def _dataset_files(directory):
    directory = Path(directory)
    return [p for p in directory.iterdir() if p.is_file() and p.name != MANIFEST_NAME]


def write_manifest(out_dir, command, started, config=None, datasets=(), checkpoints=(), outputs=(), seed=None,
                   name=MANIFEST_NAME):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "config_digest": config_digest(config) if config is not None else None,
        "dataset_digests": _digests(datasets, out_dir),
        "checkpoint_digests": _digests(checkpoints, out_dir),
        "output_digests": _digests(outputs, out_dir),
        "started": started,
        "finished": _now(),
    }
    path = out_dir / name
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _load_json(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such config file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None


def _sigmas(text):
    try:
        vals = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sigma list {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("sigmas must be a non-empty list of non-negative numbers")
    return vals


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, root):
    from .dataio import save_dataset
    from .datagen import SyntheticPoseConfig, make_splits

    started = _now()
    raw = _load_json(root / args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.count is not None:
        raw["count"] = args.count
    try:
        config = SyntheticPoseConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad generator config: {exc}") from None
    out = root / args.out
    train, test = make_splits(config)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    files = _dataset_files(out / "train") + _dataset_files(out / "test")
    write_manifest(out, "gen", started, config=config.to_dict(), outputs=files, seed=config.seed)
    print(f"wrote {len(train.poses2d)} training 2D / {len(train.poses3d)} 3D poses and "
          f"{len(test.poses2d)} test pairs under {out}")


def _train_config(args, root):
    from .train import TrainConfig

    raw = _load_json(root / args.config) if args.config else {}
    overrides = {
        "learning_rate": args.lr,
        "decay": args.decay,
        "critic_iters": args.critic_iters,
        "gp_weight": args.gp_weight,
        "epochs": args.epochs,
        "batch_size": args.batch,
        "seed": args.seed,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_kcs:
        raw["kcs_enabled"] = False
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad training config: {exc}") from None


def cmd_train(args, root):
    from . import train as tr
    from .dataio import load_dataset
    from .evaluation import quick_eval

    started = _now()
    data_dir = root / args.data
    dataset = load_dataset(data_dir)
    eval_ds = load_dataset(root / args.eval_data) if args.eval_data else None
    out = root / args.out
    state = None
    checkpoints = []
    if args.resume:
        resume = root / args.resume
        if not resume.exists():
            raise DataError(f"no such checkpoint: {resume}")
        state = tr.load_checkpoint(resume)
        config = state.config if args.epochs is None else replace(state.config, epochs=args.epochs)
        state.config = config
        checkpoints.append(resume)
    else:
        config = _train_config(args, root)
    stop_after = None
    if args.stop_after_epoch is not None:
        start = state.epoch if state is not None else 0
        stop_after = max(args.stop_after_epoch - start, 0)
    if stop_after == 0:
        out.mkdir(parents=True, exist_ok=True)
        if state is None:
            state = tr.init_state(config, dataset.skeleton)
            tr.save_checkpoint(state, out / tr.checkpoint_name(0))
    else:
        state = tr.train(config, dataset, eval_ds, out, state=state, stop_after=stop_after,
                         evaluate_fn=quick_eval if eval_ds is not None else None)
    outputs = sorted(out.glob("*.rlck")) + [p for p in [out / "metrics.csv"] if p.exists()]
    datasets = _dataset_files(data_dir) + (_dataset_files(root / args.eval_data) if args.eval_data else [])
    manifest_config = dict(config.to_dict(), kcs_enabled=config.kcs_enabled)
    write_manifest(out, "train", started, config=manifest_config, datasets=datasets, checkpoints=checkpoints,
                   outputs=outputs, seed=config.seed)
    print(f"trained to epoch {state.epoch}/{config.epochs}; outputs in {out}")


def _load_lifter(path):
    from .train import load_lifter

    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}")
    try:
        return load_lifter(path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: unreadable checkpoint: {exc}") from None


def _check_joints(model, spec, what):
    if model.arch.n_joints != spec.n_joints:
        raise DataError(f"{what} has {spec.n_joints} joints, checkpoint expects {model.arch.n_joints}")


def cmd_eval(args, root):
    from .dataio import load_dataset
    from .evaluation import evaluate

    started = _now()
    ckpt = root / args.checkpoint
    model, _ = _load_lifter(ckpt)
    data_dir = root / args.data
    dataset = load_dataset(data_dir)
    _check_joints(model, dataset.skeleton, data_dir)
    prov = {"checkpoint": ckpt.name, "checkpoint_sha256": _digests([ckpt])[str(ckpt)][:16],
            "dataset": str(args.data), "noise_sigma_px": 0.0}
    report = evaluate(model, dataset, prov)
    out = root / args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_table())
    write_manifest(out, "eval", started, datasets=_dataset_files(data_dir), checkpoints=[ckpt],
                   outputs=[out / "report.csv", out / "report.txt"])
    print(report.to_table(), end="")


def cmd_sweep(args, root):
    from .dataio import load_dataset
    from .evaluation import noise_sweep, sweep_to_csv, sweep_to_table

    started = _now()
    ckpt = root / args.checkpoint
    model, _ = _load_lifter(ckpt)
    data_dir = root / args.data
    dataset = load_dataset(data_dir)
    _check_joints(model, dataset.skeleton, data_dir)
    rows = noise_sweep(model, dataset, args.sigmas, seed=args.seed)
    out = root / args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_to_csv(rows))
    (out / "sweep.txt").write_text(sweep_to_table(rows))
    write_manifest(out, "sweep", started, config={"sigmas": args.sigmas}, datasets=_dataset_files(data_dir),
                   checkpoints=[ckpt], outputs=[out / "sweep.csv", out / "sweep.txt"], seed=args.seed)
    print(sweep_to_table(rows), end="")


def _checkpoint_skeleton(meta):
    from .skeleton import DEFAULT_SKELETON, SkeletonSpec

    return SkeletonSpec.from_dict(meta["skeleton"]) if meta.get("skeleton") else DEFAULT_SKELETON


def bench_lifter(model, w, frames=10_000, batch=1):
    """Per-frame forward latency in ms: ``(mean, p99)`` over at least ``frames`` frames."""
    import torch

    if len(w) == 0:
        w = np.zeros((batch, 2 * model.arch.n_joints), dtype=np.float32)
    w = torch.from_numpy(np.ascontiguousarray(w.reshape(len(w), -1), dtype=np.float32))
    calls = -(-frames // batch)
    per_frame = np.empty(calls)
    with torch.inference_mode():
        for _ in range(10):  # warm-up
            model(w[np.arange(batch) % len(w)])
        for i in range(calls):
            idx = (np.arange(batch) + i * batch) % len(w)
            x = w[idx]
            t0 = time.perf_counter()
            model(x)
            per_frame[i] = (time.perf_counter() - t0) * 1e3 / batch
    return float(per_frame.mean()), float(np.percentile(per_frame, 99)), calls * batch


def cmd_lift(args, root):
    from .dataio import DatasetFormatError, load_keypoints, write_records
    from .datagen import preprocess_2d
    from .evaluation import lift

    started = _now()
    ckpt = root / args.checkpoint
    model, meta = _load_lifter(ckpt)
    spec = _checkpoint_skeleton(meta)
    kp = root / args.keypoints
    if not kp.exists():
        raise DataError(f"no such keypoint file: {kp}")
    if kp.stat().st_size == 0:
        W = np.zeros((0, 2, spec.n_joints))
        masks = np.zeros((0, spec.n_joints), dtype=bool)
    else:
        try:
            W, masks = load_keypoints(kp, spec)
        except DatasetFormatError as exc:
            raise DataError(str(exc)) from None
    _check_joints(model, spec, kp)
    X, K = lift(model, W, masks, spec)
    out = root / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    cam_out = out.with_name(out.stem + "_cameras" + out.suffix)
    write_records(out, "3d", X)
    write_records(cam_out, "cam", K)
    write_manifest(out.parent, "lift", started, datasets=[kp], checkpoints=[ckpt], outputs=[out, cam_out],
                   name=out.stem + "_" + MANIFEST_NAME)
    print(f"lifted {len(X)} frames -> {out} (cameras -> {cam_out.name})")
    if args.bench:
        w = preprocess_2d(W, masks, spec) if len(W) else np.zeros((0, 2, spec.n_joints))
        mean, p99, n = bench_lifter(model, w, frames=args.frames, batch=args.batch)
        print(f"forward latency over {n} frames at batch {args.batch}: mean {mean:.4f} ms/frame, "
              f"p99 {p99:.4f} ms/frame")


def _plot_kind(path):
    with open(path, encoding="ascii", errors="replace") as fh:
        head = fh.readline()
    if head.startswith("#replift"):
        return "poses"
    cols = head.strip().split(",")
    if "sigma" in cols:
        return "sweep"
    if "epoch" in cols and "rep_loss" in cols:
        return "losses"
    raise DataError(f"{path}: not a pose file, metrics log or noise-sweep table")


def cmd_plot(args, root):
    from . import plotting
    from .dataio import DatasetFormatError, read_records

    started = _now()
    out = root / args.out
    out.mkdir(parents=True, exist_ok=True)
    written = []
    inputs = []
    for name in args.inputs:
        path = root / name
        if not path.exists():
            raise DataError(f"no such file: {path}")
        inputs.append(path)
        kind = _plot_kind(path)
        try:
            if kind == "poses":
                _, X, _, _ = read_records(path, "3d")
                written += plotting.render_poses(X, out, prefix=path.stem)
            elif kind == "sweep":
                written.append(plotting.plot_sweep(path, out / f"{path.stem}_sweep.png"))
            else:
                written.append(plotting.plot_losses(path, out / f"{path.stem}_losses.png"))
        except (DatasetFormatError, plotting.PlotInputError) as exc:
            raise DataError(str(exc)) from None
    write_manifest(out, "plot", started, datasets=inputs, outputs=written)
    print(f"wrote {len(written)} image(s) to {out}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="replift", description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default=".", help="root for all relative paths (default: cwd)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=f"replift {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic train/test datasets")
    g.add_argument("--config", help="JSON generator config")
    g.add_argument("--out", required=True, help="output directory (gets train/ and test/)")
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int, help="training samples per pool")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="adversarial training on an unpaired dataset")
    t.add_argument("--data", required=True, help="training dataset directory")
    t.add_argument("--eval-data", help="paired dataset scored after every epoch")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--config", help="JSON training config; flags override it")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after-epoch", type=int, help="halt once this epoch count is reached")
    t.add_argument("--no-kcs", action="store_true", help="critic without the KCS path")
    t.add_argument("--lr", type=float)
    t.add_argument("--decay", type=float)
    t.add_argument("--critic-iters", type=int)
    t.add_argument("--gp-weight", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a paired dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="noise-robustness sweep")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--sigmas", type=_sigmas, default=[0.0, 5.0, 10.0, 15.0, 20.0], help="comma-separated px")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sweep)

    li = sub.add_parser("lift", help="lift a 2D keypoint file to 3D")
    li.add_argument("--checkpoint", required=True)
    li.add_argument("--keypoints", required=True)
    li.add_argument("--out", required=True, help="3D pose file; cameras go to <stem>_cameras<suffix>")
    li.add_argument("--bench", action="store_true", help="report per-frame forward latency")
    li.add_argument("--batch", type=int, default=1, help="benchmark batch size")
    li.add_argument("--frames", type=int, default=10_000, help="benchmark frame count")
    li.set_defaults(func=cmd_lift)

    pl = sub.add_parser("plot", help="render pose files, metrics logs or sweep tables")
    pl.add_argument("inputs", nargs="+")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    from .dataio import DatasetFormatError
    from .skeleton import DegenerateInputError
    from .train import NumericalFailure

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "batch", None) is not None and args.batch <= 0:
        parser.error("--batch must be positive")
    if args.command == "lift" and args.frames <= 0:
        parser.error("--frames must be positive")
    try:
        apply_thread_cap()
    except ValueError as exc:
        parser.error(str(exc))
    root = Path(args.workdir)
    try:
        args.func(args, root)
    except NumericalFailure as exc:
        print(f"replift: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DatasetFormatError, DegenerateInputError, FileNotFoundError) as exc:
        print(f"replift: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
