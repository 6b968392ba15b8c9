"""Alternating gradient-penalty Wasserstein training of lifter and critic.

All randomness during an epoch comes from a numpy generator seeded with
``(seed, epoch)``, so a run resumed from an epoch checkpoint replays the
original run bit for bit.
"""

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import nets
from .datagen import preprocess_2d, preprocess_3d

log = logging.getLogger(__name__)

# networks see 3D poses in metres
POSE_UNIT_MM = 1000.0

METRIC_FIELDS = (
    "epoch",
    "step",
    "lr",
    "w_loss",
    "rep_loss",
    "cam_loss",
    "gp",
    "eval_mpjpe_p1",
    "eval_mpjpe_p2",
)


class NumericalFailure(RuntimeError):
    """A loss went non-finite; ``snapshot`` holds the offending state."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    decay: float = 0.95
    decay_every: int = 10
    critic_iters: int = 5
    gp_weight: float = 10.0
    w_rep: float = 1.0
    w_cam: float = 1.0
    w_adv: float = 1.0
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    kcs_enabled: bool = True
    hidden: int = 1000
    critic_hidden: int = 100
    critic_pose_hidden: int = None  # None: same as ``critic_hidden``
    slope: float = 0.2
    betas: tuple = (0.0, 0.9)
    # the lifter fits a non-smooth norm; without first-moment averaging its steps oscillate
    lifter_betas: tuple = (0.9, 0.999)  # None: same as ``betas``
    share_first_block: bool = False
    checkpoint_every: int = 5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size <= 0 or self.critic_iters <= 0 or self.decay_every <= 0:
            raise ValueError("batch_size, critic_iters and decay_every must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        for name in ("gp_weight", "w_rep", "w_cam", "w_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        if self.lifter_betas is not None:
            d["lifter_betas"] = list(self.lifter_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("betas", "lifter_betas"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def lr_at(self, epoch):
        return self.learning_rate * self.decay ** (epoch // self.decay_every)


def lifter_arch(config, n_joints, root_index=0):
    return nets.LifterArch(
        n_joints=n_joints,
        hidden=config.hidden,
        cam_hidden=config.hidden,
        slope=config.slope,
        share_first_block=config.share_first_block,
        root_index=root_index,
    )


def critic_arch(config, spec):
    return nets.CriticArch(
        n_joints=spec.n_joints,
        bones=spec.bones,
        kcs_hidden=config.critic_hidden,
        pose_hidden=config.critic_pose_hidden or config.critic_hidden,
        slope=config.slope,
        kcs_enabled=config.kcs_enabled,
    )


@dataclass
class TrainState:
    config: TrainConfig
    lifter: nets.Lifter
    critic: nets.Critic
    opt_lifter: torch.optim.Optimizer
    opt_critic: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    skeleton: dict = None  # SkeletonSpec.to_dict() of the training data


def init_state(config, spec):
    torch.set_default_dtype(torch.float32)
    la = lifter_arch(config, spec.n_joints, spec.root_index)
    ca = critic_arch(config, spec)
    lifter = nets.build(la, nets.init_parameters(la, config.seed))
    critic = nets.build(ca, nets.init_parameters(ca, config.seed + 1))
    return TrainState(
        config=config,
        lifter=lifter,
        critic=critic,
        opt_lifter=_adam(lifter, config, config.lifter_betas),
        opt_critic=_adam(critic, config),
        skeleton=spec.to_dict(),
    )


def _adam(module, config, betas=None):
    # the fused CPU kernel is deterministic and several times faster on the 1000-wide layers
    betas = tuple(float(b) for b in (betas or config.betas))
    return torch.optim.Adam(module.parameters(), lr=config.learning_rate, betas=betas, fused=True)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _check_finite(state, **terms):
    bad = {k: float(v) for k, v in terms.items() if not np.isfinite(float(v))}
    if bad:
        raise NumericalFailure(f"non-finite loss at epoch {state.epoch} step {state.step}: {bad}", snapshot=state)


def critic_step(state, real, fake, eps):
    """One critic update on ``mean(c(fake)) - mean(c(real)) + gp_weight * GP``.

    ``real``/``fake`` are ``(B, 3, n)`` tensors, ``eps`` the ``(B, 1, 1)``
    interpolation weights. Returns ``(wasserstein_estimate, gp)`` floats.
    """
    cfg = state.config
    critic = state.critic
    fake = fake.detach()
    c_real = critic(real).mean()
    c_fake = critic(fake).mean()
    gp = nets.gradient_penalty(critic, real, fake, eps) if cfg.gp_weight > 0 else torch.zeros(())
    loss = c_fake - c_real + cfg.gp_weight * gp
    _check_finite(state, critic_loss=loss.item())
    state.opt_critic.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_critic.step()
    return (c_real - c_fake).item(), gp.item()


def lifter_step(state, w, mask):
    """One lifter update; the critic is read but never modified.

    ``w`` is ``(B, 2, n)`` normalised 2D (masked joints zero), ``mask``
    ``(B, n)``. Returns a dict of the per-term batch means.
    """
    cfg = state.config
    lifter, critic = state.lifter, state.critic
    X, K = lifter(w.flatten(1))
    rep = nets.reprojection_loss_t(w, X, K, mask).mean()
    cam = nets.camera_loss_t(K).mean()
    for p in critic.parameters():
        p.requires_grad_(False)
    try:
        adv = -critic(X).mean() if cfg.w_adv > 0 else torch.zeros(())
    finally:
        for p in critic.parameters():
            p.requires_grad_(True)
    loss = cfg.w_adv * adv + cfg.w_rep * rep + cfg.w_cam * cam
    _check_finite(state, lifter_loss=loss.item())
    state.opt_lifter.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_lifter.step()
    state.step += 1
    return {"adv": adv.item(), "rep_loss": rep.item(), "cam_loss": cam.item()}


@dataclass
class TrainingData:
    w: torch.Tensor  # (N, 2, n) normalised 2D, float32
    mask: torch.Tensor  # (N, n)
    real: torch.Tensor  # (M, 3, n) template-aligned 3D in model units


def prepare_training_data(dataset):
    """Normalise the 2D pool and template-align the 3D pool (unpaired)."""
    spec = dataset.skeleton
    if dataset.poses3d is None:
        raise ValueError("training needs a 3D pose pool")
    if dataset.template is None:
        raise ValueError("training dataset carries no template pose")
    w = preprocess_2d(dataset.poses2d, dataset.masks, spec)
    real = preprocess_3d(dataset.poses3d, dataset.template, spec) / POSE_UNIT_MM
    return TrainingData(
        w=torch.from_numpy(w.astype(np.float32)),
        mask=torch.from_numpy(dataset.masks.astype(np.float32)),
        real=torch.from_numpy(real.astype(np.float32)),
    )


def epoch_rng(seed, epoch):
    return np.random.default_rng([int(seed), int(epoch), 0x7EA])


def run_epoch(state, data):
    cfg = state.config
    rng = epoch_rng(cfg.seed, state.epoch)
    lr = cfg.lr_at(state.epoch)
    _set_lr(state.opt_lifter, lr)
    _set_lr(state.opt_critic, lr)
    N, M = len(data.w), len(data.real)
    B = min(cfg.batch_size, N)
    order = rng.permutation(N)
    sums = {"w_loss": 0.0, "gp": 0.0, "rep_loss": 0.0, "cam_loss": 0.0}
    n_critic = n_lifter = 0
    state.lifter.train()
    state.critic.train()
    n_it = cfg.critic_iters
    for start in range(0, N - B + 1, B):
        real_idx = torch.from_numpy(rng.integers(M, size=(n_it, B)))
        fake_idx = torch.from_numpy(rng.integers(N, size=n_it * B))
        eps = torch.from_numpy(rng.uniform(size=(n_it, B, 1, 1)).astype(np.float32))
        # the lifter is frozen while the critic trains, so all fakes come from one pass
        with torch.no_grad():
            fakes = state.lifter.pose_only(data.w[fake_idx].flatten(1)).reshape(n_it, B, 3, -1)
        for i in range(n_it):
            w_est, gp = critic_step(state, data.real[real_idx[i]], fakes[i], eps[i])
            sums["w_loss"] += w_est
            sums["gp"] += gp
            n_critic += 1
        idx = torch.from_numpy(order[start : start + B])
        terms = lifter_step(state, data.w[idx], data.mask[idx])
        sums["rep_loss"] += terms["rep_loss"]
        sums["cam_loss"] += terms["cam_loss"]
        n_lifter += 1
    row = {
        "epoch": state.epoch,
        "step": state.step,
        "lr": lr,
        "w_loss": sums["w_loss"] / max(n_critic, 1),
        "rep_loss": sums["rep_loss"] / max(n_lifter, 1),
        "cam_loss": sums["cam_loss"] / max(n_lifter, 1),
        "gp": sums["gp"] / max(n_critic, 1),
    }
    state.epoch += 1
    return row


# ---------------------------------------------------------------------------
# checkpoints


def state_to_archive(state):
    tensors = {}
    for prefix, module in (("lifter", state.lifter), ("critic", state.critic)):
        for name, value in nets.get_parameters(module).items():
            tensors[f"{prefix}.{name}"] = value
    steps = {}
    for prefix, module, opt in (
        ("lifter", state.lifter, state.opt_lifter),
        ("critic", state.critic, state.opt_critic),
    ):
        for name, p in module.named_parameters():
            st = opt.state.get(p)
            if not st:
                continue
            tensors[f"adam.{prefix}.{name}.m"] = st["exp_avg"].numpy()
            tensors[f"adam.{prefix}.{name}.v"] = st["exp_avg_sq"].numpy()
            steps[f"{prefix}.{name}"] = int(st["step"].item())
    header = {
        "kind": "replift-train-state",
        "lifter_arch": nets.arch_to_dict(state.lifter.arch),
        "critic_arch": nets.arch_to_dict(state.critic.arch),
        "config": state.config.to_dict(),
        "kcs_enabled": state.config.kcs_enabled,
        "epoch": state.epoch,
        "step": state.step,
        "adam_steps": steps,
        "history": state.history,
        "skeleton": state.skeleton,
        "pose_unit_mm": POSE_UNIT_MM,
    }
    return tensors, header


def save_checkpoint(state, path):
    tensors, header = state_to_archive(state)
    nets.save_archive(path, tensors, header)
    return path


def load_checkpoint(path):
    """Rebuild a full ``TrainState`` from a checkpoint file."""
    meta, tensors = nets.load_archive(path)
    if meta.get("kind") != "replift-train-state":
        raise ValueError(f"{path}: not a training checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    la = nets.arch_from_dict(nets.LifterArch, meta["lifter_arch"])
    ca = nets.arch_from_dict(nets.CriticArch, meta["critic_arch"])
    sub = {p: {k[len(p) + 1 :]: v for k, v in tensors.items() if k.startswith(p + ".")} for p in ("lifter", "critic")}
    lifter = nets.build(la, sub["lifter"])
    critic = nets.build(ca, sub["critic"])
    state = TrainState(
        config=config,
        lifter=lifter,
        critic=critic,
        opt_lifter=_adam(lifter, config, config.lifter_betas),
        opt_critic=_adam(critic, config),
        epoch=meta["epoch"],
        step=meta["step"],
        history=list(meta.get("history", [])),
        skeleton=meta.get("skeleton"),
    )
    for prefix, module, opt in (("lifter", lifter, state.opt_lifter), ("critic", critic, state.opt_critic)):
        for name, p in module.named_parameters():
            key = f"{prefix}.{name}"
            if key not in meta["adam_steps"]:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(meta["adam_steps"][key])),
                "exp_avg": torch.from_numpy(tensors[f"adam.{key}.m"].copy()),
                "exp_avg_sq": torch.from_numpy(tensors[f"adam.{key}.v"].copy()),
            }
    return state


def load_lifter(path):
    """Lifter module (eval mode) from a checkpoint, without optimiser state."""
    meta, tensors = nets.load_archive(path)
    la = nets.arch_from_dict(nets.LifterArch, meta["lifter_arch"])
    params = {k[len("lifter.") :]: v for k, v in tensors.items() if k.startswith("lifter.")}
    model = nets.build(la, params)
    model.eval()
    return model, meta


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt_metric(row.get(k)) for k in METRIC_FIELDS})


def _fmt_metric(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def checkpoint_name(epoch):
    return f"ckpt_epoch{epoch:04d}.rlck"


def train(config, dataset, eval_dataset=None, out_dir=None, state=None, stop_after=None, evaluate_fn=None):
    """Run (or resume) training until ``config.epochs``.

    ``evaluate_fn(lifter, eval_dataset) -> (p1, p2)`` fills the eval columns.
    With ``out_dir`` set, checkpoints land there every ``checkpoint_every``
    epochs plus ``final.rlck`` and ``metrics.csv``. ``stop_after`` halts
    after that many epochs of this call (used to stage long runs).
    Returns the final ``TrainState``; its ``history`` is the metrics log.
    """
    spec = dataset.skeleton
    if dataset.paired:
        log.warning("training on a paired dataset; correspondences are ignored")
    data = prepare_training_data(dataset)
    if state is None:
        state = init_state(config, spec)
    if state.lifter.arch.n_joints != spec.n_joints:
        raise ValueError(
            f"checkpoint expects {state.lifter.arch.n_joints} joints, dataset has {spec.n_joints}"
        )
    if state.skeleton is None:
        state.skeleton = spec.to_dict()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if state.epoch == 0:
            save_checkpoint(state, out / checkpoint_name(0))
    done = 0
    while state.epoch < config.epochs:
        try:
            row = run_epoch(state, data)
        except NumericalFailure as exc:
            if out is not None:
                save_checkpoint(state, out / "diagnostic.rlck")
            raise exc
        if evaluate_fn is not None and eval_dataset is not None:
            state.lifter.eval()
            p1, p2 = evaluate_fn(state.lifter, eval_dataset)
            row["eval_mpjpe_p1"], row["eval_mpjpe_p2"] = p1, p2
        state.history.append(row)
        log.info(
            "epoch %d lr %.2e w %.4f rep %.4f cam %.4f gp %.4f p2 %s",
            row["epoch"], row["lr"], row["w_loss"], row["rep_loss"], row["cam_loss"], row["gp"],
            row.get("eval_mpjpe_p2"),
        )
        if out is not None:
            write_metrics(out / "metrics.csv", state.history)
            if state.epoch % config.checkpoint_every == 0 or state.epoch == config.epochs:
                save_checkpoint(state, out / checkpoint_name(state.epoch))
        done += 1
        if stop_after is not None and done >= stop_after:
            break
    if out is not None:
        if not state.history:
            write_metrics(out / "metrics.csv", [])
        if state.epoch >= config.epochs:
            save_checkpoint(state, out / "final.rlck")
    state.lifter.eval()
    return state
