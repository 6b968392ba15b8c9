"""Lifter (pose + camera branches) and KCS critic, plus the checkpoint format.

Parameters are created in numpy from a seed (``init_parameters``) and loaded
into torch modules, so initialisation does not depend on torch's RNG.
Poses travel through the networks as ``3n`` vectors, row-major over the
``3 x n`` matrix (all x, then all y, then all z).
"""

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .camera import TRACE_EPS
from .skeleton import DEFAULT_SKELETON

CKPT_MAGIC = b"REPLIFT-CKPT v1\n"
# lifter heads start near zero; full-gain heads emit metre-scale noise that
# the reprojection and critic terms cannot pull back in a few epochs
HEAD_INIT_SCALE = 0.01


@dataclass(frozen=True)
class LifterArch:
    n_joints: int = 17
    hidden: int = 1000
    cam_hidden: int = 1000
    blocks: int = 2
    slope: float = 0.2
    share_first_block: bool = False
    root_index: int = 0

    def __post_init__(self):
        if self.share_first_block and self.cam_hidden != self.hidden:
            raise ValueError("sharing the first block needs equal branch widths")
        if self.blocks < 1 and self.share_first_block:
            raise ValueError("sharing needs at least one residual block")


@dataclass(frozen=True)
class CriticArch:
    n_joints: int = 17
    bones: tuple = field(default_factory=lambda: DEFAULT_SKELETON.bones)
    kcs_hidden: int = 100
    pose_hidden: int = 100
    layers: int = 2
    slope: float = 0.2
    kcs_enabled: bool = True

    @property
    def n_bones(self):
        return len(self.bones)


def arch_to_dict(arch):
    d = asdict(arch)
    if "bones" in d:
        d["bones"] = [list(b) for b in d["bones"]]
    return d


def arch_from_dict(cls, d):
    d = dict(d)
    if "bones" in d:
        d["bones"] = tuple(tuple(b) for b in d["bones"])
    return cls(**d)


# ---------------------------------------------------------------------------
# parameter layout and initialisation


def _linear_shapes(prefix, fan_in, fan_out):
    return [(f"{prefix}.weight", (fan_out, fan_in)), (f"{prefix}.bias", (fan_out,))]


def _branch_shapes(prefix, fan_in, width, fan_out, blocks, skip_first=False):
    shapes = []
    if not skip_first:
        shapes += _linear_shapes(f"{prefix}.inp", fan_in, width)
    for i in range(blocks):
        if skip_first and i == 0:
            continue
        shapes += _linear_shapes(f"{prefix}.blocks.{i}.fc0", width, width)
        shapes += _linear_shapes(f"{prefix}.blocks.{i}.fc1", width, width)
    shapes += _linear_shapes(f"{prefix}.out", width, fan_out)
    return shapes


def parameter_shapes(arch):
    """Ordered ``(name, shape)`` list for a lifter or critic architecture."""
    if isinstance(arch, LifterArch):
        n = arch.n_joints
        shapes = _branch_shapes("pose", 2 * n, arch.hidden, 3 * n, arch.blocks)
        shapes += _branch_shapes(
            "cam", 2 * n, arch.cam_hidden, 6, arch.blocks, skip_first=arch.share_first_block
        )
        return shapes
    if isinstance(arch, CriticArch):
        shapes = []
        if arch.kcs_enabled:
            width = arch.n_bones**2
            for i in range(arch.layers):
                shapes += _linear_shapes(f"kcs_path.{i}", width, arch.kcs_hidden)
                width = arch.kcs_hidden
        width = 3 * arch.n_joints
        for i in range(arch.layers):
            shapes += _linear_shapes(f"pose_path.{i}", width, arch.pose_hidden)
            width = arch.pose_hidden
        merged = arch.pose_hidden + (arch.kcs_hidden if arch.kcs_enabled else 0)
        shapes += _linear_shapes("out", merged, 1)
        return shapes
    raise TypeError(f"unknown architecture {arch!r}")


def init_parameters(arch, seed):
    """Fan-in scaled Gaussian weights (variance ``2 / ((1 + slope^2) fan_in)``), zero biases.

    The lifter's two output layers are further scaled by ``HEAD_INIT_SCALE``.
    """
    rng = np.random.default_rng([int(seed), 0x1417])
    params = OrderedDict()
    gain = 2.0 / (1.0 + arch.slope**2)
    for name, shape in parameter_shapes(arch):
        if name.endswith(".weight"):
            std = np.sqrt(gain / shape[1])
            if isinstance(arch, LifterArch) and name.endswith("out.weight"):
                std *= HEAD_INIT_SCALE
            params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return params


def count_parameters(params, prefix=""):
    return int(sum(v.size for k, v in params.items() if k.startswith(prefix)))


# ---------------------------------------------------------------------------
# modules


class ResidualBlock(nn.Module):
    """``h + act(fc1(act(fc0(h))))``; the identity when its weights are zero."""

    def __init__(self, width, slope):
        super().__init__()
        self.fc0 = nn.Linear(width, width)
        self.fc1 = nn.Linear(width, width)
        self.slope = slope

    def forward(self, h):
        act = nn.functional.leaky_relu
        return h + act(self.fc1(act(self.fc0(h), self.slope)), self.slope)


class Branch(nn.Module):
    def __init__(self, fan_in, width, fan_out, blocks, slope, skip_first=False):
        super().__init__()
        self.slope = slope
        self.inp = None if skip_first else nn.Linear(fan_in, width)
        self.blocks = nn.ModuleList(
            [ResidualBlock(width, slope) if not (skip_first and i == 0) else nn.Identity() for i in range(blocks)]
        )
        self.out = nn.Linear(width, fan_out)


class Lifter(nn.Module):
    """Maps normalised 2D poses ``(B, 2n)`` to root-centred 3D poses and cameras."""

    def __init__(self, arch=None):
        super().__init__()
        arch = arch or LifterArch()
        self.arch = arch
        n = arch.n_joints
        self.pose = Branch(2 * n, arch.hidden, 3 * n, arch.blocks, arch.slope)
        self.cam = Branch(2 * n, arch.cam_hidden, 6, arch.blocks, arch.slope, skip_first=arch.share_first_block)

    def _trunk(self, branch, w):
        return nn.functional.leaky_relu(branch.inp(w), self.arch.slope)

    def _pose(self, w):
        h = self._trunk(self.pose, w)
        first = self.pose.blocks[0](h)
        h = first
        for blk in self.pose.blocks[1:]:
            h = blk(h)
        return self._center(self.pose.out(h)), first

    def _center(self, flat):
        n = self.arch.n_joints
        X = flat.reshape(-1, 3, n)
        r = self.arch.root_index
        return X - X[:, :, r : r + 1]

    def pose_only(self, w):
        return self._pose(w)[0]

    def forward(self, w):
        X, first = self._pose(w)
        if self.arch.share_first_block:
            h = first
        else:
            h = self.cam.blocks[0](self._trunk(self.cam, w))
        for blk in self.cam.blocks[1:]:
            h = blk(h)
        K = self.cam.out(h).reshape(-1, 2, 3)
        return X, K


def kcs_torch(X, C):
    """Batched ``Psi = (X C)^T (X C)`` for ``X`` of shape ``(B, 3, n)``."""
    B = X @ C
    return B.transpose(1, 2) @ B


class Critic(nn.Module):
    """Wasserstein critic: a KCS path and a raw-pose path merged before the output."""

    def __init__(self, arch=None):
        super().__init__()
        arch = arch or CriticArch()
        self.arch = arch
        C = torch.zeros(arch.n_joints, arch.n_bones)
        for k, (r, t) in enumerate(arch.bones):
            C[r, k] = 1.0
            C[t, k] = -1.0
        self.register_buffer("bone_map", C, persistent=False)
        width = arch.n_bones**2
        layers = []
        for _ in range(arch.layers):
            layers.append(nn.Linear(width, arch.kcs_hidden))
            width = arch.kcs_hidden
        self.kcs_path = nn.ModuleList(layers) if arch.kcs_enabled else None
        width = 3 * arch.n_joints
        layers = []
        for _ in range(arch.layers):
            layers.append(nn.Linear(width, arch.pose_hidden))
            width = arch.pose_hidden
        self.pose_path = nn.ModuleList(layers)
        merged = arch.pose_hidden + (arch.kcs_hidden if arch.kcs_enabled else 0)
        self.out = nn.Linear(merged, 1)

    def _mlp(self, layers, h):
        for fc in layers:
            h = nn.functional.leaky_relu(fc(h), self.arch.slope)
        return h

    def kcs_features(self, X):
        psi = kcs_torch(X, self.bone_map.to(X.dtype))
        return self._mlp(self.kcs_path, psi.flatten(1))

    def pose_features(self, X):
        return self._mlp(self.pose_path, X.flatten(1))

    def forward(self, X):
        feats = self.pose_features(X)
        if self.kcs_path is not None:
            feats = torch.cat([self.kcs_features(X), feats], dim=1)
        return self.out(feats).squeeze(1)


def build(arch, params=None, dtype=torch.float32):
    module = Lifter(arch) if isinstance(arch, LifterArch) else Critic(arch)
    module = module.to(dtype)
    if params is not None:
        load_parameters(module, params)
    return module


def load_parameters(module, params):
    expected = parameter_shapes(module.arch)
    missing = [k for k, _ in expected if k not in params]
    if missing:
        raise ValueError(f"parameter set lacks {missing[:3]}...")
    own = dict(module.named_parameters())
    if set(own) != {k for k, _ in expected}:
        raise ValueError("module layout does not match its architecture")
    with torch.no_grad():
        for name, shape in expected:
            value = np.asarray(params[name])
            if value.shape != tuple(shape):
                raise ValueError(f"{name}: shape {value.shape}, expected {tuple(shape)}")
            own[name].copy_(torch.from_numpy(value.astype(np.float64)).to(own[name].dtype))
    return module


def get_parameters(module, dtype=np.float32):
    return OrderedDict(
        (name, p.detach().cpu().numpy().astype(dtype)) for name, p in module.named_parameters()
    )


def lifter_forward(params, w, arch=None):
    """Functional lifter: ``(B, 2n)`` or ``(2n,)`` input -> ``(X, K)`` numpy arrays."""
    arch = arch or LifterArch()
    w = np.asarray(w, dtype=np.float32)
    single = w.ndim == 1
    if w.shape[-1] != 2 * arch.n_joints:
        raise ValueError(f"input width {w.shape[-1]}, expected {2 * arch.n_joints}")
    model = build(arch, params)
    with torch.no_grad():
        X, K = model(torch.from_numpy(np.atleast_2d(w)))
    X, K = X.numpy(), K.numpy()
    return (X[0], K[0]) if single else (X, K)


def critic_forward(params, X, arch=None):
    arch = arch or CriticArch()
    X = np.asarray(X, dtype=np.float32)
    single = X.ndim == 2
    if X.shape[-2:] != (3, arch.n_joints):
        raise ValueError(f"pose shape {X.shape}, expected (..., 3, {arch.n_joints})")
    model = build(arch, params)
    with torch.no_grad():
        v = model(torch.from_numpy(X.reshape(-1, 3, arch.n_joints))).numpy()
    return float(v[0]) if single else v


# ---------------------------------------------------------------------------
# losses


def safe_norm(x, dims):
    """Euclidean/Frobenius norm whose gradient at 0 is 0 instead of NaN."""
    sq = (x * x).sum(dim=dims)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def reprojection_loss_t(W, X, K, mask=None):
    """Per-sample ``|| W - K X ||_F`` with invisible columns zeroed."""
    R = W - K @ X
    if mask is not None:
        R = R * mask[:, None, :].to(R.dtype)
    return safe_norm(R, (1, 2))


def camera_loss_t(K):
    A = K @ K.transpose(1, 2)
    tr = torch.clamp(A.diagonal(dim1=1, dim2=2).sum(-1), min=TRACE_EPS)
    eye = torch.eye(2, dtype=K.dtype)
    return safe_norm(2.0 * A / tr[:, None, None] - eye, (1, 2))


def gradient_penalty(critic, real, fake, eps):
    """``mean((|| d critic / d x_hat ||_2 - 1)^2)`` on ``x_hat = eps real + (1 - eps) fake``."""
    x_hat = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
    out = critic(x_hat)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    dims = tuple(range(1, grad.dim()))
    return ((safe_norm(grad, dims) - 1.0) ** 2).mean()


# ---------------------------------------------------------------------------
# checkpoint archive


def save_archive(path, tensors, header):
    """Named float32 tensors + JSON header -> self-describing binary file.

    Layout: magic line, one JSON line (``header`` plus a ``tensors`` index of
    name/shape/offset), then the raw little-endian float32 payload.
    """
    index = []
    offset = 0
    blobs = []
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    meta = dict(header)
    meta["tensors"] = index
    line = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(line)
        for blob in blobs:
            fh.write(blob)


def load_archive(path):
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a replift checkpoint")
        meta = json.loads(fh.readline())
        payload = fh.read()
    tensors = OrderedDict()
    for item in meta.pop("tensors"):
        count = int(np.prod(item["shape"], dtype=np.int64))
        end = item["offset"] + 4 * count
        if end > len(payload):
            raise ValueError(f"{path}: truncated tensor {item['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=item["offset"])
        tensors[item["name"]] = arr.reshape(item["shape"]).astype(np.float32)
    return meta, tensors
