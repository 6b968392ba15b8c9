"""Synthetic articulated poses and their preprocessing.

The generator stands in for motion-capture data: it samples joint angles,
runs forward kinematics on a symmetric 17-joint body and views the result
through random weak-perspective cameras, so every noiseless sample satisfies
``W == K X`` exactly.

Body frame: +x is the subject's left, +y up, +z forward. An identity camera
therefore looks at the subject from the front.
"""

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import camera as cam_ops
from .skeleton import DEFAULT_SKELETON, DegenerateInputError, align_to_template, root_center

DEFAULT_LIMB_LENGTHS = {
    "r_hip": 130.0,
    "r_knee": 450.0,
    "r_ankle": 440.0,
    "l_hip": 130.0,
    "l_knee": 450.0,
    "l_ankle": 440.0,
    "spine": 230.0,
    "thorax": 250.0,
    "neck": 110.0,
    "head": 115.0,
    "l_shoulder": 150.0,
    "l_elbow": 280.0,
    "l_wrist": 250.0,
    "r_shoulder": 150.0,
    "r_elbow": 280.0,
    "r_wrist": 250.0,
}

ARTICULATIONS = (
    "root_yaw",
    "root_pitch",
    "root_roll",
    "spine_flex",
    "spine_side",
    "spine_twist",
    "neck_flex",
    "neck_turn",
    "hip_flex",
    "hip_abd",
    "hip_twist",
    "knee_flex",
    "shoulder_flex",
    "shoulder_abd",
    "shoulder_twist",
    "elbow_flex",
)

DEFAULT_ANGLE_RANGES = {
    "root_yaw": (-np.pi, np.pi),
    "root_pitch": (-0.15, 0.15),
    "root_roll": (-0.1, 0.1),
    "spine_flex": (-0.1, 0.35),
    "spine_side": (-0.15, 0.15),
    "spine_twist": (-0.3, 0.3),
    "neck_flex": (-0.3, 0.5),
    "neck_turn": (-0.6, 0.6),
    "hip_flex": (-0.3, 0.6),
    "hip_abd": (-0.05, 0.35),
    "hip_twist": (-0.3, 0.3),
    "knee_flex": (0.0, 0.7),
    "shoulder_flex": (-0.5, 1.2),
    "shoulder_abd": (0.0, 1.0),
    "shoulder_twist": (-0.6, 0.6),
    "elbow_flex": (0.0, 1.8),
}

# pose families; each overrides part of the base ranges and becomes the action label
DEFAULT_FAMILIES = {
    "standing": {},
    "sitting": {
        "hip_flex": (1.2, 1.8),
        "knee_flex": (1.2, 1.9),
        "spine_flex": (0.0, 0.5),
    },
    "reaching": {
        "shoulder_flex": (1.0, 2.9),
        "shoulder_abd": (0.0, 1.6),
        "elbow_flex": (0.0, 1.0),
        "spine_flex": (-0.2, 0.8),
        "spine_side": (-0.3, 0.3),
    },
}

_HEAD_DIR = np.array([0.0, 0.97, 0.25])
_SHOULDER_DIR = np.array([1.0, -0.15, 0.0])


@dataclass(frozen=True)
class SyntheticPoseConfig:
    seed: int = 0
    count: int = 5000
    test_count: int = 1000
    limb_lengths: dict = field(default_factory=lambda: dict(DEFAULT_LIMB_LENGTHS))
    joint_angle_ranges: dict = field(default_factory=lambda: dict(DEFAULT_ANGLE_RANGES))
    families: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_FAMILIES.items()})
    camera_elevation_range: tuple = (-0.25, 0.5)
    camera_azimuth_range: tuple = (-np.pi, np.pi)
    scale_range: tuple = (0.10, 0.14)  # px per mm; a 1.75 m subject spans ~200 px
    subjects: int = 5
    subject_seed: int = 0
    limb_jitter: float = 0.06  # relative per-bone variation between subjects

    def __post_init__(self):
        if self.count <= 0 or self.test_count < 0:
            raise ValueError("count must be positive and test_count non-negative")
        if self.subjects <= 0:
            raise ValueError("subjects must be positive")
        if not 0.0 <= self.limb_jitter < 1.0:
            raise ValueError("limb_jitter must lie in [0, 1)")
        for name, length in self.limb_lengths.items():
            if not length > 0:
                raise ValueError(f"limb length for {name!r} must be positive")
        missing = set(DEFAULT_LIMB_LENGTHS) - set(self.limb_lengths)
        if missing:
            raise ValueError(f"missing limb lengths: {sorted(missing)}")
        for name in ARTICULATIONS:
            if name not in self.joint_angle_ranges:
                raise ValueError(f"missing angle range {name!r}")
        for fam, over in self.families.items():
            for name in over:
                if name not in ARTICULATIONS:
                    raise ValueError(f"family {fam!r} overrides unknown articulation {name!r}")
        if not self.families:
            raise ValueError("at least one pose family is required")
        ranges = {"camera_elevation_range": self.camera_elevation_range,
                  "camera_azimuth_range": self.camera_azimuth_range,
                  "scale_range": self.scale_range}
        ranges.update({f"angle {k}": v for k, v in self.joint_angle_ranges.items()})
        for fam, over in self.families.items():
            ranges.update({f"{fam}.{k}": v for k, v in over.items()})
        for name, (lo, hi) in ranges.items():
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError(f"range {name} = ({lo}, {hi}) is empty or not finite")
        if self.scale_range[0] <= 0:
            raise ValueError("camera scale must be positive")

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = [float(x) for x in v]
            elif f.name == "joint_angle_ranges":
                v = {k: [float(a), float(b)] for k, (a, b) in v.items()}
            elif f.name == "families":
                v = {fam: {k: [float(a), float(b)] for k, (a, b) in o.items()} for fam, o in v.items()}
            elif f.name == "limb_lengths":
                v = {k: float(x) for k, x in v.items()}
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("camera_elevation_range", "camera_azimuth_range", "scale_range"):
            if key in kw:
                kw[key] = tuple(float(x) for x in kw[key])
        if "joint_angle_ranges" in kw:
            base = dict(DEFAULT_ANGLE_RANGES)
            base.update({k: tuple(v) for k, v in kw["joint_angle_ranges"].items()})
            kw["joint_angle_ranges"] = base
        if "families" in kw:
            kw["families"] = {f: {k: tuple(v) for k, v in o.items()} for f, o in kw["families"].items()}
        if "limb_lengths" in kw:
            base = dict(DEFAULT_LIMB_LENGTHS)
            base.update({k: float(v) for k, v in kw["limb_lengths"].items()})
            kw["limb_lengths"] = base
        return cls(**kw)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float  # pixels
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")


@dataclass
class PoseDataset:
    """2D observations with optional 3D poses and cameras.

    ``paired`` datasets keep index correspondence (evaluation only); unpaired
    ones hold independent 2D and 3D pools for adversarial training.
    """

    poses2d: np.ndarray  # (N, 2, n)
    masks: np.ndarray  # (N, n) bool, True = visible
    poses3d: np.ndarray = None  # (M, 3, n)
    cameras: np.ndarray = None  # (N, 2, 3)
    paired: bool = False
    actions: tuple = None
    template: np.ndarray = None  # (3, n)
    skeleton: object = DEFAULT_SKELETON
    normalized: bool = False
    aligned: bool = False

    def __post_init__(self):
        self.poses2d = np.asarray(self.poses2d, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=bool)
        n = self.skeleton.n_joints
        if self.poses2d.ndim != 3 or self.poses2d.shape[1:] != (2, n):
            raise ValueError(f"poses2d must be (N, 2, {n}), got {self.poses2d.shape}")
        if self.masks.shape != (self.poses2d.shape[0], n):
            raise ValueError("masks must be (N, n)")
        if self.poses3d is not None:
            self.poses3d = np.asarray(self.poses3d, dtype=np.float64)
            if self.poses3d.ndim != 3 or self.poses3d.shape[1:] != (3, n):
                raise ValueError(f"poses3d must be (M, 3, {n}), got {self.poses3d.shape}")
        if self.cameras is not None:
            self.cameras = np.asarray(self.cameras, dtype=np.float64)
            if self.cameras.shape != (len(self.poses2d), 2, 3):
                raise ValueError("cameras must be (N, 2, 3)")
        if self.paired:
            if self.poses3d is None or len(self.poses3d) != len(self.poses2d):
                raise ValueError("paired dataset needs one 3D pose per 2D pose")
        if self.actions is not None:
            self.actions = tuple(str(a) for a in self.actions)
            if len(self.actions) != len(self.poses2d):
                raise ValueError("one action label per 2D pose required")
        if self.template is not None:
            self.template = np.asarray(self.template, dtype=np.float64)

    def __len__(self):
        return len(self.poses2d)

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(
            self,
            poses2d=self.poses2d[idx],
            masks=self.masks[idx],
            poses3d=self.poses3d[idx] if (self.paired and self.poses3d is not None) else self.poses3d,
            cameras=None if self.cameras is None else self.cameras[idx],
            actions=None if self.actions is None else tuple(self.actions[i] for i in idx),
        )


# ---------------------------------------------------------------------------
# rotations


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def camera_rotation(elevation, azimuth):
    """World-to-camera rotation; (0, 0) is the identity (frontal view)."""
    return _rx(np.asarray(elevation, float)) @ _ry(np.asarray(azimuth, float))


def random_rotations(rng, count):
    """Uniformly distributed proper rotations (QR of Gaussian matrices)."""
    Q, R = np.linalg.qr(rng.normal(size=(count, 3, 3)))
    Q = Q * np.sign(np.diagonal(R, axis1=1, axis2=2))[:, None, :]
    det = np.linalg.det(Q)
    Q[det < 0, :, 0] *= -1.0
    return Q


# ---------------------------------------------------------------------------
# forward kinematics


def _mirror(name):
    if name.startswith("l_"):
        return "r_" + name[2:]
    if name.startswith("r_"):
        return "l_" + name[2:]
    return name


def subject_limb_lengths(config, spec=DEFAULT_SKELETON):
    """``(subjects, b)`` per-subject bone lengths, left/right mirrored."""
    rng = np.random.default_rng([config.subject_seed, 0x5B1E])
    names = spec.joint_names
    labels = [names[r] for r, _ in spec.bones]
    base = np.array([config.limb_lengths[label] for label in labels])
    factors = 1.0 + config.limb_jitter * rng.uniform(-1.0, 1.0, size=(config.subjects, len(labels)))
    overall = 1.0 + config.limb_jitter * rng.uniform(-1.0, 1.0, size=(config.subjects, 1))
    pos = {label: k for k, label in enumerate(labels)}
    for k, label in enumerate(labels):
        m = pos.get(_mirror(label), k)
        if m < k:
            factors[:, k] = factors[:, m]
    return base[None, :] * factors * overall


def forward_kinematics(angles, lengths, spec=DEFAULT_SKELETON):
    """Root-centred poses ``(N, 3, n)`` from per-sample angles and bone lengths.

    ``angles`` maps each articulation name to an ``(N,)`` array (limb
    articulations take ``(N, 2)``: left, right). ``lengths`` is ``(N, b)`` in
    skeleton bone order.
    """
    names = spec.joint_names
    J = {name: i for i, name in enumerate(names)}
    bone_of = {names[r]: k for k, (r, _) in enumerate(spec.bones)}
    N = lengths.shape[0]
    P = np.zeros((N, 3, len(names)))

    def L(child):
        return lengths[:, bone_of[child], None]

    def put(child, parent, rot, direction):
        d = np.asarray(direction, float)
        d = d / np.linalg.norm(d)
        P[:, :, J[child]] = P[:, :, J[parent]] + L(child) * (rot @ d)

    root = _ry(angles["root_yaw"]) @ _rx(angles["root_pitch"]) @ _rz(angles["root_roll"])
    half = _ry(angles["spine_twist"] / 2) @ _rx(angles["spine_flex"] / 2) @ _rz(angles["spine_side"] / 2)
    lower = root @ half
    torso = lower @ half
    neck = torso @ _rx(angles["neck_flex"]) @ _ry(angles["neck_turn"])
    up = (0.0, 1.0, 0.0)
    down = (0.0, -1.0, 0.0)

    put("spine", "pelvis", lower, up)
    put("thorax", "spine", torso, up)
    put("neck", "thorax", neck, up)
    put("head", "neck", neck, _HEAD_DIR)
    for side, sign, col in (("l", 1.0, 0), ("r", -1.0, 1)):
        hip = root @ _rx(-angles["hip_flex"][:, col]) @ _rz(sign * angles["hip_abd"][:, col]) @ _ry(
            sign * angles["hip_twist"][:, col]
        )
        shin = hip @ _rx(angles["knee_flex"][:, col])
        put(f"{side}_hip", "pelvis", root, (sign, 0.0, 0.0))
        put(f"{side}_knee", f"{side}_hip", hip, down)
        put(f"{side}_ankle", f"{side}_knee", shin, down)
        arm = torso @ _rx(-angles["shoulder_flex"][:, col]) @ _rz(sign * angles["shoulder_abd"][:, col]) @ _ry(
            sign * angles["shoulder_twist"][:, col]
        )
        fore = arm @ _rx(-angles["elbow_flex"][:, col])
        put(f"{side}_shoulder", "thorax", torso, _SHOULDER_DIR * np.array([sign, 1.0, 1.0]))
        put(f"{side}_elbow", f"{side}_shoulder", arm, down)
        put(f"{side}_wrist", f"{side}_elbow", fore, down)
    return P


_LIMB_ARTICULATIONS = {
    "hip_flex",
    "hip_abd",
    "hip_twist",
    "knee_flex",
    "shoulder_flex",
    "shoulder_abd",
    "shoulder_twist",
    "elbow_flex",
}


def _sample_angles(rng, config, family_idx, families):
    N = len(family_idx)
    out = {}
    for name in ARTICULATIONS:
        lo = np.empty(N)
        hi = np.empty(N)
        for f, fam in enumerate(families):
            a, b = config.families[fam].get(name, config.joint_angle_ranges[name])
            lo[family_idx == f] = a
            hi[family_idx == f] = b
        if name in _LIMB_ARTICULATIONS:
            u = rng.uniform(size=(N, 2))
            out[name] = lo[:, None] + (hi - lo)[:, None] * u
        else:
            out[name] = lo + (hi - lo) * rng.uniform(size=N)
    return out


def generate_synthetic(config, spec=DEFAULT_SKELETON, count=None, stream=0):
    """Paired synthetic dataset: 3D poses (mm), cameras and pixel-space 2D.

    Deterministic in ``(config.seed, stream)``; ``count`` overrides
    ``config.count``.
    """
    count = config.count if count is None else int(count)
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng([config.seed, stream])
    families = list(config.families)
    fam = rng.integers(len(families), size=count)
    subj = rng.integers(config.subjects, size=count)
    angles = _sample_angles(rng, config, fam, families)
    elev = rng.uniform(*config.camera_elevation_range, size=count)
    azim = rng.uniform(*config.camera_azimuth_range, size=count)
    scale = rng.uniform(*config.scale_range, size=count)

    lengths = subject_limb_lengths(config, spec)[subj]
    X = forward_kinematics(angles, lengths, spec)
    K = cam_ops.weak_perspective(camera_rotation(elev, azim), scale)
    W = cam_ops.reproject(X, K)
    masks = np.ones((count, spec.n_joints), dtype=bool)
    masks[:, list(spec.always_masked())] = False
    return PoseDataset(
        poses2d=W,
        masks=masks,
        poses3d=X,
        cameras=K,
        paired=True,
        actions=tuple(families[i] for i in fam),
        skeleton=spec,
    )


def make_splits(config, spec=DEFAULT_SKELETON):
    """Unpaired training pools plus a paired held-out test split.

    The 2D pool, the 3D pool and the test set use disjoint subjects (limb
    lengths drawn from different subject seeds) and independent streams.
    """
    s0 = config.subject_seed
    pool2d = generate_synthetic(replace(config, subject_seed=s0 * 3 + 1), spec, stream=1)
    pool3d = generate_synthetic(replace(config, subject_seed=s0 * 3 + 2), spec, stream=2)
    template = compute_template(pool3d.poses3d, spec, init=rest_pose(config, spec))
    train = PoseDataset(
        poses2d=pool2d.poses2d,
        masks=pool2d.masks,
        poses3d=pool3d.poses3d,
        paired=False,
        actions=pool2d.actions,
        template=template,
        skeleton=spec,
    )
    test = None
    if config.test_count > 0:
        test = generate_synthetic(
            replace(config, subject_seed=s0 * 3 + 3), spec, count=config.test_count, stream=3
        )
        test.template = template
    return train, test


# ---------------------------------------------------------------------------
# preprocessing


def rest_pose(config=None, spec=DEFAULT_SKELETON):
    """All articulations at zero, base limb lengths, root-centred."""
    config = config or SyntheticPoseConfig()
    names = spec.joint_names
    lengths = np.array([[config.limb_lengths[names[r]] for r, _ in spec.bones]])
    zeros = {a: np.zeros((1, 2)) if a in _LIMB_ARTICULATIONS else np.zeros(1) for a in ARTICULATIONS}
    return forward_kinematics(zeros, lengths, spec)[0]


def compute_template(poses3d, spec=DEFAULT_SKELETON, init=None, iterations=5):
    """Mean pose of a 3D pool after iterative shoulder/hip alignment.

    ``init`` fixes the template's orientation (defaults to the first pose).
    """
    X = root_center(poses3d, spec.root_index)
    idx = list(spec.template_joints)
    target = np.sqrt(np.mean(np.sum(X[:, :, idx] ** 2, axis=(1, 2))))
    T = X[0] if init is None else root_center(init, spec.root_index)
    for _ in range(iterations):
        T = align_to_template(X, T, spec).mean(axis=0)
        T = T * (target / np.sqrt(np.sum(T[:, idx] ** 2)))
    return T


def preprocess_3d(pose, template, spec=DEFAULT_SKELETON):
    """Root-centre, then remove rotation and scale against ``template``."""
    return align_to_template(root_center(pose, spec.root_index), template, spec)


def preprocess_2d(pose, mask=None, spec=DEFAULT_SKELETON):
    """Root-centre and divide by the standard deviation of the visible entries.

    Invisible columns come back zero-filled. Works on ``(2, n)`` or
    ``(N, 2, n)``.
    """
    W = np.asarray(pose, dtype=np.float64)
    single = W.ndim == 2
    if single:
        W = W[None]
    n = W.shape[2]
    if mask is None:
        mask = np.ones((W.shape[0], n), dtype=bool)
        mask[:, list(spec.always_masked())] = False
    mask = np.broadcast_to(np.asarray(mask, dtype=bool).reshape(-1, n), (W.shape[0], n))
    if not np.all(mask[:, spec.root_index]):
        raise DegenerateInputError("root joint must be visible for 2D normalisation")
    W = (W - W[:, :, spec.root_index : spec.root_index + 1]) * mask[:, None, :]
    m = mask[:, None, :].repeat(2, axis=1)
    count = m.sum(axis=(1, 2))
    mean = W.sum(axis=(1, 2)) / count
    var = (((W - mean[:, None, None]) ** 2) * m).sum(axis=(1, 2)) / count
    std = np.sqrt(var)
    if np.any(std <= 1e-12) or np.any(mask.sum(axis=1) < 2):
        raise DegenerateInputError("2D pose has no spread over its visible joints")
    out = W / std[:, None, None]
    return out[0] if single else out


def add_noise(dataset, noise):
    """I.i.d. Gaussian pixel noise on every visible 2D coordinate."""
    if noise.sigma == 0:
        return replace(dataset)
    rng = np.random.default_rng([noise.seed, 0xA0D])
    z = rng.normal(size=dataset.poses2d.shape)
    noisy = dataset.poses2d + noise.sigma * z * dataset.masks[:, None, :]
    return replace(dataset, poses2d=noisy)
