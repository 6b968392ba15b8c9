"""Skeleton topology, bone algebra, the KCS matrix and rigid alignment.

Poses are ``(3, n)`` arrays (one column per joint) or batches ``(N, 3, n)``.
Bones are ``(r, t)`` joint-index pairs; the bone vector is ``p_r - p_t``.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class DegenerateInputError(ValueError):
    """A geometric fit has no unique solution (coincident joints)."""


H36M_JOINTS = (
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
)

# (child, parent): bone vector points away from the root
_H36M_BONES = (
    ("r_hip", "pelvis"),
    ("r_knee", "r_hip"),
    ("r_ankle", "r_knee"),
    ("l_hip", "pelvis"),
    ("l_knee", "l_hip"),
    ("l_ankle", "l_knee"),
    ("spine", "pelvis"),
    ("thorax", "spine"),
    ("neck", "thorax"),
    ("head", "neck"),
    ("l_shoulder", "thorax"),
    ("l_elbow", "l_shoulder"),
    ("l_wrist", "l_elbow"),
    ("r_shoulder", "thorax"),
    ("r_elbow", "r_shoulder"),
    ("r_wrist", "r_elbow"),
)

# upper/lower arm and leg, left bone first
_H36M_SYMMETRY = (
    (("l_shoulder", "l_elbow"), ("r_shoulder", "r_elbow")),
    (("l_elbow", "l_wrist"), ("r_elbow", "r_wrist")),
    (("l_hip", "l_knee"), ("r_hip", "r_knee")),
    (("l_knee", "l_ankle"), ("r_knee", "r_ankle")),
)

_TEMPLATE_JOINTS = ("l_shoulder", "r_shoulder", "l_hip", "r_hip")


@dataclass(frozen=True)
class SkeletonSpec:
    joint_names: tuple
    bones: tuple  # ((r, t), ...)
    left_right_pairs: tuple = ()  # ((left_bone, right_bone), ...)
    root_index: int = 0
    spine_index: int = None
    template_joints: tuple = field(default=())  # joint indices used by align_to_template

    def __post_init__(self):
        n = len(self.joint_names)
        if len(set(self.joint_names)) != n:
            raise ValueError("joint names must be unique")
        for r, t in self.bones:
            if not (0 <= r < n and 0 <= t < n) or r == t:
                raise ValueError(f"bone ({r}, {t}) must join two distinct joints in [0, {n})")
        seen = set()
        for pair in self.left_right_pairs:
            for k in pair:
                if not 0 <= k < len(self.bones):
                    raise ValueError(f"symmetry pair references unknown bone {k}")
                if k in seen:
                    raise ValueError(f"bone {k} appears in more than one symmetry pair")
                seen.add(k)
        if not 0 <= self.root_index < n:
            raise ValueError("root_index out of range")
        if self.spine_index is not None and not 0 <= self.spine_index < n:
            raise ValueError("spine_index out of range")
        for j in self.template_joints:
            if not 0 <= j < n:
                raise ValueError("template joint out of range")

    @property
    def n_joints(self):
        return len(self.joint_names)

    @property
    def n_bones(self):
        return len(self.bones)

    @property
    def r_idx(self):
        return np.array([r for r, _ in self.bones], dtype=np.int64)

    @property
    def t_idx(self):
        return np.array([t for _, t in self.bones], dtype=np.int64)

    def joint(self, name):
        return self.joint_names.index(name)

    def bone_map(self):
        """The ``n x b`` incidence matrix: +1 at row r, -1 at row t."""
        C = np.zeros((self.n_joints, self.n_bones))
        for k, (r, t) in enumerate(self.bones):
            C[r, k] = 1.0
            C[t, k] = -1.0
        return C

    def always_masked(self):
        """Joint indices that are never observed in 2D (the spine)."""
        return () if self.spine_index is None else (self.spine_index,)

    def to_dict(self):
        names = self.joint_names

        def bone_label(k):
            r, t = self.bones[k]
            return [names[r], names[t]]

        return {
            "joint_names": list(names),
            "bones": [[names[r], names[t]] for r, t in self.bones],
            "left_right_pairs": [[bone_label(a), bone_label(b)] for a, b in self.left_right_pairs],
            "root": names[self.root_index],
            "spine": None if self.spine_index is None else names[self.spine_index],
            "template_joints": [names[j] for j in self.template_joints],
        }

    @classmethod
    def from_dict(cls, d):
        names = tuple(d["joint_names"])
        index = {name: i for i, name in enumerate(names)}
        try:
            bones = tuple((index[r], index[t]) for r, t in d["bones"])
            bone_index = {(names[r], names[t]): k for k, (r, t) in enumerate(bones)}
            pairs = tuple(
                (bone_index[tuple(a)], bone_index[tuple(b)]) for a, b in d.get("left_right_pairs", [])
            )
            root = index[d.get("root", names[0])]
            spine = None if d.get("spine") is None else index[d["spine"]]
            tmpl = tuple(index[j] for j in d.get("template_joints", []))
        except KeyError as exc:
            raise ValueError(f"skeleton config references unknown joint or bone {exc}") from None
        return cls(names, bones, pairs, root, spine, tmpl)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


def h36m_skeleton():
    """17-joint Human3.6M layout; spine never observed in 2D."""
    index = {name: i for i, name in enumerate(H36M_JOINTS)}
    bones = tuple((index[r], index[t]) for r, t in _H36M_BONES)
    bone_index = {(H36M_JOINTS[t], H36M_JOINTS[r]): k for k, (r, t) in enumerate(bones)}
    pairs = tuple((bone_index[a], bone_index[b]) for a, b in _H36M_SYMMETRY)
    return SkeletonSpec(
        joint_names=H36M_JOINTS,
        bones=bones,
        left_right_pairs=pairs,
        root_index=index["pelvis"],
        spine_index=index["spine"],
        template_joints=tuple(index[j] for j in _TEMPLATE_JOINTS),
    )


DEFAULT_SKELETON = h36m_skeleton()


def _as_batch(pose, rows=3):
    pose = np.asarray(pose, dtype=np.float64)
    single = pose.ndim == 2
    if single:
        pose = pose[None]
    if pose.ndim != 3 or pose.shape[1] != rows:
        raise ValueError(f"expected pose of shape ({rows}, n) or (N, {rows}, n), got {pose.shape}")
    return pose, single


def _check_bmap(n, bmap):
    bmap = np.asarray(bmap, dtype=np.float64)
    if bmap.ndim != 2 or bmap.shape[0] != n:
        raise ValueError(f"bone map has shape {bmap.shape}, pose has {n} joints")
    return bmap


def bone_matrix(pose, bmap):
    """``B = X C``: column k is the vector of bone k."""
    X, single = _as_batch(pose)
    C = _check_bmap(X.shape[2], bmap)
    B = X @ C
    return B[0] if single else B


def kcs(pose, bmap):
    """KCS matrix ``Psi = B^T B`` (squared bone lengths on the diagonal)."""
    B = bone_matrix(pose, bmap)
    single = B.ndim == 2
    psi = kernels.kcs(B[None] if single else B)
    return psi[0] if single else psi


def root_center(pose, root_index=0):
    X = np.asarray(pose, dtype=np.float64)
    return X - X[..., root_index : root_index + 1]


def procrustes_align(estimate, reference, center=True, scale=True):
    """Similarity-align ``estimate`` onto ``reference``.

    With ``center`` both point sets are moved to their centroids first, so
    any translation is absorbed; otherwise rotation and scale act about the
    origin. Returns ``(aligned, rotation, scale)``; the rotation is proper.
    Works on single poses or batches.
    """
    A, single = _as_batch(estimate)
    B, single_b = _as_batch(reference)
    if A.shape != B.shape:
        raise ValueError(f"pose shapes differ: {A.shape} vs {B.shape}")
    aligned, R, s, ref_sq = kernels.procrustes(A, B, center, scale)
    if np.any(ref_sq <= 1e-24):
        raise DegenerateInputError("reference pose has no spread (all joints coincide)")
    if single and single_b:
        return aligned[0], R[0], float(s[0])
    return aligned, R, s


def _subset_spread(P):
    P0 = P - P.mean(axis=-1, keepdims=True)
    return np.sum(P0**2, axis=(-2, -1))


def align_to_template(pose, template, spec=DEFAULT_SKELETON):
    """Remove rotation and scale by fitting shoulders and hips to ``template``.

    The similarity is fitted about the root (poses are root-centred) on the
    template joints only and then applied to every joint.
    """
    X, single = _as_batch(pose)
    T, _ = _as_batch(template)
    if T.shape[0] != 1:
        raise ValueError("template must be a single pose")
    if X.shape[2] != T.shape[2]:
        raise ValueError("pose and template joint counts differ")
    idx = np.asarray(spec.template_joints or range(X.shape[2]), dtype=np.int64)
    X = root_center(X, spec.root_index)
    T = root_center(T, spec.root_index)
    sub = X[:, :, idx]
    tsub = np.broadcast_to(T[:, :, idx], sub.shape)
    if np.any(_subset_spread(sub) <= 1e-18) or np.any(_subset_spread(tsub[:1]) <= 1e-18):
        raise DegenerateInputError("shoulder/hip joints coincide; alignment undefined")
    _, R, s, _ = kernels.procrustes(sub, tsub, False, True)
    out = s[:, None, None] * np.matmul(R, X)
    return out[0] if single else out


def bone_lengths(pose, spec=DEFAULT_SKELETON):
    X, single = _as_batch(pose)
    if X.shape[2] != spec.n_joints:
        raise ValueError(f"pose has {X.shape[2]} joints, skeleton has {spec.n_joints}")
    L = kernels.bone_lengths(X, spec.r_idx, spec.t_idx)
    return L[0] if single else L


def symmetry_error(pose, spec=DEFAULT_SKELETON):
    """Sum over left/right limb pairs of ``| |b_left| - |b_right| |`` (pose units)."""
    if not spec.left_right_pairs:
        raise ValueError("skeleton has no left/right bone pairs")
    L = bone_lengths(pose, spec)
    pairs = np.asarray(spec.left_right_pairs, dtype=np.int64)
    err = np.abs(L[..., pairs[:, 0]] - L[..., pairs[:, 1]]).sum(axis=-1)
    return float(err) if np.ndim(err) == 0 else err
