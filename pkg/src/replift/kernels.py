"""Batched geometry kernels.

Every kernel exists twice: a numba ``@njit`` loop version and a vectorised
numpy version. ``BACKEND`` picks one at import time (see ``_accel``); both
stay importable through ``NUMBA`` and ``NUMPY`` so tests and the benchmark
can compare them directly.

Array conventions: poses are ``(N, 3, n)`` float64, bone endpoint indices are
int64 arrays ``r_idx``/``t_idx`` with bone ``k = p[r_idx[k]] - p[t_idx[k]]``.
"""

from types import SimpleNamespace

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# numba kernels


@njit
def _nb_bone_vectors(X, r_idx, t_idx):
    N, d, _ = X.shape
    b = r_idx.shape[0]
    out = np.empty((N, d, b))
    for i in range(N):
        for k in range(b):
            r = r_idx[k]
            t = t_idx[k]
            for c in range(d):
                out[i, c, k] = X[i, c, r] - X[i, c, t]
    return out


@njit
def _nb_kcs(B):
    N, d, b = B.shape
    out = np.empty((N, b, b))
    for i in range(N):
        for j in range(b):
            for k in range(j, b):
                acc = 0.0
                for c in range(d):
                    acc += B[i, c, j] * B[i, c, k]
                out[i, j, k] = acc
                out[i, k, j] = acc
    return out


@njit
def _nb_bone_lengths(X, r_idx, t_idx):
    N, d, _ = X.shape
    b = r_idx.shape[0]
    out = np.empty((N, b))
    for i in range(N):
        for k in range(b):
            acc = 0.0
            for c in range(d):
                diff = X[i, c, r_idx[k]] - X[i, c, t_idx[k]]
                acc += diff * diff
            out[i, k] = np.sqrt(acc)
    return out


@njit
def _nb_joint_distances(A, B):
    N, d, n = A.shape
    out = np.empty((N, n))
    for i in range(N):
        for j in range(n):
            acc = 0.0
            for c in range(d):
                diff = A[i, c, j] - B[i, c, j]
                acc += diff * diff
            out[i, j] = np.sqrt(acc)
    return out


@njit
def _nb_procrustes(A, B, center, scale):
    # similarity transform s*R*A + t closest to B (Frobenius) per sample
    N, _, n = A.shape
    aligned = np.empty_like(A)
    rot = np.empty((N, 3, 3))
    scales = np.empty(N)
    ref_norm = np.empty(N)
    A0 = np.empty((3, n))
    B0 = np.empty((3, n))
    for i in range(N):
        ma = np.zeros(3)
        mb = np.zeros(3)
        if center:
            for c in range(3):
                for j in range(n):
                    ma[c] += A[i, c, j]
                    mb[c] += B[i, c, j]
                ma[c] /= n
                mb[c] /= n
        na = 0.0
        nbr = 0.0
        for c in range(3):
            for j in range(n):
                A0[c, j] = A[i, c, j] - ma[c]
                B0[c, j] = B[i, c, j] - mb[c]
                na += A0[c, j] * A0[c, j]
                nbr += B0[c, j] * B0[c, j]
        ref_norm[i] = nbr
        M = B0 @ np.ascontiguousarray(A0.T)
        U, S, Vt = np.linalg.svd(M)
        R = U @ Vt
        det = np.linalg.det(R)
        sign = 1.0 if det >= 0.0 else -1.0
        for c in range(3):
            U[c, 2] *= sign
        R = U @ Vt
        trace = S[0] + S[1] + sign * S[2]
        if not scale:
            s = 1.0
        elif na > 0.0:
            s = trace / na
        else:
            s = 0.0
        rot[i] = R
        scales[i] = s
        RA = R @ A0
        for c in range(3):
            for j in range(n):
                aligned[i, c, j] = s * RA[c, j] + mb[c]
    return aligned, rot, scales, ref_norm


# ---------------------------------------------------------------------------
# numpy fallbacks


def _np_bone_vectors(X, r_idx, t_idx):
    return X[:, :, r_idx] - X[:, :, t_idx]


def _np_kcs(B):
    return np.matmul(B.transpose(0, 2, 1), B)


def _np_bone_lengths(X, r_idx, t_idx):
    return np.sqrt(np.sum((X[:, :, r_idx] - X[:, :, t_idx]) ** 2, axis=1))


def _np_joint_distances(A, B):
    return np.sqrt(np.sum((A - B) ** 2, axis=1))


def _np_procrustes(A, B, center, scale):
    if center:
        ma = A.mean(axis=2, keepdims=True)
        mb = B.mean(axis=2, keepdims=True)
    else:
        ma = np.zeros(A.shape[:2] + (1,))
        mb = np.zeros(B.shape[:2] + (1,))
    A0 = A - ma
    B0 = B - mb
    M = np.matmul(B0, A0.transpose(0, 2, 1))
    U, S, Vt = np.linalg.svd(M)
    sign = np.where(np.linalg.det(np.matmul(U, Vt)) >= 0.0, 1.0, -1.0)
    U = U.copy()
    U[:, :, 2] *= sign[:, None]
    R = np.matmul(U, Vt)
    na = np.sum(A0**2, axis=(1, 2))
    trace = S[:, 0] + S[:, 1] + sign * S[:, 2]
    if scale:
        safe = np.where(na > 0.0, na, 1.0)
        s = np.where(na > 0.0, trace / safe, 0.0)
    else:
        s = np.ones(A.shape[0])
    aligned = s[:, None, None] * np.matmul(R, A0) + mb
    return aligned, R, s, np.sum(B0**2, axis=(1, 2))


NUMBA = SimpleNamespace(
    name="numba",
    bone_vectors=_nb_bone_vectors,
    kcs=_nb_kcs,
    bone_lengths=_nb_bone_lengths,
    joint_distances=_nb_joint_distances,
    procrustes=_nb_procrustes,
)
NUMPY = SimpleNamespace(
    name="numpy",
    bone_vectors=_np_bone_vectors,
    kcs=_np_kcs,
    bone_lengths=_np_bone_lengths,
    joint_distances=_np_joint_distances,
    procrustes=_np_procrustes,
)
BACKEND = NUMBA if USE_NUMBA else NUMPY


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _idx(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def bone_vectors(X, r_idx, t_idx):
    return BACKEND.bone_vectors(_f64(X), _idx(r_idx), _idx(t_idx))


def kcs(B):
    return BACKEND.kcs(_f64(B))


def bone_lengths(X, r_idx, t_idx):
    return BACKEND.bone_lengths(_f64(X), _idx(r_idx), _idx(t_idx))


def joint_distances(A, B):
    return BACKEND.joint_distances(_f64(A), _f64(B))


def procrustes(A, B, center=True, scale=True):
    """Batched similarity alignment of ``A`` onto ``B``.

    Returns ``(aligned, R, s, ref_sq_norm)``; ``ref_sq_norm`` is the squared
    Frobenius spread of the (centred) reference so callers can flag
    degenerate references.
    """
    return BACKEND.procrustes(_f64(A), _f64(B), bool(center), bool(scale))
