"""Weak-perspective camera: reprojection and the camera constraint.

A camera is a ``(2, 3)`` array ``K``. Losses here are plain numpy with
hand-derived gradients; the torch versions used during training live in
``replift.nets`` and are checked against these.
"""

import numpy as np

# floor on trace(K K^T) so the normalised constraint stays finite near K = 0
TRACE_EPS = 1e-8


def camera_from_vector(v):
    """Row-major reshape of a length-6 vector into ``K``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 6:
        raise ValueError(f"camera vector must have 6 entries, got shape {v.shape}")
    return v.reshape(v.shape[:-1] + (2, 3))


def reproject(pose, cam):
    """``W' = K X``; broadcasts over leading batch axes."""
    return np.matmul(np.asarray(cam, dtype=np.float64), np.asarray(pose, dtype=np.float64))


def reproject_jacobians(pose, cam):
    """Jacobians of ``vec(K X)`` (row-major) w.r.t. ``vec(K)`` and ``vec(X)``."""
    X = np.asarray(pose, dtype=np.float64)
    K = np.asarray(cam, dtype=np.float64)
    n = X.shape[1]
    # W'[a, j] = sum_c K[a, c] X[c, j]
    jac_k = np.zeros((2 * n, 6))
    jac_x = np.zeros((2 * n, 3 * n))
    for a in range(2):
        for j in range(n):
            row = a * n + j
            for c in range(3):
                jac_k[row, a * 3 + c] = X[c, j]
                jac_x[row, c * n + j] = K[a, c]
    return jac_k, jac_x


def _residual(observed, pose, cam, mask):
    R = np.asarray(observed, dtype=np.float64) - reproject(pose, cam)
    if mask is not None:
        R = R * np.asarray(mask, dtype=bool)[..., None, :]
    return R


def reprojection_loss(observed, pose, cam, mask=None):
    """``|| W - K X ||_F`` over visible columns only."""
    R = _residual(observed, pose, cam, mask)
    return np.sqrt(np.sum(R**2, axis=(-2, -1)))


def reprojection_loss_grad(observed, pose, cam, mask=None):
    """Returns ``(loss, dL/dX, dL/dK)`` for a single sample (0 subgradient at 0)."""
    X = np.asarray(pose, dtype=np.float64)
    K = np.asarray(cam, dtype=np.float64)
    R = _residual(observed, X, K, mask)
    loss = float(np.sqrt(np.sum(R**2)))
    if loss == 0.0:
        return loss, np.zeros_like(X), np.zeros_like(K)
    return loss, -(K.T @ R) / loss, -(R @ X.T) / loss


def camera_scale(cam):
    """``s = sqrt(trace(K K^T) / 2)``."""
    K = np.asarray(cam, dtype=np.float64)
    return np.sqrt(np.sum(K**2, axis=(-2, -1)) / 2.0)


def camera_loss(cam):
    """``|| 2 K K^T / trace(K K^T) - I ||_F``; zero iff rows orthogonal with equal norm."""
    K = np.asarray(cam, dtype=np.float64)
    A = np.matmul(K, np.swapaxes(K, -1, -2))
    tr = np.maximum(np.trace(A, axis1=-2, axis2=-1), TRACE_EPS)
    M = 2.0 * A / tr[..., None, None] - np.eye(2)
    return np.sqrt(np.sum(M**2, axis=(-2, -1)))


def camera_loss_grad(cam):
    """Returns ``(loss, dL/dK)`` for a single camera."""
    K = np.asarray(cam, dtype=np.float64)
    A = K @ K.T
    raw = np.trace(A)
    tr = max(raw, TRACE_EPS)
    M = 2.0 * A / tr - np.eye(2)
    loss = float(np.sqrt(np.sum(M**2)))
    if loss == 0.0:
        return loss, np.zeros_like(K)
    gM = M / loss
    gA = (2.0 / tr) * gM
    if raw > TRACE_EPS:
        gA = gA - (2.0 / tr**2) * np.sum(gM * A) * np.eye(2)
    return loss, (gA + gA.T) @ K


def is_weak_perspective(cam, tol=1e-6):
    K = np.asarray(cam, dtype=np.float64)
    s2 = camera_scale(K) ** 2
    return bool(np.all(np.abs(K @ K.T - s2 * np.eye(2)) <= tol * max(s2, 1.0)))


def rotation_from_camera(cam):
    """Nearest proper rotation whose first two rows span the rows of ``K``."""
    K = np.asarray(cam, dtype=np.float64)
    U, _, Vt = np.linalg.svd(K, full_matrices=False)
    top = U @ Vt
    third = np.cross(top[..., 0, :], top[..., 1, :])
    return np.concatenate([top, third[..., None, :]], axis=-2)


def weak_perspective(rotation, scale):
    """``s`` times the top ``2 x 3`` block of a rotation."""
    R = np.asarray(rotation, dtype=np.float64)
    return np.asarray(scale, dtype=np.float64)[..., None, None] * R[..., :2, :]
