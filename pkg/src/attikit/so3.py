"""Small-matrix algebra and SO(3) primitives.

Rotations are plain ``(3, 3)`` float arrays (direction cosine matrices) and
vectors are ``(3,)`` arrays.  Nearly everything here broadcasts over leading
axes, so a stack of ``N`` rotations is simply an ``(N, 3, 3)`` array.
"""

from __future__ import annotations

import numpy as np

from .errors import NotAntisymmetric, NotProperRotation

ROTATION_TOL = 1e-9
SMALL_ANGLE = 1e-8
# log_map switches to the symmetric-part axis extraction above this angle
_NEAR_PI = np.pi - 1e-3


def cross_op(x):
    """Antisymmetric matrix ``x×`` with ``cross_op(x) @ y == cross(x, y)``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (3, 3))
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    out[..., 0, 1] = -x3
    out[..., 0, 2] = x2
    out[..., 1, 0] = x3
    out[..., 1, 2] = -x1
    out[..., 2, 0] = -x2
    out[..., 2, 1] = x1
    return out


def cross(a, b):
    """Cross product over the last axis (broadcasting, no axis juggling)."""
    a1, a2, a3 = a[..., 0], a[..., 1], a[..., 2]
    b1, b2, b3 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a2 * b3 - a3 * b2, a3 * b1 - a1 * b3, a1 * b2 - a2 * b1], axis=-1)


def uncross(a):
    """Inverse of :func:`cross_op`; raises if ``a`` is not antisymmetric."""
    a = np.asarray(a, dtype=float)
    sym = np.linalg.norm(a + np.swapaxes(a, -1, -2), axis=(-2, -1))
    scale = np.maximum(1.0, np.linalg.norm(a, axis=(-2, -1)))
    if np.any(sym > 1e-9 * scale):
        raise NotAntisymmetric(f"matrix is not antisymmetric (|A + A^T| = {np.max(sym):.3e})")
    return 0.5 * np.stack(
        [a[..., 2, 1] - a[..., 1, 2], a[..., 0, 2] - a[..., 2, 0], a[..., 1, 0] - a[..., 0, 1]],
        axis=-1,
    )


def vee(a):
    """Axial vector of the antisymmetric part of ``a`` (no checks)."""
    a = np.asarray(a, dtype=float)
    return 0.5 * np.stack(
        [a[..., 2, 1] - a[..., 1, 2], a[..., 0, 2] - a[..., 2, 0], a[..., 1, 0] - a[..., 0, 1]],
        axis=-1,
    )


def pa(a):
    a = np.asarray(a, dtype=float)
    return 0.5 * (a - np.swapaxes(a, -1, -2))


def ps(a):
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def commutator(a, b):
    return a @ b - b @ a


def anticommutator(a, b):
    return a @ b + b @ a


def exp_map(x):
    """Rotation matrix for the Euler vector ``x`` (Rodrigues' formula).

    Below :data:`SMALL_ANGLE` the second-order series ``I + K + K²/2`` is used.
    """
    x = np.asarray(x, dtype=float)
    theta2 = np.sum(x * x, axis=-1)
    theta = np.sqrt(theta2)
    k = cross_op(x)
    # (x×)^2 = x x^T - |x|^2 I
    k2 = x[..., :, None] * x[..., None, :] - theta2[..., None, None] * np.eye(3)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    s = np.where(small, 1.0, np.sin(safe) / safe)
    c = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + s[..., None, None] * k + c[..., None, None] * k2


def rotation_angle(r):
    """Rotation angle in ``[0, pi]``; well conditioned over the whole range."""
    r = np.asarray(r, dtype=float)
    sin_t = np.linalg.norm(vee(r), axis=-1)
    cos_t = 0.5 * (np.trace(r, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(sin_t, cos_t)


def _canonical_sign(axis):
    # first nonzero component positive
    for comp in axis:
        if abs(comp) > 1e-12:
            return axis if comp > 0 else -axis
    return axis


def _log_single(r):
    w = vee(r)
    sin_t = np.linalg.norm(w)
    cos_t = 0.5 * (np.trace(r) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if theta < SMALL_ANGLE:
        return w.copy()
    if theta < _NEAR_PI:
        return theta * w / sin_t
    # kk^T = (Ps(R) - cos(theta) I) / (1 - cos(theta))
    kk = (ps(r) - cos_t * np.eye(3)) / (1.0 - cos_t)
    i = int(np.argmax(np.diag(kk)))
    axis = kk[:, i] / np.sqrt(kk[i, i])
    axis /= np.linalg.norm(axis)
    if sin_t > 1e-12:
        if axis @ w < 0:
            axis = -axis
    else:
        axis = _canonical_sign(axis)
    return theta * axis


def log_map(r):
    """Euler vector of a rotation, inverse of :func:`exp_map` on ``|x| <= pi``.

    At exactly ``pi`` the axis sign is ambiguous; the first nonzero component
    is made positive.
    """
    r = np.asarray(r, dtype=float)
    if r.ndim == 2:
        return _log_single(r)
    flat = r.reshape(-1, 3, 3)
    return np.array([_log_single(m) for m in flat]).reshape(r.shape[:-2] + (3,))


def to_inertial(a, c):
    """Express a body-frame vector (``C x``) or matrix (``C A C^T``) in inertial axes."""
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    if a.ndim == 1:
        return c @ a
    if a.ndim == 2:
        return c @ a @ c.T
    raise ValueError("to_inertial expects a (3,) vector or a (3, 3) matrix")


def to_body(a, c):
    """Inverse of :func:`to_inertial`."""
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    if a.ndim == 1:
        return c.T @ a
    if a.ndim == 2:
        return c.T @ a @ c
    raise ValueError("to_body expects a (3,) vector or a (3, 3) matrix")


def orthonormalize(m, tol=1e-14, max_iter=100):
    """Nearest rotation in Frobenius norm (polar factor of ``m``).

    Uses the Newton iteration ``R <- (R + R^-T) / 2``, which converges
    quadratically for ``det(m) > 0``.
    """
    r = np.array(m, dtype=float)
    if np.any(np.linalg.det(r) <= 0.0):
        raise NotProperRotation("matrix has non-positive determinant")
    for _ in range(max_iter):
        nxt = 0.5 * (r + np.swapaxes(np.linalg.inv(r), -1, -2))
        step = np.max(np.abs(nxt - r))
        r = nxt
        if step < tol:
            break
    return r


def is_rotation(m, tol=ROTATION_TOL):
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3) or not np.all(np.isfinite(m)):
        return False
    err = np.linalg.norm(np.swapaxes(m, -1, -2) @ m - np.eye(3), axis=(-2, -1))
    det = np.linalg.det(m)
    return bool(np.all(err <= tol) and np.all(np.abs(det - 1.0) <= tol))


def check_rotation(m, name="rotation", tol=ROTATION_TOL):
    if not is_rotation(m, tol):
        raise NotProperRotation(f"{name} is not a proper rotation to {tol:g}")
    return np.asarray(m, dtype=float)


def random_rotation(rng, size=None):
    """Uniformly (Haar) distributed rotations via random unit quaternions."""
    shape = (4,) if size is None else tuple(np.atleast_1d(size)) + (4,)
    q = rng.standard_normal(shape)
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )
    return r


def rot_z(angle):
    return exp_map(np.array([0.0, 0.0, angle]))
