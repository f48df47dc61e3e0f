"""Quaternion and SE(3) helpers (numpy, scalar poses).

Quaternions are (w, x, y, z), camera/world rotations are 3x3 matrices.
SE(3) tangents are 6-vectors ordered (omega, rho): rotation first,
translation second.
"""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion cannot be normalized")
    q = q / n
    # canonical sign: w >= 0 keeps serialization round-trips stable
    return q


def quat_to_matrix(q):
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def matrix_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[i + 1] = 0.25 * s
        q[j + 1] = (R[j, i] + R[i, j]) / s
        q[k + 1] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_slerp(qa, qb, t: float):
    """Spherical linear interpolation, shortest arc."""
    qa = quat_normalize(qa)
    qb = quat_normalize(qb)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    dot = min(dot, 1.0)
    if dot > 1.0 - 1e-10:
        return quat_normalize(qa + t * (qb - qa))
    theta = np.arccos(dot)
    s = np.sin(theta)
    return quat_normalize(np.sin((1 - t) * theta) / s * qa + np.sin(t * theta) / s * qb)


def skew(v):
    x, y, z = v
    return np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)


def so3_exp(omega):
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    return (
        np.eye(3)
        + np.sin(theta) / theta * K
        + (1 - np.cos(theta)) / theta**2 * (K @ K)
    )


def so3_log(R):
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < _SMALL_ANGLE:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # near pi: use the diagonal-dominant axis extraction
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        i = int(np.argmax(axis))
        axis = A[:, i] / axis[i]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    return (
        theta
        / (2.0 * np.sin(theta))
        * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    )


def _left_jacobian(omega):
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    return (
        np.eye(3)
        + (1 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * (K @ K)
    )


def se3_exp(xi):
    """Exponential map; xi = (omega, rho) -> (R, t), exact for all angles."""
    xi = np.asarray(xi, dtype=np.float64)
    omega, rho = xi[:3], xi[3:]
    R = so3_exp(omega)
    t = _left_jacobian(omega) @ rho
    return R, t


def se3_log(R, t):
    omega = so3_log(R)
    rho = np.linalg.solve(_left_jacobian(omega), np.asarray(t, dtype=np.float64))
    return np.concatenate([omega, rho])
