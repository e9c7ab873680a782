"""Quaternion and rotation helpers.

Quaternions are scalar-first [qw, qx, qy, qz] with the Hamilton
convention; ``quat_to_rot`` maps body frame to world frame.  All
functions accept plain numpy arrays or the dual types from
:mod:`multilift.dualnum`, batched over leading axes.
"""

import numpy as np

from . import dualnum as dn


def hat(v):
    """Skew-symmetric matrix of a plain 3-vector."""
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def quat_to_rot(q):
    """Rotation matrix (..., 3, 3) from a unit quaternion (..., 4)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    # shared pairwise products keep the dual-arithmetic cost down
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    entries = dn.stack([
        1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
        2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
        2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy),
    ])
    shape = entries.shape[:-1] + (3, 3)
    return entries.reshape(shape)


def quat_deriv(q, w):
    """Kinematic rate qdot = 0.5 * Omega(w) q for body angular rate w."""
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    return dn.stack([
        -0.5 * (wx * qx + wy * qy + wz * qz),
        0.5 * (wx * qw + wz * qy - wy * qz),
        0.5 * (wy * qw - wz * qx + wx * qz),
        0.5 * (wz * qw + wy * qx - wx * qy),
    ])


def normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def attitude_error(q, rot_ref):
    """Geometric attitude error 0.5 * vee(Rref^T R - R^T Rref)."""
    r = quat_to_rot(q)
    a = dn.matmul(np.swapaxes(rot_ref, -1, -2), r)
    b = (a.transpose_last2() if isinstance(a, (dn.Dual, dn.Dual2))
         else np.swapaxes(a, -1, -2))
    m = a - b
    return dn.stack([0.5 * m[..., 2, 1], 0.5 * m[..., 0, 2], 0.5 * m[..., 1, 0]])


def quat_to_euler_zyx(q):
    """Roll, pitch, yaw (rad) from a unit quaternion, ZYX convention."""
    q = normalize(np.asarray(q, dtype=float))
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2 * (w * y - z * x), -1.0, 1.0))
    yaw = np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return np.stack([roll, pitch, yaw], axis=-1)
