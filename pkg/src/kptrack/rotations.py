"""Quaternion and rotation helpers.

Quaternions are stored scalar-first, ``(w, x, y, z)``. Every function accepts
arbitrary leading batch dimensions.
"""

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

# Reflection across the sagittal (x-z) plane.
SAGITTAL = np.diag([1.0, -1.0, 1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(m):
    """Rotation matrix to unit quaternion with ``w >= 0``."""
    m = np.asarray(m, dtype=float)
    trace = m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2]
    # Shepperd: pick the largest of w, x, y, z to divide by.
    cand = np.stack(
        [trace, m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]], axis=-1
    )
    choice = np.argmax(cand, axis=-1)
    q = np.empty(m.shape[:-2] + (4,))

    def pick(mask, vals):
        for i, v in enumerate(vals):
            q[..., i] = np.where(mask, v, q[..., i])

    r = np.sqrt(np.maximum(1.0 + trace, 1e-300))
    s = 0.5 / r
    pick(choice == 0, [0.5 * r, (m[..., 2, 1] - m[..., 1, 2]) * s,
                       (m[..., 0, 2] - m[..., 2, 0]) * s, (m[..., 1, 0] - m[..., 0, 1]) * s])
    r = np.sqrt(np.maximum(1.0 + m[..., 0, 0] - m[..., 1, 1] - m[..., 2, 2], 1e-300))
    s = 0.5 / r
    pick(choice == 1, [(m[..., 2, 1] - m[..., 1, 2]) * s, 0.5 * r,
                       (m[..., 0, 1] + m[..., 1, 0]) * s, (m[..., 0, 2] + m[..., 2, 0]) * s])
    r = np.sqrt(np.maximum(1.0 - m[..., 0, 0] + m[..., 1, 1] - m[..., 2, 2], 1e-300))
    s = 0.5 / r
    pick(choice == 2, [(m[..., 0, 2] - m[..., 2, 0]) * s, (m[..., 0, 1] + m[..., 1, 0]) * s,
                       0.5 * r, (m[..., 1, 2] + m[..., 2, 1]) * s])
    r = np.sqrt(np.maximum(1.0 - m[..., 0, 0] - m[..., 1, 1] + m[..., 2, 2], 1e-300))
    s = 0.5 / r
    pick(choice == 3, [(m[..., 1, 0] - m[..., 0, 1]) * s, (m[..., 0, 2] + m[..., 2, 0]) * s,
                       (m[..., 1, 2] + m[..., 2, 1]) * s, 0.5 * r])
    return canonical(quat_normalize(q))


def canonical(q):
    """Flip sign so that ``w >= 0``."""
    q = np.asarray(q, dtype=float)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_rotate(q, v):
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), v)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    half = 0.5 * angle[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_exp(rotvec):
    """Quaternion of the rotation vector ``rotvec`` (axis times angle)."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x has a finite limit; use its series near zero.
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    k = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * rotvec], axis=-1)


def quat_from_euler(roll, pitch, yaw):
    """Intrinsic z-y-x (yaw, then pitch, then roll) composition."""
    qz = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), np.asarray(yaw, dtype=float))
    qy = quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), np.asarray(pitch, dtype=float))
    qx = quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), np.asarray(roll, dtype=float))
    return quat_mul(quat_mul(qz, qy), qx)


def yaw_of(q):
    """Heading angle of the body x axis projected on the ground plane."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def quat_from_yaw(yaw):
    return quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), np.asarray(yaw, dtype=float))


def yaw_matrix(yaw):
    yaw = np.asarray(yaw, dtype=float)
    c, s = np.cos(yaw), np.sin(yaw)
    out = np.zeros(yaw.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def mirror_quat(q):
    """Conjugate a rotation by the sagittal reflection: R -> M R M."""
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, 1.0, -1.0])


def quat_angle(a, b):
    """Geodesic angle between two orientations, ``2 asin(min(1, |vec(a^-1 b)|))``."""
    rel = quat_mul(quat_conj(a), b)
    return 2.0 * np.arcsin(np.minimum(1.0, np.linalg.norm(rel[..., 1:], axis=-1)))


def slerp(a, b, t):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t = np.asarray(t, dtype=float)
    dot = np.sum(a * b, axis=-1)
    b = np.where(dot[..., None] < 0.0, -b, b)
    dot = np.abs(dot)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    near = theta < 1e-10
    sin_t = np.where(near, 1.0, np.sin(theta))
    wa = np.where(near, 1.0 - t, np.sin((1.0 - t) * theta) / sin_t)
    wb = np.where(near, t, np.sin(t * theta) / sin_t)
    return quat_normalize(wa[..., None] * a + wb[..., None] * b)


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def projected_gravity(q):
    """Unit world-down direction expressed in the body frame."""
    q = np.asarray(q, dtype=float)
    down = np.broadcast_to(np.array([0.0, 0.0, -1.0]), q.shape[:-1] + (3,))
    return quat_rotate(quat_conj(q), down)
