"""Quaternion helpers. Quaternions are (w, x, y, z) arrays, Hamilton product."""

from __future__ import annotations

import numpy as np


def normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"cannot normalize quaternion {q!r}")
    return q / n


def multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=float)


def from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def from_rotvec(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    angle = float(np.linalg.norm(v))
    if angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return from_axis_angle(v / angle, angle)


def to_rotvec(q) -> np.ndarray:
    """Axis-angle vector of the shortest rotation represented by ``q``."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    s = np.linalg.norm(q[1:])
    if s < 1e-15:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(s, q[0])
    return q[1:] / s * angle


def from_euler_xyz_deg(rx: float, ry: float, rz: float) -> np.ndarray:
    """Intrinsic X, then Y, then Z rotation (degrees) as a unit quaternion."""
    qx = from_axis_angle((1.0, 0.0, 0.0), np.radians(rx))
    qy = from_axis_angle((0.0, 1.0, 0.0), np.radians(ry))
    qz = from_axis_angle((0.0, 0.0, 1.0), np.radians(rz))
    return normalize(multiply(multiply(qx, qy), qz))


def to_matrix(q) -> np.ndarray:
    """3x3 rotation matrix mapping body-frame vectors into the world frame."""
    w, x, y, z = normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def slerp(q0, q1, s: float) -> np.ndarray:
    """Spherical interpolation along the short arc; ``s`` outside [0, 1] extrapolates."""
    q0 = normalize(q0)
    q1 = normalize(q1)
    if np.dot(q0, q1) < 0.0:
        q1 = -q1
    delta = multiply(conjugate(q0), q1)
    return normalize(multiply(q0, from_rotvec(to_rotvec(delta) * s)))


def from_matrix(m) -> np.ndarray:
    """Unit quaternion (w >= 0) of a proper rotation matrix."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = normalize(q)
    return -q if q[0] < 0 else q


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Orientation whose body +z axis points from ``eye`` towards ``target``."""
    fwd = np.asarray(target, dtype=float) - np.asarray(eye, dtype=float)
    fwd /= np.linalg.norm(fwd)
    right = np.cross(np.asarray(up, dtype=float), fwd)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross((1.0, 0.0, 0.0), fwd)
    right /= np.linalg.norm(right)
    down_up = np.cross(fwd, right)
    return from_matrix(np.column_stack([right, down_up, fwd]))
