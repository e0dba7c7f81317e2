"""Shared test utilities: random SO(3)/SE(3) samples and finite differences.

Oracle math here is intentionally independent of the package: rotations are
built with a local Rodrigues formula and pose products are checked through
plain 4x4 matrix multiplication.
"""

import numpy as np

from drivekit.geometry import Pose


def rodrigues(v):
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.eye(3)
    axis = v / angle
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rand_rotation(rng):
    return rodrigues(rng.uniform(-np.pi, np.pi) * _rand_unit(rng))


def _rand_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def rand_pose(rng, translation_scale=2.0):
    return Pose(rand_rotation(rng), rng.uniform(-translation_scale, translation_scale, 3))


def pose_matrix(pose):
    m = np.eye(4)
    m[:3, :3] = pose.rotation
    m[:3, 3] = pose.translation
    return m


def central_difference(fn, x, index, step=1e-5):
    """d fn / d x[index] by central differences on a flat copy of x."""
    flat = np.array(x, dtype=np.float64).reshape(-1)
    orig = flat[index]
    shape = np.shape(x)
    flat[index] = orig + step
    f_plus = fn(flat.reshape(shape))
    flat[index] = orig - step
    f_minus = fn(flat.reshape(shape))
    return (f_plus - f_minus) / (2 * step)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
