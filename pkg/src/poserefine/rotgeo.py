"""Rotation algebra: unit quaternions, axis-angle, and rotation matrices.

Conventions
-----------
- Quaternions are scalar-first, ``(w, x, y, z)``.
- ``q`` and ``-q`` encode the same rotation.
- Angles are radians everywhere in this module.
- Rotation matrices are plain ``(3, 3)`` float64 arrays, row-major, rows
  named X, Y, Z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError

_UNIT_TOL = 1e-6
_ORTHO_TOL = 1e-6
_MAX_REORTHO_PASSES = 8


@dataclass(frozen=True)
class UnitQuaternion:
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> UnitQuaternion:
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, arr, normalize: bool = True) -> UnitQuaternion:
        a = np.asarray(arr, dtype=np.float64).reshape(4)
        if normalize:
            n = float(np.linalg.norm(a))
            if n < 1e-12:
                raise InvalidArgumentError("cannot normalize a zero quaternion")
            a = a / n
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def canonical(self) -> UnitQuaternion:
        """Representative of the same rotation with ``w >= 0``."""
        return -self if self.w < 0 else self

    def same_rotation(self, other: UnitQuaternion, tol: float = 1e-9) -> bool:
        return geodesic_angle(self, other) <= tol

    def __neg__(self) -> UnitQuaternion:
        return UnitQuaternion(-self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: UnitQuaternion) -> UnitQuaternion:
        return quat_mul(self, other)


@dataclass(frozen=True)
class AxisAngle:
    axis: tuple[float, float, float]
    angle: float

    def __post_init__(self):
        object.__setattr__(self, "axis", tuple(float(c) for c in self.axis))

    @property
    def axis_array(self) -> np.ndarray:
        return np.array(self.axis, dtype=np.float64)


def _normalized4(w: float, x: float, y: float, z: float) -> UnitQuaternion:
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n < 1e-12:
        raise InvalidArgumentError("cannot normalize a zero quaternion")
    return UnitQuaternion(w / n, x / n, y / n, z / n)


def axis_angle_to_quat(aa: AxisAngle) -> UnitQuaternion:
    n = aa.axis_array
    norm = float(np.linalg.norm(n))
    if abs(norm - 1.0) > _UNIT_TOL:
        raise InvalidArgumentError(f"axis must be unit length, got norm {norm!r}")
    half = 0.5 * aa.angle
    s = math.sin(half)
    return _normalized4(math.cos(half), float(n[0]) * s, float(n[1]) * s, float(n[2]) * s)


def quat_to_axis_angle(q: UnitQuaternion) -> AxisAngle:
    """Inverse of :func:`axis_angle_to_quat`, with the angle in ``[0, 2*pi]``.

    At the identity the axis is arbitrary and ``(1, 0, 0)`` is returned.
    The angle is recovered with ``atan2`` on the vector norm, which agrees with
    ``2*acos(w)`` but keeps full precision for angles near 0 and pi.
    """
    v = q.vec
    s = float(np.linalg.norm(v))
    if s < 1e-15:
        return AxisAngle((1.0, 0.0, 0.0), 0.0)
    angle = 2.0 * math.atan2(s, q.w)
    return AxisAngle(tuple(v / s), angle)


def quat_mul(q1: UnitQuaternion, q2: UnitQuaternion) -> UnitQuaternion:
    """Hamilton product ``q1 * q2``: rotate by ``q2`` first, then ``q1``."""
    r1, x1, y1, z1 = q1.w, q1.x, q1.y, q1.z
    r2, x2, y2, z2 = q2.w, q2.x, q2.y, q2.z
    # (r1 r2 - v1.v2, r1 v2 + r2 v1 + v1 x v2), written out in scalars
    return _normalized4(
        r1 * r2 - (x1 * x2 + y1 * y2 + z1 * z2),
        r1 * x2 + r2 * x1 + (y1 * z2 - z1 * y2),
        r1 * y2 + r2 * y1 + (z1 * x2 - x1 * z2),
        r1 * z2 + r2 * z1 + (x1 * y2 - y1 * x2),
    )


def quat_inverse(q: UnitQuaternion) -> UnitQuaternion:
    return UnitQuaternion(q.w, -q.x, -q.y, -q.z)


def geodesic_angle(q1: UnitQuaternion, q2: UnitQuaternion) -> float:
    """Angle in ``[0, pi]`` of the rotation carrying ``q2`` onto ``q1``."""
    rel = quat_mul(q1, quat_inverse(q2))
    c = min(max(abs(rel.w), 0.0), 1.0)
    return 2.0 * math.acos(c)


def quat_to_matrix(q: UnitQuaternion) -> np.ndarray:
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def orthogonality_residual(m: np.ndarray) -> float:
    """Frobenius norm of ``M^T M - I``."""
    m = np.asarray(m, dtype=np.float64)
    return float(np.linalg.norm(m.T @ m - np.eye(3)))


def distance_to_so3(m: np.ndarray) -> float:
    """Frobenius distance from ``m`` to the nearest rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    nearest = u @ np.diag([1.0, 1.0, d]) @ vt
    return float(np.linalg.norm(m - nearest))


def _reortho_pass(m: np.ndarray) -> np.ndarray:
    x, y = m[0], m[1]
    error = float(x @ y)
    x_o = x - 0.5 * error * y
    y_o = y - 0.5 * error * x
    z_o = np.cross(x_o, y_o)
    out = np.empty((3, 3))
    for i, v in enumerate((x_o, y_o, z_o)):
        out[i] = 0.5 * (3.0 - float(v @ v)) * v
    return out


def reorthogonalize(m) -> np.ndarray:
    """Project a nearly orthogonal matrix back onto SO(3).

    Each pass splits the X/Y dot-product error evenly between the first two
    rows, rebuilds Z as their cross product and renormalizes all three rows
    with the first-order step ``v <- (3 - v.v) v / 2``. Passes repeat until the
    residual stops shrinking, so the result is a fixed point of the pass.
    """
    m = np.array(m, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(m)):
        raise DegenerateInputError("matrix contains non-finite entries")
    out = _reortho_pass(m)
    if orthogonality_residual(out) > 1e-3:
        raise DegenerateInputError(
            f"matrix too far from SO(3): residual {orthogonality_residual(out):.3g} after one pass"
        )
    res = orthogonality_residual(out)
    for _ in range(_MAX_REORTHO_PASSES):
        nxt = _reortho_pass(out)
        nxt_res = orthogonality_residual(nxt)
        if nxt_res >= res:
            break
        out, res = nxt, nxt_res
    if np.linalg.det(out) <= 0:
        raise DegenerateInputError("re-orthogonalized matrix has non-positive determinant")
    return out


def rotmat_to_quat(m) -> UnitQuaternion:
    """Convert a rotation matrix to a quaternion with ``w >= 0``.

    Branches on the largest of ``(trace, m00, m11, m22)`` so the square root
    is always taken of a quantity bounded away from zero.
    """
    m = np.asarray(m, dtype=np.float64).reshape(3, 3)
    if orthogonality_residual(m) > _ORTHO_TOL or np.linalg.det(m) <= 0:
        raise InvalidArgumentError("matrix is not a rotation; call reorthogonalize first")
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    k = int(np.argmax([tr, m[0, 0], m[1, 1], m[2, 2]]))
    if k == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif k == 1:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return _normalized4(*(float(c) for c in q)).canonical()


def random_quaternion(rng: np.random.Generator) -> UnitQuaternion:
    """Uniformly distributed rotation (normalized 4D Gaussian)."""
    while True:
        a = rng.standard_normal(4)
        if np.linalg.norm(a) > 1e-6:
            return _normalized4(*(float(c) for c in a))


def deg2rad(deg: float) -> float:
    return deg * math.pi / 180.0


def rad2deg(rad: float) -> float:
    return rad * 180.0 / math.pi
