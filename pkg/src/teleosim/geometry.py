"""SE(3) value types: unit-quaternion rotations and rigid transforms.

Everything here is a pure value: frozen dataclasses of plain floats, safe
to share across threads and cheap to serialize. The canonical wire order
for a transform is (qw, qx, qy, qz, px, py, pz).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

Vec3 = tuple[float, float, float]

UNIT_NORM_TOL = 1e-9


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite component: {v!r}")


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion. Constructor requires norm within 1e-9 of 1."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        _check_finite(self.w, self.x, self.y, self.z)
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if abs(n - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"quaternion norm {n} not within {UNIT_NORM_TOL} of 1")

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def normalized(w: float, x: float, y: float, z: float) -> "Rotation":
        """Build from arbitrary non-zero components, rescaled to unit norm."""
        _check_finite(w, x, y, z)
        n = math.sqrt(w * w + x * x + y * y + z * z)
        if n < 1e-12:
            raise ValueError("cannot normalize near-zero quaternion")
        return Rotation(w / n, x / n, y / n, z / n)

    @staticmethod
    def from_axis_angle(axis: Vec3, angle: float) -> "Rotation":
        ax, ay, az = axis
        n = math.sqrt(ax * ax + ay * ay + az * az)
        if n < 1e-12:
            raise ValueError("axis must be non-zero")
        h = 0.5 * angle
        s = math.sin(h) / n
        return Rotation.normalized(math.cos(h), ax * s, ay * s, az * s)

    @staticmethod
    def from_rotvec(v: Vec3) -> "Rotation":
        """Exponential map: rotation vector (axis * angle) to quaternion."""
        vx, vy, vz = v
        angle = math.sqrt(vx * vx + vy * vy + vz * vz)
        if angle < 1e-12:
            # second-order series of sin(a/2)/a keeps the map smooth at 0
            s = 0.5 - angle * angle / 48.0
            return Rotation.normalized(1.0, vx * s, vy * s, vz * s)
        s = math.sin(0.5 * angle) / angle
        return Rotation.normalized(math.cos(0.5 * angle), vx * s, vy * s, vz * s)

    def to_rotvec(self) -> Vec3:
        """Logarithm map, shortest representation (angle in [0, pi])."""
        q = self.canonical()
        s = math.sqrt(q.x * q.x + q.y * q.y + q.z * q.z)
        if s < 1e-12:
            scale = 2.0 / q.w
        else:
            scale = 2.0 * math.atan2(s, q.w) / s
        return (q.x * scale, q.y * scale, q.z * scale)

    def canonical(self) -> "Rotation":
        """Pick the double-cover representative with w >= 0."""
        w, x, y, z = self.w, self.x, self.y, self.z
        if w < 0.0 or (w == 0.0 and _first_nonzero_negative(x, y, z)):
            return Rotation(-w, -x, -y, -z)
        return self

    def inverse(self) -> "Rotation":
        return Rotation(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Rotation") -> "Rotation":
        a, b = self, other
        return Rotation.normalized(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )

    def rotate(self, p: Vec3) -> Vec3:
        px, py, pz = p
        # v' = v + w*t + q_vec x t,  t = 2 q_vec x v
        tx = 2.0 * (self.y * pz - self.z * py)
        ty = 2.0 * (self.z * px - self.x * pz)
        tz = 2.0 * (self.x * py - self.y * px)
        return (
            px + self.w * tx + self.y * tz - self.z * ty,
            py + self.w * ty + self.z * tx - self.x * tz,
            pz + self.w * tz + self.x * ty - self.y * tx,
        )

    def dot(self, other: "Rotation") -> float:
        return self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z

    def approx_equal(self, other: "Rotation", tol: float = 1e-9) -> bool:
        """Same rotation up to quaternion sign, within angle tol."""
        return angle_between(self, other) <= tol


def _first_nonzero_negative(*values: float) -> bool:
    for v in values:
        if v != 0.0:
            return v < 0.0
    return False


def slerp(a: Rotation, b: Rotation, s: float) -> Rotation:
    """Geodesic interpolation from a (s=0) to b (s=1), shortest arc."""
    d = a.dot(b)
    bw, bx, by, bz = b.w, b.x, b.y, b.z
    if d < 0.0:
        d, bw, bx, by, bz = -d, -bw, -bx, -by, -bz
    if d > 1.0 - 1e-9:
        # nearly parallel: nlerp avoids the 1/sin blow-up
        return Rotation.normalized(
            a.w + s * (bw - a.w),
            a.x + s * (bx - a.x),
            a.y + s * (by - a.y),
            a.z + s * (bz - a.z),
        )
    theta = math.acos(max(-1.0, min(1.0, d)))
    sin_theta = math.sin(theta)
    ka = math.sin((1.0 - s) * theta) / sin_theta
    kb = math.sin(s * theta) / sin_theta
    return Rotation.normalized(
        ka * a.w + kb * bw, ka * a.x + kb * bx, ka * a.y + kb * by, ka * a.z + kb * bz
    )


def angle_between(a: Rotation, b: Rotation) -> float:
    """Geodesic angle in [0, pi]; invariant under quaternion sign flips."""
    d = min(1.0, abs(a.dot(b)))
    return 2.0 * math.acos(d)


def rotate_towards(current: Rotation, target: Rotation, max_step: float) -> Rotation:
    """Step from current toward target by at most max_step radians."""
    angle = angle_between(current, target)
    if angle <= max_step:
        return target
    return slerp(current, target, max_step / angle)


@dataclass(frozen=True)
class Transform:
    """Rigid transform: rotation then translation (meters)."""

    rotation: Rotation
    translation: Vec3

    def __post_init__(self) -> None:
        _check_finite(*self.translation)
        if len(self.translation) != 3:
            raise ValueError("translation must have 3 components")

    @staticmethod
    def identity() -> "Transform":
        return Transform(Rotation.identity(), (0.0, 0.0, 0.0))

    @staticmethod
    def from_translation(p: Vec3) -> "Transform":
        return Transform(Rotation.identity(), (float(p[0]), float(p[1]), float(p[2])))

    def apply(self, p: Vec3) -> Vec3:
        rx, ry, rz = self.rotation.rotate(p)
        tx, ty, tz = self.translation
        return (rx + tx, ry + ty, rz + tz)

    def apply_rotation(self, p: Vec3) -> Vec3:
        return self.rotation.rotate(p)


def compose(a: Transform, b: Transform) -> Transform:
    """a then b applied to points as a(b(p)): homogeneous-matrix product."""
    return Transform(a.rotation * b.rotation, a.apply(b.translation))


def inverse(t: Transform) -> Transform:
    r_inv = t.rotation.inverse()
    ix, iy, iz = r_inv.rotate(t.translation)
    return Transform(r_inv, (-ix, -iy, -iz))


def pose_to_floats(t: Transform) -> tuple[float, ...]:
    """Canonical 7-float wire order (qw, qx, qy, qz, px, py, pz), w >= 0."""
    q = t.rotation.canonical()
    p = t.translation
    return (q.w, q.x, q.y, q.z, p[0], p[1], p[2])


def pose_from_floats(v) -> Transform:
    if len(v) != 7:
        raise ValueError("pose requires exactly 7 floats")
    return Transform(
        Rotation(float(v[0]), float(v[1]), float(v[2]), float(v[3])),
        (float(v[4]), float(v[5]), float(v[6])),
    )
