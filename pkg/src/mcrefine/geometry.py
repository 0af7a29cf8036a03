"""Camera pose representation and quaternion math on SO(3) x T(3).

Conventions used throughout the package:
  - quaternions are (w, x, y, z), unit norm, canonical sign w >= 0;
  - a pose is a camera center ``c`` (world meters) plus a quaternion ``q``
    that rotates world-frame vectors into the camera frame, so a world
    point projects through ``p_cam = R(q) @ (p_world - c)``;
  - the camera frame is x-right, y-down, z-forward (pinhole looks along +z);
  - world +y is "up"; vertical noise damping acts on that axis;
  - angles cross API boundaries in degrees, internals are radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class InvalidQuaternionError(ValueError):
    """Quaternion input is unusable (zero norm, wrong shape, not unit)."""


class InvalidAxisError(ValueError):
    """Rotation axis is not a unit 3-vector."""


def quat_normalize(q) -> np.ndarray:
    """Return q scaled to unit norm with the sign flipped so w >= 0."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape != (4,):
        raise InvalidQuaternionError(f"quaternion must have 4 components, got {q.shape}")
    n = math.sqrt(float(np.dot(q, q)))
    if n < 1e-12:
        raise InvalidQuaternionError("zero-norm quaternion cannot be normalized")
    out = q / n
    if out[0] < 0.0:
        out = -out
    return out


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a * b, no normalization."""
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


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rotmat(q) -> np.ndarray:
    """Convert a unit quaternion to a 3x3 rotation matrix."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape != (4,):
        raise InvalidQuaternionError(f"quaternion must have 4 components, got {q.shape}")
    if abs(float(np.dot(q, q)) - 1.0) > 2e-6:
        raise InvalidQuaternionError("quaternion is not unit norm")
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def quat_from_rotmat(R) -> np.ndarray:
    """Convert a 3x3 rotation matrix to a canonical unit quaternion."""
    R = np.asarray(R, dtype=np.float64)
    t = R[0, 0] + R[1, 1] + R[2, 2]
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def exp_rotation(axis, angle: float) -> np.ndarray:
    """Unit quaternion for a rotation of `angle` radians about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64).reshape(-1)
    if axis.shape != (3,):
        raise InvalidAxisError(f"axis must have 3 components, got {axis.shape}")
    if abs(float(np.dot(axis, axis)) - 1.0) > 2e-6:
        raise InvalidAxisError("rotation axis is not unit norm")
    half = 0.5 * float(angle)
    s = math.sin(half)
    return quat_normalize([math.cos(half), s * axis[0], s * axis[1], s * axis[2]])


@dataclass(frozen=True)
class Pose:
    """Camera center (world meters) + world-to-camera unit quaternion (w,x,y,z)."""

    center: np.ndarray
    quat: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(-1)
        if c.shape != (3,):
            raise ValueError(f"pose center must have 3 components, got {c.shape}")
        object.__setattr__(self, "center", c.copy())
        object.__setattr__(self, "quat", quat_normalize(self.quat))

    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.quat)

    def translation(self) -> np.ndarray:
        """t = -R c, so that p_cam = R p_world + t."""
        return -self.rotation() @ self.center

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, height: int, width: int) -> "Intrinsics":
        """Same camera at a different resolution (focals/principal point scale with it)."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    @staticmethod
    def from_fov(width: int, height: int, hfov_deg: float = 70.0) -> "Intrinsics":
        f = 0.5 * width / math.tan(math.radians(hfov_deg) / 2.0)
        return Intrinsics(f, f, width / 2.0, height / 2.0, width, height)


@dataclass(frozen=True)
class PoseError:
    """Translation error in meters, rotation error in degrees [0, 180]."""

    trans_err: float
    rot_err: float


def pose_error(est: Pose, gt: Pose) -> PoseError:
    """Euclidean center distance plus relative rotation angle in degrees."""
    trans = float(np.linalg.norm(est.center - gt.center))
    dot = abs(float(np.dot(est.quat, gt.quat)))
    rot = math.degrees(2.0 * math.acos(min(dot, 1.0)))
    return PoseError(trans, rot)


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    """Uniform direction on the sphere (Gaussian draw, normalized)."""
    while True:
        v = rng.normal(0.0, 1.0, size=3)
        n = float(np.linalg.norm(v))
        if n > 1e-12:
            return v / n


def perturb_pose(base: Pose, trans_sigma, rot_mag_deg: float, rng: np.random.Generator) -> Pose:
    """Sample a pose near `base`.

    Center gets zero-mean Gaussian noise with per-axis standard deviations
    `trans_sigma` (meters). Orientation gets a rotation of angle uniform in
    [-rot_mag_deg, +rot_mag_deg] about a random unit axis, composed on the
    right of the base quaternion. The draw order (translation, axis, angle)
    is fixed so a given rng state always yields the same pose.
    """
    sigma = np.asarray(trans_sigma, dtype=np.float64).reshape(-1)
    if sigma.shape != (3,):
        raise ValueError(f"trans_sigma must have 3 components, got {sigma.shape}")
    if np.any(sigma < 0.0) or rot_mag_deg < 0.0:
        raise ValueError("noise magnitudes must be non-negative")
    eps = rng.normal(0.0, 1.0, size=3) * sigma
    axis = random_unit_vector(rng)
    angle = rng.uniform(-1.0, 1.0) * math.radians(rot_mag_deg)
    if angle == 0.0 and not np.any(eps):
        return base
    if angle == 0.0:
        quat = base.quat
    else:
        quat = quat_multiply(base.quat, exp_rotation(axis, angle))
    return Pose(base.center + eps, quat)


def look_at(center, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Pose at `center` with the optical axis through `target`."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    target = np.asarray(target, dtype=np.float64).reshape(3)
    up = np.asarray(up, dtype=np.float64).reshape(3)
    z = target - center
    nz = float(np.linalg.norm(z))
    if nz < 1e-12:
        raise ValueError("look_at target coincides with the camera center")
    z = z / nz
    x = np.cross(z, up)
    nx = float(np.linalg.norm(x))
    if nx < 1e-9:  # looking straight along `up`: pick any horizontal right vector
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        nx = float(np.linalg.norm(x))
    x = x / nx
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    return Pose(center, quat_from_rotmat(R))


def load_pose_file(path) -> dict[str, Pose]:
    """Read `name qw qx qy qz cx cy cz` records; '#' starts a comment line."""
    poses: dict[str, Pose] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 'name qw qx qy qz cx cy cz', got {len(parts)} fields")
            name = parts[0]
            try:
                vals = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric pose field") from exc
            poses[name] = Pose(np.array(vals[4:7]), np.array(vals[0:4]))
    return poses


def save_pose_file(poses: dict[str, Pose], path) -> None:
    """Write poses with full float precision (repr round-trips exactly)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# name qw qx qy qz cx cy cz\n")
        for name, pose in poses.items():
            q = pose.quat
            c = pose.center
            fields = [repr(float(v)) for v in (q[0], q[1], q[2], q[3], c[0], c[1], c[2])]
            fh.write(name + " " + " ".join(fields) + "\n")
