"""Rigid-body poses, pinhole cameras, projection and its derivatives.

Conventions used throughout the package:

* Quaternions are scalar-first ``(w, x, y, z)`` and treated as plain
  4-vectors by the optimizer; they are renormalized after every update
  instead of using a manifold retraction.
* A :class:`Pose` is a world-to-camera transform: ``p_cam = R(q) @ p_world + t``.
* Trajectory files on disk store camera-to-world poses with scalar-last
  quaternions (``frame_id tx ty tz qx qy qz qw``); the loader inverts them
  into the internal world-to-camera convention.
* Geometry math is 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEAR_PLANE = 0.01  # meters; points with camera z <= NEAR_PLANE are culled


class BehindCameraError(ValueError):
    """Raised when a point lies behind the camera near plane."""


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("cannot normalize zero quaternion")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion; input is normalized first."""
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def rot_to_quat(r: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) of a rotation matrix, stable in all branches."""
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        )
    elif r[1, 1] >= r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_to_rot_batch(q: np.ndarray) -> np.ndarray:
    """Vectorized quat_to_rot for an (N, 4) array; normalizes each row."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = (q / n).T
    r = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_rotation_vjp(q_unit: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Adjoint of ``quat -> rotation matrix`` at a unit quaternion.

    ``q_unit`` is (N, 4) already normalized, ``d_rot`` is (N, 3, 3);
    returns the (N, 4) gradient with respect to the unit quaternion.
    The normalization chain (unit sphere projection) is the caller's job.
    """
    w, x, y, z = q_unit.T
    g = d_rot
    dw = 2 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    dx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    dy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    dz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
        + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=1)


def unit_quat_grad_to_raw(q_raw: np.ndarray, d_q_unit: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. the normalized quaternion back to the raw one."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    n = np.linalg.norm(q_raw)
    q_hat = q_raw / n
    return (d_q_unit - q_hat * np.dot(q_hat, d_q_unit)) / n


# ---------------------------------------------------------------------------
# pose and intrinsics
# ---------------------------------------------------------------------------


@dataclass
class Pose:
    """World-to-camera rigid transform: unit quaternion + translation (meters)."""

    q: np.ndarray  # (4,) scalar-first
    t: np.ndarray  # (3,)

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def normalized(self) -> "Pose":
        return Pose(quat_normalize(self.q), self.t.copy())

    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = self.t
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation().T + self.t

    def copy(self) -> "Pose":
        return Pose(self.q.copy(), self.t.copy())


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Pose whose matrix is matrix(a) @ matrix(b); quaternion renormalized."""
    q = quat_normalize(quat_mul(quat_normalize(a.q), quat_normalize(b.q)))
    t = a.rotation() @ b.t + a.t
    return Pose(q, t)


def pose_inverse(p: Pose) -> Pose:
    q = quat_conjugate(quat_normalize(p.q))
    t = -(quat_to_rot(q) @ p.t)
    return Pose(q, t)


def constant_velocity_init(t_prev: Pose, t_prev2: Pose) -> Pose:
    """Extrapolated pose ``T_{t-1} @ inv(T_{t-2}) @ T_{t-1}``."""
    return pose_compose(pose_compose(t_prev, pose_inverse(t_prev2)), t_prev)


def project_point(p_world: np.ndarray, pose: Pose, k: Intrinsics) -> tuple[np.ndarray, float]:
    """Pinhole-project a world point; returns (pixel, camera depth)."""
    p_cam = pose.apply(np.asarray(p_world, dtype=np.float64).reshape(3))
    x, y, z = p_cam
    if z <= NEAR_PLANE:
        raise BehindCameraError(f"point at camera depth {z:.4f} m is behind the near plane")
    pix = np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])
    return pix, float(z)


def projection_jacobian(p_cam: np.ndarray, k: Intrinsics) -> np.ndarray:
    """2x3 Jacobian of the pinhole projection at a camera-frame point."""
    x, y, z = np.asarray(p_cam, dtype=np.float64).reshape(3)
    if z <= NEAR_PLANE:
        raise BehindCameraError(f"point at camera depth {z:.4f} m is behind the near plane")
    return np.array(
        [
            [k.fx / z, 0.0, -k.fx * x / (z * z)],
            [0.0, k.fy / z, -k.fy * y / (z * z)],
        ]
    )


# ---------------------------------------------------------------------------
# trajectory text format
# ---------------------------------------------------------------------------

def save_trajectory(path, frame_ids, poses_w2c) -> None:
    """Write `frame_id tx ty tz qx qy qz qw` lines, camera-to-world on disk.

    Internal poses are world-to-camera; each is inverted before writing.
    """
    lines = []
    for fid, pose in zip(frame_ids, poses_w2c):
        c2w = pose_inverse(pose)
        w, x, y, z = c2w.q
        tx, ty, tz = c2w.t
        lines.append(f"{int(fid)} {tx:.9f} {ty:.9f} {tz:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_trajectory(path) -> tuple[list[int], list[Pose]]:
    """Read the on-disk camera-to-world format back into world-to-camera poses."""
    ids: list[int] = []
    poses: list[Pose] = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 8:
                raise ValueError(f"malformed trajectory line: {line!r}")
            fid = int(parts[0])
            tx, ty, tz, qx, qy, qz, qw = map(float, parts[1:])
            c2w = Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
            ids.append(fid)
            poses.append(pose_inverse(c2w.normalized()))
    return ids, poses
