"""Rigid poses and box helpers shared by the simulator and the fusion path."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# box layout used everywhere: x, y, z, w, l, h, theta, vx, vy
BOX_DIM = 9
X, Y, Z, W, L, H, THETA, VX, VY = range(BOX_DIM)


def normalize_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = np.mod(a + np.pi, 2 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2 * np.pi, out)
    return out if out.ndim else float(out)


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


@dataclass
class Pose:
    """Maps points from a source frame into a target frame: p' = p R^T + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_xy_yaw(cls, x: float, y: float, yaw: float, z: float = 0.0) -> "Pose":
        return cls(yaw_matrix(yaw), np.array([x, y, z]))

    def validate(self, tol: float = 1e-6):
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=tol):
            raise ValueError("pose rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > tol:
            raise ValueError("pose rotation has det != +1")
        return self

    @property
    def yaw(self) -> float:
        return math.atan2(self.R[1, 0], self.R[0, 0])

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.t @ self.R)

    def compose(self, other: "Pose") -> "Pose":
        """self after other: x -> self(other(x))."""
        return Pose(self.R @ other.R, other.t @ self.R.T + self.t)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.R.T


def transform_boxes(boxes: np.ndarray, pose: Pose) -> np.ndarray:
    """Move (N, 9) boxes into the target frame of ``pose`` (yaw-only heading update)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    if len(boxes) == 0:
        return out.reshape(0, BOX_DIM)
    out[:, :3] = pose.apply(boxes[:, :3])
    vel = np.zeros((len(boxes), 3))
    vel[:, :2] = boxes[:, VX:VY + 1]
    out[:, VX:VY + 1] = pose.rotate(vel)[:, :2]
    out[:, THETA] = normalize_angle(boxes[:, THETA] + pose.yaw)
    return out


def corners_bev(boxes: np.ndarray) -> np.ndarray:
    """(N, 4, 2) footprint corners in the boxes' frame."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, BOX_DIM)
    sx = np.array([1, 1, -1, -1]) * 0.5
    sy = np.array([1, -1, -1, 1]) * 0.5
    lx = boxes[:, L, None] * sx
    wy = boxes[:, W, None] * sy
    c, s = np.cos(boxes[:, THETA])[:, None], np.sin(boxes[:, THETA])[:, None]
    x = boxes[:, X, None] + lx * c - wy * s
    y = boxes[:, Y, None] + lx * s + wy * c
    return np.stack([x, y], axis=-1)
