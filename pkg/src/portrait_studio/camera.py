"""Pinhole camera shared by the synthetic world and the volumetric generator.

Conventions (used everywhere in this package):
  * world axes: x right, y up, z toward the viewer at a frontal pose;
  * the camera orbits the origin at a fixed radius, parameterized by yaw
    (about +y) and pitch (about +x), optionally rolled about its forward axis;
  * image rows run top to bottom, pixel centers at half-integer offsets;
  * depth is Euclidean distance along the (unit-norm) ray, so a point is
    recovered as ``origin + depth * direction``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

CAMERA_RADIUS = 2.7
FOV_DEG = 30.0
NEAR = CAMERA_RADIUS - 1.2
FAR = CAMERA_RADIUS + 1.2
SUPPORTED_RES = (32, 64, 128)

YAW_LIMIT = np.pi / 2
PITCH_LIMIT = np.pi / 3


@dataclass(frozen=True)
class CameraPose:
    """Orbital camera pose at fixed radius and field of view."""

    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    radius: float = CAMERA_RADIUS

    def __post_init__(self):
        if not (-YAW_LIMIT <= self.yaw <= YAW_LIMIT):
            raise InvalidInputError(f"yaw {self.yaw} outside [-pi/2, pi/2]")
        if not (-PITCH_LIMIT <= self.pitch <= PITCH_LIMIT):
            raise InvalidInputError(f"pitch {self.pitch} outside [-pi/3, pi/3]")

    def shifted(self, dyaw: float = 0.0, dpitch: float = 0.0) -> "CameraPose":
        return CameraPose(self.yaw + dyaw, self.pitch + dpitch, self.roll, self.radius)


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def camera_frame(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Return (origin, rotation) with rotation columns = camera right/up/backward."""
    rot = rot_y(pose.yaw) @ rot_x(-pose.pitch) @ rot_z(pose.roll)
    origin = rot @ np.array([0.0, 0.0, pose.radius])
    return origin, rot


def check_resolution(res: int) -> None:
    if res not in SUPPORTED_RES:
        raise InvalidInputError(f"resolution {res} not in {SUPPORTED_RES}")


def ray_grid(pose: CameraPose, res: int, supersample: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Rays for every pixel (row-major), optionally subdivided per pixel.

    Returns (origin (3,), directions (res*ss, res*ss, 3)) with unit directions.
    """
    check_resolution(res)
    n = res * supersample
    origin, rot = camera_frame(pose)
    tan_half = np.tan(np.deg2rad(FOV_DEG) / 2.0)
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    xs = coords[None, :] * tan_half
    ys = -coords[:, None] * tan_half  # row 0 is the top of the image
    dirs = np.stack([
        np.broadcast_to(xs, (n, n)),
        np.broadcast_to(ys, (n, n)),
        np.full((n, n), -1.0),
    ], axis=-1)
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    dirs = dirs @ rot.T
    return origin, dirs


def project_points(points: np.ndarray, pose: CameraPose, res: int) -> tuple[np.ndarray, np.ndarray]:
    """Project world points to pixel coordinates.

    Returns (pix (N,2) as (row, col) floats, in_front (N,) bool). Points behind
    the camera report in_front=False and undefined pixel values.
    """
    origin, rot = camera_frame(pose)
    pc = (np.atleast_2d(points) - origin) @ rot
    z = -pc[:, 2]
    in_front = z > 1e-9
    tan_half = np.tan(np.deg2rad(FOV_DEG) / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        xn = pc[:, 0] / (z * tan_half)
        yn = pc[:, 1] / (z * tan_half)
    col = (xn + 1.0) * 0.5 * res - 0.5
    row = (1.0 - yn) * 0.5 * res - 0.5
    return np.stack([row, col], axis=1), in_front


def backproject(depth: np.ndarray, pose: CameraPose, res: int) -> np.ndarray:
    """World points for every pixel of a depth map (depth = distance along ray)."""
    if depth.shape != (res, res):
        raise InvalidInputError(f"depth shape {depth.shape} != ({res},{res})")
    origin, dirs = ray_grid(pose, res)
    return origin[None, None, :] + depth[..., None] * dirs
