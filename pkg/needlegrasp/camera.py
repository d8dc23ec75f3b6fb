# coding: utf8
"""Pinhole stereo model.

The left camera defines the /ee frame. The calibration chessboard defines the
workspace frame /ws: corners lie on its z = 0 plane, spaced by the square size.
No lens distortion is modelled.
"""

import enum
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np

from . import geometry, utils
from .exceptions import (
    BehindCamera,
    CameraError,
    DegenerateRays,
    IllConditioned,
    InsufficientCorners,
    OutOfImage,
)
from .geometry import Point3, RigidTransform

log = utils.get_logger(__name__)

Z_MIN = 1.0
GUARD_BAND = 0.2
MIN_RAY_ANGLE = np.deg2rad(0.01)
MAX_HOMOGRAPHY_COND = 1e12


class Side(enum.Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class Pixel(object):
    u: float
    v: float

    def __post_init__(self):
        if not (np.isfinite(self.u) and np.isfinite(self.v)):
            raise ValueError(f"pixel is not finite: ({self.u}, {self.v})")

    @property
    def array(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass(frozen=True)
class CameraIntrinsics(object):
    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.image_width and 0 < self.cy < self.image_height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def normalize(self, px: Pixel) -> np.ndarray:
        """Pixel to normalised image coordinates (x, y) on the z = 1 plane."""

        return np.array([(px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy])

    def contains(self, px: Pixel, guard: float = 0.0) -> bool:
        du, dv = guard * self.image_width, guard * self.image_height
        return (-du <= px.u <= self.image_width + du) and (
            -dv <= px.v <= self.image_height + dv
        )


@dataclass(frozen=True, eq=False)
class StereoRig(object):
    """Two pinhole cameras observing the workspace.

    Args:
        left: Left camera intrinsics.
        right: Right camera intrinsics.
        right_from_left: Maps left-camera (/ee) coordinates into the right camera.
        ee_from_ws: ^eeT_ws, maps workspace points into the left camera.

    Raises:
        ValueError: If the baseline is zero.
    """

    left: CameraIntrinsics
    right: CameraIntrinsics
    right_from_left: RigidTransform
    ee_from_ws: RigidTransform

    def __post_init__(self):
        if self.baseline <= 0.0:
            raise ValueError("stereo baseline must be positive")

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.right_from_left.translation))

    @property
    def ws_from_ee(self) -> RigidTransform:
        return geometry.invert(self.ee_from_ws)

    def intrinsics(self, side: Side) -> CameraIntrinsics:
        return self.left if side is Side.LEFT else self.right

    def camera_from_ws(self, side: Side) -> RigidTransform:
        if side is Side.LEFT:
            return self.ee_from_ws
        return geometry.compose(self.right_from_left, self.ee_from_ws)

    def camera_center(self, side: Side) -> Point3:
        """Optical centre of a camera in /ws."""

        return geometry.invert(self.camera_from_ws(side)).translation.copy()

    def with_extrinsics(self, ee_from_ws: RigidTransform) -> "StereoRig":
        return replace(self, ee_from_ws=ee_from_ws)

    @classmethod
    def parallel(
        cls,
        intrinsics: CameraIntrinsics,
        baseline: float,
        ee_from_ws: RigidTransform,
    ) -> "StereoRig":
        """A rectified-style rig: identical cameras, right camera shifted along +x."""

        return cls(
            intrinsics,
            intrinsics,
            RigidTransform.from_translation([-baseline, 0.0, 0.0]),
            ee_from_ws,
        )


@dataclass(frozen=True)
class Chessboard(object):
    rows: int
    cols: int
    square_size: float

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("a chessboard needs at least 2x2 corners")
        if self.square_size <= 0:
            raise ValueError("square size must be positive")

    @property
    def n_corners(self) -> int:
        return self.rows * self.cols

    def object_points(self) -> np.ndarray:
        """Corner positions in /ws (row-major, z = 0)."""

        r, c = np.mgrid[0 : self.rows, 0 : self.cols]
        pts = np.zeros((self.n_corners, 3))
        pts[:, 0] = c.ravel() * self.square_size
        pts[:, 1] = r.ravel() * self.square_size
        return pts

    @property
    def center(self) -> Point3:
        return np.array(
            [
                (self.cols - 1) * self.square_size / 2.0,
                (self.rows - 1) * self.square_size / 2.0,
                0.0,
            ]
        )


@dataclass(frozen=True, eq=False)
class PoseEstimate(object):
    """Result of an extrinsic estimation.

    Attributes:
        ee_from_ws: The estimated camera pose (^eeT_ws).
        reprojection_rms: RMS reprojection error of the board corners (px).
    """

    ee_from_ws: RigidTransform
    reprojection_rms: float


def _pinhole(k: CameraIntrinsics, p_cam: np.ndarray) -> Pixel:
    if p_cam[2] <= Z_MIN:
        raise BehindCamera(f"point is behind the camera (z = {p_cam[2]:.3f} mm)")
    return Pixel(k.fx * p_cam[0] / p_cam[2] + k.cx, k.fy * p_cam[1] / p_cam[2] + k.cy)


def project(rig: StereoRig, side: Side, p_ws) -> Pixel:
    """Project a workspace point into one camera.

    Raises:
        BehindCamera: If the camera-frame depth is not above Z_MIN.
    """

    p_cam = geometry.apply(rig.camera_from_ws(side), p_ws)
    return _pinhole(rig.intrinsics(side), p_cam)


def reprojection_error(rig: StereoRig, side: Side, p_ws, observed: Pixel) -> float:
    px = project(rig, side, p_ws)
    return float(np.hypot(px.u - observed.u, px.v - observed.v))


def ray_angle(rig: StereoRig, left_px: Pixel, right_px: Pixel) -> float:
    """Angle (rad) between the two back-projected rays, in the left frame."""

    d_left = np.append(rig.left.normalize(left_px), 1.0)
    d_right = rig.right_from_left.rotation.T @ np.append(rig.right.normalize(right_px), 1.0)
    cos = d_left @ d_right / (np.linalg.norm(d_left) * np.linalg.norm(d_right))
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def triangulate_camera(rig: StereoRig, left_px: Pixel, right_px: Pixel) -> Point3:
    """Linear (DLT) triangulation, returning the point in the left camera frame.

    The homogeneous system is built in normalised image coordinates and the
    unknown is scaled by the baseline so every column is of order one.

    Raises:
        OutOfImage: If a pixel lies outside the image plus the guard band.
        DegenerateRays: If the rays are (nearly) parallel.
    """

    for side, px in ((Side.LEFT, left_px), (Side.RIGHT, right_px)):
        if not rig.intrinsics(side).contains(px, guard=GUARD_BAND):
            raise OutOfImage(f"{side.value} pixel ({px.u:.1f}, {px.v:.1f}) is outside the image")

    angle = ray_angle(rig, left_px, right_px)
    if angle < MIN_RAY_ANGLE:
        raise DegenerateRays(f"rays are nearly parallel ({np.rad2deg(angle):.4f} deg)")

    scale = rig.baseline
    xl, yl = rig.left.normalize(left_px)
    xr, yr = rig.right.normalize(right_px)

    p_left = np.hstack([np.eye(3), np.zeros((3, 1))])
    p_right = np.hstack(
        [rig.right_from_left.rotation, rig.right_from_left.translation.reshape(3, 1) / scale]
    )

    a = np.vstack(
        [
            xl * p_left[2] - p_left[0],
            yl * p_left[2] - p_left[1],
            xr * p_right[2] - p_right[0],
            yr * p_right[2] - p_right[1],
        ]
    )
    _, _, vt = np.linalg.svd(a)
    x = vt[-1]
    if abs(x[3]) < 1e-15:
        raise DegenerateRays("triangulated point is at infinity")

    return x[:3] / x[3] * scale


def triangulate(rig: StereoRig, left_px: Pixel, right_px: Pixel) -> Point3:
    """Triangulate a stereo pixel pair into a workspace (/ws) point."""

    return geometry.apply(rig.ws_from_ee, triangulate_camera(rig, left_px, right_px))


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""

    c = pts.mean(axis=0)
    dist = np.mean(np.linalg.norm(pts - c, axis=1))
    s = np.sqrt(2.0) / dist if dist > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalised DLT homography mapping src (n, 2) onto dst (n, 2).

    Raises:
        InsufficientCorners: With fewer than 4 correspondences.
        IllConditioned: If the homography condition number exceeds 1e12.
    """

    if len(src) < 4:
        raise InsufficientCorners(f"need at least 4 correspondences, got {len(src)}")

    t_src = _normalizing_transform(src)
    t_dst = _normalizing_transform(dst)
    s = (np.c_[src, np.ones(len(src))] @ t_src.T)[:, :2]
    d = (np.c_[dst, np.ones(len(dst))] @ t_dst.T)[:, :2]

    rows = []
    for (x, y), (u, v) in zip(s, d):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])

    _, _, vt = np.linalg.svd(np.asarray(rows))
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_norm @ t_src

    cond = np.linalg.cond(h)
    if not np.isfinite(cond) or cond > MAX_HOMOGRAPHY_COND:
        raise IllConditioned(f"homography condition number {cond:.3g} is too large")

    return h / h[2, 2] if abs(h[2, 2]) > 1e-15 else h


def estimate_extrinsics(
    board: Chessboard, corners_px: Sequence[Pixel], intrinsics: CameraIntrinsics
) -> PoseEstimate:
    """Estimate ^eeT_ws from one view of the calibration chessboard.

    Args:
        board: The board geometry; it defines /ws.
        corners_px: Detected corners, in Chessboard.object_points() order.
        intrinsics: Intrinsics of the camera that saw the board.

    Returns:
        The pose (homography decomposed with the intrinsics and projected onto
        SO(3)) and the RMS reprojection error of the corners.

    Raises:
        InsufficientCorners: If fewer than 4 corners are given.
        CameraError: If the corner count does not match the board.
        IllConditioned: If the board-to-image homography is ill conditioned.
    """

    if len(corners_px) < 4:
        raise InsufficientCorners(f"need at least 4 corners, got {len(corners_px)}")
    if len(corners_px) != board.n_corners:
        raise CameraError(
            f"expected {board.n_corners} corners for a {board.rows}x{board.cols} board, "
            f"got {len(corners_px)}"
        )

    obj = board.object_points()
    img = np.array([[px.u, px.v] for px in corners_px])
    h = homography_dlt(obj[:, :2], img)

    m = np.linalg.inv(intrinsics.matrix) @ h
    lam = 2.0 / (np.linalg.norm(m[:, 0]) + np.linalg.norm(m[:, 1]))
    if (lam * m[:, 2])[2] < 0:
        # the board has to be in front of the camera
        lam = -lam

    r1, r2, t = lam * m[:, 0], lam * m[:, 1], lam * m[:, 2]
    r = geometry.nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    pose = RigidTransform(r, t)

    cam = geometry.apply(pose, obj)
    residuals = []
    for p_cam, observed in zip(cam, corners_px):
        px = _pinhole(intrinsics, p_cam)
        residuals.append((px.u - observed.u) ** 2 + (px.v - observed.v) ** 2)
    rms = float(np.sqrt(np.mean(residuals)))

    log.debug(f"Estimated extrinsics from {len(corners_px)} corners, rms {rms:.4f} px.")
    return PoseEstimate(pose, rms)


def project_board(
    rig: StereoRig, side: Side, board: Chessboard
) -> List[Pixel]:
    """Noise-free corner detections of the board in one camera."""

    return [project(rig, side, p) for p in board.object_points()]


def add_pixel_noise(
    pixels: Sequence[Pixel], sigma: float, rng: np.random.Generator
) -> List[Pixel]:
    noise = rng.normal(0.0, sigma, size=(len(pixels), 2)) if sigma > 0 else np.zeros((len(pixels), 2))
    return [Pixel(px.u + du, px.v + dv) for px, (du, dv) in zip(pixels, noise)]


def depth_sigma(rig: StereoRig, depth: float, pixel_sigma: float) -> Tuple[float, float]:
    """First-order (lateral, depth) triangulation noise for a parallel rig (mm).

    Both images carry i.i.d. pixel noise, so the disparity noise is sqrt(2)
    times the per-image sigma.
    """

    f = rig.left.fx
    lateral = depth * pixel_sigma / f
    axial = depth ** 2 * np.sqrt(2.0) * pixel_sigma / (f * rig.baseline)
    return float(lateral), float(axial)
