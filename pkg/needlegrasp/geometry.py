# coding: utf8
"""Coordinate-frame algebra, plane/circle fitting and point-set registration.

All lengths are millimetres and all angles radians. Points are plain numpy
arrays of shape (3,); the frame-carrying types below are immutable.

Frames follow the "^aT_b maps points from /b into /a" convention, so
``apply(rc_from_ws, p_ws)`` gives the same point expressed in /rc.
"""

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import CollinearPoints, DegenerateConfiguration

Point3 = np.ndarray

ORTHONORMAL_TOL = 1e-9
COLLINEAR_RATIO = 1e-9
# |d| below this is a tie for the plane sign convention
PLANE_TIE_TOL = 1e-12


def as_point(p: Iterable[float]) -> Point3:
    """Convert anything array-like into a finite float (3,) vector."""

    arr = np.array(p, dtype=float).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"point has non-finite components: {arr}")
    return arr


def as_points(points: Iterable[Iterable[float]]) -> np.ndarray:
    """Convert a sequence of points into an (n, 3) float array."""

    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) point array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point set has non-finite components")
    return arr


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) (closest rotation in Frobenius norm)."""

    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle (rad) of the relative rotation between two rotation matrices."""

    cos = (np.trace(a.T @ b) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class RigidTransform(object):
    """A proper rigid transform p' = R p + t.

    Args:
        rotation: 3x3 orthonormal matrix with determinant +1.
        translation: (3,) translation in mm.

    Raises:
        ValueError: If the rotation is not a proper rotation within 1e-9.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = as_point(self.translation)

        if not np.allclose(r.T @ r, np.eye(3), rtol=0.0, atol=ORTHONORMAL_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation has determinant != +1")

        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t: Iterable[float]) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4) or not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("expected a homogeneous 4x4 matrix")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(
        cls, quat: Sequence[float], translation: Iterable[float]
    ) -> "RigidTransform":
        """Build from a scalar-last (x, y, z, w) quaternion."""

        return cls(Rotation.from_quat(quat).as_matrix(), translation)

    @classmethod
    def from_euler(
        cls, position: Iterable[float], angles: Sequence[float], degrees: bool = True
    ) -> "RigidTransform":
        """Build from a position and extrinsic XYZ Euler angles."""

        return cls(Rotation.from_euler("xyz", angles, degrees=degrees).as_matrix(), position)

    def as_quaternion(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_quat()

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, p: Iterable[float]) -> Point3:
        return apply(self, p)

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Compose two transforms so that compose(a, b) applies b first, then a."""

    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def apply(t: RigidTransform, p: Iterable[float]) -> Point3:
    """Map a point (or an (n, 3) array of points) through a transform."""

    arr = np.asarray(p, dtype=float)
    if arr.ndim == 2:
        return arr @ t.rotation.T + t.translation
    return t.rotation @ as_point(arr) + t.translation


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


@dataclass(frozen=True, eq=False)
class Plane(object):
    """The plane {p : n.p + d = 0}.

    Args:
        normal: Unit normal n.
        offset: d in mm.
    """

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = as_point(self.normal)
        if abs(np.linalg.norm(n) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("plane normal must be a unit vector")
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    def signed_distance(self, p: Iterable[float]) -> float:
        return float(self.normal @ as_point(p) + self.offset)

    def project(self, p: Iterable[float]) -> Point3:
        """Orthogonal projection of a point onto the plane."""

        p = as_point(p)
        return p - self.signed_distance(p) * self.normal


@dataclass(frozen=True, eq=False)
class Circle3(object):
    center: np.ndarray
    radius: float
    plane: Plane

    def __post_init__(self):
        c = as_point(self.center)
        if not self.radius > 0.0:
            raise ValueError("circle radius must be positive")
        if abs(self.plane.signed_distance(c)) > 1e-6:
            raise ValueError("circle center does not lie on its plane")
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))

    def tangent_at(self, p: Iterable[float]) -> np.ndarray:
        """Unit tangent at (the projection of) p, oriented by the plane normal."""

        t = np.cross(self.plane.normal, as_point(p) - self.center)
        return t / np.linalg.norm(t)


def spread_ratio(points: np.ndarray) -> float:
    """Ratio of the 2nd to the 1st singular value of the centered points."""

    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[0] == 0.0:
        return 0.0
    return float(s[1] / s[0])


def fit_plane(points: Iterable[Iterable[float]]) -> Plane:
    """Fit a plane by total least squares.

    Args:
        points: n >= 3 points.

    Returns:
        The plane minimising the sum of squared orthogonal distances, with the
        normal oriented so that d >= 0 (ties: lexicographically largest normal).

    Raises:
        CollinearPoints: If fewer than 3 points are given or they are
            (numerically) collinear.
    """

    pts = as_points(points)
    if len(pts) < 3:
        raise CollinearPoints(f"need at least 3 points to fit a plane, got {len(pts)}")

    centroid = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - centroid)
    if s[0] == 0.0 or s[1] / s[0] < COLLINEAR_RATIO:
        raise CollinearPoints("points are collinear, the plane is undefined")

    normal = vt[2] / np.linalg.norm(vt[2])
    offset = -float(normal @ centroid)

    if abs(offset) < PLANE_TIE_TOL:
        offset = 0.0
        # round-off in the zero components must not decide the sign
        leading = normal[np.abs(normal) > PLANE_TIE_TOL][0]
        if leading < 0.0:
            normal = -normal
    elif offset < 0.0:
        normal, offset = -normal, -offset

    return Plane(normal, offset)


def point_plane_distance(plane: Plane, p: Iterable[float]) -> float:
    return abs(float(plane.normal @ as_point(p)) + plane.offset) / float(
        np.linalg.norm(plane.normal)
    )


def mean_scan_distance(points: Iterable[Iterable[float]]) -> float:
    """Mean orthogonal distance of a point scan to its own best-fit plane (mm)."""

    pts = as_points(points)
    plane = fit_plane(pts)
    return float(np.mean(np.abs(pts @ plane.normal + plane.offset)))


def absolute_orientation(
    src: Iterable[Iterable[float]], dst: Iterable[Iterable[float]]
) -> RigidTransform:
    """Closed-form least-squares rigid alignment of two point sets.

    Uses the SVD of the cross-covariance matrix with a reflection correction
    (no scale is estimated).

    Args:
        src: Points in the source frame.
        dst: The corresponding points in the destination frame.

    Returns:
        T minimising sum ||dst_i - T(src_i)||^2, i.e. dst_from_src.

    Raises:
        DegenerateConfiguration: If the sets differ in length, have fewer than 3
            points or the cross-covariance has rank < 2.
    """

    a = as_points(src)
    b = as_points(dst)
    if a.shape != b.shape:
        raise DegenerateConfiguration(
            f"point sets differ in size: {len(a)} vs {len(b)}"
        )
    if len(a) < 3:
        raise DegenerateConfiguration(f"need at least 3 correspondences, got {len(a)}")

    ca, cb = a.mean(axis=0), b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, s, vt = np.linalg.svd(h)
    if s[0] == 0.0 or s[1] / s[0] < COLLINEAR_RATIO:
        raise DegenerateConfiguration("cross-covariance has rank < 2")

    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    # strip accumulated round-off before the orthonormality check
    r = nearest_rotation(r)
    return RigidTransform(r, cb - r @ ca)


def registration_residuals(
    t: RigidTransform, src: Iterable[Iterable[float]], dst: Iterable[Iterable[float]]
) -> np.ndarray:
    """Per-point Euclidean residuals ||dst_i - T(src_i)|| (mm)."""

    return np.linalg.norm(as_points(dst) - apply(t, as_points(src)), axis=1)


def circle_through_points(p1, p2, p3) -> Circle3:
    """The unique circle through three non-collinear points.

    Raises:
        CollinearPoints: If the points are collinear.
    """

    plane = fit_plane([p1, p2, p3])
    p1, p2, p3 = as_point(p1), as_point(p2), as_point(p3)

    a = p1 - p3
    b = p2 - p3
    axb = np.cross(a, b)
    denom = 2.0 * (axb @ axb)
    center = p3 + np.cross((a @ a) * b - (b @ b) * a, axb) / denom
    # the construction is exact; re-project to absorb round-off
    center = plane.project(center)
    radius = float(np.mean([np.linalg.norm(p - center) for p in (p1, p2, p3)]))

    return Circle3(center, radius, plane)


def point_circle_distance(circle: Circle3, p: Iterable[float]) -> float:
    """Euclidean distance from a point to the circle curve (mm)."""

    p = as_point(p)
    height = circle.plane.signed_distance(p)
    in_plane = p - height * circle.plane.normal - circle.center
    return float(np.hypot(height, np.linalg.norm(in_plane) - circle.radius))
