# coding: utf8
"""Synthetic stereo observation of the three needle markers.

The tracker is analytic: markers are projected through the true stereo rig
and perturbed with Gaussian pixel noise, at the tracker rate. Marker identity
is known (0 = tip side, 1 = middle, 2 = tail side).
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from . import camera, geometry, utils
from .camera import Pixel, Side, StereoRig
from .exceptions import CameraError, CollinearPoints, InsufficientMarkers
from .geometry import Circle3, Plane, Point3, RigidTransform

log = utils.get_logger(__name__)

N_MARKERS = 3
TIP, MIDDLE, TAIL = 0, 1, 2
# a 0.5 deg arc sits near 1e-3, a half-circle needle near 0.7
MARKER_SPREAD_RATIO = 1e-2
DETECTION_COLUMNS = ("trial_id", "t", "marker_id", "u_l", "v_l", "u_r", "v_r")


@dataclass(frozen=True, eq=False)
class NeedleState(object):
    """Marker positions of a circular needle.

    Args:
        markers: (3, 3) array of /ws positions (tip side, middle, tail side).
        radius: Needle radius (mm).
        pose: ws_from_needle; the needle lies on the local z = 0 plane,
            centred on the local origin.
    """

    markers: np.ndarray
    radius: float
    pose: RigidTransform

    def __post_init__(self):
        m = np.array(self.markers, dtype=float).reshape(N_MARKERS, 3)
        local = geometry.apply(geometry.invert(self.pose), m)
        if np.any(np.abs(np.hypot(local[:, 0], local[:, 1]) - self.radius) > 1e-6) or np.any(
            np.abs(local[:, 2]) > 1e-6
        ):
            raise ValueError("markers do not lie on the needle circle")
        for i in range(N_MARKERS):
            for j in range(i + 1, N_MARKERS):
                if np.linalg.norm(m[i] - m[j]) < 1e-9:
                    raise ValueError("needle markers must be pairwise distinct")
        m.setflags(write=False)
        object.__setattr__(self, "markers", m)

    @classmethod
    def from_pose(
        cls,
        pose: RigidTransform,
        radius: float = 12.0,
        angles: Sequence[float] = (np.deg2rad(20), np.deg2rad(90), np.deg2rad(160)),
    ) -> "NeedleState":
        local = np.array([[radius * np.cos(a), radius * np.sin(a), 0.0] for a in angles])
        return cls(geometry.apply(pose, local), radius, pose)

    @property
    def middle(self) -> Point3:
        return self.markers[MIDDLE].copy()

    @property
    def circle(self) -> Circle3:
        n = self.pose.rotation[:, 2]
        plane = Plane(n, -float(n @ self.pose.translation))
        return Circle3(self.pose.translation, self.radius, plane)


@dataclass(frozen=True)
class NoiseModel(object):
    """Tracker error model.

    Args:
        pixel_sigma: Gaussian pixel noise per axis (px).
        dropout_prob: Probability that a marker is missed in a tracker tick.
        seed: Seed of the noise generator.
        occlusion: Whether the tool shaft can hide markers.
        tool_radius: Radius of the occluding tool cylinder (mm).
    """

    pixel_sigma: float = 0.0
    dropout_prob: float = 0.0
    seed: int = 0
    occlusion: bool = False
    tool_radius: float = 4.0

    def __post_init__(self):
        if self.pixel_sigma < 0:
            raise ValueError("pixel_sigma must be non-negative")
        if not 0 <= self.dropout_prob < 1:
            raise ValueError("dropout_prob must be in [0, 1)")


@dataclass(frozen=True)
class RateConfig(object):
    camera_hz: float = 25.0
    tracker_hz: float = 8.0
    control_hz: float = 100.0

    def __post_init__(self):
        if min(self.camera_hz, self.tracker_hz, self.control_hz) <= 0:
            raise ValueError("rates must be positive")
        if self.tracker_hz > self.camera_hz:
            raise ValueError("the tracker cannot run faster than the camera")

    @property
    def tracker_period(self) -> float:
        return 1.0 / self.tracker_hz

    @property
    def dt(self) -> float:
        return 1.0 / self.control_hz


@dataclass(frozen=True)
class MarkerDetection(object):
    marker_id: int
    left_px: Optional[Pixel]
    right_px: Optional[Pixel]
    timestamp: float

    @property
    def complete(self) -> bool:
        return self.left_px is not None and self.right_px is not None


@dataclass(frozen=True, eq=False)
class MarkerEstimate(object):
    """Reconstructed markers of one tracker tick (missing ids are omitted)."""

    points: Dict[int, np.ndarray]
    timestamp: float

    def __len__(self):
        return len(self.points)

    @property
    def complete(self) -> bool:
        return len(self.points) == N_MARKERS

    def as_array(self) -> np.ndarray:
        if not self.complete:
            raise InsufficientMarkers(f"only {len(self.points)} of {N_MARKERS} markers reconstructed")
        return np.array([self.points[i] for i in range(N_MARKERS)])


@dataclass(frozen=True, eq=False)
class Occluder(object):
    """A cylinder (segment a-b with a radius) that can hide markers."""

    a: np.ndarray
    b: np.ndarray
    radius: float


def segment_distance(p0, p1, q0, q1) -> float:
    """Shortest distance between the segments p0-p1 and q0-q1."""

    p0, p1, q0, q1 = (np.asarray(v, dtype=float) for v in (p0, p1, q0, q1))
    d1, d2, r = p1 - p0, q1 - q0, p0 - q0
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r

    if a <= 1e-15 and e <= 1e-15:
        return float(np.linalg.norm(r))
    if a <= 1e-15:
        s, t = 0.0, float(np.clip(f / e, 0.0, 1.0))
    else:
        c = d1 @ r
        if e <= 1e-15:
            s, t = float(np.clip(-c / a, 0.0, 1.0)), 0.0
        else:
            b = d1 @ d2
            denom = a * e - b * b
            s = float(np.clip((b * f - c * e) / denom, 0.0, 1.0)) if denom > 1e-15 else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                s, t = float(np.clip(-c / a, 0.0, 1.0)), 0.0
            elif t > 1.0:
                s, t = float(np.clip((b - c) / a, 0.0, 1.0)), 1.0

    return float(np.linalg.norm((p0 + d1 * s) - (q0 + d2 * t)))


class SyntheticTracker(object):
    """Stand-in for the stereo marker tracker.

    Emits one detection list per tracker tick; calls between ticks return an
    empty list. Random numbers are drawn in a fixed order per tick so the
    stream only depends on the seed and the needle trajectory.

    Args:
        rig: The true stereo rig.
        noise: Pixel noise, dropout and occlusion model.
        rates: Camera/tracker/control rates.
    """

    def __init__(self, rig: StereoRig, noise: NoiseModel, rates: RateConfig = RateConfig()):
        self.rig = rig
        self.noise = noise
        self.rates = rates
        self.rng = np.random.default_rng(noise.seed)
        self._last_tick = -1
        self.dropped = 0

    def tick_index(self, t: float) -> int:
        return int(math.floor(t * self.rates.tracker_hz + 1e-9))

    def frame_time(self, tick: int) -> float:
        """Timestamp of the camera frame processed at a tracker tick."""

        t = tick / self.rates.tracker_hz
        return math.floor(t * self.rates.camera_hz + 1e-9) / self.rates.camera_hz

    def observe(
        self,
        needle: Union[NeedleState, Callable[[float], NeedleState]],
        t: float,
        occluders: Sequence[Occluder] = (),
    ) -> List[MarkerDetection]:
        """Detections for the tick reached at time t (empty between ticks).

        Markers that fall behind a camera, outside an image, under the tool or
        into a random dropout are left out of the list.

        Args:
            needle: The needle, or a function giving the needle at a time. A
                function is evaluated at the camera frame the tick processes.
            t: Current time (s).
            occluders: Tool shafts that may hide markers.
        """

        tick = self.tick_index(t)
        if tick <= self._last_tick:
            return []
        self._last_tick = tick
        stamp = self.frame_time(tick)
        if callable(needle):
            needle = needle(stamp)

        sigma = self.noise.pixel_sigma
        noise = self.rng.normal(0.0, 1.0, size=(N_MARKERS, 4)) * sigma
        drops = self.rng.random(N_MARKERS) < self.noise.dropout_prob

        detections = []
        for i, marker in enumerate(needle.markers):
            if drops[i] or not self._visible(marker, occluders):
                self.dropped += 1
                continue

            left = camera.project(self.rig, Side.LEFT, marker)
            right = camera.project(self.rig, Side.RIGHT, marker)
            dl, dr = noise[i, :2], noise[i, 2:]
            detections.append(
                MarkerDetection(
                    i,
                    Pixel(left.u + dl[0], left.v + dl[1]),
                    Pixel(right.u + dr[0], right.v + dr[1]),
                    stamp,
                )
            )

        log.debug(f"Tracker tick {tick} at {stamp:.3f} s: {len(detections)} marker(s).")
        return detections

    def _visible(self, marker: np.ndarray, occluders: Sequence[Occluder]) -> bool:
        for side in Side:
            try:
                px = camera.project(self.rig, side, marker)
            except CameraError:
                return False
            if not self.rig.intrinsics(side).contains(px):
                return False

        if self.noise.occlusion:
            for side in Side:
                center = self.rig.camera_center(side)
                for occ in occluders:
                    if segment_distance(center, marker, occ.a, occ.b) < occ.radius:
                        return False

        return True


def reconstruct_markers(detections: Sequence[MarkerDetection], rig: StereoRig) -> MarkerEstimate:
    """Triangulate each complete detection into /ws.

    Raises:
        DegenerateRays: Propagated from the triangulation of any marker.
    """

    points = {}
    stamp = -np.inf
    for det in detections:
        if not det.complete:
            continue
        points[det.marker_id] = camera.triangulate(rig, det.left_px, det.right_px)
        stamp = max(stamp, det.timestamp)
    return MarkerEstimate(points, float(stamp))


def needle_plane_and_grasp_geometry(markers) -> Tuple[Plane, Circle3, np.ndarray]:
    """Needle plane, circle and the grasp tangent at the middle marker.

    Args:
        markers: Exactly three /ws points (tip side, middle, tail side).

    Returns:
        A three-tuple (plane, circle, tangent): the tangent is the unit circle
        tangent at the middle marker, oriented from the tail side toward the
        tip side.

    Raises:
        InsufficientMarkers: If there are not exactly three markers.
        CollinearPoints: If the markers are (nearly) collinear.
    """

    if isinstance(markers, MarkerEstimate):
        markers = markers.as_array()
    pts = np.asarray(markers, dtype=float)
    if pts.ndim != 2 or len(pts) != N_MARKERS:
        raise InsufficientMarkers(f"need exactly {N_MARKERS} markers, got {len(pts)}")

    if geometry.spread_ratio(pts) < MARKER_SPREAD_RATIO:
        raise CollinearPoints("needle markers are too close to collinear")

    plane = geometry.fit_plane(pts)
    circle = geometry.circle_through_points(*pts)
    tangent = circle.tangent_at(pts[MIDDLE])
    if tangent @ (pts[TIP] - pts[TAIL]) < 0:
        tangent = -tangent

    return plane, circle, tangent


def detections_csv(trial_id: int, stream: Sequence[MarkerDetection]) -> str:
    """Render a detection stream as CSV text."""

    rows = [
        (trial_id, d.timestamp, d.marker_id, d.left_px.u, d.left_px.v, d.right_px.u, d.right_px.v)
        for d in stream
        if d.complete
    ]
    return utils.csv_text(DETECTION_COLUMNS, rows)


class StaticMotion(object):
    """A needle that never moves."""

    def __init__(self, pose: RigidTransform):
        self.pose = pose

    def pose_at(self, t: float) -> RigidTransform:
        return self.pose

    @property
    def end_time(self) -> float:
        return 0.0


class ScriptedMotion(object):
    """Piecewise-linear needle motion through timed keyframes.

    Positions are interpolated linearly and orientations by slerp; before the
    first keyframe and after the last one the needle holds still.

    Args:
        times: Strictly increasing keyframe times (s).
        poses: ws_from_needle at each keyframe.
    """

    def __init__(self, times: Sequence[float], poses: Sequence[RigidTransform]):
        if len(times) != len(poses) or len(times) == 0:
            raise ValueError("need one pose per keyframe time")
        if np.any(np.diff(times) <= 0):
            raise ValueError("keyframe times must be strictly increasing")

        self.times = np.asarray(times, dtype=float)
        self.poses = list(poses)
        self._positions = np.array([p.translation for p in poses])
        if len(poses) > 1:
            self._slerp = Slerp(self.times, Rotation.from_matrix([p.rotation for p in poses]))

    def pose_at(self, t: float) -> RigidTransform:
        if len(self.poses) == 1 or t <= self.times[0]:
            return self.poses[0]
        if t >= self.times[-1]:
            return self.poses[-1]

        position = np.array([np.interp(t, self.times, self._positions[:, k]) for k in range(3)])
        rotation = self._slerp([t]).as_matrix()[0]
        return RigidTransform(geometry.nearest_rotation(rotation), position)

    @property
    def end_time(self) -> float:
        return float(self.times[-1])


class RandomWalkMotion(object):
    """Seeded bounded random walk of the needle position, frozen after ``duration``.

    Args:
        start: Initial ws_from_needle; its orientation is kept.
        step_sigma: Standard deviation of each step (mm).
        bound: Maximum per-axis excursion from the start (mm).
        duration: Time after which the needle stops (s).
        interval: Time between steps (s).
        seed: Generator seed.
    """

    def __init__(
        self,
        start: RigidTransform,
        step_sigma: float = 2.0,
        bound: float = 10.0,
        duration: float = 3.0,
        interval: float = 0.1,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        n = max(1, int(round(duration / interval)))
        offsets = [np.zeros(3)]
        for _ in range(n):
            offsets.append(np.clip(offsets[-1] + rng.normal(0.0, step_sigma, 3), -bound, bound))

        times = np.arange(n + 1) * interval
        poses = [RigidTransform(start.rotation, start.translation + o) for o in offsets]
        self._script = ScriptedMotion(times, poses)

    def pose_at(self, t: float) -> RigidTransform:
        return self._script.pose_at(t)

    @property
    def end_time(self) -> float:
        return self._script.end_time
