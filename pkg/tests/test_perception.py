import numpy as np
import pytest

from needlegrasp import camera, perception
from needlegrasp.camera import Side
from needlegrasp.exceptions import CollinearPoints, InsufficientMarkers
from needlegrasp.geometry import RigidTransform
from needlegrasp.perception import (
    MarkerDetection,
    NeedleState,
    NoiseModel,
    Occluder,
    RateConfig,
    SyntheticTracker,
)

SQRT_HALF = np.sqrt(0.5)


@pytest.fixture
def needle():
    return NeedleState.from_pose(RigidTransform.from_translation([15.0, 10.0, 10.0]))


def unit_arc(*degrees):
    rad = np.deg2rad(degrees)
    return np.column_stack([np.cos(rad), np.sin(rad), np.zeros(len(rad))])


class TestNeedleState:
    def test_marker_layout(self, needle):
        assert needle.markers.shape == (3, 3)
        assert np.allclose(needle.middle, [15.0, 22.0, 10.0])
        for m in needle.markers:
            assert np.linalg.norm(m - [15.0, 10.0, 10.0]) == pytest.approx(12.0)

    def test_rejects_markers_off_the_circle(self):
        with pytest.raises(ValueError):
            NeedleState(np.eye(3), 12.0, RigidTransform.identity())


class TestTracker:
    def test_noiseless_detections_are_projections(self, rig, needle):
        tracker = SyntheticTracker(rig, NoiseModel())
        detections = tracker.observe(needle, 0.0)

        assert [d.marker_id for d in detections] == [0, 1, 2]
        for d in detections:
            left = camera.project(rig, Side.LEFT, needle.markers[d.marker_id])
            right = camera.project(rig, Side.RIGHT, needle.markers[d.marker_id])
            assert (d.left_px.u, d.left_px.v) == pytest.approx((left.u, left.v))
            assert (d.right_px.u, d.right_px.v) == pytest.approx((right.u, right.v))

    def test_marker_behind_camera_is_dropped(self, rig):
        # a large needle standing upright: the middle marker rises past the
        # camera plane while the tip-side marker stays in view
        pose = RigidTransform.from_euler([-17.6, 15.0, 61.0], [90.0, 0.0, 0.0])
        tall = NeedleState.from_pose(pose, radius=40.0)
        tracker = SyntheticTracker(rig, NoiseModel())

        ids = [d.marker_id for d in tracker.observe(tall, 0.0)]
        assert perception.MIDDLE not in ids
        assert perception.TIP in ids

    def test_occluded_marker_is_dropped(self, rig, needle):
        tracker = SyntheticTracker(rig, NoiseModel(occlusion=True, tool_radius=4.0))
        # a horizontal bar across the line of sight of the middle marker
        sight = (rig.camera_center(Side.LEFT) + needle.middle) / 2.0
        bar = Occluder(sight - [10.0, 0.0, 0.0], sight + [10.0, 0.0, 0.0], 4.0)

        ids = [d.marker_id for d in tracker.observe(needle, 0.0, occluders=[bar])]
        assert perception.MIDDLE not in ids

    def test_ticks_only_once(self, rig, needle):
        tracker = SyntheticTracker(rig, NoiseModel())
        assert len(tracker.observe(needle, 0.0)) == 3
        assert tracker.observe(needle, 0.05) == []
        assert len(tracker.observe(needle, 0.125)) == 3

    def test_stamp_is_the_last_camera_frame(self, rig, needle):
        tracker = SyntheticTracker(rig, NoiseModel())
        tracker.observe(needle, 0.0)
        detections = tracker.observe(needle, 0.125)
        assert detections[0].timestamp == pytest.approx(0.12)

    def test_moving_needle_is_sampled_at_the_frame_time(self, rig):
        def needle_at(s):
            return NeedleState.from_pose(RigidTransform.from_translation([15.0 + 50.0 * s, 10.0, 10.0]))

        tracker = SyntheticTracker(rig, NoiseModel())
        tracker.observe(needle_at, 0.0)
        detections = tracker.observe(needle_at, 0.13)

        estimate = perception.reconstruct_markers(detections, rig)
        assert estimate.timestamp == pytest.approx(0.12)
        assert np.allclose(estimate.as_array(), needle_at(0.12).markers, atol=1e-6)

    def test_tracker_rate(self, rig, needle):
        tracker = SyntheticTracker(rig, NoiseModel())
        ticks = sum(1 for k in range(1001) if tracker.observe(needle, k * 0.01))
        assert abs(ticks - 81) <= 1

    def test_same_seed_same_stream(self, rig, needle):
        noise = NoiseModel(pixel_sigma=0.5, dropout_prob=0.1, seed=7)
        a = SyntheticTracker(rig, noise)
        b = SyntheticTracker(rig, noise)
        for k in range(40):
            t = k / 8.0
            assert a.observe(needle, t) == b.observe(needle, t)

    @pytest.mark.slow
    def test_pixel_noise_statistics(self, rig, needle):
        sigma = 0.5
        tracker = SyntheticTracker(rig, NoiseModel(pixel_sigma=sigma, seed=3))
        exact = {
            i: np.concatenate(
                [camera.project(rig, side, m).array for side in (Side.LEFT, Side.RIGHT)]
            )
            for i, m in enumerate(needle.markers)
        }

        errors = []
        for k in range(10000):
            for d in tracker.observe(needle, k / 8.0):
                observed = np.concatenate([d.left_px.array, d.right_px.array])
                errors.append(observed - exact[d.marker_id])

        assert np.std(errors) == pytest.approx(sigma, rel=0.03)
        assert abs(np.mean(errors)) < 0.01

    def test_dropout(self, rig, needle):
        tracker = SyntheticTracker(rig, NoiseModel(dropout_prob=0.5, seed=11))
        seen = sum(len(tracker.observe(needle, k / 8.0)) for k in range(400))
        assert 0.4 * 1200 < seen < 0.6 * 1200
        assert tracker.dropped == 1200 - seen

    def test_rates_validation(self):
        with pytest.raises(ValueError):
            RateConfig(camera_hz=5.0, tracker_hz=8.0)
        assert RateConfig().dt == pytest.approx(0.01)


class TestReconstruction:
    def test_noiseless_round_trip(self, rig, needle):
        tracker = SyntheticTracker(rig, NoiseModel())
        estimate = perception.reconstruct_markers(tracker.observe(needle, 0.0), rig)
        assert estimate.complete
        assert np.allclose(estimate.as_array(), needle.markers, atol=1e-6)

    def test_incomplete_pairs_are_skipped(self, rig, needle):
        tracker = SyntheticTracker(rig, NoiseModel())
        detections = tracker.observe(needle, 0.0)
        detections[0] = MarkerDetection(0, detections[0].left_px, None, detections[0].timestamp)

        estimate = perception.reconstruct_markers(detections, rig)
        assert len(estimate) == 2
        with pytest.raises(InsufficientMarkers):
            perception.needle_plane_and_grasp_geometry(estimate)

    def test_detections_csv(self, rig, needle):
        tracker = SyntheticTracker(rig, NoiseModel())
        text = perception.detections_csv(4, tracker.observe(needle, 0.0))
        lines = text.splitlines()
        assert lines[0].startswith("# needlegrasp csv schema")
        assert lines[1] == ",".join(perception.DETECTION_COLUMNS)
        assert len(lines) == 5
        assert lines[2].startswith("4,")


class TestGraspGeometry:
    def test_unit_circle_tangent(self):
        plane, circle, tangent = perception.needle_plane_and_grasp_geometry(unit_arc(0.0, 45.0, 90.0))
        assert np.allclose(np.abs(plane.normal), [0.0, 0.0, 1.0])
        assert circle.radius == pytest.approx(1.0)
        assert np.allclose(tangent, [SQRT_HALF, -SQRT_HALF, 0.0])

    def test_tangent_follows_marker_order(self):
        _, _, forward = perception.needle_plane_and_grasp_geometry(unit_arc(0.0, 45.0, 90.0))
        _, _, backward = perception.needle_plane_and_grasp_geometry(unit_arc(90.0, 45.0, 0.0))
        assert np.allclose(forward, -backward)

    def test_markers_lie_on_the_plane(self, needle):
        plane, circle, _ = perception.needle_plane_and_grasp_geometry(needle.markers)
        for m in needle.markers:
            assert abs(plane.signed_distance(m)) < 1e-12
        assert np.allclose(circle.center, [15.0, 10.0, 10.0])
        assert circle.radius == pytest.approx(12.0)

    def test_tiny_arc_is_collinear(self):
        with pytest.raises(CollinearPoints):
            perception.needle_plane_and_grasp_geometry(12.0 * unit_arc(0.0, 0.25, 0.5))

    def test_wrong_marker_count(self):
        with pytest.raises(InsufficientMarkers):
            perception.needle_plane_and_grasp_geometry(unit_arc(0.0, 90.0))


class TestMotion:
    def test_scripted_interpolation(self):
        start = RigidTransform.from_translation([0.0, 0.0, 10.0])
        end = RigidTransform.from_euler([10.0, 0.0, 10.0], [0.0, 0.0, 90.0])
        motion = perception.ScriptedMotion([0.0, 1.0], [start, end])

        mid = motion.pose_at(0.5)
        assert np.allclose(mid.translation, [5.0, 0.0, 10.0])
        assert np.allclose(mid.rotation, RigidTransform.from_euler([0, 0, 0], [0, 0, 45]).rotation)
        assert motion.pose_at(-1.0) is start
        assert motion.pose_at(5.0) is end
        assert motion.end_time == 1.0

    def test_scripted_rejects_unordered_times(self):
        pose = RigidTransform.identity()
        with pytest.raises(ValueError):
            perception.ScriptedMotion([1.0, 1.0], [pose, pose])

    def test_random_walk_is_bounded_and_seeded(self):
        start = RigidTransform.from_translation([15.0, 10.0, 10.0])
        a = perception.RandomWalkMotion(start, step_sigma=3.0, bound=5.0, seed=9)
        b = perception.RandomWalkMotion(start, step_sigma=3.0, bound=5.0, seed=9)
        for t in np.linspace(0.0, 4.0, 41):
            pa, pb = a.pose_at(t), b.pose_at(t)
            assert np.array_equal(pa.translation, pb.translation)
            assert np.all(np.abs(pa.translation - start.translation) <= 5.0 + 1e-12)
        assert a.end_time == pytest.approx(3.0)

    def test_static(self):
        pose = RigidTransform.from_translation([1.0, 2.0, 3.0])
        motion = perception.StaticMotion(pose)
        assert motion.pose_at(12.0) is pose
        assert motion.end_time == 0.0
