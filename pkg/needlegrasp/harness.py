# coding: utf8
"""Experiment harness: calibration procedures, trials, batches and the
path-planning accuracy table check.
"""

import functools
import json
import pathlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import toml
from tqdm import tqdm

from . import camera, geometry, kinematics, servo, utils
from .camera import Side
from .config import CalibrationSettings, ScenarioConfig
from .exceptions import MismatchReport
from .geometry import RigidTransform
from .perception import NeedleState, Occluder, SyntheticTracker
from .servo import Outcome, OutcomeKind, Phase, ServoController

log = utils.get_logger(__name__)

ACCURACY_TABLE_PATH = pathlib.Path(__file__).parent / "data" / "planning_accuracy.toml"
ACCURACY_TOL = 0.05
EXACT_TOL = 1e-9
TRACE_COLUMNS = (
    "trial_id",
    "t",
    "phase",
    "tip_x",
    "tip_y",
    "tip_z",
    "needle_x",
    "needle_y",
    "needle_z",
    "e_x",
    "e_y",
    "e_z",
    "d3",
    "outcome",
)
AXES = ("x", "y", "z")


@dataclass(frozen=True)
class AccuracyRow(object):
    acquisition: int
    measured: Tuple[float, float, float]
    ideal: Tuple[float, float, float]
    error: float

    @property
    def recomputed(self) -> float:
        return float(np.linalg.norm(np.subtract(self.ideal, self.measured)))


@dataclass(frozen=True)
class AccuracyReport(object):
    rows: Tuple[AccuracyRow, ...]
    errors: Tuple[float, ...]
    mean: float
    reported_mean: float

    def table(self) -> str:
        lines = ["  #   measured (mm)             ideal (mm)                  table  recomputed"]
        for row, err in zip(self.rows, self.errors):
            m = ", ".join(f"{v:6.1f}" for v in row.measured)
            i = ", ".join(f"{v:6.1f}" for v in row.ideal)
            lines.append(f"{row.acquisition:3d}   ({m})  ({i})  {row.error:5.1f}    {err:7.3f}")
        lines.append(f"mean: tabulated {self.reported_mean:.1f} mm, recomputed {self.mean:.3f} mm")
        return "\n".join(lines)


def load_accuracy_table(pth: pathlib.Path = ACCURACY_TABLE_PATH) -> Tuple[List[AccuracyRow], float]:
    """Load the accuracy table fixture.

    Returns:
        A two-tuple (rows, tabulated mean error).
    """

    data = toml.load(pth)
    rows = [
        AccuracyRow(r["acquisition"], tuple(r["measured"]), tuple(r["ideal"]), r["error"])
        for r in data["rows"]
    ]
    return rows, float(data["reported_mean"])


def verify_accuracy_table(
    rows: Optional[Sequence[AccuracyRow]] = None,
    reported_mean: float = 3.2,
    tol: float = ACCURACY_TOL,
) -> AccuracyReport:
    """Recompute every Euclidean error of the accuracy table and their mean.

    Args:
        rows: Rows to check. None loads the shipped fixture.
        reported_mean: The tabulated mean error (mm).
        tol: Allowed deviation from the tabulated values (mm).

    Returns:
        The recomputed table.

    Raises:
        MismatchReport: If any row or the mean deviates by more than tol.
    """

    if rows is None:
        rows, reported_mean = load_accuracy_table()

    errors = tuple(row.recomputed for row in rows)
    mean = float(np.mean(errors))
    report = AccuracyReport(tuple(rows), errors, mean, reported_mean)

    bad = [row for row, err in zip(rows, errors) if abs(err - row.error) > tol]
    if bad:
        ids = ", ".join(str(row.acquisition) for row in bad)
        raise MismatchReport(f"recomputed error differs from the tabulated one in row(s) {ids}", bad)
    if abs(mean - reported_mean) > tol:
        raise MismatchReport(
            f"mean error {mean:.3f} mm differs from the tabulated {reported_mean:.1f} mm", []
        )

    log.info(f"SUCCESS: all {len(rows)} rows match, mean error {mean:.3f} mm.")
    return report


@dataclass(frozen=True, eq=False)
class CalibReport(object):
    """Residuals of the simulated calibration procedures.

    Attributes:
        scan_d_mean: Mean point-to-plane distance of each of the 3 tip scans (mm).
        registration_rms: RMS residual of the grasper-tip registration (mm).
        registration_translation_error: ||t_est - t_true|| of ^rcT_ws (mm).
        registration_rotation_error: Angle between estimated and true rotation (deg).
        extrinsic_mean_error: Mean error of the board corners triangulated and
            mapped into /ws through the estimated ^wsT_ee (mm).
        extrinsic_reprojection_rms: Corner reprojection RMS of the pose fit (px).
        rc_from_ws: Estimated ^rcT_ws.
        ee_from_ws: Estimated ^eeT_ws.
        exact: The same residuals without noise (only when checked).
    """

    scan_d_mean: Tuple[float, float, float]
    registration_rms: float
    registration_translation_error: float
    registration_rotation_error: float
    extrinsic_mean_error: float
    extrinsic_reprojection_rms: float
    rc_from_ws: RigidTransform
    ee_from_ws: RigidTransform
    exact: Dict[str, float] = field(default_factory=dict)

    @property
    def exact_ok(self) -> bool:
        return all(v < EXACT_TOL for v in self.exact.values())

    def to_dict(self) -> dict:
        return {
            "scan_d_mean": [round(v, 6) for v in self.scan_d_mean],
            "registration_rms": round(self.registration_rms, 6),
            "registration_translation_error": round(self.registration_translation_error, 6),
            "registration_rotation_error": round(self.registration_rotation_error, 6),
            "extrinsic_mean_error": round(self.extrinsic_mean_error, 6),
            "extrinsic_reprojection_rms": round(self.extrinsic_reprojection_rms, 6),
            "exact": {k: float(v) for k, v in self.exact.items()},
        }


def scan_planes(center: np.ndarray) -> List[geometry.Plane]:
    """The three workspace planes touched by the tip scan."""

    planes = []
    for r in (np.eye(3), geometry.rot_x(np.deg2rad(30.0)), geometry.rot_y(np.deg2rad(-30.0))):
        n = r @ np.array([0.0, 0.0, 1.0])
        planes.append(geometry.Plane(n, -float(n @ center)))
    return planes


def _plane_scan(plane: geometry.Plane, center, m: int, extent: float, rng) -> np.ndarray:
    n = plane.normal
    u = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    ab = rng.uniform(-extent / 2.0, extent / 2.0, size=(m, 2))
    return plane.project(center) + ab[:, :1] * u + ab[:, 1:] * v


def _calibrate(config: ScenarioConfig, settings: CalibrationSettings, rng) -> dict:
    chain = config.chain
    rig = config.rig
    board = config.board
    corners = board.object_points()

    # a) tip scans of three planes, measured in /rc
    d_mean = []
    for plane in scan_planes(board.center):
        pts = _plane_scan(plane, board.center, settings.scan_points, settings.scan_extent, rng)
        measured = geometry.apply(chain.rc_from_ws, pts)
        measured = measured + rng.normal(0.0, 1.0, measured.shape) * settings.tip_sigma
        d_mean.append(geometry.mean_scan_distance(measured))

    # b) grasper tip touching board corners: ^rcT_ws by absolute orientation
    n = min(settings.registration_points, board.n_corners)
    idx = np.unique(np.linspace(0, board.n_corners - 1, n).round().astype(int))
    src = corners[idx]
    dst = geometry.apply(chain.rc_from_ws, src)
    dst = dst + rng.normal(0.0, 1.0, dst.shape) * settings.registration_sigma
    rc_from_ws = geometry.absolute_orientation(src, dst)
    residuals = geometry.registration_residuals(rc_from_ws, src, dst)

    # c) board pose from the left image, checked with stereo corners
    sigma = settings.corner_sigma
    left = camera.add_pixel_noise(camera.project_board(rig, Side.LEFT, board), sigma, rng)
    right = camera.add_pixel_noise(camera.project_board(rig, Side.RIGHT, board), sigma, rng)
    pose = camera.estimate_extrinsics(board, left, rig.left)
    ws_from_ee = pose.ee_from_ws.inverse()
    mapped = np.array(
        [geometry.apply(ws_from_ee, camera.triangulate_camera(rig, l, r)) for l, r in zip(left, right)]
    )

    return {
        "scan_d_mean": tuple(float(d) for d in d_mean),
        "registration_rms": float(np.sqrt(np.mean(residuals ** 2))),
        "registration_translation_error": float(
            np.linalg.norm(rc_from_ws.translation - chain.rc_from_ws.translation)
        ),
        "registration_rotation_error": float(
            np.rad2deg(geometry.rotation_angle(rc_from_ws.rotation, chain.rc_from_ws.rotation))
        ),
        "extrinsic_mean_error": float(np.mean(np.linalg.norm(mapped - corners, axis=1))),
        "extrinsic_reprojection_rms": pose.reprojection_rms,
        "rc_from_ws": rc_from_ws,
        "ee_from_ws": pose.ee_from_ws,
    }


def simulate_calibration(
    config: ScenarioConfig, seed: Optional[int] = None, check_exact: bool = True
) -> CalibReport:
    """Simulate the plane scan, the tip registration and the extrinsic check.

    Args:
        config: The scenario (true rig and chain, calibration noise).
        seed: Seed of the measurement noise; defaults to the scenario seed.
        check_exact: Also run every procedure without noise and record the
            residuals in CalibReport.exact.

    Returns:
        The residuals and the estimated transforms.
    """

    settings = config.calibration
    rng = np.random.default_rng(config.seed if seed is None else seed)
    result = _calibrate(config, settings, rng)

    exact = {}
    if check_exact:
        ideal = _calibrate(config, settings.exact(), np.random.default_rng(0))
        exact = {
            "scan_d_mean": max(ideal["scan_d_mean"]),
            "registration_rms": ideal["registration_rms"],
            "extrinsic_mean_error": ideal["extrinsic_mean_error"],
        }
        if any(v >= EXACT_TOL for v in exact.values()):
            log.warning(f"Noise-free calibration is not exact: {exact}")

    report = CalibReport(exact=exact, **result)
    log.info(
        "SUCCESS: calibration simulated, D_mean "
        + ", ".join(f"{d:.3f}" for d in report.scan_d_mean)
        + f" mm, registration rms {report.registration_rms:.3f} mm, "
        f"mapped corners {report.extrinsic_mean_error:.3f} mm."
    )
    return report


@dataclass(frozen=True, eq=False)
class TrialRecord(object):
    """Everything one trial produced.

    Attributes:
        trial_id: Position of the trial in its batch.
        seed: The trial seed.
        rows: Trace rows in TRACE_COLUMNS order.
        outcome: The classified outcome.
        task_time: Time the tool was back home, or when the trial stopped (s).
        transitions: Phase transitions as (t, from, to) value triples.
        calibration: The calibration used, when estimates were enabled.
    """

    trial_id: int
    seed: int
    rows: Tuple[tuple, ...]
    outcome: Outcome
    task_time: float
    transitions: Tuple[Tuple[float, str, str], ...]
    calibration: Optional[CalibReport] = None

    @property
    def completed(self) -> bool:
        return bool(self.transitions) and self.transitions[-1][2] == Phase.DONE.value

    def summary(self) -> dict:
        o = self.outcome
        return {
            "trial_id": self.trial_id,
            "seed": self.seed,
            "outcome": o.kind.value,
            "error": round(o.final_tip_error, 6),
            "components": [round(float(c), 6) for c in o.components],
            "unclassified_band": o.unclassified_band,
            "reason": o.reason,
            "task_time": round(self.task_time, 6),
        }


def _trial_seeds(config: ScenarioConfig, seed: int) -> Tuple[int, int, int]:
    seq = np.random.SeedSequence([config.seed, seed])
    motion, tracker, calib = (int(s.generate_state(1)[0]) for s in seq.spawn(3))
    return motion, tracker, calib


def run_trial(config: ScenarioConfig, seed: int, trial_id: Optional[int] = None) -> TrialRecord:
    """Run one closed-loop grasp.

    The simulator (needle, tracker, joint servo, outcome) uses the true rig
    and chain; the controller uses the calibration estimates when
    calibration.use_estimates is set.

    Args:
        config: The scenario.
        seed: The trial seed; together with the scenario seed it fixes every
            random draw of the trial.
        trial_id: Identifier written to the trace (defaults to seed).

    Returns:
        The trace and outcome.
    """

    trial_id = seed if trial_id is None else trial_id
    motion_seed, tracker_seed, calib_seed = _trial_seeds(config, seed)

    rig, chain = config.rig, config.chain
    calib = None
    est_rig, est_chain = rig, chain
    if config.calibration.use_estimates:
        calib = simulate_calibration(config, calib_seed, check_exact=False)
        est_rig = rig.with_extrinsics(calib.ee_from_ws)
        est_chain = kinematics.KinematicChain(
            calib.rc_from_ws, chain.wrist_length, chain.jaw_length, chain.limits
        )

    rates = config.rates
    noise = config.noise(tracker_seed)
    motion = config.motion(motion_seed)
    needle_spec = config.needle
    thresholds = config.outcome
    joint_servo = config.joint_servo
    tracker = SyntheticTracker(rig, noise, rates)
    controller = ServoController(est_chain, est_rig, config.servo, config.ik, rates)
    ws_from_rc = chain.ws_from_rc

    joints = config.servo.home
    state = controller.initial_state(joints)
    closure = None
    rows = []
    n_steps = int(round(config.max_time * rates.control_hz))

    def needle_at(s: float) -> NeedleState:
        return NeedleState.from_pose(motion.pose_at(s), needle_spec.radius, needle_spec.marker_angles)

    for k in range(n_steps + 1):
        t = k * rates.dt
        needle = needle_at(t)
        tip_rc, _ = kinematics.forward(chain, joints, check=False)
        tip = geometry.apply(ws_from_rc, tip_rc)

        occluders = ()
        if noise.occlusion:
            occluders = (Occluder(ws_from_rc.translation, tip, noise.tool_radius),)
        detections = tracker.observe(needle_at, t, occluders)

        state, command = controller.step(state, detections, t, joints)

        if closure is None and state.closure_time is not None:
            captured = geometry.point_circle_distance(needle.circle, tip) < thresholds.capture_radius
            closure = (tip, needle.middle, captured)
            log.debug(f"Jaws closed at {t:.3f} s, captured: {captured}.")

        e = state.last_error
        rows.append(
            [trial_id, t, state.phase.value, *tip, *needle.middle, *e, joints.d3, ""]
        )

        if state.finished:
            break
        joints = joint_servo.track(joints, command, rates.dt)

    task_time = t
    if state.phase is Phase.DONE:
        outcome = servo.classify_outcome(closure[0], closure[1], closure[2], thresholds)
    else:
        reason = state.reason or f"timeout after {config.max_time:.1f} s in {state.phase.value}"
        components = needle.middle - tip
        outcome = Outcome(OutcomeKind.FAIL, float(np.linalg.norm(components)), components, reason=reason)

    rows[-1][-1] = outcome.kind.value
    transitions = tuple((tt, a.value, b.value) for tt, a, b in state.transitions)

    log.info(
        f"Trial {trial_id}: {outcome.kind.value}, error {outcome.final_tip_error:.3f} mm, "
        f"{task_time:.2f} s{' (' + outcome.reason + ')' if outcome.reason else ''}."
    )
    return TrialRecord(
        trial_id, seed, tuple(tuple(r) for r in rows), outcome, task_time, transitions, calib
    )


def trace_csv(record: TrialRecord) -> str:
    return utils.csv_text(TRACE_COLUMNS, record.rows)


@dataclass(frozen=True, eq=False)
class BatchReport(object):
    """Aggregate of a batch of trials.

    Attributes:
        n_trials: Number of trials.
        counts: Trials per outcome kind.
        quartiles: Per axis, boxplot statistics (min, q1, median, q3, max) of
            the absolute terminal error components (mm).
        mean_error: Mean terminal tip error (mm).
        mean_task_time: Mean task time of the trials that returned home (s).
        unclassified_band: Misses with an error between the miss and fail thresholds.
        trials: Per-trial summaries.
    """

    n_trials: int
    counts: Dict[str, int]
    quartiles: Dict[str, List[float]]
    mean_error: float
    mean_task_time: Optional[float]
    unclassified_band: int
    trials: List[dict]

    @classmethod
    def from_records(cls, records: Sequence[TrialRecord]) -> "BatchReport":
        counts = {kind.value: 0 for kind in OutcomeKind}
        for r in records:
            counts[r.outcome.kind.value] += 1

        comps = np.abs(np.array([r.outcome.components for r in records]))
        quartiles = {
            axis: [round(float(v), 6) for v in np.percentile(comps[:, i], [0, 25, 50, 75, 100])]
            for i, axis in enumerate(AXES)
        }
        times = [r.task_time for r in records if r.completed]

        return cls(
            n_trials=len(records),
            counts=counts,
            quartiles=quartiles,
            mean_error=round(float(np.mean([r.outcome.final_tip_error for r in records])), 6),
            mean_task_time=round(float(np.mean(times)), 6) if times else None,
            unclassified_band=sum(r.outcome.unclassified_band for r in records),
            trials=[r.summary() for r in records],
        )

    def to_dict(self) -> dict:
        return {
            "n_trials": self.n_trials,
            "counts": self.counts,
            "quartiles": self.quartiles,
            "mean_error": self.mean_error,
            "mean_task_time": self.mean_task_time,
            "unclassified_band": self.unclassified_band,
            "trials": self.trials,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def run_batch(
    config: ScenarioConfig,
    n: Optional[int] = None,
    jobs: int = 1,
    out: Optional[pathlib.Path] = None,
    trace_dir: Optional[pathlib.Path] = None,
    progress: bool = False,
) -> BatchReport:
    """Run n independent trials and aggregate them.

    Args:
        config: The scenario.
        n: Number of trials (defaults to the scenario's trial count).
        jobs: Worker processes; trial order is preserved either way.
        out: Where to write the JSON report.
        trace_dir: Where to write one trace CSV per trial.
        progress: Show a progress bar.

    Returns:
        The batch report.
    """

    n = config.trials if n is None else n
    if n < 1:
        raise ValueError("a batch needs at least one trial")

    trial = functools.partial(run_trial, config)
    bar = dict(total=n, desc="trials", unit="trial", disable=not progress)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(tqdm(pool.map(trial, range(n)), **bar))
    else:
        records = [trial(i) for i in tqdm(range(n), **bar)]

    if trace_dir is not None:
        for record in records:
            utils.atomic_write(
                pathlib.Path(trace_dir) / f"trial_{record.trial_id:03d}.csv", trace_csv(record)
            )

    report = BatchReport.from_records(records)
    if out is not None:
        utils.atomic_write(pathlib.Path(out), report.to_json())

    log.info(
        f"SUCCESS: {n} trial(s), "
        + ", ".join(f"{k} {v}" for k, v in report.counts.items())
        + f", mean error {report.mean_error:.3f} mm."
    )
    return report
