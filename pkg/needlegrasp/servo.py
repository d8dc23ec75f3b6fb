# coding: utf8
"""Position-based visual servoing of the needle grasp.

The controller follows the middle needle marker at a fixed standoff, waits
for the needle to settle, plans a grasp from the settled marker estimate,
approaches it in three waypoint legs, closes the jaws and returns home:

    HOME -> FOLLOW -> APPROACH -> GRASP -> RETURN -> DONE
    (any phase) -> ABORTED

The controller only ever sees estimated quantities: the stereo rig carries the
estimated ^eeT_ws and the chain the estimated ^rcT_ws. Ground truth is the
harness' business.
"""

import enum
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import geometry, kinematics, perception, utils
from .camera import StereoRig
from .exceptions import CameraError, NeedleGraspError, NoConvergence, NoFeasibleSolution, StaleEstimate
from .geometry import Point3, RigidTransform
from .kinematics import DlsSettings, JointVector, KinematicChain, PositionSolution
from .perception import MIDDLE, MarkerDetection, RateConfig

log = utils.get_logger(__name__)

# plan solutions are exact up to round-off
PLAN_TOL = 1e-10
PLAN_MAX_ITER = 60


class Phase(enum.Enum):
    HOME = "home"
    FOLLOW = "follow"
    APPROACH = "approach"
    GRASP = "grasp"
    RETURN = "return"
    DONE = "done"
    ABORTED = "aborted"


LEGAL_TRANSITIONS = {
    Phase.HOME: {Phase.FOLLOW},
    Phase.FOLLOW: {Phase.FOLLOW, Phase.APPROACH},
    Phase.APPROACH: {Phase.GRASP},
    Phase.GRASP: {Phase.RETURN},
    Phase.RETURN: {Phase.DONE},
    Phase.DONE: set(),
    Phase.ABORTED: set(),
}


def is_legal(src: Phase, dst: Phase) -> bool:
    if dst is Phase.ABORTED:
        return src not in (Phase.DONE, Phase.ABORTED)
    return dst in LEGAL_TRANSITIONS[src]


class OutcomeKind(enum.Enum):
    SUCCESS = "success"
    MISS = "miss"
    FAIL = "fail"


@dataclass(frozen=True)
class OutcomeThresholds(object):
    capture_radius: float = 2.0
    miss: float = 4.0
    fail: float = 20.0

    def __post_init__(self):
        if not (0 < self.capture_radius and self.miss < self.fail):
            raise ValueError("outcome thresholds must satisfy 0 < capture, miss < fail")


@dataclass(frozen=True, eq=False)
class Outcome(object):
    """Result of a trial.

    Attributes:
        kind: Success, miss or fail.
        final_tip_error: ||p_needle - p_tip|| (mm).
        components: Per-axis p_needle - p_tip (mm, /ws).
        unclassified_band: True when a miss falls between the miss and fail
            thresholds, a band with no label of its own.
        reason: Why the trial failed, if it was aborted.
    """

    kind: OutcomeKind
    final_tip_error: float
    components: np.ndarray = field(default_factory=lambda: np.zeros(3))
    unclassified_band: bool = False
    reason: str = ""


@dataclass(frozen=True)
class ServoSettings(object):
    """Controller tuning. Lengths in mm, angles in rad, times in s."""

    home: JointVector = JointVector(0.0, 0.0, 80.0, 0.0, 0.0, 0.0, 0.0)
    standoff: float = 25.0
    standoff_axis: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    settle_window: int = 8
    settle_epsilon: float = 1.0
    plan_average: int = 4
    waypoint_tolerance: float = 0.5
    home_tolerance: float = 0.5
    dock_height: float = 5.0
    grasp_tolerance: float = 1e-3
    grasp_timeout: float = 2.0
    grip_open: float = np.deg2rad(45.0)
    grip_closed_tolerance: float = 1e-3
    stale_periods: float = 2.0
    stale_timeout: float = 1.0

    def __post_init__(self):
        if self.settle_window < 2:
            raise ValueError("settle_window must be at least 2")
        if not 1 <= self.plan_average <= self.settle_window:
            raise ValueError("plan_average must be between 1 and settle_window")
        if self.standoff < 0 or self.settle_epsilon <= 0:
            raise ValueError("standoff and settle_epsilon must be positive")

    @property
    def axis(self) -> np.ndarray:
        a = np.asarray(self.standoff_axis, dtype=float)
        return a / np.linalg.norm(a)


@dataclass(frozen=True, eq=False)
class GraspPlan(object):
    """Where and how to grasp the needle.

    Attributes:
        p_pl: Grasp point in /rc (middle marker projected onto the needle plane).
        p_pl_ws: The same point in /ws.
        wrist_center: Target of the analytic IK for joints 1-3, chosen so the
            tool tip lands on p_pl with the planned wrist.
        theta123: Analytic IK solution for the first three joints.
        theta456: Wrist angles.
        r_tool: Planned tool rotation in /rc (jaw axis = -z column).
        tangent_ws: Needle tangent at the middle marker (/ws).
        normal_ws: Needle plane normal (/ws).
        grip_open: Jaw opening while approaching (rad).
        approach_standoff: Height of the first approach waypoint (mm).
    """

    p_pl: np.ndarray
    p_pl_ws: np.ndarray
    wrist_center: np.ndarray
    theta123: PositionSolution
    theta456: np.ndarray
    r_tool: np.ndarray
    tangent_ws: np.ndarray
    normal_ws: np.ndarray
    grip_open: float
    approach_standoff: float = 25.0

    @property
    def joints(self) -> JointVector:
        return self.theta123.joints(self.theta456, grip=self.grip_open)

    def jaw_axis(self, chain: KinematicChain) -> np.ndarray:
        """Planned jaw axis in /ws, from the forward kinematics of the plan."""

        _, pose = kinematics.forward(chain, self.joints)
        return chain.ws_from_rc.rotation @ (pose.rotation @ kinematics.DOWN)


@dataclass
class ServoState(object):
    """Controller state carried between control steps.

    Attributes:
        phase: Current phase.
        joints: Last measured joint vector.
        command: Last joint command.
        markers: Latest estimate per marker id as (point in /ws, timestamp).
        settle_window: The settle_window + 1 newest tracker updates of the
            middle marker as (timestamp, middle point, all markers or None).
        plan: The grasp plan, once settled.
        waypoints: Joint waypoints of the current multi-leg motion.
        leg: Index into waypoints.
        transitions: Log of (time, from, to).
        last_error: Last PBVS error vector (/ws, mm).
        stale_since: Time the estimate went stale, if it is.
        phase_started: Time the current phase was entered.
        closure_time: When the jaws closed.
        closure_tip: Measured tip (/rc) when the jaws closed.
        reason: Why the controller aborted.
    """

    phase: Phase = Phase.HOME
    joints: Optional[JointVector] = None
    command: Optional[JointVector] = None
    markers: Dict[int, Tuple[np.ndarray, float]] = field(default_factory=dict)
    settle_window: Tuple = ()
    plan: Optional[GraspPlan] = None
    waypoints: Tuple = ()
    leg: int = 0
    transitions: Tuple = ()
    last_error: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stale_since: Optional[float] = None
    phase_started: float = 0.0
    closure_time: Optional[float] = None
    closure_tip: Optional[np.ndarray] = None
    reason: str = ""

    @property
    def finished(self) -> bool:
        return self.phase in (Phase.DONE, Phase.ABORTED)


def compute_error(
    s_measured,
    s_current,
    phase: Phase = Phase.APPROACH,
    standoff: Optional[Sequence[float]] = None,
    age: Optional[float] = None,
    max_age: Optional[float] = None,
) -> np.ndarray:
    """PBVS error e = s(m, a) - s*, both in /ws.

    Args:
        s_measured: Needle (middle marker) position from the stereo tracker.
        s_current: Tool tip position from the direct kinematics.
        phase: In FOLLOW the standoff offset is added to the measured point.
        standoff: Standoff vector (mm, /ws) used during FOLLOW.
        age: Age of the measurement (s).
        max_age: Oldest acceptable measurement (s).

    Returns:
        The 3-vector error (mm), target minus current.

    Raises:
        StaleEstimate: If age exceeds max_age.
    """

    if age is not None and max_age is not None and age > max_age:
        raise StaleEstimate(f"needle estimate is {age:.3f} s old", age=age)

    target = geometry.as_point(s_measured)
    if phase is Phase.FOLLOW and standoff is not None:
        target = target + geometry.as_point(standoff)
    return target - geometry.as_point(s_current)


def solve_tool_pose(
    chain: KinematicChain,
    tip_rc,
    r_tool: np.ndarray,
    settings: DlsSettings = DlsSettings(tol_rot=1e-9),
    grip: float = 0.0,
    prefer: Optional[Sequence[float]] = None,
) -> Tuple[JointVector, np.ndarray]:
    """Joints placing the tool tip at tip_rc with rotation r_tool.

    The first three joints come from the analytic IK of a wrist-centre
    target; the wrist from wrist_angles. The wrist-centre target is corrected
    by fixed-point iteration until the tip lands on tip_rc.

    Returns:
        A two-tuple (joints, wrist_center).

    Raises:
        NoFeasibleSolution: If no solution within the limits exists.
    """

    tip_rc = geometry.as_point(tip_rc)
    r_tool = np.asarray(r_tool, dtype=float)
    p_w = tip_rc - (chain.jaw_length + chain.wrist_length) * (r_tool @ kinematics.DOWN)

    for _ in range(PLAN_MAX_ITER):
        sol = kinematics.select_solution(*kinematics.ik_analytic_position(p_w), chain.limits)
        wrist = kinematics.wrist_angles(chain, sol, r_tool, settings, prefer=prefer)
        q = sol.joints(wrist, grip=grip)
        tip, _ = kinematics.forward(chain, q)

        err = tip_rc - tip
        if np.linalg.norm(err) < PLAN_TOL:
            return q, p_w
        p_w = p_w + err

    raise NoFeasibleSolution("tool pose solution did not settle")


def plan_grasp(
    markers,
    chain: KinematicChain,
    grip_open: float = np.deg2rad(45.0),
    approach_standoff: float = 25.0,
    settings: DlsSettings = DlsSettings(tol_rot=1e-9),
) -> GraspPlan:
    """Plan the grasp of the needle at its middle marker.

    The jaw axis is aligned with the needle tangent at the middle marker (the
    sign pointing along the insertion direction) and the jaws open within a
    plane containing the needle normal. Of the two opening directions the one
    needing the least wrist motion wins.

    Args:
        markers: Three /ws marker positions (tip side, middle, tail side).
        chain: The manipulator (with the estimated ^rcT_ws).
        grip_open: Jaw opening during the approach (rad).
        approach_standoff: Height of the first approach waypoint (mm).
        settings: IK settings for the wrist solution.

    Raises:
        CollinearPoints: If the markers are collinear.
        NoFeasibleSolution: If the grasp pose cannot be reached.
    """

    plane, _, tangent = perception.needle_plane_and_grasp_geometry(markers)
    pts = np.asarray(markers if not isinstance(markers, perception.MarkerEstimate) else markers.as_array())
    p_pl_ws = plane.project(pts[MIDDLE])

    rc_from_ws = chain.rc_from_ws
    p_pl = geometry.apply(rc_from_ws, p_pl_ws)
    t_rc = rc_from_ws.rotation @ tangent
    n_rc = rc_from_ws.rotation @ plane.normal

    insertion = p_pl / np.linalg.norm(p_pl)
    jaw = t_rc if t_rc @ insertion >= 0 else -t_rc

    best = None
    for sign in (1.0, -1.0):
        x = sign * n_rc
        z = -jaw
        r_tool = np.column_stack([x, np.cross(z, x), z])
        try:
            q, p_w = solve_tool_pose(chain, p_pl, r_tool, settings, grip=grip_open)
        except (NoFeasibleSolution, NoConvergence) as err:
            log.debug(f"Grasp frame with opening sign {sign:+.0f} rejected: {err}")
            continue
        cost = float(np.linalg.norm(q.arm[3:]))
        if best is None or cost < best[0]:
            best = (cost, q, p_w, r_tool)

    if best is None:
        raise NoFeasibleSolution("no reachable grasp pose for the needle")

    _, q, p_w, r_tool = best
    plan = GraspPlan(
        p_pl=p_pl,
        p_pl_ws=p_pl_ws,
        wrist_center=p_w,
        theta123=PositionSolution(q.theta1, q.theta2, q.d3),
        theta456=q.arm[3:],
        r_tool=r_tool,
        tangent_ws=tangent,
        normal_ws=plane.normal,
        grip_open=grip_open,
        approach_standoff=approach_standoff,
    )
    log.info(f"SUCCESS: planned grasp at {np.round(p_pl_ws, 2)} mm (/ws).")
    return plan


def classify_outcome(
    final_tip,
    needle_middle,
    grip_closed_on_needle: bool,
    thresholds: OutcomeThresholds = OutcomeThresholds(),
) -> Outcome:
    """Label a finished trial.

    Success iff the jaws closed on the needle; otherwise Miss below the fail
    threshold (errors between the miss and fail thresholds are flagged) and
    Fail at or above it.
    """

    components = geometry.as_point(needle_middle) - geometry.as_point(final_tip)
    error = float(np.linalg.norm(components))

    if grip_closed_on_needle:
        return Outcome(OutcomeKind.SUCCESS, error, components)
    if error >= thresholds.fail:
        return Outcome(OutcomeKind.FAIL, error, components)
    return Outcome(OutcomeKind.MISS, error, components, unclassified_band=error >= thresholds.miss)


class ServoController(object):
    """The closed-loop task executor.

    Args:
        chain: The manipulator with the estimated ^rcT_ws.
        rig: The stereo rig with the estimated ^eeT_ws.
        settings: Controller tuning.
        ik: DLS settings for the follow phase.
        rates: Tracker/control rates (staleness is measured in tracker periods).
    """

    def __init__(
        self,
        chain: KinematicChain,
        rig: StereoRig,
        settings: ServoSettings = ServoSettings(),
        ik: DlsSettings = DlsSettings(),
        rates: RateConfig = RateConfig(),
    ):
        self.chain = chain
        self.rig = rig
        self.settings = settings
        self.ik = ik
        self.rates = rates

        self.home_tip, home_pose = kinematics.forward(chain, settings.home)
        self.follow_rotation = home_pose.rotation
        self.standoff_ws = settings.standoff * settings.axis

    def initial_state(self, joints: JointVector) -> ServoState:
        return ServoState(joints=joints, command=self.settings.home)

    def tip_ws(self, joints: JointVector) -> Point3:
        tip, _ = kinematics.forward(self.chain, joints, check=False)
        return geometry.apply(self.chain.ws_from_rc, tip)

    def step(
        self,
        state: ServoState,
        detections: Sequence[MarkerDetection],
        t: float,
        joints: JointVector,
    ) -> Tuple[ServoState, JointVector]:
        """Advance the controller by one control period.

        Args:
            state: State returned by the previous step.
            detections: Tracker output that arrived since the previous step.
            t: Current time (s).
            joints: Measured joint vector.

        Returns:
            A two-tuple (new state, joint command).
        """

        state = replace(state, joints=joints)
        if state.finished:
            return state, state.command

        fresh = self._ingest(state, detections, t)

        handler = {
            Phase.HOME: self._home,
            Phase.FOLLOW: self._follow,
            Phase.APPROACH: self._approach,
            Phase.GRASP: self._grasp,
            Phase.RETURN: self._return,
        }[state.phase]

        try:
            handler(state, t, fresh)
        except NeedleGraspError as err:
            self._abort(state, t, f"{type(err).__name__}: {err}")

        return state, state.command

    def _ingest(self, state: ServoState, detections: Sequence[MarkerDetection], t: float) -> bool:
        if not detections:
            return False

        try:
            estimate = perception.reconstruct_markers(detections, self.rig)
        except CameraError as err:
            log.warning(f"Dropping tracker update at {t:.3f} s: {err}")
            return False

        markers = dict(state.markers)
        for i, p in estimate.points.items():
            markers[i] = (p, estimate.timestamp)
        state.markers = markers

        if MIDDLE not in estimate.points:
            return False

        full = estimate.as_array() if estimate.complete else None
        window = state.settle_window + ((estimate.timestamp, estimate.points[MIDDLE], full),)
        # W + 1 samples span W tracker periods
        state.settle_window = window[-(self.settings.settle_window + 1) :]
        return True

    def _transition(self, state: ServoState, t: float, phase: Phase) -> None:
        if not is_legal(state.phase, phase):
            raise RuntimeError(f"illegal phase transition {state.phase} -> {phase}")
        log.info(f"{t:7.3f} s: {state.phase.value} -> {phase.value}")
        state.transitions = state.transitions + ((t, state.phase, phase),)
        state.phase = phase
        state.phase_started = t

    def _abort(self, state: ServoState, t: float, reason: str) -> None:
        log.warning(f"Aborting at {t:.3f} s: {reason}")
        state.reason = reason
        self._transition(state, t, Phase.ABORTED)

    def _measured_tip_rc(self, state: ServoState) -> Point3:
        tip, _ = kinematics.forward(self.chain, state.joints, check=False)
        return tip

    def _home(self, state: ServoState, t: float, fresh: bool) -> None:
        state.command = self.settings.home
        if np.linalg.norm(self._measured_tip_rc(state) - self.home_tip) < self.settings.home_tolerance:
            self._transition(state, t, Phase.FOLLOW)

    def _follow(self, state: ServoState, t: float, fresh: bool) -> None:
        middle = state.markers.get(MIDDLE)
        age = t - middle[1] if middle is not None else np.inf
        tip_ws = self.tip_ws(state.joints)

        try:
            e = compute_error(
                middle[0] if middle is not None else tip_ws,
                tip_ws,
                Phase.FOLLOW,
                self.standoff_ws,
                age=age,
                max_age=self.settings.stale_periods * self.rates.tracker_period,
            )
        except StaleEstimate as err:
            if state.stale_since is None:
                state.stale_since = t
            if t - state.stale_since > self.settings.stale_timeout:
                self._abort(state, t, f"StaleEstimate: {err}")
            return

        state.stale_since = None
        state.last_error = e

        if fresh or state.command is self.settings.home:
            target_ws = tip_ws + e
            target = RigidTransform(
                self.follow_rotation, geometry.apply(self.chain.rc_from_ws, target_ws)
            )
            seed = state.command if state.command is not None else state.joints
            try:
                state.command = kinematics.ik_iterative(self.chain, target, seed, self.ik)
            except NoConvergence as err:
                log.warning(f"Follow IK did not converge at {t:.3f} s ({err.best_residual:.3f} mm).")

        if fresh and self._settled(state):
            self._start_approach(state, t)

    def _settled(self, state: ServoState) -> bool:
        window = state.settle_window
        if len(window) <= self.settings.settle_window:
            return False
        pts = np.array([w[1] for w in window])
        spread = np.max(np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2))
        return bool(spread < self.settings.settle_epsilon)

    def _settled_markers(self, state: ServoState) -> Optional[np.ndarray]:
        full = [w[2] for w in state.settle_window if w[2] is not None]
        if not full:
            return None
        return np.mean(full[-self.settings.plan_average :], axis=0)

    def _start_approach(self, state: ServoState, t: float) -> None:
        markers = self._settled_markers(state)
        if markers is None:
            log.debug("Needle settled but no complete marker set yet.")
            return

        s = self.settings
        plan = plan_grasp(markers, self.chain, s.grip_open, s.standoff)
        axis_rc = self.chain.rc_from_ws.rotation @ s.axis

        prefer = plan.theta456
        above, _ = solve_tool_pose(
            self.chain, plan.p_pl + s.standoff * axis_rc, plan.r_tool, grip=s.grip_open, prefer=prefer
        )
        dock, _ = solve_tool_pose(
            self.chain, plan.p_pl + s.dock_height * axis_rc, plan.r_tool, grip=s.grip_open, prefer=prefer
        )

        state.plan = plan
        state.waypoints = (above, dock, plan.joints)
        state.leg = 0
        self._transition(state, t, Phase.APPROACH)

    def _waypoint_reached(self, state: ServoState, waypoint: JointVector) -> bool:
        target, _ = kinematics.forward(self.chain, waypoint, check=False)
        return np.linalg.norm(self._measured_tip_rc(state) - target) < self.settings.waypoint_tolerance

    def _approach(self, state: ServoState, t: float, fresh: bool) -> None:
        plan = state.plan
        state.last_error = compute_error(plan.p_pl_ws, self.tip_ws(state.joints))

        waypoint = state.waypoints[state.leg]
        state.command = waypoint
        if self._waypoint_reached(state, waypoint):
            log.debug(f"Approach leg {state.leg + 1} done at {t:.3f} s.")
            state.leg += 1
            if state.leg == len(state.waypoints):
                self._transition(state, t, Phase.GRASP)
            else:
                state.command = state.waypoints[state.leg]

    def _grasp(self, state: ServoState, t: float, fresh: bool) -> None:
        plan = state.plan
        s = self.settings
        state.last_error = compute_error(plan.p_pl_ws, self.tip_ws(state.joints))

        on_target = np.linalg.norm(self._measured_tip_rc(state) - plan.p_pl) < s.grasp_tolerance
        if on_target or t - state.phase_started > s.grasp_timeout or state.command.grip == 0.0:
            state.command = plan.joints.with_grip(0.0)
        else:
            state.command = plan.joints

        if state.command.grip == 0.0 and state.joints.grip < s.grip_closed_tolerance:
            state.closure_time = t
            state.closure_tip = self._measured_tip_rc(state)
            # retrace the approach legs, then go home
            above, dock, _ = state.waypoints
            state.waypoints = (dock.with_grip(0.0), above.with_grip(0.0), s.home)
            state.leg = 0
            self._transition(state, t, Phase.RETURN)

    def _return(self, state: ServoState, t: float, fresh: bool) -> None:
        waypoint = state.waypoints[state.leg]
        state.command = waypoint
        if self._waypoint_reached(state, waypoint):
            state.leg += 1
            if state.leg == len(state.waypoints):
                self._transition(state, t, Phase.DONE)
            else:
                state.command = state.waypoints[state.leg]
