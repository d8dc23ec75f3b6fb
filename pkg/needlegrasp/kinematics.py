# coding: utf8
"""Kinematics of a 6-DOF remote-centre-of-motion (RCM) manipulator.

Joint order: theta1 (yaw) and theta2 (pitch) about the remote centre, d3
(insertion, mm), then a roll/pitch/yaw wrist (theta4, theta5, theta6) and the
jaw opening ``grip``. The pre-wrist point is

    p = d3 * Ry(theta1) Rx(theta2) (0, 0, -1)

so d3 = 0 always sits on the remote centre. The wrist applies
Rz(theta4) Ry(theta5), a link of ``wrist_length`` along the local -z axis,
Rx(theta6) and finally the jaws (``jaw_length``, also along -z). The jaw axis
of the tool is therefore the -z column of the tool rotation.

Everything here is expressed in the remote-centre frame /rc unless a name
says otherwise.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.spatial.transform import Rotation

from . import geometry, utils
from .exceptions import (
    JointLimitViolation,
    NoConvergence,
    NoFeasibleSolution,
    NumericalFailure,
    OutOfWorkspace,
    SingularDirection,
)
from .geometry import Point3, RigidTransform, rot_x, rot_y, rot_z

log = utils.get_logger(__name__)

JOINT_NAMES = ("theta1", "theta2", "d3", "theta4", "theta5", "theta6", "grip")
N_ARM = 6
LIMIT_TOL = 1e-9
# mm of insertion treated as one radian when damping
PRISMATIC_SCALE = 100.0
DOWN = np.array([0.0, 0.0, -1.0])


@dataclass(frozen=True)
class JointVector(object):
    """Joint state of the arm. Angles in radians, d3 in mm."""

    theta1: float = 0.0
    theta2: float = 0.0
    d3: float = 0.0
    theta4: float = 0.0
    theta5: float = 0.0
    theta6: float = 0.0
    grip: float = 0.0

    @classmethod
    def from_array(cls, values: Sequence[float], grip: Optional[float] = None) -> "JointVector":
        """Build from 6 arm values (plus ``grip``) or from 7 values."""

        values = [float(v) for v in values]
        if len(values) == N_ARM:
            values.append(0.0 if grip is None else float(grip))
        elif len(values) != len(JOINT_NAMES):
            raise ValueError(f"expected 6 or 7 joint values, got {len(values)}")
        return cls(*values)

    @property
    def arm(self) -> np.ndarray:
        """The six arm joints (grip excluded) as an array."""

        return np.array(
            [self.theta1, self.theta2, self.d3, self.theta4, self.theta5, self.theta6]
        )

    @property
    def array(self) -> np.ndarray:
        return np.append(self.arm, self.grip)

    def with_arm(self, arm: Sequence[float]) -> "JointVector":
        return JointVector.from_array(arm, grip=self.grip)

    def with_grip(self, grip: float) -> "JointVector":
        return replace(self, grip=float(grip))


@dataclass(frozen=True, eq=False)
class JointLimits(object):
    """Per-joint [lower, upper] bounds in JointVector order (7 entries)."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(len(JOINT_NAMES))
        hi = np.array(self.upper, dtype=float).reshape(len(JOINT_NAMES))
        if np.any(lo >= hi):
            raise ValueError("joint limits must satisfy lower < upper")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def default(cls) -> "JointLimits":
        deg = np.deg2rad
        return cls(
            lower=[deg(-80), deg(-80), 0.0, deg(-170), deg(-80), deg(-80), 0.0],
            upper=[deg(80), deg(80), 240.0, deg(170), deg(80), deg(80), deg(60)],
        )

    def violations(self, q: JointVector, joints: Sequence[int] = range(7)) -> list:
        values = q.array
        return [
            JOINT_NAMES[i]
            for i in joints
            if values[i] < self.lower[i] - LIMIT_TOL or values[i] > self.upper[i] + LIMIT_TOL
        ]

    def contains(self, q: JointVector, joints: Sequence[int] = range(7)) -> bool:
        return not self.violations(q, joints)

    def clip(self, q: JointVector) -> JointVector:
        return JointVector.from_array(np.clip(q.array, self.lower, self.upper))


@dataclass(frozen=True, eq=False)
class KinematicChain(object):
    """The manipulator model.

    Args:
        rc_from_ws: ^rcT_ws, mount of the remote centre in the workspace.
        wrist_length: Distance from the wrist pitch to the wrist yaw axis (mm).
        jaw_length: Length of the jaws past the yaw axis (mm).
        limits: Joint limits.
    """

    rc_from_ws: RigidTransform
    wrist_length: float = 9.1
    jaw_length: float = 10.0
    limits: JointLimits = field(default_factory=JointLimits.default)

    def __post_init__(self):
        if self.wrist_length <= 0 or self.jaw_length <= 0:
            raise ValueError("link lengths must be positive")

    @property
    def ws_from_rc(self) -> RigidTransform:
        return geometry.invert(self.rc_from_ws)


@dataclass(frozen=True)
class DlsSettings(object):
    """Damped-least-squares IK settings.

    ``damping`` acts on normalised joints (d3 divided by PRISMATIC_SCALE) and
    ``step_clamp`` bounds the normalised step norm per iteration.
    """

    damping: float = 0.05
    tol: float = 0.01
    tol_rot: float = 1e-4
    max_iter: int = 200
    step_clamp: float = 0.1

    def __post_init__(self):
        if self.damping <= 0:
            raise ValueError("damping must be non-zero and positive")
        if self.tol <= 0 or self.tol_rot <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.step_clamp <= 0:
            raise ValueError("step_clamp must be positive")


@dataclass(frozen=True)
class PositionSolution(object):
    """One analytic solution for the first three joints."""

    theta1: float
    theta2: float
    d3: float

    def joints(self, wrist: Sequence[float] = (0.0, 0.0, 0.0), grip: float = 0.0) -> JointVector:
        return JointVector(self.theta1, self.theta2, self.d3, *wrist, grip=grip)


def shaft_direction(theta1: float, theta2: float) -> np.ndarray:
    """Unit insertion direction u(theta1, theta2)."""

    return np.array(
        [
            -np.sin(theta1) * np.cos(theta2),
            np.sin(theta2),
            -np.cos(theta1) * np.cos(theta2),
        ]
    )


def shaft_rotation(theta1: float, theta2: float) -> np.ndarray:
    return rot_y(theta1) @ rot_x(theta2)


def _check_limits(chain: KinematicChain, q: JointVector) -> None:
    bad = chain.limits.violations(q)
    if bad:
        raise JointLimitViolation(f"joint(s) outside limits: {', '.join(bad)}")


def _frames(chain: KinematicChain, q: JointVector):
    """Intermediate points and rotations of the chain."""

    r_shaft = shaft_rotation(q.theta1, q.theta2)
    p_wrist = q.d3 * (r_shaft @ DOWN)
    r_pitch = r_shaft @ rot_z(q.theta4) @ rot_y(q.theta5)
    p_yaw = p_wrist + chain.wrist_length * (r_pitch @ DOWN)
    r_tool = r_pitch @ rot_x(q.theta6)
    tip = p_yaw + chain.jaw_length * (r_tool @ DOWN)
    return r_shaft, p_wrist, r_pitch, p_yaw, r_tool, tip


def pre_wrist(q: JointVector) -> Point3:
    """The point d3 * u(theta1, theta2), independent of the wrist."""

    return q.d3 * shaft_direction(q.theta1, q.theta2)


def forward(chain: KinematicChain, q: JointVector, check: bool = True) -> Tuple[Point3, RigidTransform]:
    """Direct kinematics.

    Args:
        chain: The manipulator.
        q: Joint values.
        check: Whether to enforce the joint limits.

    Returns:
        A two-tuple (tip, pose): the tool tip in /rc and the tool pose
        (rotation of the jaws, translation = tip).

    Raises:
        JointLimitViolation: If check is set and q is outside the limits.
    """

    if check:
        _check_limits(chain, q)
    *_, r_tool, tip = _frames(chain, q)
    return tip, RigidTransform(r_tool, tip)


def jacobian(chain: KinematicChain, q: JointVector, check: bool = True) -> np.ndarray:
    """Geometric Jacobian of the tool tip (rows: v, w; columns: arm joints).

    Raises:
        JointLimitViolation: If check is set and q is outside the limits.
    """

    if check:
        _check_limits(chain, q)

    r_shaft, p_wrist, r_pitch, p_yaw, r_tool, tip = _frames(chain, q)
    r_roll = r_shaft @ rot_z(q.theta4)

    axes = [
        (np.array([0.0, 1.0, 0.0]), np.zeros(3)),
        (rot_y(q.theta1) @ np.array([1.0, 0.0, 0.0]), np.zeros(3)),
        None,
        (r_shaft @ np.array([0.0, 0.0, 1.0]), p_wrist),
        (r_roll @ np.array([0.0, 1.0, 0.0]), p_wrist),
        (r_pitch @ np.array([1.0, 0.0, 0.0]), p_yaw),
    ]

    j = np.zeros((6, N_ARM))
    for col, axis in enumerate(axes):
        if axis is None:
            j[:3, col] = r_shaft @ DOWN
            continue
        w, origin = axis
        j[:3, col] = np.cross(w, tip - origin)
        j[3:, col] = w
    return j


def dls_step(j: np.ndarray, e: np.ndarray, damping: float) -> np.ndarray:
    """Damped least-squares update dq = J^T (J J^T + lambda^2 I)^-1 e.

    Raises:
        ValueError: If damping is not positive.
        NumericalFailure: If the damped normal matrix cannot be solved.
    """

    if damping <= 0:
        raise ValueError("damping must be non-zero and positive")

    j = np.asarray(j, dtype=float)
    e = np.asarray(e, dtype=float)
    a = j @ j.T + damping ** 2 * np.eye(j.shape[0])
    try:
        y = scipy.linalg.solve(a, e, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as err:
        raise NumericalFailure("damped normal equations could not be solved") from err
    return j.T @ y


def pose_error(current: RigidTransform, target: RigidTransform) -> np.ndarray:
    """6-vector (position mm, rotation vector rad) taking current onto target."""

    dp = target.translation - current.translation
    dr = Rotation.from_matrix(target.rotation @ current.rotation.T).as_rotvec()
    return np.concatenate([dp, dr])


def ik_iterative(
    chain: KinematicChain,
    target: RigidTransform,
    q0: JointVector,
    settings: DlsSettings = DlsSettings(),
    active: Sequence[int] = tuple(range(N_ARM)),
    position: bool = True,
    orientation: bool = True,
) -> JointVector:
    """Iterative damped-least-squares inverse kinematics.

    Args:
        chain: The manipulator.
        target: Desired tool pose in /rc.
        q0: Initial guess; its grip value is carried through.
        settings: Damping, tolerances, iteration cap and step clamp.
        active: Arm joints allowed to move (indices into the 6 arm joints).
        position: Whether the tip position is part of the task.
        orientation: Whether the tool orientation is part of the task.

    Returns:
        A joint vector within limits meeting the enabled tolerances.

    Raises:
        NoConvergence: If the tolerances are not met within max_iter.
        JointLimitViolation: If q0 cannot be projected into the limits.
    """

    rows = ([0, 1, 2] if position else []) + ([3, 4, 5] if orientation else [])
    if not rows:
        raise ValueError("at least one of position/orientation must be enabled")
    active = list(active)

    scale = np.ones(N_ARM)
    scale[2] = PRISMATIC_SCALE
    lo, hi = chain.limits.lower[:N_ARM], chain.limits.upper[:N_ARM]

    q = chain.limits.clip(q0)
    if not chain.limits.contains(q):
        raise JointLimitViolation("initial guess cannot be projected into the limits")

    best = np.inf
    for it in range(settings.max_iter + 1):
        _, pose = forward(chain, q, check=False)
        e = pose_error(pose, target)
        pos_err = float(np.linalg.norm(e[:3]))
        rot_err = float(np.linalg.norm(e[3:]))
        best = min(best, pos_err if position else rot_err)

        if (not position or pos_err < settings.tol) and (
            not orientation or rot_err < settings.tol_rot
        ):
            log.debug(f"IK converged after {it} iteration(s): {pos_err:.2e} mm, {rot_err:.2e} rad.")
            return q

        if it == settings.max_iter:
            break

        j = jacobian(chain, q, check=False)[np.ix_(rows, active)] * scale[active]
        step = dls_step(j, e[rows], settings.damping)
        norm = np.linalg.norm(step)
        if norm > settings.step_clamp:
            step *= settings.step_clamp / norm

        arm = q.arm
        arm[active] += step * scale[active]
        q = q.with_arm(np.clip(arm, lo, hi))

    raise NoConvergence(
        f"IK did not converge in {settings.max_iter} iterations "
        f"(best residual {best:.4g})",
        best_residual=best,
        iterations=settings.max_iter,
    )


def ik_analytic_position(p_pl) -> Tuple[PositionSolution, PositionSolution]:
    """Both closed-form solutions for the first three joints.

    Solution B keeps the insertion positive (d3 = ||p||) with cos(theta2) > 0;
    solution A is the mirrored branch (theta2 + pi, d3 = -||p||). Both satisfy
    d3 * u(theta1, theta2) = p.

    Returns:
        A two-tuple (solA, solB).

    Raises:
        OutOfWorkspace: If p is the remote centre itself or not finite.
        SingularDirection: If p lies on the theta1 axis (x^2 + z^2 < 1e-12).
    """

    try:
        x, y, z = geometry.as_point(p_pl)
    except ValueError as err:
        raise OutOfWorkspace(str(err)) from err

    r = float(np.sqrt(x * x + y * y + z * z))
    if r == 0.0:
        raise OutOfWorkspace("target coincides with the remote centre")
    if x * x + z * z < 1e-12:
        raise SingularDirection("target lies on the theta1 axis, theta1 is undefined")

    theta2 = float(np.arcsin(np.clip(y / r, -1.0, 1.0)))
    theta1 = float(np.arctan2(-x, -z))

    sol_b = PositionSolution(theta1, theta2, r)
    sol_a = PositionSolution(theta1, theta2 + np.pi, -r)
    return sol_a, sol_b


def select_solution(
    sol_a: PositionSolution, sol_b: PositionSolution, limits: JointLimits
) -> PositionSolution:
    """Prefer solution B; fall back to A; fail if neither respects the limits.

    Raises:
        NoFeasibleSolution: If both violate the first three joint limits.
    """

    for sol in (sol_b, sol_a):
        if limits.contains(sol.joints(), joints=(0, 1, 2)):
            return sol

    raise NoFeasibleSolution("neither analytic solution respects the joint limits")


def wrist_angles(
    chain: KinematicChain,
    arm: PositionSolution,
    r_tool,
    settings: DlsSettings = DlsSettings(),
    prefer: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Wrist joints (theta4, theta5, theta6) realising a tool orientation.

    Closed-form ZYX candidates (both Euler branches) seed a damped
    least-squares refinement restricted to the wrist joints, which minimises
    the angular distance to the requested orientation within the limits.

    Args:
        chain: The manipulator.
        arm: The first three joints.
        r_tool: Desired tool rotation in /rc.
        settings: IK settings for the refinement.
        prefer: Wrist angles to stay close to when several candidates fit.

    Returns:
        The wrist angles.

    Raises:
        NoFeasibleSolution: If no wrist configuration within the limits
            reaches the orientation within settings.tol_rot.
    """

    r_rel = shaft_rotation(arm.theta1, arm.theta2).T @ np.asarray(r_tool, dtype=float)
    a, b, c = Rotation.from_matrix(r_rel).as_euler("ZYX")
    wrap = lambda v: (v + np.pi) % (2.0 * np.pi) - np.pi  # noqa: E731
    candidates = [np.array([a, b, c]), wrap(np.array([a + np.pi, np.pi - b, c + np.pi]))]

    lo, hi = chain.limits.lower[3:6], chain.limits.upper[3:6]
    ref = np.zeros(3) if prefer is None else np.asarray(prefer, dtype=float)
    candidates.sort(key=lambda w: (not np.all((w >= lo) & (w <= hi)), np.linalg.norm(w - ref)))

    target = RigidTransform(r_tool, np.zeros(3))
    for seed in candidates:
        q0 = arm.joints(np.clip(seed, lo, hi))
        try:
            q = ik_iterative(
                chain, target, q0, settings, active=(3, 4, 5), position=False
            )
        except NoConvergence:
            continue
        return q.arm[3:]

    raise NoFeasibleSolution("wrist cannot reach the requested orientation within its limits")


@dataclass(frozen=True, eq=False)
class JointServo(object):
    """Ideal first-order joint tracking with rate saturation.

    Args:
        tau: Time constant (s).
        max_rates: Per-joint rate limits in JointVector order (units/s).
    """

    tau: float
    max_rates: np.ndarray

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("servo time constant must be positive")
        rates = np.array(self.max_rates, dtype=float).reshape(len(JOINT_NAMES))
        if np.any(rates <= 0):
            raise ValueError("joint rate limits must be positive")
        rates.setflags(write=False)
        object.__setattr__(self, "max_rates", rates)

    def track(self, actual: JointVector, command: JointVector, dt: float) -> JointVector:
        alpha = 1.0 - np.exp(-dt / self.tau)
        delta = alpha * (command.array - actual.array)
        delta = np.clip(delta, -self.max_rates * dt, self.max_rates * dt)
        return JointVector.from_array(actual.array + delta)
