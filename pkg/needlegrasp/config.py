# coding: utf8
"""Scenario configuration.

Scenarios are stored as TOML (JSON is accepted too, picked by file suffix).
Lengths are in millimetres, angles in degrees and rates in hertz; the typed
objects built from a scenario use radians internally.

Every key a scenario may set is listed in DEFAULTS. Unknown keys are
rejected so typos do not silently fall back to a default.
"""

import json
import pathlib
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import toml

from . import utils
from .camera import CameraIntrinsics, Chessboard, StereoRig
from .exceptions import ConfigError
from .geometry import RigidTransform
from .kinematics import DlsSettings, JointLimits, JointServo, JointVector, KinematicChain
from .perception import NoiseModel, RandomWalkMotion, RateConfig, ScriptedMotion, StaticMotion
from .servo import OutcomeThresholds, ServoSettings

log = utils.get_logger(__name__)

MOTION_KINDS = ("static", "script", "random_walk")

DEFAULTS = {
    # base seed; trial i of a batch runs with seeds derived from (seed, i)
    "seed": 0,
    "trials": 40,
    # the maximum simulated time of a trial (s)
    "max_time": 30.0,
    "rig": {
        "fx": 1000.0,
        "fy": 1000.0,
        "cx": 360.0,
        "cy": 288.0,
        "width": 720,
        "height": 576,
        "baseline": 4.3,
        # ^wsT_ee: left camera position and XYZ Euler angles in /ws
        "position": [20.0, 15.0, 100.0],
        "euler": [180.0, 0.0, 0.0],
    },
    "board": {"rows": 4, "cols": 5, "square_size": 10.0},
    "chain": {
        # ^wsT_rc: remote centre position and XYZ Euler angles in /ws
        "position": [-60.0, 15.0, 130.0],
        "euler": [0.0, 0.0, 30.0],
        "wrist_length": 9.1,
        "jaw_length": 10.0,
        "tau": 0.02,
        # theta1, theta2, d3 (mm), theta4, theta5, theta6, grip
        "limits": {
            "lower": [-80.0, -80.0, 0.0, -170.0, -80.0, -80.0, 0.0],
            "upper": [80.0, 80.0, 240.0, 170.0, 80.0, 80.0, 60.0],
        },
        # deg/s, d3 in mm/s
        "max_rates": [86.0, 86.0, 100.0, 172.0, 172.0, 172.0, 172.0],
    },
    "ik": {"damping": 0.05, "tol": 0.01, "tol_rot": 1e-4, "max_iter": 200, "step_clamp": 0.1},
    "noise": {"pixel_sigma": 0.0, "dropout_prob": 0.0, "occlusion": False, "tool_radius": 4.0},
    "rates": {"camera_hz": 25.0, "tracker_hz": 8.0, "control_hz": 100.0},
    "servo": {
        # theta1, theta2, d3 (mm), theta4, theta5, theta6
        "home": [0.0, 0.0, 80.0, 0.0, 0.0, 0.0],
        "standoff": 25.0,
        "standoff_axis": [0.0, 0.0, 1.0],
        "settle_window": 8,
        "settle_epsilon": 1.0,
        "plan_average": 4,
        "waypoint_tolerance": 0.5,
        "home_tolerance": 0.5,
        "dock_height": 5.0,
        "grasp_tolerance": 1e-3,
        "grasp_timeout": 2.0,
        "grip_open": 45.0,
        "stale_periods": 2.0,
        "stale_timeout": 1.0,
    },
    "outcome": {"capture_radius": 2.0, "miss": 4.0, "fail": 20.0},
    "calibration": {
        # run the calibration procedures and servo with their estimates
        "use_estimates": False,
        "scan_points": 500,
        "tip_sigma": 1.18,
        "scan_extent": 40.0,
        "registration_points": 10,
        "registration_sigma": 0.7,
        "corner_sigma": 0.33,
    },
    "needle": {
        "radius": 12.0,
        "marker_angles": [20.0, 90.0, 160.0],
        "motion": {
            "kind": "script",
            # [t, x, y, z, rx, ry, rz]: ^wsT_needle keyframes
            "keyframes": [
                [0.0, 5.0, 5.0, 10.0, 0.0, 0.0, 0.0],
                [0.3, 5.0, 5.0, 10.0, 0.0, 0.0, 0.0],
                [1.5, 35.0, 5.0, 12.0, 0.0, 0.0, 0.0],
                [2.7, 35.0, 24.0, 10.0, 0.0, 0.0, 0.0],
                [3.9, 15.0, 22.0, 10.0, 0.0, 0.0, 0.0],
            ],
            # uniform per-trial offset of the whole script (mm, deg)
            "jitter_position": 0.0,
            "jitter_yaw": 0.0,
            "step_sigma": 2.0,
            "bound": 10.0,
            "duration": 3.0,
            "interval": 0.1,
        },
    },
}


@dataclass(frozen=True)
class CalibrationSettings(object):
    """Parameters of the simulated calibration procedures."""

    use_estimates: bool = False
    scan_points: int = 500
    tip_sigma: float = 1.18
    scan_extent: float = 40.0
    registration_points: int = 10
    registration_sigma: float = 0.7
    corner_sigma: float = 0.33

    def __post_init__(self):
        if self.scan_points < 3 or self.registration_points < 3:
            raise ValueError("calibration needs at least 3 points per procedure")
        if min(self.tip_sigma, self.registration_sigma, self.corner_sigma) < 0:
            raise ValueError("calibration noise must be non-negative")

    def exact(self) -> "CalibrationSettings":
        """The same procedures without noise."""

        return CalibrationSettings(
            self.use_estimates,
            self.scan_points,
            0.0,
            self.scan_extent,
            self.registration_points,
            0.0,
            0.0,
        )


@dataclass(frozen=True)
class NeedleSpec(object):
    radius: float
    marker_angles: Tuple[float, float, float]

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("needle radius must be positive")
        if len(self.marker_angles) != 3:
            raise ValueError("a needle carries exactly 3 markers")


def _transform(section: dict) -> RigidTransform:
    return RigidTransform.from_euler(section["position"], section["euler"])


def _vector(values, n: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (n,):
        raise ConfigError(f"{name} needs {n} values, got {len(values)}")
    return arr


class ScenarioConfig(object):
    """A validated scenario.

    Args:
        data: A complete scenario tree (see DEFAULTS), usually from from_dict.

    Attributes:
        data (dict): The merged scenario tree, in file units.
    """

    def __init__(self, data: dict):
        self.data = data

    @classmethod
    def from_dict(cls, data: Optional[dict] = None) -> "ScenarioConfig":
        """Merge a (partial) user tree into the defaults and validate it.

        Raises:
            ConfigError: If a key is unknown, a value has the wrong type or
                the typed objects reject the values.
        """

        config = cls(utils.merge_defaults(data or {}, DEFAULTS))
        config.validate()
        return config

    def with_overrides(self, overrides: dict) -> "ScenarioConfig":
        return ScenarioConfig.from_dict(utils.deep_update(self.data, overrides))

    def validate(self) -> None:
        """Build every typed object once, turning value errors into ConfigErrors."""

        try:
            self.rig
            self.board
            self.chain
            self.joint_servo
            self.ik
            self.noise(0)
            self.rates
            self.servo
            self.outcome
            self.calibration
            self.needle
            self.motion(0)
        except (ValueError, TypeError) as err:
            raise ConfigError(f"invalid scenario: {err}") from err

        if self.data["trials"] < 1:
            raise ConfigError("trials must be at least 1")
        if self.data["max_time"] <= 0:
            raise ConfigError("max_time must be positive")

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def trials(self) -> int:
        return self.data["trials"]

    @property
    def max_time(self) -> float:
        return float(self.data["max_time"])

    @property
    def intrinsics(self) -> CameraIntrinsics:
        r = self.data["rig"]
        return CameraIntrinsics(r["fx"], r["fy"], r["cx"], r["cy"], r["width"], r["height"])

    @property
    def rig(self) -> StereoRig:
        """The true stereo rig."""

        r = self.data["rig"]
        return StereoRig.parallel(self.intrinsics, r["baseline"], _transform(r).inverse())

    @property
    def board(self) -> Chessboard:
        b = self.data["board"]
        return Chessboard(b["rows"], b["cols"], b["square_size"])

    @property
    def chain(self) -> KinematicChain:
        """The true manipulator."""

        c = self.data["chain"]
        lower = _vector(c["limits"]["lower"], 7, "chain.limits.lower")
        upper = _vector(c["limits"]["upper"], 7, "chain.limits.upper")
        angular = np.array([True, True, False, True, True, True, True])
        lower[angular] = np.deg2rad(lower[angular])
        upper[angular] = np.deg2rad(upper[angular])

        return KinematicChain(
            _transform(c).inverse(),
            c["wrist_length"],
            c["jaw_length"],
            JointLimits(lower, upper),
        )

    @property
    def joint_servo(self) -> JointServo:
        c = self.data["chain"]
        rates = _vector(c["max_rates"], 7, "chain.max_rates")
        rates[[0, 1, 3, 4, 5, 6]] = np.deg2rad(rates[[0, 1, 3, 4, 5, 6]])
        return JointServo(c["tau"], rates)

    @property
    def ik(self) -> DlsSettings:
        return DlsSettings(**self.data["ik"])

    def noise(self, seed: int) -> NoiseModel:
        n = self.data["noise"]
        return NoiseModel(n["pixel_sigma"], n["dropout_prob"], seed, n["occlusion"], n["tool_radius"])

    @property
    def rates(self) -> RateConfig:
        return RateConfig(**self.data["rates"])

    @property
    def servo(self) -> ServoSettings:
        s = dict(self.data["servo"])
        home = _vector(s.pop("home"), 6, "servo.home")
        home[[0, 1, 3, 4, 5]] = np.deg2rad(home[[0, 1, 3, 4, 5]])
        s["standoff_axis"] = tuple(_vector(s["standoff_axis"], 3, "servo.standoff_axis"))
        if np.linalg.norm(s["standoff_axis"]) == 0:
            raise ConfigError("servo.standoff_axis must not be zero")
        s["grip_open"] = float(np.deg2rad(s["grip_open"]))
        return ServoSettings(home=JointVector.from_array(home), **s)

    @property
    def outcome(self) -> OutcomeThresholds:
        return OutcomeThresholds(**self.data["outcome"])

    @property
    def calibration(self) -> CalibrationSettings:
        return CalibrationSettings(**self.data["calibration"])

    @property
    def needle(self) -> NeedleSpec:
        n = self.data["needle"]
        return NeedleSpec(n["radius"], tuple(np.deg2rad(n["marker_angles"])))

    def motion(self, seed: int):
        """The needle motion of one trial.

        Args:
            seed: Seeds the script jitter and the random walk.

        Returns:
            An object with pose_at(t) and end_time.
        """

        m = self.data["needle"]["motion"]
        if m["kind"] not in MOTION_KINDS:
            raise ConfigError(f"needle.motion.kind must be one of {', '.join(MOTION_KINDS)}")

        frames = np.asarray(m["keyframes"], dtype=float)
        if frames.ndim != 2 or frames.shape[1] != 7 or len(frames) == 0:
            raise ConfigError("needle.motion.keyframes must be rows of [t, x, y, z, rx, ry, rz]")

        rng = np.random.default_rng(seed)
        offset = rng.uniform(-1.0, 1.0, 3) * m["jitter_position"]
        yaw = rng.uniform(-1.0, 1.0) * m["jitter_yaw"]
        poses = [
            RigidTransform.from_euler(f[1:4] + offset, f[4:7] + np.array([0.0, 0.0, yaw]))
            for f in frames
        ]

        if m["kind"] == "static":
            return StaticMotion(poses[0])
        if m["kind"] == "script":
            return ScriptedMotion(frames[:, 0], poses)
        return RandomWalkMotion(
            poses[0], m["step_sigma"], m["bound"], m["duration"], m["interval"], seed
        )

    def to_toml(self) -> str:
        return utils.TOML_CONF_HEADER + toml.dumps(self.data)


def load_config(pth: Optional[Union[str, pathlib.Path]] = None) -> ScenarioConfig:
    """Load a scenario file.

    Args:
        pth: A .toml or .json file. None gives the default scenario.

    Returns:
        The validated scenario.

    Raises:
        ConfigError: If the file cannot be read or parsed, or is invalid.
    """

    if pth is None:
        return ScenarioConfig.from_dict({})

    pth = pathlib.Path(pth)
    try:
        with pth.open(encoding="utf-8") as f:
            if pth.suffix.lower() == ".json":
                data = json.load(f)
            else:
                data = toml.load(f)
    except (OSError, ValueError, toml.TomlDecodeError) as err:
        raise ConfigError(f"cannot read scenario {pth}: {err}") from err

    log.debug(f"Loaded scenario from {pth}.")
    return ScenarioConfig.from_dict(data)
