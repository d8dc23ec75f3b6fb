# coding: utf8
"""needlegrasp exceptions."""


class NeedleGraspError(Exception):
    pass


class ConfigError(NeedleGraspError):
    pass


class GeometryError(NeedleGraspError):
    pass


class CollinearPoints(GeometryError):
    pass


class DegenerateConfiguration(GeometryError):
    pass


class CameraError(NeedleGraspError):
    pass


class BehindCamera(CameraError):
    pass


class DegenerateRays(CameraError):
    pass


class OutOfImage(CameraError):
    pass


class InsufficientCorners(CameraError):
    pass


class IllConditioned(CameraError):
    pass


class KinematicsError(NeedleGraspError):
    pass


class JointLimitViolation(KinematicsError):
    pass


class NoConvergence(KinematicsError):
    """Raised when the iterative IK runs out of iterations.

    Attributes:
        best_residual: The smallest position residual (mm) seen during the run.
        iterations: Number of iterations performed.
    """

    def __init__(self, message: str, best_residual: float, iterations: int):
        super().__init__(message)
        self.best_residual = best_residual
        self.iterations = iterations


class OutOfWorkspace(KinematicsError):
    pass


class SingularDirection(KinematicsError):
    pass


class NoFeasibleSolution(KinematicsError):
    pass


class NumericalFailure(KinematicsError):
    pass


class PerceptionError(NeedleGraspError):
    pass


class InsufficientMarkers(PerceptionError):
    pass


class ServoError(NeedleGraspError):
    pass


class StaleEstimate(ServoError):
    """Raised when the newest needle estimate is too old to servo on.

    Attributes:
        age: Age of the estimate in seconds (inf if there never was one).
    """

    def __init__(self, message: str, age: float):
        super().__init__(message)
        self.age = age


class MismatchReport(NeedleGraspError):
    """Raised when recomputed accuracy-table errors disagree with the tabulated ones.

    Attributes:
        rows: The offending table rows (empty when only the mean is off).
    """

    def __init__(self, message: str, rows: list):
        super().__init__(message)
        self.rows = rows
