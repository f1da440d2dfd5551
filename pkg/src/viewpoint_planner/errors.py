"""
This module holds the exceptions raised by the viewpoint planner library. Every exception carries a category name and
an exit code so that the plugin steps can report failures as ``error`` outputs and the command line wrapper can exit
with a distinct code per failure class.
"""
import typing
from dataclasses import dataclass


@dataclass
class ViewpointPlannerException(Exception):
    """
    ``ViewpointPlannerException`` is the base class of all library failures. The message should be understandable
    without a stack trace.
    """

    msg: str

    category: typing.ClassVar[str] = "internal"
    exit_code: typing.ClassVar[int] = 70

    def __str__(self) -> str:
        return self.msg


@dataclass
class InvalidArgumentException(ViewpointPlannerException):
    """
    ``InvalidArgumentException`` indicates that a function was called with arguments outside its documented range.
    """

    category: typing.ClassVar[str] = "invalid-argument"
    exit_code: typing.ClassVar[int] = 65


@dataclass
class NormalizationFailureException(ViewpointPlannerException):
    """
    ``NormalizationFailureException`` indicates that the spine could not be found in a set of 2D keypoints, so the
    keypoints cannot be brought into the canonical frame.
    """

    category: typing.ClassVar[str] = "normalization"
    exit_code: typing.ClassVar[int] = 66


@dataclass
class DivergenceException(ViewpointPlannerException):
    """
    ``DivergenceException`` indicates that an iterative method (training or trajectory optimization) produced a
    non-finite value. ``step`` holds the epoch or iteration index.
    """

    step: int = -1

    category: typing.ClassVar[str] = "divergence"
    exit_code: typing.ClassVar[int] = 67

    def __str__(self) -> str:
        return "{} (at step {})".format(self.msg, self.step)


@dataclass
class OutOfBoundsException(ViewpointPlannerException):
    """
    ``OutOfBoundsException`` indicates a field query outside its lattice. ``value`` and ``gradient`` hold the result
    of sampling at the clamped boundary point so that callers can continue with a saturated value.
    """

    value: float = 0.0
    gradient: typing.Optional[typing.Any] = None

    category: typing.ClassVar[str] = "out-of-bounds"
    exit_code: typing.ClassVar[int] = 68


@dataclass
class NoViewpointException(ViewpointPlannerException):
    """
    ``NoViewpointException`` indicates that none of the candidate viewpoints is both visible and safe.
    """

    category: typing.ClassVar[str] = "no-viewpoint"
    exit_code: typing.ClassVar[int] = 69


@dataclass
class EpisodeAbortException(ViewpointPlannerException):
    """
    ``EpisodeAbortException`` indicates that a simulated episode could not continue, for example because the drone
    left the environment bounds.
    """

    tick: int = -1

    category: typing.ClassVar[str] = "episode-abort"
    exit_code: typing.ClassVar[int] = 71

    def __str__(self) -> str:
        return "{} (at tick {})".format(self.msg, self.tick)
