"""
This module brings detected 2D keypoints into a canonical frame defined by the spine (neck to hip midpoint), which
quotients out translation, in-plane rotation and scale before the keypoints reach the error network.

Pixel coordinates grow downward. In the normalized frame ``+y`` is up: the spine midpoint sits at the origin, the
neck at ``(0, 0.5)`` and the hip point at ``(0, -0.5)``.
"""
import math
import typing
from dataclasses import dataclass

import numpy as np

from viewpoint_planner import skeleton
from viewpoint_planner.errors import InvalidArgumentException, NormalizationFailureException
from viewpoint_planner.serialization import format_float

MIN_SPINE_LENGTH = 1.0
"""Shortest spine, in pixels, that can be normalized."""

VECTOR_SIZE = 3 * skeleton.NUM_JOINTS


@dataclass(frozen=True)
class SpineAnchor:
    midpoint: np.ndarray
    direction: np.ndarray
    length: float


@dataclass(frozen=True, eq=False)
class NormalizedPose:
    """
    ``NormalizedPose`` holds the normalized ``(x, y)`` of every joint and a visibility mask. Invisible joints are
    stored as ``(0, 0)``.
    """

    coords: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float).reshape(skeleton.NUM_JOINTS, 2)
        mask = np.array(self.mask, dtype=bool).reshape(skeleton.NUM_JOINTS)
        coords[~mask] = 0.0
        coords.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "mask", mask)

    def vector(self) -> np.ndarray:
        """
        :return: the network input, coordinates first then the mask as 0/1 values.
        """
        return np.concatenate([self.coords.reshape(-1), self.mask.astype(float)])

    @classmethod
    def from_vector(cls, vector: typing.Sequence[float]) -> "NormalizedPose":
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (VECTOR_SIZE,):
            raise InvalidArgumentException(
                "A normalized pose vector has {} entries, got {}".format(VECTOR_SIZE, vector.shape)
            )
        return cls(vector[: 2 * skeleton.NUM_JOINTS], vector[2 * skeleton.NUM_JOINTS:] > 0.5)

    def to_line(self) -> str:
        return " ".join(format_float(v) for v in self.vector())

    @classmethod
    def from_line(cls, line: str) -> "NormalizedPose":
        return cls.from_vector([float(v) for v in line.split()])

    def as_keypoints(self) -> skeleton.Keypoints2D:
        """
        :return: the pose expressed back in pixel orientation (``v`` down), for example to normalize it again.
        """
        uv = self.coords * np.array([1.0, -1.0])
        return skeleton.Keypoints2D(uv, self.mask)

    def __eq__(self, other) -> bool:
        if not isinstance(other, NormalizedPose):
            return NotImplemented
        return bool(np.array_equal(self.coords, other.coords) and np.array_equal(self.mask, other.mask))


def spine_anchor(kp: skeleton.Keypoints2D) -> SpineAnchor:
    """
    This function finds the spine in a set of keypoints: the segment from the hip point (midpoint of the visible hips,
    or the single visible hip) to the neck.

    :return: the spine midpoint, the unit direction from the hip point to the neck (pixels) and the length in pixels.
    """
    if not kp.visible[skeleton.NECK]:
        raise NormalizationFailureException("The neck is not visible")
    hips = [j for j in (skeleton.L_HIP, skeleton.R_HIP) if kp.visible[j]]
    if not hips:
        raise NormalizationFailureException("Neither hip is visible")
    neck = kp.uv[skeleton.NECK]
    hip_point = kp.uv[hips].mean(axis=0)
    spine = neck - hip_point
    length = float(np.linalg.norm(spine))
    if not length >= MIN_SPINE_LENGTH:
        raise NormalizationFailureException(
            "The spine is {:.3g} pixels long, shorter than {} pixel".format(length, MIN_SPINE_LENGTH)
        )
    return SpineAnchor((neck + hip_point) / 2.0, spine / length, length)


def normalize_keypoints(kp: skeleton.Keypoints2D) -> NormalizedPose:
    """
    This function maps every visible joint ``p`` to ``R·(p − midpoint)/length`` where ``R`` turns the spine direction
    into ``+y`` of the (upward) normalized frame.
    """
    anchor = spine_anchor(kp)
    flip = np.array([1.0, -1.0])
    dx, dy = anchor.direction * flip
    rotation = np.array([[dy, -dx], [dx, dy]])
    relative = (kp.uv - anchor.midpoint) * flip / anchor.length
    coords = relative @ rotation.T
    return NormalizedPose(coords, kp.visible)


def similarity_transform(
    kp: skeleton.Keypoints2D,
    translation: typing.Sequence[float] = (0.0, 0.0),
    angle: float = 0.0,
    scale: float = 1.0,
    center: typing.Optional[typing.Sequence[float]] = None,
) -> skeleton.Keypoints2D:
    """
    This function rotates the visible keypoints by ``angle`` and scales them about ``center`` (their centroid by
    default), then translates them. Visibility flags are kept as they are.
    """
    if not scale > 0:
        raise InvalidArgumentException("Scale must be positive, got {}".format(scale))
    visible = kp.visible
    if center is None:
        center = kp.uv[visible].mean(axis=0) if visible.any() else np.zeros(2)
    c, s = math.cos(angle), math.sin(angle)
    rotation = np.array([[c, -s], [s, c]])
    uv = (kp.uv - center) @ rotation.T * scale + center + np.asarray(translation, dtype=float)
    return skeleton.Keypoints2D(uv, visible, kp.width, kp.height)
