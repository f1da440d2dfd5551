"""
This module provides the articulated human model used throughout the planner: a 17 joint skeleton with capsule limbs,
forward kinematics driven by ``PoseParams``, pinhole projection into a ``CameraView`` and a simulated, imperfect 2D
keypoint detector whose failures come from geometric self-occlusion.

Conventions
===========

World coordinates are meters with ``z`` up. A subject with heading 0 faces ``+x`` and its left side points to ``+y``.
Image coordinates are pixels with ``u`` to the right and ``v`` growing downward.
"""
import dataclasses
import io
import math
import typing
from dataclasses import dataclass

import numpy as np
from arcaflow_plugin_sdk import schema
from scipy.spatial.transform import Rotation

from viewpoint_planner.errors import InvalidArgumentException

JOINT_NAMES: typing.Tuple[str, ...] = (
    "nose",
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
    "mid_hip",
    "l_eye",
    "r_eye",
)
NUM_JOINTS = len(JOINT_NAMES)

NOSE = 0
NECK = 1
L_SHOULDER = 2
R_SHOULDER = 3
L_ELBOW = 4
R_ELBOW = 5
L_WRIST = 6
R_WRIST = 7
L_HIP = 8
R_HIP = 9
L_KNEE = 10
R_KNEE = 11
L_ANKLE = 12
R_ANKLE = 13
MID_HIP = 14
L_EYE = 15
R_EYE = 16

# Horizontal mirror partner of every joint, used for symmetry checks.
MIRROR = (0, 1, 3, 2, 5, 4, 7, 6, 9, 8, 11, 10, 13, 12, 14, 16, 15)

TORSO_RADIUS = 0.14
HEAD_RADIUS = 0.10
LIMB_RADIUS = 0.05
FACE_RADIUS = 0.02

INVISIBLE = -1.0
"""Sentinel pixel coordinate stored for joints that are not visible."""


@dataclass(frozen=True)
class Bone:
    """
    A bone links a parent joint to a child joint. Its capsule (the segment between the two joints, inflated by
    ``radius``) is the body volume used for occlusion tests.
    """

    parent: int
    child: int
    radius: float


DEFAULT_BONES: typing.Tuple[Bone, ...] = (
    Bone(MID_HIP, NECK, TORSO_RADIUS),
    Bone(NECK, NOSE, HEAD_RADIUS),
    Bone(NOSE, L_EYE, FACE_RADIUS),
    Bone(NOSE, R_EYE, FACE_RADIUS),
    Bone(NECK, L_SHOULDER, LIMB_RADIUS),
    Bone(NECK, R_SHOULDER, LIMB_RADIUS),
    Bone(L_SHOULDER, L_ELBOW, LIMB_RADIUS),
    Bone(L_ELBOW, L_WRIST, LIMB_RADIUS),
    Bone(R_SHOULDER, R_ELBOW, LIMB_RADIUS),
    Bone(R_ELBOW, R_WRIST, LIMB_RADIUS),
    Bone(MID_HIP, L_HIP, LIMB_RADIUS),
    Bone(MID_HIP, R_HIP, LIMB_RADIUS),
    Bone(L_HIP, L_KNEE, LIMB_RADIUS),
    Bone(L_KNEE, L_ANKLE, LIMB_RADIUS),
    Bone(R_HIP, R_KNEE, LIMB_RADIUS),
    Bone(R_KNEE, R_ANKLE, LIMB_RADIUS),
)


@dataclass(frozen=True, eq=False)
class Skeleton3D:
    """
    ``Skeleton3D`` holds the 3D joint positions (meters, ``JOINT_NAMES`` order) and the capsule bones of one body.
    The bones form a tree rooted at the mid-hip joint; the tree is listed parents-first.
    """

    joints: np.ndarray
    bones: typing.Tuple[Bone, ...] = DEFAULT_BONES

    def __post_init__(self):
        joints = np.array(self.joints, dtype=float)
        if joints.shape != (NUM_JOINTS, 3):
            raise InvalidArgumentException(
                "Skeleton needs {} joints with 3 coordinates, got shape {}".format(
                    NUM_JOINTS, joints.shape
                )
            )
        if not np.all(np.isfinite(joints)):
            raise InvalidArgumentException("Skeleton joint coordinates must be finite")
        reached = {MID_HIP}
        for bone in self.bones:
            if not (0 <= bone.parent < NUM_JOINTS and 0 <= bone.child < NUM_JOINTS):
                raise InvalidArgumentException(
                    "Bone {}->{} references an invalid joint".format(
                        bone.parent, bone.child
                    )
                )
            if bone.radius <= 0:
                raise InvalidArgumentException(
                    "Bone {}->{} has non-positive radius {}".format(
                        bone.parent, bone.child, bone.radius
                    )
                )
            if bone.parent not in reached or bone.child in reached:
                raise InvalidArgumentException(
                    "Bones must form a tree rooted at mid_hip listed parents-first, "
                    "bone {}->{} breaks this".format(bone.parent, bone.child)
                )
            reached.add(bone.child)
        if len(reached) != NUM_JOINTS:
            raise InvalidArgumentException(
                "Bones must reach every joint, missing: {}".format(
                    ", ".join(JOINT_NAMES[j] for j in range(NUM_JOINTS) if j not in reached)
                )
            )
        joints.setflags(write=False)
        object.__setattr__(self, "joints", joints)

    @property
    def center(self) -> np.ndarray:
        """
        :return: the mid-hip joint, which is the subject center cameras look at.
        """
        return self.joints[MID_HIP]

    @property
    def head(self) -> np.ndarray:
        return self.joints[NOSE]

    def bone_lengths(self) -> np.ndarray:
        return np.array(
            [np.linalg.norm(self.joints[b.child] - self.joints[b.parent]) for b in self.bones]
        )

    def spine_length(self) -> float:
        return float(np.linalg.norm(self.joints[NECK] - self.joints[MID_HIP]))


def _angle(
    name: str,
    description: str,
    low: float,
    high: float,
) -> typing.Any:
    return typing.Annotated[
        float,
        schema.min(low),
        schema.max(high),
        schema.name(name),
        schema.description(description),
    ]


@dataclass(frozen=True)
class PoseParams:
    """
    ``PoseParams`` holds the joint angles (radians) applied on top of the canonical T-pose, the gait phase and the
    root placement. All zeros is the T-pose at the origin facing ``+x``.
    """

    l_shoulder_abduction: _angle(
        "Left shoulder abduction",
        "Raises (positive) or lowers (negative) the left arm in the body's frontal plane.",
        -math.pi / 2,
        math.pi / 2,
    ) = 0.0
    r_shoulder_abduction: _angle(
        "Right shoulder abduction",
        "Raises (positive) or lowers (negative) the right arm in the body's frontal plane.",
        -math.pi / 2,
        math.pi / 2,
    ) = 0.0
    l_shoulder_flexion: _angle(
        "Left shoulder flexion",
        "Swings the left arm forward (positive) or backward (negative).",
        -math.pi / 2,
        math.pi / 2,
    ) = 0.0
    r_shoulder_flexion: _angle(
        "Right shoulder flexion",
        "Swings the right arm forward (positive) or backward (negative).",
        -math.pi / 2,
        math.pi / 2,
    ) = 0.0
    l_elbow: _angle("Left elbow", "Left elbow flexion.", 0.0, 5 * math.pi / 6) = 0.0
    r_elbow: _angle("Right elbow", "Right elbow flexion.", 0.0, 5 * math.pi / 6) = 0.0
    l_hip: _angle(
        "Left hip", "Left hip flexion, positive moves the thigh forward.", -math.pi / 6, math.pi / 2
    ) = 0.0
    r_hip: _angle(
        "Right hip", "Right hip flexion, positive moves the thigh forward.", -math.pi / 6, math.pi / 2
    ) = 0.0
    l_knee: _angle("Left knee", "Left knee flexion.", 0.0, 5 * math.pi / 6) = 0.0
    r_knee: _angle("Right knee", "Right knee flexion.", 0.0, 5 * math.pi / 6) = 0.0
    gait_phase: typing.Annotated[
        float,
        schema.name("Gait phase"),
        schema.description("Walking cycle phase in radians, wrapped modulo 2*pi."),
    ] = 0.0
    root_x: typing.Annotated[float, schema.name("Root x")] = 0.0
    root_y: typing.Annotated[float, schema.name("Root y")] = 0.0
    root_z: typing.Annotated[
        float,
        schema.name("Root z"),
        schema.description("Height of the mid-hip joint in meters."),
    ] = 0.0
    heading: typing.Annotated[
        float,
        schema.name("Heading"),
        schema.description("Facing direction in radians, 0 faces +x."),
    ] = 0.0

    @property
    def root_position(self) -> np.ndarray:
        return np.array([self.root_x, self.root_y, self.root_z])

    def wrapped_phase(self) -> float:
        return self.gait_phase % (2 * math.pi)

    def check_limits(self) -> None:
        """
        This function raises an ``InvalidArgumentException`` naming the first angle outside its joint limit.
        """
        for name, (low, high) in JOINT_LIMITS.items():
            value = getattr(self, name)
            if not low - 1e-12 <= value <= high + 1e-12:
                raise InvalidArgumentException(
                    "{}={} is outside its joint limit [{}, {}]".format(name, value, low, high)
                )
        for name in ("gait_phase", "root_x", "root_y", "root_z", "heading"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidArgumentException("{} must be finite".format(name))


JOINT_LIMITS: typing.Dict[str, typing.Tuple[float, float]] = {
    "l_shoulder_abduction": (-math.pi / 2, math.pi / 2),
    "r_shoulder_abduction": (-math.pi / 2, math.pi / 2),
    "l_shoulder_flexion": (-math.pi / 2, math.pi / 2),
    "r_shoulder_flexion": (-math.pi / 2, math.pi / 2),
    "l_elbow": (0.0, 5 * math.pi / 6),
    "r_elbow": (0.0, 5 * math.pi / 6),
    "l_hip": (-math.pi / 6, math.pi / 2),
    "r_hip": (-math.pi / 6, math.pi / 2),
    "l_knee": (0.0, 5 * math.pi / 6),
    "r_knee": (0.0, 5 * math.pi / 6),
}


@dataclass(frozen=True)
class CameraView:
    """
    ``CameraView`` places a pinhole camera on a sphere around ``look_at``: azimuth ``θ`` in ``[0, 2π)``, elevation
    ``φ`` in ``[0, π/2]`` (``π/2`` is the zenith) and radius ``r``. The principal axis always points at ``look_at``.
    """

    azimuth: float
    elevation: float
    radius: float
    look_at: typing.Tuple[float, float, float] = (0.0, 0.0, 0.0)
    focal: float = 500.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (math.isfinite(self.azimuth) and math.isfinite(self.elevation)):
            raise InvalidArgumentException("Camera angles must be finite")
        if not -1e-12 <= self.elevation <= math.pi / 2 + 1e-12:
            raise InvalidArgumentException(
                "Camera elevation {} is outside [0, pi/2]".format(self.elevation)
            )
        if not self.radius > 0:
            raise InvalidArgumentException("Camera radius must be positive")
        if not self.focal > 0 or self.width < 1 or self.height < 1:
            raise InvalidArgumentException("Camera intrinsics must be positive")
        object.__setattr__(self, "azimuth", self.azimuth % (2 * math.pi))
        object.__setattr__(self, "look_at", tuple(float(c) for c in self.look_at))

    @classmethod
    def from_position(
        cls,
        position: typing.Sequence[float],
        look_at: typing.Sequence[float],
        focal: float = 500.0,
        width: int = 640,
        height: int = 480,
    ) -> "CameraView":
        """
        This function builds the camera located at ``position`` that looks at ``look_at``.
        """
        offset = np.asarray(position, dtype=float) - np.asarray(look_at, dtype=float)
        radius = float(np.linalg.norm(offset))
        if radius <= 0:
            raise InvalidArgumentException("Camera cannot sit on its look-at point")
        elevation = math.asin(max(-1.0, min(1.0, offset[2] / radius)))
        azimuth = math.atan2(offset[1], offset[0])
        return cls(azimuth, elevation, radius, tuple(look_at), focal, width, height)

    def direction(self) -> np.ndarray:
        """
        :return: the unit vector from ``look_at`` to the camera center.
        """
        ce = math.cos(self.elevation)
        return np.array(
            [
                ce * math.cos(self.azimuth),
                ce * math.sin(self.azimuth),
                math.sin(self.elevation),
            ]
        )

    @property
    def position(self) -> np.ndarray:
        return np.asarray(self.look_at) + self.radius * self.direction()

    def rotation(self) -> np.ndarray:
        """
        :return: the world-to-camera rotation whose rows are the image right, image down and forward axes.
        """
        forward = -self.direction()
        right = np.array([-math.sin(self.azimuth), math.cos(self.azimuth), 0.0])
        down = np.cross(forward, right)
        return np.stack([right, down, forward])

    def with_look_at(self, look_at: typing.Sequence[float]) -> "CameraView":
        return dataclasses.replace(self, look_at=tuple(look_at))


@dataclass(frozen=True, eq=False)
class Keypoints2D:
    """
    ``Keypoints2D`` holds per joint pixel coordinates (``JOINT_NAMES`` order) and visibility flags. Invisible joints
    carry the ``INVISIBLE`` sentinel in both coordinates.
    """

    uv: np.ndarray
    visible: np.ndarray
    width: int = 640
    height: int = 480

    def __post_init__(self):
        uv = np.array(self.uv, dtype=float).reshape(NUM_JOINTS, 2)
        visible = np.array(self.visible, dtype=bool).reshape(NUM_JOINTS)
        uv[~visible] = INVISIBLE
        uv.setflags(write=False)
        visible.setflags(write=False)
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "visible", visible)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Keypoints2D):
            return NotImplemented
        return bool(
            np.array_equal(self.uv, other.uv)
            and np.array_equal(self.visible, other.visible)
            and self.width == other.width
            and self.height == other.height
        )


@dataclass
class DetectorParams:
    """
    These are the error statistics of the simulated 2D keypoint detector.
    """

    base_noise: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("Base noise"),
        schema.description("Standard deviation in pixels of the error on unoccluded joints."),
    ] = 2.0
    occluded_noise: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("Occluded noise"),
        schema.description("Standard deviation in pixels of the error on occluded joints that are still reported."),
    ] = 15.0
    drop_probability: typing.Annotated[
        float,
        schema.min(0.0),
        schema.max(1.0),
        schema.name("Drop probability"),
        schema.description("Probability that an occluded joint is not reported at all."),
    ] = 0.5

    def check(self) -> None:
        if self.base_noise < 0 or self.occluded_noise < 0:
            raise InvalidArgumentException("Detector noise must be non-negative")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise InvalidArgumentException("Drop probability must lie in [0, 1]")


def build_canonical_skeleton(height: float = 1.8) -> Skeleton3D:
    """
    This function builds an upright T-pose skeleton with the mid-hip at the origin, facing ``+x``. The
    ankle-to-nose distance is close to ``height`` and the spine (neck to mid-hip) is ``0.30·height``.

    :param height: body height in meters, between 1.0 and 2.2.
    :return: the canonical skeleton.
    """
    if not 1.0 <= height <= 2.2:
        raise InvalidArgumentException(
            "Body height {} is outside [1.0, 2.2] meters".format(height)
        )
    h = height
    joints = np.zeros((NUM_JOINTS, 3))
    joints[MID_HIP] = (0.0, 0.0, 0.0)
    joints[NECK] = (0.0, 0.0, 0.30 * h)
    joints[NOSE] = (0.045 * h, 0.0, 0.365 * h)
    joints[L_EYE] = (0.03 * h, 0.025 * h, 0.375 * h)
    joints[R_EYE] = (0.03 * h, -0.025 * h, 0.375 * h)
    for side, shoulder, elbow, wrist in ((1.0, L_SHOULDER, L_ELBOW, L_WRIST), (-1.0, R_SHOULDER, R_ELBOW, R_WRIST)):
        joints[shoulder] = (0.0, side * 0.13 * h, 0.30 * h)
        joints[elbow] = (0.0, side * 0.30 * h, 0.30 * h)
        joints[wrist] = (0.0, side * 0.45 * h, 0.30 * h)
    for side, hip, knee, ankle in ((1.0, L_HIP, L_KNEE, L_ANKLE), (-1.0, R_HIP, R_KNEE, R_ANKLE)):
        joints[hip] = (0.0, side * 0.09 * h, 0.0)
        joints[knee] = (0.0, side * 0.09 * h, -0.30 * h)
        joints[ankle] = (0.0, side * 0.09 * h, -0.60 * h)
    return Skeleton3D(joints)


def _rot(axis: str, angle: float) -> np.ndarray:
    return Rotation.from_euler(axis, angle).as_matrix()


def _local_rotations(params: PoseParams) -> typing.Dict[int, np.ndarray]:
    """
    This function computes the rotation applied to the bones leaving each articulated joint, expressed in the body
    frame of the canonical pose and already composed with the parent joint's rotation.
    """
    result = {}
    for side, shoulder, elbow, abduction, flexion, elbow_angle in (
        (1.0, L_SHOULDER, L_ELBOW, params.l_shoulder_abduction, params.l_shoulder_flexion, params.l_elbow),
        (-1.0, R_SHOULDER, R_ELBOW, params.r_shoulder_abduction, params.r_shoulder_flexion, params.r_elbow),
    ):
        upper = _rot("x", side * abduction) @ _rot("z", -side * flexion)
        result[shoulder] = upper
        result[elbow] = upper @ _rot("z", -side * elbow_angle)
    for hip, knee, hip_angle, knee_angle in (
        (L_HIP, L_KNEE, params.l_hip, params.l_knee),
        (R_HIP, R_KNEE, params.r_hip, params.r_knee),
    ):
        thigh = _rot("y", -hip_angle)
        result[hip] = thigh
        result[knee] = thigh @ _rot("y", knee_angle)
    return result


def animate(base: Skeleton3D, params: PoseParams) -> Skeleton3D:
    """
    This function applies forward kinematics along the bone tree of ``base`` and places the result at the root
    position and heading of ``params``. Bone lengths are preserved exactly.

    :param base: the rest pose, normally from ``build_canonical_skeleton``.
    :param params: joint angles and root placement.
    :return: the posed skeleton.
    """
    params.check_limits()
    rotations = _local_rotations(params)
    identity = np.eye(3)
    posed = base.joints.copy()
    for bone in base.bones:
        offset = base.joints[bone.child] - base.joints[bone.parent]
        posed[bone.child] = posed[bone.parent] + rotations.get(bone.parent, identity) @ offset
    root = _rot("z", params.heading)
    placed = (posed - base.joints[MID_HIP]) @ root.T + params.root_position
    return Skeleton3D(placed, base.bones)


def gait_params(
    phase: float,
    stride: float = 0.45,
    arm_swing: float = 0.35,
    root: typing.Sequence[float] = (0.0, 0.0, 0.0),
    heading: float = 0.0,
) -> PoseParams:
    """
    This function generates a walking pose: the thighs swing sinusoidally in opposition, knees bend during the swing
    phase and the lowered arms swing against the legs.

    :param phase: gait phase in radians.
    :param stride: hip flexion amplitude in radians.
    :param arm_swing: shoulder flexion amplitude in radians.
    :param root: mid-hip position.
    :param heading: walking direction.
    """
    s = math.sin(phase)
    left_knee = 0.6 * max(0.0, math.sin(phase + math.pi / 2))
    right_knee = 0.6 * max(0.0, math.sin(phase - math.pi / 2))
    arms_down = -math.pi / 2 + 0.12
    return PoseParams(
        l_shoulder_abduction=arms_down,
        r_shoulder_abduction=arms_down,
        l_shoulder_flexion=-arm_swing * s,
        r_shoulder_flexion=arm_swing * s,
        l_elbow=0.3,
        r_elbow=0.3,
        l_hip=stride * s,
        r_hip=-stride * s,
        l_knee=left_knee,
        r_knee=right_knee,
        gait_phase=phase % (2 * math.pi),
        root_x=float(root[0]),
        root_y=float(root[1]),
        root_z=float(root[2]),
        heading=heading,
    )


def project(s: Skeleton3D, cam: CameraView) -> Keypoints2D:
    """
    This function is the ground truth pinhole projection of every joint. Joints behind the camera plane or outside
    the image are flagged invisible; occlusion is not considered.
    """
    uv, in_front = _project_points(s.joints, cam)
    return Keypoints2D(uv, in_front & _inside_image(uv, cam.width, cam.height), cam.width, cam.height)


def projected_spine_length(s: Skeleton3D, cam: CameraView) -> float:
    """
    :return: the neck to mid-hip distance in pixels, or NaN when either end lies behind the camera. The ends may
        project outside the image.
    """
    uv, in_front = _project_points(s.joints[[NECK, MID_HIP]], cam)
    if not in_front.all():
        return math.nan
    return float(np.linalg.norm(uv[0] - uv[1]))


def _project_points(points: np.ndarray, cam: CameraView) -> typing.Tuple[np.ndarray, np.ndarray]:
    camera_points = (points - cam.position) @ cam.rotation().T
    depth = camera_points[:, 2]
    in_front = depth > 1e-9
    safe_depth = np.where(in_front, depth, 1.0)
    uv = np.empty((points.shape[0], 2))
    uv[:, 0] = cam.focal * camera_points[:, 0] / safe_depth + cam.width / 2.0
    uv[:, 1] = cam.focal * camera_points[:, 1] / safe_depth + cam.height / 2.0
    return uv, in_front


def _inside_image(uv: np.ndarray, width: int, height: int) -> np.ndarray:
    return (uv[..., 0] >= 0) & (uv[..., 0] < width) & (uv[..., 1] >= 0) & (uv[..., 1] < height)


def segment_distance(
    p1: np.ndarray, q1: np.ndarray, p2: np.ndarray, q2: np.ndarray
) -> np.ndarray:
    """
    This function computes the minimum distance between the segments ``p1 q1`` and ``p2 q2``. All arguments broadcast
    against each other with a trailing dimension of 3.
    """
    eps = 1e-18
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    a, e, f, c, b = np.broadcast_arrays(a, e, f, c, b)
    safe_a = np.where(a > eps, a, 1.0)
    safe_e = np.where(e > eps, e, 1.0)
    denom = a * e - b * b
    safe_denom = np.where(denom > eps * np.maximum(a * e, 1.0), denom, 1.0)

    s = np.where(denom > eps * np.maximum(a * e, 1.0), np.clip((b * f - c * e) / safe_denom, 0.0, 1.0), 0.0)
    t = (b * s + f) / safe_e
    s = np.where(t < 0.0, np.clip(-c / safe_a, 0.0, 1.0), np.where(t > 1.0, np.clip((b - c) / safe_a, 0.0, 1.0), s))
    t = np.clip(t, 0.0, 1.0)

    # Degenerate segments collapse to points.
    point_second = e <= eps
    s = np.where(point_second, np.clip(-c / safe_a, 0.0, 1.0), s)
    t = np.where(point_second, 0.0, t)
    point_first = a <= eps
    s = np.where(point_first, 0.0, s)
    t = np.where(point_first, np.clip(f / safe_e, 0.0, 1.0), t)
    both = point_first & point_second
    t = np.where(both, 0.0, t)

    closest1 = p1 + d1 * s[..., None]
    closest2 = p2 + d2 * t[..., None]
    return np.linalg.norm(closest1 - closest2, axis=-1)


def segment_hits_capsule(
    a: np.ndarray, b: np.ndarray, p: np.ndarray, q: np.ndarray, radius: np.ndarray
) -> np.ndarray:
    """
    :return: whether the segment ``a b`` intersects the capsule around ``p q`` with the given radius (broadcasting).
    """
    return segment_distance(a, b, p, q) <= radius


def _adjacency(bones: typing.Sequence[Bone]) -> np.ndarray:
    adjacent = np.zeros((NUM_JOINTS, len(bones)), dtype=bool)
    for i, bone in enumerate(bones):
        adjacent[bone.parent, i] = True
        adjacent[bone.child, i] = True
    return adjacent


def occlusion_mask(s: Skeleton3D, camera_positions: np.ndarray) -> np.ndarray:
    """
    This function decides, for each camera center and joint, whether the sight line from the camera to the joint
    passes through a bone capsule other than the ones attached to the joint. A capsule never hides a joint lying
    inside it (the eyes sit inside the head capsule, for example).

    :param s: the skeleton.
    :param camera_positions: camera centers, shape ``(V, 3)``.
    :return: boolean occlusion flags, shape ``(V, NUM_JOINTS)``.
    """
    cams = np.asarray(camera_positions, dtype=float).reshape(-1, 3)
    bones = s.bones
    p = np.array([s.joints[b.parent] for b in bones])
    q = np.array([s.joints[b.child] for b in bones])
    radius = np.array([b.radius for b in bones])

    joint_to_bone = segment_distance(
        s.joints[:, None, :], s.joints[:, None, :], p[None, :, :], q[None, :, :]
    )
    candidates = ~_adjacency(bones) & (joint_to_bone >= radius[None, :])

    hits = segment_hits_capsule(
        cams[:, None, None, :],
        s.joints[None, :, None, :],
        p[None, None, :, :],
        q[None, None, :, :],
        radius[None, None, :],
    )
    return np.any(hits & candidates[None, :, :], axis=-1)


def sample_detections(
    truth: Keypoints2D,
    occluded: np.ndarray,
    det: DetectorParams,
    rng: np.random.Generator,
    trials: int,
) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    This function draws ``trials`` detector outputs at once. Every draw consumes the same amount of randomness
    (one normal pair and one uniform per joint) regardless of the outcome, which keeps streams aligned.

    :return: pixel coordinates ``(trials, J, 2)`` and visibility ``(trials, J)``.
    """
    noise = rng.standard_normal((trials, NUM_JOINTS, 2))
    drop_draw = rng.random((trials, NUM_JOINTS))
    sigma = np.where(occluded, det.occluded_noise, det.base_noise)
    uv = truth.uv[None, :, :] + noise * sigma[None, :, None]
    dropped = occluded[None, :] & (drop_draw < det.drop_probability)
    visible = truth.visible[None, :] & ~dropped & _inside_image(uv, truth.width, truth.height)
    uv = np.where(visible[..., None], uv, INVISIBLE)
    return uv, visible


def detect(
    s: Skeleton3D, cam: CameraView, det: DetectorParams, seed: int
) -> Keypoints2D:
    """
    This function simulates an imperfect 2D pose detector. Unoccluded joints receive Gaussian noise with deviation
    ``base_noise``; occluded joints are dropped with ``drop_probability`` and otherwise receive ``occluded_noise``.
    Joints pushed out of the image are reported invisible. The output is a pure function of the inputs and ``seed``.
    """
    det.check()
    truth = project(s, cam)
    occluded = occlusion_mask(s, cam.position[None, :])[0]
    uv, visible = sample_detections(truth, occluded, det, np.random.default_rng(seed), 1)
    return Keypoints2D(uv[0], visible[0], cam.width, cam.height)


SEQUENCE_HEADER = "# viewpoint-planner skeleton sequence v1"


def dump_sequence(
    frames: typing.Sequence[typing.Tuple[float, Skeleton3D]], stream: io.TextIOBase
) -> None:
    """
    This function writes a pose sequence: a commented header naming the joint order, then one line per frame with
    the time followed by an ``x y z`` triple per joint.
    """
    stream.write(SEQUENCE_HEADER + "\n")
    stream.write("# joints: " + " ".join(JOINT_NAMES) + "\n")
    stream.write("# columns: t, then x y z in meters for each joint\n")
    for t, s in frames:
        values = [repr(float(t))] + [repr(float(v)) for v in s.joints.reshape(-1)]
        stream.write(" ".join(values) + "\n")


def load_sequence(
    stream: io.TextIOBase, bones: typing.Tuple[Bone, ...] = DEFAULT_BONES
) -> typing.List[typing.Tuple[float, Skeleton3D]]:
    frames = []
    for line_no, line in enumerate(stream, start=1):
        line = line.strip()
        if line == "" or line.startswith("#"):
            continue
        values = line.split()
        if len(values) != 1 + 3 * NUM_JOINTS:
            raise InvalidArgumentException(
                "Line {}: expected {} values, found {}".format(
                    line_no, 1 + 3 * NUM_JOINTS, len(values)
                )
            )
        try:
            numbers = [float(v) for v in values]
        except ValueError as e:
            raise InvalidArgumentException("Line {}: {}".format(line_no, e)) from e
        frames.append((numbers[0], Skeleton3D(np.array(numbers[1:]).reshape(NUM_JOINTS, 3), bones)))
    return frames
