import math
import unittest

import numpy as np

from viewpoint_planner import normalize, skeleton
from viewpoint_planner.errors import InvalidArgumentException, NormalizationFailureException


def keypoints(points: dict, width: int = 640, height: int = 480) -> skeleton.Keypoints2D:
    uv = np.zeros((skeleton.NUM_JOINTS, 2))
    visible = np.zeros(skeleton.NUM_JOINTS, dtype=bool)
    for joint, point in points.items():
        uv[joint] = point
        visible[joint] = True
    return skeleton.Keypoints2D(uv, visible, width, height)


def random_keypoints(rng: np.random.Generator) -> skeleton.Keypoints2D:
    uv = rng.uniform(100, 500, size=(skeleton.NUM_JOINTS, 2))
    hip_point = (uv[skeleton.L_HIP] + uv[skeleton.R_HIP]) / 2
    angle = rng.uniform(-math.pi, math.pi)
    uv[skeleton.NECK] = hip_point + rng.uniform(50, 200) * np.array([math.cos(angle), math.sin(angle)])
    return skeleton.Keypoints2D(uv, np.ones(skeleton.NUM_JOINTS, dtype=bool))


class SpineAnchorTest(unittest.TestCase):
    def test_both_hips(self):
        anchor = normalize.spine_anchor(
            keypoints({skeleton.NECK: (100, 50), skeleton.L_HIP: (90, 150), skeleton.R_HIP: (110, 150)})
        )
        np.testing.assert_array_equal([100.0, 100.0], anchor.midpoint)
        np.testing.assert_array_equal([0.0, -1.0], anchor.direction)
        self.assertEqual(100.0, anchor.length)

    def test_single_hip(self):
        anchor = normalize.spine_anchor(keypoints({skeleton.NECK: (100, 50), skeleton.L_HIP: (90, 150)}))
        np.testing.assert_array_equal([95.0, 100.0], anchor.midpoint)
        self.assertAlmostEqual(math.hypot(10, 100), anchor.length)

    def test_failures(self):
        with self.assertRaises(NormalizationFailureException):
            normalize.spine_anchor(keypoints({skeleton.NECK: (100, 50), skeleton.L_HIP: (100, 50)}))
        with self.assertRaises(NormalizationFailureException):
            normalize.spine_anchor(keypoints({skeleton.L_HIP: (90, 150), skeleton.R_HIP: (110, 150)}))
        with self.assertRaises(NormalizationFailureException):
            normalize.spine_anchor(keypoints({skeleton.NECK: (100, 50), skeleton.NOSE: (100, 20)}))
        with self.assertRaises(NormalizationFailureException):
            normalize.spine_anchor(keypoints({skeleton.NECK: (100, 50), skeleton.R_HIP: (100.5, 50.5)}))


class NormalizeTest(unittest.TestCase):
    def test_canonical_input(self):
        kp = keypoints(
            {
                skeleton.NECK: (0.0, -0.5),
                skeleton.L_HIP: (-0.1, 0.5),
                skeleton.R_HIP: (0.1, 0.5),
                skeleton.NOSE: (0.05, -0.8),
            }
        )
        pose = normalize.normalize_keypoints(kp)
        expected = kp.uv * np.array([1.0, -1.0])
        np.testing.assert_allclose(pose.coords[kp.visible], expected[kp.visible], atol=1e-12)
        np.testing.assert_array_equal(kp.visible, pose.mask)
        np.testing.assert_array_equal([0.0, 0.0], pose.coords[skeleton.L_WRIST])

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            pose = normalize.normalize_keypoints(random_keypoints(rng))
            again = normalize.normalize_keypoints(pose.as_keypoints())
            np.testing.assert_allclose(again.coords, pose.coords, atol=1e-9)
            np.testing.assert_array_equal(again.mask, pose.mask)

    def test_similarity_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            kp = random_keypoints(rng)
            moved = normalize.similarity_transform(
                kp,
                translation=rng.uniform(-100, 100, size=2) / math.sqrt(2),
                angle=float(rng.uniform(-math.pi, math.pi)),
                scale=float(rng.uniform(0.25, 4.0)),
                center=rng.uniform(0, 640, size=2),
            )
            np.testing.assert_allclose(
                normalize.normalize_keypoints(moved).coords,
                normalize.normalize_keypoints(kp).coords,
                atol=1e-6,
            )

    def test_mask_preserved(self):
        rng = np.random.default_rng(6)
        kp = random_keypoints(rng)
        visible = rng.random(skeleton.NUM_JOINTS) < 0.6
        visible[[skeleton.NECK, skeleton.R_HIP]] = True
        kp = skeleton.Keypoints2D(kp.uv, visible)
        pose = normalize.normalize_keypoints(kp)
        self.assertEqual(visible.tobytes(), pose.mask.tobytes())
        self.assertTrue(np.all(pose.coords[~visible] == 0.0))

    def test_detected_t_pose(self):
        s = skeleton.build_canonical_skeleton(1.8)
        det = skeleton.DetectorParams(0.0, 0.0, 0.0)
        kp = skeleton.detect(s, skeleton.CameraView(0.0, math.pi / 8, 5.0), det, 0)
        pose = normalize.normalize_keypoints(kp)
        np.testing.assert_allclose(pose.coords[skeleton.NECK], [0.0, 0.5], atol=1e-9)
        hip_point = (pose.coords[skeleton.L_HIP] + pose.coords[skeleton.R_HIP]) / 2
        np.testing.assert_allclose(hip_point, [0.0, -0.5], atol=1e-9)
        # The subject's left side appears on the image's right when seen from the front.
        self.assertGreater(pose.coords[skeleton.L_WRIST][0], 0.0)

    def test_vector(self):
        rng = np.random.default_rng(7)
        pose = normalize.normalize_keypoints(random_keypoints(rng))
        vector = pose.vector()
        self.assertEqual((normalize.VECTOR_SIZE,), vector.shape)
        self.assertEqual(pose, normalize.NormalizedPose.from_vector(vector))
        self.assertEqual(pose, normalize.NormalizedPose.from_line(pose.to_line()))
        with self.assertRaises(InvalidArgumentException):
            normalize.NormalizedPose.from_vector(vector[:-1])


if __name__ == "__main__":
    unittest.main()
