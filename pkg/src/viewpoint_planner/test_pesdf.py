import io
import math
import unittest

import numpy as np
import pandas

from viewpoint_planner import pesdf, viewsphere
from viewpoint_planner.errors import InvalidArgumentException, OutOfBoundsException


def brute_force_esdf(occupied: np.ndarray, resolution: float) -> np.ndarray:
    cells = np.indices(occupied.shape).reshape(3, -1).T.astype(np.int64)
    squared = np.full(len(cells), np.iinfo(np.int64).max)
    for obstacle in np.argwhere(occupied):
        squared = np.minimum(squared, np.sum((cells - obstacle) ** 2, axis=1))
    return (np.sqrt(squared) * resolution).reshape(occupied.shape)


def random_occupancy(rng: np.random.Generator, n: int, density: float) -> pesdf.OccupancyGrid:
    occupied = rng.random((n, n, n)) < density
    occupied[tuple(rng.integers(n, size=3))] = True
    return pesdf.OccupancyGrid(pesdf.Lattice(np.zeros(3), 0.5, (n, n, n)), occupied)


def smooth_field(lattice: pesdf.Lattice) -> pesdf.Esdf:
    c = lattice.centers()
    return pesdf.Esdf(lattice, np.sin(c[..., 0]) * np.cos(0.7 * c[..., 1]) + 0.3 * c[..., 2] ** 2)


class LatticeTest(unittest.TestCase):
    def test_around(self):
        lattice = pesdf.lattice_around([3.0, -2.0, 1.0])
        self.assertEqual((51, 51, 26), lattice.dims)
        np.testing.assert_allclose([3.0, -2.0, 0.0], lattice.centers()[25, 25, 0], atol=1e-12)
        np.testing.assert_allclose([8.0, 3.0, 5.0], lattice.upper, atol=1e-12)

    def test_invalid(self):
        with self.assertRaises(InvalidArgumentException):
            pesdf.Lattice(np.zeros(3), 0.0, (2, 2, 2))
        with self.assertRaises(InvalidArgumentException):
            pesdf.Lattice(np.zeros(3), 1.0, (2, 0, 2))

    def test_contains(self):
        lattice = pesdf.Lattice(np.zeros(3), 1.0, (3, 3, 3))
        self.assertTrue(lattice.contains([-0.5, 2.5, 1.0]))
        self.assertFalse(lattice.contains([-0.6, 1.0, 1.0]))
        self.assertEqual((1, 2, 0), lattice.voxel_of([1.2, 1.6, -0.4]))

    def test_boxes(self):
        lattice = pesdf.Lattice(np.zeros(3), 1.0, (5, 5, 3))
        grid = pesdf.OccupancyGrid.from_boxes(lattice, [([2.0, 2.0, 1.0], [1.0, 1.0, 2.0])])
        self.assertEqual(4 * 3, int(grid.occupied.sum()))
        self.assertTrue(grid.is_occupied([2.4, 2.4, 0.2]))
        self.assertFalse(grid.is_occupied([0.0, 0.0, 0.0]))
        self.assertFalse(grid.is_occupied([20.0, 0.0, 0.0]))


class EsdfTest(unittest.TestCase):
    def test_single_voxel(self):
        occupied = np.zeros((9, 9, 9), dtype=bool)
        occupied[4, 4, 4] = True
        e = pesdf.esdf_from_occupancy(pesdf.OccupancyGrid(pesdf.Lattice(np.zeros(3), 1.0, (9, 9, 9)), occupied))
        self.assertEqual(math.sqrt(48), e.values[0, 0, 0])
        self.assertEqual(0.0, e.values[4, 4, 4])
        self.assertEqual(1.0, e.values[4, 4, 5])

    def test_fully_occupied(self):
        lattice = pesdf.Lattice(np.zeros(3), 0.2, (4, 5, 6))
        e = pesdf.esdf_from_occupancy(pesdf.OccupancyGrid(lattice, np.ones(lattice.dims, dtype=bool)))
        self.assertTrue(np.all(e.values == 0.0))

    def test_empty(self):
        lattice = pesdf.Lattice(np.zeros(3), 0.2, (4, 4, 4))
        e = pesdf.esdf_from_occupancy(pesdf.OccupancyGrid.empty(lattice))
        self.assertTrue(np.all(e.values == 10.0))
        with self.assertRaises(InvalidArgumentException):
            pesdf.esdf_from_occupancy(pesdf.OccupancyGrid.empty(lattice), None)

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        for n, density in [(12, 0.05)] * 10 + [(32, 0.01)] * 2:
            grid = random_occupancy(rng, n, density)
            e = pesdf.esdf_from_occupancy(grid, None)
            np.testing.assert_array_equal(brute_force_esdf(grid.occupied, 0.5), e.values)

    def test_clamp_and_lipschitz(self):
        grid = random_occupancy(np.random.default_rng(2), 16, 0.002)
        e = pesdf.esdf_from_occupancy(grid, 2.0)
        self.assertLessEqual(e.values.max(), 2.0)
        self.assertTrue(np.all(e.values[grid.occupied] == 0.0))
        self.assertTrue(np.all(e.values[~grid.occupied] > 0.0))
        for axis in range(3):
            self.assertLessEqual(np.abs(np.diff(e.values, axis=axis)).max(), 0.5 + 1e-12)


class ErrorVolumeTest(unittest.TestCase):
    def test_perfect_field(self):
        grid = viewsphere.make_grid(8, 4, 3.0)
        lattice = pesdf.Lattice([-5.0, -5.0, 0.0], 0.5, (21, 21, 9))
        volume = pesdf.error_to_volume(viewsphere.ErrorField(grid, np.zeros(grid.shape)), [0, 0, 1.0], 0.3, lattice)
        distance = np.linalg.norm(lattice.centers() - np.array([0, 0, 1.0]), axis=-1)
        in_band = (distance >= 1.5) & (distance <= 4.5)
        self.assertTrue(np.all(volume.values[in_band] == 5.0))
        self.assertTrue(np.all(volume.values[~in_band] == 0.0))

    def test_error_cap(self):
        grid = viewsphere.make_grid(8, 4, 3.0)
        lattice = pesdf.Lattice([2.0, 0.0, 1.0], 1.0, (1, 1, 1))
        cfg = pesdf.PesdfConfig(error_cap=2.0)
        for error, goodness in ((1.0, 2.5), (2.0, 0.0), (4.0, 0.0)):
            volume = pesdf.error_to_volume(
                viewsphere.ErrorField(grid, np.full(grid.shape, error)), [0, 0, 1.0], 0.0, lattice, cfg
            )
            self.assertAlmostEqual(goodness, float(volume.values[0, 0, 0]))

    def test_heading_rotation(self):
        grid = viewsphere.make_grid(12, 4, 3.0)
        rng = np.random.default_rng(3)
        f = viewsphere.ErrorField(grid, rng.uniform(0, 5, size=grid.shape))
        subject = np.array([1.0, 2.0, 1.0])
        for _ in range(100):
            offset = rng.uniform(-3, 3, size=3)
            offset[2] = abs(offset[2])
            heading = float(rng.uniform(-math.pi, math.pi))
            turn = float(rng.uniform(-math.pi, math.pi))
            c, s = math.cos(turn), math.sin(turn)
            turned = np.array([c * offset[0] - s * offset[1], s * offset[0] + c * offset[1], offset[2]])
            before = pesdf.error_to_volume(f, subject, heading, pesdf.Lattice(subject + offset, 1.0, (1, 1, 1)))
            after = pesdf.error_to_volume(
                f, subject, heading + turn, pesdf.Lattice(subject + turned, 1.0, (1, 1, 1))
            )
            self.assertAlmostEqual(float(before.values[0, 0, 0]), float(after.values[0, 0, 0]), places=8)

    def test_best_direction(self):
        grid = viewsphere.GridConfig().build()
        values = np.full(grid.shape, 3.0)
        values[2, 5] = 0.0
        subject = np.array([0.0, 0.0, 1.0])
        lattice = pesdf.lattice_around(subject, extent=16.0, height=8.0, resolution=0.25)
        volume = pesdf.error_to_volume(viewsphere.ErrorField(grid, values), subject, 0.0, lattice)
        best = np.unravel_index(np.argmax(volume.values), lattice.dims)
        direction = lattice.centers()[best] - subject
        azimuth = math.atan2(direction[1], direction[0]) % (2 * math.pi)
        elevation = math.atan2(direction[2], math.hypot(direction[0], direction[1]))
        self.assertLessEqual(abs(azimuth - grid.azimuths()[5]), 2 * math.pi / grid.n_az)
        self.assertLessEqual(abs(elevation - grid.elevations()[2]), math.pi / 2 / grid.n_el)

    def test_translation_invariance(self):
        grid = viewsphere.make_grid(8, 4, 3.0)
        f = viewsphere.ErrorField(grid, np.random.default_rng(4).uniform(0, 5, size=grid.shape))
        lattice = pesdf.Lattice([-4.0, -4.0, 0.0], 0.25, (33, 33, 13))
        moved = pesdf.Lattice([-1.0, -6.0, 0.0], 0.25, (33, 33, 13))
        first = pesdf.error_to_volume(f, [0.5, -1.25, 1.0], 0.7, lattice)
        second = pesdf.error_to_volume(f, [3.5, -3.25, 1.0], 0.7, moved)
        np.testing.assert_array_equal(first.values, second.values)

    def test_ground_plane(self):
        grid = viewsphere.make_grid(8, 4, 3.0)
        lattice = pesdf.Lattice([-4.0, -4.0, -1.0], 0.5, (17, 17, 5))
        volume = pesdf.error_to_volume(viewsphere.ErrorField(grid, np.zeros(grid.shape)), [0, 0, 0.5], 0.0, lattice)
        self.assertTrue(np.all(volume.values[:, :, :2] == 0.0))
        self.assertTrue(np.any(volume.values[:, :, 2] > 0.0))


class MergeTest(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(5)
        self.lattice = pesdf.Lattice(np.zeros(3), 0.5, (6, 5, 4))
        self.volume = pesdf.ErrorVolume(self.lattice, rng.uniform(0, 5, self.lattice.dims), 5.0)
        self.esdf = pesdf.Esdf(self.lattice, rng.uniform(0, 4, self.lattice.dims))

    def test_endpoints(self):
        np.testing.assert_array_equal(self.volume.values, pesdf.merge(self.volume, self.esdf, 1.0).values)
        np.testing.assert_array_equal(
            pesdf.rescale_distance(self.esdf.values, 2.0, 5.0), pesdf.merge(self.volume, self.esdf, 0.0).values
        )

    def test_single_voxel(self):
        lattice = pesdf.Lattice(np.zeros(3), 1.0, (1, 1, 1))
        merged = pesdf.merge(
            pesdf.ErrorVolume(lattice, np.full((1, 1, 1), 4.0), 5.0),
            pesdf.Esdf(lattice, np.full((1, 1, 1), 0.8)),
            0.5,
        )
        self.assertAlmostEqual(3.0, float(merged.values[0, 0, 0]))

    def test_convex(self):
        clearance = pesdf.rescale_distance(self.esdf.values, 2.0, 5.0)
        for weight in (0.1, 0.5, 0.9):
            merged = pesdf.merge(self.volume, self.esdf, weight).values
            self.assertTrue(np.all(merged >= np.minimum(self.volume.values, clearance) - 1e-12))
            self.assertTrue(np.all(merged <= np.maximum(self.volume.values, clearance) + 1e-12))

    def test_resampled(self):
        coarse = pesdf.Lattice(np.zeros(3), 1.0, (4, 3, 3))
        c = coarse.centers()
        linear = pesdf.Esdf(coarse, 0.5 * c[..., 0] + 0.25 * c[..., 1])
        resampled = pesdf.resample(linear, self.lattice)
        inside = self.lattice.centers()
        expected = 0.5 * inside[..., 0] + 0.25 * inside[..., 1]
        np.testing.assert_allclose(expected, resampled.values, atol=1e-9)

    def test_invalid_weight(self):
        with self.assertRaises(InvalidArgumentException):
            pesdf.merge(self.volume, self.esdf, 1.5)


class SampleTest(unittest.TestCase):
    def setUp(self):
        self.lattice = pesdf.Lattice([-1.0, 0.5, 0.0], 0.25, (12, 10, 8))
        self.field = smooth_field(self.lattice)

    def test_voxel_centers(self):
        centers = self.lattice.centers()
        for index in [(0, 0, 0), (3, 4, 5), (11, 9, 7)]:
            value, _ = pesdf.sample(self.field, centers[index])
            self.assertEqual(self.field.values[index], value)

    def test_linear_field(self):
        c = self.lattice.centers()
        a = np.array([0.5, -1.5, 2.0])
        field = pesdf.Esdf(self.lattice, c @ a + 3.0)
        rng = np.random.default_rng(6)
        for _ in range(50):
            x = rng.uniform(self.lattice.origin, self.lattice.upper)
            value, gradient = pesdf.sample(field, x)
            self.assertAlmostEqual(float(x @ a + 3.0), value, places=10)
            np.testing.assert_allclose(a, gradient, atol=1e-9)

    def test_finite_differences(self):
        rng = np.random.default_rng(7)
        h = 1e-4
        for _ in range(50):
            cell = rng.integers(0, np.array(self.lattice.dims) - 1)
            x = self.lattice.origin + (cell + rng.uniform(0.1, 0.9, 3)) * self.lattice.resolution
            _, gradient = pesdf.sample(self.field, x)
            for axis in range(3):
                step = np.zeros(3)
                step[axis] = h
                numeric = (pesdf.sample(self.field, x + step)[0] - pesdf.sample(self.field, x - step)[0]) / (2 * h)
                scale = max(abs(numeric), abs(gradient[axis]), 1e-6)
                self.assertLess(abs(numeric - gradient[axis]) / scale, 1e-6)

    def test_continuous_at_cell_faces(self):
        rng = np.random.default_rng(8)
        eps = 1e-10
        for _ in range(50):
            x = rng.uniform(self.lattice.origin + 0.3, self.lattice.upper - 0.3)
            axis = int(rng.integers(3))
            x[axis] = self.lattice.origin[axis] + int(rng.integers(2, 6)) * self.lattice.resolution
            step = np.zeros(3)
            step[axis] = eps
            below = pesdf.sample(self.field, x - step)[0]
            above = pesdf.sample(self.field, x + step)[0]
            self.assertLess(abs(above - below), 1e-8)

    def test_out_of_bounds(self):
        outside = self.lattice.upper + np.array([1.0, 0.0, 0.0])
        with self.assertRaises(OutOfBoundsException) as context:
            pesdf.sample(self.field, outside)
        self.assertEqual(self.field.values[-1, -1, -1], context.exception.value)
        self.assertEqual(3, len(context.exception.gradient))

    def test_many_points(self):
        rng = np.random.default_rng(9)
        points = rng.uniform(self.lattice.origin, self.lattice.upper, size=(20, 3))
        values, gradients, inside = pesdf.sample_points(self.field, points)
        self.assertTrue(np.all(inside))
        for point, value, gradient in zip(points, values, gradients):
            single, single_gradient = pesdf.sample(self.field, point)
            self.assertEqual(single, value)
            np.testing.assert_array_equal(single_gradient, gradient)


class ExportTest(unittest.TestCase):
    def test_binary(self):
        lattice = pesdf.Lattice([-1.0, 0.5, 0.0], 0.2, (3, 4, 5))
        field = smooth_field(lattice)
        stream = io.BytesIO()
        pesdf.save_field(field, stream)
        data = stream.getvalue()
        self.assertTrue(data.startswith(b"PESD"))
        self.assertEqual(4 + 32 + 12 + 8 * 60, len(data))
        loaded_lattice, values = pesdf.load_field(io.BytesIO(data))
        self.assertTrue(loaded_lattice.congruent(lattice))
        np.testing.assert_array_equal(field.values, values)
        with self.assertRaises(InvalidArgumentException):
            pesdf.load_field(io.BytesIO(data[:-8]))

    def test_slice_csv(self):
        lattice = pesdf.Lattice([0.0, 0.0, 0.0], 0.5, (3, 4, 5))
        field = smooth_field(lattice)
        stream = io.StringIO()
        pesdf.write_slice_csv(field, 1.0, stream)
        self.assertTrue(stream.getvalue().startswith("x,y,value\n"))
        stream.seek(0)
        table = pandas.read_csv(stream, float_precision="round_trip")
        self.assertEqual(12, len(table))
        np.testing.assert_array_equal(field.values[:, :, 2].reshape(-1), table["value"].to_numpy())
        with self.assertRaises(InvalidArgumentException):
            pesdf.slice_table(field, 10.0)


if __name__ == "__main__":
    unittest.main()
