"""
This module turns a view-sphere ``ErrorField`` into a volume the trajectory optimizer can query: occupancy grids,
exact Euclidean distance fields (ESDF), the pose-goodness volume around the subject and their blend, the
pose-enhanced ESDF (P-ESDF).

All volumes live on a ``Lattice`` of voxel centers. Every field follows the "higher is better" convention of an
obstacle distance field, so pose errors are inverted into goodness values.
"""
import io
import logging
import math
import typing
from dataclasses import dataclass

import numpy as np
import pandas
from arcaflow_plugin_sdk import schema
from scipy import ndimage

from viewpoint_planner import viewsphere
from viewpoint_planner.errors import InvalidArgumentException, OutOfBoundsException

logger = logging.getLogger(__name__)

FIELD_MAGIC = b"PESD"

# Slack, in voxels, for points that land on the lattice boundary up to rounding.
_BOUNDARY_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class Lattice:
    """
    ``Lattice`` is a regular grid of voxel centers. ``origin`` is the center of voxel ``(0, 0, 0)`` and voxel
    ``(i, j, k)`` is centered at ``origin + (i, j, k) * resolution``.
    """

    origin: np.ndarray
    resolution: float
    dims: typing.Tuple[int, int, int]

    def __post_init__(self):
        origin = np.array(self.origin, dtype=float).reshape(3)
        dims = tuple(int(d) for d in self.dims)
        if not np.all(np.isfinite(origin)):
            raise InvalidArgumentException("The lattice origin must be finite")
        if not (math.isfinite(self.resolution) and self.resolution > 0):
            raise InvalidArgumentException("The lattice resolution must be positive, got {}".format(self.resolution))
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise InvalidArgumentException("Lattice dimensions must be three positive counts, got {}".format(dims))
        origin.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "resolution", float(self.resolution))
        object.__setattr__(self, "dims", dims)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def upper(self) -> np.ndarray:
        """The center of the last voxel."""
        return self.origin + (np.array(self.dims) - 1) * self.resolution

    def centers(self) -> np.ndarray:
        """
        :return: the voxel centers as an ``(nx, ny, nz, 3)`` array.
        """
        axes = [np.arange(d) * self.resolution for d in self.dims]
        offsets = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return self.origin + offsets

    def voxel_of(self, point: typing.Sequence[float]) -> typing.Tuple[int, int, int]:
        """
        :return: the index of the voxel containing ``point``.
        """
        index = np.floor((np.asarray(point, dtype=float) - self.origin) / self.resolution + 0.5).astype(int)
        return int(index[0]), int(index[1]), int(index[2])

    def contains(self, point: typing.Sequence[float]) -> bool:
        """
        :return: whether ``point`` lies inside the box covered by the voxels (not only their centers).
        """
        c = (np.asarray(point, dtype=float) - self.origin) / self.resolution
        return bool(np.all(c >= -0.5) and np.all(c <= np.array(self.dims) - 0.5))

    def congruent(self, other: "Lattice") -> bool:
        return (
            self.dims == other.dims
            and self.resolution == other.resolution
            and bool(np.array_equal(self.origin, other.origin))
        )


def lattice_around(
    center: typing.Sequence[float], extent: float = 10.0, height: float = 5.0, resolution: float = 0.2
) -> Lattice:
    """
    This function builds a lattice of ``extent x extent`` meters centered horizontally on ``center``, reaching from
    the ground (``z = 0``) to ``height``.
    """
    if not (extent > 0 and height > 0 and resolution > 0):
        raise InvalidArgumentException("Extent, height and resolution must be positive")
    n_xy = int(round(extent / resolution)) + 1
    n_z = int(round(height / resolution)) + 1
    center = np.asarray(center, dtype=float)
    half = (n_xy - 1) / 2 * resolution
    return Lattice(np.array([center[0] - half, center[1] - half, 0.0]), resolution, (n_xy, n_xy, n_z))


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    lattice: Lattice
    occupied: np.ndarray

    def __post_init__(self):
        occupied = np.array(self.occupied, dtype=bool)
        if occupied.shape != self.lattice.dims:
            raise InvalidArgumentException(
                "Occupancy shape {} does not match the lattice {}".format(occupied.shape, self.lattice.dims)
            )
        occupied.setflags(write=False)
        object.__setattr__(self, "occupied", occupied)

    @classmethod
    def empty(cls, lattice: Lattice) -> "OccupancyGrid":
        return cls(lattice, np.zeros(lattice.dims, dtype=bool))

    @classmethod
    def from_boxes(
        cls,
        lattice: Lattice,
        boxes: typing.Iterable[typing.Tuple[typing.Sequence[float], typing.Sequence[float]]],
    ) -> "OccupancyGrid":
        """
        This function marks every voxel whose center lies inside one of the axis-aligned ``(center, size)`` boxes.
        """
        centers = lattice.centers()
        occupied = np.zeros(lattice.dims, dtype=bool)
        for center, size in boxes:
            half = np.asarray(size, dtype=float) / 2
            inside = np.all(np.abs(centers - np.asarray(center, dtype=float)) <= half, axis=-1)
            occupied |= inside
        return cls(lattice, occupied)

    def is_occupied(self, point: typing.Sequence[float]) -> bool:
        if not self.lattice.contains(point):
            return False
        i, j, k = (min(v, d - 1) for v, d in zip(self.lattice.voxel_of(point), self.lattice.dims))
        return bool(self.occupied[i, j, k])


@dataclass(frozen=True, eq=False)
class Esdf:
    """
    ``Esdf`` holds, per voxel, the distance in meters to the nearest occupied voxel center.
    """

    lattice: Lattice
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class ErrorVolume:
    """
    ``ErrorVolume`` holds the pose goodness of every voxel as a camera position, in ``[0, xi_max]``.
    """

    lattice: Lattice
    values: np.ndarray
    xi_max: float


@dataclass(frozen=True, eq=False)
class Pesdf:
    lattice: Lattice
    values: np.ndarray
    weight: float
    xi_max: float


LatticeField = typing.Union[Esdf, ErrorVolume, Pesdf]


@dataclass
class PesdfConfig:
    """
    These are the parameters of the local pose-enhanced distance field.
    """

    extent: typing.Annotated[
        float,
        schema.min(0.2),
        schema.name("Extent"),
        schema.description("Side length in meters of the square region around the drone."),
    ] = 10.0
    height: typing.Annotated[
        float,
        schema.min(0.2),
        schema.name("Height"),
        schema.description("Height in meters of the local volume above the ground."),
    ] = 5.0
    resolution: typing.Annotated[
        float,
        schema.min(0.01),
        schema.name("Resolution"),
        schema.description("Voxel size in meters."),
    ] = 0.2
    xi_max: typing.Annotated[
        float,
        schema.min(1e-9),
        schema.name("Maximum goodness"),
        schema.description("Goodness of a perfect viewpoint and of free space beyond the safety distance."),
    ] = 5.0
    error_cap: typing.Annotated[
        float,
        schema.min(1e-9),
        schema.name("Error cap"),
        schema.description("Pose error mapped to zero goodness."),
    ] = viewsphere.DEFAULT_MISS_PENALTY
    safe_distance: typing.Annotated[
        float,
        schema.min(1e-9),
        schema.name("Safe distance"),
        schema.description("Obstacle distance in meters beyond which free space counts as fully good."),
    ] = 2.0
    weight: typing.Annotated[
        float,
        schema.min(0.0),
        schema.max(1.0),
        schema.name("Merge weight"),
        schema.description("Share of the pose goodness in the merged field, the rest going to the distance field."),
    ] = 0.5
    max_distance: typing.Annotated[
        float,
        schema.min(1e-9),
        schema.name("Maximum distance"),
        schema.description("Distance in meters the distance field is clamped at."),
    ] = 10.0
    band_inner: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("Inner band"),
        schema.description("Inner edge of the useful radial band, as a multiple of the view sphere radius."),
    ] = 0.5
    band_outer: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("Outer band"),
        schema.description("Outer edge of the useful radial band, as a multiple of the view sphere radius."),
    ] = 1.5

    def check(self) -> None:
        if not 0 <= self.weight <= 1:
            raise InvalidArgumentException("The merge weight must lie in [0, 1], got {}".format(self.weight))
        if not self.band_inner < self.band_outer:
            raise InvalidArgumentException("The radial band must have its inner edge below its outer edge")
        for name in ("extent", "height", "resolution", "xi_max", "error_cap", "safe_distance", "max_distance"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentException("{} must be positive".format(name))

    def lattice(self, center: typing.Sequence[float]) -> Lattice:
        return lattice_around(center, self.extent, self.height, self.resolution)


def esdf_from_occupancy(g: OccupancyGrid, d_max: typing.Optional[float] = 10.0) -> Esdf:
    """
    This function computes the exact Euclidean distance from every voxel center to the nearest occupied voxel
    center, clamped at ``d_max``. Distances come from integer squared voxel offsets.

    :param d_max: the clamp, also the value of an obstacle free grid; ``None`` to require obstacles.
    """
    if d_max is not None and not d_max > 0:
        raise InvalidArgumentException("The distance clamp must be positive, got {}".format(d_max))
    if not g.occupied.any():
        if d_max is None:
            raise InvalidArgumentException("The grid has no obstacles and no distance clamp")
        return Esdf(g.lattice, np.full(g.lattice.dims, float(d_max)))
    nearest = ndimage.distance_transform_edt(~g.occupied, return_distances=False, return_indices=True)
    offsets = nearest - np.indices(g.lattice.dims)
    squared = np.sum(offsets.astype(np.int64) ** 2, axis=0)
    distance = np.sqrt(squared) * g.lattice.resolution
    if d_max is not None:
        distance = np.minimum(distance, d_max)
    return Esdf(g.lattice, distance)


def _sample_field_bilinear(f: viewsphere.ErrorField, azimuth: np.ndarray, elevation: np.ndarray) -> np.ndarray:
    grid = f.grid
    a = azimuth / (2 * math.pi) * grid.n_az - 0.5
    e = np.clip(elevation / (math.pi / 2) * grid.n_el - 0.5, 0.0, grid.n_el - 1)
    j0 = np.floor(a).astype(int)
    ta = a - j0
    j0 %= grid.n_az
    j1 = (j0 + 1) % grid.n_az
    i0 = np.minimum(np.floor(e).astype(int), grid.n_el - 1)
    te = e - i0
    i1 = np.minimum(i0 + 1, grid.n_el - 1)
    v = f.values
    low = v[i0, j0] * (1 - ta) + v[i0, j1] * ta
    high = v[i1, j0] * (1 - ta) + v[i1, j1] * ta
    return low * (1 - te) + high * te


def error_to_volume(
    f: viewsphere.ErrorField,
    subject_position: typing.Sequence[float],
    subject_heading: float,
    lattice: Lattice,
    cfg: typing.Optional[PesdfConfig] = None,
) -> ErrorVolume:
    """
    This function places the view-sphere field around the subject. Each voxel is seen from the subject under an
    azimuth (relative to the subject's heading) and an elevation; the field is sampled bilinearly there and the error
    ``e`` is turned into the goodness ``xi_max * (1 - min(e, error_cap) / error_cap)``. Voxels below the ground or
    outside the radial band around the view sphere get goodness 0.
    """
    cfg = cfg if cfg is not None else PesdfConfig()
    cfg.check()
    if not math.isfinite(subject_heading):
        raise InvalidArgumentException("The subject heading must be finite")
    subject = np.asarray(subject_position, dtype=float)
    axes = [np.arange(d) * lattice.resolution for d in lattice.dims]
    offsets = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    relative = (lattice.origin - subject) + offsets
    squared_horizontal = relative[..., 0] ** 2 + relative[..., 1] ** 2
    horizontal = np.sqrt(squared_horizontal)
    distance = np.sqrt(squared_horizontal + relative[..., 2] ** 2)
    azimuth = np.mod(np.arctan2(relative[..., 1], relative[..., 0]) - subject_heading, 2 * math.pi)
    elevation = np.arctan2(relative[..., 2], horizontal)
    error = _sample_field_bilinear(f, azimuth, elevation)
    goodness = cfg.xi_max * (1.0 - np.minimum(error, cfg.error_cap) / cfg.error_cap)
    radius = f.grid.radius
    in_band = (distance >= cfg.band_inner * radius) & (distance <= cfg.band_outer * radius)
    above_ground = (lattice.origin[2] + offsets[..., 2]) >= 0.0
    return ErrorVolume(lattice, np.where(in_band & above_ground, goodness, 0.0), cfg.xi_max)


def resample(e: Esdf, lattice: Lattice) -> Esdf:
    """
    This function interpolates the distance field trilinearly at the centers of another lattice, clamping to the
    nearest boundary voxel outside its own.
    """
    if e.lattice.congruent(lattice):
        return e
    coordinates = (lattice.centers() - e.lattice.origin) / e.lattice.resolution
    values = ndimage.map_coordinates(
        e.values, np.moveaxis(coordinates, -1, 0), order=1, mode="nearest"
    )
    return Esdf(lattice, values)


def rescale_distance(distance: np.ndarray, safe_distance: float, xi_max: float) -> np.ndarray:
    return np.minimum(distance, safe_distance) / safe_distance * xi_max


def merge(ev: ErrorVolume, e: Esdf, weight: float = 0.5, safe_distance: float = 2.0) -> Pesdf:
    """
    This function blends pose goodness with obstacle clearance voxel by voxel:
    ``weight * goodness + (1 - weight) * min(d, safe_distance) / safe_distance * xi_max``.
    """
    if not 0 <= weight <= 1:
        raise InvalidArgumentException("The merge weight must lie in [0, 1], got {}".format(weight))
    if not safe_distance > 0:
        raise InvalidArgumentException("The safe distance must be positive")
    e = resample(e, ev.lattice)
    if e.values.shape != ev.values.shape:
        raise InvalidArgumentException("The distance field could not be brought onto the error volume lattice")
    clearance = rescale_distance(e.values, safe_distance, ev.xi_max)
    return Pesdf(ev.lattice, weight * ev.values + (1 - weight) * clearance, weight, ev.xi_max)


def build_pesdf(
    f: viewsphere.ErrorField,
    subject_position: typing.Sequence[float],
    subject_heading: float,
    e: Esdf,
    center: typing.Sequence[float],
    cfg: PesdfConfig,
) -> Pesdf:
    """
    This function builds the merged field on the local lattice centered on ``center``, usually the drone.
    """
    ev = error_to_volume(f, subject_position, subject_heading, cfg.lattice(center), cfg)
    return merge(ev, e, cfg.weight, cfg.safe_distance)


def sample_points(
    field: LatticeField, points: np.ndarray
) -> typing.Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    This function interpolates a field trilinearly at many points. Points outside the voxel centers' span are
    clamped to it.

    :return: the values, the analytic gradients (``(n, 3)``) and a flag per point telling whether it was inside.
    """
    lattice = field.lattice
    points = np.atleast_2d(np.asarray(points, dtype=float))
    upper = np.array(lattice.dims) - 1
    raw = (points - lattice.origin) / lattice.resolution
    inside = np.all((raw >= -_BOUNDARY_SLACK) & (raw <= upper + _BOUNDARY_SLACK), axis=1)
    c = np.clip(raw, 0, upper)
    i0 = np.minimum(np.floor(c).astype(int), np.maximum(upper - 1, 0))
    t = c - i0
    i1 = np.minimum(i0 + 1, upper)
    corners = {}
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix = i1[:, 0] if dx else i0[:, 0]
                iy = i1[:, 1] if dy else i0[:, 1]
                iz = i1[:, 2] if dz else i0[:, 2]
                corners[dx, dy, dz] = field.values[ix, iy, iz]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    weights_x = (1 - tx, tx)
    weights_y = (1 - ty, ty)
    weights_z = (1 - tz, tz)
    value = np.zeros(len(points))
    gradient = np.zeros((len(points), 3))
    for (dx, dy, dz), v in corners.items():
        value += v * weights_x[dx] * weights_y[dy] * weights_z[dz]
        sx = 1.0 if dx else -1.0
        sy = 1.0 if dy else -1.0
        sz = 1.0 if dz else -1.0
        gradient[:, 0] += sx * v * weights_y[dy] * weights_z[dz]
        gradient[:, 1] += sy * v * weights_x[dx] * weights_z[dz]
        gradient[:, 2] += sz * v * weights_x[dx] * weights_y[dy]
    # Flat and clamped axes carry no gradient.
    gradient[:, upper == 0] = 0.0
    outside = (raw < -_BOUNDARY_SLACK) | (raw > upper + _BOUNDARY_SLACK)
    gradient[outside] = 0.0
    return value, gradient / lattice.resolution, inside


def sample(field: LatticeField, x: typing.Sequence[float]) -> typing.Tuple[float, np.ndarray]:
    """
    This function returns the trilinear value of a field at ``x`` and its gradient.

    :raises OutOfBoundsException: when ``x`` lies outside the voxel centers' span; the exception carries the value
        and gradient at the clamped point.
    """
    value, gradient, inside = sample_points(field, np.asarray(x, dtype=float)[None, :])
    if not inside[0]:
        raise OutOfBoundsException(
            "Point {} lies outside the field lattice".format(np.asarray(x).tolist()),
            float(value[0]),
            gradient[0],
        )
    return float(value[0]), gradient[0]


def save_field(field: LatticeField, stream: typing.BinaryIO) -> None:
    """
    This function writes the ``PESD`` binary format: the magic bytes, the lattice origin and resolution as little
    endian 64 bit floats, the dimensions as little endian 32 bit integers, then the values in row-major order
    (``x`` slowest) as 64 bit floats.
    """
    lattice = field.lattice
    stream.write(FIELD_MAGIC)
    stream.write(np.array(list(lattice.origin) + [lattice.resolution], dtype="<f8").tobytes())
    stream.write(np.array(lattice.dims, dtype="<i4").tobytes())
    stream.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def load_field(stream: typing.BinaryIO) -> typing.Tuple[Lattice, np.ndarray]:
    magic = stream.read(len(FIELD_MAGIC))
    if magic != FIELD_MAGIC:
        raise InvalidArgumentException("Not a field file (magic {!r})".format(magic))
    header = stream.read(32 + 12)
    if len(header) != 44:
        raise InvalidArgumentException("Truncated field header")
    numbers = np.frombuffer(header[:32], dtype="<f8")
    dims = tuple(int(d) for d in np.frombuffer(header[32:], dtype="<i4"))
    lattice = Lattice(numbers[:3].astype(float), float(numbers[3]), dims)
    payload = stream.read()
    if len(payload) != 8 * lattice.size:
        raise InvalidArgumentException(
            "Expected {} field values, found {} bytes".format(lattice.size, len(payload))
        )
    return lattice, np.frombuffer(payload, dtype="<f8").astype(float).reshape(dims)


def slice_table(field: LatticeField, z: float) -> pandas.DataFrame:
    """
    :return: the values of the horizontal voxel layer nearest to height ``z`` as ``x, y, value`` rows.
    """
    lattice = field.lattice
    k = int(round((z - lattice.origin[2]) / lattice.resolution))
    if not 0 <= k < lattice.dims[2]:
        raise InvalidArgumentException("Height {} is outside the field".format(z))
    centers = lattice.centers()[:, :, k, :]
    return pandas.DataFrame(
        {
            "x": centers[..., 0].reshape(-1),
            "y": centers[..., 1].reshape(-1),
            "value": field.values[:, :, k].reshape(-1),
        }
    )


def write_slice_csv(field: LatticeField, z: float, stream: io.TextIOBase) -> None:
    slice_table(field, z).to_csv(stream, index=False, lineterminator="\n")
