"""
This module discretizes the hemisphere of camera viewing angles around a subject and computes the ground truth
per-view pose error field, which is the training target of the error network and the planner's guidance map.

Grid cells are addressed as ``(i, j)`` with ``i`` the elevation index and ``j`` the azimuth index. Flattened arrays
are elevation-major: ``index = i * n_az + j``.
"""
import io
import logging
import math
import typing
from dataclasses import dataclass

import numpy as np
from arcaflow_plugin_sdk import schema

from viewpoint_planner import skeleton
from viewpoint_planner.errors import InvalidArgumentException

logger = logging.getLogger(__name__)

DEFAULT_MISS_PENALTY = 5.0
"""Error charged for a joint that was not detected, in spine lengths."""

CSV_HEADER = "n_az,n_el,radius"


@dataclass
class GridConfig:
    """
    This is the view grid and camera model used for error fields.
    """

    n_az: typing.Annotated[
        int,
        schema.min(4),
        schema.name("Azimuth bins"),
        schema.description("Number of camera azimuth bins around the subject."),
    ] = 24
    n_el: typing.Annotated[
        int,
        schema.min(2),
        schema.name("Elevation bins"),
        schema.description("Number of camera elevation bins between the horizon and the zenith."),
    ] = 8
    radius: typing.Annotated[
        float,
        schema.min(0.1),
        schema.name("Radius"),
        schema.description("Camera distance from the subject center in meters."),
    ] = 5.0
    focal: typing.Annotated[
        float,
        schema.min(1.0),
        schema.name("Focal length"),
        schema.description("Pinhole focal length in pixels."),
    ] = 500.0
    width: typing.Annotated[int, schema.min(1), schema.name("Image width")] = 640
    height: typing.Annotated[int, schema.min(1), schema.name("Image height")] = 480
    miss_penalty: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("Miss penalty"),
        schema.description("Error charged for an undetected joint, in projected spine lengths."),
    ] = DEFAULT_MISS_PENALTY

    def build(self) -> "ViewGrid":
        return make_grid(
            self.n_az, self.n_el, self.radius, focal=self.focal, width=self.width, height=self.height
        )


@dataclass(frozen=True, eq=False)
class ViewGrid:
    """
    ``ViewGrid`` holds one ``CameraView`` per cell of an ``n_el`` by ``n_az`` hemisphere discretization, in
    elevation-major order. The views look at the origin; ``centered`` moves them onto a subject.
    """

    n_az: int
    n_el: int
    radius: float
    views: typing.Tuple[skeleton.CameraView, ...]

    @property
    def size(self) -> int:
        return self.n_az * self.n_el

    @property
    def shape(self) -> typing.Tuple[int, int]:
        return self.n_el, self.n_az

    def azimuths(self) -> np.ndarray:
        return 2 * math.pi * (np.arange(self.n_az) + 0.5) / self.n_az

    def elevations(self) -> np.ndarray:
        return (math.pi / 2) * (np.arange(self.n_el) + 0.5) / self.n_el

    def index(self, i: int, j: int) -> int:
        return i * self.n_az + j

    def cell(self, index: int) -> typing.Tuple[int, int]:
        return divmod(index, self.n_az)

    def view(self, i: int, j: int) -> skeleton.CameraView:
        return self.views[self.index(i, j)]

    def centered(self, look_at: typing.Sequence[float]) -> typing.List[skeleton.CameraView]:
        return [v.with_look_at(look_at) for v in self.views]

    def same_shape(self, other: "ViewGrid") -> bool:
        return self.n_az == other.n_az and self.n_el == other.n_el


def make_grid(
    n_az: int,
    n_el: int,
    r: float,
    look_at: typing.Sequence[float] = (0.0, 0.0, 0.0),
    focal: float = 500.0,
    width: int = 640,
    height: int = 480,
) -> ViewGrid:
    """
    This function builds the hemispherical view grid. Cell centers are at azimuth ``2π(j+0.5)/n_az`` and elevation
    ``(π/2)(i+0.5)/n_el``.

    :param n_az: azimuth bins, at least 4.
    :param n_el: elevation bins, at least 2.
    :param r: camera radius in meters.
    :return: the grid.
    """
    if n_az < 4 or n_el < 2:
        raise InvalidArgumentException(
            "A view grid needs at least 4 azimuth and 2 elevation bins, got {}x{}".format(n_az, n_el)
        )
    if not r > 0:
        raise InvalidArgumentException("View grid radius must be positive, got {}".format(r))
    views = []
    for i in range(n_el):
        elevation = (math.pi / 2) * (i + 0.5) / n_el
        for j in range(n_az):
            azimuth = 2 * math.pi * (j + 0.5) / n_az
            views.append(
                skeleton.CameraView(
                    azimuth, elevation, r, tuple(look_at), focal, width, height
                )
            )
    return ViewGrid(n_az, n_el, float(r), tuple(views))


@dataclass(frozen=True, eq=False)
class ErrorField:
    """
    ``ErrorField`` holds one nonnegative error value per grid cell as an ``(n_el, n_az)`` array. Lower is better.
    ``stderr`` optionally holds the Monte-Carlo standard error of each value.
    """

    grid: ViewGrid
    values: np.ndarray
    stderr: typing.Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != self.grid.shape:
            if values.size == self.grid.size:
                values = values.reshape(self.grid.shape)
            else:
                raise InvalidArgumentException(
                    "Error field shape {} does not match the {} grid".format(values.shape, self.grid.shape)
                )
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise InvalidArgumentException("Error field values must be finite and nonnegative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def value(self, i: int, j: int) -> float:
        return float(self.values[i, j])

    def scaled(self, factor: float) -> "ErrorField":
        return ErrorField(self.grid, self.values * factor)

    def to_csv(self, stream: io.TextIOBase) -> None:
        """
        This function writes the field as CSV: the ``n_az,n_el,radius`` header, a row with those values, then one row
        of ``n_az`` values per elevation bin.
        """
        np.savetxt(
            stream,
            self.values,
            fmt="%.17g",
            delimiter=",",
            header="{}\n{},{},{!r}".format(CSV_HEADER, self.grid.n_az, self.grid.n_el, self.grid.radius),
            comments="",
        )

    @classmethod
    def from_csv(cls, stream: io.TextIOBase) -> "ErrorField":
        header = stream.readline().strip()
        if header != CSV_HEADER:
            raise InvalidArgumentException("Not an error field file, header is '{}'".format(header))
        grid_line = stream.readline().strip()
        try:
            n_az, n_el, radius = grid_line.split(",")
            grid = make_grid(int(n_az), int(n_el), float(radius))
        except ValueError as e:
            raise InvalidArgumentException("Line 2: invalid grid row '{}'".format(grid_line)) from e
        rows = []
        for line_no, line in enumerate(stream, start=3):
            if line.strip() == "":
                continue
            try:
                row = [float(v) for v in line.split(",")]
            except ValueError as e:
                raise InvalidArgumentException("Line {}: {}".format(line_no, e)) from e
            if len(row) != grid.n_az:
                raise InvalidArgumentException(
                    "Line {}: expected {} values, found {}".format(line_no, grid.n_az, len(row))
                )
            rows.append(row)
        return cls(grid, np.array(rows, dtype=float).reshape(-1, grid.n_az))


def _per_trial_errors(
    truth: skeleton.Keypoints2D,
    spine_px: float,
    uv: np.ndarray,
    visible: np.ndarray,
    miss_penalty: float,
) -> np.ndarray:
    if not spine_px >= 1.0:
        return np.full(uv.shape[0], miss_penalty)
    distance = np.linalg.norm(uv - truth.uv[None, :, :], axis=-1) / spine_px
    found = visible & truth.visible[None, :]
    per_joint = np.where(found, np.minimum(distance, miss_penalty), miss_penalty)
    return per_joint.mean(axis=1)


def view_error_samples(
    s: skeleton.Skeleton3D,
    cam: skeleton.CameraView,
    det: skeleton.DetectorParams,
    trials: int,
    rng: np.random.Generator,
    miss_penalty: float = DEFAULT_MISS_PENALTY,
    occluded: typing.Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    This function draws ``trials`` detector outputs and scores each against the ground truth projection: the mean
    over joints of the pixel error divided by the projected spine length, capped at ``miss_penalty``. Undetected
    joints, including joints the camera cannot see at all, cost ``miss_penalty``.

    :return: one error per trial.
    """
    if trials < 1:
        raise InvalidArgumentException("At least one trial is required, got {}".format(trials))
    truth = skeleton.project(s, cam)
    spine_px = skeleton.projected_spine_length(s, cam)
    if occluded is None:
        occluded = skeleton.occlusion_mask(s, cam.position[None, :])[0]
    uv, visible = skeleton.sample_detections(truth, occluded, det, rng, trials)
    return _per_trial_errors(truth, spine_px, uv, visible, miss_penalty)


def view_error(
    s: skeleton.Skeleton3D,
    cam: skeleton.CameraView,
    det: skeleton.DetectorParams,
    trials: int,
    seed: int,
    miss_penalty: float = DEFAULT_MISS_PENALTY,
) -> float:
    """
    This function is the ground truth pose error oracle for one camera view, averaged over ``trials`` detector draws.
    When the spine cannot be projected the result is ``miss_penalty``.
    """
    det.check()
    samples = view_error_samples(
        s, cam, det, trials, np.random.default_rng(seed), miss_penalty
    )
    return float(samples.mean())


def compute_field(
    s: skeleton.Skeleton3D,
    g: ViewGrid,
    det: skeleton.DetectorParams,
    trials: int,
    seed: int,
    miss_penalty: float = DEFAULT_MISS_PENALTY,
) -> ErrorField:
    """
    This function evaluates the oracle on every grid cell with the cameras looking at the skeleton's mid-hip.
    Azimuths are measured in the world frame, so pass a skeleton facing ``+x`` to get a field in the subject frame.
    Each cell draws from its own random stream derived from ``(seed, cell index)``.

    :return: the field, with per-cell Monte-Carlo standard errors.
    """
    det.check()
    if trials < 1:
        raise InvalidArgumentException("At least one trial is required, got {}".format(trials))
    views = g.centered(s.center)
    occluded = skeleton.occlusion_mask(s, np.array([v.position for v in views]))
    values = np.empty(g.size)
    stderr = np.zeros(g.size)
    for index, view in enumerate(views):
        samples = view_error_samples(
            s,
            view,
            det,
            trials,
            np.random.default_rng([seed, index]),
            miss_penalty,
            occluded[index],
        )
        values[index] = samples.mean()
        if trials > 1:
            stderr[index] = samples.std(ddof=1) / math.sqrt(trials)
    logger.debug(
        "Computed a {}x{} error field, range [{:.3f}, {:.3f}]".format(
            g.n_el, g.n_az, values.min(), values.max()
        )
    )
    return ErrorField(g, values.reshape(g.shape), stderr.reshape(g.shape))


def best_views(f: ErrorField, k: int) -> typing.List[typing.Tuple[typing.Tuple[int, int], float]]:
    """
    This function ranks the ``k`` lowest-error cells. Ties go to the smaller elevation index, then the smaller
    azimuth index.

    :return: ``((i, j), error)`` pairs in ascending error order.
    """
    size = f.grid.size
    if not 1 <= k <= size:
        raise InvalidArgumentException("k must lie in [1, {}], got {}".format(size, k))
    flat = f.flat()
    order = np.argsort(flat, kind="stable")[:k]
    return [(f.grid.cell(int(index)), float(flat[index])) for index in order]


def quantize_bins(
    f: typing.Union[ErrorField, np.ndarray], bins: int
) -> np.ndarray:
    """
    This function quantizes the field linearly into ``bins`` equal-width intervals spanning its own minimum and
    maximum. The maximum falls into the last bin and a constant field maps to bin 0 everywhere.
    """
    if bins < 2:
        raise InvalidArgumentException("At least 2 bins are required, got {}".format(bins))
    values = f.values if isinstance(f, ErrorField) else np.asarray(f, dtype=float)
    low = values.min()
    high = values.max()
    if high <= low:
        return np.zeros(values.shape, dtype=int)
    index = np.floor((values - low) / (high - low) * bins).astype(int)
    return np.clip(index, 0, bins - 1)


def mirror_cell(g: ViewGrid, i: int, j: int) -> typing.Tuple[int, int]:
    """
    :return: the cell seen from the mirrored azimuth ``-θ``.
    """
    return i, g.n_az - 1 - j


def cell_neighbors(g: ViewGrid, i: int, j: int) -> typing.List[typing.Tuple[int, int]]:
    """
    :return: the 3x3 neighborhood of a cell, azimuth wrapping around and elevation clamped to the grid.
    """
    result = []
    for di in (-1, 0, 1):
        ni = i + di
        if not 0 <= ni < g.n_el:
            continue
        for dj in (-1, 0, 1):
            result.append((ni, (j + dj) % g.n_az))
    return result
