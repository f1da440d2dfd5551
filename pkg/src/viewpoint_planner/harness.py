"""
This module runs scenario-driven episodes. A scripted subject moves through an obstacle field while a simulated drone
observes it with the imperfect detector, chooses a viewpoint from the predicted error field and flies towards it.
Every tick the detection is scored against the ground truth projection (PCK and keypoint MSE). Fixed-bearing trackers
are run on the same scenarios as baselines, and ``evaluate_suite`` puts everything into one comparison table.

Scenario files are YAML or JSON documents matching ``ScenarioFile``; see ``docs/scenarios.rst``.
"""
import dataclasses
import io
import logging
import math
import typing
from dataclasses import dataclass, field

import numpy as np
import pandas
from arcaflow_plugin_sdk import schema
from arcaflow_plugin_sdk.serialization import load_from_file

from viewpoint_planner import normalize, pesdf, planner, poseerrnet, skeleton, viewsphere
from viewpoint_planner.errors import (
    EpisodeAbortException,
    InvalidArgumentException,
    NormalizationFailureException,
    NoViewpointException,
)

logger = logging.getLogger(__name__)

GAIT_CYCLE = 1.4
"""Distance in meters covered by one full walking cycle."""

HIP_HEIGHT = 0.6
"""Mid-hip height of a standing subject as a fraction of body height."""

BASELINE_BEARINGS = {"front": 0.0, "side": math.pi / 2, "back": math.pi}
METHODS = ("front", "side", "back", "ours")

# Minimum height of the drone above the subject center, keeping the camera on the upper hemisphere.
_CAMERA_LIFT = 0.1


@dataclass
class ObstacleSpec:
    """
    An obstacle is an axis-aligned box, for example a tree trunk reaching from the ground to the ceiling.
    """

    center: typing.Annotated[
        typing.List[float],
        schema.min(3),
        schema.max(3),
        schema.name("Center"),
        schema.description("Box center x, y, z in meters."),
    ]
    size: typing.Annotated[
        typing.List[float],
        schema.min(3),
        schema.max(3),
        schema.name("Size"),
        schema.description("Box side lengths along x, y, z in meters."),
    ]


@dataclass
class KeyframeSpec:
    """
    A keyframe places the subject at a time. Position, heading and joint angles are interpolated linearly between
    keyframes; with ``gait`` set the joint angles follow a walking cycle driven by the distance covered instead.
    """

    time: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("Time"),
        schema.description("Time of the keyframe in seconds."),
    ]
    x: typing.Annotated[float, schema.name("X"), schema.description("Mid-hip x in meters.")] = 0.0
    y: typing.Annotated[float, schema.name("Y"), schema.description("Mid-hip y in meters.")] = 0.0
    heading: typing.Annotated[
        float,
        schema.name("Heading"),
        schema.description("Facing direction in radians, 0 faces +x."),
    ] = 0.0
    pose: typing.Annotated[
        skeleton.PoseParams,
        schema.name("Pose"),
        schema.description("Joint angles. Root placement and gait phase are taken from the keyframe instead."),
    ] = field(default_factory=skeleton.PoseParams)
    gait: typing.Annotated[
        bool,
        schema.name("Walking"),
        schema.description("Animate a walking cycle until the next keyframe."),
    ] = False


@dataclass
class ScenarioFile:
    """
    This is the content of a scenario file: the environment, the subject script and the drone start.
    """

    name: typing.Annotated[
        str,
        schema.min(1),
        schema.name("Name"),
        schema.description("Scenario name, used as the column label in comparison tables."),
    ]
    size: typing.Annotated[
        typing.List[float],
        schema.min(2),
        schema.max(2),
        schema.name("Size"),
        schema.description("Extent of the environment along x and y in meters, centered on the origin."),
    ]
    subject: typing.Annotated[
        typing.List[KeyframeSpec],
        schema.min(1),
        schema.name("Subject script"),
        schema.description("Keyframes of the subject in increasing time order."),
    ]
    drone_start: typing.Annotated[
        typing.List[float],
        schema.min(3),
        schema.max(3),
        schema.name("Drone start"),
        schema.description("Initial drone position in meters."),
    ]
    duration: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("Duration"),
        schema.description("Episode length in seconds."),
    ] = 20.0
    tick_rate: typing.Annotated[
        float,
        schema.min(0.001),
        schema.name("Tick rate"),
        schema.description("Perception and planning rate in Hz."),
    ] = 15.0
    ceiling: typing.Annotated[
        float,
        schema.min(0.1),
        schema.name("Ceiling"),
        schema.description("Height of the environment in meters."),
    ] = 8.0
    resolution: typing.Annotated[
        float,
        schema.min(0.01),
        schema.name("Resolution"),
        schema.description("Voxel size of the occupancy grid in meters."),
    ] = 0.25
    obstacles: typing.Annotated[
        typing.List[ObstacleSpec],
        schema.name("Obstacles"),
        schema.description("Box obstacles."),
    ] = field(default_factory=list)
    subject_height: typing.Annotated[
        float,
        schema.min(1.0),
        schema.max(2.2),
        schema.name("Subject height"),
        schema.description("Body height of the subject in meters."),
    ] = 1.8
    detector: typing.Annotated[
        skeleton.DetectorParams,
        schema.name("Detector"),
        schema.description("Error statistics of the simulated keypoint detector."),
    ] = field(default_factory=skeleton.DetectorParams)
    seed: typing.Annotated[
        int,
        schema.min(0),
        schema.name("Seed"),
        schema.description("Seed of all randomness in the episode."),
    ] = 0


scenario_file_schema = schema.build_object_schema(ScenarioFile)


def environment_lattice(size: typing.Sequence[float], ceiling: float, resolution: float) -> pesdf.Lattice:
    """
    :return: the lattice covering ``size[0] x size[1]`` meters around the origin from the ground to ``ceiling``.
    """
    if not (len(size) == 2 and min(size) > 0 and ceiling > 0 and resolution > 0):
        raise InvalidArgumentException("The environment size, ceiling and resolution must be positive")
    n_x = int(round(size[0] / resolution)) + 1
    n_y = int(round(size[1] / resolution)) + 1
    n_z = int(round(ceiling / resolution)) + 1
    origin = [-(n_x - 1) / 2 * resolution, -(n_y - 1) / 2 * resolution, 0.0]
    return pesdf.Lattice(origin, resolution, (n_x, n_y, n_z))


@dataclass(frozen=True, eq=False)
class Scenario:
    """
    ``Scenario`` is a validated scenario with its occupancy grid and distance field, ready to run.
    """

    name: str
    occupancy: pesdf.OccupancyGrid
    esdf: pesdf.Esdf
    keyframes: typing.Tuple[KeyframeSpec, ...]
    duration: float
    tick_rate: float
    drone_start: np.ndarray
    detector: skeleton.DetectorParams
    subject_height: float = 1.8
    seed: int = 0

    @classmethod
    def from_file(cls, sf: ScenarioFile, max_distance: float = 10.0) -> "Scenario":
        """
        This function checks the scenario invariants and builds the environment.

        :raises InvalidArgumentException: on a non-positive duration, keyframe times that do not increase, a subject
            path leaving the environment or a drone start outside the free space.
        """
        if not (sf.duration > 0 and math.isfinite(sf.duration)):
            raise InvalidArgumentException("Scenario {}: the duration must be positive".format(sf.name))
        if not sf.tick_rate > 0:
            raise InvalidArgumentException("Scenario {}: the tick rate must be positive".format(sf.name))
        if len(sf.subject) == 0:
            raise InvalidArgumentException("Scenario {}: the subject script is empty".format(sf.name))
        times = [k.time for k in sf.subject]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidArgumentException(
                "Scenario {}: keyframe times must be strictly increasing, got {}".format(sf.name, times)
            )
        if not 1.0 <= sf.subject_height <= 2.2:
            raise InvalidArgumentException("Scenario {}: the subject height is out of range".format(sf.name))
        lattice = environment_lattice(sf.size, sf.ceiling, sf.resolution)
        hip = HIP_HEIGHT * sf.subject_height
        for k in sf.subject:
            k.pose.check_limits()
            if not lattice.contains([k.x, k.y, hip]):
                raise InvalidArgumentException(
                    "Scenario {}: the subject at t={} ({}, {}) is outside the environment".format(
                        sf.name, k.time, k.x, k.y
                    )
                )
        occupancy = pesdf.OccupancyGrid.from_boxes(lattice, [(o.center, o.size) for o in sf.obstacles])
        start = np.asarray(sf.drone_start, dtype=float)
        if start.shape != (3,) or not lattice.contains(start):
            raise InvalidArgumentException(
                "Scenario {}: the drone start {} is outside the environment".format(sf.name, sf.drone_start)
            )
        if occupancy.is_occupied(start):
            raise InvalidArgumentException("Scenario {}: the drone starts inside an obstacle".format(sf.name))
        esdf = pesdf.esdf_from_occupancy(occupancy, max_distance)
        logger.info(
            "Loaded scenario {}: {} obstacle voxels, {} keyframes, {:.1f} s".format(
                sf.name, int(occupancy.occupied.sum()), len(sf.subject), sf.duration
            )
        )
        return cls(
            sf.name,
            occupancy,
            esdf,
            tuple(sf.subject),
            float(sf.duration),
            float(sf.tick_rate),
            start,
            sf.detector,
            float(sf.subject_height),
            int(sf.seed),
        )

    @property
    def dt(self) -> float:
        return 1.0 / self.tick_rate

    @property
    def ticks(self) -> int:
        return max(1, int(math.floor(self.duration * self.tick_rate + 1e-9)))

    @property
    def lattice(self) -> pesdf.Lattice:
        return self.occupancy.lattice

    def subject_params(self, t: float) -> skeleton.PoseParams:
        """
        :return: the subject's pose at time ``t``, holding the first and last keyframes outside the script.
        """
        frames = self.keyframes
        times = np.array([k.time for k in frames])
        xy = np.array([[k.x, k.y] for k in frames])
        headings = np.unwrap([k.heading for k in frames])
        walked = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])
        if len(frames) == 1 or t <= times[0]:
            k, f = 0, 0.0
        elif t >= times[-1]:
            k, f = len(frames) - 1, 0.0
        else:
            k = int(np.searchsorted(times, t, side="right")) - 1
            f = (t - times[k]) / (times[k + 1] - times[k])
        n = min(k + 1, len(frames) - 1)
        position = xy[k] + f * (xy[n] - xy[k])
        heading = float(headings[k] + f * (headings[n] - headings[k]))
        if frames[k].gait:
            distance = walked[k] + f * (walked[n] - walked[k])
            angles = skeleton.gait_params(2 * math.pi * distance / GAIT_CYCLE)
        else:
            angles = _interpolate_angles(frames[k].pose, frames[n].pose, f)
        return dataclasses.replace(
            angles,
            root_x=float(position[0]),
            root_y=float(position[1]),
            root_z=HIP_HEIGHT * self.subject_height,
            heading=heading,
        )


def _interpolate_angles(a: skeleton.PoseParams, b: skeleton.PoseParams, f: float) -> skeleton.PoseParams:
    values = {}
    for name in skeleton.JOINT_LIMITS:
        low = getattr(a, name)
        values[name] = low + f * (getattr(b, name) - low)
    return skeleton.PoseParams(**values)


def load_scenario(file_name: str, max_distance: float = 10.0) -> Scenario:
    """
    This function reads a scenario file. Schema violations raise the SDK's ``ConstraintException`` naming the field.
    """
    return Scenario.from_file(scenario_file_schema.unserialize(load_from_file(file_name)), max_distance)


@dataclass
class EpisodeConfig:
    """
    These are the settings shared by every episode of a run.
    """

    grid_config: typing.Annotated[
        viewsphere.GridConfig,
        schema.name("View grid"),
        schema.description("View grid and camera model; must match the network."),
    ] = field(default_factory=viewsphere.GridConfig)
    pesdf_config: typing.Annotated[
        pesdf.PesdfConfig,
        schema.name("Distance field"),
        schema.description("Local pose-enhanced distance field around the drone."),
    ] = field(default_factory=lambda: pesdf.PesdfConfig(height=8.0))
    planner_config: typing.Annotated[
        planner.PlannerConfig,
        schema.name("Planner"),
        schema.description("Trajectory optimizer and viewpoint selection."),
    ] = field(default_factory=planner.PlannerConfig)
    pck_alpha: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("PCK threshold"),
        schema.description("Keypoint correctness threshold as a fraction of the projected spine length."),
    ] = 0.2
    reuse_ticks: typing.Annotated[
        int,
        schema.min(0),
        schema.name("Field reuse"),
        schema.description("Ticks the last error field is reused while keypoints cannot be normalized."),
    ] = 10
    drone_radius: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("Drone radius"),
        schema.description("Obstacle clearance in meters below which a tick counts as a collision."),
    ] = 0.3
    baseline_elevation: typing.Annotated[
        float,
        schema.min(0.0),
        schema.max(math.pi / 2),
        schema.name("Baseline elevation"),
        schema.description("Camera elevation in radians held by the fixed-bearing baselines."),
    ] = 0.3
    oracle_trials: typing.Annotated[
        int,
        schema.min(0),
        schema.name("Oracle trials"),
        schema.description("When positive, use ground truth error fields with this many detector draws per cell."),
    ] = 0

    def check(self) -> None:
        self.pesdf_config.check()
        self.planner_config.check()
        if not self.pck_alpha >= 0:
            raise InvalidArgumentException("The PCK threshold must not be negative")
        if self.reuse_ticks < 0 or self.oracle_trials < 0:
            raise InvalidArgumentException("Reuse ticks and oracle trials must not be negative")
        if not 0 <= self.baseline_elevation <= math.pi / 2:
            raise InvalidArgumentException("The baseline elevation must lie in [0, pi/2]")


class OracleFields:
    """
    ``OracleFields`` computes ground truth error fields for subject poses in their body frame and caches them, so a
    static pose is evaluated only once.
    """

    def __init__(
        self,
        grid: viewsphere.ViewGrid,
        det: skeleton.DetectorParams,
        trials: int,
        seed: int,
        height: float = 1.8,
        miss_penalty: float = viewsphere.DEFAULT_MISS_PENALTY,
    ):
        self.grid = grid
        self.det = det
        self.trials = trials
        self.seed = seed
        self.miss_penalty = miss_penalty
        self._base = skeleton.build_canonical_skeleton(height)
        self._cache: typing.Dict[skeleton.PoseParams, viewsphere.ErrorField] = {}

    def __call__(self, params: skeleton.PoseParams) -> viewsphere.ErrorField:
        key = poseerrnet.body_frame(params)
        if key not in self._cache:
            body = skeleton.animate(self._base, key)
            self._cache[key] = viewsphere.compute_field(
                body, self.grid, self.det, self.trials, self.seed, self.miss_penalty
            )
        return self._cache[key]


def pck(detected: skeleton.Keypoints2D, truth: skeleton.Keypoints2D, threshold: float) -> float:
    """
    :return: the fraction of joints visible in ``truth`` that are detected within ``threshold`` pixels. A threshold
        of 0 counts exact matches only.
    """
    reference = truth.visible
    n = int(reference.sum())
    if n == 0:
        return 0.0
    distance = np.linalg.norm(detected.uv - truth.uv, axis=1)
    correct = reference & detected.visible & (distance <= threshold)
    return float(correct.sum()) / n


def keypoint_mse(detected: skeleton.Keypoints2D, truth: skeleton.Keypoints2D) -> float:
    """
    :return: the mean squared pixel error over joints visible in both, NaN when there are none.
    """
    both = truth.visible & detected.visible
    if not both.any():
        return math.nan
    return float(np.mean(np.sum((detected.uv[both] - truth.uv[both]) ** 2, axis=1)))


@dataclass
class EpisodeMetrics:
    """
    ``EpisodeMetrics`` holds the per-tick scores of an episode and their summary. ``mse`` is NaN on ticks where no
    joint was matched; ``mse_mean`` averages the other ticks and is 0 when there are none.
    """

    scenario: str
    method: str
    ticks: int
    pck: np.ndarray
    mse: np.ndarray
    pck_mean: float
    mse_mean: float
    mse_ticks: int
    occlusion_ticks: int
    collisions: int
    min_clearance: float
    second_best_ticks: int
    switches: int
    held_ticks: int

    def summary(self) -> typing.Dict[str, typing.Any]:
        return {
            "scenario": self.scenario,
            "method": self.method,
            "ticks": self.ticks,
            "pck": self.pck_mean,
            "mse": self.mse_mean,
            "mse_ticks": self.mse_ticks,
            "occlusion_ticks": self.occlusion_ticks,
            "collisions": self.collisions,
            "min_clearance": self.min_clearance,
            "second_best_ticks": self.second_best_ticks,
            "switches": self.switches,
            "held_ticks": self.held_ticks,
        }


@dataclass
class EpisodeResult:
    metrics: EpisodeMetrics
    log: pandas.DataFrame


class _EpisodeLog:
    def __init__(self, sc: Scenario, method: str, cfg: EpisodeConfig):
        self.sc = sc
        self.method = method
        self.cfg = cfg
        self.rows: typing.List[typing.Dict[str, typing.Any]] = []

    def record(
        self,
        tick: int,
        position: np.ndarray,
        params: skeleton.PoseParams,
        body: skeleton.Skeleton3D,
        cam: skeleton.CameraView,
        kp: skeleton.Keypoints2D,
        status: str,
        choice: typing.Optional[planner.ViewChoice] = None,
    ) -> None:
        truth = skeleton.project(body, cam)
        threshold = self.cfg.pck_alpha * skeleton.projected_spine_length(body, cam)
        occluded = skeleton.occlusion_mask(body, cam.position[None, :])[0] & truth.visible
        row = {
            "tick": tick,
            "time": tick * self.sc.dt,
            "drone_x": float(position[0]),
            "drone_y": float(position[1]),
            "drone_z": float(position[2]),
            "subject_x": params.root_x,
            "subject_y": params.root_y,
            "heading": params.heading,
            "view_i": -1 if choice is None else choice.cell[0],
            "view_j": -1 if choice is None else choice.cell[1],
            "rank": 0 if choice is None else choice.rank,
            "status": status,
            "visible": int(kp.visible.sum()),
            "occluded": int(occluded.sum()),
            "clearance": clearance(self.sc, position),
            "pck": pck(kp, truth, threshold),
            "mse": keypoint_mse(kp, truth),
        }
        logger.debug(
            "{} tick {}: {} PCK {:.3f} at ({:.2f}, {:.2f}, {:.2f})".format(
                self.method, tick, status, row["pck"], *position
            )
        )
        self.rows.append(row)

    def finish(self) -> EpisodeResult:
        log = pandas.DataFrame(self.rows)
        mse = log["mse"].to_numpy(dtype=float)
        finite = np.isfinite(mse)
        cells = [(r["view_i"], r["view_j"]) for r in self.rows if r["rank"] > 0]
        metrics = EpisodeMetrics(
            scenario=self.sc.name,
            method=self.method,
            ticks=len(log),
            pck=log["pck"].to_numpy(dtype=float),
            mse=mse,
            pck_mean=float(log["pck"].mean()),
            mse_mean=float(mse[finite].mean()) if finite.any() else 0.0,
            mse_ticks=int(finite.sum()),
            occlusion_ticks=int((log["occluded"] > 0).sum()),
            collisions=int((log["clearance"] < self.cfg.drone_radius).sum()),
            min_clearance=float(log["clearance"].min()),
            second_best_ticks=int((log["rank"] > 1).sum()),
            switches=sum(1 for a, b in zip(cells, cells[1:]) if a != b),
            held_ticks=int(log["status"].isin(["held", "safety-hold", "no-viewpoint"]).sum()),
        )
        logger.info(
            "Episode {} ({}): PCK {:.3f}, MSE {:.2f} over {} ticks, {} switches".format(
                metrics.scenario, metrics.method, metrics.pck_mean, metrics.mse_mean, metrics.ticks, metrics.switches
            )
        )
        return EpisodeResult(metrics, log)


def clearance(sc: Scenario, position: typing.Sequence[float]) -> float:
    """
    :return: the obstacle distance at ``position``, interpolated from the scenario's distance field.
    """
    return float(pesdf.sample_points(sc.esdf, np.asarray(position, dtype=float)[None, :])[0][0])


def _tick_seed(seed: int, tick: int) -> int:
    return int(np.random.default_rng([seed, tick]).integers(2 ** 31))


def _drone_camera(
    position: np.ndarray, body: skeleton.Skeleton3D, grid_config: viewsphere.GridConfig
) -> skeleton.CameraView:
    return skeleton.CameraView.from_position(
        position, body.center, grid_config.focal, grid_config.width, grid_config.height
    )


def _check_start(sc: Scenario, cfg: EpisodeConfig) -> np.ndarray:
    start = sc.drone_start.copy()
    if start[2] < HIP_HEIGHT * sc.subject_height + _CAMERA_LIFT:
        raise InvalidArgumentException(
            "Scenario {}: the drone must start above the subject center".format(sc.name)
        )
    if clearance(sc, start) < cfg.planner_config.collision_distance / 2:
        raise InvalidArgumentException(
            "Scenario {}: the drone starts closer than {} m to an obstacle".format(
                sc.name, cfg.planner_config.collision_distance / 2
            )
        )
    return start


def _advance(
    sc: Scenario,
    cfg: EpisodeConfig,
    position: np.ndarray,
    target: np.ndarray,
    body: skeleton.Skeleton3D,
    tick: int,
) -> typing.Tuple[np.ndarray, bool]:
    """
    This function moves the drone to ``target`` unless that would bring it closer than half the collision distance
    to an obstacle, in which case it holds position.

    :return: the new position and whether the drone held.
    """
    target = np.array(target, dtype=float)
    target[2] = max(target[2], body.center[2] + _CAMERA_LIFT)
    if not sc.lattice.contains(target):
        raise EpisodeAbortException(
            "The drone left the environment at ({:.2f}, {:.2f}, {:.2f})".format(*target), tick
        )
    if clearance(sc, target) < cfg.planner_config.collision_distance / 2:
        logger.warning("Tick {}: holding position, the next step is too close to an obstacle".format(tick))
        return position, True
    return target, False


def run_episode(
    sc: Scenario,
    net: typing.Optional[poseerrnet.PerceptionNet],
    cfg: typing.Optional[EpisodeConfig] = None,
) -> EpisodeResult:
    """
    This function flies the full pipeline through a scenario. Each tick the subject is animated and observed from
    the drone; the keypoints are normalized and the network predicts the error field (the last field is reused for
    up to ``reuse_ticks`` ticks when normalization fails, after which the drone holds). The field is merged with the
    obstacle distance into the local distance field, the best visible and safe viewpoint is selected, a trajectory
    towards it is optimized and the drone advances one tick along it. The observation is scored before moving.

    :param net: the trained network, unused when ``cfg.oracle_trials`` asks for ground truth fields.
    :raises InvalidArgumentException: when the network does not match the grid or the drone start is invalid.
    :raises EpisodeAbortException: when the drone leaves the environment.
    """
    cfg = cfg if cfg is not None else EpisodeConfig()
    cfg.check()
    grid = cfg.grid_config.build()
    motion = cfg.planner_config
    oracle = None
    if cfg.oracle_trials > 0:
        oracle = OracleFields(
            grid, sc.detector, cfg.oracle_trials, sc.seed, sc.subject_height, cfg.grid_config.miss_penalty
        )
    elif net is None:
        raise InvalidArgumentException("A network is required unless oracle fields are requested")
    elif net.output_size != grid.size or net.input_size != normalize.VECTOR_SIZE:
        raise InvalidArgumentException(
            "The network maps {} inputs to {} cells, the grid needs {} to {}".format(
                net.input_size, net.output_size, normalize.VECTOR_SIZE, grid.size
            )
        )
    base = skeleton.build_canonical_skeleton(sc.subject_height)
    position = _check_start(sc, cfg)
    episode = _EpisodeLog(sc, "ours", cfg)
    last_field = None
    stale = 0
    current = None
    for tick in range(sc.ticks):
        params = sc.subject_params(tick * sc.dt)
        body = skeleton.animate(base, params)
        cam = _drone_camera(position, body, cfg.grid_config)
        kp = skeleton.detect(body, cam, sc.detector, _tick_seed(sc.seed, tick))
        status = "planned"
        error_field = None
        if oracle is not None:
            error_field = oracle(params)
        else:
            try:
                error_field = poseerrnet.forward(net, normalize.normalize_keypoints(kp), grid)
                last_field, stale = error_field, 0
            except NormalizationFailureException:
                if last_field is not None and stale < cfg.reuse_ticks:
                    error_field = last_field
                    stale += 1
                    status = "reused"
        choice = None
        if error_field is None:
            status = "held"
        else:
            try:
                choice = planner.select_viewpoint(
                    error_field, body.center, params.heading, body.head, sc.occupancy, sc.esdf, motion, current
                )
            except NoViewpointException:
                status = "no-viewpoint"
        target = position
        if choice is not None:
            current = choice.cell
            merged = pesdf.build_pesdf(error_field, body.center, params.heading, sc.esdf, position, cfg.pesdf_config)
            goal = choice.view.position
            t0 = planner.orbit_trajectory(position, goal, body.center, motion.segments, motion.dt)
            result = planner.optimize(t0, merged, sc.esdf, motion, goal)
            target = result.trajectory.position_at(sc.dt)
        episode.record(tick, position, params, body, cam, kp, status, choice)
        position, held = _advance(sc, cfg, position, target, body, tick)
        if held and status != "held":
            episode.rows[-1]["status"] = "safety-hold"
    return episode.finish()


def run_baseline(sc: Scenario, mode: str, cfg: typing.Optional[EpisodeConfig] = None) -> EpisodeResult:
    """
    This function runs a fixed-bearing tracker: the drone heads for the point at the view radius and
    ``baseline_elevation`` whose bearing relative to the subject's heading is 0 (front), pi/2 (side) or pi (back),
    at most at the maximum speed, holding when the next step would come too close to an obstacle.
    """
    if mode not in BASELINE_BEARINGS:
        raise InvalidArgumentException(
            "Unknown baseline {}, expected one of {}".format(mode, ", ".join(BASELINE_BEARINGS))
        )
    cfg = cfg if cfg is not None else EpisodeConfig()
    cfg.check()
    base = skeleton.build_canonical_skeleton(sc.subject_height)
    position = _check_start(sc, cfg)
    episode = _EpisodeLog(sc, mode, cfg)
    radius = cfg.grid_config.radius
    elevation = cfg.baseline_elevation
    max_step = cfg.planner_config.max_speed * sc.dt
    for tick in range(sc.ticks):
        params = sc.subject_params(tick * sc.dt)
        body = skeleton.animate(base, params)
        cam = _drone_camera(position, body, cfg.grid_config)
        kp = skeleton.detect(body, cam, sc.detector, _tick_seed(sc.seed, tick))
        bearing = params.heading + BASELINE_BEARINGS[mode]
        desired = body.center + radius * np.array(
            [
                math.cos(elevation) * math.cos(bearing),
                math.cos(elevation) * math.sin(bearing),
                math.sin(elevation),
            ]
        )
        desired = np.clip(desired, sc.lattice.origin, sc.lattice.upper)
        step = desired - position
        length = float(np.linalg.norm(step))
        if length > max_step:
            step *= max_step / length
        episode.record(tick, position, params, body, cam, kp, "tracking")
        position, held = _advance(sc, cfg, position, position + step, body, tick)
        if held:
            episode.rows[-1]["status"] = "safety-hold"
    return episode.finish()


def write_tick_log(result: EpisodeResult, stream: io.TextIOBase) -> None:
    result.log.to_csv(stream, index=False, lineterminator="\n")


def metrics_table(results: typing.Sequence[EpisodeResult]) -> pandas.DataFrame:
    return pandas.DataFrame([r.metrics.summary() for r in results])


def write_metrics_csv(results: typing.Sequence[EpisodeResult], stream: io.TextIOBase) -> None:
    metrics_table(results).to_csv(stream, index=False, lineterminator="\n")


@dataclass
class SuiteResult:
    table: pandas.DataFrame
    episodes: typing.List[EpisodeResult]


def comparison_table(results: typing.Sequence[EpisodeResult]) -> pandas.DataFrame:
    """
    This function lays out episode means with one row per method and a PCK and MSE column per scenario, followed by
    the ``All`` columns: PCK weighted by ticks and MSE weighted by the ticks that had an MSE.
    """
    scenarios = list(dict.fromkeys(r.metrics.scenario for r in results))
    table = pandas.DataFrame(index=pandas.Index(list(METHODS), name="method"))
    by_key = {(r.metrics.scenario, r.metrics.method): r.metrics for r in results}
    for name in scenarios:
        table[name + " PCK"] = [by_key[(name, m)].pck_mean if (name, m) in by_key else math.nan for m in METHODS]
        table[name + " MSE"] = [by_key[(name, m)].mse_mean if (name, m) in by_key else math.nan for m in METHODS]
    all_pck = []
    all_mse = []
    for method in METHODS:
        own = [r.metrics for r in results if r.metrics.method == method]
        ticks = sum(m.ticks for m in own)
        mse_ticks = sum(m.mse_ticks for m in own)
        all_pck.append(sum(m.pck_mean * m.ticks for m in own) / ticks if ticks else math.nan)
        all_mse.append(sum(m.mse_mean * m.mse_ticks for m in own) / mse_ticks if mse_ticks else 0.0)
    table["All PCK"] = all_pck
    table["All MSE"] = all_mse
    return table


def evaluate_suite(
    scenarios: typing.Sequence[Scenario],
    net: typing.Optional[poseerrnet.PerceptionNet],
    cfg: typing.Optional[EpisodeConfig] = None,
) -> SuiteResult:
    """
    This function runs the three baselines and the full pipeline on every scenario. Episodes are independent of
    each other.
    """
    if len(scenarios) == 0:
        raise InvalidArgumentException("At least one scenario is required")
    names = [sc.name for sc in scenarios]
    if len(set(names)) != len(names):
        raise InvalidArgumentException("Scenario names must be unique, got {}".format(names))
    cfg = cfg if cfg is not None else EpisodeConfig()
    episodes = []
    for sc in scenarios:
        for mode in BASELINE_BEARINGS:
            episodes.append(run_baseline(sc, mode, cfg))
        episodes.append(run_episode(sc, net, cfg))
    return SuiteResult(comparison_table(episodes), episodes)


def write_table_csv(table: pandas.DataFrame, stream: io.TextIOBase) -> None:
    table.to_csv(stream, lineterminator="\n")


def read_table_csv(stream: io.TextIOBase) -> pandas.DataFrame:
    return pandas.read_csv(stream, index_col=0, float_precision="round_trip")


def format_table(table: pandas.DataFrame) -> str:
    return table.to_string(float_format=lambda v: "{:.3f}".format(v)) + "\n"
