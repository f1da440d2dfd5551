"""
This module declares the Arcaflow steps of the viewpoint planner: dataset generation, training, the robustness
evaluation, the single-field planning demo, single scenario simulation and the comparison suite. Every step writes its
files to the output directory and returns either a ``success`` or an ``error`` output; exceptions never escape.
"""
import dataclasses
import logging
import os
import re
import sys
import typing
from dataclasses import dataclass, field

import numpy as np
import pandas
from arcaflow_plugin_sdk import plugin, schema
from arcaflow_plugin_sdk.serialization import LoadFromFileException

from viewpoint_planner import harness, pesdf, planner, poseerrnet, skeleton, viewsphere
from viewpoint_planner.errors import InvalidArgumentException, ViewpointPlannerException
from viewpoint_planner.serialization import resolve_output_dir

logger = logging.getLogger(__name__)

LOAD_CATEGORY = "load"
LOAD_EXIT_CODE = 64
IO_CATEGORY = "io"
IO_EXIT_CODE = 74

_SEED = typing.Annotated[
    int,
    schema.min(0),
    schema.name("Seed"),
    schema.description("Seed of all randomness in the step."),
]
_OUTPUT_DIR = typing.Annotated[
    typing.Optional[str],
    schema.name("Output directory"),
    schema.description(
        "Directory the output files are written to. Defaults to $VIEWPOINT_PLANNER_OUTPUT_DIR, then the working "
        "directory."
    ),
]


@dataclass
class ErrorOutput:
    """
    This is the output of every step when it fails. ``exit_code`` is what the command line wrapper exits with.
    """

    category: str
    message: str
    exit_code: int


def _failure(e: Exception) -> typing.Tuple[str, ErrorOutput]:
    if isinstance(e, ViewpointPlannerException):
        category, exit_code = e.category, e.exit_code
    elif isinstance(e, LoadFromFileException):
        category, exit_code = LOAD_CATEGORY, LOAD_EXIT_CODE
    elif isinstance(e, schema.ConstraintException):
        category, exit_code = InvalidArgumentException.category, InvalidArgumentException.exit_code
    else:
        category, exit_code = IO_CATEGORY, IO_EXIT_CODE
    logger.error("Step failed ({}): {}".format(category, e))
    return "error", ErrorOutput(category, str(e), exit_code)


_STEP_ERRORS = (ViewpointPlannerException, LoadFromFileException, schema.ConstraintException, OSError)


class _StepStderrHandler(logging.StreamHandler):
    """
    This handler always writes to the current ``sys.stderr``, which the SDK swaps for a buffer while a step runs.
    """

    def __init__(self):
        super().__init__()
        self.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def _log_to_step_output() -> None:
    package_logger = logging.getLogger("viewpoint_planner")
    if not any(isinstance(h, _StepStderrHandler) for h in package_logger.handlers):
        package_logger.addHandler(_StepStderrHandler())
    if package_logger.level == logging.NOTSET:
        package_logger.setLevel(logging.INFO)


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", name)


def _load_net(file_name: str) -> poseerrnet.PerceptionNet:
    with open(file_name, "rb") as f:
        return poseerrnet.PerceptionNet.load(f)


def _check_net(net: poseerrnet.PerceptionNet, grid: viewsphere.ViewGrid) -> None:
    if net.output_size != grid.size:
        raise InvalidArgumentException(
            "The network predicts {} cells but the grid has {}".format(net.output_size, grid.size)
        )


@dataclass
class GenerateDataInput:
    """
    These are the parameters of the dataset generation. Walking poses at random phases are observed by the simulated
    detector and paired with their ground truth error fields.
    """

    count: typing.Annotated[
        int,
        schema.min(1),
        schema.name("Poses"),
        schema.description("Number of subject poses to sample."),
    ] = 500
    trials: typing.Annotated[
        int,
        schema.min(1),
        schema.name("Trials"),
        schema.description("Detector draws per grid cell for the ground truth field."),
    ] = 20
    grid: typing.Annotated[viewsphere.GridConfig, schema.name("View grid")] = field(
        default_factory=viewsphere.GridConfig
    )
    detector: typing.Annotated[skeleton.DetectorParams, schema.name("Detector")] = field(
        default_factory=skeleton.DetectorParams
    )
    height: typing.Annotated[
        float,
        schema.min(1.0),
        schema.max(2.2),
        schema.name("Subject height"),
    ] = 1.8
    observation_view: typing.Annotated[
        typing.Optional[int],
        schema.min(0),
        schema.name("Observation view"),
        schema.description("Grid cell index every pose is observed from. Unset picks a random cell per pose."),
    ] = None
    seed: _SEED = 0
    output_dir: _OUTPUT_DIR = None
    file_name: typing.Annotated[str, schema.min(1), schema.name("Dataset file")] = "dataset.txt"


@dataclass
class GenerateDataOutput:
    dataset: str
    pairs: int
    skipped: int
    cells: int


@plugin.step(
    id="generate-data",
    name="Generate training data",
    description="Builds a dataset of normalized observations paired with ground truth error fields.",
    outputs={"success": GenerateDataOutput, "error": ErrorOutput},
)
def generate_data(
    params: GenerateDataInput,
) -> typing.Tuple[str, typing.Union[GenerateDataOutput, ErrorOutput]]:
    _log_to_step_output()
    try:
        grid = params.grid.build()
        policy = poseerrnet.uniform_view_policy
        if params.observation_view is not None:
            if params.observation_view >= grid.size:
                raise InvalidArgumentException(
                    "Observation view {} is outside the {} cell grid".format(params.observation_view, grid.size)
                )
            policy = poseerrnet.fixed_view_policy(params.observation_view)
        poses = poseerrnet.gait_poses(params.count, params.seed)
        pairs = poseerrnet.generate_dataset(
            poses,
            grid,
            params.detector,
            policy,
            params.trials,
            params.seed,
            params.grid.miss_penalty,
            params.height,
        )
        if len(pairs) == 0:
            raise InvalidArgumentException("None of the {} poses could be observed".format(params.count))
        path = os.path.join(resolve_output_dir(params.output_dir), params.file_name)
        with open(path, "w", newline="\n") as f:
            poseerrnet.write_dataset(pairs, grid, f)
    except _STEP_ERRORS as e:
        return _failure(e)
    return "success", GenerateDataOutput(path, len(pairs), params.count - len(pairs), grid.size)


@dataclass
class TrainInput:
    """
    These are the parameters of network training. The input seed replaces the seed of the training configuration.
    """

    dataset: typing.Annotated[
        str,
        schema.min(1),
        schema.name("Dataset"),
        schema.description("Dataset file written by generate-data."),
    ]
    config: typing.Annotated[poseerrnet.TrainConfig, schema.name("Training")] = field(
        default_factory=poseerrnet.TrainConfig
    )
    seed: _SEED = 0
    output_dir: _OUTPUT_DIR = None
    weights_file: typing.Annotated[str, schema.min(1), schema.name("Weights file")] = "weights.pen"
    history_file: typing.Annotated[str, schema.min(1), schema.name("History file")] = "history.csv"


@dataclass
class TrainOutput:
    weights: str
    history: str
    pairs: int
    initial_validation_loss: float
    best_validation_loss: float
    best_epoch: int
    rank1_agreement: float


@plugin.step(
    id="train",
    name="Train the network",
    description="Trains the pose error network on a dataset and writes its weights and loss history.",
    outputs={"success": TrainOutput, "error": ErrorOutput},
)
def train_network(params: TrainInput) -> typing.Tuple[str, typing.Union[TrainOutput, ErrorOutput]]:
    _log_to_step_output()
    try:
        with open(params.dataset) as f:
            pairs, grid = poseerrnet.read_dataset(f)
        cfg = dataclasses.replace(params.config, seed=params.seed)
        net, history = poseerrnet.train(pairs, cfg)
        held_out = [pairs[i] for i in history.validation_indices]
        agreement = poseerrnet.rank1_agreement(net, held_out, grid)
        output_dir = resolve_output_dir(params.output_dir)
        weights = os.path.join(output_dir, params.weights_file)
        with open(weights, "wb") as f:
            net.save(f)
        history_path = os.path.join(output_dir, params.history_file)
        table = pandas.DataFrame(
            {
                "epoch": np.arange(1, len(history.train_loss) + 1),
                "train_loss": history.train_loss,
                "validation_loss": history.validation_loss,
                "best_validation_loss": history.best_validation_loss,
            }
        )
        with open(history_path, "w", newline="\n") as f:
            table.to_csv(f, index=False, lineterminator="\n")
    except _STEP_ERRORS as e:
        return _failure(e)
    logger.info("Held-out rank-1 agreement {:.3f}".format(agreement))
    best = min(history.best_validation_loss) if history.best_validation_loss else history.initial_validation_loss
    return "success", TrainOutput(
        weights,
        history_path,
        len(pairs),
        float(history.initial_validation_loss),
        float(best),
        int(history.best_epoch),
        float(agreement),
    )


@dataclass
class RobustnessInput:
    """
    These are the parameters of the perturbation robustness evaluation.
    """

    weights: typing.Annotated[str, schema.min(1), schema.name("Weights"), schema.description("PENv1 file.")]
    frames: typing.Annotated[
        int,
        schema.min(1),
        schema.name("Frames"),
        schema.description("Number of synthetic walking frames to perturb."),
    ] = 146
    bins: typing.Annotated[
        int,
        schema.min(2),
        schema.name("Bins"),
        schema.description("Quantization bins of the predicted field."),
    ] = 21
    grid: typing.Annotated[viewsphere.GridConfig, schema.name("View grid")] = field(
        default_factory=viewsphere.GridConfig
    )
    detector: typing.Annotated[skeleton.DetectorParams, schema.name("Detector")] = field(
        default_factory=skeleton.DetectorParams
    )
    height: typing.Annotated[float, schema.min(1.0), schema.max(2.2), schema.name("Subject height")] = 1.8
    seed: _SEED = 0
    output_dir: _OUTPUT_DIR = None
    file_name: typing.Annotated[str, schema.min(1), schema.name("Table file")] = "robustness.csv"


@dataclass
class RobustnessOutput:
    table: str
    rows: typing.List[poseerrnet.RobustnessResult]


@plugin.step(
    id="eval-robustness",
    name="Evaluate robustness",
    description="Measures how often perturbed observations change the quantized predicted field.",
    outputs={"success": RobustnessOutput, "error": ErrorOutput},
)
def eval_robustness(
    params: RobustnessInput,
) -> typing.Tuple[str, typing.Union[RobustnessOutput, ErrorOutput]]:
    _log_to_step_output()
    try:
        net = _load_net(params.weights)
        grid = params.grid.build()
        _check_net(net, grid)
        frames = poseerrnet.synthetic_frames(params.frames, grid, params.detector, params.seed, params.height)
        rows = poseerrnet.robustness_table(net, frames, params.bins, params.seed)
        path = os.path.join(resolve_output_dir(params.output_dir), params.file_name)
        with open(path, "w", newline="\n") as f:
            pandas.DataFrame([dataclasses.asdict(r) for r in rows]).to_csv(f, index=False, lineterminator="\n")
    except _STEP_ERRORS as e:
        return _failure(e)
    return "success", RobustnessOutput(path, rows)


@dataclass
class PlanInput:
    """
    These are the parameters of the single-field planning demo: a static subject in a box world, its ground truth
    error field, the merged distance field around the drone, the selected viewpoint and the optimized trajectory.
    """

    pose: typing.Annotated[
        skeleton.PoseParams,
        schema.name("Subject pose"),
        schema.description("Joint angles and ground placement of the subject. The root height is ignored."),
    ] = field(default_factory=skeleton.PoseParams)
    drone_start: typing.Annotated[
        typing.List[float],
        schema.min(3),
        schema.max(3),
        schema.name("Drone start"),
    ] = field(default_factory=lambda: [6.0, 0.0, 3.0])
    size: typing.Annotated[
        typing.List[float],
        schema.min(2),
        schema.max(2),
        schema.name("Environment size"),
    ] = field(default_factory=lambda: [20.0, 20.0])
    ceiling: typing.Annotated[float, schema.min(0.1), schema.name("Ceiling")] = 8.0
    resolution: typing.Annotated[float, schema.min(0.01), schema.name("Resolution")] = 0.25
    obstacles: typing.Annotated[typing.List[harness.ObstacleSpec], schema.name("Obstacles")] = field(
        default_factory=list
    )
    subject_height: typing.Annotated[float, schema.min(1.0), schema.max(2.2), schema.name("Subject height")] = 1.8
    trials: typing.Annotated[
        int,
        schema.min(1),
        schema.name("Trials"),
        schema.description("Detector draws per grid cell for the ground truth field."),
    ] = 20
    grid: typing.Annotated[viewsphere.GridConfig, schema.name("View grid")] = field(
        default_factory=viewsphere.GridConfig
    )
    detector: typing.Annotated[skeleton.DetectorParams, schema.name("Detector")] = field(
        default_factory=skeleton.DetectorParams
    )
    pesdf_config: typing.Annotated[pesdf.PesdfConfig, schema.name("Distance field")] = field(
        default_factory=lambda: pesdf.PesdfConfig(height=8.0)
    )
    planner_config: typing.Annotated[planner.PlannerConfig, schema.name("Planner")] = field(
        default_factory=planner.PlannerConfig
    )
    slice_height: typing.Annotated[
        typing.Optional[float],
        schema.min(0.0),
        schema.name("Slice height"),
        schema.description("Height of the exported field slice. Defaults to the drone start height."),
    ] = None
    seed: _SEED = 0
    output_dir: _OUTPUT_DIR = None


@dataclass
class PlanOutput:
    view_i: int
    view_j: int
    rank: int
    view_error: float
    goal: typing.List[float]
    end: typing.List[float]
    cost: float
    iterations: int
    error_field: str
    distance_field: str
    field_slice: str
    trajectory: str


@plugin.step(
    id="plan",
    name="Plan a viewpoint",
    description="Selects the best safe viewpoint of a static subject and optimizes a trajectory towards it.",
    outputs={"success": PlanOutput, "error": ErrorOutput},
)
def plan(params: PlanInput) -> typing.Tuple[str, typing.Union[PlanOutput, ErrorOutput]]:
    _log_to_step_output()
    try:
        lattice = harness.environment_lattice(params.size, params.ceiling, params.resolution)
        occupancy = pesdf.OccupancyGrid.from_boxes(lattice, [(o.center, o.size) for o in params.obstacles])
        start = np.asarray(params.drone_start, dtype=float)
        if not lattice.contains(start) or occupancy.is_occupied(start):
            raise InvalidArgumentException("The drone start {} is not in free space".format(params.drone_start))
        esdf = pesdf.esdf_from_occupancy(occupancy, params.pesdf_config.max_distance)
        pose = dataclasses.replace(params.pose, root_z=harness.HIP_HEIGHT * params.subject_height)
        pose.check_limits()
        body = skeleton.animate(skeleton.build_canonical_skeleton(params.subject_height), pose)
        if not lattice.contains(body.center):
            raise InvalidArgumentException("The subject is outside the environment")
        grid = params.grid.build()
        oracle = harness.OracleFields(
            grid, params.detector, params.trials, params.seed, params.subject_height, params.grid.miss_penalty
        )
        error_field = oracle(pose)
        choice = planner.select_viewpoint(
            error_field, body.center, pose.heading, body.head, occupancy, esdf, params.planner_config
        )
        merged = pesdf.build_pesdf(error_field, body.center, pose.heading, esdf, start, params.pesdf_config)
        goal = choice.view.position
        t0 = planner.orbit_trajectory(
            start, goal, body.center, params.planner_config.segments, params.planner_config.dt
        )
        result = planner.optimize(t0, merged, esdf, params.planner_config, goal)

        output_dir = resolve_output_dir(params.output_dir)
        paths = {
            name: os.path.join(output_dir, name)
            for name in ("error_field.csv", "pesdf.bin", "pesdf_slice.csv", "trajectory.csv")
        }
        with open(paths["error_field.csv"], "w", newline="\n") as f:
            error_field.to_csv(f)
        with open(paths["pesdf.bin"], "wb") as f:
            pesdf.save_field(merged, f)
        slice_height = params.slice_height if params.slice_height is not None else float(start[2])
        with open(paths["pesdf_slice.csv"], "w", newline="\n") as f:
            pesdf.write_slice_csv(merged, slice_height, f)
        waypoints = result.trajectory.waypoints
        trajectory = pandas.DataFrame(
            {
                "t": np.arange(len(waypoints)) * result.trajectory.dt,
                "x": waypoints[:, 0],
                "y": waypoints[:, 1],
                "z": waypoints[:, 2],
            }
        )
        with open(paths["trajectory.csv"], "w", newline="\n") as f:
            trajectory.to_csv(f, index=False, lineterminator="\n")
    except _STEP_ERRORS as e:
        return _failure(e)
    logger.info(
        "Selected view {} (rank {}, error {:.3f}) after {} iterations".format(
            choice.cell, choice.rank, choice.error, result.iterations
        )
    )
    return "success", PlanOutput(
        int(choice.cell[0]),
        int(choice.cell[1]),
        int(choice.rank),
        float(choice.error),
        [float(v) for v in goal],
        [float(v) for v in result.trajectory.end],
        float(result.costs.total),
        int(result.iterations),
        paths["error_field.csv"],
        paths["pesdf.bin"],
        paths["pesdf_slice.csv"],
        paths["trajectory.csv"],
    )


@dataclass
class EpisodeSummary:
    """
    These are the aggregate metrics of one episode.
    """

    scenario: str
    method: str
    ticks: int
    pck: float
    mse: float
    mse_ticks: int
    occlusion_ticks: int
    collisions: int
    min_clearance: float
    second_best_ticks: int
    switches: int
    held_ticks: int


def _summaries(results: typing.Sequence[harness.EpisodeResult]) -> typing.List[EpisodeSummary]:
    return [EpisodeSummary(**r.metrics.summary()) for r in results]


def _load_scenarios(
    file_names: typing.Sequence[str], seed: typing.Optional[int], max_distance: float
) -> typing.List[harness.Scenario]:
    scenarios = []
    for file_name in file_names:
        sc = harness.load_scenario(file_name, max_distance)
        if seed is not None:
            sc = dataclasses.replace(sc, seed=seed)
        scenarios.append(sc)
    return scenarios


def _write_tick_logs(results: typing.Sequence[harness.EpisodeResult], output_dir: str) -> typing.List[str]:
    paths = []
    for result in results:
        path = os.path.join(
            output_dir, "{}-{}-ticks.csv".format(_safe_name(result.metrics.scenario), result.metrics.method)
        )
        with open(path, "w", newline="\n") as f:
            harness.write_tick_log(result, f)
        paths.append(path)
    return paths


@dataclass
class SimulateInput:
    """
    These are the parameters of a single scenario simulation with the full pipeline and optional baselines.
    """

    scenario: typing.Annotated[str, schema.min(1), schema.name("Scenario file"), schema.description("YAML or JSON.")]
    weights: typing.Annotated[
        typing.Optional[str],
        schema.name("Weights"),
        schema.description("PENv1 file. Required unless the episode uses oracle fields."),
    ] = None
    episode: typing.Annotated[harness.EpisodeConfig, schema.name("Episode")] = field(
        default_factory=harness.EpisodeConfig
    )
    baselines: typing.Annotated[
        typing.List[str],
        schema.name("Baselines"),
        schema.description("Fixed-bearing baselines to run as well: front, side or back."),
    ] = field(default_factory=list)
    seed: typing.Annotated[
        typing.Optional[int],
        schema.min(0),
        schema.name("Seed"),
        schema.description("Replaces the seed of the scenario file when set."),
    ] = None
    output_dir: _OUTPUT_DIR = None
    metrics_file: typing.Annotated[str, schema.min(1), schema.name("Metrics file")] = "metrics.csv"


@dataclass
class SimulateOutput:
    tick_logs: typing.List[str]
    metrics: str
    episodes: typing.List[EpisodeSummary]


@plugin.step(
    id="simulate",
    name="Simulate a scenario",
    description="Flies the drone through one scenario and writes the tick log and episode metrics.",
    outputs={"success": SimulateOutput, "error": ErrorOutput},
)
def simulate(params: SimulateInput) -> typing.Tuple[str, typing.Union[SimulateOutput, ErrorOutput]]:
    _log_to_step_output()
    try:
        for mode in params.baselines:
            if mode not in harness.BASELINE_BEARINGS:
                raise InvalidArgumentException("Unknown baseline '{}'".format(mode))
        sc = _load_scenarios([params.scenario], params.seed, params.episode.pesdf_config.max_distance)[0]
        net = _load_net(params.weights) if params.weights is not None else None
        results = [harness.run_baseline(sc, mode, params.episode) for mode in params.baselines]
        results.append(harness.run_episode(sc, net, params.episode))
        output_dir = resolve_output_dir(params.output_dir)
        tick_logs = _write_tick_logs(results, output_dir)
        metrics = os.path.join(output_dir, params.metrics_file)
        with open(metrics, "w", newline="\n") as f:
            harness.write_metrics_csv(results, f)
    except _STEP_ERRORS as e:
        return _failure(e)
    return "success", SimulateOutput(tick_logs, metrics, _summaries(results))


@dataclass
class EvaluateInput:
    """
    These are the parameters of the comparison suite: every scenario is flown by the three fixed-bearing baselines
    and by the full pipeline.
    """

    scenarios: typing.Annotated[
        typing.List[str],
        schema.min(1),
        schema.name("Scenario files"),
    ]
    weights: typing.Annotated[
        typing.Optional[str],
        schema.name("Weights"),
        schema.description("PENv1 file. Required unless the episode uses oracle fields."),
    ] = None
    episode: typing.Annotated[harness.EpisodeConfig, schema.name("Episode")] = field(
        default_factory=harness.EpisodeConfig
    )
    seed: typing.Annotated[
        typing.Optional[int],
        schema.min(0),
        schema.name("Seed"),
        schema.description("Replaces the seed of every scenario file when set."),
    ] = None
    output_dir: _OUTPUT_DIR = None
    table_file: typing.Annotated[str, schema.min(1), schema.name("Table file")] = "comparison.csv"
    text_file: typing.Annotated[str, schema.min(1), schema.name("Text table file")] = "comparison.txt"
    metrics_file: typing.Annotated[str, schema.min(1), schema.name("Metrics file")] = "metrics.csv"
    tick_logs: typing.Annotated[
        bool,
        schema.name("Tick logs"),
        schema.description("Also write the tick log of every episode."),
    ] = False


@dataclass
class EvaluateOutput:
    table: str
    text: str
    metrics: str
    rendered: str
    episodes: typing.List[EpisodeSummary]


@plugin.step(
    id="evaluate",
    name="Evaluate",
    description="Runs the baselines and the full pipeline over scenarios and writes the comparison table.",
    outputs={"success": EvaluateOutput, "error": ErrorOutput},
)
def evaluate(params: EvaluateInput) -> typing.Tuple[str, typing.Union[EvaluateOutput, ErrorOutput]]:
    _log_to_step_output()
    try:
        scenarios = _load_scenarios(params.scenarios, params.seed, params.episode.pesdf_config.max_distance)
        net = _load_net(params.weights) if params.weights is not None else None
        suite = harness.evaluate_suite(scenarios, net, params.episode)
        output_dir = resolve_output_dir(params.output_dir)
        table = os.path.join(output_dir, params.table_file)
        with open(table, "w", newline="\n") as f:
            harness.write_table_csv(suite.table, f)
        rendered = harness.format_table(suite.table)
        text = os.path.join(output_dir, params.text_file)
        with open(text, "w", newline="\n") as f:
            f.write(rendered)
        metrics = os.path.join(output_dir, params.metrics_file)
        with open(metrics, "w", newline="\n") as f:
            harness.write_metrics_csv(suite.episodes, f)
        if params.tick_logs:
            _write_tick_logs(suite.episodes, output_dir)
    except _STEP_ERRORS as e:
        return _failure(e)
    logger.info("Comparison:\n{}".format(rendered))
    return "success", EvaluateOutput(table, text, metrics, rendered, _summaries(suite.episodes))


viewpoint_schema = plugin.build_schema(
    generate_data,
    train_network,
    eval_robustness,
    plan,
    simulate,
    evaluate,
)
