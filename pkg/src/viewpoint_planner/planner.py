"""
This module plans the drone's motion: a waypoint trajectory is optimized against smoothness, obstacle clearance,
a goal and the pose-enhanced distance field, and the goal itself comes from choosing the best visible and safe
viewpoint on the subject's view sphere.
"""
import logging
import math
import typing
from dataclasses import dataclass, field

import numpy as np
from arcaflow_plugin_sdk import schema

from viewpoint_planner import pesdf, skeleton, viewsphere
from viewpoint_planner.errors import (
    DivergenceException,
    InvalidArgumentException,
    NoViewpointException,
)

logger = logging.getLogger(__name__)

_ARMIJO = 1e-4
_MIN_STEP = 1e-12


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    ``Trajectory`` is a sequence of ``M + 1`` waypoints visited at a uniform time step ``dt``. The first waypoint is
    the fixed start; the others are free.
    """

    waypoints: np.ndarray
    dt: float

    def __post_init__(self):
        waypoints = np.array(self.waypoints, dtype=float)
        if waypoints.ndim != 2 or waypoints.shape[1] != 3 or len(waypoints) < 3:
            raise InvalidArgumentException("A trajectory needs at least 3 waypoints in 3D")
        if not np.all(np.isfinite(waypoints)):
            raise InvalidArgumentException("Trajectory waypoints must be finite")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise InvalidArgumentException("The time step must be positive, got {}".format(self.dt))
        waypoints.setflags(write=False)
        object.__setattr__(self, "waypoints", waypoints)

    @property
    def segments(self) -> int:
        return len(self.waypoints) - 1

    @property
    def start(self) -> np.ndarray:
        return self.waypoints[0]

    @property
    def end(self) -> np.ndarray:
        return self.waypoints[-1]

    @property
    def duration(self) -> float:
        return self.segments * self.dt

    def speeds(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1) / self.dt

    def position_at(self, t: float) -> np.ndarray:
        """
        :return: the position at time ``t``, moving linearly between waypoints and resting at the end.
        """
        if t <= 0:
            return self.start.copy()
        if t >= self.duration:
            return self.end.copy()
        k = min(int(t // self.dt), self.segments - 1)
        fraction = (t - k * self.dt) / self.dt
        return self.waypoints[k] + fraction * (self.waypoints[k + 1] - self.waypoints[k])

    def with_waypoints(self, waypoints: np.ndarray) -> "Trajectory":
        return Trajectory(waypoints, self.dt)


def straight_trajectory(
    start: typing.Sequence[float], end: typing.Sequence[float], segments: int, dt: float
) -> Trajectory:
    if segments < 2:
        raise InvalidArgumentException("A trajectory needs at least 2 segments, got {}".format(segments))
    fractions = np.linspace(0.0, 1.0, segments + 1)[:, None]
    start = np.asarray(start, dtype=float)
    return Trajectory(start + fractions * (np.asarray(end, dtype=float) - start), dt)


def orbit_trajectory(
    start: typing.Sequence[float],
    end: typing.Sequence[float],
    center: typing.Sequence[float],
    segments: int,
    dt: float,
) -> Trajectory:
    """
    This function interpolates from ``start`` to ``end`` in cylindrical coordinates around the vertical axis through
    ``center``: horizontal distance, bearing (the shorter way round) and height change linearly, so the path never
    comes closer to the axis than its nearer end. It falls back to a straight line when an end sits on the axis.
    """
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    center = np.asarray(center, dtype=float)
    a = start[:2] - center[:2]
    b = end[:2] - center[:2]
    ra, rb = float(np.hypot(*a)), float(np.hypot(*b))
    if min(ra, rb) < 1e-9:
        return straight_trajectory(start, end, segments, dt)
    if segments < 2:
        raise InvalidArgumentException("A trajectory needs at least 2 segments, got {}".format(segments))
    ta = math.atan2(a[1], a[0])
    delta = (math.atan2(b[1], b[0]) - ta + math.pi) % (2 * math.pi) - math.pi
    f = np.linspace(0.0, 1.0, segments + 1)
    r = ra + f * (rb - ra)
    theta = ta + f * delta
    waypoints = np.stack(
        [center[0] + r * np.cos(theta), center[1] + r * np.sin(theta), start[2] + f * (end[2] - start[2])],
        axis=1,
    )
    waypoints[0] = start
    waypoints[-1] = end
    return Trajectory(waypoints, dt)


@dataclass
class PlannerConfig:
    """
    These are the weights and limits of the trajectory optimizer and the viewpoint selector.
    """

    pose_weight: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("Pose weight"),
        schema.description("Weight of the pose penalty on the merged field."),
    ] = 1.0
    rho: typing.Annotated[
        float,
        schema.min(1e-9),
        schema.name("Activation threshold"),
        schema.description("Merged field value below which the pose penalty engages."),
    ] = 4.5
    smooth_weight: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("Smoothness weight"),
        schema.description("Weight of the squared second differences of the waypoints."),
    ] = 1.0
    collide_weight: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("Collision weight"),
        schema.description("Weight of the obstacle clearance penalty."),
    ] = 10.0
    goal_weight: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("Goal weight"),
        schema.description("Weight pulling the last waypoint to the chosen viewpoint."),
    ] = 1.0
    collision_distance: typing.Annotated[
        float,
        schema.min(1e-9),
        schema.name("Collision distance"),
        schema.description("Obstacle clearance in meters below which the collision penalty engages."),
    ] = 1.0
    max_speed: typing.Annotated[
        float,
        schema.min(1e-9),
        schema.name("Maximum speed"),
        schema.description("Speed limit in meters per second enforced by stretching time."),
    ] = 3.0
    max_iterations: typing.Annotated[
        int,
        schema.min(1),
        schema.name("Iterations"),
        schema.description("Iteration cap of the gradient descent."),
    ] = 100
    step_size: typing.Annotated[
        float,
        schema.min(1e-12),
        schema.name("Step size"),
        schema.description("Initial step of the backtracking line search."),
    ] = 0.1
    tolerance: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("Tolerance"),
        schema.description("Gradient norm at which the optimization stops."),
    ] = 1e-4
    hysteresis: typing.Annotated[
        float,
        schema.min(1e-12),
        schema.name("Hysteresis"),
        schema.description("Error advantage a new viewpoint needs before the current one is abandoned."),
    ] = 0.5
    candidates: typing.Annotated[
        int,
        schema.min(1),
        schema.name("Candidates"),
        schema.description("Number of best viewpoints considered, in rank order."),
    ] = 5
    segments: typing.Annotated[
        int,
        schema.min(2),
        schema.name("Segments"),
        schema.description("Number of trajectory segments."),
    ] = 8
    dt: typing.Annotated[
        float,
        schema.min(1e-6),
        schema.name("Time step"),
        schema.description("Nominal time between waypoints in seconds."),
    ] = 0.25

    def check(self) -> None:
        for name in ("pose_weight", "smooth_weight", "collide_weight", "goal_weight", "tolerance"):
            if getattr(self, name) < 0:
                raise InvalidArgumentException("{} must not be negative".format(name))
        for name in ("rho", "collision_distance", "max_speed", "step_size", "hysteresis", "dt"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentException("{} must be positive".format(name))
        if self.max_iterations < 1 or self.candidates < 1 or self.segments < 2:
            raise InvalidArgumentException("Iterations, candidates and segments are out of range")


def _hinge(values: np.ndarray, threshold: float) -> typing.Tuple[np.ndarray, np.ndarray]:
    # (v - t)^2 / 2t below the threshold, zero above; returns the cost and its derivative.
    active = ~(values > threshold)
    excess = np.where(active, values - threshold, 0.0)
    return excess ** 2 / (2 * threshold), excess / threshold


def cost_pose(
    t: Trajectory, p: pesdf.Pesdf, cfg: PlannerConfig
) -> typing.Tuple[float, np.ndarray]:
    """
    This function penalizes waypoints where the merged field falls to ``rho`` or below:
    ``pose_weight * sum((xi - rho)^2 / (2 rho))``. Waypoints outside the field are clamped to its boundary.

    :return: the cost and its gradient with respect to every waypoint.
    """
    values, gradients, _ = pesdf.sample_points(p, t.waypoints)
    cost, slope = _hinge(values, cfg.rho)
    return cfg.pose_weight * float(cost.sum()), cfg.pose_weight * slope[:, None] * gradients


def cost_smooth(t: Trajectory, weight: float = 1.0) -> typing.Tuple[float, np.ndarray]:
    """
    This function sums the squared second differences ``|p[k+1] - 2 p[k] + p[k-1]|^2`` times ``weight``.
    """
    w = t.waypoints
    second = w[2:] - 2 * w[1:-1] + w[:-2]
    gradient = np.zeros_like(w)
    gradient[2:] += 2 * weight * second
    gradient[1:-1] -= 4 * weight * second
    gradient[:-2] += 2 * weight * second
    return weight * float(np.sum(second ** 2)), gradient


def cost_collide(
    t: Trajectory, e: pesdf.Esdf, cfg: PlannerConfig
) -> typing.Tuple[float, np.ndarray]:
    """
    This function penalizes waypoints closer than ``collision_distance`` to an obstacle, with the same hinge as the
    pose penalty.
    """
    values, gradients, _ = pesdf.sample_points(e, t.waypoints)
    cost, slope = _hinge(values, cfg.collision_distance)
    return cfg.collide_weight * float(cost.sum()), cfg.collide_weight * slope[:, None] * gradients


def cost_goal(
    t: Trajectory, goal: typing.Optional[np.ndarray], weight: float
) -> typing.Tuple[float, np.ndarray]:
    gradient = np.zeros_like(t.waypoints)
    if goal is None or weight == 0:
        return 0.0, gradient
    offset = t.end - goal
    gradient[-1] = 2 * weight * offset
    return weight * float(offset @ offset), gradient


@dataclass
class CostBreakdown:
    smooth: float
    collide: float
    pose: float
    goal: float

    @property
    def total(self) -> float:
        return self.smooth + self.collide + self.pose + self.goal


def total_cost(
    t: Trajectory,
    p: typing.Optional[pesdf.Pesdf],
    e: typing.Optional[pesdf.Esdf],
    cfg: PlannerConfig,
    goal: typing.Optional[np.ndarray] = None,
) -> typing.Tuple[CostBreakdown, np.ndarray]:
    """
    :return: the cost terms and the gradient of their sum. Terms with zero weight are not evaluated.
    """
    smooth, gradient = cost_smooth(t, cfg.smooth_weight)
    collide = pose = 0.0
    if cfg.collide_weight > 0 and e is not None:
        collide, g = cost_collide(t, e, cfg)
        gradient = gradient + g
    if cfg.pose_weight > 0 and p is not None:
        pose, g = cost_pose(t, p, cfg)
        gradient = gradient + g
    goal_cost, g = cost_goal(t, goal, cfg.goal_weight)
    return CostBreakdown(smooth, collide, pose, goal_cost), gradient + g


@dataclass
class OptimizationResult:
    trajectory: Trajectory
    history: typing.List[float]
    costs: CostBreakdown
    iterations: int


def optimize(
    t0: Trajectory,
    p: typing.Optional[pesdf.Pesdf],
    e: typing.Optional[pesdf.Esdf],
    cfg: PlannerConfig,
    goal: typing.Optional[typing.Sequence[float]] = None,
) -> OptimizationResult:
    """
    This function runs gradient descent with a backtracking (Armijo) line search over the free waypoints. It stops
    when the gradient norm drops below ``tolerance``, when no step decreases the cost or at the iteration cap. If a
    segment of the result is faster than ``max_speed``, time is stretched uniformly.

    :return: the trajectory, the accepted costs (non-increasing) and the final cost terms.
    """
    cfg.check()
    goal = None if goal is None else np.asarray(goal, dtype=float)
    t = t0
    costs, gradient = total_cost(t, p, e, cfg, goal)
    if not math.isfinite(costs.total):
        raise DivergenceException("The initial trajectory cost is not finite", 0)
    history = [costs.total]
    step = cfg.step_size
    iterations = 0
    for iteration in range(1, cfg.max_iterations + 1):
        gradient[0] = 0.0
        norm_squared = float(np.sum(gradient ** 2))
        if math.sqrt(norm_squared) < cfg.tolerance:
            break
        iterations = iteration
        accepted = None
        trial_step = step
        while trial_step > _MIN_STEP:
            candidate = t.with_waypoints(t.waypoints - trial_step * gradient)
            candidate_costs, candidate_gradient = total_cost(candidate, p, e, cfg, goal)
            if not math.isfinite(candidate_costs.total):
                raise DivergenceException("The trajectory cost is not finite", iteration)
            if candidate_costs.total <= costs.total - _ARMIJO * trial_step * norm_squared:
                accepted = candidate, candidate_costs, candidate_gradient
                break
            trial_step /= 2
        if accepted is None:
            break
        t, costs, gradient = accepted
        history.append(costs.total)
        step = min(2 * trial_step, cfg.step_size * 1e3)
    speed = float(t.speeds().max())
    if speed > cfg.max_speed:
        t = Trajectory(t.waypoints, t.dt * speed / cfg.max_speed)
    return OptimizationResult(t, history, costs, iterations)


def line_of_sight(a: typing.Sequence[float], b: typing.Sequence[float], g: pesdf.OccupancyGrid) -> bool:
    """
    This function walks the voxels the segment from ``a`` to ``b`` passes through, in order.

    :return: ``False`` as soon as a traversed voxel is occupied, ``True`` otherwise.
    """
    lattice = g.lattice
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if not (lattice.contains(a) and lattice.contains(b)):
        raise InvalidArgumentException("Line of sight endpoints must lie inside the grid")
    dims = np.array(lattice.dims)
    # Voxel i spans [i, i + 1) in these coordinates.
    start = (a - lattice.origin) / lattice.resolution + 0.5
    end = (b - lattice.origin) / lattice.resolution + 0.5
    voxel = np.minimum(np.floor(start).astype(int), dims - 1)
    last = np.minimum(np.floor(end).astype(int), dims - 1)
    direction = end - start
    step = np.sign(direction).astype(int)
    t_max = np.full(3, math.inf)
    t_delta = np.full(3, math.inf)
    for axis in range(3):
        if direction[axis] > 0:
            t_max[axis] = (voxel[axis] + 1 - start[axis]) / direction[axis]
            t_delta[axis] = 1 / direction[axis]
        elif direction[axis] < 0:
            t_max[axis] = (voxel[axis] - start[axis]) / direction[axis]
            t_delta[axis] = -1 / direction[axis]
    while True:
        if g.occupied[voxel[0], voxel[1], voxel[2]]:
            return False
        if np.array_equal(voxel, last):
            return True
        axis = int(np.argmin(t_max))
        if t_max[axis] > 1.0:
            return True
        voxel[axis] += step[axis]
        if not 0 <= voxel[axis] < dims[axis]:
            return True
        t_max[axis] += t_delta[axis]


@dataclass
class ViewChoice:
    """
    ``ViewChoice`` is a selected viewpoint: its grid cell, its rank in the field (1 is the best view), its error and
    the camera placed in the world.
    """

    cell: typing.Tuple[int, int]
    rank: int
    error: float
    view: skeleton.CameraView = field(repr=False)


def world_view(
    grid: viewsphere.ViewGrid,
    cell: typing.Tuple[int, int],
    subject_position: typing.Sequence[float],
    subject_heading: float,
) -> skeleton.CameraView:
    """
    :return: the camera of a subject-frame grid cell, turned by the subject's heading and looking at the subject.
    """
    base = grid.view(*cell)
    return skeleton.CameraView(
        base.azimuth + subject_heading,
        base.elevation,
        base.radius,
        look_at=tuple(float(v) for v in subject_position),
        focal=base.focal,
        width=base.width,
        height=base.height,
    )


def view_feasible(
    view: skeleton.CameraView,
    target: typing.Sequence[float],
    g: pesdf.OccupancyGrid,
    e: pesdf.Esdf,
    cfg: PlannerConfig,
) -> bool:
    """
    A view is feasible when its position is inside the environment, sees ``target`` and keeps ``collision_distance``
    from obstacles.
    """
    position = view.position
    if not (g.lattice.contains(position) and g.lattice.contains(target)):
        return False
    if not line_of_sight(position, target, g):
        return False
    clearance = pesdf.sample_points(e, position[None, :])[0][0]
    return bool(clearance >= cfg.collision_distance)


def select_viewpoint(
    f: viewsphere.ErrorField,
    subject_position: typing.Sequence[float],
    subject_heading: float,
    subject_head: typing.Sequence[float],
    g: pesdf.OccupancyGrid,
    e: pesdf.Esdf,
    cfg: PlannerConfig,
    current: typing.Optional[typing.Tuple[int, int]] = None,
) -> ViewChoice:
    """
    This function picks the lowest-error feasible view among the ``candidates`` best. The current choice is kept
    while it stays feasible and the winner improves on it by less than ``hysteresis``.

    :raises NoViewpointException: when neither a candidate nor the current choice is feasible.
    """
    cfg.check()
    ranking = viewsphere.best_views(f, f.grid.size)
    ranks = {cell: rank for rank, (cell, _) in enumerate(ranking, start=1)}
    winner = None
    for cell, error in ranking[: cfg.candidates]:
        view = world_view(f.grid, cell, subject_position, subject_heading)
        if view_feasible(view, subject_head, g, e, cfg):
            winner = ViewChoice(cell, ranks[cell], error, view)
            break
    if current is not None:
        current = (int(current[0]), int(current[1]))
        current_view = world_view(f.grid, current, subject_position, subject_heading)
        current_error = f.value(*current)
        if (winner is None or current_error - winner.error < cfg.hysteresis) and view_feasible(
            current_view, subject_head, g, e, cfg
        ):
            return ViewChoice(current, ranks[current], current_error, current_view)
    if winner is None:
        raise NoViewpointException(
            "None of the {} best viewpoints is visible and safe".format(cfg.candidates)
        )
    if winner.rank > 1:
        logger.debug("Best viewpoint infeasible, using rank {}".format(winner.rank))
    return winner
