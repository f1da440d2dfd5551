"""
This module holds PoseErrNet, a small fully connected autoencoder that maps a normalized 2D pose to a predicted
error field, together with its gradient machinery, trainer, dataset builder and robustness evaluation.

The network is plain numpy: ``tanh`` hidden layers and a ``softplus`` output layer so that predicted errors are
never negative. Training is mini-batch gradient descent with momentum, deterministic for a given seed.
"""
import copy
import dataclasses
import io
import logging
import math
import typing
from dataclasses import dataclass, field

import numpy as np
from arcaflow_plugin_sdk import schema
from scipy.special import expit

from viewpoint_planner import normalize, skeleton, viewsphere
from viewpoint_planner.errors import (
    DivergenceException,
    InvalidArgumentException,
    NormalizationFailureException,
)
from viewpoint_planner.serialization import format_float

logger = logging.getLogger(__name__)

MOMENTUM = 0.9
DEFAULT_HIDDEN_SIZES = [64, 32, 16, 32, 64, 128]
WEIGHTS_MAGIC = b"PENv1"
DATASET_HEADER = "# viewpoint-planner dataset v1"


@dataclass(eq=False)
class PerceptionNet:
    """
    ``PerceptionNet`` holds the layer sizes and, per layer, a weight matrix of shape ``(out, in)`` and a bias vector.
    The same structure also carries gradients.
    """

    sizes: typing.List[int]
    weights: typing.List[np.ndarray]
    biases: typing.List[np.ndarray]

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise InvalidArgumentException("A network needs at least an input and an output size")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.sizes) - 1:
            raise InvalidArgumentException("Expected one weight matrix and bias per layer")
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.sizes[layer + 1], self.sizes[layer])
            if w.shape != expected or b.shape != (self.sizes[layer + 1],):
                raise InvalidArgumentException(
                    "Layer {} has weights {} and bias {}, expected {} and ({},)".format(
                        layer, w.shape, b.shape, expected, expected[0]
                    )
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidArgumentException("Layer {} has non-finite parameters".format(layer))

    @property
    def input_size(self) -> int:
        return self.sizes[0]

    @property
    def output_size(self) -> int:
        return self.sizes[-1]

    @property
    def layers(self) -> int:
        return len(self.weights)

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "PerceptionNet":
        return copy.deepcopy(self)

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(-1))
            parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, vector: np.ndarray) -> "PerceptionNet":
        weights = []
        biases = []
        offset = 0
        for w, b in zip(self.weights, self.biases):
            weights.append(np.array(vector[offset:offset + w.size]).reshape(w.shape))
            offset += w.size
            biases.append(np.array(vector[offset:offset + b.size]))
            offset += b.size
        return PerceptionNet(list(self.sizes), weights, biases)

    def save(self, stream: typing.BinaryIO) -> None:
        """
        This function writes the ``PENv1`` format: the magic bytes, the layer count and sizes as little-endian 32 bit
        integers, then every layer's weights (row-major) followed by its biases as little-endian 64 bit floats.
        """
        stream.write(WEIGHTS_MAGIC)
        stream.write(np.array([len(self.sizes)] + list(self.sizes), dtype="<i4").tobytes())
        for w, b in zip(self.weights, self.biases):
            stream.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            stream.write(np.ascontiguousarray(b, dtype="<f8").tobytes())

    @classmethod
    def load(cls, stream: typing.BinaryIO) -> "PerceptionNet":
        magic = stream.read(len(WEIGHTS_MAGIC))
        if magic != WEIGHTS_MAGIC:
            raise InvalidArgumentException("Not a PoseErrNet weights file (magic {!r})".format(magic))
        count = int(np.frombuffer(_read_exact(stream, 4), dtype="<i4")[0])
        if not 2 <= count <= 64:
            raise InvalidArgumentException("Implausible layer count {}".format(count))
        sizes = [int(v) for v in np.frombuffer(_read_exact(stream, 4 * count), dtype="<i4")]
        weights = []
        biases = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            w = np.frombuffer(_read_exact(stream, 8 * n_in * n_out), dtype="<f8")
            weights.append(w.astype(float).reshape(n_out, n_in))
            biases.append(np.frombuffer(_read_exact(stream, 8 * n_out), dtype="<f8").astype(float))
        if stream.read(1):
            raise InvalidArgumentException("Trailing data after the network weights")
        return cls(sizes, weights, biases)


def _read_exact(stream: typing.BinaryIO, size: int) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise InvalidArgumentException("Truncated weights file")
    return data


def init_net(sizes: typing.Sequence[int], rng: np.random.Generator) -> PerceptionNet:
    """
    This function initializes weights from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` and biases at zero.
    """
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes):
        raise InvalidArgumentException("Layer sizes must be positive, got {}".format(sizes))
    weights = []
    biases = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return PerceptionNet(sizes, weights, biases)


def zero_net(sizes: typing.Sequence[int]) -> PerceptionNet:
    sizes = [int(s) for s in sizes]
    return PerceptionNet(
        sizes,
        [np.zeros((n_out, n_in)) for n_in, n_out in zip(sizes[:-1], sizes[1:])],
        [np.zeros(n_out) for n_out in sizes[1:]],
    )


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _forward_pass(
    net: PerceptionNet, x: np.ndarray
) -> typing.Tuple[typing.List[np.ndarray], typing.List[np.ndarray], np.ndarray]:
    # Remember every layer input and pre-activation for the backward pass.
    activations = [x]
    pre_activations = []
    a = x
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        pre_activations.append(z)
        if layer == net.layers - 1:
            a = softplus(z)
        else:
            a = np.tanh(z)
            activations.append(a)
    return activations, pre_activations, a


def _backward_pass(
    net: PerceptionNet,
    activations: typing.List[np.ndarray],
    pre_activations: typing.List[np.ndarray],
    d_output: np.ndarray,
) -> PerceptionNet:
    grad_w = [np.zeros_like(w) for w in net.weights]
    grad_b = [np.zeros_like(b) for b in net.biases]
    delta = d_output * expit(pre_activations[-1])
    for layer in range(net.layers - 1, -1, -1):
        grad_w[layer] = delta.T @ activations[layer]
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ net.weights[layer]) * (1.0 - activations[layer] ** 2)
    return PerceptionNet(list(net.sizes), grad_w, grad_b)


def predict(net: PerceptionNet, inputs: np.ndarray) -> np.ndarray:
    """
    This function runs the network on one input vector or a batch of row vectors.
    """
    x = np.asarray(inputs, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != net.input_size:
        raise InvalidArgumentException(
            "The network takes {} inputs, got {}".format(net.input_size, x.shape[1])
        )
    _, _, output = _forward_pass(net, x)
    return output[0] if single else output


def forward(
    net: PerceptionNet,
    x: typing.Union[normalize.NormalizedPose, np.ndarray],
    grid: typing.Optional[viewsphere.ViewGrid] = None,
) -> viewsphere.ErrorField:
    """
    This function predicts the error field for a normalized pose.

    :param net: the network.
    :param x: the normalized pose or its vector.
    :param grid: the grid the network was trained for, the default 24x8 grid if not given.
    :return: the predicted field.
    """
    if grid is None:
        grid = viewsphere.GridConfig().build()
    if net.output_size != grid.size:
        raise InvalidArgumentException(
            "The network predicts {} cells but the grid has {}".format(net.output_size, grid.size)
        )
    vector = x.vector() if isinstance(x, normalize.NormalizedPose) else x
    return viewsphere.ErrorField(grid, predict(net, vector))


@dataclass(frozen=True, eq=False)
class DatasetPair:
    """
    ``DatasetPair`` holds one normalized pose vector and the flattened oracle error field observed for it.
    """

    input: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        x = np.array(self.input, dtype=float).reshape(-1)
        y = np.array(self.target, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))) or np.any(y < 0):
            raise InvalidArgumentException("Dataset pairs need finite inputs and nonnegative targets")
        object.__setattr__(self, "input", x)
        object.__setattr__(self, "target", y)


def _stack(
    batch: typing.Sequence[DatasetPair], net: typing.Optional[PerceptionNet] = None
) -> typing.Tuple[np.ndarray, np.ndarray]:
    if len(batch) == 0:
        raise InvalidArgumentException("The batch is empty")
    x = np.stack([p.input for p in batch])
    y = np.stack([p.target for p in batch])
    if net is not None and (x.shape[1] != net.input_size or y.shape[1] != net.output_size):
        raise InvalidArgumentException(
            "Pairs of size {}->{} do not fit a {}->{} network".format(
                x.shape[1], y.shape[1], net.input_size, net.output_size
            )
        )
    return x, y


def _loss_and_grad_arrays(
    net: PerceptionNet, x: np.ndarray, y: np.ndarray, l2: float
) -> typing.Tuple[float, float, PerceptionNet]:
    activations, pre_activations, prediction = _forward_pass(net, x)
    residual = prediction - y
    data_loss = float(np.mean(residual ** 2))
    penalty = l2 * sum(float(np.sum(w * w)) for w in net.weights)
    grad = _backward_pass(net, activations, pre_activations, 2.0 * residual / residual.size)
    if l2 > 0:
        for layer, w in enumerate(net.weights):
            grad.weights[layer] += 2.0 * l2 * w
    return data_loss + penalty, data_loss, grad


def loss_and_grad(
    net: PerceptionNet, batch: typing.Sequence[DatasetPair], l2: float = 0.0
) -> typing.Tuple[float, PerceptionNet]:
    """
    This function computes the mean squared error over the batch and all cells, plus ``l2`` times the sum of
    squared weights, and its gradient with respect to every weight and bias.

    :return: the loss and a network-shaped gradient.
    """
    x, y = _stack(batch, net)
    loss, _, grad = _loss_and_grad_arrays(net, x, y, l2)
    return loss, grad


def data_loss(net: PerceptionNet, batch: typing.Sequence[DatasetPair]) -> float:
    x, y = _stack(batch, net)
    return float(np.mean((predict(net, x) - y) ** 2))


@dataclass
class TrainConfig:
    """
    These are the PoseErrNet training hyperparameters.
    """

    learning_rate: typing.Annotated[
        float,
        schema.min(1e-12),
        schema.name("Learning rate"),
        schema.description("Gradient descent step size."),
    ] = 0.5
    batch_size: typing.Annotated[
        int,
        schema.min(1),
        schema.name("Batch size"),
        schema.description("Number of pairs per gradient step."),
    ] = 32
    epochs: typing.Annotated[
        int,
        schema.min(1),
        schema.name("Epochs"),
        schema.description("Number of passes over the training split."),
    ] = 200
    seed: typing.Annotated[
        int,
        schema.min(0),
        schema.name("Seed"),
        schema.description("Seed for the split, the initialization and the batch order."),
    ] = 0
    validation_fraction: typing.Annotated[
        float,
        schema.min(0.01),
        schema.max(0.99),
        schema.name("Validation fraction"),
        schema.description("Share of the pairs held out for validation."),
    ] = 0.2
    l2: typing.Annotated[
        float,
        schema.min(0.0),
        schema.name("L2 penalty"),
        schema.description("Weight decay coefficient on the sum of squared weights."),
    ] = 1e-6
    hidden_sizes: typing.Annotated[
        typing.List[int],
        schema.min(1),
        schema.name("Hidden sizes"),
        schema.description("Widths of the hidden layers, encoder then decoder."),
    ] = field(default_factory=lambda: list(DEFAULT_HIDDEN_SIZES))

    def check(self) -> None:
        if not self.learning_rate > 0:
            raise InvalidArgumentException("The learning rate must be positive")
        if not 0 < self.validation_fraction < 1:
            raise InvalidArgumentException("The validation fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.l2 < 0:
            raise InvalidArgumentException("Batch size and epochs must be positive, l2 nonnegative")
        if not self.hidden_sizes or any(s < 1 for s in self.hidden_sizes):
            raise InvalidArgumentException("Hidden layer sizes must be positive")
        if self.seed < 0:
            raise InvalidArgumentException("The seed must be nonnegative, got {}".format(self.seed))


@dataclass
class TrainingHistory:
    train_loss: typing.List[float]
    validation_loss: typing.List[float]
    best_validation_loss: typing.List[float]
    initial_validation_loss: float
    best_epoch: int
    validation_indices: typing.List[int] = field(default_factory=list)


def train(
    data: typing.Sequence[DatasetPair], cfg: TrainConfig
) -> typing.Tuple[PerceptionNet, TrainingHistory]:
    """
    This function trains a network on ``data``. The pairs are split into training and validation sets, the network
    is initialized from ``cfg.seed`` and trained with momentum ``0.9``. The network with the lowest validation loss
    seen (the untrained one included) is returned.
    """
    cfg.check()
    if len(data) < 10:
        raise InvalidArgumentException("Training needs at least 10 pairs, got {}".format(len(data)))
    x, y = _stack(data)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(data))
    n_val = min(len(data) - 1, max(1, int(round(cfg.validation_fraction * len(data)))))
    x_val, y_val = x[order[:n_val]], y[order[:n_val]]
    x_train, y_train = x[order[n_val:]], y[order[n_val:]]

    net = init_net([x.shape[1]] + list(cfg.hidden_sizes) + [y.shape[1]], rng)
    params = net.flatten()
    velocity = np.zeros_like(params)

    initial = float(np.mean((predict(net, x_val) - y_val) ** 2))
    best = initial
    best_net = net.copy()
    history = TrainingHistory([], [], [], initial, 0, [int(i) for i in order[:n_val]])
    logger.info(
        "Training on {} pairs, validating on {}, {} parameters, initial validation loss {:.5f}".format(
            len(x_train), n_val, net.n_params(), initial
        )
    )
    for epoch in range(1, cfg.epochs + 1):
        shuffled = rng.permutation(len(x_train))
        weighted_loss = 0.0
        for start in range(0, len(shuffled), cfg.batch_size):
            batch = shuffled[start:start + cfg.batch_size]
            loss, batch_data_loss, grad = _loss_and_grad_arrays(net, x_train[batch], y_train[batch], cfg.l2)
            if not math.isfinite(loss):
                raise DivergenceException("Training loss is not finite", epoch)
            velocity = MOMENTUM * velocity - cfg.learning_rate * grad.flatten()
            params = params + velocity
            if not np.all(np.isfinite(params)):
                raise DivergenceException("Network weights are not finite", epoch)
            net = net.with_flat(params)
            weighted_loss += batch_data_loss * len(batch)
        validation = float(np.mean((predict(net, x_val) - y_val) ** 2))
        if not math.isfinite(validation):
            raise DivergenceException("Validation loss is not finite", epoch)
        if validation < best:
            best = validation
            best_net = net.copy()
            history.best_epoch = epoch
        history.train_loss.append(weighted_loss / len(x_train))
        history.validation_loss.append(validation)
        history.best_validation_loss.append(best)
        if epoch % 50 == 0 or epoch == cfg.epochs:
            logger.info(
                "Epoch {}: train loss {:.5f}, validation loss {:.5f}, best {:.5f}".format(
                    epoch, history.train_loss[-1], validation, best
                )
            )
    return best_net, history


ObservationPolicy = typing.Callable[[np.random.Generator, viewsphere.ViewGrid], int]


def uniform_view_policy(rng: np.random.Generator, grid: viewsphere.ViewGrid) -> int:
    """
    This policy observes the subject from a uniformly random grid cell.
    """
    return int(rng.integers(grid.size))


def fixed_view_policy(index: int) -> ObservationPolicy:
    def policy(rng: np.random.Generator, grid: viewsphere.ViewGrid) -> int:
        return index

    return policy


def body_frame(params: skeleton.PoseParams) -> skeleton.PoseParams:
    """
    :return: the same pose with the mid-hip above the origin and facing ``+x``, where error fields are defined.
    """
    return dataclasses.replace(params, root_x=0.0, root_y=0.0, heading=0.0)


def generate_dataset(
    poses: typing.Sequence[skeleton.PoseParams],
    g: viewsphere.ViewGrid,
    det: skeleton.DetectorParams,
    obs_view_policy: ObservationPolicy = uniform_view_policy,
    trials: int = 20,
    seed: int = 0,
    miss_penalty: float = viewsphere.DEFAULT_MISS_PENALTY,
    height: float = 1.8,
) -> typing.List[DatasetPair]:
    """
    This function builds (normalized observation, oracle field) pairs. For each pose the oracle field is computed in
    the subject frame, then the subject is observed from the view chosen by ``obs_view_policy``. When the
    observation cannot be normalized, other views are tried in random order; a pose for which no view works is
    skipped.
    """
    if len(poses) == 0:
        raise InvalidArgumentException("At least one pose is required")
    base = skeleton.build_canonical_skeleton(height)
    pairs = []
    skipped = 0
    for index, params in enumerate(poses):
        rng = np.random.default_rng([seed, index])
        body = skeleton.animate(base, body_frame(params))
        field_seed = int(rng.integers(2 ** 31))
        target = viewsphere.compute_field(body, g, det, trials, field_seed, miss_penalty)
        views = g.centered(body.center)
        first = obs_view_policy(rng, g)
        candidates = [first] + [int(c) for c in rng.permutation(g.size) if c != first]
        observation = None
        for cell in candidates:
            kp = skeleton.detect(body, views[cell], det, int(rng.integers(2 ** 31)))
            try:
                observation = normalize.normalize_keypoints(kp)
                break
            except NormalizationFailureException:
                continue
        if observation is None:
            skipped += 1
            continue
        pairs.append(DatasetPair(observation.vector(), target.flat()))
    if skipped:
        logger.warning("Skipped {} of {} poses that could not be observed".format(skipped, len(poses)))
    logger.info("Generated {} dataset pairs".format(len(pairs)))
    return pairs


def write_dataset(
    pairs: typing.Sequence[DatasetPair], grid: viewsphere.ViewGrid, stream: io.TextIOBase
) -> None:
    """
    This function writes one pair per line: the normalized pose vector (coordinates then mask) followed by the
    flattened field, after a commented header holding the grid.
    """
    stream.write(DATASET_HEADER + "\n")
    stream.write("# grid: {} {} {!r}\n".format(grid.n_az, grid.n_el, grid.radius))
    for pair in pairs:
        stream.write(" ".join(format_float(v) for v in np.concatenate([pair.input, pair.target])) + "\n")


def read_dataset(stream: io.TextIOBase) -> typing.Tuple[typing.List[DatasetPair], viewsphere.ViewGrid]:
    header = stream.readline().strip()
    if header != DATASET_HEADER:
        raise InvalidArgumentException("Not a dataset file, header is '{}'".format(header))
    grid_line = stream.readline().strip()
    if not grid_line.startswith("# grid:"):
        raise InvalidArgumentException("The dataset file lacks its grid line")
    try:
        n_az, n_el, radius = grid_line[len("# grid:"):].split()
        grid = viewsphere.make_grid(int(n_az), int(n_el), float(radius))
    except ValueError as e:
        raise InvalidArgumentException("Line 2: invalid grid line '{}'".format(grid_line)) from e
    pairs = []
    for line_no, line in enumerate(stream, start=3):
        if line.strip() == "":
            continue
        try:
            values = [float(v) for v in line.split()]
        except ValueError as e:
            raise InvalidArgumentException("Line {}: {}".format(line_no, e)) from e
        if len(values) != normalize.VECTOR_SIZE + grid.size:
            raise InvalidArgumentException(
                "Line {}: expected {} values, found {}".format(line_no, normalize.VECTOR_SIZE + grid.size, len(values))
            )
        pairs.append(DatasetPair(values[: normalize.VECTOR_SIZE], values[normalize.VECTOR_SIZE:]))
    return pairs, grid


def rank1_agreement(
    net: PerceptionNet, pairs: typing.Sequence[DatasetPair], grid: viewsphere.ViewGrid
) -> float:
    """
    :return: the fraction of pairs whose predicted best cell lies in the 3x3 neighborhood (azimuth wrapping) of the
        oracle best cell.
    """
    if len(pairs) == 0:
        raise InvalidArgumentException("No pairs to compare")
    x, y = _stack(pairs, net)
    predictions = predict(net, x)
    hits = 0
    for prediction, target in zip(predictions, y):
        predicted = viewsphere.best_views(viewsphere.ErrorField(grid, prediction), 1)[0][0]
        oracle = viewsphere.best_views(viewsphere.ErrorField(grid, target), 1)[0][0]
        if predicted in viewsphere.cell_neighbors(grid, *oracle):
            hits += 1
    return hits / len(pairs)


@dataclass(frozen=True)
class PerturbationLevel:
    """
    A perturbation level bounds the random translation (pixels), rotation (degrees) and scale factor.
    """

    name: str
    translation: float
    rotation: float
    scale: float


LEVELS = {
    "T1": PerturbationLevel("T1", 5.0, 5.0, 1.05),
    "T2": PerturbationLevel("T2", 10.0, 10.0, 1.10),
    "T3": PerturbationLevel("T3", 20.0, 20.0, 1.15),
}
MODES = ("translation", "rotation", "scale", "all")
REGIMES = ("jitter", "global")


@dataclass
class RobustnessResult:
    level: str
    mode: str
    regime: str
    percentage: float
    frames_used: int
    excluded: int


def _perturb(
    kp: skeleton.Keypoints2D,
    level: PerturbationLevel,
    mode: str,
    regime: str,
    rng: np.random.Generator,
) -> skeleton.Keypoints2D:
    n = skeleton.NUM_JOINTS
    # Fixed draw order so every level and mode of a frame reuses the same random numbers.
    u = rng.random((3, n))
    direction = rng.uniform(0.0, 2 * math.pi, n)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    magnitude = u[0] * level.translation if mode in ("translation", "all") else np.zeros(n)
    angle = sign * np.radians(u[1] * level.rotation) if mode in ("rotation", "all") else np.zeros(n)
    scale = 1.0 + u[2] * (level.scale - 1.0) if mode in ("scale", "all") else np.ones(n)
    shift = magnitude[:, None] * np.stack([np.cos(direction), np.sin(direction)], axis=1)
    if regime == "global":
        return normalize.similarity_transform(kp, shift[0], float(angle[0]), float(scale[0]))
    visible = kp.visible
    center = kp.uv[visible].mean(axis=0) if visible.any() else np.zeros(2)
    c, s = np.cos(angle), np.sin(angle)
    offset = kp.uv - center
    rotated = np.stack([c * offset[:, 0] - s * offset[:, 1], s * offset[:, 0] + c * offset[:, 1]], axis=1)
    uv = center + rotated * scale[:, None] + shift
    return skeleton.Keypoints2D(uv, visible, kp.width, kp.height)


def perturb_robustness(
    net: PerceptionNet,
    frames: typing.Sequence[skeleton.Keypoints2D],
    level: str,
    bins: int = 21,
    seed: int = 0,
    mode: str = "all",
    regime: str = "jitter",
) -> RobustnessResult:
    """
    This function measures how often the quantized predicted field changes when the keypoints are perturbed. In the
    ``global`` regime one similarity transform moves all keypoints together; in the ``jitter`` regime every joint
    gets its own transform about the keypoint centroid. Frames whose original or perturbed keypoints cannot be
    normalized are excluded.

    :param level: ``T1``, ``T2`` or ``T3``.
    :param mode: ``translation``, ``rotation``, ``scale`` or ``all``.
    :return: the percentage of changed cells over all used frames.
    """
    if len(frames) == 0:
        raise InvalidArgumentException("At least one frame is required")
    if level not in LEVELS:
        raise InvalidArgumentException("Unknown perturbation level {}".format(level))
    if mode not in MODES or regime not in REGIMES:
        raise InvalidArgumentException("Unknown perturbation mode {} or regime {}".format(mode, regime))
    changed = 0
    used = 0
    excluded = 0
    for index, frame in enumerate(frames):
        rng = np.random.default_rng([seed, index])
        perturbed = _perturb(frame, LEVELS[level], mode, regime, rng)
        try:
            original = normalize.normalize_keypoints(frame)
            moved = normalize.normalize_keypoints(perturbed)
        except NormalizationFailureException:
            excluded += 1
            continue
        before = viewsphere.quantize_bins(predict(net, original.vector()), bins)
        after = viewsphere.quantize_bins(predict(net, moved.vector()), bins)
        changed += int(np.sum(before != after))
        used += 1
    if excluded:
        logger.warning("Excluded {} frames that could not be normalized".format(excluded))
    percentage = 100.0 * changed / (used * net.output_size) if used else 0.0
    return RobustnessResult(level, mode, regime, percentage, used, excluded)


def robustness_table(
    net: PerceptionNet,
    frames: typing.Sequence[skeleton.Keypoints2D],
    bins: int = 21,
    seed: int = 0,
) -> typing.List[RobustnessResult]:
    """
    :return: every mode at every level under per-joint jitter, then every level under a global transform.
    """
    results = []
    for mode in MODES:
        for level in LEVELS:
            results.append(perturb_robustness(net, frames, level, bins, seed, mode, "jitter"))
    for level in LEVELS:
        results.append(perturb_robustness(net, frames, level, bins, seed, "all", "global"))
    return results


def synthetic_frames(
    count: int,
    grid: viewsphere.ViewGrid,
    det: skeleton.DetectorParams,
    seed: int,
    height: float = 1.8,
) -> typing.List[skeleton.Keypoints2D]:
    """
    This function emulates a walking video: detections of a gait cycle seen from random grid views.
    """
    base = skeleton.build_canonical_skeleton(height)
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(count):
        body = skeleton.animate(base, skeleton.gait_params(float(rng.uniform(0, 2 * math.pi))))
        view = grid.views[int(rng.integers(grid.size))].with_look_at(body.center)
        frames.append(skeleton.detect(body, view, det, int(rng.integers(2 ** 31))))
    return frames


def gait_poses(count: int, seed: int) -> typing.List[skeleton.PoseParams]:
    """
    :return: walking poses at random phases with randomized stride and arm swing.
    """
    rng = np.random.default_rng(seed)
    return [
        skeleton.gait_params(
            float(rng.uniform(0, 2 * math.pi)),
            stride=float(rng.uniform(0.2, 0.5)),
            arm_swing=float(rng.uniform(0.1, 0.5)),
        )
        for _ in range(count)
    ]
