"""Dense networks, losses, gradients, Adam and the checkpoint container"""

import copy
import json
import math
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    List,
    Literal,
    Mapping,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
from scipy.special import expit

from prefect_speech2egg.exceptions import CheckpointError, DivergenceError

Activation = Literal["leaky", "linear", "sigmoid"]
Mode = Literal["train", "eval"]

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LOG_EPS = 1e-7
ARCCOS_GUARD = 1e-7
CHECKPOINT_SCHEMA = "speech2egg-checkpoint/1"
LEARNABLE = ("weight", "bias", "gamma", "beta")
RUNNING = ("running_mean", "running_var")


@dataclass
class DenseLayer:
    """
    Affine map, optional batch normalization and an activation.

    Attributes:
        weight: Matrix of shape (in, out).
        bias: Vector of shape (out,).
        activation: Nonlinearity applied last.
        batch_norm: Whether batch normalization sits between the affine map
            and the activation.
        gamma: Normalization scale.
        beta: Normalization shift.
        running_mean: Normalization mean used in eval mode.
        running_var: Normalization variance used in eval mode.
        leaky_slope: Negative-side slope of the leaky rectifier.
    """

    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = "leaky"
    batch_norm: bool = False
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    leaky_slope: float = 0.01

    def __post_init__(self):
        """Coerces arrays and fills the normalization parameters when enabled."""
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(
                f"Layer shapes do not compose: weight {self.weight.shape}, "
                f"bias {self.bias.shape}."
            )
        if self.activation not in ("leaky", "linear", "sigmoid"):
            raise ValueError(f"Unknown activation {self.activation!r}.")
        if self.batch_norm:
            width = self.out_dim
            self.gamma = _vector(self.gamma, width, 1.0)
            self.beta = _vector(self.beta, width, 0.0)
            self.running_mean = _vector(self.running_mean, width, 0.0)
            self.running_var = _vector(self.running_var, width, 1.0)
            if np.any(self.running_var <= 0):
                raise ValueError("Running variance entries must be positive.")

    @property
    def in_dim(self) -> int:
        """Input width."""
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        """Output width."""
        return self.weight.shape[1]

    def arrays(self, learnable_only: bool = False) -> Dict[str, np.ndarray]:
        """The layer arrays by name, optionally only the learnable ones."""
        names = LEARNABLE if learnable_only else LEARNABLE + RUNNING
        return {
            name: getattr(self, name)
            for name in names
            if getattr(self, name) is not None
        }

    def describe(self) -> Dict[str, Any]:
        """The layer shape and options, as stored in checkpoints."""
        return {
            "in": self.in_dim,
            "out": self.out_dim,
            "activation": self.activation,
            "batch_norm": self.batch_norm,
            "leaky_slope": self.leaky_slope,
        }


def _vector(value: Optional[np.ndarray], width: int, fill: float) -> np.ndarray:
    """`value` as a float vector of `width`, or a vector filled with `fill`."""
    if value is None:
        return np.full(width, fill)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != (width,):
        raise ValueError(f"Expected a vector of {width} entries; got {value.shape}.")
    return value


class DenseNet:
    """
    A stack of dense layers with a recorded forward pass for backpropagation.

    Args:
        layers: Layers in order; consecutive widths must compose.
        name: Short name used in parameter keys, e.g. `"enc"`.

    Example:
        ```python
        from prefect_speech2egg.neuralcore import DenseNet

        net = DenseNet.build([192, 160, 128, 96, 64, 32, 16], seed=0, name="enc")
        latents = net.forward(windows, mode="eval")
        ```
    """

    def __init__(self, layers: Sequence[DenseLayer], name: str = "net"):
        if not layers:
            raise ValueError("A network needs at least one layer.")
        for index, (left, right) in enumerate(zip(layers[:-1], layers[1:])):
            if left.out_dim != right.in_dim:
                raise ValueError(
                    f"Layer {index} outputs {left.out_dim} values but layer "
                    f"{index + 1} expects {right.in_dim}."
                )
        self.layers: List[DenseLayer] = list(layers)
        self.name = name
        self._tape: Optional[List[Dict[str, Any]]] = None
        self._mode: Mode = "eval"

    @classmethod
    def build(
        cls,
        widths: Sequence[int],
        hidden_activation: Activation = "leaky",
        output_activation: Activation = "linear",
        batch_norm: bool = True,
        leaky_slope: float = 0.01,
        seed: Optional[int] = None,
        name: str = "net",
    ) -> "DenseNet":
        """
        Builds a network from its widths, input width first. Hidden layers get
        batch normalization (when enabled) and `hidden_activation`; the output
        layer is a plain affine map followed by `output_activation`. Weights use
        He initialization and biases start at zero.
        """
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"Invalid network widths {list(widths)}.")
        rng = np.random.default_rng(seed)
        layers = []
        for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = index == len(widths) - 2
            activation = output_activation if last else hidden_activation
            gain = 1.0 if activation == "sigmoid" else 2.0
            layers.append(
                DenseLayer(
                    weight=rng.normal(0.0, math.sqrt(gain / fan_in), (fan_in, fan_out)),
                    bias=np.zeros(fan_out),
                    activation=activation,
                    batch_norm=batch_norm and not last,
                    leaky_slope=leaky_slope,
                )
            )
        return cls(layers, name=name)

    @property
    def in_dim(self) -> int:
        """Input width of the first layer."""
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        """Output width of the last layer."""
        return self.layers[-1].out_dim

    @property
    def widths(self) -> List[int]:
        """
        Output width of every layer.
        """
        return [layer.out_dim for layer in self.layers]

    def copy(self, name: Optional[str] = None) -> "DenseNet":
        """A deep copy, optionally renamed."""
        return DenseNet(copy.deepcopy(self.layers), name=name or self.name)

    def parameters(self) -> Dict[str, np.ndarray]:
        """
        Learnable arrays keyed `"<net>/<layer>/<name>"`; updating them in
        place updates the network.
        """
        return {
            f"{self.name}/{index}/{key}": array
            for index, layer in enumerate(self.layers)
            for key, array in layer.arrays(learnable_only=True).items()
        }

    def state_dict(self) -> Dict[str, np.ndarray]:
        """
        Learnable arrays plus normalization running statistics.
        """
        return {
            f"{index}/{key}": array
            for index, layer in enumerate(self.layers)
            for key, array in layer.arrays().items()
        }

    def describe(self) -> List[Dict[str, Any]]:
        """Per-layer shapes and options, as stored in checkpoints."""
        return [layer.describe() for layer in self.layers]

    @classmethod
    def from_state(
        cls,
        name: str,
        layout: Sequence[Mapping[str, Any]],
        arrays: Mapping[str, np.ndarray],
    ) -> "DenseNet":
        """Rebuilds a network from its layout and state arrays."""
        layers = []
        for index, spec in enumerate(layout):
            values = {
                key: np.array(arrays[f"{index}/{key}"])
                for key in LEARNABLE + RUNNING
                if f"{index}/{key}" in arrays
            }
            if "weight" not in values or "bias" not in values:
                raise KeyError(f"{name}/{index}/weight")
            layers.append(
                DenseLayer(
                    activation=spec["activation"],
                    batch_norm=spec["batch_norm"],
                    leaky_slope=spec["leaky_slope"],
                    **values,
                )
            )
        return cls(layers, name=name)

    def forward(
        self, batch: np.ndarray, mode: Mode = "eval", update_stats: bool = True
    ) -> np.ndarray:
        """
        Runs the network on a batch and records what `backward` needs.

        Args:
            batch: Matrix of shape (B, in).
            mode: `"train"` normalizes with batch statistics, `"eval"` with the
                running statistics.
            update_stats: In train mode, whether the running statistics follow
                the batch statistics by exponential moving average.

        Returns:
            Matrix of shape (B, out).
        """
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(
                f"{self.name} expects batches of width {self.in_dim}; "
                f"got shape {x.shape}."
            )
        if mode not in ("train", "eval"):
            raise ValueError(f"Unknown mode {mode!r}.")
        if mode == "train" and x.shape[0] < 2:
            raise ValueError(f"{self.name} needs a batch of at least 2 in train mode.")

        tape = []
        for layer in self.layers:
            record: Dict[str, Any] = {"input": x}
            h = x @ layer.weight + layer.bias
            if layer.batch_norm:
                if mode == "train":
                    mean, var = h.mean(axis=0), h.var(axis=0)
                    if update_stats:
                        layer.running_mean = (
                            1 - BN_MOMENTUM
                        ) * layer.running_mean + BN_MOMENTUM * mean
                        layer.running_var = (
                            1 - BN_MOMENTUM
                        ) * layer.running_var + BN_MOMENTUM * var
                else:
                    mean, var = layer.running_mean, layer.running_var
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                normed = (h - mean) * inv_std
                record.update(normed=normed, inv_std=inv_std)
                h = layer.gamma * normed + layer.beta
            if layer.activation == "leaky":
                out = np.where(h > 0, h, layer.leaky_slope * h)
            elif layer.activation == "sigmoid":
                out = expit(h)
            else:
                out = h
            record.update(pre=h, output=out)
            tape.append(record)
            x = out
        self._tape = tape
        self._mode = mode
        return x

    def backward(
        self, grad_out: np.ndarray
    ) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """
        Backpropagates the gradient of a loss with respect to the last
        forward pass's output.

        Args:
            grad_out: dLoss/dOutput, shape (B, out).

        Returns:
            The parameter gradients keyed like `parameters()`, and dLoss/dInput.
        """
        if self._tape is None:
            raise RuntimeError(
                f"backward on {self.name} without a recorded forward pass."
            )
        tape, self._tape = self._tape, None
        grad = np.asarray(grad_out, dtype=np.float64)
        if grad.shape != tape[-1]["output"].shape:
            raise ValueError(
                f"Gradient of shape {grad.shape} does not match the output "
                f"{tape[-1]['output'].shape} of {self.name}."
            )

        grads: Dict[str, np.ndarray] = {}
        for index in reversed(range(len(self.layers))):
            layer, record = self.layers[index], tape[index]
            h = record["pre"]
            if layer.activation == "leaky":
                grad = grad * np.where(h > 0, 1.0, layer.leaky_slope)
            elif layer.activation == "sigmoid":
                out = record["output"]
                grad = grad * out * (1.0 - out)
            key = f"{self.name}/{index}"
            if layer.batch_norm:
                normed, inv_std = record["normed"], record["inv_std"]
                grads[f"{key}/gamma"] = np.sum(grad * normed, axis=0)
                grads[f"{key}/beta"] = np.sum(grad, axis=0)
                grad_normed = grad * layer.gamma
                if self._mode == "train":
                    size = grad.shape[0]
                    grad = (inv_std / size) * (
                        size * grad_normed
                        - grad_normed.sum(axis=0)
                        - normed * np.sum(grad_normed * normed, axis=0)
                    )
                else:
                    grad = grad_normed * inv_std
            grads[f"{key}/weight"] = record["input"].T @ grad
            grads[f"{key}/bias"] = grad.sum(axis=0)
            grad = grad @ layer.weight.T
        return grads, grad


@dataclass(frozen=True)
class LossValue:
    """
    A scalar loss and its named parts.

    Attributes:
        scalar: The value minimized.
        components: Named parts, e.g. reconstruction, adversarial, discriminator.
    """

    scalar: float
    components: Mapping[str, float] = field(default_factory=dict)

    def __float__(self) -> float:
        """The scalar value."""
        return self.scalar


def _rows(array: np.ndarray) -> np.ndarray:
    """`array` as float rows; a vector becomes a single row."""
    array = np.asarray(array, dtype=np.float64)
    return array[None, :] if array.ndim == 1 else array


def _unit_rows(y_hat: np.ndarray, y: np.ndarray):
    """Row-normalized copies of both batches; zero-norm rows are an error."""
    y_hat, y = _rows(y_hat), _rows(y)
    if y_hat.shape != y.shape:
        raise ValueError(f"Shape mismatch: {y_hat.shape} vs {y.shape}.")
    norm_hat = np.linalg.norm(y_hat, axis=1, keepdims=True)
    norm = np.linalg.norm(y, axis=1, keepdims=True)
    if np.any(norm_hat == 0) or np.any(norm == 0):
        raise ValueError("undefined direction: cosine distance of a zero-norm vector.")
    return y_hat, norm_hat, y_hat / norm_hat, y / norm


def cosine_distances(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Angle in radians between matching rows, in [0, pi].
    """
    _, _, a, b = _unit_rows(y_hat, y)
    # Same as arccos(<a, b>) but exact at 0 and pi.
    return 2.0 * np.arctan2(
        np.linalg.norm(a - b, axis=1), np.linalg.norm(a + b, axis=1)
    )


def cosine_loss(y_hat: np.ndarray, y: np.ndarray) -> LossValue:
    """
    Cosine distance `arccos(<y_hat, y> / (|y_hat| |y|))`, averaged over rows
    when given matrices. Invariant to positive rescaling of either argument.

    Raises:
        ValueError: "undefined direction" when a row has zero norm.
    """
    value = float(np.mean(cosine_distances(y_hat, y)))
    return LossValue(scalar=value, components={"reconstruction": value})


def cosine_loss_grad(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Gradient of `cosine_loss` with respect to `y_hat`. Rows whose cosine is
    within 1e-7 of +-1 get an exactly zero gradient.
    """
    y_hat, norm_hat, a, b = _unit_rows(y_hat, y)
    u = np.sum(a * b, axis=1, keepdims=True)
    saturated = np.abs(u) >= 1.0 - ARCCOS_GUARD
    clamped = np.clip(u, -1.0 + ARCCOS_GUARD, 1.0 - ARCCOS_GUARD)
    du = (b - u * a) / norm_hat
    grad = -du / np.sqrt(1.0 - clamped**2)
    grad = np.where(saturated, 0.0, grad) / y_hat.shape[0]
    return grad


def l2_loss(y_hat: np.ndarray, y: np.ndarray) -> LossValue:
    """
    Mean squared error over all entries.
    """
    y_hat, y = _rows(y_hat), _rows(y)
    if y_hat.shape != y.shape:
        raise ValueError(f"Shape mismatch: {y_hat.shape} vs {y.shape}.")
    value = float(np.mean((y_hat - y) ** 2))
    return LossValue(scalar=value, components={"reconstruction": value})


def l2_loss_grad(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of `l2_loss` with respect to `y_hat`."""
    y_hat, y = _rows(y_hat), _rows(y)
    return 2.0 * (y_hat - y) / y_hat.size


RECONSTRUCTION_LOSSES: Dict[str, Tuple[Callable, Callable]] = {
    "cosine": (cosine_loss, cosine_loss_grad),
    "l2": (l2_loss, l2_loss_grad),
}


def _probabilities(d: np.ndarray, name: str) -> np.ndarray:
    """Discriminator outputs as a flat vector clipped away from 0 and 1."""
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise ValueError(f"Empty batch of {name} discriminator outputs.")
    return np.clip(d, LOG_EPS, 1.0 - LOG_EPS)


def adversarial_losses(d_real: np.ndarray, d_fake: np.ndarray) -> Tuple[float, float]:
    """
    Generator and discriminator losses from discriminator outputs, with all
    probabilities clamped to [1e-7, 1 - 1e-7].

    Args:
        d_real: Discriminator outputs on prior latents.
        d_fake: Discriminator outputs on speech-encoder latents.

    Returns:
        `gen_loss = -mean(log(1 - d_fake))`, which the speech encoder
        increases, and `disc_loss = -mean(log d_real) - mean(log(1 - d_fake))`.
    """
    real = _probabilities(d_real, "real")
    fake = _probabilities(d_fake, "fake")
    gen_loss = float(-np.mean(np.log1p(-fake)))
    disc_loss = float(-np.mean(np.log(real)) + gen_loss)
    return gen_loss, disc_loss


def discriminator_loss_grads(
    d_real: np.ndarray, d_fake: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of `disc_loss` with respect to the real and fake outputs,
    shaped as column vectors.
    """
    real = _probabilities(d_real, "real")
    fake = _probabilities(d_fake, "fake")
    grad_real = -1.0 / (real.size * real)
    grad_fake = 1.0 / (fake.size * (1.0 - fake))
    return grad_real[:, None], grad_fake[:, None]


def generator_loss_grad(d_fake: np.ndarray) -> np.ndarray:
    """
    Gradient of the speech encoder's adversarial term `mean(log(1 - d_fake))`
    with respect to the fake outputs, as a column vector.
    """
    fake = _probabilities(d_fake, "fake")
    return (-1.0 / (fake.size * (1.0 - fake)))[:, None]


@dataclass
class TrainState:
    """
    Networks under training plus Adam moments.

    Attributes:
        nets: Networks keyed by their name.
        moments: First and second moments keyed like the parameters.
        counts: Number of updates each parameter has received.
        step: Optimizer steps taken.
        mode: Whether the networks are training or evaluating.
    """

    nets: Dict[str, DenseNet]
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    step: int = 0
    mode: Mode = "train"

    def __post_init__(self):
        """Checks network names and creates missing moments and counts."""
        for name, net in self.nets.items():
            if net.name != name:
                raise ValueError(f"Network {net.name!r} registered as {name!r}.")
        for key, array in self.parameters().items():
            first, second = self.moments.setdefault(
                key, (np.zeros_like(array), np.zeros_like(array))
            )
            if first.shape != array.shape or second.shape != array.shape:
                raise ValueError(
                    f"Moments of {key} do not match its shape {array.shape}."
                )
            self.counts.setdefault(key, 0)
        if self.step < 0:
            raise ValueError("The step counter cannot be negative.")

    def parameters(self) -> Dict[str, np.ndarray]:
        """Learnable arrays of every network, keyed like the moments."""
        params: Dict[str, np.ndarray] = {}
        for net in self.nets.values():
            params.update(net.parameters())
        return params

    def copy(self) -> "TrainState":
        """A deep copy; later updates of either state leave the other alone."""
        return TrainState(
            nets={name: net.copy() for name, net in self.nets.items()},
            moments={
                key: (first.copy(), second.copy())
                for key, (first, second) in self.moments.items()
            },
            counts=dict(self.counts),
            step=self.step,
            mode=self.mode,
        )


def optimizer_step(
    state: TrainState,
    grads: Mapping[str, np.ndarray],
    lr: float = 2e-4,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
    advance: bool = True,
) -> TrainState:
    """
    Applies one Adam update to every parameter with a gradient and advances
    the step counter. Parameters are updated in place.

    Args:
        state: The training state.
        grads: Gradients keyed like the parameters.
        lr: Learning rate.
        beta1: First moment decay.
        beta2: Second moment decay.
        eps: Denominator offset.
        advance: Whether this update advances the step counter.

    Returns:
        The same state, advanced by one step when `advance` is set.

    Raises:
        DivergenceError: A gradient holds NaN or infinity.
    """
    if lr <= 0:
        raise ValueError(f"Learning rate must be positive; got {lr}.")
    params = state.parameters()
    for key, grad in grads.items():
        if key not in params:
            raise KeyError(f"Gradient for unknown parameter {key!r}.")
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(
                f"Non-finite gradient for parameter {key} at step {state.step}.",
                last_finite_step=state.step,
            )
    for key, grad in grads.items():
        param = params[key]
        first, second = state.moments[key]
        first *= beta1
        first += (1.0 - beta1) * grad
        second *= beta2
        second += (1.0 - beta2) * grad**2
        count = state.counts[key] + 1
        state.counts[key] = count
        first_hat = first / (1.0 - beta1**count)
        second_hat = second / (1.0 - beta2**count)
        param -= lr * first_hat / (np.sqrt(second_hat) + eps)
    if advance:
        state.step += 1
    return state


def gradient_check(
    loss: Callable[[], float], param: np.ndarray, h: float = 1e-4
) -> np.ndarray:
    """
    Central-difference gradient of `loss()` with respect to `param`, which is
    perturbed in place one entry at a time and restored.

    Args:
        loss: Evaluates the loss for the current parameter values.
        param: The array to differentiate against.
        h: Perturbation size.

    Returns:
        The numerical gradient, same shape as `param`.
    """
    numeric = np.zeros_like(param, dtype=np.float64)
    for index in np.ndindex(param.shape):
        original = param[index]
        param[index] = original + h
        upper = loss()
        param[index] = original - h
        lower = loss()
        param[index] = original
        numeric[index] = (upper - lower) / (2.0 * h)
    return numeric


@dataclass
class Checkpoint:
    """
    Everything needed to resume training or run inference.

    Attributes:
        nets: Networks keyed by name.
        moments: Adam moments keyed like the parameters.
        counts: Per-parameter Adam update counts.
        step: Optimizer step counter.
        config: Snapshot of the configuration that produced the networks.
        meta: Further JSON-safe entries, e.g. the training stage.
    """

    nets: Dict[str, DenseNet]
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    step: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def train_state(self, names: Optional[Sequence[str]] = None) -> TrainState:
        """
        A TrainState over the named networks, restoring their moments.
        """
        nets = {name: self.nets[name] for name in (names or self.nets)}
        state = TrainState(nets=nets, step=self.step)
        for key in state.moments:
            if key in self.moments:
                state.moments[key] = self.moments[key]
                state.counts[key] = self.counts.get(key, 0)
        return state


def _write_npz(path: Path, arrays: Mapping[str, np.ndarray]):
    """Writes an uncompressed npz with fixed entry timestamps."""
    # Fixed entry timestamps keep identical checkpoints byte-identical.
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name, array in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with archive.open(info, "w", force_zip64=True) as handle:
                np.lib.format.write_array(
                    handle, np.asanyarray(array), allow_pickle=False
                )


def save_checkpoint(checkpoint: Checkpoint, path: os.PathLike) -> Path:
    """
    Writes a checkpoint as an `.npz` archive: one entry per array plus a JSON
    `meta` entry carrying the schema tag, layer layouts, step counter and
    configuration snapshot.
    """
    path = Path(path)
    arrays: Dict[str, np.ndarray] = {}
    layouts = {}
    for name, net in checkpoint.nets.items():
        layouts[name] = net.describe()
        for key, array in net.state_dict().items():
            arrays[f"net/{name}/{key}"] = array
    for key, (first, second) in checkpoint.moments.items():
        arrays[f"adam_m/{key}"] = first
        arrays[f"adam_v/{key}"] = second
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "step": checkpoint.step,
        "layouts": layouts,
        "counts": checkpoint.counts,
        "config": checkpoint.config,
        "meta": checkpoint.meta,
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_npz(path, arrays)
    except OSError as exc:
        raise CheckpointError(f"Cannot write checkpoint {str(path)!r}: {exc}") from exc
    return path


def load_checkpoint(path: os.PathLike) -> Checkpoint:
    """
    Reads a checkpoint written by `save_checkpoint`.

    Raises:
        CheckpointError: The file is missing, unreadable, lacks entries or
            carries another schema tag.
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"Cannot read checkpoint {str(path)!r}: {exc}") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"Checkpoint {str(path)!r} has no metadata entry.")
    meta = json.loads(str(arrays["meta"]))
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"Checkpoint {str(path)!r} has schema {meta.get('schema')!r}; "
            f"this version reads {CHECKPOINT_SCHEMA!r}."
        )
    try:
        nets = {}
        for name, layout in meta["layouts"].items():
            prefix = f"net/{name}/"
            net_arrays = {
                key[len(prefix) :]: value
                for key, value in arrays.items()
                if key.startswith(prefix)
            }
            nets[name] = DenseNet.from_state(name, layout, net_arrays)
        moments = {
            key[len("adam_m/") :]: (
                np.array(value),
                np.array(arrays["adam_v/" + key[len("adam_m/") :]]),
            )
            for key, value in arrays.items()
            if key.startswith("adam_m/")
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(
            f"Checkpoint {str(path)!r} is missing entry {exc}."
        ) from exc
    return Checkpoint(
        nets=nets,
        moments=moments,
        counts={key: int(value) for key, value in meta.get("counts", {}).items()},
        step=int(meta["step"]),
        config=meta.get("config", {}),
        meta=meta.get("meta", {}),
    )
