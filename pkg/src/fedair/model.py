"""Three-layer ReLU MLP with hand-written backprop, Adam, and FedAvg aggregation.

Parameters live in one flat float32 vector, layer-major: W1 (in x out, row
major), b1, W2, b2, W3, b3.  All arithmetic runs in float64; values are
rounded to float32 whenever a ``ModelParams`` is produced, since that is the
precision that goes over the air.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import N_CLASSES, N_PIXELS, ClientDataset, LabeledImage, as_arrays

DEFAULT_HIDDEN = (15, 16)


class ShapeMismatchError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def layer_shapes_for(hidden=DEFAULT_HIDDEN, n_in=N_PIXELS, n_out=N_CLASSES):
    dims = [n_in, *hidden, n_out]
    return tuple(zip(dims[:-1], dims[1:]))


def param_count(layer_shapes) -> int:
    return sum(i * o + o for i, o in layer_shapes)


@dataclass(frozen=True)
class ModelParams:
    layer_shapes: tuple
    values: np.ndarray

    def __post_init__(self):
        shapes = tuple((int(i), int(o)) for i, o in self.layer_shapes)
        object.__setattr__(self, "layer_shapes", shapes)
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.shape != (param_count(shapes),):
            raise ShapeMismatchError(
                f"expected {param_count(shapes)} values for {shapes}, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("model parameters must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.layer_shapes == other.layer_shapes and np.array_equal(
            self.values.view(np.uint32), other.values.view(np.uint32)
        )

    __hash__ = None

    def layers(self, dtype=np.float64):
        return unflatten(self.values.astype(dtype), self.layer_shapes)


def unflatten(flat: np.ndarray, layer_shapes) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` per layer into ``flat``."""
    out, pos = [], 0
    for n_in, n_out in layer_shapes:
        w = flat[pos:pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = flat[pos:pos + n_out]
        pos += n_out
        out.append((w, b))
    return out


def init_model(seed: int = 0, hidden=DEFAULT_HIDDEN) -> ModelParams:
    shapes = layer_shapes_for(hidden)
    rng = np.random.default_rng(seed)
    flat = np.zeros(param_count(shapes))
    for w, _ in unflatten(flat, shapes):
        bound = np.sqrt(1.0 / w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return ModelParams(shapes, flat)


def _forward(layers, x):
    acts = [x]
    h = x
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(params: ModelParams, pixels) -> np.ndarray:
    """Logits for one 784-vector, or for each row of an ``(n, 784)`` matrix."""
    x = np.asarray(pixels, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("input pixels must be finite")
    return _forward(params.layers(), x)[-1]


def _loss_grad(flat: np.ndarray, layer_shapes, x: np.ndarray, y: np.ndarray):
    layers = unflatten(flat, layer_shapes)
    acts = _forward(layers, x)
    logits = acts[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = x.shape[0]
    loss = -log_probs[np.arange(n), y].mean()

    grad = np.empty_like(flat)
    grad_layers = unflatten(grad, layer_shapes)
    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    for k in range(len(layers) - 1, -1, -1):
        gw, gb = grad_layers[k]
        gw[...] = acts[k].T @ delta
        gb[...] = delta.sum(axis=0)
        if k:
            delta = (delta @ layers[k][0].T) * (acts[k] > 0)
    return float(loss), grad


def loss_and_gradient(params: ModelParams, batch: list[LabeledImage]):
    """Mean softmax cross-entropy over ``batch`` and its exact gradient (float64)."""
    if not batch:
        raise ValueError("batch must be non-empty")
    x, y = as_arrays(batch)
    return _loss_grad(params.values.astype(np.float64), params.layer_shapes, x, y)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.adam_beta1 < self.adam_beta2 < 1:
            raise ValueError("need 0 < beta1 < beta2 < 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def fresh(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.first_moment.copy(), self.second_moment.copy(), self.step_count)


def _adam_update(p: np.ndarray, g: np.ndarray, state: AdamState, cfg: TrainConfig) -> None:
    # In-place on p and state.
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.step_count += 1
    t = state.step_count
    state.first_moment *= b1
    state.first_moment += (1 - b1) * g
    state.second_moment *= b2
    state.second_moment += (1 - b2) * g * g
    m_hat = state.first_moment / (1 - b1**t)
    v_hat = state.second_moment / (1 - b2**t)
    p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)


def adam_step(params: ModelParams, grad, state: AdamState, config: TrainConfig):
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape or state.first_moment.shape != grad.shape:
        raise ShapeMismatchError("parameter, gradient and optimizer state lengths differ")
    new_state = state.copy()
    p = params.values.astype(np.float64)
    _adam_update(p, grad, new_state, config)
    return ModelParams(params.layer_shapes, p), new_state


@dataclass
class LocalTrainResult:
    params: ModelParams
    optimizer_state: AdamState
    epoch_losses: list[float] = field(default_factory=list)


def run_local_training(
    start: ModelParams,
    data: ClientDataset | list[LabeledImage],
    config: TrainConfig,
    optimizer_state: AdamState | None = None,
) -> LocalTrainResult:
    """Seeded mini-batch Adam over ``data`` for ``config.epochs`` passes.

    ``epoch_losses`` holds the mean mini-batch loss of each epoch.
    """
    samples = data.samples if isinstance(data, ClientDataset) else data
    if not samples:
        raise ValueError("local dataset is empty")
    x, y = as_arrays(samples)
    state = (
        optimizer_state.copy() if optimizer_state is not None else AdamState.fresh(len(start))
    )
    p = start.values.astype(np.float64)
    rng = np.random.default_rng(config.seed)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        n_batches = 0
        for b, lo in enumerate(range(0, len(y), config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked below
                loss, grad = _loss_grad(p, start.layer_shapes, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            _adam_update(p, grad, state, config)
            total += loss
            n_batches += 1
        losses.append(total / n_batches)
    if not np.all(np.isfinite(p)):
        raise TrainingDivergedError(config.epochs - 1, -1, float("nan"))
    return LocalTrainResult(ModelParams(start.layer_shapes, p), state, losses)


def train_local(start: ModelParams, data, config: TrainConfig, optimizer_state=None) -> ModelParams:
    return run_local_training(start, data, config, optimizer_state).params


def fed_avg(updates) -> ModelParams:
    """Sample-count-weighted coordinatewise mean of ``[(ModelParams, n), ...]``."""
    updates = list(updates)
    if not updates:
        raise ValueError("fed_avg needs at least one update")
    shapes = updates[0][0].layer_shapes
    for params, n in updates:
        if params.layer_shapes != shapes:
            raise ShapeMismatchError(f"layer shapes {params.layer_shapes} != {shapes}")
        if n <= 0:
            raise ValueError(f"sample count must be positive, got {n}")
    total = float(sum(n for _, n in updates))
    acc = np.zeros(len(updates[0][0]))
    for params, n in updates:
        acc += (n / total) * params.values.astype(np.float64)
    return ModelParams(shapes, acc)


def predict(params: ModelParams, samples: list[LabeledImage]) -> np.ndarray:
    x, _ = as_arrays(samples)
    return np.argmax(forward(params, x), axis=1)


def evaluate(params: ModelParams, test: list[LabeledImage]):
    """Return ``(accuracy, confusion)`` with ``confusion[true, pred]`` counts."""
    if not test:
        raise ValueError("test set must be non-empty")
    _, y = as_arrays(test)
    pred = predict(params, test)
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return float(np.trace(confusion) / confusion.sum()), confusion


