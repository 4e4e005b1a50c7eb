"""Dense feedforward networks with hand-written reverse-mode gradients.

Every learned component of the atlas (additive subnetworks, the monotone
backbones, the dependence networks and the MLP baseline) is a
``DenseNetwork`` trained through ``train_loop``.

Shapes follow the usual convention: a batch is ``(n, in_dim)``, weight
matrices are ``(out_dim, in_dim)`` and biases ``(out_dim,)``.

Activation conventions:
    gelu       exact GeLU, x * Phi(x)
    softplus   log(1 + exp(x)), strictly positive
    groupsort  splits the layer into contiguous groups of ``group_size``
               units and sorts each group ascending
    linear     identity

Run ``python -m src.nn_core`` for a quick self-check.
"""

import math
import sys
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import expit, ndtr

from .errors import ConfigurationError, NumericalError

LINEAR = "linear"
GELU = "gelu"
SOFTPLUS = "softplus"
GROUPSORT = "groupsort"

HIDDEN_ACTIVATIONS = (LINEAR, GELU, SOFTPLUS, GROUPSORT)
OUTPUT_ACTIVATIONS = (LINEAR, SOFTPLUS)

FORMAT_VERSION = 1
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def group_sort(z: np.ndarray, group_size: int) -> np.ndarray:
    """Sort each contiguous group of ``group_size`` units ascending."""
    n, width = z.shape
    grouped = z.reshape(n, width // group_size, group_size)
    return np.sort(grouped, axis=-1, kind="stable").reshape(n, width)


def activate(kind: str, z: np.ndarray, group_size: int = 2) -> np.ndarray:
    if kind == LINEAR:
        return z
    if kind == GELU:
        return z * ndtr(z)
    if kind == SOFTPLUS:
        return softplus(z)
    if kind == GROUPSORT:
        return group_sort(z, group_size)
    raise ConfigurationError(f"Unknown activation: {kind}")


def activation_backward(kind: str, z: np.ndarray, upstream: np.ndarray, group_size: int = 2) -> np.ndarray:
    """Gradient w.r.t. the pre-activation ``z`` given the gradient w.r.t. the activation."""
    if kind == LINEAR:
        return upstream
    if kind == GELU:
        return upstream * (ndtr(z) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z))
    if kind == SOFTPLUS:
        return upstream * expit(z)
    if kind == GROUPSORT:
        n, width = z.shape
        grouped = z.reshape(n, width // group_size, group_size)
        order = np.argsort(grouped, axis=-1, kind="stable")
        grad = np.zeros_like(grouped)
        np.put_along_axis(grad, order, upstream.reshape(grouped.shape), axis=-1)
        return grad.reshape(n, width)
    raise ConfigurationError(f"Unknown activation: {kind}")


@dataclass
class ForwardTrace:
    """Values recorded by a forward pass and consumed by ``backward``."""
    inputs: List[np.ndarray]          # input of every layer
    pre_activations: List[np.ndarray]  # z of every layer
    squeeze: bool = False


@dataclass
class DenseNetwork:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    hidden_activation: str = GELU
    output_activations: List[str] = field(default_factory=list)
    group_size: int = 2

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ConfigurationError("A network needs one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"Layer {k}: weight {w.shape} does not match bias {b.shape}")
            if k > 0 and self.weights[k - 1].shape[0] != w.shape[1]:
                raise ConfigurationError(
                    f"Layer {k} expects {w.shape[1]} inputs but layer {k - 1} emits {self.weights[k - 1].shape[0]}"
                )
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigurationError(f"Unknown hidden activation: {self.hidden_activation}")
        if not self.output_activations:
            self.output_activations = [LINEAR] * self.out_dim
        if len(self.output_activations) != self.out_dim:
            raise ConfigurationError(
                f"{len(self.output_activations)} output activations given for {self.out_dim} outputs"
            )
        for kind in self.output_activations:
            if kind not in OUTPUT_ACTIVATIONS:
                raise ConfigurationError(f"Unknown output activation: {kind}")
        if self.hidden_activation == GROUPSORT:
            for w in self.weights[:-1]:
                if w.shape[0] % self.group_size:
                    raise ConfigurationError(
                        f"GroupSort width {w.shape[0]} is not divisible by group size {self.group_size}"
                    )

    @classmethod
    def initialize(cls, dims: Sequence[int], rng: np.random.Generator, hidden_activation: str = GELU,
                   output_activations: Optional[List[str]] = None, group_size: int = 2) -> "DenseNetwork":
        """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases."""
        if len(dims) < 2:
            raise ConfigurationError(f"Need at least input and output dims, got {list(dims)}")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases, hidden_activation, list(output_activations or []), group_size)

    @property
    def dims(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def _as_batch(self, x) -> Tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigurationError(f"Network expects input width {self.in_dim}, got shape {x.shape}")
        return x, squeeze

    def _output(self, z: np.ndarray) -> np.ndarray:
        out = z.copy()
        for j, kind in enumerate(self.output_activations):
            if kind == SOFTPLUS:
                out[:, j] = softplus(z[:, j])
        return out

    def forward_trace(self, x) -> Tuple[np.ndarray, ForwardTrace]:
        a, squeeze = self._as_batch(x)
        trace = ForwardTrace([], [], squeeze)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            trace.inputs.append(a)
            z = a @ w.T + b
            trace.pre_activations.append(z)
            a = self._output(z) if k == last else activate(self.hidden_activation, z, self.group_size)
        return (a[0] if squeeze else a), trace

    def forward(self, x) -> np.ndarray:
        a, squeeze = self._as_batch(x)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            a = self._output(z) if k == last else activate(self.hidden_activation, z, self.group_size)
        return a[0] if squeeze else a

    def backward(self, trace: ForwardTrace, upstream) -> Tuple[List[np.ndarray], np.ndarray]:
        """Reverse pass.

        Args:
            trace: the ForwardTrace of the forward pass being differentiated
            upstream: dLoss/dOutput, same shape as the forward output

        Returns:
            (gradients in ``parameters()`` order, dLoss/dInput)
        """
        dz = np.asarray(upstream, dtype=float)
        if trace.squeeze:
            dz = dz[None, :]
        z_out = trace.pre_activations[-1]
        if dz.shape != z_out.shape:
            raise ConfigurationError(f"Upstream gradient {dz.shape} does not match output {z_out.shape}")
        dz = dz.copy()
        for j, kind in enumerate(self.output_activations):
            if kind == SOFTPLUS:
                dz[:, j] *= expit(z_out[:, j])

        grads: List[np.ndarray] = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            grads[2 * k] = dz.T @ trace.inputs[k]
            grads[2 * k + 1] = dz.sum(axis=0)
            da = dz @ self.weights[k]
            if k > 0:
                dz = activation_backward(self.hidden_activation, trace.pre_activations[k - 1], da, self.group_size)
        d_input = da[0] if trace.squeeze else da
        return grads, d_input

    def parameters(self) -> List[np.ndarray]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def to_dict(self) -> dict:
        flat = np.concatenate([p.ravel() for p in self.parameters()])
        return {
            "type": "dense",
            "dims": self.dims,
            "hidden_activation": self.hidden_activation,
            "group_size": self.group_size,
            "output_activations": list(self.output_activations),
            "parameters": flat.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DenseNetwork":
        dims = [int(d) for d in data["dims"]]
        flat = np.asarray(data["parameters"], dtype=float)
        expected = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
        if flat.size != expected:
            raise ConfigurationError(f"Network with dims {dims} needs {expected} parameters, got {flat.size}")
        weights, biases, offset = [], [], 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(flat[offset:offset + fan_out * fan_in].reshape(fan_out, fan_in).copy())
            offset += fan_out * fan_in
            biases.append(flat[offset:offset + fan_out].copy())
            offset += fan_out
        return cls(weights, biases, data["hidden_activation"], list(data["output_activations"]),
                   int(data.get("group_size", 2)))


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    max_epochs: int = 500
    batch_size: Optional[int] = None   # None: 1024 for spatial data, 32 otherwise
    patience: int = 20
    validation_fraction: float = 0.15
    seed: Optional[int] = None
    min_learning_rate: float = 0.0
    log_every: int = 25

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.validation_fraction < 1:
            raise ConfigurationError(f"validation_fraction must be in (0, 1), got {self.validation_fraction}")
        if self.max_epochs < 1:
            raise ConfigurationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 0:
            raise ConfigurationError(f"patience must be >= 0, got {self.patience}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")


class Adam:
    def __init__(self, params: List[np.ndarray], lr: float = 1e-2, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: List[np.ndarray]):
        """Update every parameter array in place."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_annealing_lr(base_lr: float, epoch: int, total_epochs: int, min_lr: float = 0.0) -> float:
    """Learning rate for a 0-based ``epoch`` out of ``total_epochs``."""
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * epoch / total_epochs))


class EarlyStopping:
    """Keeps a copy of the parameters with the lowest validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.best_state: Optional[List[np.ndarray]] = None
        self.wait = 0

    def update(self, epoch: int, loss: float, params: List[np.ndarray]) -> bool:
        """Record an epoch; returns True once patience is exhausted."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.best_state = [p.copy() for p in params]
            self.wait = 0
            return False
        self.wait += 1
        return self.wait > self.patience

    def restore(self, params: List[np.ndarray]):
        for p, best in zip(params, self.best_state):
            p[...] = best


class Trainable(Protocol):
    def parameters(self) -> List[np.ndarray]: ...

    def loss(self, batch: tuple) -> float: ...

    def loss_and_grads(self, batch: tuple) -> Tuple[float, List[np.ndarray]]: ...

    def project(self) -> None: ...


@dataclass
class TrainResult:
    history: List[dict]
    best_epoch: int
    best_val_loss: float
    initial_val_loss: float
    stopped_early: bool


def take_rows(data: tuple, idx: np.ndarray) -> tuple:
    return tuple(None if a is None else a[idx] for a in data)


def train_loop(model: Trainable, train_data: tuple, config: TrainConfig, val_data: Optional[tuple] = None,
               name: str = "model") -> TrainResult:
    """Minibatch Adam with cosine-annealed learning rate and early stopping.

    ``train_data`` / ``val_data`` are tuples of row-aligned arrays (``None``
    entries pass through). When ``val_data`` is omitted a random
    ``validation_fraction`` of the rows is held out. On return the model
    holds the parameters with the best validation loss, which includes the
    initial parameters, so validation loss never ends above its start.
    """
    n = len(train_data[0])
    if n == 0:
        raise ConfigurationError("Cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed)
    if val_data is None:
        if n < 2:
            raise ConfigurationError("Need at least two rows to carve out a validation set")
        perm = rng.permutation(n)
        n_val = min(n - 1, max(1, int(round(config.validation_fraction * n))))
        val_data = take_rows(train_data, perm[:n_val])
        train_data = take_rows(train_data, np.sort(perm[n_val:]))
        n = len(train_data[0])
    batch_size = config.batch_size or 32

    params = model.parameters()
    model.project()
    optimizer = Adam(params, lr=config.learning_rate)
    stopper = EarlyStopping(config.patience)

    initial_val = model.loss(val_data)
    if not math.isfinite(initial_val):
        raise NumericalError(f"{name}: non-finite validation loss at initialization")
    history = [{"epoch": 0, "learning_rate": config.learning_rate,
                "train_loss": model.loss(train_data), "val_loss": initial_val}]
    stopper.update(0, initial_val, params)
    stopped_early = False

    for epoch in range(1, config.max_epochs + 1):
        lr = cosine_annealing_lr(config.learning_rate, epoch - 1, config.max_epochs, config.min_learning_rate)
        optimizer.lr = lr
        order = rng.permutation(n)
        total = 0.0
        for batch_no, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            loss, grads = model.loss_and_grads(take_rows(train_data, idx))
            if not math.isfinite(loss):
                raise NumericalError(f"{name}: non-finite loss at epoch {epoch}, batch {batch_no}")
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise NumericalError(f"{name}: non-finite gradient at epoch {epoch}, batch {batch_no}")
            optimizer.step(grads)
            model.project()
            total += loss * len(idx)

        val_loss = model.loss(val_data)
        if not math.isfinite(val_loss):
            raise NumericalError(f"{name}: non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "learning_rate": lr, "train_loss": total / n, "val_loss": val_loss})
        if config.log_every and epoch % config.log_every == 0:
            print(f"DEBUG - {name} epoch {epoch}: train {total / n:.5f}, val {val_loss:.5f}, lr {lr:.2e}",
                  file=sys.stderr)
        if stopper.update(epoch, val_loss, params):
            stopped_early = True
            break

    stopper.restore(params)
    print(f"INFO - {name}: best val loss {stopper.best_loss:.5f} at epoch {stopper.best_epoch} "
          f"({'early stop' if stopped_early else 'completed'} after {len(history) - 1} epochs)", file=sys.stderr)
    return TrainResult(history, stopper.best_epoch, stopper.best_loss, initial_val, stopped_early)


class _SquaredErrorNet:
    """Mean squared error wrapper used by the self-check below."""

    def __init__(self, net: DenseNetwork):
        self.net = net

    def parameters(self):
        return self.net.parameters()

    def loss(self, batch):
        x, y = batch
        return float(np.mean((self.net.forward(x)[:, 0] - y) ** 2))

    def loss_and_grads(self, batch):
        x, y = batch
        out, trace = self.net.forward_trace(x)
        resid = out[:, 0] - y
        grads, _ = self.net.backward(trace, (2.0 * resid / len(y))[:, None])
        return float(np.mean(resid ** 2)), grads

    def project(self):
        pass


def main():
    """Run nn_core self-checks."""
    print("Running nn_core self-checks...\n")
    rng = np.random.default_rng(0)

    net = DenseNetwork([np.eye(2)], [np.zeros(2)], output_activations=[LINEAR, LINEAR])
    print("✓ identity layer" if np.allclose(net.forward([3.0, -2.0]), [3.0, -2.0]) else "✗ identity layer")

    sorted_vec = group_sort(np.array([[2.0, -1.0, 0.0, 5.0]]), 2)[0]
    print("✓ groupsort" if np.allclose(sorted_vec, [-1.0, 2.0, 0.0, 5.0]) else "✗ groupsort")

    x = rng.uniform(-1, 1, size=(200, 1))
    y = 2.0 * x[:, 0]
    model = _SquaredErrorNet(DenseNetwork.initialize([1, 32, 1], rng))
    train_loop(model, (x, y), TrainConfig(max_epochs=200, batch_size=32, patience=30, seed=0, log_every=0),
               val_data=(x, y), name="y=2c")
    mse = model.loss((x, y))
    print(f"{'✓' if mse < 1e-3 else '✗'} fit y=2c, mse {mse:.2e}")


if __name__ == "__main__":
    main()
