"""Local training: mini-batch SGD on one device.

Two model families share one flat-parameter interface:

* :class:`MLP` - fully connected ReLU network with softmax cross-entropy,
  the classifier trained in the experiments.
* :class:`Quadratic` - ``F_k(w) = 0.5 * ||w - c_k||^2`` with one center per
  device. Its iterates have closed forms, which makes it the reference
  model for checking the divergence bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import DivergenceError, HyperParams, ParamVector, RngSpec, as_param_vector
from .data import DevicePartition, LabeledDataset


class Batch(NamedTuple):
    device_id: int
    sample_indices: np.ndarray | None


@dataclass(frozen=True)
class MLP:
    layer_widths: tuple[int, ...] = (784, 64, 10)
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise ValueError(f"invalid layer widths {self.layer_widths}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))

    family = "mlp"

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    def _slices(self):
        off = 0
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            yield (off, off + fan_in * fan_out, off + fan_in * fan_out + fan_out, fan_in, fan_out)
            off += fan_in * fan_out + fan_out

    def unpack(self, w: ParamVector):
        return [(w[a:b].reshape(fi, fo), w[b:c]) for a, b, c, fi, fo in self._slices()]

    def init_params(self, rng: RngSpec) -> ParamVector:
        """Glorot-uniform weights, zero biases."""
        gen = rng.generator()
        w = np.zeros(self.n_params)
        for a, b, _, fan_in, fan_out in self._slices():
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w[a:b] = gen.uniform(-limit, limit, b - a)
        return w

    def logits(self, w: ParamVector, x: np.ndarray) -> np.ndarray:
        layers = self.unpack(w)
        h = x
        for W, bias in layers[:-1]:
            h = np.maximum(h @ W + bias, 0.0)
        W, bias = layers[-1]
        return h @ W + bias

    def loss_and_grad(self, w: ParamVector, x: np.ndarray, y: np.ndarray) -> tuple[float, ParamVector]:
        layers = self.unpack(w)
        acts = [x]
        h = x
        for W, bias in layers[:-1]:
            h = np.maximum(h @ W + bias, 0.0)
            acts.append(h)
        W, bias = layers[-1]
        z = h @ W + bias
        z = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1))
        n = x.shape[0]
        rows = np.arange(n)
        loss = float(np.mean(log_norm - z[rows, y]))

        delta = np.exp(z - log_norm[:, None])
        delta[rows, y] -= 1.0
        delta /= n
        grad = np.empty_like(w)
        slices = list(self._slices())
        for i in range(len(layers) - 1, -1, -1):
            a, b, c, fan_in, fan_out = slices[i]
            grad[a:b] = (acts[i].T @ delta).ravel()
            grad[b:c] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ layers[i][0].T) * (acts[i] > 0)
        return loss, grad


@dataclass(frozen=True)
class Quadratic:
    """Per-device quadratic losses; ``centers`` has one row per device."""

    centers: np.ndarray = field(default_factory=lambda: np.zeros((1, 1)))

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        if not np.all(np.isfinite(c)):
            raise ValueError("quadratic centers must be finite")
        object.__setattr__(self, "centers", c)

    family = "quadratic"

    def __eq__(self, other):
        return isinstance(other, Quadratic) and np.array_equal(self.centers, other.centers)

    __hash__ = None

    @property
    def n_params(self) -> int:
        return self.centers.shape[1]

    @property
    def n_devices(self) -> int:
        return self.centers.shape[0]

    def init_params(self, rng: RngSpec | None = None) -> ParamVector:
        return np.zeros(self.n_params)

    def loss_and_grad(self, w: ParamVector, device_id: int) -> tuple[float, ParamVector]:
        u = w - self.centers[device_id]
        with np.errstate(over="ignore", invalid="ignore"):
            return 0.5 * float(u @ u), u

    def closed_form_local(self, w_init: ParamVector, device_id: int, lr: float, steps: int) -> ParamVector:
        """Iterate after ``steps`` exact gradient steps: ``c + (1-lr)^steps (w0 - c)``."""
        c = self.centers[device_id]
        return c + (1.0 - lr) ** steps * (np.asarray(w_init, dtype=np.float64) - c)


ModelSpec = MLP | Quadratic


def loss_and_grad(model: ModelSpec, w, batch: Batch, data: LabeledDataset | None = None) -> tuple[float, ParamVector]:
    """Mean loss over ``batch`` and its gradient with respect to ``w``."""
    w = as_param_vector(w)
    if w.shape[0] != model.n_params:
        raise ValueError(f"parameter vector has {w.shape[0]} entries, model expects {model.n_params}")
    if isinstance(model, Quadratic):
        loss, grad = model.loss_and_grad(w, batch.device_id)
    else:
        if data is None:
            raise ValueError("MLP loss needs a dataset")
        idx = batch.sample_indices
        loss, grad = model.loss_and_grad(w, data.rows(idx), data.labels[idx])
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss on device {batch.device_id}")
    return loss, grad


def local_update(model: ModelSpec, w_init, part: DevicePartition | int, hp: HyperParams,
                 rng: RngSpec | np.random.Generator, data: LabeledDataset | None = None) -> ParamVector:
    """Run ``hp.local_epochs`` SGD steps from ``w_init`` on one device.

    Each step draws a fresh batch of ``hp.batch_size`` distinct samples from
    the device partition (the quadratic family ignores data).
    """
    w = np.array(as_param_vector(w_init), dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise DivergenceError("initial parameters are not finite")
    lr = hp.learning_rate
    if isinstance(model, Quadratic):
        device_id = part if isinstance(part, (int, np.integer)) else part.device_id
        batch = Batch(int(device_id), None)
        for _ in range(hp.local_epochs):
            _, g = loss_and_grad(model, w, batch)
            w -= lr * g
    else:
        gen = rng.generator() if isinstance(rng, RngSpec) else rng
        pool = part.sample_indices
        b = min(hp.batch_size, len(pool))
        for _ in range(hp.local_epochs):
            idx = pool[gen.choice(len(pool), size=b, replace=False)]
            _, g = loss_and_grad(model, w, Batch(part.device_id, idx), data)
            w -= lr * g
    if not np.all(np.isfinite(w)):
        raise DivergenceError("local training produced non-finite parameters")
    return w


@dataclass(frozen=True)
class Evaluation:
    accuracy: float | None
    mean_loss: float


def evaluate(model: ModelSpec, w, test_set: LabeledDataset | None = None, chunk: int = 5000) -> Evaluation:
    """Test accuracy (argmax, ties to the lowest class) and mean loss.

    For the quadratic family accuracy is ``None`` and the loss is the
    device-averaged objective.
    """
    w = as_param_vector(w)
    if isinstance(model, Quadratic):
        diff = model.centers - w
        return Evaluation(None, float(0.5 * np.mean(np.sum(diff * diff, axis=1))))
    if test_set is None or len(test_set) == 0:
        raise ValueError("evaluation needs a non-empty test set")
    correct = 0
    total_loss = 0.0
    for start in range(0, len(test_set), chunk):
        idx = np.arange(start, min(start + chunk, len(test_set)))
        z = model.logits(w, test_set.rows(idx))
        y = test_set.labels[idx]
        correct += int(np.sum(np.argmax(z, axis=1) == y))
        z = z - z.max(axis=1, keepdims=True)
        total_loss += float(np.sum(np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(idx)), y]))
    n = len(test_set)
    return Evaluation(correct / n, total_loss / n)
