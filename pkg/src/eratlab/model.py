"""Small differentiable classifiers, their losses, SGD, and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

CHECKPOINT_MAGIC = "eratlab-checkpoint v1"


@dataclass
class Prediction:
    """Softmax probabilities for a batch; ``logits`` kept for stable log-probs."""

    probs: Tensor
    logits: Tensor | None = None

    @classmethod
    def from_probs(cls, probs) -> Prediction:
        return cls(T.as_tensor(np.atleast_2d(np.asarray(probs, dtype=np.float64))))

    def log_probs(self) -> Tensor:
        if self.logits is not None:
            return T.log_softmax(self.logits)
        return T.log(self.probs)

    def numpy(self) -> np.ndarray:
        return self.probs.data


class Model:
    """Base class: a list of parameter tensors and a ``forward`` to logits."""

    arch: str
    num_classes: int
    input_dim: int

    def __init__(self):
        self.params: list[Tensor] = []

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def descriptor(self) -> str:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def get_state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def set_state(self, arrays) -> None:
        arrays = list(arrays)
        if len(arrays) != len(self.params):
            raise ValueError(f"expected {len(self.params)} parameter arrays, got {len(arrays)}")
        for p, a in zip(self.params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.shape:
                raise ShapeError(f"parameter shape {p.shape} does not match {a.shape}")
            p.data = a.copy()

    def copy(self) -> Model:
        other = build_model(self.descriptor())
        other.set_state(self.get_state())
        return other

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class MLP(Model):
    """Fully connected relu network; ``widths = [d, h1, ..., K]``."""

    def __init__(self, widths, seed: int = 0):
        super().__init__()
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        self.widths = widths
        self.input_dim = widths[0]
        self.num_classes = widths[-1]
        self.arch = "mlp"
        rng = np.random.default_rng(seed)
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.params.append(_uniform(rng, fan_in, (fan_in, fan_out)))
            self.params.append(_uniform(rng, fan_in, (fan_out,)))

    def descriptor(self) -> str:
        return "mlp " + ",".join(str(w) for w in self.widths)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = T.add(T.matmul(h, w), b)
            if i < n_layers - 1:
                h = T.relu(h)
        return h


class TinyConv(Model):
    """Two 3x3 conv + relu layers and a linear head over flattened square images."""

    def __init__(self, side: int, num_classes: int, channels=(4, 8), kernel: int = 3, seed: int = 0):
        super().__init__()
        self.side = int(side)
        self.channels = tuple(int(c) for c in channels)
        self.kernel = int(kernel)
        self.num_classes = int(num_classes)
        self.input_dim = self.side * self.side
        self.arch = "tinyconv"
        out_side = self.side - 2 * (self.kernel - 1)
        if out_side < 1:
            raise ValueError(f"image side {side} too small for two {kernel}x{kernel} convs")
        rng = np.random.default_rng(seed)
        c0, c1, c2 = 1, *self.channels
        k = self.kernel
        self.params = [
            _uniform(rng, c0 * k * k, (c1, c0, k, k)),
            _uniform(rng, c0 * k * k, (c1,)),
            _uniform(rng, c1 * k * k, (c2, c1, k, k)),
            _uniform(rng, c1 * k * k, (c2,)),
        ]
        flat = c2 * out_side * out_side
        self.params += [_uniform(rng, flat, (flat, self.num_classes)), _uniform(rng, flat, (self.num_classes,))]

    def descriptor(self) -> str:
        return f"tinyconv side={self.side} classes={self.num_classes} channels={self.channels[0]},{self.channels[1]} kernel={self.kernel}"

    def forward(self, x: Tensor) -> Tensor:
        w1, b1, w2, b2, w3, b3 = self.params
        n = x.shape[0]
        h = T.reshape(x, (n, 1, self.side, self.side))
        h = T.relu(T.conv2d(h, w1, b1))
        h = T.relu(T.conv2d(h, w2, b2))
        h = T.reshape(h, (n, -1))
        return T.add(T.matmul(h, w3), b3)


def build_model(descriptor: str, seed: int = 0) -> Model:
    """Construct a model from its one-line architecture descriptor."""
    kind, _, rest = descriptor.strip().partition(" ")
    if kind == "mlp":
        return MLP([int(w) for w in rest.split(",")], seed=seed)
    if kind == "tinyconv":
        fields = dict(item.split("=") for item in rest.split())
        return TinyConv(
            side=int(fields["side"]),
            num_classes=int(fields["classes"]),
            channels=tuple(int(c) for c in fields.get("channels", "4,8").split(",")),
            kernel=int(fields.get("kernel", 3)),
            seed=seed,
        )
    raise ValueError(f"unknown architecture descriptor {descriptor!r}")


def predict(model: Model, x) -> Prediction:
    """Softmax prediction for a batch ``x`` of shape (N, d).

    Pass a Tensor with ``requires_grad`` to differentiate w.r.t. the input.
    Parameters are tracked unless the call runs under ``frozen(model)``.
    """
    xt = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if xt.data.ndim != 2 or xt.shape[1] != model.input_dim:
        raise ShapeError(f"predict: input shape {xt.shape} does not match model input dim {model.input_dim}")
    logits = model.forward(xt)
    return Prediction(T.softmax(logits), logits)


def predict_proba(model: Model, x) -> np.ndarray:
    """Gradient-free probabilities as a plain array."""
    with frozen(model):
        return predict(model, x).probs.data


class frozen:
    """Context manager that switches off parameter tracking (the frozen-theta branch)."""

    def __init__(self, model: Model):
        self.model = model
        self._flags: list[bool] = []

    def __enter__(self):
        self._flags = [p.requires_grad for p in self.model.params]
        for p in self.model.params:
            p.requires_grad = False
        return self.model

    def __exit__(self, *exc):
        for p, flag in zip(self.model.params, self._flags):
            p.requires_grad = flag
        return False


def check_one_hot(y: np.ndarray, k: int | None = None) -> np.ndarray:
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if k is not None and y.shape[1] != k:
        raise ShapeError(f"label shape {y.shape} does not match {k} classes")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")
    return y


def one_hot(classes, num_classes: int) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64)
    out = np.zeros((classes.size, num_classes))
    out[np.arange(classes.size), classes] = 1.0
    return out


def cross_entropy(pred: Prediction, y, reduction: str = "mean") -> Tensor:
    """-log p[true class]; ``reduction`` is "mean" (scalar) or "none" (per row)."""
    y = check_one_hot(y, pred.probs.shape[-1])
    if pred.logits is not None:
        per_row = T.neg(T.tsum(T.mul(pred.log_probs(), y), axis=-1))
    else:
        # pick the true-class probability first so zero entries elsewhere never hit log
        per_row = T.neg(T.log(T.tsum(T.mul(pred.probs, y), axis=-1)))
    return T.mean(per_row) if reduction == "mean" else per_row


def squared_distance(p, q) -> Tensor:
    """Sum over the last axis of (p - q)^2; one value per row for batches."""
    p, q = T.as_tensor(p), T.as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"squared_distance: shapes {p.shape} and {q.shape} differ")
    return T.tsum(T.square(T.sub(p, q)), axis=-1)


class SGD:
    """Heavy-ball SGD with coupled weight decay (g += wd * theta)."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self._velocity[i] = self.momentum * self._velocity[i] + g
            p.data = p.data - self.lr * self._velocity[i]


# ---------------------------------------------------------------- checkpoints
#
# Text format, one token stream per line:
#   eratlab-checkpoint v1
#   arch <descriptor>
#   params <count>
#   param <index> <dim0>x<dim1>...
#   <float.hex values separated by spaces>
# Hex floats make the round trip bit-exact.


def save_checkpoint(model: Model, path) -> None:
    lines = [CHECKPOINT_MAGIC, f"arch {model.descriptor()}", f"params {len(model.params)}"]
    for i, p in enumerate(model.params):
        lines.append(f"param {i} {'x'.join(str(s) for s in p.shape)}")
        lines.append(" ".join(float(v).hex() for v in p.data.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an eratlab checkpoint")
    model = build_model(lines[1].removeprefix("arch "))
    count = int(lines[2].split()[1])
    arrays = []
    for i in range(count):
        header = lines[3 + 2 * i].split()
        shape = tuple(int(s) for s in header[2].split("x"))
        values = [float.fromhex(v) for v in lines[4 + 2 * i].split()]
        arrays.append(np.array(values, dtype=np.float64).reshape(shape))
    model.set_state(arrays)
    return model
