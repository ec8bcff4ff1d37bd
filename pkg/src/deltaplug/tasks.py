"""Synthetic sequence-classification tasks and a plain SGD trainer."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .modtree import named_parameters

CLS = 1
SYMBOL_A = 4
SYMBOL_B = 5
TASKS = ("parity", "majority", "first-token")


@dataclass(frozen=True)
class TaskSpec:
    """A binary task over ``[CLS] x_1 .. x_L`` with ``x_i`` in {A, B}.

    * ``parity``      -- number of A symbols is odd
    * ``majority``    -- more A than B symbols (``length`` is odd)
    * ``first-token`` -- ``x_1`` is A
    """

    task: str = "parity"
    length: int = 3
    seed: int = 0
    n_train: int = 256
    n_test: int = 256

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.length < 1:
            raise ConfigError("length must be >= 1")


@dataclass
class Dataset:
    ids: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def label_of(task, symbols):
    n_a = int((symbols == SYMBOL_A).sum())
    if task == "parity":
        return n_a % 2
    if task == "majority":
        return int(n_a > len(symbols) - n_a)
    return int(symbols[0] == SYMBOL_A)


def encode(symbols):
    return np.concatenate([[CLS], symbols]).astype(np.int64)


def make_splits(spec):
    """Deterministic ``(train, test)`` pair for a task spec."""
    rng = np.random.default_rng([spec.seed, TASKS.index(spec.task)])

    def draw(n):
        sym = rng.choice([SYMBOL_A, SYMBOL_B], size=(n, spec.length))
        ids = np.stack([encode(s) for s in sym]) if n else np.zeros((0, spec.length + 1), np.int64)
        labels = np.array([label_of(spec.task, s) for s in sym], dtype=np.int64)
        return Dataset(ids, labels)

    return draw(spec.n_train), draw(spec.n_test)


def predict(model, ids, batch=256):
    out = []
    with T.no_grad():
        for i in range(0, len(ids), batch):
            out.append(model(ids[i:i + batch]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model, data):
    if len(data) == 0:
        return float("nan")
    return float((predict(model, data.ids) == data.labels).mean())


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    wall_time: float = 0.0


def trainable_parameters(model):
    return [t for _, t in named_parameters(model) if t.requires_grad]


def sgd_train(model, data, steps, lr, seed=0, batch_size=32):
    """Minibatch SGD on cross-entropy over the model's trainable parameters."""
    params = trainable_parameters(model)
    if not params:
        raise ContractError("model has no trainable parameters")
    rng = np.random.default_rng(seed)
    result = TrainResult()
    start = time.perf_counter()
    # Overflow is reported through the finite-loss check below, not numpy warnings.
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(steps):
            idx = rng.integers(0, len(data), size=min(batch_size, len(data)))
            loss = T.cross_entropy(model(data.ids[idx]), data.labels[idx])
            for p in params:
                p.grad = None
            T.backward(loss)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"loss diverged to {value} at step {len(result.losses)}")
            result.losses.append(value)
            for p in params:
                if p.grad is not None:
                    p.data -= lr * p.grad
    result.wall_time = time.perf_counter() - start
    return result
