"""Mini-batch SGD with heavy-ball momentum and L2 weight decay.

The update is ``v(t+1) = -lr * grad + momentum * v(t)``, ``w(t+1) = w(t) + v(t+1)``.
Snapshots of weights and velocities are recorded on a configurable stride so
that PCA of the trajectory can run afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import io
from .data import Dataset, epoch_batches
from .nn import Network, accuracy, batch_loss, check_dims, loss_and_gradient

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "netspectra-checkpoint"


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule in epochs.

    ``constant``: ``lr``. ``geometric``: ``lr * decay**epoch``.
    ``piecewise``: ``points`` is a list of ``(epoch, lr)``; the rate of the
    last point whose epoch is ``<=`` the current one applies, ``lr`` before
    the first point.
    """

    kind: str = "constant"
    lr: float = 0.01
    decay: float = 1.0
    points: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if self.kind not in ("constant", "geometric", "piecewise"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")


def lr_at(schedule: Schedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if schedule.kind == "constant":
        return schedule.lr
    if schedule.kind == "geometric":
        return schedule.lr * schedule.decay ** epoch
    rate = schedule.lr
    for start, value in sorted(schedule.points):
        if epoch >= start:
            rate = value
    return rate


def effective_lr(lr: float, momentum: float, batch_size: int) -> float:
    """Mean-velocity learning rate ``lr / (S (1 - momentum))`` of momentum SGD."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    return lr / (batch_size * (1.0 - momentum))


@dataclass(frozen=True)
class TrainConfig:
    schedule: Schedule = field(default_factory=Schedule)
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    # int: record every that many update steps; "epoch": once per epoch; None: never
    record: int | str | None = None
    record_start_epoch: int = 0
    # None/"all", "last" or a layer index: parameters outside stay frozen
    trainable: str | int | None = None

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if isinstance(self.record, int) and self.record < 1:
            raise ValueError("record stride must be at least 1")
        if isinstance(self.record, str) and self.record != "epoch":
            raise ValueError(f"record must be a step stride, 'epoch' or None, not {self.record!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"]["points"] = [list(p) for p in self.schedule.points]
        return d


@dataclass
class Trajectory:
    """Recorded snapshots; ``times`` are update-step counts."""

    times: np.ndarray
    weights: np.ndarray  # (T, n)
    velocities: np.ndarray  # (T, n)
    dims: tuple[int, ...] = ()
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        if not (len(self.times) == len(self.weights) == len(self.velocities)):
            raise ValueError("times, weights and velocities differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("snapshot times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float


METRIC_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "test_acc")


def metrics_rows(metrics: Sequence[EpochMetrics]) -> list[tuple]:
    return [(m.epoch, m.lr, m.train_loss, m.train_acc, m.test_acc) for m in metrics]


# penalty(w) -> (value, gradient); velocity_transform(v) -> v
Penalty = Callable[[np.ndarray], tuple[float, np.ndarray]]
VelocityTransform = Callable[[np.ndarray], np.ndarray]


def train(
    net: Network,
    dataset: Dataset,
    config: TrainConfig,
    test: Dataset | None = None,
    *,
    penalty: Penalty | None = None,
    velocity_transform: VelocityTransform | None = None,
    on_epoch: Callable[[EpochMetrics, Network], None] | None = None,
) -> tuple[Network, Trajectory, list[EpochMetrics]]:
    """Run SGD and return ``(final net, trajectory, per-epoch metrics)``.

    ``penalty`` adds an extra loss term (its gradient joins the data
    gradient); ``velocity_transform`` post-processes every velocity before it
    is applied. Both are used by the forgetting experiments.
    """
    if dataset.dim != net.dims[0] or dataset.class_count != net.dims[-1]:
        raise ValueError(
            f"dataset ({dataset.dim} features, {dataset.class_count} classes) "
            f"does not fit network dims {net.dims}"
        )
    w = net.params.copy()
    v = np.zeros_like(w)
    mask = None
    if config.trainable not in (None, "all"):
        mask = np.zeros_like(w)
        mask[net.layout.scope_indices(config.trainable)] = 1.0

    times: list[int] = []
    snaps_w: list[np.ndarray] = []
    snaps_v: list[np.ndarray] = []

    def record(step: int):
        times.append(step)
        snaps_w.append(w.copy())
        snaps_v.append(v.copy())

    if config.record is not None and config.record_start_epoch == 0:
        record(0)

    metrics: list[EpochMetrics] = []
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(config.schedule, epoch)
        recording = config.record is not None and epoch >= config.record_start_epoch
        for batch in epoch_batches(dataset, config.batch_size, config.seed, epoch):
            loss, grad = loss_and_gradient(
                net, dataset.inputs[batch], dataset.labels[batch], config.weight_decay, w
            )
            if penalty is not None:
                extra, extra_grad = penalty(w)
                loss += extra
                grad = grad + extra_grad
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            if mask is not None:
                grad *= mask
            v = -lr * grad + config.momentum * v
            if velocity_transform is not None:
                v = velocity_transform(v)
            w += v
            step += 1
            if recording and isinstance(config.record, int) and step % config.record == 0:
                record(step)
        if recording and config.record == "epoch":
            record(step)
        if not np.all(np.isfinite(w)):
            raise DivergenceError(f"non-finite weights after epoch {epoch}")
        m = EpochMetrics(
            epoch=epoch,
            lr=lr,
            train_loss=batch_loss(net, dataset.inputs, dataset.labels, config.weight_decay, w),
            train_acc=accuracy(net, dataset.inputs, dataset.labels, w),
            test_acc=accuracy(net, test.inputs, test.labels, w) if test is not None else float("nan"),
        )
        if not np.isfinite(m.train_loss):
            raise DivergenceError(f"non-finite training loss after epoch {epoch}")
        metrics.append(m)
        log.debug("epoch %d lr %.3g loss %.5f acc %.4f test %.4f", epoch, lr, m.train_loss, m.train_acc, m.test_acc)
        if on_epoch is not None:
            on_epoch(m, net.with_params(w))

    n = len(w)
    trajectory = Trajectory(
        np.array(times, dtype=np.int64),
        np.array(snaps_w).reshape(-1, n),
        np.array(snaps_v).reshape(-1, n),
        net.dims,
        config.to_dict(),
    )
    return net.with_params(w), trajectory, metrics


def save_checkpoint(obj: Network | Trajectory, path: str | Path, *, seed: int | None = None, step: int | None = None) -> None:
    """Header line plus little-endian float64 payload; lossless."""
    if isinstance(obj, Network):
        header = {
            "format": CHECKPOINT_FORMAT,
            "kind": "network",
            "dims": list(obj.dims),
            "layout": obj.layout.to_json(),
            "seed": seed,
            "step": step,
        }
        io.write_binary(path, header, obj.params)
    elif isinstance(obj, Trajectory):
        header = {
            "format": CHECKPOINT_FORMAT,
            "kind": "trajectory",
            "dims": list(obj.dims),
            "times": obj.times.tolist(),
            "n": int(obj.weights.shape[1]) if obj.weights.size else 0,
            "config": obj.config,
            "seed": seed,
            "step": step,
        }
        io.write_binary(path, header, np.concatenate([obj.weights.ravel(), obj.velocities.ravel()]))
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def load_checkpoint(path: str | Path, expected_dims: Sequence[int] | None = None) -> Network | Trajectory:
    header, payload = io.read_binary(path, CHECKPOINT_FORMAT)
    dims = tuple(header.get("dims", ()))
    if expected_dims is not None and dims != check_dims(expected_dims):
        raise ValueError(f"{path}: checkpoint dims {dims} do not match requested {tuple(expected_dims)}")
    kind = header.get("kind")
    if kind == "network":
        net = Network(dims, payload)
        if net.layout.to_json() != header.get("layout"):
            raise io.CorruptFileError(f"{path}: stored layout disagrees with dims {dims}")
        return net
    if kind == "trajectory":
        t = len(header["times"])
        n = header["n"]
        if payload.size != 2 * t * n:
            raise io.CorruptFileError(f"{path}: payload size does not match {t} snapshots of {n}")
        half = t * n
        return Trajectory(
            header["times"],
            payload[:half].reshape(t, n),
            payload[half:].reshape(t, n),
            dims,
            header.get("config", {}),
        )
    raise io.CorruptFileError(f"{path}: unknown checkpoint kind {kind!r}")
