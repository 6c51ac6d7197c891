"""Forgetting mitigation: curvature/singular-value penalties and velocity projection.

A :class:`ConservationBasis` holds unit directions in the trainable parameter
block with nonnegative strengths and the post-task-1 anchor. The same basis
drives both the penalty ``lambda_cf sum_i s_i ((w - anchor) . d_i)^2`` and the
velocity projection ``v - gamma sum_i (s_i / s_lead) (v . d_i) d_i``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, TaskSplit, split_tasks, synth_blobs
from .hessian import DENSE_CAP, dense_hessian, eigh, hvp_operator, lanczos_topk
from .nn import Network, accuracy, glorot_init, init_network, logits
from .rmt import bulk_analysis, singular_matrix_vector, svd
from .trainer import DivergenceError, Schedule, TrainConfig, train

log = logging.getLogger(__name__)

METHODS = ("none", "hess-loss", "sv-loss", "hess-grad", "sv-grad")


class BudgetClippedWarning(RuntimeWarning):
    pass


@dataclass
class ConservationBasis:
    directions: np.ndarray  # (k, len(indices)) unit rows
    strengths: np.ndarray  # (k,) >= 0
    anchor: np.ndarray  # full parameter vector after task 1
    indices: np.ndarray  # flat parameter indices the directions live on
    method: str = "hessian"
    # directions sharing a group are scaled against the group's leading strength
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        self.strengths = np.asarray(self.strengths, dtype=np.float64)
        self.anchor = np.asarray(self.anchor, dtype=np.float64)
        self.indices = np.asarray(self.indices)
        if len(self.strengths) != len(self.directions):
            raise ValueError("one strength per direction")
        if self.directions.shape[1] != len(self.indices):
            raise ValueError("direction length must match the index set")
        if np.any(self.strengths < 0):
            raise ValueError("strengths must be nonnegative")
        if self.groups is None:
            self.groups = np.zeros(len(self.strengths), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.strengths)

    def leading_ratios(self) -> np.ndarray:
        """``s_i / s_lead`` where ``s_lead`` is the largest strength of the group."""
        ratios = np.empty_like(self.strengths)
        for g in np.unique(self.groups):
            sel = self.groups == g
            lead = self.strengths[sel].max()
            if lead <= 0:
                raise ValueError(f"leading strength of group {g} is zero")
            ratios[sel] = self.strengths[sel] / lead
        return ratios


def cf_penalty(w: np.ndarray, basis: ConservationBasis, strength: float) -> tuple[float, np.ndarray]:
    """Penalty value and its gradient with respect to the full parameter vector."""
    if strength < 0:
        raise ValueError("penalty constant must be nonnegative")
    offsets = basis.directions @ (w[basis.indices] - basis.anchor[basis.indices])
    value = strength * float(np.sum(basis.strengths * offsets**2))
    grad = np.zeros_like(w)
    grad[basis.indices] = 2.0 * strength * (basis.directions.T @ (basis.strengths * offsets))
    return value, grad


def project_velocity(v: np.ndarray, basis: ConservationBasis, gamma: float) -> np.ndarray:
    """Remove (a fraction of) the velocity along conserved directions."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    ratios = basis.leading_ratios()
    out = np.array(v, dtype=np.float64, copy=True)
    block = out[basis.indices]
    coef = basis.directions @ block
    out[basis.indices] = block - gamma * (basis.directions.T @ (ratios * coef))
    return out


def _resolve_budget(budget: int | float, available: int, label: str) -> int:
    if isinstance(budget, float) and 0 < budget < 1:
        # fractional budgets round up
        count = math.ceil(budget * available)
    else:
        count = int(budget)
    if count > available:
        warnings.warn(f"{label}: budget {count} exceeds rank {available}; clipped", BudgetClippedWarning, stacklevel=3)
        count = available
    return max(count, 0)


def _hessian_pairs(net: Network, inputs, labels, indices: np.ndarray, count: int, seed: int):
    size = len(indices)
    if count == 0:
        return np.zeros(0), np.zeros((0, size))
    if size <= DENSE_CAP and (count >= size - 1 or size <= 2000):
        basis = eigh(dense_hessian(net, inputs, labels, indices=indices).matrix, ordering="magnitude")
        return basis.values[:count], basis.vectors[:count]
    basis = lanczos_topk(hvp_operator(net, inputs, labels, indices=indices), size, count, seed=seed)
    return basis.values, basis.vectors


def build_basis(
    net: Network,
    method: str,
    inputs: np.ndarray,
    labels: np.ndarray,
    budget: int | float | str = 5,
    scope="last",
    bias_fraction: float = 0.2,
    seed: int = 0,
) -> ConservationBasis:
    """Conservation basis from task-1 data at the current (post-task-1) weights.

    ``hessian``: top-``budget`` eigenpairs of the scoped Hessian by magnitude
    (``budget`` may be a fraction of the scope size), strengths ``|h_i|``.
    ``singular``: per weight block the normalized flattened singular matrices
    of the ``budget`` largest singular values (``budget="outliers"`` takes the
    ones above the Marchenko-Pastur edge), strengths ``nu_i``; each bias block
    contributes its top ``bias_fraction`` Hessian eigenpairs.
    """
    indices = net.layout.scope_indices(scope)
    if method == "hessian":
        count = _resolve_budget(budget, len(indices), "hessian")
        values, vectors = _hessian_pairs(net, inputs, labels, indices, count, seed)
        return ConservationBasis(vectors, np.abs(values), net.params.copy(), indices, "hessian")
    if method != "singular":
        raise ValueError(f"unknown basis method {method!r}")

    position = {int(p): i for i, p in enumerate(indices)}
    dirs, strengths, groups = [], [], []
    group = 0
    for block in net.layout.blocks:
        start = block.offset
        if start not in position:
            continue
        local = np.arange(position[start], position[start] + block.size)
        if block.kind == "weight":
            w = net.params[block.slice].reshape(block.shape)
            bundle = svd(w)
            if budget == "outliers":
                count = bulk_analysis(bundle, w).n_out
            else:
                count = _resolve_budget(budget, len(bundle.singular_values), f"layer {block.layer} weights")
            for i in range(count):
                vec = singular_matrix_vector(bundle, i)
                d = np.zeros(len(indices))
                d[local] = vec / np.linalg.norm(vec)
                dirs.append(d)
                strengths.append(bundle.singular_values[i])
                groups.append(group)
        else:
            count = _resolve_budget(bias_fraction, block.size, f"layer {block.layer} bias")
            values, vectors = _hessian_pairs(net, inputs, labels, indices[local], count, seed)
            for h, vec in zip(values, vectors):
                d = np.zeros(len(indices))
                d[local] = vec
                dirs.append(d)
                strengths.append(abs(h))
                groups.append(group)
        group += 1
    return ConservationBasis(
        np.array(dirs).reshape(-1, len(indices)), np.array(strengths), net.params.copy(), indices, "singular",
        np.array(groups, dtype=np.int64),
    )


def pca_basis(pca, count: int, anchor: np.ndarray, indices: np.ndarray) -> ConservationBasis:
    """Principal-component form: strengths ``1 / sigma_i^2`` from the PCA variances.

    Directions are reordered so that strengths descend; components with zero
    variance are rejected.
    """
    var = np.asarray(pca.variances[:count], dtype=np.float64)
    if np.any(var <= 0):
        raise ValueError("PCA strengths need strictly positive variances")
    order = np.argsort(var, kind="stable")
    return ConservationBasis(pca.components[:count][order], 1.0 / var[order], anchor, indices, "pca")


def within_task_accuracy(net: Network, data: Dataset, classes, params=None) -> float:
    """Accuracy when the prediction is restricted to the task's own classes."""
    classes = np.asarray(classes)
    z = logits(net, data.inputs, params)[:, classes]
    return float(np.mean(classes[np.argmax(z, axis=1)] == data.labels))


@dataclass
class TwoTaskResult:
    method: str
    strength: float
    acc_task1: np.ndarray
    acc_task2: np.ndarray
    within_task1: np.ndarray
    within_task2: np.ndarray
    selected_epoch: int
    net: Network | None = None
    rows: list = field(default_factory=list)

    @property
    def selected(self) -> tuple[float, float]:
        return float(self.acc_task1[self.selected_epoch]), float(self.acc_task2[self.selected_epoch])


RESULT_COLUMNS = ("epoch", "acc_task1", "acc_task2", "sum", "within_task1", "within_task2", "method", "strength")


def two_task_run(
    net: Network,
    split: TaskSplit,
    method: str,
    strength: float,
    epochs: int,
    lr: float,
    basis: ConservationBasis | None = None,
    scope="last",
    batch_size: int = 32,
    seed: int = 0,
    eval_split: TaskSplit | None = None,
) -> TwoTaskResult:
    """Train ``net`` on task 2 with the chosen forgetting countermeasure.

    ``strength`` is ``lambda_cf`` for the loss methods and ``gamma`` for the
    gradient methods; ignored for ``none``. Accuracies are measured on
    ``eval_split`` (default: the training split) after every epoch, and the
    epoch with the largest accuracy sum is selected.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if method != "none" and basis is None:
        raise ValueError(f"method {method!r} needs a conservation basis")
    penalty = transform = None
    if method.endswith("-loss"):
        # gradient descent on s (x . d)^2 alone oscillates without bound once lr * 2 s > 2
        stiffness = lr * 2.0 * strength * float(basis.strengths.max(initial=0.0))
        if stiffness > 2.0:
            raise DivergenceError(
                f"lr * 2 * lambda_cf * max strength = {stiffness:.3g} exceeds 2; "
                "the penalty makes gradient descent unstable, lower lambda_cf or the learning rate"
            )
        penalty = lambda w: cf_penalty(w, basis, strength)
    elif method.endswith("-grad"):
        transform = lambda v: project_velocity(v, basis, strength)
    config = TrainConfig(
        schedule=Schedule("constant", lr), batch_size=batch_size, epochs=epochs, seed=seed, trainable=scope,
    )
    ev = eval_split or split
    classes_a, classes_b = ev.partition
    acc1, acc2, in1, in2 = [], [], [], []

    def measure(_, current: Network):
        acc1.append(accuracy(current, ev.task_a.inputs, ev.task_a.labels))
        acc2.append(accuracy(current, ev.task_b.inputs, ev.task_b.labels))
        in1.append(within_task_accuracy(current, ev.task_a, classes_a))
        in2.append(within_task_accuracy(current, ev.task_b, classes_b))

    final, _, _ = train(net, split.task_b, config, penalty=penalty, velocity_transform=transform, on_epoch=measure)
    acc1, acc2 = np.array(acc1), np.array(acc2)
    selected = int(np.argmax(acc1 + acc2)) if epochs else 0
    rows = [
        (e, acc1[e], acc2[e], acc1[e] + acc2[e], in1[e], in2[e], method, strength) for e in range(len(acc1))
    ]
    return TwoTaskResult(method, strength, acc1, acc2, np.array(in1), np.array(in2), selected, final, rows)


@dataclass
class ForgettingSetup:
    """Desk-scale two-task protocol on offset Gaussian blobs."""

    classes: int = 10
    dim: int = 20
    per_class: int = 200
    separation: float = 6.0
    offset: float = 10.0
    hidden: tuple = (16,)
    task_a: tuple = (0, 1, 2, 3, 4)
    task_b: tuple = (5, 6, 7, 8, 9)
    pretrain_epochs: int = 30
    task1_epochs: int = 10
    lr: float = 0.01
    lr_fraction: float = 0.3
    epochs: int = 50
    lambda_cf: float = 1000.0
    gamma: float = 1.0
    hessian_budget: int | float | str = 0.2
    singular_budget: int | float | str = 5
    bias_fraction: float = 0.2
    scope: object = "last"
    batch_size: int = 32
    seed: int = 0


def forgetting_experiment(setup: ForgettingSetup, methods=METHODS) -> dict[str, TwoTaskResult]:
    """Pre-train on all classes, re-initialize the scoped block, train it on task 1,
    then run task 2 under each method from the same post-task-1 weights.

    Half of the generated samples train, the other half evaluate. The offset
    shifts every input so that the hidden features share a large common
    component; without it the task-2 head barely disturbs task 1.
    """
    full = synth_blobs(setup.classes, setup.dim, setup.per_class, setup.separation, seed=setup.seed + 1)
    full = Dataset(full.inputs + setup.offset, full.labels, setup.classes)
    half = len(full) // 2
    train_set, test_set = full.subset(np.arange(half)), full.subset(np.arange(half, len(full)))
    dims = [setup.dim, *setup.hidden, setup.classes]
    net = init_network(dims, "uniform", setup.seed)
    base = TrainConfig(Schedule("constant", setup.lr), batch_size=setup.batch_size, seed=setup.seed)
    net, _, _ = train(net, train_set, replace(base, epochs=setup.pretrain_epochs))
    partition = [list(setup.task_a), list(setup.task_b)]
    split, eval_split = split_tasks(train_set, partition), split_tasks(test_set, partition)

    scope_idx = net.layout.scope_indices(setup.scope)
    params = net.params.copy()
    params[scope_idx] = glorot_init(dims, "uniform", setup.seed + 5)[scope_idx]
    net = net.with_params(params)
    net, _, _ = train(
        net, split.task_a, replace(base, epochs=setup.task1_epochs, seed=setup.seed + 1, trainable=setup.scope)
    )
    bases = {}
    if any(m.startswith("hess") for m in methods):
        bases["hess"] = build_basis(
            net, "hessian", split.task_a.inputs, split.task_a.labels, setup.hessian_budget, setup.scope, seed=setup.seed
        )
    if any(m.startswith("sv") for m in methods):
        bases["sv"] = build_basis(
            net, "singular", split.task_a.inputs, split.task_a.labels, setup.singular_budget, setup.scope,
            setup.bias_fraction, setup.seed,
        )
    results = {}
    for method in methods:
        basis = bases.get(method.split("-")[0])
        strength = setup.lambda_cf if method.endswith("-loss") else setup.gamma if method.endswith("-grad") else 0.0
        results[method] = two_task_run(
            net, split, method, strength, setup.epochs, setup.lr_fraction * setup.lr, basis, setup.scope,
            setup.batch_size, setup.seed, eval_split,
        )
    return results
