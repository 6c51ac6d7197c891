"""Dense ReLU/softmax multilayer perceptron on a flat float64 parameter vector.

Parameters live in one contiguous vector. Layer ``l`` owns a weight block of
shape ``(dims[l+1], dims[l])`` (row-major) followed by a bias block of length
``dims[l+1]``. Everything else in the package indexes into that vector through
:class:`Layout`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

LOG_FLOOR = 1e-300


class SaturationWarning(RuntimeWarning):
    """A predicted probability underflowed and the log was clamped."""


@dataclass(frozen=True)
class Block:
    layer: int
    kind: str  # "weight" | "bias"
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


@dataclass(frozen=True)
class Layout:
    """Ordered, disjoint blocks covering ``[0, size)``."""

    dims: tuple[int, ...]
    blocks: tuple[Block, ...]

    @classmethod
    def from_dims(cls, dims: Sequence[int]) -> "Layout":
        dims = check_dims(dims)
        blocks = []
        offset = 0
        for layer, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            blocks.append(Block(layer, "weight", offset, (n_out, n_in)))
            offset += n_out * n_in
            blocks.append(Block(layer, "bias", offset, (n_out,)))
            offset += n_out
        return cls(dims, tuple(blocks))

    @property
    def size(self) -> int:
        last = self.blocks[-1]
        return last.offset + last.size

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def block(self, layer: int, kind: str) -> Block:
        for b in self.blocks:
            if b.layer == layer and b.kind == kind:
                return b
        raise KeyError((layer, kind))

    def layer_slice(self, layer: int) -> slice:
        """Weight and bias of one layer; they are adjacent by construction."""
        w = self.block(layer, "weight")
        b = self.block(layer, "bias")
        return slice(w.offset, b.offset + b.size)

    def scope_indices(self, scope: str | int | None) -> np.ndarray:
        """Flat indices selected by ``scope``.

        ``None`` or ``"all"`` selects everything, an int (negative allowed)
        selects one layer, ``"last"`` the output layer.
        """
        if scope is None or scope == "all":
            return np.arange(self.size)
        if scope == "last":
            scope = self.n_layers - 1
        layer = int(scope)
        if layer < 0:
            layer += self.n_layers
        if not 0 <= layer < self.n_layers:
            raise ValueError(f"layer {scope} out of range for {self.n_layers} layers")
        s = self.layer_slice(layer)
        return np.arange(s.start, s.stop)

    def to_json(self) -> list[dict]:
        return [
            {"layer": b.layer, "kind": b.kind, "offset": b.offset, "shape": list(b.shape)}
            for b in self.blocks
        ]


def check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError(f"need at least input and output widths, got {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"layer widths must be positive, got {dims}")
    return dims


@dataclass
class Network:
    """Layer widths plus a flat parameter vector.

    Hidden layers use ReLU, the output layer softmax. ``params`` is owned by
    the network; use :meth:`with_params` to get a sibling with other values.
    """

    dims: tuple[int, ...]
    params: np.ndarray
    layout: Layout = field(init=False, repr=False)

    def __post_init__(self):
        self.dims = check_dims(self.dims)
        self.layout = Layout.from_dims(self.dims)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.layout.size,):
            raise ValueError(
                f"parameter vector has shape {self.params.shape}, "
                f"layout for dims {self.dims} needs ({self.layout.size},)"
            )

    @property
    def n_params(self) -> int:
        return self.layout.size

    def with_params(self, params: np.ndarray) -> "Network":
        return Network(self.dims, np.array(params, dtype=np.float64, copy=True))

    def copy(self) -> "Network":
        return self.with_params(self.params)

    def layers(self, params: np.ndarray | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(W, b)`` views into ``params`` (default: own parameters)."""
        p = self.params if params is None else params
        for layer in range(self.layout.n_layers):
            w = self.layout.block(layer, "weight")
            b = self.layout.block(layer, "bias")
            yield p[w.slice].reshape(w.shape), p[b.slice]

    def weight(self, layer: int) -> np.ndarray:
        b = self.layout.block(layer, "weight")
        return self.params[b.slice].reshape(b.shape)

    def bias(self, layer: int) -> np.ndarray:
        return self.params[self.layout.block(layer, "bias").slice]


def glorot_init(dims: Sequence[int], mode: str = "uniform", seed: int = 0) -> np.ndarray:
    """Glorot/Xavier weights, zero biases. Returns the flat parameter vector."""
    layout = Layout.from_dims(dims)
    rng = np.random.default_rng(seed)
    params = np.zeros(layout.size)
    for b in layout.blocks:
        if b.kind != "weight":
            continue
        fan_out, fan_in = b.shape
        if mode == "uniform":
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            values = rng.uniform(-bound, bound, size=b.shape)
        elif mode == "normal":
            values = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=b.shape)
        else:
            raise ValueError(f"unknown init mode {mode!r}")
        params[b.slice] = values.ravel()
    return params


def init_network(dims: Sequence[int], mode: str = "uniform", seed: int = 0) -> Network:
    return Network(tuple(dims), glorot_init(dims, mode, seed))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(net: Network, inputs: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.dims[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match network input {net.dims[0]}")
    return x, single


def _forward_cache(net: Network, x: np.ndarray, params: np.ndarray | None = None):
    """Pre-activations and activations per layer; ``acts[0]`` is the input."""
    acts = [x]
    pre = []
    layers = list(net.layers(params))
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w.T + b
        pre.append(z)
        if i < len(layers) - 1:
            acts.append(np.maximum(z, 0.0))
    return pre, acts, layers


def logits(net: Network, inputs: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
    x, single = _as_batch(net, inputs)
    pre, _, _ = _forward_cache(net, x, params)
    return pre[-1][0] if single else pre[-1]


def forward(net: Network, inputs: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
    """Class probabilities for one input vector or a batch (rows)."""
    return softmax(logits(net, inputs, params))


def predict(net: Network, inputs: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
    return np.argmax(logits(net, inputs, params), axis=-1)


def accuracy(net: Network, inputs: np.ndarray, labels: np.ndarray, params: np.ndarray | None = None) -> float:
    """Top-1 accuracy."""
    return float(np.mean(predict(net, inputs, params) == np.asarray(labels)))


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n_rows:
        raise ValueError(f"{n_rows} inputs but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def _nll(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = probs[np.arange(len(y)), y]
    clamped = p < LOG_FLOOR
    if clamped.any():
        warnings.warn(
            f"{int(clamped.sum())} label probabilities below {LOG_FLOOR:g}; log clamped",
            SaturationWarning,
            stacklevel=3,
        )
        p = np.maximum(p, LOG_FLOOR)
    return -np.log(p)


def sample_loss(probabilities: np.ndarray, label: int) -> float:
    """Cross-entropy ``-log p[label]`` with the log floored at ``LOG_FLOOR``."""
    p = np.asarray(probabilities, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise ValueError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(_nll(p[None, :], np.array([label]))[0])


def _per_sample_nll_from_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # log-sum-exp form is exact where softmax would underflow
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return lse - z[np.arange(len(y)), y]


def batch_loss(
    net: Network,
    inputs: np.ndarray,
    labels: np.ndarray,
    weight_decay: float = 0.0,
    params: np.ndarray | None = None,
) -> float:
    """Mean cross-entropy over the batch plus ``weight_decay * ||w||^2``."""
    x, _ = _as_batch(net, inputs)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    y = _check_labels(labels, x.shape[0], net.dims[-1])
    p = net.params if params is None else params
    z = logits(net, x, p)
    loss = float(np.mean(_per_sample_nll_from_logits(z, y)))
    if weight_decay:
        loss += weight_decay * float(p @ p)
    return loss


def gradient(
    net: Network,
    inputs: np.ndarray,
    labels: np.ndarray,
    weight_decay: float = 0.0,
    params: np.ndarray | None = None,
) -> np.ndarray:
    """Exact gradient of :func:`batch_loss` as a flat vector."""
    return loss_and_gradient(net, inputs, labels, weight_decay, params)[1]


def loss_and_gradient(
    net: Network,
    inputs: np.ndarray,
    labels: np.ndarray,
    weight_decay: float = 0.0,
    params: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    x, _ = _as_batch(net, inputs)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    y = _check_labels(labels, x.shape[0], net.dims[-1])
    p = net.params if params is None else np.asarray(params, dtype=np.float64)
    pre, acts, layers = _forward_cache(net, x, p)
    n = x.shape[0]
    z = pre[-1]
    loss = float(np.mean(_per_sample_nll_from_logits(z, y)))
    delta = softmax(z)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grad = np.empty_like(p)
    for layer in range(len(layers) - 1, -1, -1):
        wb = net.layout.block(layer, "weight")
        bb = net.layout.block(layer, "bias")
        grad[wb.slice] = (delta.T @ acts[layer]).ravel()
        grad[bb.slice] = delta.sum(axis=0)
        if layer > 0:
            # ReLU derivative at exactly zero is taken as zero
            delta = (delta @ layers[layer][0]) * (pre[layer - 1] > 0)
    if weight_decay:
        loss += weight_decay * float(p @ p)
        grad += 2.0 * weight_decay * p
    return loss, grad
