"""Cross-basis overlaps, eigenvector statistics and loss-landscape probes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import erf

from .hessian import EigenBasis, QuadraticModel, quadratic_loss_predict
from .nn import Layout, Network, accuracy, batch_loss


class IncompleteBasisWarning(RuntimeWarning):
    pass


def _rows(basis) -> np.ndarray:
    if isinstance(basis, EigenBasis):
        return basis.vectors
    return np.atleast_2d(np.asarray(basis, dtype=np.float64))


@dataclass
class OverlapMatrix:
    entries: np.ndarray  # (rows, cols)
    row_tag: str = "rows"
    col_tag: str = "cols"


def overlap(rows, cols, normalize_cols: bool = True, row_tag: str = "rows", col_tag: str = "cols") -> OverlapMatrix:
    """``|a_i . b_j| / ||b_j||`` for row vectors ``a_i`` and column vectors ``b_j``.

    Both arguments are stacks of vectors (one per row) or eigenbases.
    """
    a = _rows(rows)
    b = _rows(cols)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"vector lengths differ: {a.shape[1]} vs {b.shape[1]}")
    entries = np.abs(a @ b.T)
    if normalize_cols:
        norms = np.linalg.norm(b, axis=1)
        if np.any(norms == 0):
            raise ValueError("cannot normalize a zero-norm column vector")
        entries = entries / norms
    return OverlapMatrix(entries, row_tag, col_tag)


def weight_product(basis, w: np.ndarray) -> np.ndarray:
    """Signed ``h_i . w / ||w||`` in basis order."""
    v = _rows(basis)
    w = np.asarray(w, dtype=np.float64)
    if v.shape[1] != w.shape[0]:
        raise ValueError(f"basis vectors have length {v.shape[1]}, weights {w.shape[0]}")
    return v @ w / np.linalg.norm(w)


def _scope(net: Network, scope) -> np.ndarray:
    if isinstance(scope, np.ndarray):
        return scope
    return net.layout.scope_indices(scope)


@dataclass
class AdditionCurve:
    counts: np.ndarray
    accuracy: np.ndarray
    loss: np.ndarray
    ordering: str
    complete: bool

    def first_reaching(self, target: float) -> int | None:
        """Smallest evaluated count whose accuracy is at least ``target``."""
        hit = np.flatnonzero(self.accuracy >= target)
        return int(self.counts[hit[0]]) if len(hit) else None


def add_eigvec_curve(
    net: Network,
    basis: EigenBasis,
    inputs: np.ndarray,
    labels: np.ndarray,
    ordering: str = "magnitude",
    scope=None,
    counts: Sequence[int] | None = None,
    weight_decay: float = 0.0,
) -> AdditionCurve:
    """Accuracy and loss after rebuilding the scoped weights from leading eigenvectors.

    For each prefix length ``i`` the scoped block is replaced by
    ``sum_{j<=i} (w . h_j) h_j``; parameters outside ``scope`` keep their
    trained values.
    """
    idx = _scope(net, scope)
    ordered = basis.reordered(ordering)
    v = ordered.vectors
    if v.shape[1] != len(idx):
        raise ValueError(f"basis vectors have length {v.shape[1]}, scope has {len(idx)} parameters")
    complete = len(ordered) == len(idx)
    if not complete:
        warnings.warn(
            f"basis has {len(ordered)} of {len(idx)} vectors; curve truncated", IncompleteBasisWarning, stacklevel=2
        )
    counts = np.arange(len(ordered) + 1) if counts is None else np.asarray(sorted(set(int(c) for c in counts)))
    if counts.min() < 0 or counts.max() > len(ordered):
        raise ValueError("counts must lie within [0, basis size]")
    theta = v @ net.params[idx]
    params = net.params.copy()
    block = np.zeros(len(idx))
    done = 0
    acc, loss = [], []
    for c in counts:
        block += v[done:c].T @ theta[done:c]
        done = c
        params[idx] = block
        acc.append(accuracy(net, inputs, labels, params))
        loss.append(batch_loss(net, inputs, labels, weight_decay, params))
    return AdditionCurve(counts, np.array(acc), np.array(loss), ordering, complete)


def default_slice_grid(center: float, half_width: float = 1.0, points: int = 41) -> np.ndarray:
    """``points`` values over ``center +/- half_width`` plus 0 and the centre itself."""
    grid = center + np.linspace(-half_width, half_width, points)
    return np.unique(np.concatenate([grid, [0.0, center]]))


@dataclass
class LossSlice:
    alphas: np.ndarray
    loss: np.ndarray
    accuracy: np.ndarray
    quadratic: np.ndarray
    center: float


def loss_slice(
    net: Network,
    direction: np.ndarray,
    inputs: np.ndarray,
    labels: np.ndarray,
    alphas: np.ndarray | None = None,
    curvature: float | None = None,
    scope=None,
    weight_decay: float = 0.0,
) -> LossSlice:
    """Loss along ``w + (alpha - w.h) h``: the ``h`` component is set to ``alpha``.

    With ``curvature`` the quadratic model centred on the trained weights is
    overlaid; otherwise the overlay column is NaN.
    """
    idx = _scope(net, scope)
    h = np.asarray(direction, dtype=np.float64)
    if h.shape != (len(idx),):
        raise ValueError(f"direction has length {h.shape}, scope has {len(idx)} parameters")
    if abs(np.linalg.norm(h) - 1.0) > 1e-8:
        raise ValueError("direction must be unit norm")
    w_block = net.params[idx]
    center = float(w_block @ h)
    alphas = default_slice_grid(center) if alphas is None else np.asarray(alphas, dtype=np.float64)
    base_loss = batch_loss(net, inputs, labels, weight_decay)
    model = None
    if curvature is not None:
        model = QuadraticModel(base_loss, w_block, EigenBasis([curvature], h[None, :], "slice"))
    params = net.params.copy()
    losses, accs, quad = [], [], []
    for a in alphas:
        shifted = w_block + (a - center) * h
        params[idx] = shifted
        losses.append(batch_loss(net, inputs, labels, weight_decay, params))
        accs.append(accuracy(net, inputs, labels, params))
        quad.append(quadratic_loss_predict(model, shifted) if model is not None else np.nan)
    return LossSlice(alphas, np.array(losses), np.array(accs), np.array(quad), center)


def slice_curvature(
    net: Network,
    direction: np.ndarray,
    inputs: np.ndarray,
    labels: np.ndarray,
    step: float = 1e-3,
    scope=None,
    weight_decay: float = 0.0,
) -> float:
    """Central second difference of the loss along a unit direction."""
    idx = _scope(net, scope)
    h = np.asarray(direction, dtype=np.float64)
    params = net.params.copy()
    vals = []
    for d in (-step, 0.0, step):
        params[idx] = net.params[idx] + d * h
        vals.append(batch_loss(net, inputs, labels, weight_decay, params))
    return (vals[0] - 2 * vals[1] + vals[2]) / step**2


@dataclass
class ScalingTable:
    alphas: np.ndarray
    loss: np.ndarray  # total
    data_loss: np.ndarray
    penalty: np.ndarray


def loss_scaling(
    net: Network,
    alphas: Sequence[float],
    inputs: np.ndarray,
    labels: np.ndarray,
    scope=None,
    weight_decay: float = 0.0,
) -> ScalingTable:
    """Loss after multiplying the scoped parameters by each ``alpha``."""
    idx = _scope(net, scope)
    alphas = np.asarray(alphas, dtype=np.float64)
    if np.any(alphas <= 0):
        raise ValueError("scaling factors must be positive")
    params = net.params.copy()
    data, pen = [], []
    for a in alphas:
        params[idx] = a * net.params[idx]
        data.append(batch_loss(net, inputs, labels, 0.0, params))
        pen.append(weight_decay * float(params @ params))
    data, pen = np.array(data), np.array(pen)
    return ScalingTable(alphas, data + pen, data, pen)


def layer_concentration(vector: np.ndarray, layout: Layout) -> np.ndarray:
    """Squared norm of the vector inside each layer (weights and bias together)."""
    h = np.asarray(vector, dtype=np.float64)
    if h.shape != (layout.size,):
        raise ValueError(f"vector length {h.shape} does not match layout size {layout.size}")
    return np.array([float(np.sum(h[layout.layer_slice(l)] ** 2)) for l in range(layout.n_layers)])


def parameter_fractions(layout: Layout) -> np.ndarray:
    """Expected concentration of a fully random vector: parameter-count shares."""
    sizes = np.array([layout.layer_slice(l).stop - layout.layer_slice(l).start for l in range(layout.n_layers)])
    return sizes / sizes.sum()


def ipr(vector: np.ndarray) -> float:
    """Inverse participation ratio ``sum h^4``."""
    h = np.asarray(vector, dtype=np.float64)
    return float(np.sum(h**4))


def porter_thomas_pvalue(vector: np.ndarray) -> float:
    """Two-sided KS p-value of the entries against ``N(0, 1/n)``."""
    h = np.asarray(vector, dtype=np.float64)
    n = len(h)
    if n < 30:
        raise ValueError("need at least 30 entries")
    return float(stats.kstest(h, "norm", args=(0.0, 1.0 / np.sqrt(n))).pvalue)


def porter_thomas_curve(vector: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sorted entries, their Gaussian CDF ``(1 + erf(v sqrt(n/2))) / 2`` and ``i/n``."""
    v = np.sort(np.asarray(vector, dtype=np.float64))
    n = len(v)
    return v, (1.0 + erf(v * np.sqrt(n / 2.0))) / 2.0, np.arange(1, n + 1) / n


def embed_layer_vector(vector: np.ndarray, layer: int, layout: Layout) -> np.ndarray:
    """Zero-pad a per-layer vector (weights then bias) to full parameter length."""
    s = layout.layer_slice(layer)
    h = np.asarray(vector, dtype=np.float64)
    if h.shape != (s.stop - s.start,):
        raise ValueError(f"layer {layer} holds {s.stop - s.start} parameters, got {h.shape}")
    out = np.zeros(layout.size)
    out[s] = h
    return out


def net_vs_layer_overlap(net_basis, layer_basis, layer: int, layout: Layout) -> OverlapMatrix:
    """``|h_i . h~_j|`` between full-network and embedded layer eigenvectors."""
    embedded = np.array([embed_layer_vector(v, layer, layout) for v in _rows(layer_basis)])
    return overlap(net_basis, embedded, normalize_cols=False, row_tag="network", col_tag=f"layer{layer}")


def spectral_density(values, width: float = 1.0, points: int = 2001, pad: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE of ``values`` on a uniform grid over ``[min - pad*w, max + pad*w]``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("need at least one value")
    grid = np.linspace(v.min() - pad * width, v.max() + pad * width, points)
    density = np.zeros(points)
    # accumulate in chunks to bound memory for long spectra
    for chunk in np.array_split(v, max(1, v.size // 512)):
        density += np.exp(-0.5 * ((grid[:, None] - chunk[None, :]) / width) ** 2).sum(axis=1)
    density /= v.size * width * np.sqrt(2 * np.pi)
    return grid, density
