"""Hessian-vector products, eigensolvers and the quadratic drift model.

``hvp`` differentiates the backward pass along a direction (Pearlmutter's
R-operator), so it is exact up to rounding. ReLU has zero second derivative
away from the kink, so no extra curvature terms arise from the activations.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg

from . import io
from .nn import Network, _as_batch, _check_labels, _forward_cache, softmax

log = logging.getLogger(__name__)

EIGENBASIS_FORMAT = "netspectra-eigenbasis"
DENSE_CAP = 6000


class ConvergenceWarning(RuntimeWarning):
    pass


class DegenerateModeWarning(RuntimeWarning):
    pass


def hvp(
    net: Network,
    inputs: np.ndarray,
    labels: np.ndarray,
    vector: np.ndarray,
    weight_decay: float = 0.0,
    params: np.ndarray | None = None,
) -> np.ndarray:
    """``H @ vector`` for the mean cross-entropy (plus ``weight_decay * ||w||^2``)."""
    x, _ = _as_batch(net, inputs)
    y = _check_labels(labels, x.shape[0], net.dims[-1])
    v = np.asarray(vector, dtype=np.float64)
    p = net.params if params is None else np.asarray(params, dtype=np.float64)
    if v.shape != p.shape:
        raise ValueError(f"direction has shape {v.shape}, parameters {p.shape}")
    n = x.shape[0]
    pre, acts, layers = _forward_cache(net, x, p)
    dlayers = list(net.layers(v))
    n_layers = len(layers)
    gates = [(z > 0).astype(np.float64) for z in pre[:-1]]

    # forward R-pass: directional derivatives of pre-activations and activations
    r_acts = [np.zeros_like(x)]
    r_pre = []
    for i, ((w, _), (dw, db)) in enumerate(zip(layers, dlayers)):
        rz = r_acts[-1] @ w.T + acts[i] @ dw.T + db
        r_pre.append(rz)
        if i < n_layers - 1:
            r_acts.append(rz * gates[i])

    probs = softmax(pre[-1])
    rz = r_pre[-1]
    r_probs = probs * (rz - np.sum(probs * rz, axis=1, keepdims=True))
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    r_delta = r_probs / n

    out = np.empty_like(p)
    for layer in range(n_layers - 1, -1, -1):
        wb = net.layout.block(layer, "weight")
        bb = net.layout.block(layer, "bias")
        out[wb.slice] = (r_delta.T @ acts[layer] + delta.T @ r_acts[layer]).ravel()
        out[bb.slice] = r_delta.sum(axis=0)
        if layer > 0:
            w, _ = layers[layer]
            dw, _ = dlayers[layer]
            gate = gates[layer - 1]
            r_delta = (r_delta @ w + delta @ dw) * gate
            delta = (delta @ w) * gate
    if weight_decay:
        out += 2.0 * weight_decay * v
    return out


def hvp_operator(
    net: Network,
    inputs: np.ndarray,
    labels: np.ndarray,
    weight_decay: float = 0.0,
    indices: np.ndarray | None = None,
) -> Callable[[np.ndarray], np.ndarray]:
    """Closure ``v -> H v``, optionally restricted to a parameter subset.

    With ``indices`` the operator acts on vectors of that length and returns
    the corresponding diagonal block of the Hessian applied to them.
    """
    if indices is None:
        return lambda v: hvp(net, inputs, labels, v, weight_decay)
    indices = np.asarray(indices)

    def op(v):
        full = np.zeros(net.n_params)
        full[indices] = v
        return hvp(net, inputs, labels, full, weight_decay)[indices]

    return op


@dataclass
class DenseHessian:
    matrix: np.ndarray
    max_asymmetry: float


def dense_hessian(
    net: Network,
    inputs: np.ndarray,
    labels: np.ndarray,
    weight_decay: float = 0.0,
    cap: int = DENSE_CAP,
    indices: np.ndarray | None = None,
) -> DenseHessian:
    """Assemble ``H`` row by row from HVPs of the standard basis, then symmetrize."""
    size = net.n_params if indices is None else len(indices)
    if size > cap:
        raise ValueError(
            f"{size} parameters exceed the dense cap of {cap}; use lanczos_topk for the leading eigenpairs"
        )
    op = hvp_operator(net, inputs, labels, weight_decay, indices)
    h = np.empty((size, size))
    e = np.zeros(size)
    for i in range(size):
        e[i] = 1.0
        h[i] = op(e)
        e[i] = 0.0
    asym = float(np.max(np.abs(h - h.T))) if size else 0.0
    return DenseHessian((h + h.T) / 2.0, asym)


@dataclass
class EigenBasis:
    """Eigenvalues with eigenvectors as rows, sorted descending by ``ordering``."""

    values: np.ndarray
    vectors: np.ndarray  # (k, n)
    source: str = "unknown"
    ordering: str = "algebraic"
    residuals: np.ndarray | None = None
    converged: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.values) != self.vectors.shape[0]:
            raise ValueError("need one eigenvector row per eigenvalue")
        if self.ordering not in ("algebraic", "magnitude"):
            raise ValueError(f"unknown ordering {self.ordering!r}")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def reordered(self, ordering: str) -> "EigenBasis":
        key = -np.abs(self.values) if ordering == "magnitude" else -self.values
        order = np.argsort(key, kind="stable")
        res = None if self.residuals is None else self.residuals[order]
        return EigenBasis(self.values[order], self.vectors[order], self.source, ordering, res, self.converged, dict(self.meta))

    def top(self, k: int) -> "EigenBasis":
        res = None if self.residuals is None else self.residuals[:k]
        return EigenBasis(self.values[:k], self.vectors[:k], self.source, self.ordering, res, self.converged, dict(self.meta))


def eigh(matrix: np.ndarray, ordering: str = "algebraic", source: str = "hessian-dense") -> EigenBasis:
    """Full symmetric eigendecomposition, largest first."""
    a = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    values, vectors = np.linalg.eigh(a)
    basis = EigenBasis(values[::-1], vectors[:, ::-1].T, source, "algebraic")
    return basis.reordered(ordering) if ordering != "algebraic" else basis


def lanczos_topk(
    matvec: Callable[[np.ndarray], np.ndarray],
    n: int,
    k: int,
    max_iters: int | None = None,
    seed: int = 0,
    tol: float = 1e-10,
    check_every: int = 10,
) -> EigenBasis:
    """Leading ``k`` eigenpairs by magnitude via Lanczos with full reorthogonalization.

    Convergence is declared when every wanted Ritz pair has residual
    ``||A x - theta x|| <= tol * max(1, |theta_max|)``. On running out of
    iterations the best available pairs are returned with ``converged=False``.
    """
    if not 0 < k < n:
        raise ValueError(f"need 0 < k < n, got k={k}, n={n}")
    max_iters = n if max_iters is None else min(max_iters, n)
    rng = np.random.default_rng(seed)
    q = rng.normal(size=n)
    q /= np.linalg.norm(q)
    basis = np.zeros((max_iters + 1, n))
    basis[0] = q
    alphas: list[float] = []
    betas: list[float] = []
    converged = False
    theta = s = None
    m = 0
    for j in range(max_iters):
        w = matvec(basis[j])
        alpha = float(basis[j] @ w)
        alphas.append(alpha)
        w = w - alpha * basis[j] - (betas[-1] * basis[j - 1] if j > 0 else 0.0)
        # two passes of classical Gram-Schmidt keep the Krylov basis orthonormal
        for _ in range(2):
            w -= basis[: j + 1].T @ (basis[: j + 1] @ w)
        beta = float(np.linalg.norm(w))
        m = j + 1
        invariant = beta < 1e-12 * max(1.0, abs(alpha))
        if m >= k and (m % check_every == 0 or invariant or m == max_iters):
            theta, s = scipy.linalg.eigh_tridiagonal(np.array(alphas), np.array(betas[: m - 1]))
            order = np.argsort(-np.abs(theta), kind="stable")[:k]
            scale = max(1.0, float(np.max(np.abs(theta))))
            ritz_res = beta * np.abs(s[-1, order])
            if invariant or np.all(ritz_res <= tol * scale):
                converged = True
                break
        if invariant:
            break
        betas.append(beta)
        basis[j + 1] = w / beta
    if theta is None or len(theta) != m:
        theta, s = scipy.linalg.eigh_tridiagonal(np.array(alphas), np.array(betas[: m - 1]))
    order = np.argsort(-np.abs(theta), kind="stable")[:k]
    if len(order) < k:
        converged = False
    vectors = (basis[:m].T @ s[:, order]).T
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    values = theta[order]
    residuals = np.array([np.linalg.norm(matvec(v) - h * v) for v, h in zip(vectors, values)])
    if not converged:
        warnings.warn(f"Lanczos stopped after {m} iterations before all {k} pairs converged", ConvergenceWarning, stacklevel=2)
    return EigenBasis(values, vectors, "hessian-lanczos", "magnitude", residuals, converged, {"iterations": m})


def save_eigenbasis(basis: EigenBasis, path: str | Path) -> None:
    header = {
        "format": EIGENBASIS_FORMAT,
        "n": basis.dim,
        "k": len(basis),
        "ordering": basis.ordering,
        "source": basis.source,
        "converged": basis.converged,
        "meta": basis.meta,
    }
    io.write_binary(path, header, np.concatenate([basis.values, basis.vectors.ravel()]))


def load_eigenbasis(path: str | Path) -> EigenBasis:
    header, payload = io.read_binary(path, EIGENBASIS_FORMAT)
    n, k = header["n"], header["k"]
    if payload.size != k + k * n:
        raise io.CorruptFileError(f"{path}: payload does not hold {k} pairs of length {n}")
    return EigenBasis(
        payload[:k], payload[k:].reshape(k, n), header["source"], header["ordering"],
        converged=header.get("converged", True), meta=header.get("meta", {}),
    )


# --- quadratic potential model ------------------------------------------------


@dataclass
class QuadraticModel:
    """``L(w) ~ loss_min + (w - mu)^T (H / 2) (w - mu)`` with ``H`` given by its eigenbasis."""

    loss_min: float
    mu: np.ndarray
    basis: EigenBasis
    lr: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 1

    def hessian(self) -> np.ndarray:
        v = self.basis.vectors
        return (v.T * self.basis.values) @ v


def quadratic_loss_predict(model: QuadraticModel, w: np.ndarray) -> float:
    offsets = model.basis.vectors @ (np.asarray(w, dtype=np.float64) - model.mu)
    return float(model.loss_min + 0.5 * np.sum(model.basis.values * offsets**2))


def mean_update(w, mu, hessian, lr: float, batch_size: int, weight_decay: float):
    """Average SGD step of the quadratic model: ``-(lr/S)(H + 2 lambda) w + lr H mu``.

    ``hessian`` may be a matrix, a scalar or an :class:`EigenBasis`. The
    1/S factor multiplies only the first term, as in the model's printed form.
    """
    w = np.asarray(w, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if isinstance(hessian, EigenBasis):
        v = hessian.vectors
        apply = lambda x: v.T @ (hessian.values * (v @ x))
    elif np.ndim(hessian) == 0:
        apply = lambda x: float(hessian) * x
    else:
        h = np.asarray(hessian, dtype=np.float64)
        apply = lambda x: h @ x
    return -(lr / batch_size) * (apply(w) + 2.0 * weight_decay * w) + lr * apply(mu)


DECAY_EXPONENTS = ("printed", "consistent")


def decay_rate(curvature: float, lr: float, weight_decay: float, exponent: str = "printed") -> float:
    """Exponential rate of one eigen-coordinate.

    ``printed`` uses ``lr (h + lambda)`` as in the closed-form solution;
    ``consistent`` uses ``lr (h + 2 lambda)``, matching the variance formula
    and the gradient of ``lambda ||w||^2``.
    """
    if exponent == "printed":
        return lr * (curvature + weight_decay)
    if exponent == "consistent":
        return lr * (curvature + 2.0 * weight_decay)
    raise ValueError(f"exponent must be one of {DECAY_EXPONENTS}")


def decay_target(mu_hat: float, curvature: float, weight_decay: float) -> float:
    """Shifted minimum ``mu / (1 + 2 lambda / h)`` (equals ``h mu / (h + 2 lambda)``)."""
    denom = curvature + 2.0 * weight_decay
    if denom == 0:
        return 0.0
    return curvature * mu_hat / denom


def exp_decay_coordinate(
    w0: float, mu_hat: float, curvature: float, lr: float, weight_decay: float, t,
    exponent: str = "printed",
):
    """Closed-form eigen-coordinate ``(w0 - b) exp(-rate t) + b``.

    A flat direction without weight decay has no dynamics; ``w0`` is returned
    with a :class:`DegenerateModeWarning`.
    """
    t = np.asarray(t, dtype=np.float64)
    if curvature == 0 and weight_decay == 0:
        warnings.warn("zero curvature and no weight decay: coordinate is constant", DegenerateModeWarning, stacklevel=2)
        return np.full_like(t, w0) if t.ndim else float(w0)
    b = decay_target(mu_hat, curvature, weight_decay)
    out = (w0 - b) * np.exp(-decay_rate(curvature, lr, weight_decay, exponent) * t) + b
    return out if out.ndim else float(out)


def decay_variance(w0: float, mu_hat: float, curvature: float, lr: float, weight_decay: float, steps: int) -> float:
    """Closed-form variance of the decaying coordinate over ``t = 0..steps``.

    Uses rate ``lr (h + 2 lambda)`` and the 1/T normalization of the
    derivation (T = ``steps``, over T + 1 samples), solved with geometric sums.
    """
    rate = lr * (curvature + 2.0 * weight_decay)
    if rate <= 0:
        raise ValueError(f"decay rate lr*(h + 2*lambda) must be positive, got {rate}")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    t_count = float(steps)
    b = decay_target(mu_hat, curvature, weight_decay)
    amp2 = (w0 - b) ** 2
    # 1 - exp(-x) via expm1 keeps precision for small rates
    s2 = -math.expm1(-2 * rate * (steps + 1)) / -math.expm1(-2 * rate)
    s1 = -math.expm1(-rate * (steps + 1)) / -math.expm1(-rate)
    return amp2 / t_count * (s2 - s1**2 / t_count)


def drift_variance_combination(coefficients, variances) -> float:
    """Variance of a unit direction ``sum d_i h_i``: ``sum d_i^2 sigma_i^2``."""
    d = np.asarray(coefficients, dtype=np.float64)
    s = np.asarray(variances, dtype=np.float64)
    if d.shape != s.shape:
        raise ValueError("coefficients and variances differ in length")
    if abs(float(d @ d) - 1.0) > 1e-8:
        raise ValueError(f"coefficients must have unit norm, got sum of squares {float(d @ d)}")
    return float(np.sum(d**2 * s))


def simulate_gd_coordinate(
    w0: float, mu_hat: float, curvature: float, lr: float, weight_decay: float, steps: int
) -> np.ndarray:
    """Deterministic gradient descent on one eigen-coordinate of the quadratic model.

    Loss ``h/2 (w - mu)^2 + lambda w^2``; returns ``w(0..steps)``.
    """
    out = np.empty(steps + 1)
    w = float(w0)
    out[0] = w
    for t in range(1, steps + 1):
        w = w - lr * (curvature * (w - mu_hat) + 2.0 * weight_decay * w)
        out[t] = w
    return out


def matched_lr(curvature: float, lr: float, weight_decay: float, exponent: str = "consistent") -> float:
    """Continuous-time rate whose exponential reproduces the discrete GD contraction.

    Discrete GD contracts by ``1 - lr (h + 2 lambda)`` per step; the returned
    rate ``r`` satisfies ``exp(-r * c) = 1 - lr (h + 2 lambda)`` where ``c`` is
    the curvature constant of ``exponent``.
    """
    factor = 1.0 - lr * (curvature + 2.0 * weight_decay)
    if not 0.0 < factor < 1.0:
        raise ValueError("step size outside the monotone-contraction regime")
    const = decay_rate(curvature, 1.0, weight_decay, exponent)
    return -math.log(factor) / const


def select_decay_exponent(
    curvatures, lr: float, weight_decay: float, steps: int, w0: float = 1.0, mu_hat: float = 0.5
) -> tuple[str, dict[str, float]]:
    """Integrate GD on each curvature and report which exponent tracks it best.

    Returns the winning exponent name and the max absolute deviation of each
    candidate from the simulated trajectories.
    """
    t = np.arange(steps + 1)
    errors = {}
    for name in DECAY_EXPONENTS:
        worst = 0.0
        for h in np.atleast_1d(curvatures):
            sim = simulate_gd_coordinate(w0, mu_hat, float(h), lr, weight_decay, steps)
            closed = exp_decay_coordinate(w0, mu_hat, float(h), lr, weight_decay, t, name)
            worst = max(worst, float(np.max(np.abs(sim - closed))))
        errors[name] = worst
    return min(errors, key=errors.get), errors
