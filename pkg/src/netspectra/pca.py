"""PCA of weight/velocity trajectories and drift-mode statistics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .hessian import EigenBasis


class DegenerateFitWarning(RuntimeWarning):
    pass


@dataclass
class PcaResult:
    variances: np.ndarray  # descending, >= 0
    components: np.ndarray  # (m, n) orthonormal rows
    mean: np.ndarray
    source: str = "weights"
    rank: int = 0  # number of numerically nonzero variances

    def __len__(self) -> int:
        return len(self.variances)


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive."""
    if components.size == 0:
        return components
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def covariance_matrix(snapshots: np.ndarray) -> np.ndarray:
    """``<w_i w_j> - <w_i><w_j>`` with time averages (1/T normalization)."""
    x = np.asarray(snapshots, dtype=np.float64)
    centred = x - x.mean(axis=0)
    return centred.T @ centred / len(x)


def covariance(snapshots: np.ndarray, source: str = "weights", method: str = "auto", rtol: float = 1e-12) -> PcaResult:
    """Principal components of a ``(T, n)`` stack of snapshots.

    ``method="gram"`` diagonalizes the ``T x T`` Gram matrix of the centred
    snapshots, which is what ``auto`` picks when ``T < n``; ``dense``
    diagonalizes the ``n x n`` covariance. At most ``min(T - 1, n)`` variances
    can be nonzero; the returned basis is completed with an orthonormal
    complement so that variances and components line up.
    """
    x = np.asarray(snapshots, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need at least two snapshots")
    t, n = x.shape
    mean = x.mean(axis=0)
    centred = x - mean
    if method == "auto":
        method = "gram" if t < n else "dense"
    if method == "dense":
        values, vectors = np.linalg.eigh(centred.T @ centred / t)
        values = np.clip(values[::-1], 0.0, None)
        comps = vectors[:, ::-1].T
        tol = rtol * max(values[0], 0.0) if len(values) else 0.0
        rank = int(np.sum(values > tol)) if values[0] > 0 else 0
        return PcaResult(values, _fix_signs(comps), mean, source, rank)
    if method != "gram":
        raise ValueError(f"unknown method {method!r}")
    gram = centred @ centred.T / t
    values, u = np.linalg.eigh(gram)
    values = np.clip(values[::-1], 0.0, None)
    u = u[:, ::-1]
    m = min(t, n)
    values = values[:m]
    top = values[0] if len(values) else 0.0
    rank = int(np.sum(values > rtol * top)) if top > 0 else 0
    comps = np.zeros((m, n))
    if rank:
        comps[:rank] = (centred.T @ u[:, :rank] / np.sqrt(t * values[:rank])).T
        # one re-orthonormalization pass removes rounding drift
        q, r = np.linalg.qr(comps[:rank].T)
        comps[:rank] = (q * np.sign(np.diag(r))).T
    if rank < m:
        comps[rank:] = _complement(comps[:rank], m - rank, n)
        values[rank:] = 0.0
    return PcaResult(values, _fix_signs(comps), mean, source, rank)


def _complement(rows: np.ndarray, count: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(0)
    extra = rng.normal(size=(n, count))
    if len(rows):
        extra -= rows.T @ (rows @ extra)
        extra -= rows.T @ (rows @ extra)
    q, _ = np.linalg.qr(extra)
    return q.T


def trajectory_pca(trajectory, use: str = "weights", method: str = "auto") -> PcaResult:
    data = trajectory.weights if use == "weights" else trajectory.velocities
    return covariance(data, source=use, method=method)


def project(snapshots: np.ndarray, component: np.ndarray) -> np.ndarray:
    """``theta(t) = w(t) . p`` for each snapshot."""
    x = np.asarray(snapshots, dtype=np.float64)
    p = np.asarray(component, dtype=np.float64)
    if x.shape[-1] != p.shape[0]:
        raise ValueError(f"component length {p.shape[0]} does not match snapshots {x.shape[-1]}")
    return x @ p


@dataclass
class DriftFit:
    slope: float
    intercept: float
    t0: float
    residual_rms: float
    r2: float

    def to_dict(self) -> dict:
        return {"a": self.slope, "b": self.intercept, "t0": self.t0, "residual_rms": self.residual_rms, "r2": self.r2}


def drift_fit(theta: np.ndarray, t0: float = 0.0, times: np.ndarray | None = None) -> DriftFit:
    """Least-squares ``theta(t) ~ a (t - t0) + b`` over points with ``t >= t0``.

    ``times`` defaults to the sample index. A constant series has no defined
    R^2; it is returned as NaN with a warning and slope 0.
    """
    y = np.asarray(theta, dtype=np.float64)
    t = np.arange(len(y), dtype=np.float64) if times is None else np.asarray(times, dtype=np.float64)
    keep = t >= t0
    t, y = t[keep] - t0, y[keep]
    if len(y) < 3:
        raise ValueError("need at least three points after t0")
    design = np.column_stack([t, np.ones_like(t)])
    (a, b), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - (a * t + b)
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot <= 1e-30 * max(1.0, float(y @ y)):
        warnings.warn("constant series: R^2 undefined", DegenerateFitWarning, stacklevel=2)
        return DriftFit(0.0, float(y.mean()), float(t0), float(np.sqrt(ss_res / len(y))), float("nan"))
    r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return DriftFit(float(a), float(b), float(t0), float(np.sqrt(ss_res / len(y))), r2)


def linear_drift_variance(slope: float, samples: int) -> float:
    """Variance ``a^2 (T^2 - 1) / 12`` of ``T`` equally spaced points on a line."""
    if samples < 1:
        raise ValueError("need at least one sample")
    return slope**2 * (samples**2 - 1) / 12.0


def hcross(batch_size: float, momentum: float, lr: float, n_train: float) -> float:
    """Crossover curvature ``3 S (1 - beta) / (eta N_train)``."""
    if batch_size <= 0 or lr <= 0 or n_train <= 0:
        raise ValueError("batch size, learning rate and N_train must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    return 3.0 * batch_size * (1.0 - momentum) / (lr * n_train)


@dataclass
class ScalingFit:
    curvatures: np.ndarray
    variances: np.ndarray
    exponent: float
    prefactor: float
    excluded: int
    window: tuple[int, int]
    hcross: float | None = None


def scaling_scatter(
    pca: PcaResult | np.ndarray,
    hessian: EigenBasis | np.ndarray,
    window: tuple[int, int] | None = None,
    cross: float | None = None,
) -> ScalingFit:
    """Pair ``(h_i, sigma_i^2)`` by rank and fit ``sigma^2 ~ c h^alpha`` in log-log.

    ``window`` is a half-open index range; only pairs with both values
    positive enter the fit and the number of dropped pairs is reported.
    """
    s = np.asarray(pca.variances if isinstance(pca, PcaResult) else pca, dtype=np.float64)
    h = np.asarray(hessian.values if isinstance(hessian, EigenBasis) else hessian, dtype=np.float64)
    m = min(len(s), len(h))
    s, h = s[:m], h[:m]
    lo, hi = (0, m) if window is None else (max(0, window[0]), min(m, window[1]))
    hs, ss = h[lo:hi], s[lo:hi]
    ok = (hs > 0) & (ss > 0)
    excluded = int(np.sum(~ok))
    if ok.sum() < 2:
        raise ValueError("fewer than two positive pairs in the fit window")
    alpha, logc = np.polyfit(np.log(hs[ok]), np.log(ss[ok]), 1)
    return ScalingFit(h, s, float(alpha), float(np.exp(logc)), excluded, (lo, hi), cross)


def pc_partial_reconstruction(w_final: np.ndarray, pca: PcaResult, count: int) -> np.ndarray:
    """``sum_{j <= count} (w . p_j) p_j``; ``count=0`` gives the zero vector."""
    if not 0 <= count <= len(pca.components):
        raise ValueError(f"count must lie in [0, {len(pca.components)}]")
    w = np.asarray(w_final, dtype=np.float64)
    p = pca.components[:count]
    return p.T @ (p @ w)
