"""SVD of layer matrices, Marchenko-Pastur bulk and Wigner-surmise spacing statistics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats


class DegenerateSpectrumWarning(RuntimeWarning):
    pass


@dataclass
class SvdBundle:
    """SVD of ``W`` (``N x M`` after transposing so that ``N >= M``).

    ``u`` is ``N x r``, ``vt`` is ``r x M``; ``transposed`` records whether
    the original matrix was transposed to reach ``N >= M``.
    """

    singular_values: np.ndarray
    u: np.ndarray
    vt: np.ndarray
    shape: tuple[int, int]  # original (rows, cols)
    transposed: bool
    sigma2_mp: float | None = None
    bounds: tuple[float, float] | None = None
    n_out: int | None = None

    @property
    def n(self) -> int:
        return max(self.shape)

    @property
    def m(self) -> int:
        return min(self.shape)

    @property
    def q(self) -> float:
        return self.n / self.m

    @property
    def mapped(self) -> np.ndarray:
        """Eigenvalues ``nu^2 / N`` of the sample covariance ``W^T W / N``."""
        return self.singular_values**2 / self.n

    @property
    def singular_bounds(self) -> tuple[float, float] | None:
        """Bulk edges on the singular-value scale, ``sqrt(N lambda)``."""
        if self.bounds is None:
            return None
        return tuple(float(np.sqrt(self.n * b)) for b in self.bounds)

    @property
    def in_bulk(self) -> np.ndarray:
        if self.bounds is None:
            raise ValueError("run bulk_analysis first")
        return self.mapped <= self.bounds[1]


def svd(matrix: np.ndarray) -> SvdBundle:
    w = np.asarray(matrix, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("expected a matrix")
    if not np.all(np.isfinite(w)):
        raise ValueError("matrix has non-finite entries")
    transposed = w.shape[0] < w.shape[1]
    a = w.T if transposed else w
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdBundle(s, u, vt, w.shape, transposed)


def reconstruct(bundle: SvdBundle) -> np.ndarray:
    a = (bundle.u * bundle.singular_values) @ bundle.vt
    return a.T if bundle.transposed else a


def singular_matrix(bundle: SvdBundle, index: int) -> np.ndarray:
    """Rank-one term ``nu_i u_i v_i^T`` in the original orientation."""
    if not 0 <= index < len(bundle.singular_values):
        raise IndexError(f"singular index {index} out of range")
    a = bundle.singular_values[index] * np.outer(bundle.u[:, index], bundle.vt[index])
    return a.T if bundle.transposed else a


def singular_matrix_vector(bundle: SvdBundle, index: int) -> np.ndarray:
    """Row-major flattening of :func:`singular_matrix`, matching the weight block layout."""
    return singular_matrix(bundle, index).ravel()


def mp_bounds(sigma2: float, q: float) -> tuple[float, float]:
    if sigma2 <= 0 or q < 1:
        raise ValueError("need sigma2 > 0 and Q >= 1")
    r = 1.0 / np.sqrt(q)
    return sigma2 * (1 - r) ** 2, sigma2 * (1 + r) ** 2


def mp_density(lam, sigma2: float, q: float):
    """Marchenko-Pastur density; zero outside the bulk and at ``lam = 0``."""
    lo, hi = mp_bounds(sigma2, q)
    lam = np.asarray(lam, dtype=np.float64)
    inside = (lam >= lo) & (lam <= hi) & (lam > 0)
    safe = np.where(inside, lam, 1.0)
    val = q / (2 * np.pi * sigma2 * safe) * np.sqrt(np.clip((hi - safe) * (safe - lo), 0.0, None))
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


def mp_cdf(lam, sigma2: float, q: float):
    """Cumulative MP distribution by adaptive quadrature."""
    lo, hi = mp_bounds(sigma2, q)

    def one(x):
        if x <= lo:
            return 0.0
        if x >= hi:
            return 1.0
        val, _ = integrate.quad(mp_density, lo, x, args=(sigma2, q), limit=200)
        return min(1.0, val)

    lam = np.asarray(lam, dtype=np.float64)
    out = np.vectorize(one, otypes=[float])(lam)
    return float(out) if out.ndim == 0 else out


def estimate_entry_variance(matrix: np.ndarray, method: str = "mean-square") -> float:
    """Variance of the entries under the i.i.d. model.

    ``mean-square`` is the mean squared entry; ``centred`` subtracts the
    entry mean; ``mad`` uses the median absolute deviation (robust to spikes).
    """
    w = np.asarray(matrix, dtype=np.float64)
    if method == "mean-square":
        return float(np.mean(w**2))
    if method == "centred":
        return float(np.var(w))
    if method == "mad":
        return float((1.4826 * np.median(np.abs(w - np.median(w)))) ** 2)
    raise ValueError(f"unknown variance estimator {method!r}")


def bulk_analysis(bundle: SvdBundle, matrix: np.ndarray | None = None, method: str = "mean-square") -> SvdBundle:
    """Attach the MP variance estimate, bulk edges and outlier count.

    Without ``matrix`` the mean squared entry is recovered from the singular
    values (``sum nu^2 / (N M)``), which equals the ``mean-square`` estimator.
    """
    if matrix is not None:
        sigma2 = estimate_entry_variance(matrix, method)
    elif method == "mean-square":
        sigma2 = float(np.sum(bundle.singular_values**2) / (bundle.n * bundle.m))
    else:
        raise ValueError(f"estimator {method!r} needs the matrix itself")
    if sigma2 <= 0:
        bundle.sigma2_mp = 0.0
        bundle.bounds = (0.0, 0.0)
        bundle.n_out = 0
        return bundle
    bundle.sigma2_mp = sigma2
    bundle.bounds = mp_bounds(sigma2, bundle.q)
    bundle.n_out = int(np.sum(bundle.mapped > bundle.bounds[1]))
    return bundle


def mp_ks_distance(bundle: SvdBundle) -> float:
    """KS distance between the mapped eigenvalues and the fitted MP law."""
    if bundle.sigma2_mp is None:
        raise ValueError("run bulk_analysis first")
    return float(stats.kstest(bundle.mapped, lambda x: mp_cdf(x, bundle.sigma2_mp, bundle.q)).statistic)


def unfold_spacings(values, k_neighbors: int = 10) -> np.ndarray:
    """Nearest-neighbour spacings normalized by their local mean.

    Values are sorted descending and ``s_n = xi_n - xi_{n+1}``. Each spacing
    is divided by the mean of the spacings within ``k_neighbors`` positions on
    either side (itself included); windows are clipped at the spectrum edges.
    """
    xi = np.sort(np.asarray(values, dtype=np.float64))[::-1]
    if len(xi) < 3:
        raise ValueError("need at least three values")
    raw = xi[:-1] - xi[1:]
    zeros = int(np.sum(raw == 0))
    if zeros:
        warnings.warn(f"{zeros} zero spacings from repeated values", DegenerateSpectrumWarning, stacklevel=2)
    csum = np.concatenate([[0.0], np.cumsum(raw)])
    idx = np.arange(len(raw))
    lo = np.clip(idx - k_neighbors, 0, None)
    hi = np.clip(idx + k_neighbors + 1, None, len(raw))
    local = (csum[hi] - csum[lo]) / (hi - lo)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(local > 0, raw / np.where(local > 0, local, 1.0), 0.0)
    return s


def wigner_pdf(s):
    s = np.asarray(s, dtype=np.float64)
    out = np.where(s >= 0, np.pi * s / 2 * np.exp(-np.pi * s**2 / 4), 0.0)
    return float(out) if out.ndim == 0 else out


def wigner_cdf(s):
    s = np.asarray(s, dtype=np.float64)
    out = np.where(s >= 0, -np.expm1(-np.pi * s**2 / 4), 0.0)
    return float(out) if out.ndim == 0 else out


def wigner_ks(spacings) -> float:
    return float(stats.kstest(np.asarray(spacings), wigner_cdf).statistic)


def spacing_histogram(spacings, bins: int = 30, upper: float = 4.0) -> list[tuple[float, float, float]]:
    """Rows ``(bin centre, empirical density, Wigner density)``."""
    hist, edges = np.histogram(spacings, bins=bins, range=(0.0, upper), density=True)
    centres = 0.5 * (edges[:-1] + edges[1:])
    return [(float(c), float(h), float(wigner_pdf(c))) for c, h in zip(centres, hist)]
