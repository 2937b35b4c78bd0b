"""Rademacher complexity of the linear unit-ball class, its bounds, and a KDE overlap diagnostic."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import sda as sda_mod
from .errors import ConfigError, ContractError, DegenerateSupportError, DimensionError

EXACT_MAX_M = 12


def _matrix(S, what="S") -> np.ndarray:
    S = np.asarray(S.data if isinstance(S, dc.Tensor) else S, dtype=np.float64)
    if S.ndim != 2:
        raise DimensionError(f"{what} must be a matrix, got shape {list(S.shape)}")
    if S.shape[0] == 0:
        raise ContractError(f"{what} is empty")
    return S


@dataclass
class RademacherEstimate:
    mean: float
    stderr: float
    draws: int
    m: int
    k: int
    exact: bool = False


def sign_vectors(m: int) -> np.ndarray:
    """All 2^m vectors in {-1, +1}^m, one per row."""
    return np.array(list(itertools.product((-1.0, 1.0), repeat=m)))


def empirical_rademacher_linear(S, draws: int = 2000, rng: np.random.Generator | None = None,
                                method: str = "auto", chunk: int = 256) -> RademacherEstimate:
    """Estimate ``E_sigma ||sum_i sigma_i x_i|| / m`` for the rows x_i of S.

    For the unit-ball linear class the supremum over hypotheses is the norm of
    the signed sum, so no optimization is needed.  ``method="exact"`` averages
    over every sign vector (stderr 0); ``"mc"`` draws ``draws`` sign vectors;
    ``"auto"`` enumerates when m <= 12.
    """
    S = _matrix(S)
    m, k = S.shape
    if method not in ("auto", "exact", "mc"):
        raise ConfigError(f"unknown method {method!r}")
    if method == "exact" or (method == "auto" and m <= EXACT_MAX_M):
        if m > 20:
            raise ConfigError(f"exact enumeration of 2^{m} sign vectors is not supported")
        norms = np.linalg.norm(sign_vectors(m) @ S, axis=1) / m
        return RademacherEstimate(float(norms.mean()), 0.0, len(norms), m, k, exact=True)
    if draws < 1:
        raise ConfigError(f"draws must be positive, got {draws}")
    if rng is None:
        raise ConfigError("Monte Carlo estimation needs an rng")
    # fixed chunking keeps the draw order, hence the result, independent of chunk timing
    norms = np.empty(draws)
    for start in range(0, draws, chunk):
        stop = min(start + chunk, draws)
        sigma = np.where(rng.random((stop - start, m)) < 0.5, -1.0, 1.0)
        norms[start:stop] = np.linalg.norm(sigma @ S, axis=1) / m
    if np.all(norms == norms[0]):
        # every draw agrees (m = 1, say); avoid summation rounding in the mean
        return RademacherEstimate(float(norms[0]), 0.0, draws, m, k)
    stderr = float(norms.std(ddof=1) / np.sqrt(draws)) if draws > 1 else 0.0
    return RademacherEstimate(float(norms.mean()), stderr, draws, m, k)


def lemma2_bound(S) -> float:
    """``sqrt(max_i ||x_i||^2 / m)``."""
    S = _matrix(S)
    return float(np.sqrt(np.max(np.sum(S * S, axis=1)) / S.shape[0]))


def theorem1_bound(S_aug, base_max_norm_sq: float, k: int) -> float:
    """``sqrt((base_max_norm_sq + k) / n)`` with n the number of augmented rows."""
    n = S_aug.shape[0] if hasattr(S_aug, "shape") else int(S_aug)
    if n < 1:
        raise ContractError("theorem1_bound needs at least one augmented row")
    return float(np.sqrt((base_max_norm_sq + k) / n))


def build_augmented_set(S, params: sda_mod.SdaParams, U: int, lam: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Augment each row of S U times (copy-major), returning a (U*m) x k array."""
    S = _matrix(S)
    if int(U) != U or U < 1:
        raise ConfigError(f"U must be a positive integer, got {U}")
    vb = sda_mod.vicinal_batch(params, dc.Tensor(S), sda_mod.SdaConfig(lam=lam, U=int(U), alpha=0.0), rng)
    return vb.z_aug.data


def build_augmented_pair(A, B, params: sda_mod.SdaParams, U: int, lam: float,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Augment A and B in one pass so both see the same per-copy masks.

    Masks are drawn once per copy, so augmenting two samples separately gives
    each its own handful of mask draws and the two end up translated along
    different coordinates.  Pooling first applies one perturbation kernel to
    both, which is what an overlap comparison needs.
    """
    A, B = _matrix(A, "A"), _matrix(B, "B")
    if A.shape[1] != B.shape[1]:
        raise DimensionError(f"A has {A.shape[1]} features, B has {B.shape[1]}")
    k, ma = A.shape[1], len(A)
    out = build_augmented_set(np.concatenate([A, B]), params, U, lam, rng).reshape(int(U), ma + len(B), k)
    return out[:, :ma].reshape(-1, k), out[:, ma:].reshape(-1, k)


# KDE overlap ---------------------------------------------------------------------

def silverman_bandwidth(x: np.ndarray) -> float:
    """``0.9 * min(std, IQR / 1.34) * n^(-1/5)``, falling back to std when the IQR is zero."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    sd = x.std(ddof=1) if len(x) > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return float(0.9 * spread * len(x) ** -0.2)


def _kernel_matrix(grid: np.ndarray, x: np.ndarray, h: float) -> np.ndarray:
    u = (grid[:, None] - x[None, :]) / h
    return np.exp(-0.5 * u * u) / (h * np.sqrt(2.0 * np.pi))


def kde_1d(x: np.ndarray, grid: np.ndarray, h: float) -> np.ndarray:
    return _kernel_matrix(grid, x, h).mean(axis=1)


@dataclass
class DensityGrid:
    x: np.ndarray
    density_a: np.ndarray
    density_b: np.ndarray


@dataclass
class OverlapReport:
    per_dim: list[float]
    pca2: float | None
    bandwidth: list[float]
    grid: int
    densities: list[DensityGrid] = field(default_factory=list, repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_dim))


def _overlap_1d(a, b, h, grid):
    lo = min(a.min(), b.min()) - 3 * h
    hi = max(a.max(), b.max()) + 3 * h
    xs = np.linspace(lo, hi, grid)
    pa, pb = kde_1d(a, xs, h), kde_1d(b, xs, h)
    ov = float(np.minimum(pa, pb).sum() * (xs[1] - xs[0]))
    return min(ov, 1.0), DensityGrid(xs, pa, pb)


def _pooled(A, B):
    # rows sorted lexicographically so statistics do not depend on argument order
    P = np.concatenate([A, B])
    return P[np.lexsort(P.T[::-1])]


def kde_overlap(A, B, bandwidth: float | Sequence[float] | None = None, grid: int = 512,
                pca_grid: int = 96, with_pca: bool = True) -> OverlapReport:
    """Overlap coefficient ``sum_grid min(p_A, p_B) * dx`` per feature dimension.

    Densities are Gaussian-kernel estimates on a uniform grid spanning both
    samples plus three bandwidths.  With no bandwidth given, Silverman's rule
    is applied per dimension to the pooled sample; a sequence gives one
    bandwidth per dimension, which is how two comparisons are put on the same
    smoothing.  ``pca2`` is the same coefficient for a product-kernel estimate
    on the pooled 2-D PCA projection (Silverman there unless a scalar is given).
    """
    A, B = _matrix(A, "A"), _matrix(B, "B")
    if A.shape[1] != B.shape[1]:
        raise DimensionError(f"A has {A.shape[1]} features, B has {B.shape[1]}")
    if len(A) < 2 or len(B) < 2:
        raise ContractError("kde_overlap needs at least two rows per sample")
    per_dim_h = None
    if bandwidth is not None:
        per_dim_h = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (A.shape[1],))
        if not np.all(per_dim_h > 0):
            raise ConfigError(f"bandwidth must be positive, got {bandwidth}")
    if grid < 2 or pca_grid < 2:
        raise ConfigError("grid resolution must be at least 2")
    for name, X in (("A", A), ("B", B)):
        if np.all(X == X[0]):
            raise DegenerateSupportError(f"sample {name} has all-identical rows")
    pooled = _pooled(A, B)
    per_dim, hs, dens = [], [], []
    for j in range(A.shape[1]):
        h = per_dim_h[j] if per_dim_h is not None else silverman_bandwidth(pooled[:, j])
        if not h > 0:
            raise DegenerateSupportError(f"dimension {j} has no spread")
        ov, dg = _overlap_1d(A[:, j], B[:, j], h, grid)
        per_dim.append(ov)
        hs.append(float(h))
        dens.append(dg)
    scalar_h = float(bandwidth) if np.ndim(bandwidth) == 0 and bandwidth is not None else None
    pca2 = _pca2_overlap(A, B, pooled, scalar_h, pca_grid) if with_pca and A.shape[1] >= 2 else None
    return OverlapReport(per_dim, pca2, hs, grid, dens)


def _pca2_overlap(A, B, pooled, bandwidth, grid):
    try:
        mu, comps = pca2_fit(pooled)
    except DegenerateSupportError:
        return None
    pa, pb = (A - mu) @ comps.T, (B - mu) @ comps.T
    proj = (pooled - mu) @ comps.T
    hs = [bandwidth if bandwidth is not None else silverman_bandwidth(proj[:, c]) for c in range(2)]
    axes = []
    for c in range(2):
        lo = min(pa[:, c].min(), pb[:, c].min()) - 3 * hs[c]
        hi = max(pa[:, c].max(), pb[:, c].max()) + 3 * hs[c]
        axes.append(np.linspace(lo, hi, grid))

    def density(P):
        kx = _kernel_matrix(axes[0], P[:, 0], hs[0])
        ky = _kernel_matrix(axes[1], P[:, 1], hs[1])
        return kx @ ky.T / len(P)

    cell = (axes[0][1] - axes[0][0]) * (axes[1][1] - axes[1][0])
    return min(float(np.minimum(density(pa), density(pb)).sum() * cell), 1.0)


def pca2_fit(X) -> tuple[np.ndarray, np.ndarray]:
    """Mean and the top-2 principal directions (rows), largest-magnitude loading positive."""
    X = _matrix(X, "X")
    if X.shape[0] < 3:
        raise ContractError("PCA needs at least 3 rows")
    if X.shape[1] < 2:
        raise DegenerateSupportError("PCA to 2 components needs at least 2 features")
    mu = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mu, full_matrices=False)
    tol = max(X.shape) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    if len(s) < 2 or s[1] <= tol:
        raise DegenerateSupportError("fewer than 2 nonzero singular values")
    comps = vt[:2].copy()
    for c in range(2):
        if comps[c, np.argmax(np.abs(comps[c]))] < 0:
            comps[c] = -comps[c]
    return mu, comps


def project_pca2(X) -> np.ndarray:
    mu, comps = pca2_fit(X)
    return (_matrix(X, "X") - mu) @ comps.T
