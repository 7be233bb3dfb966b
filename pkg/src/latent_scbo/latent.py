"""Linear and kernel PCA of the constraint matrix.

A :class:`LatentProjection` maps constraint vectors c in R^G to latent
coordinates z in R^g and back. PCA reconstructs exactly through its
orthonormal basis; kernel PCA has no exact inverse, so a ridge regression
from latent coordinates to constraint rows serves as its pre-image map.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

PCA = "pca"
KPCA = "kpca"

DEFAULT_EV_TOL = 1e-2
RIDGE = 1e-6
EIG_FLOOR = 1e-12


@dataclass(frozen=True)
class Truncation:
    """Either a fixed component count or a relative eigenvalue tolerance."""

    count: Optional[int] = None
    ev_tol: Optional[float] = None

    def __post_init__(self):
        if (self.count is None) == (self.ev_tol is None):
            raise ValueError("give exactly one of count or ev_tol")
        if self.count is not None and self.count < 1:
            raise ValueError("component count must be >= 1")
        if self.ev_tol is not None and not (0.0 <= self.ev_tol < 1.0):
            raise ValueError("ev_tol must lie in [0, 1)")

    def select(self, eigenvalues: np.ndarray, limit: int) -> int:
        if self.count is not None:
            if self.count > limit:
                raise ValueError(f"requested g={self.count} exceeds min(N, G)={limit}")
            return self.count
        lam1 = eigenvalues[0] if eigenvalues.size else 0.0
        return max(1, int(np.count_nonzero(eigenvalues > self.ev_tol * lam1)))


def as_truncation(spec) -> Truncation:
    """Accept an int (fixed count), a float in (0,1) (tolerance) or a Truncation."""
    if isinstance(spec, Truncation):
        return spec
    if isinstance(spec, (int, np.integer)) and not isinstance(spec, bool):
        return Truncation(count=int(spec))
    if isinstance(spec, float):
        return Truncation(ev_tol=spec)
    raise TypeError(f"cannot interpret {spec!r} as a truncation")


@dataclass(frozen=True)
class LatentProjection:
    kind: str
    mean: np.ndarray  # (G,)
    eigenvalues: np.ndarray  # (g,) retained, descending
    spectrum: np.ndarray  # every eigenvalue that was computed, descending
    scale: Optional[np.ndarray] = None  # per-column std when standardising
    basis: Optional[np.ndarray] = None  # PCA, (G, g)
    train_c: Optional[np.ndarray] = None  # kPCA, (N, G) in scaled units
    kernel: str = "gaussian"
    kernel_width: Optional[float] = None
    centered: bool = True
    dual_coeffs: Optional[np.ndarray] = None  # kPCA, (N, g)
    k_col_mean: Optional[np.ndarray] = None  # kPCA, column means of the raw train kernel
    k_mean: float = 0.0
    preimage_map: Optional[np.ndarray] = None  # kPCA, (g + 1, G)

    @property
    def g(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def n_outputs(self) -> int:
        return int(self.mean.size)


def _prep(C, standardize: bool):
    C = np.asarray(C, dtype=float)
    if C.ndim != 2:
        raise ValueError("constraint matrix must be 2-D")
    N = C.shape[0]
    if N < 2:
        raise ValueError("need at least two rows")
    mu = C.mean(axis=0)
    scale = None
    if standardize:
        scale = C.std(axis=0)
        scale[scale <= 1e-300] = 1.0
    return C, mu, scale


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of each column made positive, so refits on
    # similar data give comparable coordinates.
    idx = np.argmax(np.abs(vecs), axis=0)
    s = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    s[s == 0] = 1.0
    return vecs * s


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


def pca_fit(C, truncation=4, standardize: bool = False) -> LatentProjection:
    """Principal components of the centred constraint matrix.

    ``truncation`` is a fixed count g, a float tolerance (keep eigenvalues
    above ``tol * lambda_1``) or a :class:`Truncation`. The covariance
    spectrum comes from a thin SVD of the centred data, which costs
    O(N^2 G) when N < G and never forms the G x G covariance.
    """
    trunc = as_truncation(truncation)
    C, mu, scale = _prep(C, standardize)
    N, G = C.shape
    Cbar = C - mu
    if scale is not None:
        Cbar = Cbar / scale
    _, s, Vt = np.linalg.svd(Cbar, full_matrices=False)
    lam = s**2 / (N - 1)
    g = trunc.select(lam, min(N, G))
    basis = _fix_signs(Vt[:g].T.copy())
    return LatentProjection(
        kind=PCA, mean=mu, eigenvalues=lam[:g].copy(), spectrum=lam, scale=scale, basis=basis
    )


def pca_project(proj: LatentProjection, c) -> np.ndarray:
    """Latent coordinates ``basis^T (c - mean)``; ``c`` may be (G,) or (M, G)."""
    if proj.kind != PCA:
        raise ValueError("pca_project needs a PCA projection")
    d = np.asarray(c, dtype=float) - proj.mean
    if proj.scale is not None:
        d = d / proj.scale
    return d @ proj.basis


def pca_reconstruct(proj: LatentProjection, z) -> np.ndarray:
    if proj.kind != PCA:
        raise ValueError("pca_reconstruct needs a PCA projection")
    d = np.asarray(z, dtype=float) @ proj.basis.T
    if proj.scale is not None:
        d = d * proj.scale
    return proj.mean + d


# ---------------------------------------------------------------------------
# kernel PCA
# ---------------------------------------------------------------------------


def median_width(C) -> float:
    """Median pairwise Euclidean distance between rows (1.0 if all coincide)."""
    d = pdist(np.asarray(C, dtype=float))
    w = float(np.median(d)) if d.size else 0.0
    return w if w > 0.0 else 1.0


def _kernel(A, B, kind: str, width: Optional[float]):
    if kind == "linear":
        return A @ B.T
    d2 = cdist(A, B, "sqeuclidean")
    return np.exp(-d2 / (2.0 * width**2))


def kpca_fit(
    C,
    truncation=4,
    kernel_width: Optional[float] = None,
    kernel: str = "gaussian",
    center: bool = True,
    standardize: bool = False,
    ridge: float = RIDGE,
    width_scale: float = 1.0,
) -> LatentProjection:
    """Kernel PCA on constraint rows with a ridge-regression pre-image.

    The N x N Gaussian kernel ``exp(-|c - c'|^2 / (2 w^2))`` is double-centred
    (unless ``center=False``) and eigendecomposed. Each retained eigenvector
    is scaled by ``1/sqrt(lambda)`` so that ``alpha^T K_c alpha = 1``.
    Components whose eigenvalue is numerically zero are dropped with a
    warning. ``kernel="linear"`` gives the plain inner product, which makes
    the latent coordinates coincide with PCA up to sign.

    Without an explicit ``kernel_width`` the width is ``width_scale`` times
    the median pairwise row distance.
    """
    if kernel not in ("gaussian", "linear"):
        raise ValueError(f"unknown kernel {kernel!r}")
    trunc = as_truncation(truncation)
    C, mu, scale = _prep(C, standardize)
    N, G = C.shape
    Cs = C if scale is None else C / scale
    width = None
    if kernel == "gaussian":
        width = width_scale * median_width(Cs) if kernel_width is None else float(kernel_width)
        if not width > 0.0:
            raise ValueError("kernel width must be positive")
    K = _kernel(Cs, Cs, kernel, width)
    col_mean = K.mean(axis=0)
    k_mean = float(col_mean.mean())
    if center:
        Kc = K - col_mean[None, :] - col_mean[:, None] + k_mean
    else:
        Kc = K.copy()
    Kc = 0.5 * (Kc + Kc.T)
    try:
        lam, vec = np.linalg.eigh(Kc)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"kernel eigendecomposition did not converge: {exc}") from exc
    lam, vec = lam[::-1], vec[:, ::-1]
    g = trunc.select(lam, min(N, G) if kernel == "linear" else N)
    floor = EIG_FLOOR * max(1.0, float(lam[0]))
    usable = int(np.count_nonzero(lam[:g] > floor))
    if usable < g:
        warnings.warn(
            f"kernel PCA: only {usable} of {g} requested eigenvalues exceed {floor:.1e}; "
            f"reducing g to {max(usable, 1)}",
            RuntimeWarning,
            stacklevel=2,
        )
    if usable == 0:
        # Degenerate (e.g. all rows identical): one inert direction.
        alpha = np.zeros((N, 1))
        kept = np.zeros(1)
    else:
        kept = lam[:usable].copy()
        alpha = _fix_signs(vec[:, :usable].copy()) / np.sqrt(kept)
    Z = Kc @ alpha
    A = np.column_stack([np.ones(N), Z])
    reg = ridge * np.eye(A.shape[1])
    reg[0, 0] = 0.0
    W = np.linalg.solve(A.T @ A + reg, A.T @ C)
    return LatentProjection(
        kind=KPCA,
        mean=mu,
        eigenvalues=kept,
        spectrum=np.clip(lam, 0.0, None) if center else lam,
        scale=scale,
        train_c=Cs,
        kernel=kernel,
        kernel_width=width,
        centered=center,
        dual_coeffs=alpha,
        k_col_mean=col_mean,
        k_mean=k_mean,
        preimage_map=W,
    )


def kpca_project(proj: LatentProjection, c) -> np.ndarray:
    """Latent coordinates of one (G,) or several (M, G) constraint vectors."""
    if proj.kind != KPCA:
        raise ValueError("kpca_project needs a kPCA projection")
    c = np.asarray(c, dtype=float)
    single = c.ndim == 1
    c2 = np.atleast_2d(c)
    if proj.scale is not None:
        c2 = c2 / proj.scale
    k = _kernel(c2, proj.train_c, proj.kernel, proj.kernel_width)
    if proj.centered:
        k = k - k.mean(axis=1, keepdims=True) - proj.k_col_mean[None, :] + proj.k_mean
    z = k @ proj.dual_coeffs
    return z[0] if single else z


def kpca_preimage(proj: LatentProjection, z) -> np.ndarray:
    if proj.kind != KPCA:
        raise ValueError("kpca_preimage needs a kPCA projection")
    z = np.asarray(z, dtype=float)
    W = proj.preimage_map
    return W[0] + z @ W[1:]


# ---------------------------------------------------------------------------
# generic helpers
# ---------------------------------------------------------------------------


def fit_projection(kind: str, C, truncation, **kw) -> LatentProjection:
    kind = kind.lower()
    if kind == PCA:
        return pca_fit(C, truncation, **kw)
    if kind == KPCA:
        return kpca_fit(C, truncation, **kw)
    raise ValueError(f"unknown projection kind {kind!r}")


def project(proj: LatentProjection, c) -> np.ndarray:
    return pca_project(proj, c) if proj.kind == PCA else kpca_project(proj, c)


def reconstruct(proj: LatentProjection, z) -> np.ndarray:
    return pca_reconstruct(proj, z) if proj.kind == PCA else kpca_preimage(proj, z)


def subspace_error(proj: LatentProjection, Cstar) -> float:
    """Relative squared Frobenius reconstruction error of the rows of ``Cstar``.

    The denominator is measured about the projection mean, so for PCA on its
    own training data the error equals the discarded share of the spectrum.
    """
    Cstar = np.atleast_2d(np.asarray(Cstar, dtype=float))
    denom = float(np.sum((Cstar - proj.mean) ** 2))
    if denom == 0.0:
        raise ValueError("Cstar has zero norm about the projection mean")
    Chat = reconstruct(proj, project(proj, Cstar))
    return float(np.sum((Cstar - Chat) ** 2)) / denom


def write_spectrum(spectrum, path) -> None:
    """Write ``component,eigenvalue`` rows.

    ``spectrum`` is a projection (its full computed spectrum is written) or
    a plain sequence of eigenvalues.
    """
    values = spectrum.spectrum if isinstance(spectrum, LatentProjection) else spectrum
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "eigenvalue"])
        for i, lam in enumerate(np.asarray(values, dtype=float), start=1):
            w.writerow([i, format(float(lam), ".17g")])


__all__ = [
    "DEFAULT_EV_TOL",
    "KPCA",
    "LatentProjection",
    "PCA",
    "Truncation",
    "as_truncation",
    "fit_projection",
    "kpca_fit",
    "kpca_preimage",
    "kpca_project",
    "median_width",
    "pca_fit",
    "pca_project",
    "pca_reconstruct",
    "project",
    "reconstruct",
    "subspace_error",
    "write_spectrum",
]
