"""Matérn covariances on warped and unwarped domains.

Parameterisation (no sqrt(2 nu) factor in the range)::

    C(h) = sigma^2 * 2^(1-nu) / Gamma(nu) * (h/rho)^nu * K_nu(h/rho)

so nu = 1/2 gives ``sigma^2 exp(-h/rho)`` and nu = 3/2 gives
``sigma^2 (1 + h/rho) exp(-h/rho)``. Other libraries usually scale the
range by sqrt(2 nu); parameters are not interchangeable with them.

The nonstationary Matérn uses kernel-smoothed node parameters with an
isotropic local anisotropy matrix Sigma(s) = lambda(s) I.
"""
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import torch
from scipy.spatial.distance import cdist

from .bessel import LogBesselK, bessel_k, log_bessel_k
from .flow import TriangularMap, map_forward

__all__ = [
    "MaternParams",
    "NonstatMaternConfig",
    "CovarianceMatrixBundle",
    "CholeskyError",
    "bessel_k",
    "matern",
    "matern_matrix",
    "assemble_warped_K",
    "cross_covariance",
    "kernel_weights",
    "smoothed_params",
    "nonstat_matern",
    "nonstat_matrix",
    "nonstat_cross",
    "cholesky_with_jitter",
    "torch_cholesky_with_jitter",
    "matern_gram_torch",
    "matern_cross_torch",
    "nonstat_gram_torch",
    "nonstat_cross_torch",
]

# below this scaled distance the correlation is set to its limit 1
_U_ZERO = 1e-12
_LN2 = math.log(2.0)


class CholeskyError(np.linalg.LinAlgError):
    """Covariance matrix is not positive definite even after jitter."""


@dataclass(frozen=True)
class MaternParams:
    sigma: float  # marginal standard deviation
    range: float
    smoothness: float

    def __post_init__(self):
        for name in ("sigma", "range", "smoothness"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"Matérn {name} must be positive and finite, got {v}")

    @property
    def variance(self) -> float:
        return self.sigma ** 2


def _log_corr_np(u, nu):
    return (1.0 - nu) * _LN2 - math.lgamma(nu) + nu * np.log(u) + log_bessel_k(nu, u)


def matern(h, p: MaternParams):
    """Matérn covariance at distance(s) ``h`` >= 0."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("distances must be nonnegative")
    u = h / p.range
    out = np.full(u.shape, p.variance)
    pos = u >= _U_ZERO
    if np.any(pos):
        # rounding can push the correlation a few ulps above 1 near u = 0
        out[pos] = p.variance * np.minimum(np.exp(_log_corr_np(u[pos], p.smoothness)), 1.0)
    return float(out) if out.ndim == 0 else out


def matern_matrix(X1, X2, p: MaternParams, chunk: int = 2048) -> np.ndarray:
    """Dense Matérn matrix between point sets, assembled in row blocks."""
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    out = np.empty((X1.shape[0], X2.shape[0]))
    for i in range(0, X1.shape[0], chunk):
        out[i:i + chunk] = matern(cdist(X1[i:i + chunk], X2), p)
    return out


def _warp(T: Optional[TriangularMap], X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return X if T is None else map_forward(T, X)


def cholesky_with_jitter(K: np.ndarray, scale: float):
    """Lower Cholesky factor, adding diagonal jitter only on failure.

    Jitter starts at 1e-10 * scale and grows tenfold up to 1e-4 * scale.

    Returns
    -------
    L : ndarray
    jitter : float
        Amount added to the diagonal (0 if none was needed).
    """
    jitters = [0.0] + [scale * 10.0 ** e for e in range(-10, -3)]
    for j in jitters:
        try:
            A = K.copy()
            if j:
                A[np.diag_indices_from(A)] += j
            return scipy.linalg.cholesky(A, lower=True, overwrite_a=True, check_finite=False), j
        except np.linalg.LinAlgError:
            continue
    raise CholeskyError(_diagnose(K))


def _diagnose(K) -> str:
    K = np.asarray(K)
    if K.shape[0] <= 3000 and np.all(np.isfinite(K)):
        ev = np.linalg.eigvalsh(K)
        return (f"covariance matrix of size {K.shape[0]} is not positive definite after "
                f"jitter: min eigenvalue {ev[0]:.3e}, max {ev[-1]:.3e}")
    return f"covariance matrix of size {K.shape[0]} is not positive definite after jitter"


def torch_cholesky_with_jitter(K: torch.Tensor, scale: float):
    """Differentiable counterpart of :func:`cholesky_with_jitter`."""
    L, info = torch.linalg.cholesky_ex(K)
    if int(info) == 0:
        return L, 0.0
    eye = torch.eye(K.shape[0], dtype=K.dtype)
    for e in range(-10, -3):
        j = scale * 10.0 ** e
        L, info = torch.linalg.cholesky_ex(K + j * eye)
        if int(info) == 0:
            return L, j
    raise CholeskyError(_diagnose(K.detach().numpy()))


@dataclass
class CovarianceMatrixBundle:
    """Covariance matrix with nugget on the diagonal and a lazy factor."""

    K: np.ndarray
    nugget_var: float
    scale: float
    _chol: Optional[np.ndarray] = field(default=None, repr=False)
    jitter: float = 0.0

    @property
    def chol(self) -> np.ndarray:
        if self._chol is None:
            self._chol, self.jitter = cholesky_with_jitter(self.K, self.scale)
        return self._chol


def assemble_warped_K(T: Optional[TriangularMap], locs, p: MaternParams,
                      nugget_var: float = 0.0) -> CovarianceMatrixBundle:
    """K_ij = C(|T(s_i) - T(s_j)|) + nugget_var * 1{i = j}; T=None is identity."""
    if nugget_var < 0:
        raise ValueError("nugget variance must be nonnegative")
    Xw = _warp(T, locs)
    K = matern_matrix(Xw, Xw, p)
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, p.variance + nugget_var)
    return CovarianceMatrixBundle(K, nugget_var, p.variance)


def cross_covariance(T: Optional[TriangularMap], targets, obs, p: MaternParams) -> np.ndarray:
    """Matrix (n0, N) of Matérn covariances between warped targets and sites."""
    return matern_matrix(_warp(T, targets), _warp(T, obs), p)


# -- nonstationary Matérn ---------------------------------------------------


@dataclass
class NonstatMaternConfig:
    """Kernel-smoothed nonstationary Matérn.

    Node parameters are the standard deviation ``sigma``, the isotropic
    anisotropy eigenvalue ``lam`` (Sigma(s) = lam(s) I) and smoothness
    ``nu``. ``alpha`` is the orientation angle; with equal eigenvalues it
    has no effect and is carried only for completeness.
    """

    nodes: np.ndarray  # (K, d)
    sigma: np.ndarray  # (K,)
    lam: np.ndarray  # (K,)
    nu: np.ndarray  # (K,)
    bandwidth: float
    alpha: float = 0.0

    def __post_init__(self):
        self.nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        k = self.nodes.shape[0]
        for name in ("sigma", "lam", "nu"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (k,)).copy()
            if np.any(~np.isfinite(v)) or np.any(v <= 0):
                raise ValueError(f"node {name} values must be positive")
            setattr(self, name, v)
        if k < 1:
            raise ValueError("need at least one node")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    @property
    def d(self) -> int:
        return self.nodes.shape[1]

    @classmethod
    def from_stationary(cls, nodes, p: MaternParams, bandwidth: float) -> "NonstatMaternConfig":
        """Node parameters reproducing a stationary Matérn at every node.

        Matching 2 sqrt(nu Q) with h/range gives lam = (2 sqrt(nu) range)^2.
        """
        nodes = np.atleast_2d(nodes)
        k = nodes.shape[0]
        lam = (2.0 * math.sqrt(p.smoothness) * p.range) ** 2
        return cls(nodes, np.full(k, p.sigma), np.full(k, lam), np.full(k, p.smoothness), bandwidth)


def kernel_weights(s, cfg: NonstatMaternConfig) -> np.ndarray:
    """Normalised squared-exponential weights of each node at location(s) s.

    Computed as a softmax of -|s - s*_k|^2 / (2h), which equals the ratio
    of kernel values and, when every kernel value underflows, tends to the
    indicator of the nearest node.
    """
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    logits = -cdist(s, cfg.nodes, "sqeuclidean") / (2.0 * cfg.bandwidth)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w[0] if single else w


def smoothed_params(s, cfg: NonstatMaternConfig):
    """(sigma(s), lam(s), nu(s)) as weighted averages of node values."""
    w = kernel_weights(np.atleast_2d(s), cfg)
    return w @ cfg.sigma, w @ cfg.lam, w @ cfg.nu


def _nonstat_from_parts(sq_dist, si, sj, li, lj, ni, nj, d):
    nubar = 0.5 * (ni + nj)
    lbar = 0.5 * (li + lj)
    pref = si * sj * (li * lj) ** (d / 4.0) * lbar ** (-d / 2.0)
    Q = sq_dist / lbar
    u = 2.0 * np.sqrt(nubar * Q)
    out = np.array(pref, dtype=float, copy=True)
    pos = u >= _U_ZERO
    if np.any(pos):
        nb = np.broadcast_to(nubar, u.shape)[pos]
        logc = ((1.0 - nb) * _LN2 - np.vectorize(math.lgamma)(nb)
                + nb * np.log(u[pos]) + log_bessel_k(nb, u[pos]))
        out[pos] = np.broadcast_to(pref, u.shape)[pos] * np.exp(logc)
    return out


def nonstat_matern(si, sj, cfg: NonstatMaternConfig) -> float:
    """Nonstationary Matérn covariance between two locations."""
    si = np.asarray(si, dtype=float)
    sj = np.asarray(sj, dtype=float)
    (s1, l1, n1), (s2, l2, n2) = smoothed_params(si, cfg), smoothed_params(sj, cfg)
    sq = float(np.sum((si - sj) ** 2))
    return float(_nonstat_from_parts(np.array([sq]), s1, s2, l1, l2, n1, n2, cfg.d)[0])


def nonstat_cross(X1, X2, cfg: NonstatMaternConfig) -> np.ndarray:
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    s1, l1, n1 = smoothed_params(X1, cfg)
    s2, l2, n2 = smoothed_params(X2, cfg)
    sq = cdist(X1, X2, "sqeuclidean")
    return _nonstat_from_parts(sq, s1[:, None], s2[None, :], l1[:, None], l2[None, :],
                               n1[:, None], n2[None, :], cfg.d)


def nonstat_matrix(X, cfg: NonstatMaternConfig, nugget_var: float = 0.0) -> CovarianceMatrixBundle:
    K = nonstat_cross(X, X, cfg)
    K = 0.5 * (K + K.T)
    s, _, _ = smoothed_params(X, cfg)
    K[np.diag_indices_from(K)] = s ** 2 + nugget_var
    return CovarianceMatrixBundle(K, nugget_var, float(np.max(s ** 2)))


# -- differentiable versions used by the likelihood --------------------------


def _log_corr_torch(u, nu):
    return (1.0 - nu) * _LN2 - torch.lgamma(nu) + nu * torch.log(u) + LogBesselK.apply(nu, u)


def _corr_torch(u, nu):
    """Matérn correlation of scaled distance u (any shape), 1 at u -> 0."""
    small = u < _U_ZERO
    if bool(small.any()):
        safe = torch.where(small, torch.ones_like(u), u)
        nu_b = nu.expand_as(u) if nu.dim() == 0 else nu
        rho = torch.exp(_log_corr_torch(safe, nu_b))
        return torch.where(small, torch.ones_like(u), rho)
    return torch.exp(_log_corr_torch(u, nu))


def _upper_pairs(X: torch.Tensor):
    n = X.shape[0]
    iu = torch.triu_indices(n, n, offset=1)
    diff = X[iu[0]] - X[iu[1]]
    return iu, (diff * diff).sum(-1)


def _symmetric_from_upper(n, iu, vals, diag):
    K = torch.zeros(n, n, dtype=vals.dtype)
    K = K.index_put((iu[0], iu[1]), vals)
    return K + K.T + torch.diag(diag)


def matern_gram_torch(Xw: torch.Tensor, sigma, rng, nu) -> torch.Tensor:
    """Matérn Gram matrix (no nugget) of warped points, differentiable."""
    n = Xw.shape[0]
    iu, sq = _upper_pairs(Xw)
    u = torch.sqrt(sq) / rng
    vals = sigma ** 2 * _corr_torch(u, nu)
    return _symmetric_from_upper(n, iu, vals, (sigma ** 2).expand(n))


def matern_cross_torch(X0w: torch.Tensor, Xw: torch.Tensor, sigma, rng, nu) -> torch.Tensor:
    diff = X0w[:, None, :] - Xw[None, :, :]
    sq = (diff * diff).sum(-1)
    zero = sq <= 0
    h = torch.sqrt(torch.where(zero, torch.ones_like(sq), sq))
    h = torch.where(zero, torch.zeros_like(h), h)
    return sigma ** 2 * _corr_torch(h / rng, nu)


def _smoothed_torch(X, nodes, bandwidth, node_sigma, node_lam, node_nu):
    sq = ((X[:, None, :] - nodes[None, :, :]) ** 2).sum(-1)
    w = torch.softmax(-sq / (2.0 * bandwidth), dim=1)
    return w @ node_sigma, w @ node_lam, w @ node_nu


def _nonstat_pair_torch(sq, si, sj, li, lj, ni, nj, d):
    nubar = 0.5 * (ni + nj)
    lbar = 0.5 * (li + lj)
    pref = si * sj * (li * lj) ** (d / 4.0) * lbar ** (-d / 2.0)
    zero = sq <= 0
    sq_safe = torch.where(zero, torch.ones_like(sq), sq)
    u = 2.0 * torch.sqrt(nubar * sq_safe / lbar)
    u = torch.where(zero, torch.zeros_like(u), u)
    return pref * _corr_torch(u, nubar)


def nonstat_gram_torch(X, nodes, bandwidth, node_sigma, node_lam, node_nu) -> torch.Tensor:
    n, d = X.shape
    s, l, v = _smoothed_torch(X, nodes, bandwidth, node_sigma, node_lam, node_nu)
    iu, sq = _upper_pairs(X)
    i, j = iu[0], iu[1]
    vals = _nonstat_pair_torch(sq, s[i], s[j], l[i], l[j], v[i], v[j], d)
    return _symmetric_from_upper(n, iu, vals, s ** 2)


def nonstat_cross_torch(X0, X, nodes, bandwidth, node_sigma, node_lam, node_nu) -> torch.Tensor:
    d = X.shape[1]
    s0, l0, v0 = _smoothed_torch(X0, nodes, bandwidth, node_sigma, node_lam, node_nu)
    s1, l1, v1 = _smoothed_torch(X, nodes, bandwidth, node_sigma, node_lam, node_nu)
    sq = ((X0[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    return _nonstat_pair_torch(sq, s0[:, None], s1[None, :], l0[:, None], l1[None, :],
                               v0[:, None], v1[None, :], d)
