"""Gaussian log-likelihood of warped, stationary and nonstationary models,
and the two-stage block-coordinate maximisation used to fit them.

Free parameters live in one flat vector (see :mod:`nafgp.autodiff`):

* ``flow.s{i}.layer{j}.{weight,bias}`` conditioner weights (warped model)
* ``cov.log_phi1``, ``cov.log_phi2``, ``cov.log_phi3`` log Matérn sd, range
  and smoothness (stationary and warped models)
* ``ns.log_sigma``, ``ns.log_lam``, ``ns.log_nu`` per-node values and
  ``ns.log_bandwidth`` (nonstationary model)
* ``noise.log_sigma_eps`` log nugget standard deviation
"""
import copy
import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.linalg
import torch

from .autodiff import NonFiniteLossError, ParameterVector, value_and_gradient
from .covariance import (
    CholeskyError,
    MaternParams,
    NonstatMaternConfig,
    cholesky_with_jitter,
    matern_cross_torch,
    matern_gram_torch,
    matern_matrix,
    nonstat_cross,
    nonstat_gram_torch,
    nonstat_matrix,
    smoothed_params,
    torch_cholesky_with_jitter,
)
from .flow import TriangularMap, map_forward
from .types import SpatialDataset

__all__ = [
    "FitError",
    "FitConfig",
    "ModelSpec",
    "FittedModel",
    "log_likelihood",
    "log_likelihood_nonstat",
    "gaussian_loglik_from_cov",
    "initial_parameters",
    "make_loss",
    "fit",
    "fit_nonstat",
    "NODES_2D",
    "NODES_3D",
]

_LOG2PI = math.log(2.0 * math.pi)

NODES_2D = np.array([[-0.25, -0.25], [0.25, 0.25]])
NODES_3D = np.array([[0.25, 0.25, 0.25], [0.25, 0.75, 0.25], [0.75, 0.75, 0.75]])

COV_NAMES = ("cov.log_phi1", "cov.log_phi2", "cov.log_phi3")
NOISE_NAME = "noise.log_sigma_eps"
NS_NAMES = ("ns.log_sigma", "ns.log_lam", "ns.log_nu", "ns.log_bandwidth")


class FitError(RuntimeError):
    """Fit could not proceed; ``state`` holds the last good parameters."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class FitConfig:
    tol: float = 1e-3
    max_outer: int = 50
    flow_steps: int = 200
    cov_steps: int = 200
    flow_lr: float = 1e-3
    cov_lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_halvings: int = 8
    lr_recover: float = 1.25
    seed: int = 0
    init_phi: Optional[MaternParams] = None
    init_sigma_eps: Optional[float] = None
    init_bandwidth: Optional[float] = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if self.flow_steps < 0 or self.cov_steps < 0:
            raise ValueError("step counts must be >= 0")
        if not (self.flow_lr > 0 and self.cov_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.max_halvings < 0:
            raise ValueError("max_halvings must be >= 0")
        if self.lr_recover < 1:
            raise ValueError("lr_recover must be >= 1")


@dataclass
class ModelSpec:
    """Which covariance model to fit.

    kind : {"stat", "naf", "nonstat"}
    flow : TriangularMap holding initial weights (``naf`` only)
    nodes : (K, d) node locations (``nonstat`` only)
    """

    kind: str
    flow: Optional[TriangularMap] = None
    nodes: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("stat", "naf", "nonstat"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "naf" and self.flow is None:
            raise ValueError("naf model needs a flow")
        if self.kind == "nonstat":
            if self.nodes is None:
                raise ValueError("nonstat model needs nodes")
            self.nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))


def default_nodes(d: int) -> np.ndarray:
    if d == 2:
        return NODES_2D.copy()
    if d == 3:
        return NODES_3D.copy()
    raise ValueError(f"no default nodes for d={d}; give them explicitly")


# -- plain evaluation --------------------------------------------------------


def gaussian_loglik_from_cov(K: np.ndarray, z: np.ndarray, scale: float):
    """Zero-mean Gaussian log density via a jittered Cholesky factor.

    Returns (loglik, L, jitter, alpha) with alpha = K^{-1} z.
    """
    L, jitter = cholesky_with_jitter(K, scale)
    w = scipy.linalg.solve_triangular(L, z, lower=True, check_finite=False)
    alpha = scipy.linalg.solve_triangular(L.T, w, lower=False, check_finite=False)
    n = z.shape[0]
    ll = -0.5 * n * _LOG2PI - np.sum(np.log(np.diag(L))) - 0.5 * float(w @ w)
    return float(ll), L, jitter, alpha


def _warped(T, X):
    return X if T is None else map_forward(T, X)


def _stat_K(T, X, p: MaternParams, sigma_eps: float) -> np.ndarray:
    Xw = _warped(T, X)
    K = matern_matrix(Xw, Xw, p)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] = p.variance + sigma_eps ** 2
    return K


def log_likelihood(data: SpatialDataset, T: Optional[TriangularMap], p: MaternParams,
                   sigma_eps: float) -> float:
    """Log-likelihood of data under the (optionally warped) Matérn model."""
    if not sigma_eps >= 0:
        raise ValueError("sigma_eps must be nonnegative")
    K = _stat_K(T, data.locations, p, sigma_eps)
    return gaussian_loglik_from_cov(K, data.values, p.variance)[0]


def log_likelihood_nonstat(data: SpatialDataset, cfg: NonstatMaternConfig, sigma_eps: float) -> float:
    b = nonstat_matrix(data.locations, cfg, sigma_eps ** 2)
    return gaussian_loglik_from_cov(b.K, data.values, b.scale)[0]


# -- parameter vectors and differentiable losses -----------------------------


def _diameter(X: np.ndarray) -> float:
    return float(np.linalg.norm(X.max(axis=0) - X.min(axis=0)))


def initial_parameters(spec: ModelSpec, data: SpatialDataset, cfg: Optional[FitConfig] = None) -> ParameterVector:
    """Starting vector: sd of Z, 0.2 x domain diameter, smoothness 1.5 and a
    nugget sd of 0.1 x sd(Z), unless overridden in ``cfg``."""
    cfg = FitConfig() if cfg is None else cfg
    sd = float(np.std(data.values)) if data.n > 1 else 1.0
    sd = sd if sd > 0 else 1.0
    diam = _diameter(data.locations) if data.n > 1 else 1.0
    diam = diam if diam > 0 else 1.0
    phi = cfg.init_phi or MaternParams(sd, 0.2 * diam, 1.5)
    s_eps = cfg.init_sigma_eps if cfg.init_sigma_eps is not None else 0.1 * sd
    if not s_eps > 0:
        raise ValueError("initial nugget sd must be positive")
    arrays = {}
    if spec.kind == "naf":
        arrays.update(spec.flow.param_arrays())
    if spec.kind in ("stat", "naf"):
        arrays[COV_NAMES[0]] = np.array(math.log(phi.sigma))
        arrays[COV_NAMES[1]] = np.array(math.log(phi.range))
        arrays[COV_NAMES[2]] = np.array(math.log(phi.smoothness))
    else:
        k = spec.nodes.shape[0]
        lam = (2.0 * math.sqrt(phi.smoothness) * phi.range) ** 2
        h = cfg.init_bandwidth if cfg.init_bandwidth is not None else (0.25 * diam) ** 2
        arrays["ns.log_sigma"] = np.full(k, math.log(phi.sigma))
        arrays["ns.log_lam"] = np.full(k, math.log(lam))
        arrays["ns.log_nu"] = np.full(k, math.log(phi.smoothness))
        arrays["ns.log_bandwidth"] = np.array(math.log(h))
    arrays[NOISE_NAME] = np.array(math.log(s_eps))
    return ParameterVector.pack(arrays)


def _gram(spec: ModelSpec, P: dict, X: torch.Tensor, Xw: Optional[torch.Tensor] = None):
    """Noise-free covariance matrix and its scale (max prior variance)."""
    if spec.kind == "nonstat":
        nodes = torch.from_numpy(spec.nodes)
        sig = torch.exp(P["ns.log_sigma"])
        K = nonstat_gram_torch(X, nodes, torch.exp(P["ns.log_bandwidth"]), sig,
                               torch.exp(P["ns.log_lam"]), torch.exp(P["ns.log_nu"]))
        return K, float(sig.detach().max()) ** 2
    if Xw is None:
        Xw = spec.flow.apply(P, X) if spec.kind == "naf" else X
    s1 = torch.exp(P[COV_NAMES[0]])
    K = matern_gram_torch(Xw, s1, torch.exp(P[COV_NAMES[1]]), torch.exp(P[COV_NAMES[2]]))
    return K, float(s1.detach()) ** 2


def _loglik_torch(K: torch.Tensor, scale: float, z: torch.Tensor) -> torch.Tensor:
    L, _ = torch_cholesky_with_jitter(K, scale)
    w = torch.linalg.solve_triangular(L, z.unsqueeze(1), upper=False).squeeze(1)
    n = z.shape[0]
    return -0.5 * n * _LOG2PI - torch.log(torch.diagonal(L)).sum() - 0.5 * (w * w).sum()


def make_loss(spec: ModelSpec, data: SpatialDataset, warped: Optional[np.ndarray] = None
              ) -> Callable[[dict], torch.Tensor]:
    """Log-likelihood as a function of the named parameter tensors.

    If ``warped`` is given those warped locations are used in place of the
    flow output (the flow is held fixed).
    """
    X = torch.from_numpy(np.array(data.locations))
    z = torch.from_numpy(np.array(data.values))
    Xw = None if warped is None else torch.from_numpy(np.asarray(warped, dtype=float))
    n = data.n

    def loss(P):
        K, scale = _gram(spec, P, X, Xw)
        K = K + torch.exp(2.0 * P[NOISE_NAME]) * torch.eye(n, dtype=K.dtype)
        return _loglik_torch(K, scale, z)

    return loss


# -- fitted model ------------------------------------------------------------


@dataclass
class TraceRow:
    iteration: int
    stage: str
    loglik: float
    delta_norm: float
    accepted: int
    lr: float


@dataclass
class FittedModel:
    """Estimates plus the cached Cholesky factor of K at those estimates."""

    spec: ModelSpec
    params: ParameterVector
    data: SpatialDataset
    trace: List[TraceRow] = field(default_factory=list)
    converged: bool = False
    n_outer: int = 0

    def __post_init__(self):
        P = self.params.unpack()
        if self.spec.kind == "naf":
            T = copy.deepcopy(self.spec.flow)
            T.set_params(P)
            self.flow = T
        else:
            self.flow = None
        self.sigma_eps = float(np.exp(P[NOISE_NAME]))
        if self.spec.kind == "nonstat":
            self.matern = None
            self.nonstat = NonstatMaternConfig(self.spec.nodes, np.exp(P["ns.log_sigma"]),
                                               np.exp(P["ns.log_lam"]), np.exp(P["ns.log_nu"]),
                                               float(np.exp(P["ns.log_bandwidth"])))
            b = nonstat_matrix(self.data.locations, self.nonstat, self.sigma_eps ** 2)
            K, scale = b.K, b.scale
        else:
            self.nonstat = None
            self.matern = MaternParams(*(float(np.exp(P[k])) for k in COV_NAMES))
            K = _stat_K(self.flow, self.data.locations, self.matern, self.sigma_eps)
            scale = self.matern.variance
        self.loglik, self.chol, self.jitter, self.alpha = gaussian_loglik_from_cov(
            K, self.data.values, scale)

    @property
    def kind(self) -> str:
        return self.spec.kind

    def warp(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return _warped(self.flow, X)

    def cross_covariance(self, X0) -> np.ndarray:
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))
        if self.nonstat is not None:
            return nonstat_cross(X0, self.data.locations, self.nonstat)
        return matern_matrix(self.warp(X0), self.warp(self.data.locations), self.matern)

    def prior_variance(self, X0) -> np.ndarray:
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))
        if self.nonstat is not None:
            return smoothed_params(X0, self.nonstat)[0] ** 2
        return np.full(X0.shape[0], self.matern.variance)

    def loglik_from_cache(self) -> float:
        z = self.data.values
        w = scipy.linalg.solve_triangular(self.chol, z, lower=True, check_finite=False)
        return float(-0.5 * z.shape[0] * _LOG2PI - np.sum(np.log(np.diag(self.chol))) - 0.5 * w @ w)

    def trace_table(self) -> str:
        """Fit trace as comma-delimited text."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["iteration", "stage", "loglik", "delta_norm"])
        for r in self.trace:
            wr.writerow([r.iteration, r.stage, repr(r.loglik), repr(r.delta_norm)])
        return buf.getvalue()


# -- optimisation ------------------------------------------------------------


class _Adam:
    """Adam moments and step size for one parameter block.

    State persists across outer iterations. A step that lowers the
    objective (or makes it non-finite) is retried from the same point with
    half the step size, at most ``max_halvings`` times; after an accepted
    step the step size grows by ``lr_recover`` up to its base value.
    """

    def __init__(self, size: int, lr: float, cfg: "FitConfig"):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.base_lr = lr
        self.lr = lr
        self.cfg = cfg

    def reset(self):
        self.m[:] = 0.0
        self.v[:] = 0.0
        self.t = 0
        self.lr = self.base_lr

    def run(self, fun, x0: np.ndarray, f0: float, g0: np.ndarray, n_steps: int):
        """Returns (x, f, accepted_steps)."""
        cfg = self.cfg
        x, f, g = x0.copy(), f0, g0
        accepted = 0
        fresh = False
        for _ in range(n_steps):
            self.t += 1
            self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * g
            self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * g * g
            mhat = self.m / (1 - cfg.beta1 ** self.t)
            vhat = self.v / (1 - cfg.beta2 ** self.t)
            direction = mhat / (np.sqrt(vhat) + cfg.adam_eps)
            moved = False
            for _ in range(cfg.max_halvings + 1):
                cand = x + self.lr * direction
                try:
                    fc, gc = fun(cand)
                except (NonFiniteLossError, CholeskyError, np.linalg.LinAlgError):
                    fc = -np.inf
                if fc >= f:
                    x, f, g = cand, fc, gc
                    accepted += 1
                    moved = True
                    self.lr = min(self.base_lr, self.lr * cfg.lr_recover)
                    break
                self.lr *= 0.5
            if moved:
                fresh = False
                continue
            if fresh:
                break
            # stale momentum can point off a narrow ridge; restart from the gradient
            self.reset()
            fresh = True
        return x, f, accepted


def fit(data: SpatialDataset, spec: ModelSpec, cfg: Optional[FitConfig] = None,
        init: Optional[ParameterVector] = None,
        callback: Optional[Callable[[TraceRow], None]] = None) -> FittedModel:
    """Maximum-likelihood fit by alternating flow and covariance stages.

    Each outer iteration runs ``cfg.flow_steps`` ascent steps on the flow
    weights with the covariance fixed (skipped for models without a flow),
    then ``cfg.cov_steps`` steps on the covariance and nugget parameters
    with the flow fixed. Iteration stops when the change of the log
    covariance/nugget parameters over one outer iteration has Euclidean
    norm below ``cfg.tol``, or after ``cfg.max_outer`` iterations.
    """
    cfg = FitConfig() if cfg is None else cfg
    if data.n < 2:
        raise ValueError("fitting needs at least two observations")
    if spec.kind == "naf" and spec.flow.d != data.d:
        raise ValueError(f"flow is {spec.flow.d}-dimensional, data are {data.d}-dimensional")
    if spec.kind == "nonstat" and spec.nodes.shape[1] != data.d:
        raise ValueError("node dimension does not match data")
    torch.manual_seed(cfg.seed)
    pv = initial_parameters(spec, data, cfg) if init is None else init.copy()
    flow_mask = pv.mask(["flow."])
    cov_mask = ~flow_mask
    loss_full = make_loss(spec, data)

    def evaluate(values, mask, loss):
        return value_and_gradient(loss, pv.with_values(values), wrt=mask)

    try:
        ll, _ = evaluate(pv.values, cov_mask, loss_full)
    except (NonFiniteLossError, CholeskyError) as exc:
        raise FitError(f"log-likelihood not finite at the starting point: {exc}", pv) from exc

    adam_flow = _Adam(int(flow_mask.sum()), cfg.flow_lr, cfg)
    adam_cov = _Adam(int(cov_mask.sum()), cfg.cov_lr, cfg)
    trace: List[TraceRow] = []
    converged = False
    it = 0
    values = pv.values.copy()

    def log(row):
        trace.append(row)
        if callback is not None:
            callback(row)

    log(TraceRow(0, "init", ll, float("nan"), 0, 0.0))
    for it in range(1, cfg.max_outer + 1):
        before = values[cov_mask].copy()
        if spec.kind == "naf" and cfg.flow_steps > 0:
            f0, g0 = evaluate(values, flow_mask, loss_full)

            def fun1(xf):
                full = values.copy()
                full[flow_mask] = xf
                val, grad = evaluate(full, flow_mask, loss_full)
                return val, grad[flow_mask]

            xf, ll, acc = adam_flow.run(fun1, values[flow_mask], f0, g0[flow_mask], cfg.flow_steps)
            values[flow_mask] = xf
            log(TraceRow(it, "flow", ll, 0.0, acc, adam_flow.lr))
        if cfg.cov_steps > 0:
            if spec.kind == "naf":
                T = copy.deepcopy(spec.flow)
                T.set_params(pv.with_values(values).unpack())
                loss2 = make_loss(spec, data, warped=map_forward(T, data.locations))
            else:
                loss2 = loss_full
            f0, g0 = evaluate(values, cov_mask, loss2)

            def fun2(xc):
                full = values.copy()
                full[cov_mask] = xc
                val, grad = evaluate(full, cov_mask, loss2)
                return val, grad[cov_mask]

            xc, ll, acc = adam_cov.run(fun2, values[cov_mask], f0, g0[cov_mask], cfg.cov_steps)
            values[cov_mask] = xc
        else:
            acc = 0
        delta = float(np.linalg.norm(values[cov_mask] - before))
        log(TraceRow(it, "cov", ll, delta, acc, adam_cov.lr))
        if delta < cfg.tol:
            converged = True
            break
    return FittedModel(spec, pv.with_values(values), data, trace, converged, it)


def fit_nonstat(data: SpatialDataset, nodes=None, cfg: Optional[FitConfig] = None,
                init: Optional[ParameterVector] = None, callback=None) -> FittedModel:
    """Fit the kernel-smoothed nonstationary Matérn (no flow stage)."""
    nodes = default_nodes(data.d) if nodes is None else nodes
    return fit(data, ModelSpec("nonstat", nodes=nodes), cfg, init, callback)
