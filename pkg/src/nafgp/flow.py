"""Monotone sigmoidal flows and the triangular warping map.

A deep dense sigmoidal flow (DDSF) is a monotone scalar network. Each
sublayer computes ``logit(W sigmoid(a * (U h) + b))`` with positive a and
simplex rows in W and U. Since the rows sum to one,

    logit(sum_j w_j sigmoid(p_j))
        = log(sum_j w_j sigmoid(p_j)) - log(sum_j w_j sigmoid(-p_j)),

and both sums are of positive terms, so the inverse sigmoid is evaluated
without the cancellation of ``log(1 - y)``.

The triangular map composes one or more stages. In each stage, coordinate
k is transformed by a DDSF whose parameters come from a masked conditioner
evaluated at the stage input.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .conditioner import ConditionerNetwork, DDSFShape, build_conditioner, split_gamma

__all__ = [
    "DSFStep",
    "DDSFStep",
    "dsf_eval",
    "ddsf_eval",
    "ddsf_apply",
    "TriangularMap",
    "build_triangular_map",
    "map_forward",
    "map_inverse",
    "OutOfRangeError",
]


class OutOfRangeError(ValueError):
    """Target point lies outside the image of the inversion search box."""


_TINY = 1e-300


def _logit_mix(w, pre, matrix):
    """logit(w' sigmoid(pre)) along the last axis of ``pre``.

    ``w`` is a row-stochastic matrix (..., out, in) when ``matrix`` is true,
    else a weight vector (..., in). Both branches are sums of positive terms, so the logs carry
    full relative precision; the floor only matters past |pre| ~ 745.
    """
    sp = torch.sigmoid(pre)
    sn = torch.sigmoid(-pre)
    if matrix:
        num = torch.matmul(w, sp.unsqueeze(-1)).squeeze(-1)
        den = torch.matmul(w, sn.unsqueeze(-1)).squeeze(-1)
    else:
        num = (w * sp).sum(-1)
        den = (w * sn).sum(-1)
    return torch.log(num.clamp_min(_TINY)) - torch.log(den.clamp_min(_TINY))


def ddsf_apply(x: torch.Tensor, g: Dict[str, list], shape: DDSFShape) -> torch.Tensor:
    """Evaluate a DDSF elementwise on ``x``.

    Leaves of ``g`` carry leading dims that broadcast against ``x`` (the
    per-coordinate parameter blocks from :func:`split_gamma`).
    """
    L = shape.n_sublayers
    h = None
    for l in range(L):
        if l == 0:
            pre = g["a"][0] * x.unsqueeze(-1) + g["b"][0]
        else:
            uh = torch.matmul(g["U"][l], h.unsqueeze(-1)).squeeze(-1)
            pre = g["a"][l] * uh + g["b"][l]
        if l < L - 1:
            h = _logit_mix(g["W"][l], pre, True)
        else:
            h = _logit_mix(g["w"], pre, False)
    return h


def _check_simplex(name, arr, tol=1e-10):
    arr = np.asarray(arr, dtype=float)
    if np.any(arr <= 0) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > tol):
        raise ValueError(f"{name} must have positive entries summing to 1 along rows")


@dataclass
class DSFStep:
    """Deep sigmoidal flow ``logit(w' sigmoid(a x + b))``."""

    w: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w, self.a, self.b = (np.atleast_1d(np.asarray(v, dtype=float))
                                  for v in (self.w, self.a, self.b))
        if not (self.w.shape == self.a.shape == self.b.shape) or self.w.ndim != 1:
            raise ValueError("w, a and b must be vectors of equal length")
        _check_simplex("w", self.w)
        if np.any(self.a <= 0):
            raise ValueError("a must be positive")

    def as_ddsf(self) -> "DDSFStep":
        return DDSFStep(a=[self.a], b=[self.b], W=[], w=self.w, U=[])


@dataclass
class DDSFStep:
    """Parameters of one DDSF (lists are indexed by sublayer).

    ``W`` has L-1 matrices (outer x inner), ``U`` has L-1 matrices for
    sublayers 2..L (inner x previous outer), ``w`` has length inner[L-1].
    """

    a: List[np.ndarray]
    b: List[np.ndarray]
    W: List[np.ndarray]
    w: np.ndarray
    U: List[np.ndarray]

    def __post_init__(self):
        L = len(self.a)
        if L < 1 or len(self.b) != L or len(self.W) != L - 1 or len(self.U) != L - 1:
            raise ValueError("inconsistent sublayer counts")
        self.a = [np.atleast_1d(np.asarray(v, dtype=float)) for v in self.a]
        self.b = [np.atleast_1d(np.asarray(v, dtype=float)) for v in self.b]
        self.W = [np.atleast_2d(np.asarray(v, dtype=float)) for v in self.W]
        self.U = [np.atleast_2d(np.asarray(v, dtype=float)) for v in self.U]
        self.w = np.atleast_1d(np.asarray(self.w, dtype=float))
        for a in self.a:
            if np.any(a <= 0):
                raise ValueError("a must be positive")
        for name, mats in (("W", self.W), ("U", self.U), ("w", [self.w])):
            for m in mats:
                _check_simplex(name, m)
        inner = tuple(len(a) for a in self.a)
        outer = tuple(m.shape[0] for m in self.W) + (1,)
        for l in range(L):
            if len(self.b[l]) != inner[l]:
                raise ValueError("b and a sizes differ")
        for l in range(L - 1):
            if self.W[l].shape[1] != inner[l]:
                raise ValueError("W shape does not match inner width")
            if self.U[l].shape != (inner[l + 1], outer[l]):
                raise ValueError("U shape does not match sublayer widths")
        if len(self.w) != inner[-1]:
            raise ValueError("w length does not match final inner width")
        self.shape = DDSFShape(inner=inner, outer=outer)

    def gamma(self) -> Dict[str, list]:
        t = lambda v: torch.from_numpy(np.asarray(v, dtype=float))  # noqa: E731
        return {
            "a": [t(v) for v in self.a],
            "b": [t(v) for v in self.b],
            "W": [t(v) for v in self.W],
            "w": t(self.w),
            "U": [None] + [t(v) for v in self.U],
        }


def ddsf_eval(step: DDSFStep, x):
    """Evaluate a DDSF at scalar or array ``x``."""
    x_arr = np.asarray(x, dtype=float)
    g = step.gamma()
    with torch.no_grad():
        out = ddsf_apply(torch.from_numpy(x_arr.ravel().copy()), g, step.shape)
    out = out.numpy().reshape(x_arr.shape)
    return float(out) if out.ndim == 0 else out


def dsf_eval(step: DSFStep, x):
    """Evaluate ``logit(w' sigmoid(a x + b))`` at scalar or array ``x``."""
    return ddsf_eval(step.as_ddsf(), x)


@dataclass
class TriangularMap:
    """Composition of triangular DDSF stages with masked conditioners."""

    d: int
    shape: DDSFShape
    stages: List[ConditionerNetwork]

    def param_arrays(self, prefix: str = "flow.") -> Dict[str, np.ndarray]:
        out = {}
        for i, net in enumerate(self.stages):
            out.update(net.param_arrays(f"{prefix}s{i}."))
        return out

    def set_params(self, arrays: Dict[str, np.ndarray], prefix: str = "flow.") -> None:
        for i, net in enumerate(self.stages):
            net.set_params(arrays, f"{prefix}s{i}.")

    def stage_gammas(self, params: Dict[str, torch.Tensor], x: torch.Tensor, prefix: str = "flow."):
        """Run the map, returning the output and per-stage parameter blocks.

        Each stage entry is ``(g_first, g_rest)``: the coordinate-1 block with
        leading dim (1,) and the block for coordinates 2..d with leading
        dims (n, d-1) (None when d == 1).
        """
        blocks = []
        for i, net in enumerate(self.stages):
            first, rest = net.apply_split(params, x, prefix=f"{prefix}s{i}.")
            g1 = split_gamma(first, self.shape)
            y1 = ddsf_apply(x[:, 0], g1, self.shape).unsqueeze(1)
            if rest is None:
                gr = None
                x = y1
            else:
                gr = split_gamma(rest, self.shape)
                x = torch.cat([y1, ddsf_apply(x[:, 1:], gr, self.shape)], dim=1)
            blocks.append((g1, gr))
        return x, blocks

    def apply(self, params: Dict[str, torch.Tensor], x: torch.Tensor, prefix: str = "flow.") -> torch.Tensor:
        """Warp a batch of points (n, d) with explicit parameter tensors."""
        return self.stage_gammas(params, x, prefix)[0]

    def coordinate_chain(self, blocks, k: int):
        """Scalar map s_k -> T_k given the blocks of a forward pass.

        By triangularity the stage parameters of coordinate k do not depend
        on s_k, so T_k is a composition of scalar DDSFs in s_k alone.
        """
        def pick(g1, gr):
            if k == 0:
                return g1
            return {key: ([None if t is None else t[:, k - 1] for t in val]
                          if isinstance(val, list) else val[:, k - 1])
                    for key, val in gr.items()}

        gs = [pick(g1, gr) for g1, gr in blocks]

        def chain(xk: torch.Tensor) -> torch.Tensor:
            for g in gs:
                xk = ddsf_apply(xk, g, self.shape)
            return xk

        return chain

    def torch_params(self) -> Dict[str, torch.Tensor]:
        return {k: torch.from_numpy(np.asarray(v, dtype=float))
                for k, v in self.param_arrays().items()}

    def architecture(self) -> dict:
        net = self.stages[0]
        return {
            "d": self.d,
            "stages": len(self.stages),
            "inner": list(self.shape.inner),
            "outer": list(self.shape.outer),
            "hidden": [len(l.bias) for l in net.layers[:-1]],
            "activation": net.activation,
        }


def build_triangular_map(
    d: int,
    stages: int = 2,
    shape: Optional[DDSFShape] = None,
    hidden: Sequence[int] = (100, 100, 100, 100, 100),
    rng: Optional[np.random.Generator] = None,
    init_scale: float = 0.01,
    activation: str = "tanh",
) -> TriangularMap:
    """Build a map with ``stages`` composed DDSF layers per coordinate.

    Defaults follow the experiment architecture: two stages, five DDSF
    sublayers of width 16, five masked hidden layers of 100 units.
    """
    if stages < 1:
        raise ValueError("need at least one stage")
    shape = DDSFShape() if shape is None else shape
    rng = np.random.default_rng(0) if rng is None else rng
    nets = [build_conditioner(d, hidden, shape, rng=rng, init_scale=init_scale,
                              activation=activation) for _ in range(stages)]
    return TriangularMap(d, shape, nets)


def _as_batch(s, d):
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    s = s.reshape(-1, d) if single else s
    if s.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}")
    return s, single


def map_forward(T: TriangularMap, s) -> np.ndarray:
    """Warped locations T(s) for one point (d,) or a batch (n, d)."""
    s, single = _as_batch(s, T.d)
    with torch.no_grad():
        out = T.apply(T.torch_params(), torch.from_numpy(s.copy())).numpy()
    return out[0] if single else out


def map_inverse(T: TriangularMap, t, box: float = 10.0, tol: float = 1e-10,
                newton_steps: int = 3) -> np.ndarray:
    """Invert the map coordinate by coordinate.

    Component k of T depends on s_1..s_k only and increases in s_k, so s_k
    is found by bisection on [-box, box] to a bracket of width ``tol``
    given the recovered s_1..s_{k-1}, then polished by Newton steps kept
    inside the bracket.

    Raises
    ------
    OutOfRangeError
        If some target is outside the image of [-box, box]^d.
    """
    t, single = _as_batch(t, T.d)
    params = T.torch_params()
    n = t.shape[0]
    s = np.zeros_like(t)
    for k in range(T.d):
        with torch.no_grad():
            _, blocks = T.stage_gammas(params, torch.from_numpy(s.copy()))
        chain = T.coordinate_chain(blocks, k)
        target = t[:, k]

        def resid(xk):
            with torch.no_grad():
                return chain(torch.from_numpy(xk)).numpy() - target

        lo = np.full(n, -box)
        hi = np.full(n, box)
        f_lo, f_hi = resid(lo), resid(hi)
        bad = ~((f_lo <= 0) & (f_hi >= 0))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise OutOfRangeError(
                f"target {t[i].tolist()} is outside the image of [-{box}, {box}]^{T.d} "
                f"(coordinate {k + 1})")
        while np.max(hi - lo) > tol:
            mid = 0.5 * (lo + hi)
            below = resid(mid) < 0
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        x = 0.5 * (lo + hi)
        for _ in range(newton_steps):
            xt = torch.from_numpy(x.copy()).requires_grad_(True)
            out = chain(xt)
            (slope,) = torch.autograd.grad(out.sum(), xt)
            f = out.detach().numpy() - target
            with np.errstate(divide="ignore", invalid="ignore"):
                cand = x - f / slope.numpy()
            ok = np.isfinite(cand) & (cand >= lo - tol) & (cand <= hi + tol)
            x = np.where(ok, cand, x)
        s[:, k] = x
    return s[0] if single else s
