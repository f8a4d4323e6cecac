"""Synthetic warped Gaussian fields for experiments and tests."""
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .covariance import MaternParams, cholesky_with_jitter, matern_matrix
from .types import RegularGrid, SpatialDataset, as_locations

__all__ = [
    "spiral_warp",
    "FixedWarping",
    "SimulationSpec",
    "SimulationResult",
    "simulate_field",
    "simulate_at",
]


def spiral_warp(s, a: float = 2.0, b: float = 4.0) -> np.ndarray:
    """Rotate each point by an angle a r + b r^3 that grows with its radius r.

    Accepts one point (2,) or a batch (n, 2); radii are preserved.
    """
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    if s.shape[1] != 2:
        raise ValueError("spiral warping is defined on the plane")
    r = np.hypot(s[:, 0], s[:, 1])
    ang = a * r + b * r ** 3
    c, sn = np.cos(ang), np.sin(ang)
    # rotating (x, y) by ang equals r (cos(theta + ang), sin(theta + ang))
    out = np.stack([c * s[:, 0] - sn * s[:, 1], sn * s[:, 0] + c * s[:, 1]], axis=1)
    return out[0] if single else out


@dataclass(frozen=True)
class FixedWarping:
    """An analytic injective warping used to generate data.

    Build with :meth:`identity`, :meth:`spiral`, :meth:`power` or
    :meth:`compose`. A spiral applied to d > 2 points acts on the first two
    coordinates and passes the rest through.
    """

    kind: str
    params: Tuple = ()
    parts: Tuple["FixedWarping", ...] = ()

    @classmethod
    def identity(cls) -> "FixedWarping":
        return cls("identity")

    @classmethod
    def spiral(cls, a: float = 2.0, b: float = 4.0) -> "FixedWarping":
        return cls("spiral", (float(a), float(b)))

    @classmethod
    def power(cls, axis: int, gamma: float) -> "FixedWarping":
        """s_axis -> sign(s) |s|^gamma on one coordinate (gamma > 0)."""
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        return cls("power", (int(axis), float(gamma)))

    @classmethod
    def compose(cls, *parts: "FixedWarping") -> "FixedWarping":
        """Apply ``parts`` left to right."""
        return cls("composed", (), tuple(parts))

    def __call__(self, X) -> np.ndarray:
        X = np.array(as_locations(X), dtype=float)
        if self.kind == "identity":
            return X
        if self.kind == "spiral":
            if X.shape[1] < 2:
                raise ValueError("spiral warping needs at least two coordinates")
            X[:, :2] = spiral_warp(X[:, :2], *self.params)
            return X
        if self.kind == "power":
            ax, g = self.params
            X[:, ax] = np.sign(X[:, ax]) * np.abs(X[:, ax]) ** g
            return X
        if self.kind == "composed":
            for p in self.parts:
                X = p(X)
            return X
        raise ValueError(f"unknown warping kind {self.kind!r}")

    def check_injective(self, X, tol: float = 1e-10) -> None:
        """Raise if two distinct input points map within ``tol`` of each other."""
        X = as_locations(X)
        pairs = cKDTree(self(X)).query_pairs(tol)
        if pairs:
            i, j = min(pairs)
            raise ValueError(f"warping is not injective on the grid: points {i} and {j} collide")

    def describe(self) -> dict:
        if self.kind == "composed":
            return {"kind": "composed", "parts": [p.describe() for p in self.parts]}
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_description(cls, desc: dict) -> "FixedWarping":
        if desc["kind"] == "composed":
            return cls.compose(*(cls.from_description(p) for p in desc["parts"]))
        return cls(desc["kind"], tuple(desc.get("params", ())))


@dataclass(frozen=True)
class SimulationSpec:
    grid: RegularGrid
    warping: FixedWarping = field(default_factory=FixedWarping.spiral)
    matern: MaternParams = field(default_factory=lambda: MaternParams(1.0, 0.1, 1.5))
    nugget_var: float = 0.01
    n: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("sample size must be >= 1")
        if self.n > self.grid.n_points:
            raise ValueError(f"cannot sample N={self.n} sites without replacement "
                             f"from a grid of {self.grid.n_points} points")
        if self.nugget_var < 0:
            raise ValueError("nugget variance must be nonnegative")


@dataclass(frozen=True)
class SimulationResult:
    grid_points: np.ndarray
    y: np.ndarray  # latent field on every grid point
    data: SpatialDataset  # noisy observations at the training sites
    train_idx: np.ndarray
    test_idx: np.ndarray


def simulate_at(points, warping: FixedWarping, p: MaternParams, rng: np.random.Generator) -> np.ndarray:
    """One exact draw of the warped Matérn field at ``points``."""
    X = as_locations(points)
    K = matern_matrix(warping(X), warping(X), p)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] = p.variance
    L, _ = cholesky_with_jitter(K, p.variance)
    del K
    return L @ rng.standard_normal(X.shape[0])


def simulate_field(spec: SimulationSpec) -> SimulationResult:
    """Draw the latent field on the grid, then noisy values at N sites.

    Random numbers come from ``numpy.random.default_rng(spec.seed)`` in a
    fixed order: the field's standard normals, the site sample (without
    replacement, returned sorted) and the measurement noise.
    """
    rng = np.random.default_rng(spec.seed)
    pts = spec.grid.points()
    spec.warping.check_injective(pts)
    y = simulate_at(pts, spec.warping, spec.matern, rng)
    train = np.sort(rng.choice(pts.shape[0], size=spec.n, replace=False))
    noise = rng.standard_normal(spec.n) * np.sqrt(spec.nugget_var)
    test = np.setdiff1d(np.arange(pts.shape[0]), train)
    data = SpatialDataset(pts[train], y[train] + noise)
    return SimulationResult(pts, y, data, train, test)
