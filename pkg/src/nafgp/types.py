"""Locations, datasets, regular grids and min-max standardisation."""
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "DuplicateLocationError",
    "SpatialDataset",
    "RegularGrid",
    "StandardizationTransform",
    "standardize",
    "make_grid",
    "as_locations",
]

DUPLICATE_TOL = 1e-12


class DuplicateLocationError(ValueError):
    pass


def as_locations(locs, d: Optional[int] = None) -> np.ndarray:
    """Coerce to a finite float array of shape (n, d)."""
    arr = np.asarray(locs, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if d in (None, 1) else arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise ValueError(f"locations must be an (n, d) array, got shape {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise ValueError(f"expected {d}-dimensional locations, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("locations must be finite")
    return arr


@dataclass(frozen=True)
class SpatialDataset:
    """N noisy observations Z at distinct locations in R^d."""

    locations: np.ndarray
    values: np.ndarray
    axis_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        locs = as_locations(self.locations)
        vals = np.asarray(self.values, dtype=float).ravel()
        if locs.shape[0] < 1:
            raise ValueError("dataset needs at least one observation")
        if vals.shape[0] != locs.shape[0]:
            raise ValueError(f"{locs.shape[0]} locations but {vals.shape[0]} values")
        if not np.all(np.isfinite(vals)):
            raise ValueError("values must be finite")
        if self.axis_names is not None and len(self.axis_names) != locs.shape[1]:
            raise ValueError("need one axis name per coordinate")
        pairs = cKDTree(locs).query_pairs(DUPLICATE_TOL)
        if pairs:
            i, j = min(pairs)
            raise DuplicateLocationError(
                f"observations {i} and {j} share location {locs[i].tolist()}")
        locs.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "values", vals)
        if self.axis_names is not None:
            object.__setattr__(self, "axis_names", tuple(self.axis_names))

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def d(self) -> int:
        return self.locations.shape[1]

    def subset(self, idx) -> "SpatialDataset":
        idx = np.asarray(idx)
        return SpatialDataset(self.locations[idx], self.values[idx], self.axis_names)


@dataclass(frozen=True)
class RegularGrid:
    """Tensor-product grid; points enumerate row-major (last axis fastest)."""

    ranges: Tuple[Tuple[float, float], ...]
    counts: Tuple[int, ...]

    def __post_init__(self):
        ranges = tuple((float(lo), float(hi)) for lo, hi in self.ranges)
        counts = tuple(int(c) for c in self.counts)
        if len(ranges) != len(counts) or not ranges:
            raise ValueError("need one (lo, hi) range and one count per axis")
        for ax, ((lo, hi), c) in enumerate(zip(ranges, counts)):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"axis {ax}: need finite lo < hi, got [{lo}, {hi}]")
            if c < 2:
                raise ValueError(f"axis {ax}: count must be >= 2, got {c}")
        object.__setattr__(self, "ranges", ranges)
        object.__setattr__(self, "counts", counts)

    @property
    def d(self) -> int:
        return len(self.counts)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.counts))

    def axes(self):
        return [np.linspace(lo, hi, c) for (lo, hi), c in zip(self.ranges, self.counts)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def make_grid(ranges: Sequence[Tuple[float, float]], counts) -> RegularGrid:
    """Grid over per-axis ranges; ``counts`` may be one int for all axes."""
    if np.isscalar(counts):
        counts = (int(counts),) * len(ranges)
    return RegularGrid(tuple(ranges), tuple(counts))


@dataclass(frozen=True)
class StandardizationTransform:
    """Per-axis min-max map onto [0, 1]^d."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.mins, dtype=float).ravel()
        hi = np.asarray(self.maxs, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise ValueError("mins and maxs differ in length")
        bad = np.flatnonzero(~(hi > lo))
        if bad.size:
            raise ValueError(f"axis {int(bad[0])} is degenerate (max <= min)")
        object.__setattr__(self, "mins", lo)
        object.__setattr__(self, "maxs", hi)

    @property
    def d(self) -> int:
        return self.mins.shape[0]

    def apply(self, locs) -> np.ndarray:
        x = as_locations(locs, self.d)
        return (x - self.mins) / (self.maxs - self.mins)

    def invert(self, unit) -> np.ndarray:
        u = as_locations(unit, self.d)
        return self.mins + u * (self.maxs - self.mins)

    @classmethod
    def identity(cls, d: int) -> "StandardizationTransform":
        return cls(np.zeros(d), np.ones(d))


def standardize(raw_locations, axis_names: Optional[Sequence[str]] = None):
    """Min-max scale each axis to [0, 1].

    Returns
    -------
    unit : ndarray (n, d)
    transform : StandardizationTransform
    """
    x = as_locations(raw_locations)
    lo, hi = x.min(axis=0), x.max(axis=0)
    bad = np.flatnonzero(~(hi > lo))
    if bad.size:
        ax = int(bad[0])
        name = f"{axis_names[ax]!r} (axis {ax})" if axis_names else f"axis {ax}"
        raise ValueError(f"cannot standardize: {name} has a single distinct value")
    t = StandardizationTransform(lo, hi)
    out = t.apply(x)
    # pin the extremes so the output range is exactly [0, 1]
    out[x == lo] = 0.0
    out[x == hi] = 1.0
    return out, t
