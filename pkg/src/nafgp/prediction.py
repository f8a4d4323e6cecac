"""Simple kriging with a fitted model."""
import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .likelihood import FittedModel
from .types import RegularGrid, as_locations

__all__ = ["PredictionSet", "krig", "batch_krig_grid", "Z95"]

Z95 = 1.96
NEG_VAR_TOL = 1e-10


@dataclass(frozen=True)
class PredictionSet:
    """Kriging means, variances and 95% intervals at target locations.

    ``kind`` is ``"process"`` for intervals on the latent field Y or
    ``"data"`` when the nugget variance is added (intervals for Z).
    ``n_clamped`` counts variances below -1e-10 that were set to 0.
    """

    locations: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    kind: str = "process"
    n_clamped: int = 0

    @property
    def std_error(self) -> np.ndarray:
        return np.sqrt(self.variance)

    @property
    def lower(self) -> np.ndarray:
        return self.mean - Z95 * self.std_error

    @property
    def upper(self) -> np.ndarray:
        return self.mean + Z95 * self.std_error

    def __len__(self):
        return self.mean.shape[0]

    def to_csv(self, axis_names=None) -> str:
        d = self.locations.shape[1]
        names = list(axis_names) if axis_names else [f"s{i + 1}" for i in range(d)]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(names + ["mean", "std_error", "lower", "upper"])
        for row in zip(self.locations, self.mean, self.std_error, self.lower, self.upper):
            wr.writerow([repr(float(v)) for v in row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def krig(model: FittedModel, targets, target_kind: str = "process", chunk: int = 2048) -> PredictionSet:
    """Simple kriging mean k'K^{-1}Z and variance C(0) - k'K^{-1}k.

    Parameters
    ----------
    model : FittedModel
    targets : array_like (n0, d)
    target_kind : {"process", "data"}
        ``"data"`` adds the fitted nugget variance to every variance.
    chunk : int
        Targets handled per block, bounding memory at chunk x N.
    """
    if target_kind not in ("process", "data"):
        raise ValueError(f"target_kind must be 'process' or 'data', got {target_kind!r}")
    X0 = as_locations(targets, model.data.d)
    n0 = X0.shape[0]
    mean = np.empty(n0)
    var = np.empty(n0)
    for i in range(0, n0, chunk):
        blk = X0[i:i + chunk]
        k = model.cross_covariance(blk)
        mean[i:i + chunk] = k @ model.alpha
        v = scipy.linalg.solve_triangular(model.chol, k.T, lower=True, check_finite=False)
        var[i:i + chunk] = model.prior_variance(blk) - np.einsum("ij,ij->j", v, v)
    n_clamped = int(np.count_nonzero(var < -NEG_VAR_TOL))
    if n_clamped:
        warnings.warn(f"{n_clamped} kriging variances below -{NEG_VAR_TOL} clamped to 0",
                      RuntimeWarning, stacklevel=2)
    var = np.maximum(var, 0.0)
    if target_kind == "data":
        var = var + model.sigma_eps ** 2
    return PredictionSet(X0, mean, var, target_kind, n_clamped)


def batch_krig_grid(model: FittedModel, grid: RegularGrid, target_kind: str = "process",
                    chunk: int = 2048) -> PredictionSet:
    """Kriging on every grid point, in the grid's row-major order."""
    if grid.d != model.data.d:
        raise ValueError(f"grid is {grid.d}-dimensional, model is {model.data.d}-dimensional")
    return krig(model, grid.points(), target_kind, chunk)
