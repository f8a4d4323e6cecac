"""Predictive scores against held-out truth: MSPE, PICP and MPIW."""
import csv
import io
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .prediction import PredictionSet

__all__ = ["ScoreReport", "score", "score_arrays", "score_table"]


@dataclass(frozen=True)
class ScoreReport:
    mspe: float
    picp: float
    mpiw: float
    n: int
    label: str = ""
    kind: str = "process"
    n_covered: int = 0


def score_arrays(truth, mean, lower, upper, label: str = "", kind: str = "process") -> ScoreReport:
    """Scores from raw arrays; coverage uses the closed interval [L, U]."""
    arrs = [np.asarray(a, dtype=float).ravel() for a in (truth, mean, lower, upper)]
    n = arrs[0].shape[0]
    if any(a.shape[0] != n for a in arrs[1:]):
        raise ValueError("truth and predictions differ in length: "
                         + ", ".join(str(a.shape[0]) for a in arrs))
    if n == 0:
        raise ValueError("nothing to score")
    y, m, lo, hi = arrs
    covered = int(np.count_nonzero((y >= lo) & (y <= hi)))
    return ScoreReport(
        mspe=float(np.mean((y - m) ** 2)),
        picp=covered / n,
        mpiw=float(np.mean(hi - lo)),
        n=n,
        label=label,
        kind=kind,
        n_covered=covered,
    )


def score(truth, preds: PredictionSet, label: str = "") -> ScoreReport:
    return score_arrays(truth, preds.mean, preds.lower, preds.upper, label, preds.kind)


def score_table(reports: Iterable[ScoreReport]) -> str:
    """Comma-delimited table with columns model, MSPE, PICP, MPIW."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["model", "MSPE", "PICP", "MPIW"])
    for r in reports:
        wr.writerow([r.label, repr(r.mspe), repr(r.picp), repr(r.mpiw)])
    return buf.getvalue()
