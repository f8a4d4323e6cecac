"""Flat parameter vectors and reverse-mode gradients.

Every model in the package keeps its free parameters in one flat float64
vector. A schema of named, shaped segments maps slices of that vector back
to conditioner weights, log-covariance parameters and the log-nugget.
Gradients are taken with torch autograd.
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

__all__ = [
    "Segment",
    "ParameterVector",
    "NonFiniteLossError",
    "value_and_gradient",
]


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss evaluates to inf or nan.

    Attributes
    ----------
    segment : str or None
        Name of the first parameter segment holding a non-finite value or
        gradient, if one could be identified.
    """

    def __init__(self, message, segment=None):
        super().__init__(message)
        self.segment = segment


@dataclass(frozen=True)
class Segment:
    name: str
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParameterVector:
    """Flat vector of unconstrained parameters plus a named segment schema."""

    def __init__(self, segments: Sequence[Segment], values=None):
        self.segments: List[Segment] = list(segments)
        names = [s.name for s in self.segments]
        if len(set(names)) != len(names):
            raise ValueError("duplicate segment names in schema")
        self._slices: Dict[str, slice] = {}
        offset = 0
        for seg in self.segments:
            self._slices[seg.name] = slice(offset, offset + seg.size)
            offset += seg.size
        self.size = offset
        if values is None:
            values = np.zeros(offset)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (offset,):
            raise ValueError(f"expected {offset} values, got shape {values.shape}")
        self.values = values.copy()

    @classmethod
    def pack(cls, arrays: Dict[str, np.ndarray]) -> "ParameterVector":
        """Build a vector from named arrays, in insertion order."""
        segments = [Segment(k, tuple(np.shape(v))) for k, v in arrays.items()]
        flat = [np.asarray(v, dtype=np.float64).ravel() for v in arrays.values()]
        values = np.concatenate(flat) if flat else np.zeros(0)
        return cls(segments, values)

    def unpack(self, values=None) -> Dict[str, np.ndarray]:
        values = self.values if values is None else values
        return {s.name: values[self._slices[s.name]].reshape(s.shape) for s in self.segments}

    def unpack_torch(self, flat: torch.Tensor) -> Dict[str, torch.Tensor]:
        """Differentiable views of a flat tensor laid out by this schema."""
        return {s.name: flat[self._slices[s.name]].view(s.shape) for s in self.segments}

    def slice_of(self, name: str) -> slice:
        return self._slices[name]

    def __getitem__(self, name: str) -> np.ndarray:
        seg = next(s for s in self.segments if s.name == name)
        return self.values[self._slices[name]].reshape(seg.shape)

    def mask(self, prefixes: Sequence[str]) -> np.ndarray:
        """Boolean mask over the flat vector for segments matching any prefix."""
        m = np.zeros(self.size, dtype=bool)
        for seg in self.segments:
            if any(seg.name.startswith(p) for p in prefixes):
                m[self._slices[seg.name]] = True
        return m

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(self.segments, values)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.segments, self.values)

    def segment_of(self, index: int) -> str:
        for seg in self.segments:
            sl = self._slices[seg.name]
            if sl.start <= index < sl.stop:
                return seg.name
        raise IndexError(index)

    def schema(self) -> List[dict]:
        return [{"name": s.name, "shape": list(s.shape)} for s in self.segments]

    @classmethod
    def from_schema(cls, schema: List[dict], values) -> "ParameterVector":
        return cls([Segment(d["name"], tuple(d["shape"])) for d in schema], values)

    def __len__(self):
        return self.size

    def __repr__(self):
        return f"ParameterVector({len(self.segments)} segments, size={self.size})"


def _first_bad_segment(pv: ParameterVector, arr: np.ndarray) -> Optional[str]:
    bad = np.flatnonzero(~np.isfinite(arr))
    return pv.segment_of(int(bad[0])) if bad.size else None


def value_and_gradient(
    loss: Callable[[Dict[str, torch.Tensor]], torch.Tensor],
    at: ParameterVector,
    wrt: Optional[np.ndarray] = None,
) -> Tuple[float, np.ndarray]:
    """Evaluate a scalar loss and its gradient with reverse-mode autodiff.

    Parameters
    ----------
    loss : callable
        Maps the dict of named parameter tensors to a scalar tensor.
    at : ParameterVector
        Evaluation point.
    wrt : ndarray of bool, optional
        Restricts differentiation to a subset of the flat vector; the
        returned gradient is zero elsewhere.

    Returns
    -------
    value : float
    grad : ndarray, same length as ``at``
    """
    values = torch.from_numpy(at.values.copy())
    if wrt is None:
        flat = values.requires_grad_(True)
        leaf = flat
        named = at.unpack_torch(flat)
    else:
        wrt = np.asarray(wrt, dtype=bool)
        wrt_t = torch.from_numpy(wrt)
        leaf = values[wrt_t].clone().requires_grad_(True)
        flat = values.masked_scatter(wrt_t, leaf)
        named = at.unpack_torch(flat)
        # segments wholly outside the mask enter as constants
        const = at.unpack_torch(values)
        for seg in at.segments:
            if not wrt[at.slice_of(seg.name)].any():
                named[seg.name] = const[seg.name]
    out = loss(named)
    value = float(out.detach())
    if not np.isfinite(value):
        seg = _first_bad_segment(at, at.values)
        raise NonFiniteLossError(
            f"loss is {value} (first non-finite segment: {seg})", segment=seg)
    g = None
    if out.requires_grad:
        (g,) = torch.autograd.grad(out, leaf, allow_unused=True)
    if g is None:
        g = torch.zeros_like(leaf)
    g = g.detach().numpy()
    if wrt is not None:
        full = np.zeros(at.size)
        full[np.asarray(wrt, dtype=bool)] = g
        g = full
    if not np.all(np.isfinite(g)):
        seg = _first_bad_segment(at, g)
        raise NonFiniteLossError(f"non-finite gradient in segment {seg}", segment=seg)
    return value, g
