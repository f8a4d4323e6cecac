"""Masked feedforward conditioner for autoregressive flows.

The network maps a location s in R^d to the constrained parameters of the
monotone transform of every coordinate. Binary masks fixed at construction
make the parameters of coordinate k depend on s_1..s_{k-1} only; the block
for coordinate 1 has no incoming connections and is a function of its bias.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "DDSFShape",
    "MaskedDenseLayer",
    "ConditionerNetwork",
    "build_conditioner",
    "forward",
    "split_gamma",
]

# softplus(_A_BIAS) == 1, so an untrained head starts at a = 1
_A_BIAS = float(np.log(np.expm1(1.0)))


@dataclass(frozen=True)
class DDSFShape:
    """Sublayer sizes of a deep dense sigmoidal flow.

    ``inner[l]`` is the number of sigmoid units of sublayer l and
    ``outer[l]`` its output width; the last output width is 1. A single
    sublayer with ``inner=(M,)`` is the plain deep sigmoidal flow.
    """

    inner: Tuple[int, ...] = (16, 16, 16, 16, 16)
    outer: Tuple[int, ...] = (16, 16, 16, 16, 1)

    def __post_init__(self):
        if len(self.inner) != len(self.outer) or not self.inner:
            raise ValueError("inner and outer must have the same nonzero length")
        if self.outer[-1] != 1:
            raise ValueError("last sublayer must have output width 1")
        if min(self.inner) < 1 or min(self.outer) < 1:
            raise ValueError("sublayer widths must be >= 1")

    @classmethod
    def dsf(cls, m: int) -> "DDSFShape":
        return cls(inner=(m,), outer=(1,))

    @classmethod
    def uniform(cls, sublayers: int, width: int) -> "DDSFShape":
        return cls(inner=(width,) * sublayers, outer=(width,) * (sublayers - 1) + (1,))

    @property
    def n_sublayers(self) -> int:
        return len(self.inner)

    def layout(self) -> List[Tuple[str, int, Tuple[int, ...]]]:
        """Ordered (role, sublayer, shape) blocks of one coordinate's gamma.

        Order: a^1..a^L, b^1..b^L, W^1..W^{L-1}, w^L, U^2..U^L.
        """
        L = self.n_sublayers
        out = [("a", l, (self.inner[l],)) for l in range(L)]
        out += [("b", l, (self.inner[l],)) for l in range(L)]
        out += [("W", l, (self.outer[l], self.inner[l])) for l in range(L - 1)]
        out += [("w", L - 1, (self.inner[L - 1],))]
        out += [("U", l, (self.inner[l], self.outer[l - 1])) for l in range(1, L)]
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, _, shape in self.layout())


@dataclass
class MaskedDenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    mask: np.ndarray  # (out, in), 0/1, never trained
    degrees: np.ndarray  # (out,)

    def effective_weight(self) -> np.ndarray:
        return self.weight * self.mask


@dataclass
class ConditionerNetwork:
    d: int
    shape: DDSFShape
    layers: List[MaskedDenseLayer]
    activation: str = "tanh"
    input_degrees: np.ndarray = field(default=None)

    @property
    def m_k(self) -> int:
        return self.shape.n_params

    def param_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}layer{i}.weight"] = layer.weight
            out[f"{prefix}layer{i}.bias"] = layer.bias
        return out

    def set_params(self, arrays: Dict[str, np.ndarray], prefix: str = "") -> None:
        for i, layer in enumerate(self.layers):
            layer.weight = np.array(arrays[f"{prefix}layer{i}.weight"], dtype=float)
            layer.bias = np.array(arrays[f"{prefix}layer{i}.bias"], dtype=float)

    def masks_torch(self) -> List[torch.Tensor]:
        cached = getattr(self, "_mask_cache", None)
        if cached is None:
            cached = [torch.from_numpy(l.mask.astype(np.float64)) for l in self.layers]
            self._mask_cache = cached
        return cached

    def apply_split(self, params: Dict[str, torch.Tensor], s: torch.Tensor, prefix: str = ""):
        """Raw head outputs as (coordinate-1 block (1, m_k), rest (n, d-1, m_k)).

        Coordinate 1 rows of the output mask are all zero, so that block is
        the bias alone and is computed once rather than per point. ``rest``
        is None when d == 1.
        """
        mk = self.m_k
        n_layers = len(self.layers)
        w = params[f"{prefix}layer{n_layers - 1}.weight"]
        b = params[f"{prefix}layer{n_layers - 1}.bias"]
        first = b[:mk].unsqueeze(0)
        if self.d == 1:
            return first, None
        act = torch.tanh if self.activation == "tanh" else torch.sigmoid
        masks = self.masks_torch()
        h = s
        for i in range(n_layers - 1):
            wi = params[f"{prefix}layer{i}.weight"] * masks[i]
            h = act(F.linear(h, wi, params[f"{prefix}layer{i}.bias"]))
        rest = F.linear(h, w[mk:] * masks[-1][mk:], b[mk:])
        return first, rest.view(s.shape[0], self.d - 1, mk)

    def apply(self, params: Dict[str, torch.Tensor], s: torch.Tensor, prefix: str = "") -> torch.Tensor:
        """Raw (pre-activation) head outputs, shape (n, d, m_k)."""
        first, rest = self.apply_split(params, s, prefix)
        first = first.expand(s.shape[0], self.m_k).unsqueeze(1)
        return first if rest is None else torch.cat([first, rest], dim=1)


def _hidden_degrees(width: int, d: int) -> np.ndarray:
    # deterministic round-robin over 1..max(1, d-1)
    top = max(1, d - 1)
    return (np.arange(width) % top) + 1


def build_conditioner(
    d: int,
    hidden: Sequence[int],
    shape: DDSFShape,
    rng: Optional[np.random.Generator] = None,
    init_scale: float = 0.01,
    activation: str = "tanh",
) -> ConditionerNetwork:
    """Construct a masked conditioner with MADE-style degree masks.

    Parameters
    ----------
    d : int
        Input (spatial) dimension.
    hidden : sequence of int
        Hidden layer widths; may be empty.
    shape : DDSFShape
        Transform shape; sets the number of head outputs per coordinate.
    rng : numpy Generator, optional
        Source for weight initialisation (seed 0 if omitted).
    init_scale : float
        Standard deviation of all weights; biases start at zero apart from
        the ``a`` head, whose bias makes the initial map the identity.
    activation : {"tanh", "sigmoid"}
        Hidden activation.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if any(int(w) < 1 for w in hidden):
        raise ValueError("hidden widths must be >= 1")
    if activation not in ("tanh", "sigmoid"):
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    mk = shape.n_params
    in_deg = np.arange(1, d + 1)
    layers = []
    prev = in_deg
    for width in hidden:
        deg = _hidden_degrees(int(width), d)
        mask = (deg[:, None] >= prev[None, :]).astype(float)
        weight = init_scale * rng.standard_normal(mask.shape)
        layers.append(MaskedDenseLayer(weight, np.zeros(len(deg)), mask, deg))
        prev = deg
    out_deg = np.repeat(np.arange(d), mk)  # coordinate k (1-based) has degree k-1
    mask = (prev[None, :] <= out_deg[:, None]).astype(float)
    weight = init_scale * rng.standard_normal(mask.shape)
    bias = np.zeros(d * mk)
    offset = 0
    for role, _, blk in shape.layout():
        size = int(np.prod(blk))
        if role == "a":
            for k in range(d):
                bias[k * mk + offset: k * mk + offset + size] = _A_BIAS
        offset += size
    layers.append(MaskedDenseLayer(weight, bias, mask, out_deg))
    return ConditionerNetwork(d, shape, layers, activation, in_deg)


def _softmax(x: torch.Tensor) -> torch.Tensor:
    # the row max is a constant shift, so it needs no gradient
    e = torch.exp(x - x.detach().amax(dim=-1, keepdim=True))
    return e / e.sum(dim=-1, keepdim=True)


def split_gamma(raw: torch.Tensor, shape: DDSFShape) -> Dict[str, list]:
    """Apply output activations to raw head values (last axis = m_k).

    Returns a dict of lists indexed by sublayer: ``a`` (softplus), ``b``
    (identity), ``W`` and ``U`` (row-wise softmax; ``U[0]`` is None) and
    ``w`` (softmax), so all mixing weights lie on the simplex.
    """
    out = {"a": [], "b": [], "W": [], "w": None, "U": [None]}
    lead = raw.shape[:-1]
    offset = 0
    for role, _, blk in shape.layout():
        size = int(np.prod(blk))
        chunk = raw[..., offset:offset + size]
        offset += size
        if role == "a":
            out["a"].append(F.softplus(chunk))
        elif role == "b":
            out["b"].append(chunk)
        elif role == "W":
            out["W"].append(_softmax(chunk.reshape(*lead, *blk)))
        elif role == "w":
            out["w"] = _softmax(chunk)
        else:
            out["U"].append(_softmax(chunk.reshape(*lead, *blk)))
    return out


def forward(net: ConditionerNetwork, s) -> List[Dict[str, list]]:
    """Constrained flow parameters gamma_1..gamma_d at one location.

    Returns a list of length d; entry k holds numpy arrays under keys
    ``a``, ``b`` (lists over sublayers), ``W`` (list, sublayers 1..L-1),
    ``w`` (final weights) and ``U`` (list, sublayers 2..L).
    """
    s = np.asarray(s, dtype=float).reshape(1, -1)
    if s.shape[1] != net.d:
        raise ValueError(f"expected a {net.d}-dimensional location")
    params = {k: torch.from_numpy(np.asarray(v, dtype=float))
              for k, v in net.param_arrays().items()}
    with torch.no_grad():
        raw = net.apply(params, torch.from_numpy(s))[0]
        g = split_gamma(raw, net.shape)
    result = []
    for k in range(net.d):
        result.append({
            "a": [t[k].numpy() for t in g["a"]],
            "b": [t[k].numpy() for t in g["b"]],
            "W": [t[k].numpy() for t in g["W"]],
            "w": g["w"][k].numpy(),
            "U": [t[k].numpy() for t in g["U"][1:]],
        })
    return result
