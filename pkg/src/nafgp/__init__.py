"""Nonstationary spatial Gaussian processes with flow-warped domains."""
import torch as _torch

_torch.set_default_dtype(_torch.float64)

__version__ = "0.1.0"
