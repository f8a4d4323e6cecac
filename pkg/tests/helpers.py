"""Shared constructors for tests."""
import math

import numpy as np

from nafgp.autodiff import ParameterVector
from nafgp.likelihood import FittedModel, ModelSpec


def stat_model(data, p, sigma_eps, flow=None):
    """FittedModel at given parameters, without running the optimiser."""
    arrays = {} if flow is None else dict(flow.param_arrays())
    arrays["cov.log_phi1"] = np.array(math.log(p.sigma))
    arrays["cov.log_phi2"] = np.array(math.log(p.range))
    arrays["cov.log_phi3"] = np.array(math.log(p.smoothness))
    arrays["noise.log_sigma_eps"] = np.array(math.log(sigma_eps) if sigma_eps > 0 else -np.inf)
    spec = ModelSpec("stat") if flow is None else ModelSpec("naf", flow=flow)
    return FittedModel(spec, ParameterVector.pack(arrays), data)


# acceptance results, printed by the terminal summary hook in conftest.py
ACCEPTANCE_LINES = []
