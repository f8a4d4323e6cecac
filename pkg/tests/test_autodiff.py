import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose, assert_array_equal

from nafgp.autodiff import NonFiniteLossError, ParameterVector, Segment, value_and_gradient
from nafgp.covariance import MaternParams
from nafgp.likelihood import ModelSpec, initial_parameters, make_loss
from nafgp.types import SpatialDataset


def central_differences(fun, x, step=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fun(x + e) - fun(x - e)) / (2 * step)
    return g


def test_quadratic():
    pv = ParameterVector.pack({"x": np.array([1.0, 2.0])})
    val, g = value_and_gradient(lambda P: (P["x"] ** 2).sum(), pv)
    assert val == 5.0
    assert_array_equal(g, [2.0, 4.0])


def test_constant_loss_zero_gradient():
    pv = ParameterVector.pack({"x": np.array([1.0, 2.0])})
    val, g = value_and_gradient(lambda P: torch.tensor(3.0), pv)
    assert val == 3.0
    assert_array_equal(g, [0.0, 0.0])


def test_pack_unpack_roundtrip():
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(7.0), "c": np.ones(4)}
    pv = ParameterVector.pack(arrays)
    assert pv.size == 11
    out = pv.unpack()
    for k in arrays:
        assert_array_equal(out[k], arrays[k])
    again = ParameterVector.from_schema(pv.schema(), pv.values)
    assert_array_equal(again.values, pv.values)
    assert again.segment_of(6) == "b"


def test_duplicate_segments_rejected():
    with pytest.raises(ValueError):
        ParameterVector([Segment("a", (1,)), Segment("a", (2,))])


def test_nonfinite_loss_names_segment():
    pv = ParameterVector.pack({"good": np.ones(2), "bad": np.array([1.0, np.inf])})
    with pytest.raises(NonFiniteLossError) as info:
        value_and_gradient(lambda P: P["good"].sum() + P["bad"].sum(), pv)
    assert info.value.segment == "bad"


def test_nonfinite_gradient_names_segment():
    pv = ParameterVector.pack({"a": np.ones(2), "b": np.array([0.0])})
    with pytest.raises(NonFiniteLossError) as info:
        value_and_gradient(lambda P: P["a"].sum() + torch.sqrt(P["b"]).sum(), pv)
    assert info.value.segment == "b"


def test_wrt_mask_restricts_gradient():
    pv = ParameterVector.pack({"a": np.array([1.0, 2.0]), "b": np.array([3.0])})
    mask = pv.mask(["a"])
    _, g = value_and_gradient(lambda P: (P["a"] ** 2).sum() * P["b"].sum(), pv, wrt=mask)
    assert_allclose(g, [6.0, 12.0, 0.0])


def test_linearity_of_gradients():
    rng = np.random.default_rng(0)
    pv = ParameterVector.pack({"x": rng.standard_normal(5)})
    f1 = lambda P: torch.sin(P["x"]).sum()
    f2 = lambda P: (P["x"] ** 3).prod()
    _, g1 = value_and_gradient(f1, pv)
    _, g2 = value_and_gradient(f2, pv)
    _, g12 = value_and_gradient(lambda P: f1(P) + f2(P), pv)
    assert_allclose(g12, g1 + g2, rtol=1e-13, atol=1e-15)


def test_loglik_gradient_identity_warp_matches_fd():
    rng = np.random.default_rng(1)
    data = SpatialDataset(rng.uniform(0, 1, (10, 2)), rng.standard_normal(10))
    spec = ModelSpec("stat")
    pv = initial_parameters(spec, data)
    loss = make_loss(spec, data)
    _, g = value_and_gradient(loss, pv)
    fd = central_differences(lambda v: float(loss(pv.unpack_torch(torch.from_numpy(v)))), pv.values)
    big = np.abs(g) > 1e-8
    assert_allclose(g[big], fd[big], rtol=1e-4)


def test_deterministic():
    rng = np.random.default_rng(2)
    data = SpatialDataset(rng.uniform(0, 1, (12, 2)), rng.standard_normal(12))
    spec = ModelSpec("stat")
    pv = initial_parameters(spec, data)
    loss = make_loss(spec, data)
    v1, g1 = value_and_gradient(loss, pv)
    v2, g2 = value_and_gradient(loss, pv)
    assert v1 == v2
    assert g1.tobytes() == g2.tobytes()
